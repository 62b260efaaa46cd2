use kelab_core::data::targets_for;
use kelab_core::model::{forward, init_model, loss_lm, Checkpoint, ModelConfig};
use kelab_core::tensor::{finite_diff_grad, Tape, Tensor};
use kelab_core::training::batch_gradient;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn zero_input_gives_zero_output_and_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3, 4]));
    let gate = tape.param(random(&[6, 4], &mut rng));
    let up = tape.param(random(&[6, 4], &mut rng));
    let down = tape.param(random(&[6, 4], &mut rng));
    let ffn = tape.gated_ffn(x, gate, up, down).unwrap();
    assert!(tape.value(ffn.out).data().iter().all(|&v| v == 0.0));
    assert!(ffn.coeff.data().iter().all(|&v| v == 0.0));
}

#[test]
fn hand_computed_coefficients() {
    // d = 1, m = 2: gate pre-activations 1 and -1, up pre-activations 2 and 1.
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0]]).unwrap());
    let gate = tape.param(Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap());
    let up = tape.param(Tensor::from_rows(&[vec![2.0], vec![1.0]]).unwrap());
    let down = tape.param(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    let ffn = tape.gated_ffn(x, gate, up, down).unwrap();
    let want = [sigmoid(1.0) * 2.0, (sigmoid(-1.0) * -1.0_f64).abs()];
    for (a, b) in ffn.coeff.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    let signed = tape.value(ffn.act).data().to_vec();
    assert!(signed[1] < 0.0);
    assert!((tape.value(ffn.out).data()[0] - (signed[0] + signed[1])).abs() < 1e-15);
}

#[test]
fn scaling_an_up_row_scales_its_coefficient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[5, 4], &mut rng);
    let gate = random(&[6, 4], &mut rng);
    let up = random(&[6, 4], &mut rng);
    let down = random(&[6, 4], &mut rng);
    let coeff = |up: &Tensor| {
        let mut tape = Tape::new();
        let vars = [x.clone(), gate.clone(), up.clone(), down.clone()].map(|t| tape.param(t));
        tape.gated_ffn(vars[0], vars[1], vars[2], vars[3])
            .unwrap()
            .coeff
    };
    let base = coeff(&up);
    let mut scaled = up.clone();
    scaled.row_mut(3).iter_mut().for_each(|w| *w *= -2.5);
    let after = coeff(&scaled);
    for t in 0..5 {
        for i in 0..6 {
            let factor = if i == 3 { 2.5 } else { 1.0 };
            assert!((after.at(t, i) - factor * base.at(t, i)).abs() < 1e-12);
        }
    }
}

#[test]
fn down_gradient_is_signed_activation_times_output_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(&[1, 4], &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[1, 4], &mut rng));
    let gate = tape.param(random(&[6, 4], &mut rng));
    let up = tape.param(random(&[6, 4], &mut rng));
    let down = tape.param(random(&[6, 4], &mut rng));
    let ffn = tape.gated_ffn(x, gate, up, down).unwrap();
    // L = Σ_j out_j · w_j, so ∂L/∂out_j = w_j.
    let wv = tape.constant(w.clone());
    let prod = tape.mul(ffn.out, wv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let act = tape.value(ffn.act).clone();
    let g = tape.grad(down).unwrap().to_vec();
    for i in 0..6 {
        for j in 0..4 {
            assert!((g[i * 4 + j] - act.at(0, i) * w.at(0, j)).abs() < 1e-10);
        }
    }
}

#[test]
fn attention_temperature_two_fixture() {
    // One head, d = 1: row 1 attends with weights softmax([q1·k0, q1·k1] / 2).
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_rows(&[vec![0.5], vec![2.0]]).unwrap());
    let k = tape.constant(Tensor::from_rows(&[vec![1.0], vec![-1.5]]).unwrap());
    let v = tape.constant(Tensor::from_rows(&[vec![3.0], vec![-1.0]]).unwrap());
    let out = tape.causal_attention(q, k, v, 1, 2.0).unwrap();
    let probs = tape.attention_probs(out).unwrap().to_vec();
    let (a, b) = ((2.0f64 * 1.0 / 2.0).exp(), (2.0f64 * -1.5 / 2.0).exp());
    let (p0, p1) = (a / (a + b), b / (a + b));
    assert_eq!(probs[0], 1.0);
    assert_eq!(probs[1], 0.0);
    assert!((probs[2] - p0).abs() < 1e-15 && (probs[3] - p1).abs() < 1e-15);
    assert!((tape.value(out).data()[1] - (3.0 * p0 - p1)).abs() < 1e-14);
}

fn small_model() -> Checkpoint {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        ffn_inner: 16,
        n_heads: 2,
        vocab_size: 32,
        max_seq_len: 8,
        norm_eps: 1e-5,
        seed: 11,
    };
    let mut ckpt = init_model(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for t in ckpt.params.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    ckpt
}

/// Token-weighted mean loss over rows, from the plain forward pass.
fn reference_loss(ckpt: &Checkpoint, rows: &[&[u32]]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for r in rows {
        let targets = targets_for(r);
        let n = targets.iter().filter(|t| t.is_some()).count();
        total += loss_lm(&forward(ckpt, r).unwrap(), &targets).unwrap() * n as f64;
        count += n;
    }
    total / count as f64
}

#[test]
fn batch_gradient_matches_finite_differences() {
    let ckpt = small_model();
    let rows: [&[u32]; 2] = [&[1, 5, 9, 30, 2, 7, 7, 4], &[1, 3, 3, 12, 0, 0, 0, 0]];
    let (loss, grads) = batch_gradient(&ckpt, &rows).unwrap();
    assert!((loss - reference_loss(&ckpt, &rows)).abs() < 1e-12);
    let n_tensors = ckpt.params.tensors().len();
    assert_eq!(grads.len(), n_tensors);
    let mut worst = 0.0f64;
    for k in 0..n_tensors {
        let original = ckpt.params.tensors()[k].clone();
        let fd = finite_diff_grad(
            |t| {
                let mut c = ckpt.clone();
                *c.params.tensors_mut()[k] = t.clone();
                Ok(reference_loss(&c, &rows))
            },
            &original,
            1e-5,
        )
        .unwrap();
        for (a, b) in grads[k].iter().zip(fd.data()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}
