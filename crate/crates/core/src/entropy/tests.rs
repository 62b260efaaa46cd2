use proptest::prelude::*;

use super::*;
use crate::model::{init_model, ModelConfig};

fn direct_entropy(c: &[f64]) -> f64 {
    let z: f64 = c.iter().sum();
    let mut h = 0.0;
    for &x in c {
        if x > 0.0 {
            h -= (x / z) * (x / z).ln();
        }
    }
    h
}

fn stats_of(means: Vec<Vec<f64>>) -> CoefficientStats {
    CoefficientStats::from_means(means, 1, CoefficientMode::AbsSwiglu).unwrap()
}

/// A trace carrying only coefficients, enough for accumulation.
fn coeff_trace(layers: Vec<Vec<Vec<f64>>>) -> InstrumentationTrace {
    let coefficients: Vec<Tensor> = layers
        .iter()
        .map(|rows| Tensor::from_rows(rows).unwrap())
        .collect();
    let t = coefficients[0].shape()[0];
    let m = coefficients[0].shape()[1];
    InstrumentationTrace {
        gate_pre: coefficients.clone(),
        up_pre: coefficients
            .iter()
            .map(|_| Tensor::full(&[t, m], 1.0))
            .collect(),
        ffn_inputs: Vec::new(),
        attention: coefficients
            .iter()
            .map(|_| Tensor::zeros(&[1, t, t]))
            .collect(),
        logits: Tensor::zeros(&[t, 2]),
        attn_temperature: 1.0,
        coefficients,
    }
}

#[test]
fn uniform_one_hot_and_direct_formula() {
    let h = knowledge_entropy(&stats_of(vec![vec![0.7; 256], vec![3.0; 256]])).unwrap();
    for x in &h.per_layer {
        assert!((x - 256f64.ln()).abs() < 1e-12);
    }
    assert!((h.total - 2.0 * 256f64.ln()).abs() < 1e-12);

    let mut one_hot = vec![0.0; 16];
    one_hot[5] = 2.0;
    assert_eq!(
        knowledge_entropy(&stats_of(vec![one_hot])).unwrap().total,
        0.0
    );

    let c = vec![0.1, 0.2, 0.3, 0.4];
    let expected =
        -(0.1f64 * 0.1f64.ln() + 0.2 * 0.2f64.ln() + 0.3 * 0.3f64.ln() + 0.4 * 0.4f64.ln());
    let got = knowledge_entropy(&stats_of(vec![c])).unwrap().total;
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn degenerate_and_empty_stats_are_errors() {
    let err = knowledge_entropy(&stats_of(vec![vec![1.0, 1.0], vec![0.0, 0.0]])).unwrap_err();
    assert!(matches!(err, Error::DegenerateLayer { layer: 1 }));
    let empty = CoefficientStats::new(1, 4, CoefficientMode::AbsSwiglu);
    assert!(matches!(knowledge_entropy(&empty), Err(Error::Contract(_))));
    assert!(CoefficientStats::from_means(vec![vec![-1.0]], 1, CoefficientMode::AbsSwiglu).is_err());
}

#[test]
fn instance_mean_precedes_dataset_mean() {
    let mut s = CoefficientStats::new(1, 2, CoefficientMode::AbsSwiglu);
    s.accumulate(&coeff_trace(vec![vec![vec![1.0, 3.0]]]))
        .unwrap();
    assert_eq!(s.means[0], vec![1.0, 3.0]);

    // u = mean of 3 tokens = [2, 0]; v = single token [0, 4]
    s = CoefficientStats::new(1, 2, CoefficientMode::AbsSwiglu);
    s.accumulate(&coeff_trace(vec![vec![
        vec![1.0, 0.0],
        vec![2.0, 0.0],
        vec![3.0, 0.0],
    ]]))
    .unwrap();
    s.accumulate(&coeff_trace(vec![vec![vec![0.0, 4.0]]]))
        .unwrap();
    assert_eq!(s.means[0], vec![1.0, 2.0]);
    assert_eq!(s.n_instances, 2);
    // pooling all four tokens would give [1.5, 1.0]
    assert_ne!(s.means[0], vec![1.5, 1.0]);

    let wrong = coeff_trace(vec![vec![vec![1.0, 2.0, 3.0]]]);
    assert!(s.accumulate(&wrong).is_err());
}

#[test]
fn relu_gate_mode() {
    let g = Tensor::from_rows(&[vec![1.0, -0.5, 0.0, 2.0]]).unwrap();
    let u = Tensor::from_rows(&[vec![2.0, 3.0, 5.0, -1.0]]).unwrap();
    assert_eq!(
        relu_gate_coefficients(&g, &u).unwrap().data(),
        &[2.0, 0.0, 0.0, 0.0]
    );
    let neg = Tensor::full(&[3, 4], -0.1);
    assert!(relu_gate_coefficients(&neg, &u).is_err());
    let all_off = relu_gate_coefficients(&neg, &Tensor::full(&[3, 4], 7.0)).unwrap();
    assert!(all_off.data().iter().all(|&x| x == 0.0));
}

fn tiny() -> Checkpoint {
    init_model(&ModelConfig::tiny(11)).unwrap()
}

#[test]
fn attention_entropy_position_zero_and_uniform_prefix() {
    let mut ckpt = tiny();
    for layer in &mut ckpt.params.layers {
        layer.wq.data_mut().fill(0.0);
    }
    let trace = forward(&ckpt, &[4, 5, 6, 7, 8]).unwrap();
    let t = 5;
    for l in 0..trace.n_layers() {
        for h in 0..trace.n_heads() {
            let a = trace.attention_head(l, h);
            assert_eq!(normalized_entropy(&a.row(0)[..1]), Some(0.0));
            for j in 0..t {
                let hj = normalized_entropy(&a.row(j)[..=j]).unwrap();
                assert!((hj - ((j + 1) as f64).ln()).abs() < 1e-12);
            }
        }
    }
    let expected: f64 = (1..=t).map(|k| (k as f64).ln()).sum::<f64>() / t as f64;
    for x in instance_attention_entropy(&trace) {
        assert!((x - expected).abs() < 1e-12);
    }
}

#[test]
fn attention_entropy_matches_double_loop() {
    let mut ckpt = tiny();
    for t in ckpt.params.tensors_mut() {
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            *x += 0.3 * ((i * 7919 % 113) as f64 / 113.0 - 0.5);
        }
    }
    let set = vec![vec![1, 9, 4, 33, 2], vec![1, 60, 61]];
    let (per_layer, total) = attention_entropy(&ckpt, &set).unwrap();
    let cfg = &ckpt.config;
    let mut oracle = vec![0.0; cfg.n_layers];
    for inst in &set {
        let trace = forward(&ckpt, inst).unwrap();
        let t = inst.len();
        for (l, o) in oracle.iter_mut().enumerate() {
            let mut acc = 0.0;
            for h in 0..cfg.n_heads {
                for j in 0..t {
                    let row = &trace.attention_head(l, h).row(j)[..=j].to_vec();
                    acc -= row
                        .iter()
                        .filter(|&&p| p > 0.0)
                        .map(|p| p * p.ln())
                        .sum::<f64>();
                }
            }
            *o += acc / (t * cfg.n_heads) as f64 / set.len() as f64;
        }
    }
    for (a, b) in per_layer.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10);
        let bound = set
            .iter()
            .map(|s| (1..=s.len()).map(|k| (k as f64).ln()).sum::<f64>() / s.len() as f64)
            .sum::<f64>()
            / set.len() as f64;
        assert!(*a >= 0.0 && *a <= bound + 1e-12);
    }
    assert!((total - oracle.iter().sum::<f64>()).abs() < 1e-10);
}

#[test]
fn next_token_entropy_limits_and_fixture() {
    let mut ckpt = tiny();
    ckpt.params.final_norm.data_mut().fill(0.0);
    let h = next_token_entropy(&ckpt, &[vec![3, 4, 5], vec![7]]).unwrap();
    assert!((h - 64f64.ln()).abs() < 1e-12);

    let logits = Tensor::from_rows(&[vec![1.0, 2.0, 0.5], vec![0.0, 0.0, -3.0]]).unwrap();
    let ent = |row: &[f64]| {
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        -row.iter()
            .map(|x| (x.exp() / z) * (x.exp() / z).ln())
            .sum::<f64>()
    };
    let expected = (ent(&[1.0, 2.0, 0.5]) + ent(&[0.0, 0.0, -3.0])) / 2.0;
    assert!((instance_next_token_entropy(&logits) - expected).abs() < 1e-12);

    let sharp = Tensor::from_rows(&[vec![0.0, 800.0, 0.0]]).unwrap();
    assert!(instance_next_token_entropy(&sharp) < 1e-12);
}

#[test]
fn measure_agrees_with_separate_passes() {
    let ckpt = tiny();
    let set = vec![
        vec![1, 2, 3, 4],
        vec![1, 8, 9],
        vec![1, 30, 31, 32, 33, 0, 0],
    ];
    let (stats, report) = measure(&ckpt, &set, CoefficientMode::AbsSwiglu, "fixture").unwrap();
    assert_eq!(stats.n_instances, 3);
    let mut manual = CoefficientStats::new(2, 32, CoefficientMode::AbsSwiglu);
    for s in &set {
        manual
            .accumulate(&forward(&ckpt, strip_padding(s)).unwrap())
            .unwrap();
    }
    assert_eq!(manual, stats);
    let (att, att_total) = attention_entropy(&ckpt, &set).unwrap();
    assert_eq!(att, report.attention);
    assert_eq!(att_total, report.attention_total);
    assert_eq!(
        Some(next_token_entropy(&ckpt, &set).unwrap()),
        report.next_token
    );
    assert!((report.knowledge.iter().sum::<f64>() - report.knowledge_total).abs() < 1e-12);
    for h in &report.knowledge {
        assert!(*h >= 0.0 && *h <= 32f64.ln() + 1e-12);
    }
    assert!(measure(&ckpt, &[], CoefficientMode::AbsSwiglu, "x").is_err());
}

#[test]
fn report_csv_and_stats_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny();
    let set = vec![vec![1, 2, 3, 4], vec![1, 8, 9]];
    let (stats, mut report) = measure(&ckpt, &set, CoefficientMode::ReluGate, "slice-7").unwrap();
    let mut second = report.clone();
    second.step = 40;
    second.next_token = None;
    let p = dir.path().join("entropy.csv");
    write_reports(&p, &[report.clone(), second.clone()]).unwrap();
    let back = read_reports(&p).unwrap();
    assert_eq!(back, vec![report.clone(), second]);
    assert_eq!(back[0].mode, CoefficientMode::ReluGate);
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.contains("step,layer,h_knowledge,h_attention,h_next_token"));
    assert_eq!(text.lines().filter(|l| l.contains(",TOTAL,")).count(), 2);

    report.mode = CoefficientMode::AbsSwiglu;
    assert!(write_reports(&p, &[report, back[0].clone()]).is_err());

    let sp = dir.path().join("stats.kelab");
    stats
        .save(&sp, &ckpt.config, 3, &[("source", "x")])
        .unwrap();
    let (loaded, header) = CoefficientStats::load(&sp).unwrap();
    assert_eq!(loaded.n_instances, 2);
    assert_eq!(loaded.mode, CoefficientMode::ReluGate);
    assert_eq!(header.step, 3);
    assert_eq!(header.meta["source"], "x");
    for (a, b) in loaded
        .means
        .iter()
        .flatten()
        .zip(stats.means.iter().flatten())
    {
        assert_eq!(*a, *b as f32 as f64);
    }
    assert!(CoefficientStats::load(&dir.path().join("missing")).is_err());
}

fn coeff_vec(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..10.0, m)
}

proptest! {
    #[test]
    fn streaming_equals_two_pass(
        instances in prop::collection::vec(
            (1usize..6).prop_flat_map(|t| prop::collection::vec(coeff_vec(4), t)), 1..64),
        seed in any::<u64>(),
    ) {
        let mut order: Vec<usize> = (0..instances.len()).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut s = CoefficientStats::new(1, 4, CoefficientMode::AbsSwiglu);
        for &i in &order {
            s.accumulate(&coeff_trace(vec![instances[i].clone()])).unwrap();
        }
        let mut oracle = vec![0.0; 4];
        for inst in &instances {
            for tok in inst {
                for (o, x) in oracle.iter_mut().zip(tok) {
                    *o += x / inst.len() as f64 / instances.len() as f64;
                }
            }
        }
        for (a, b) in s.means[0].iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_is_scale_invariant_and_bounded(c in coeff_vec(32), k in 1e-3f64..1e3) {
        prop_assume!(c.iter().sum::<f64>() > 0.0);
        let h = normalized_entropy(&c).unwrap();
        let scaled: Vec<f64> = c.iter().map(|x| x * k).collect();
        prop_assert!((normalized_entropy(&scaled).unwrap() - h).abs() < 1e-12);
        prop_assert!(h >= 0.0 && h <= 32f64.ln() + 1e-12);
        prop_assert!((h - direct_entropy(&c)).abs() < 1e-12);
    }

    #[test]
    fn lifting_lowest_entries_to_the_mean_raises_entropy(c in coeff_vec(16), p in 1usize..100) {
        let mean = c.iter().sum::<f64>() / c.len() as f64;
        prop_assume!(mean > 0.0 && c.iter().any(|&x| (x - mean).abs() > 1e-6));
        let mut sorted = c.clone();
        sorted.sort_by(f64::total_cmp);
        let k = ((p as f64 / 100.0) * c.len() as f64).ceil() as usize;
        let t = sorted[k - 1];
        let lifted: Vec<f64> = c.iter().map(|&x| if x <= t { mean } else { x }).collect();
                prop_assert!(normalized_entropy(&lifted).unwrap() > normalized_entropy(&c).unwrap());
    }
}
