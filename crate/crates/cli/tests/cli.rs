use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 9
[model]
n_layers = 2
d_model = 16
ffn_inner = 32
n_heads = 2
vocab_size = 1024
max_seq_len = 64
[data]
seq_len = 32
pretrain_documents = 160
pretrain_entities = 16
continual_documents = 100
continual_entities = 8
n_para_items = 1
n_once_items = 2
retention_items = 8
[pretrain]
batch_size = 4
peak_lr = 2e-3
fractions = [0.1, 0.5, 1.0]
[measure]
n_instances = 6
[continual]
batch_size = 4
"#;

fn kelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kelab"))
        .args(args)
        .env("KELAB_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, SMALL).unwrap();
    let pt = tmp.path().join("pt");

    let out = kelab(&["pretrain", "--config", p(&cfg), "--out", p(&pt)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let entropy = fs::read_to_string(pt.join("entropy.csv")).unwrap();
    assert_eq!(entropy.lines().count(), 4);
    for f in ["0.100", "0.500", "1.000"] {
        assert!(pt.join(format!("checkpoints/frac-{f}.kelab")).is_file());
    }

    // an existing run directory needs --force
    let again = kelab(&["pretrain", "--config", p(&cfg), "--out", p(&pt)]);
    assert_eq!(code(&again), 2);
    let forced = kelab(&["pretrain", "--config", p(&cfg), "--out", p(&pt), "--force"]);
    assert_eq!(code(&forced), 0);
    assert_eq!(fs::read_to_string(pt.join("entropy.csv")).unwrap(), entropy);

    let ckpt = pt.join("checkpoints/frac-1.000.kelab");
    let m = tmp.path().join("m");
    let out = kelab(&[
        "measure",
        "--checkpoint",
        p(&ckpt),
        "--corpus",
        p(&pt.join("data/pretrain.txt")),
        "--vocab",
        p(&pt.join("data/vocab.txt")),
        "--mode",
        "abs-swiglu",
        "--mode",
        "relu-gate",
        "--n-instances",
        "5",
        "--out",
        p(&m),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(
        m.join("entropy-abs-swiglu.csv").is_file() && m.join("entropy-relu-gate.csv").is_file()
    );

    let r = tmp.path().join("r");
    let out = kelab(&[
        "resuscitate",
        "--checkpoint",
        p(&ckpt),
        "--stats",
        p(&m.join("stats-abs-swiglu.kelab")),
        "--p",
        "50",
        "--q",
        "2",
        "--out",
        p(&r),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(r.join("plan.csv").is_file());

    let cl = tmp.path().join("cl");
    let out = kelab(&[
        "continual",
        "--config",
        p(&cfg),
        "--checkpoint",
        p(&r.join("checkpoint.kelab")),
        "--reference",
        p(&ckpt),
        "--out",
        p(&cl),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("a = ") && stdout.contains("f = "));

    let cl_none = tmp.path().join("cl_none");
    let out = kelab(&[
        "continual",
        "--config",
        p(&cfg),
        "--checkpoint",
        p(&pt.join("checkpoints/frac-0.100.kelab")),
        "--inject",
        "none",
        "--out",
        p(&cl_none),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let series = tmp.path().join("series.csv");
    let out = kelab(&["report", "--out", p(&series), p(&pt), p(&cl), p(&cl_none)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&series).unwrap();
    assert!(text.starts_with("series,x,y,run_id\n"));
    assert!(text.contains("h_knowledge,0.1,"));
    assert!(text.contains(",cl_none\n") && text.contains(",cl\n") && text.contains(",pt\n"));

    let missing = kelab(&["report", "--out", p(&series), p(&m)]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing metrics"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // config error
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nunknown_key = 3\n").unwrap();
    assert_eq!(
        code(&kelab(&[
            "pretrain",
            "--config",
            p(&cfg),
            "--out",
            p(&tmp.path().join("x"))
        ])),
        2
    );
    assert_eq!(
        code(&kelab(&[
            "pretrain",
            "--config",
            p(&tmp.path().join("none.toml"))
        ])),
        2
    );
    assert_eq!(code(&kelab(&["bogus-subcommand"])), 2);

    // unreadable checkpoint
    let junk = tmp.path().join("junk.kelab");
    fs::write(&junk, b"not a container").unwrap();
    let out = kelab(&[
        "resuscitate",
        "--checkpoint",
        p(&junk),
        "--stats",
        p(&junk),
        "--p",
        "50",
        "--q",
        "1",
        "--out",
        p(&tmp.path().join("r")),
    ]);
    assert_eq!(code(&out), 4);
    let out = kelab(&[
        "resuscitate",
        "--checkpoint",
        p(&tmp.path().join("absent.kelab")),
        "--stats",
        p(&junk),
        "--p",
        "50",
        "--q",
        "1",
        "--out",
        p(&tmp.path().join("r")),
    ]);
    assert_eq!(code(&out), 4);

    // diverging training
    let hot = SMALL.replace("peak_lr = 2e-3", "peak_lr = 1e300");
    let cfg = tmp.path().join("hot.toml");
    fs::write(&cfg, hot).unwrap();
    let out = kelab(&[
        "pretrain",
        "--config",
        p(&cfg),
        "--out",
        p(&tmp.path().join("hot")),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));

    let out = Command::new(env!("CARGO_BIN_EXE_kelab"))
        .args(["report", "--out", "x.csv", "y"])
        .env("KELAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
