//! Drives the command-line tool through train, keygen, encrypt, infer,
//! decrypt, eval-plain, benchmark and report on a tiny synthetic task.

use std::fs;
use std::path::Path;
use std::process::Command;

fn beaa(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_beaa"))
        .args(args)
        .output()
        .expect("spawn");
    assert!(
        out.status.success(),
        "beaa {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// `(argmax, logits)` per row of a logits CSV.
fn read_logits(path: &Path) -> Vec<(usize, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            let argmax = rec[2].parse().unwrap();
            let logits = rec.iter().skip(3).map(|v| v.parse().unwrap()).collect();
            (argmax, logits)
        })
        .collect()
}

#[test]
fn encrypted_pipeline_agrees_with_plaintext() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = d.join("run");
    let cfg = d.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 5\ntopology = \"desk\"\nactivation = \"poly-channel\"\nout_dir = {:?}\n\
             [data]\nsynthetic_samples = 200\nsynthetic_classes = 3\nsynthetic_shape = [2, 4, 4]\n\
             [train]\nepochs = 2\nbatch_size = 32\n\
             [he]\npreset = \"desk\"\nbatch_size = 20\n\
             [bench]\nbatch_sizes = [4, 8]\nreps = 1\n",
            run.to_str().unwrap()
        ),
    )
    .unwrap();
    let c = cfg.to_str().unwrap();
    let p = |name: &str| run.join(name).to_str().unwrap().to_string();

    beaa(&["train-teacher", "--config", c]);
    beaa(&[
        "train-student",
        "--config",
        c,
        "--teacher",
        &p("teacher.beaa"),
        "--name",
        "student_kd.beaa",
    ]);
    assert!(run.join("metrics_student_kd.csv").exists());
    assert!(run.join("resolved_config.toml").exists());

    beaa(&["keygen", "--config", c, "--keys", &p("keys")]);
    // the server copy holds no secret key
    fs::create_dir_all(run.join("server")).unwrap();
    for f in ["params.bin", "public.keys"] {
        fs::copy(run.join("keys").join(f), run.join("server").join(f)).unwrap();
    }
    beaa(&["encrypt", "--config", c, "--keys", &p("server"), "--output", &p("ct")]);
    beaa(&[
        "infer",
        "--config",
        c,
        "--model",
        &p("student_kd.beaa"),
        "--keys",
        &p("server"),
        "--input",
        &p("ct"),
        "--output",
        &p("result"),
    ]);
    beaa(&[
        "decrypt",
        "--keys",
        &p("keys"),
        "--input",
        &p("result"),
        "--output",
        &p("he.csv"),
    ]);
    beaa(&[
        "eval-plain",
        "--config",
        c,
        "--model",
        &p("student_kd.beaa"),
        "--logits",
        &p("plain.csv"),
    ]);

    let he = read_logits(&run.join("he.csv"));
    let plain = read_logits(&run.join("plain.csv"));
    assert_eq!(he.len(), 20);
    assert_eq!(plain.len(), 20);
    let agree = he.iter().zip(&plain).filter(|(a, b)| a.0 == b.0).count();
    assert!(agree as f64 >= 0.99 * he.len() as f64, "argmax agreement {agree}/20");
    let err = he
        .iter()
        .zip(&plain)
        .flat_map(|(a, b)| a.1.iter().zip(&b.1).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    assert!(err < 1e-2, "logit error {err}");

    beaa(&["benchmark", "--config", c, "--model", &p("student_kd.beaa")]);
    let bench = fs::read_to_string(run.join("benchmark.csv")).unwrap();
    assert!(bench.starts_with("M,layout,total_s,amortized_s,add_count,cmult_count,mult_count,rot_count,depth"));
    assert_eq!(bench.lines().count(), 3);

    let out = beaa(&["report", "--config", c]);
    assert!(out.contains("depth=7"), "{out}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["accuracy_groups"][0]["distilled"], true);
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nmomentum = 2.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_beaa"))
        .args(["train-teacher", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
}
