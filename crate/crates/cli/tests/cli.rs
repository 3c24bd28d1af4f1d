use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn hemf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hemf")).current_dir(dir).args(args).output().expect("run hemf")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hemf(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

/// Synthetic ratings split into tr.csv / te.csv.
fn dataset() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "r.csv", "--labels", "l.csv", "--users", "50", "--items", "30", "--latent-dim", "2", "--density", "0.2"]);
    ok(d, &["split", "--input", "r.csv", "--train-out", "tr.csv", "--test-out", "te.csv", "--seed", "3"]);
    dir
}

#[test]
fn synth_split_fit_eval_predict() {
    let dir = dataset();
    let d = dir.path();
    let labels = fs::read_to_string(d.join("l.csv")).unwrap();
    assert_eq!(labels.lines().count(), 1 + 50 + 30);
    let train = fs::read_to_string(d.join("tr.csv")).unwrap().lines().count();
    let test = fs::read_to_string(d.join("te.csv")).unwrap().lines().count();
    assert_eq!(train + test, 300);
    assert_eq!(train, 270);

    let summary = json(&ok(
        d,
        &["fit", "--train", "tr.csv", "--test", "te.csv", "--latent-dim", "2", "--max-sweeps", "15", "--metrics", "m.csv", "--checkpoint", "f.ckpt"],
    ));
    assert_eq!(summary["sweeps"], 15);
    let metrics = fs::read_to_string(d.join("m.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("phase,step,elbo,train_rmse,test_rmse,D,K,wall_ms"));
    let last = lines.last().unwrap();
    assert!(last.starts_with("sweep,15,"));

    let eval = json(&ok(d, &["eval", "--checkpoint", "f.ckpt", "--test", "te.csv"]));
    assert_eq!(eval["ratings"], test as u64);
    assert_eq!(eval["rmse"], summary["test_rmse"]);

    fs::write(d.join("p.csv"), "0,0\nnobody,0\n").unwrap();
    let preds = ok(d, &["predict", "--checkpoint", "f.ckpt", "--pairs", "p.csv", "--clip", "-1,1"]);
    let rows: Vec<&str> = preds.lines().collect();
    assert_eq!(rows[0], "user,item,prediction");
    assert_eq!(rows.len(), 3);
    for row in &rows[1..] {
        let p: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((-1.0..=1.0).contains(&p));
    }
}

#[test]
fn runs_without_timing_are_byte_identical() {
    let dir = dataset();
    let d = dir.path();
    for name in ["a", "b"] {
        let m = format!("{name}.csv");
        let s = format!("{name}.json");
        ok(d, &["fit", "--train", "tr.csv", "--latent-dim", "2", "--max-sweeps", "5", "--no-timing", "--metrics", &m, "--summary", &s]);
    }
    assert_eq!(fs::read(d.join("a.csv")).unwrap(), fs::read(d.join("b.csv")).unwrap());
    assert_eq!(fs::read(d.join("a.json")).unwrap(), fs::read(d.join("b.json")).unwrap());
    assert!(fs::read_to_string(d.join("a.csv")).unwrap().lines().nth(1).unwrap().ends_with(','));
}

#[test]
fn resumed_stream_matches_uninterrupted() {
    let dir = dataset();
    let d = dir.path();
    let base = ["stream", "--train", "tr.csv", "--test", "te.csv", "--latent-dim", "2", "--chunk-size", "20", "--propagation", "1", "--empirical-every", "4", "--no-timing", "--seed", "5"];
    let with = |extra: &[&str]| -> Vec<String> { base.iter().chain(extra).map(|s| s.to_string()).collect() };
    let run = |args: Vec<String>| ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>());

    run(with(&["--metrics", "full.csv", "--summary", "full.json"]));
    run(with(&["--metrics", "part.csv", "--checkpoint", "s.ckpt", "--stop-after", "6"]));
    let partial = fs::read_to_string(d.join("part.csv")).unwrap();
    assert_eq!(partial.lines().count(), 7);
    run(with(&["--metrics", "part.csv", "--resume", "s.ckpt", "--summary", "part.json"]));

    assert_eq!(fs::read_to_string(d.join("part.csv")).unwrap(), fs::read_to_string(d.join("full.csv")).unwrap());
    assert_eq!(fs::read(d.join("part.json")).unwrap(), fs::read(d.join("full.json")).unwrap());
    let summary = json(&fs::read_to_string(d.join("full.json")).unwrap());
    assert_eq!(summary["chunks"], 14);
}

#[test]
fn chunk_file_with_revision_and_sgd() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.txt"), "# two chunks\na,x,4\nb,y,2\n\na,x,5,4\nb,x,3\n").unwrap();
    let s = json(&ok(d, &["stream", "--chunks", "c.txt", "--latent-dim", "2"]));
    assert_eq!(s["chunks"], 2);
    assert_eq!(s["observed"], 3);

    let s = json(&ok(d, &["stream", "--chunks", "c.txt", "--latent-dim", "2", "--algo", "sgd", "--metrics", "m.csv"]));
    assert_eq!(s["algo"], "sgd");
    let m = fs::read_to_string(d.join("m.csv")).unwrap();
    assert!(m.lines().nth(2).unwrap().starts_with("sgd,2,,"));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = dataset();
    let d = dir.path();
    fs::write(d.join("run.conf"), "latent_dim = 3\nmode = conjugate\nmax_sweeps = 4\nsigma2 = 0.5\n").unwrap();
    let s = json(&ok(d, &["fit", "--train", "tr.csv", "--config", "run.conf", "--sigma2", "0.25"]));
    assert_eq!(s["sweeps"], 4);
    assert_eq!(s["hyperparameters"]["latent_dim"], 3);
    assert_eq!(s["hyperparameters"]["sigma2"], 0.25);
    assert_eq!(s["hyperparameters"]["community_update"], "conjugate");

    fs::write(d.join("bad.conf"), "latent_dimension = 3\n").unwrap();
    let out = hemf(d, &["fit", "--train", "tr.csv", "--config", "bad.conf"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(hemf(d, &["fit", "--train", "missing.csv"]).status.code(), Some(2));

    fs::write(d.join("bad.csv"), "1,2,3\n1,2\n").unwrap();
    let out = hemf(d, &["fit", "--train", "bad.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    assert_eq!(hemf(d, &["fit", "--train", "bad.csv", "--mode", "sideways"]).status.code(), Some(2));

    let ratings: String = (0..40).map(|k| format!("{},{},{}\n", k % 7, k % 5, (k % 5) as f64)).collect();
    fs::write(d.join("r.csv"), ratings).unwrap();
    let out = hemf(d, &["stream", "--algo", "sgd", "--train", "r.csv", "--sgd-step", "1000", "--sgd-decay", "0"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
