use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn aggdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aggdiff"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = aggdiff(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    aggdiff(dir, args).status.code().unwrap()
}

fn rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

const SMALL: &[&str] = &["--observed", "40", "--set", "generated=80"];

fn generate_small(dir: &Path) {
    let mut args = vec!["generate", "--dataset", "syn1", "--seed", "3", "--out", "gen"];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
}

#[test]
fn generate_defaults_to_four_times_of_500() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["generate", "--dataset", "syn1", "--out", "g"]);
    assert_eq!(stdout.lines().count(), 4);
    assert!(stdout.lines().all(|l| l.contains("observed=500 held_out=500")), "{stdout}");
    assert_eq!(rows(&dir.path().join("g/observed.csv")), 2000);
    assert_eq!(rows(&dir.path().join("g/truth.csv")), 2000);
    assert!(fs::read_to_string(dir.path().join("g/config.txt")).unwrap().contains("seed=0"));
}

#[test]
fn observed_flag_sets_rows_per_time() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--dataset", "syn2", "--observed", "10", "--out", "g"]);
    assert_eq!(rows(&dir.path().join("g/observed.csv")), 40);
}

#[test]
fn zero_iteration_training_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    ok(dir.path(), &["train", "--data", "gen/observed.csv", "--iterations", "0", "--set", "batch_size=16", "--out", "t"]);
    assert!(dir.path().join("t/checkpoint.txt").exists());
    assert_eq!(rows(&dir.path().join("t/report.csv")), 0);
}

#[test]
fn report_has_one_row_per_iteration_and_ou_trains() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    let base = ["train", "--data", "gen/observed.csv", "--iterations", "3", "--set", "batch_size=16"];
    let mut legend = base.to_vec();
    legend.extend(["--out", "t"]);
    ok(dir.path(), &legend);
    assert_eq!(rows(&dir.path().join("t/report.csv")), 3);
    let mut ou = base.to_vec();
    ou.extend(["--method", "ou", "--out", "o"]);
    ok(dir.path(), &ou);
    let ckpt = fs::read_to_string(dir.path().join("o/checkpoint.txt")).unwrap();
    assert!(ckpt.contains("log_theta"));
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    let args = [
        "train", "--data", "gen/observed.csv", "--iterations", "50", "--out", "d",
        "--set", "batch_size=16", "--set", "learning_rate=1e6", "--set", "schedule=constant",
    ];
    assert_eq!(code(dir.path(), &args), 2);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    assert_eq!(code(dir.path(), &["bogus"]), 1);
    assert_eq!(code(dir.path(), &["train", "--data", "gen/observed.csv", "--set", "nope=1", "--out", "x"]), 1);
    assert_eq!(code(dir.path(), &["train", "--data", "gen/observed.csv", "--dataset", "syn1", "--out", "x"]), 1);
    let smooth = ["smooth", "--data", "gen/observed.csv", "--k", "0", "--checkpoint", "none", "--out", "x"];
    assert_eq!(code(dir.path(), &smooth), 1);
    let filter = ["filter", "--data", "gen/observed.csv", "--k", "2", "--out", "x"];
    let out = aggdiff(dir.path(), &filter);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "dataset=syn1\nobserved=7\nseed=5\n").unwrap();
    ok(dir.path(), &["generate", "--config", "run.cfg", "--observed", "9", "--out", "g"]);
    assert_eq!(rows(&dir.path().join("g/observed.csv")), 36);
    let echoed = fs::read_to_string(dir.path().join("g/config.txt")).unwrap();
    assert!(echoed.contains("observed=9") && echoed.contains("seed=5"), "{echoed}");
}

#[test]
fn eval_cases() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("a.csv"), "sample,dim_0\n0,0\n").unwrap();
    fs::write(d.join("b.csv"), "sample,dim_0\n0,1\n").unwrap();
    fs::write(d.join("c.csv"), "sample,dim_0\n0,1\n1,2\n").unwrap();
    assert_eq!(ok(d, &["eval", "--pred", "a.csv", "--truth", "a.csv"]).trim(), "w1=0");
    assert_eq!(ok(d, &["eval", "--pred", "a.csv", "--truth", "b.csv"]).trim(), "w1=1");
    assert_eq!(code(d, &["eval", "--pred", "a.csv", "--truth", "c.csv"]), 1);
    ok(d, &["eval", "--pred", "a.csv", "--truth", "c.csv", "--subsample", "--out", "e"]);
    assert!(fs::read_to_string(d.join("e/eval.csv")).unwrap().starts_with("samples,w1\n1,"));
}

#[test]
fn plot_cases() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("empty.csv"), "sample,dim_0,dim_1\n").unwrap();
    ok(d, &["plot", "--truth", "empty.csv", "--out", "p0"]);
    assert!(!fs::read_to_string(d.join("p0/scatter.svg")).unwrap().contains("<circle"));

    fs::write(d.join("t.csv"), "sample,dim_0,dim_1\n0,0,0\n1,1,1\n").unwrap();
    fs::write(d.join("p.csv"), "sample,dim_0,dim_1\n0,0.5,0.2\n").unwrap();
    ok(d, &["plot", "--truth", "t.csv", "--pred", "p.csv", "--out", "p1"]);
    let scatter = fs::read_to_string(d.join("p1/scatter.svg")).unwrap();
    assert!(scatter.contains(">true<") && scatter.contains(">predicted<"));
    assert!(d.join("p1/hist_dim1.svg").exists());
    ok(d, &["plot", "--truth", "t.csv", "--pred", "p.csv", "--out", "p2", "--bins", "5"]);
    assert_eq!(fs::read(d.join("p1/scatter.svg")).unwrap(), fs::read(d.join("p2/scatter.svg")).unwrap());

    fs::write(d.join("w.csv"), "sample,dim_0,dim_1,dim_2\n0,0,0,0\n").unwrap();
    let out = aggdiff(d, &["plot", "--truth", "w.csv", "--out", "p3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--dims"));
    ok(d, &["plot", "--truth", "w.csv", "--out", "p3", "--dims", "0,2"]);
}

fn pipeline(dir: &Path) {
    generate_small(dir);
    let common = ["--data", "gen/observed.csv", "--process", "syn1", "--seed", "3", "--set", "batch_size=16"];
    let run = |extra: &[&str]| {
        let mut args = extra.to_vec();
        args.extend_from_slice(&common);
        ok(dir, &args);
    };
    run(&["train", "--task", "filter", "--k", "2", "--iterations", "4", "--out", "tf"]);
    run(&["filter", "--k", "2", "--checkpoint", "tf/checkpoint.txt", "--truth", "gen/truth.csv", "--head-iterations", "3", "--out", "f"]);
    run(&["train", "--task", "smooth", "--k", "2", "--iterations", "4", "--out", "ts"]);
    run(&["smooth", "--k", "2", "--checkpoint", "ts/checkpoint.txt", "--truth", "gen/truth.csv", "--head-iterations", "3", "--out", "s"]);
    run(&["train", "--task", "filter", "--k", "2", "--method", "nn", "--iterations", "4", "--out", "tn"]);
    run(&["filter", "--k", "2", "--checkpoint", "tn/checkpoint.txt", "--truth", "gen/truth.csv", "--out", "fn"]);
    ok(dir, &["eval", "--pred", "f/prediction.csv", "--truth", "gen/truth.csv", "--k", "2", "--out", "e"]);
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in fs::read_dir(dir).unwrap() {
        let sub = sub.unwrap().path();
        for f in fs::read_dir(&sub).unwrap() {
            let f = f.unwrap().path();
            let name = f.strip_prefix(dir).unwrap().display().to_string();
            files.push((name, fs::read(&f).unwrap()));
        }
    }
    files.sort();
    files
}

#[test]
fn pipeline_outputs_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (fa, fb) = (outputs(a.path()), outputs(b.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for expected in ["f/eval.csv", "f/prediction.csv", "f/heads.txt", "s/weights.csv", "fn/eval.csv", "tf/checkpoint.txt"] {
        assert!(names.contains(&expected), "missing {expected}: {names:?}");
    }
    assert_eq!(rows(&a.path().join("f/prediction.csv")), 40);
    assert_eq!(fs::read_to_string(a.path().join("s/weights.csv")).unwrap().lines().count(), 4);
    assert_eq!(fa, fb);
}

#[test]
fn filter_without_truth_writes_no_record_and_honors_samples() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    generate_small(d);
    ok(d, &["train", "--data", "gen/observed.csv", "--method", "ou", "--iterations", "2", "--set", "batch_size=16", "--out", "t"]);
    ok(d, &["filter", "--data", "gen/observed.csv", "--checkpoint", "t/checkpoint.txt", "--samples", "17", "--out", "f"]);
    assert!(!d.join("f/eval.csv").exists());
    assert_eq!(rows(&d.join("f/prediction.csv")), 17);
}
