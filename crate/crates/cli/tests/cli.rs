use std::path::Path;
use std::process::{Command, Output};

fn freqattack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqattack")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = freqattack(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    freqattack(args).status.code().unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn prepare(dir: &Path) {
    let data = s(&dir.join("data.cft"));
    ok(&["gen-data", "--seed", "2", "--n-train", "40", "--n-test", "20", "--out", &data]);
    for (arch, name) in [("smallcnn_a", "a"), ("smallmlp", "m"), ("smallcnn_b", "b")] {
        let out = s(&dir.join(format!("{name}.cfw")));
        let text = ok(&["train", "--arch", arch, "--data", &data, "--epochs", "1", "--seed", "1", "--out", &out]);
        assert!(text.contains("test accuracy"));
    }
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let (data, a, m, b) = (s(&d.join("data.cft")), s(&d.join("a.cfw")), s(&d.join("m.cfw")), s(&d.join("b.cfw")));
    let targets = format!("{m},{b}");
    let out = s(&d.join("run"));

    let cfg = d.join("exp.cfg");
    std::fs::write(
        &cfg,
        format!("# experiment\ndata = {data}\nsource = {a}\ntargets = {targets}\nsamples = 8\ndenominator = all\niters = 1,2\n"),
    )
    .unwrap();
    // flags override the file
    ok(&["attack", "--config", &s(&cfg), "--variant", "mi,ti", "--centralize", "--out", &out]);
    let report = std::fs::read_to_string(d.join("run/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 2 * 2 * 2);
    assert!(report.lines().nth(1).unwrap().contains(",mi,true,optimized,"));

    let summary = s(&d.join("summary.csv"));
    ok(&["report", "--in", &s(&d.join("run/report.csv")), "--out", &summary]);
    let text = std::fs::read_to_string(&summary).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2);
    assert!(text.contains("1;2,"));

    let ablate_out = s(&d.join("ablate"));
    ok(&["ablate", "--strategy", "high", "--config", &s(&cfg), "--iters", "1", "--out", &ablate_out]);
    let ablate = std::fs::read_to_string(d.join("ablate/report.csv")).unwrap();
    assert!(ablate.lines().nth(1).unwrap().contains(",true,high,"));

    let sweep_out = s(&d.join("sweep"));
    ok(&["sweep", "--channel", "cb", "--steps", "3", "--config", &s(&cfg), "--iters", "1", "--out", &sweep_out]);
    let sweep = std::fs::read_to_string(d.join("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 3 * 2);

    let artifact = std::fs::read_dir(d.join("run/artifacts")).unwrap().next().unwrap().unwrap().path();
    let defended = s(&d.join("defended.cft"));
    ok(&["defend", "--kind", "jpeg", "--quality", "50", "--in", &s(&artifact), "--out", &defended]);
    assert!(std::fs::metadata(&defended).unwrap().len() > 0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    let (data, a, m) = (s(&d.join("data.cft")), s(&d.join("a.cfw")), s(&d.join("m.cfw")));

    // configuration errors
    assert_eq!(code(&["attack", "--data", &data, "--source", &a, "--targets", &m, "--variant", "pgd"]), 2);
    assert_eq!(code(&["attack", "--data", &data, "--source", &a, "--targets", &a]), 2);
    assert_eq!(code(&["defend", "--kind", "blur", "--in", &data, "--out", &s(&d.join("x"))]), 2);
    let bad = d.join("bad.cfg");
    std::fs::write(&bad, "colour = red\n").unwrap();
    assert_eq!(code(&["attack", "--config", &s(&bad)]), 2);
    assert_eq!(code(&["train", "--arch", "resnet", "--data", &data, "--out", "x"]), 2);

    // missing artifacts
    let absent = s(&d.join("absent.cfw"));
    assert_eq!(code(&["attack", "--data", &data, "--source", &absent, "--targets", &m, "--samples", "4"]), 3);
    assert_eq!(code(&["attack", "--config", &s(&d.join("absent.cfg"))]), 3);
    assert_eq!(code(&["report", "--in", &s(&d.join("none.csv")), "--out", &s(&d.join("o.csv"))]), 3);

    // numerical failure
    let out = s(&d.join("diverged.cfw"));
    assert_eq!(code(&["train", "--arch", "smallmlp", "--data", &data, "--epochs", "3", "--lr", "1e6", "--out", &out]), 4);
}
