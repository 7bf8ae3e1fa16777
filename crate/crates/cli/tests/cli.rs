use std::path::Path;
use std::process::{Command, Output};

fn flownet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flownet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn lognorm_of_identity() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "a.txt", "2 2\n1 0\n0 1\n");
    let o = flownet(&["lognorm", "--matrix", &m, "--alpha", "0.1"], dir.path());
    assert!(o.status.success(), "{o:?}");
    let s = stdout(&o);
    assert!(s.contains("delta_star = 1e0"), "{s}");
    assert!(s.contains("delta_prime = 1e-1"), "{s}");
    assert!(s.contains("argmax = 11"), "{s}");
}

#[test]
fn stabilize_writes_delta_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "a.txt", "2 2\n1 0\n0 1\n");
    let out = dir.path().join("delta.txt");
    let o = flownet(
        &["stabilize", "--matrix", &m, "--alpha", "0.1", "--delta", "0.5", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");
    let s = stdout(&o);
    for key in ["delta_target", "delta_achieved", "frob_norm", "baseline_norm", "iterations"] {
        assert!(s.contains(key), "{key} missing from {s}");
    }
    let delta = std::fs::read_to_string(out).unwrap();
    assert!(delta.starts_with("2 2"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "a.txt", "2 2\n1 0\n0 1\n");
    let above = flownet(&["stabilize", "--matrix", &m, "--delta", "2"], dir.path());
    assert_eq!(above.status.code(), Some(2));
    let bad = write(dir.path(), "bad.txt", "2 2\n1 0\n0 x\n");
    let parse = flownet(&["lognorm", "--matrix", &bad], dir.path());
    assert_eq!(parse.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&parse.stderr).contains("line 3"));
    let missing = flownet(&["experiment", "mnist-desk", "--set", "data_dir=/nonexistent"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("Download"));
}

#[test]
fn train_attack_region_bounds_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let o = flownet(
        &["train", "--arch", "flow", "--dataset", "moons", "--d", "2", "--n", "100", "--epochs", "20", "--out", &p("m.txt")],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");
    let hist = std::fs::read_to_string(p("m.txt.history.csv")).unwrap();
    assert!(hist.starts_with("epoch,lr,train_loss,test_loss\n"));
    assert_eq!(hist.lines().count(), 1 + 1 + 20);

    let o = flownet(
        &["attack", "--model", &p("m.txt"), "--dataset", "moons", "--etas", "0,0.05,0.1", "--out", &p("atk.csv")],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");
    let atk = std::fs::read_to_string(p("atk.csv")).unwrap();
    assert!(atk.starts_with("eta,accuracy\n"));
    assert_eq!(atk.lines().count(), 4);

    // A1 is 2x2, so the square-box region works directly on the inputs
    let lognorm = flownet(&["stabilize", "--model", &p("m.txt"), "--delta", "-5", "--out-model", &p("s.txt")], dir.path());
    assert!(lognorm.status.success(), "{lognorm:?}");
    let o = flownet(
        &["region", "--model", &p("m.txt"), "--stabilized", &p("s.txt"), "--grid", "box=-1,1,-1,1;h=0.5", "--out", &p("r.csv")],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");
    let r = std::fs::read_to_string(p("r.csv")).unwrap();
    assert!(r.starts_with("x1,x2,eta,holds,undefined\n"));
    assert_eq!(r.lines().count(), 1 + 25);

    let o = flownet(
        &["bounds", "--model", &p("m.txt"), "--stabilized", &p("s.txt"), "--grid", "box=-1,1,-1,1;h=0.5"],
        dir.path(),
    );
    assert!(o.status.success(), "{o:?}");
    let s = stdout(&o);
    assert!(s.trim_start().starts_with('{') && s.contains("\"upper_value\""), "{s}");
}

#[test]
fn experiment_is_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "ex1.cfg",
        "experiment = example1\nseeds = 0\noffsets = 0.01, 0.05\ngrid = box=-1,1,-1,1;h=0.5\n",
    );
    let run = |out: &str| {
        let o = flownet(&["experiment", "example1", "--config", &cfg, "--out-dir", out], dir.path());
        assert!(o.status.success(), "{o:?}");
        std::fs::read_to_string(dir.path().join(out).join("example1.csv")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    assert!(a.starts_with("law,seed,delta_offset,fraction_green\n"));
    assert!(a.lines().last().unwrap().starts_with("# config-hash="));
    assert_eq!(a.lines().count(), 1 + 2 * 2 + 1);
    let saved = std::fs::read_to_string(dir.path().join("a/config.txt")).unwrap();
    assert!(saved.contains("tbar = 0.3"));
}
