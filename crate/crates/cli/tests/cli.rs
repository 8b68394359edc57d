use std::path::Path;
use std::process::Command;

const TINY: &str = r#"
scenario = "evaporation"
repeats = 2
seed = 7
output = "unused"

[grid]
length = 100.0
width = 100.0
depth = 50.0
nl = 6
nw = 6
nd = 5

[time]
start = 0.0
interval = 600.0
count = 3

[train]
steps = 40
hidden_layers = 2
width = 6
collocation_points = 100
boundary_points_per_face = 10
collocation_batch = 16
boundary_batch = 16
log_interval = 20
head_scale = 100.0

[train.weights]
data = 1.0
residual = 1.0
boundary = 0.01

[placement]
budget = 15
"#;

fn rootzone(args: &[&str], out: &Path) -> std::process::Output {
    let o = Command::new(env!("CARGO_BIN_EXE_rootzone"))
        .args(args)
        .env("ROOTZONE_OUT", out)
        .env_remove("ROOTZONE_SEED")
        .output()
        .unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn run_is_reproducible_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    rootzone(&["run", cfg], &a);
    rootzone(&["run", cfg], &b);
    let er = std::fs::read(a.join("er_by_round.csv")).unwrap();
    assert_eq!(er, std::fs::read(b.join("er_by_round.csv")).unwrap());
    let text = String::from_utf8(er).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "round,columns,sensors,Er_mean,Er_std,strategy");
    // three rounds per strategy
    assert_eq!(lines.len(), 1 + 2 * 3);
    for s in ["active", "random"] {
        for r in 0..2 {
            assert!(a.join(s).join(format!("repeat_{r}")).join("placement.csv").exists());
        }
    }
    assert!(a.join("active/repeat_0/residual_map_round1.csv").exists());
    assert!(a.join("config.resolved.toml").exists());
    let summary = std::fs::read_to_string(a.join("summary.txt")).unwrap();
    assert!(summary.contains("improvement"));
    let rep = rootzone(&["report", "--in", a.to_str().unwrap()], &a);
    assert!(String::from_utf8_lossy(&rep.stdout).contains("final active"));

    // a different seed from the environment changes the run
    let c = dir.path().join("c");
    let o = Command::new(env!("CARGO_BIN_EXE_rootzone"))
        .args(["run", cfg, "--repeats", "1"])
        .env("ROOTZONE_OUT", &c)
        .env("ROOTZONE_SEED", "8")
        .output()
        .unwrap();
    assert!(o.status.success());
    let resolved = std::fs::read_to_string(c.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 8") && resolved.contains("repeats = 1"));
}

#[test]
fn simulate_train_and_place() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("sim");
    rootzone(&["simulate", cfg], &out);
    let truth = out.join("truth_moisture.field");
    assert!(truth.exists());
    let again = rootzone(&["simulate", cfg], &out);
    assert!(String::from_utf8_lossy(&again.stdout).contains("cached"));

    let place = dir.path().join("place");
    rootzone(&["place", cfg, "--strategy", "random"], &place);
    let plan = place.join("random/repeat_0/placement.csv");
    assert!(plan.exists());

    let tr = dir.path().join("train");
    let o = rootzone(&["train", cfg, "--plan", plan.to_str().unwrap(), "--truth", truth.to_str().unwrap()], &tr);
    assert!(String::from_utf8_lossy(&o.stdout).contains("Er ="));
    let hist = std::fs::read_to_string(tr.join("loss_history.csv")).unwrap();
    assert!(hist.starts_with("step,L_D,L_RE,L_B,total,Er"));
    assert!(tr.join("network.net").exists());

    let obs = tr.join("observations.csv");
    let tr2 = dir.path().join("train2");
    rootzone(&["train", cfg, "--obs", obs.to_str().unwrap(), "--truth", truth.to_str().unwrap()], &tr2);
    assert_eq!(std::fs::read(tr.join("network.net")).unwrap(), std::fs::read(tr2.join("network.net")).unwrap());
}

#[test]
fn bad_configs_point_at_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "scenario = \"infiltration\"\n[soil]\nks = 0.0092\ntheta_s = 0.368\ntheta_r = 0.102\nalpha = 0.0335\nn = 0.5\nm = 0.5\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rootzone")).args(["check", cfg.to_str().unwrap()]).output().unwrap();
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("soil.n") && err.contains(":7:") && err.contains("n must exceed 1"), "{err}");
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["evaporation", "infiltration", "desk_evaporation", "desk_infiltration"] {
        let o = Command::new(env!("CARGO_BIN_EXE_rootzone"))
            .args(["check", root.join(format!("{name}.cfg")).to_str().unwrap()])
            .output()
            .unwrap();
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
