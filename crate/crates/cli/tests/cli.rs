use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mtp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtp"))
        .arg("--threads")
        .arg("1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(out: Output) -> Output {
    assert_eq!(
        code(&out),
        0,
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, body: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn dataset(&self, name: &str, cfg: &Path) -> PathBuf {
        let out = self.path(name);
        ok(mtp(&["generate", "--config", s(cfg), "--out", s(&out)]));
        out
    }
}

const SMALL: &str = "dataset.episodes = 30\ndataset.seed = 7\ntrain.epochs = 2\n";

#[test]
fn generate_is_deterministic_and_counts_match() {
    let w = Workspace::new();
    let cfg = w.config("t.cfg", SMALL);
    let a = w.dataset("a", &cfg);
    let b = w.dataset("b", &cfg);
    assert_eq!(fs::read(a.join("samples.bin")).unwrap(), fs::read(b.join("samples.bin")).unwrap());
    assert_eq!(fs::read(a.join("manifest.txt")).unwrap(), fs::read(b.join("manifest.txt")).unwrap());

    let out = ok(mtp(&["generate", "--config", s(&cfg), "--out", s(&w.path("c"))]));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let printed: usize = stdout.split_whitespace().nth(1).unwrap().parse().unwrap();
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    let count: usize = manifest
        .lines()
        .find_map(|l| l.strip_prefix("count: "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(printed, count);
    assert!(stdout.contains("maneuver straight") && stdout.contains("maneuver right"));

    // record count: walk the length-prefixed records
    let bytes = fs::read(a.join("samples.bin")).unwrap();
    let (mut pos, mut records) = (0usize, 0usize);
    while pos < bytes.len() {
        let len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8 + len + 4;
        records += 1;
    }
    assert_eq!(records, count);
}

#[test]
fn invalid_config_key_reports_line() {
    let w = Workspace::new();
    let cfg = w.config("bad.cfg", "dataset.seed = 3\n# fine\nmodel.wings = 2\n");
    let out = mtp(&["generate", "--config", s(&cfg), "--out", s(&w.path("x"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn print_config_round_trips() {
    let w = Workspace::new();
    let cfg = w.config("c.cfg", "train.loss = mdn\nmodel.modes = 3\n");
    let dump = ok(mtp(&["--print-config", "--config", s(&cfg)])).stdout;
    let dump = String::from_utf8(dump).unwrap();
    assert!(dump.contains("train.loss = mdn") && dump.contains("model.modes = 3"));
    let again = w.config("again.cfg", &dump);
    let second = ok(mtp(&["--print-config", "--config", s(&again)])).stdout;
    assert_eq!(String::from_utf8(second).unwrap(), dump);
}

#[test]
fn stp_converges_on_constant_velocity_data() {
    let w = Workspace::new();
    // every actor goes straight at its own constant speed
    let cfg = w.config(
        "cv.cfg",
        "scenario.right_fraction = 0\nscenario.speed_noise = 0.1\nscenario.start_jitter = 0\n\
         dataset.episodes = 60\ndataset.stride = 1\ntrain.loss = stp\ntrain.epochs = 25\ntrain.lr = 0.003\n\
         train.decay_factor = 0.9\ntrain.decay_interval = 80\ntrain.val_fraction = 0.2\n",
    );
    let data = w.dataset("cv", &cfg);
    let log = w.path("log.csv");
    ok(mtp(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--out", s(&w.path("m.ckpt")), "--log", s(&log),
    ]));
    let text = fs::read_to_string(&log).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,step,train_loss,val_loss,lr,val_ade");
    let ade: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ade.len(), 25);
    assert!(ade[0] > 1.0, "first epoch {}", ade[0]);
    let last = ade[ade.len() - 1];
    assert!(last < 0.1, "validation displacement {last}");
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let w = Workspace::new();
    let cfg2 = w.config("two.cfg", SMALL);
    let cfg1 = w.config("one.cfg", &SMALL.replace("train.epochs = 2", "train.epochs = 1"));
    let data = w.dataset("d", &cfg2);
    let full = w.path("full.ckpt");
    let full_log = w.path("full.csv");
    ok(mtp(&["train", "--config", s(&cfg2), "--data", s(&data), "--out", s(&full), "--log", s(&full_log)]));
    let half = w.path("half.ckpt");
    ok(mtp(&["train", "--config", s(&cfg1), "--data", s(&data), "--out", s(&half), "--log", s(&w.path("h.csv"))]));
    let resumed = w.path("resumed.ckpt");
    let resumed_log = w.path("resumed.csv");
    ok(mtp(&[
        "train",
        "--config",
        s(&cfg2),
        "--data",
        s(&data),
        "--out",
        s(&resumed),
        "--log",
        s(&resumed_log),
        "--resume",
        s(&w.path("half.ckpt.last")),
    ]));
    let full_lines: Vec<String> = fs::read_to_string(&full_log).unwrap().lines().map(String::from).collect();
    let resumed_lines: Vec<String> = fs::read_to_string(&resumed_log).unwrap().lines().map(String::from).collect();
    assert_eq!(resumed_lines.len(), 2);
    assert_eq!(resumed_lines[1], full_lines[2]);
    assert_eq!(
        fs::read(w.path("full.ckpt.last")).unwrap(),
        fs::read(w.path("resumed.ckpt.last")).unwrap()
    );
}

#[test]
fn unknown_loss_exits_2() {
    let w = Workspace::new();
    let cfg = w.config("l.cfg", "train.loss = huber\n");
    let out = mtp(&["train", "--config", s(&cfg), "--data", s(&w.path("none")), "--out", s(&w.path("m"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn diverging_training_exits_4() {
    let w = Workspace::new();
    let cfg = w.config("nan.cfg", &format!("{SMALL}train.lr = 1e300\ntrain.anchor_init = false\n"));
    let data = w.dataset("d", &cfg);
    let out = mtp(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&w.path("m"))]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("last finite step"));
}

#[test]
fn eval_predictors_and_errors() {
    let w = Workspace::new();
    let cfg = w.config("t.cfg", SMALL);
    let data = w.dataset("d", &cfg);

    let oracle = String::from_utf8(ok(mtp(&["eval", "--data", s(&data), "--predictor", "oracle"])).stdout).unwrap();
    let mut rows = oracle.lines();
    assert_eq!(
        rows.next().unwrap(),
        "method,modes,slice,horizon,H,count,displacement,along_track,cross_track"
    );
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert!(cols[6..].iter().all(|v| v.parse::<f64>().unwrap() == 0.0), "{row}");
    }

    let base = w.path("base.csv");
    ok(mtp(&["eval", "--data", s(&data), "--predictor", "baseline", "--out", s(&base)]));
    assert!(fs::read_to_string(&base).unwrap().contains("propagation,1,all,6s"));

    assert_eq!(code(&mtp(&["eval", "--data", s(&w.path("missing")), "--predictor", "oracle"])), 3);

    ok(mtp(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&w.path("m.ckpt"))]));
    let md = w.path("r.md");
    let cal = w.path("cal.csv");
    ok(mtp(&[
        "eval", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&w.path("m.ckpt")), "--markdown", s(&md),
        "--calibration", s(&cal),
    ]));
    assert!(fs::read_to_string(&md).unwrap().contains("mtp-disp"));
    assert!(fs::read_to_string(&cal).unwrap().lines().count() >= 2);

    let small = w.config("small.cfg", "dataset.episodes = 5\nraster.height = 16\nraster.width = 16\n");
    let other = w.dataset("other", &small);
    let out = mtp(&["eval", "--data", s(&other), "--checkpoint", s(&w.path("m.ckpt"))]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn rasterize_outputs() {
    let w = Workspace::new();
    let cfg = w.config("t.cfg", SMALL);
    let data = w.dataset("d", &cfg);
    let dir = w.path("img");
    ok(mtp(&["rasterize", "--data", s(&data), "--indices", "0", "--out", s(&dir)]));
    let ppm = fs::read(dir.join("sample_0.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(ppm.len(), b"P6\n32 32\n255\n".len() + 32 * 32 * 3);

    ok(mtp(&["rasterize", "--config", s(&cfg), "--indices", "0", "--lane", "1", "--lane", "2", "--out", s(&dir)]));
    let a = fs::read(dir.join("sample_0_lane_1.ppm")).unwrap();
    let b = fs::read(dir.join("sample_0_lane_2.ppm")).unwrap();
    assert_eq!(a.len(), b.len());
    assert_ne!(a, b);

    let out = mtp(&["rasterize", "--data", s(&data), "--indices", "100000", "--out", s(&dir)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn compare_reports() {
    let w = Workspace::new();
    let cfg = w.config("t.cfg", SMALL);
    let data = w.dataset("d", &cfg);
    let base = w.path("base.csv");
    let oracle = w.path("oracle.csv");
    ok(mtp(&["eval", "--data", s(&data), "--predictor", "baseline", "--out", s(&base)]));
    ok(mtp(&["eval", "--data", s(&data), "--predictor", "oracle", "--out", s(&oracle)]));

    let one = String::from_utf8(ok(mtp(&["compare", s(&base)])).stdout).unwrap();
    assert!(one.contains("propagation") && !one.contains("oracle") && !one.contains("**"));
    let both = String::from_utf8(ok(mtp(&["compare", s(&base), s(&oracle)])).stdout).unwrap();
    assert!(both.contains("propagation") && both.contains("oracle") && both.contains("**0.000**"));
    let rows = |t: &str| t.lines().count() - 2;
    assert_eq!(rows(&both), 2 * rows(&one));

    let short_cfg = w.config("h.cfg", "dataset.episodes = 5\ndataset.horizon = 30\n");
    let short = w.dataset("short", &short_cfg);
    let short_csv = w.path("short.csv");
    ok(mtp(&["eval", "--data", s(&short), "--predictor", "oracle", "--out", s(&short_csv)]));
    assert_eq!(code(&mtp(&["compare", s(&base), s(&short_csv)])), 2);
}
