use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use qim::cli::{
    cmd_ablate, cmd_eval, cmd_gradcheck, cmd_train, read_report, CommandError, Grid, Overrides, ABLATION_FILE,
    CHECKPOINT_FILE, EPOCHS_FILE, METRICS_FILE, REPORT_HEADER,
};
use qim::gradcheck::CustomCase;
use qim::tape::CustomOp;
use qim::Tensor;
use tempfile::TempDir;

/// Writes a small learnable IDX dataset: the label picks which 4×4 patch
/// is lit.
fn write_idx(dir: &Path, prefix: &str, n: usize) {
    let mut images = Vec::new();
    for v in [0x803u32, n as u32, 28, 28] {
        images.extend(v.to_be_bytes());
    }
    let mut labels = Vec::new();
    labels.extend(0x801u32.to_be_bytes());
    labels.extend((n as u32).to_be_bytes());
    for i in 0..n {
        let label = i % 10;
        let mut img = vec![(i * 7 % 40) as u8; 28 * 28];
        let (r0, c0) = (4 + 10 * (label / 5), 2 + 5 * (label % 5));
        for r in r0..r0 + 4 {
            img[r * 28 + c0..r * 28 + c0 + 4].fill(255);
        }
        images.extend(img);
        labels.push(label as u8);
    }
    std::fs::write(dir.join(format!("{prefix}-images")), images).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels")), labels).unwrap();
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        write_idx(dir.path(), "train", 60);
        write_idx(dir.path(), "test", 20);
        Self { dir }
    }

    fn config(&self, name: &str, extra: &str) -> PathBuf {
        let text = format!(
            "dataset = mnist\n\
             data.train_images = train-images\n\
             data.train_labels = train-labels\n\
             data.test_images = test-images\n\
             data.test_labels = test-labels\n\
             epochs = 1\n\
             seed = 3\n\
             batch_size = 16\n\
             lr = 0.002\n\
             {extra}\n"
        );
        let path = self.dir.path().join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

const QIM: &str = "backbone = standardcnn\nqim.enabled = true\nqim.filters = 8\nqim.size = 10";

#[test]
fn train_writes_reports_and_eval_reproduces_accuracy() {
    let ws = Workspace::new();
    let cfg = ws.config("qim.cfg", QIM);
    let out = ws.out("run");
    let outcome = cmd_train(&cfg, &Overrides { out: Some(out.clone()), seed: None }).unwrap();
    assert_eq!(outcome.epoch_losses.len(), 1);
    assert_eq!(outcome.row.approach, "standardcnn+qim[clamped:10->9]");
    assert_eq!((outcome.row.density_maps, outcome.row.density_size), (Some(8), Some(9)));

    let rows = read_report(out.join(METRICS_FILE)).unwrap();
    assert_eq!(rows, vec![outcome.row.clone()]);
    let text = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(text.lines().next(), Some(REPORT_HEADER));
    let epochs = std::fs::read_to_string(out.join(EPOCHS_FILE)).unwrap();
    assert_eq!(epochs.lines().count(), 2);

    let acc = cmd_eval(&out.join(CHECKPOINT_FILE), &cfg).unwrap();
    assert_eq!(acc.to_string(), outcome.row.accuracy_field());
}

#[test]
fn seed_override_changes_the_run() {
    let ws = Workspace::new();
    let cfg = ws.config("base.cfg", "backbone = lenet5");
    let a = cmd_train(&cfg, &Overrides { out: Some(ws.out("a")), seed: None }).unwrap();
    let b = cmd_train(&cfg, &Overrides { out: Some(ws.out("b")), seed: Some(4) }).unwrap();
    let again = cmd_train(&cfg, &Overrides { out: Some(ws.out("c")), seed: None }).unwrap();
    assert_eq!((a.row.seed, b.row.seed), (3, 4));
    assert_ne!(a.epoch_losses, b.epoch_losses);
    assert_eq!(a.epoch_losses, again.epoch_losses);
}

#[test]
fn config_and_data_errors_map_to_exit_codes() {
    let ws = Workspace::new();
    let missing = cmd_train(&ws.out("absent.cfg"), &Overrides { out: Some(ws.out("x")), seed: None }).unwrap_err();
    assert_eq!(missing.exit_code(), 2);
    let no_backbone = ws.config("nb.cfg", "");
    assert!(matches!(
        cmd_train(&no_backbone, &Overrides { out: Some(ws.out("x")), seed: None }),
        Err(CommandError::Config(_))
    ));
    let no_out = ws.config("no_out.cfg", "backbone = lenet5");
    assert_eq!(cmd_train(&no_out, &Overrides::default()).unwrap_err().exit_code(), 2);

    let empty = ws.config("empty.cfg", "backbone = lenet5\ndata.test_limit = 0");
    let err = cmd_train(&empty, &Overrides { out: Some(ws.out("e")), seed: None }).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");

    // a LeNet checkpoint evaluated under a StandardCNN config
    let lenet = ws.config("lenet.cfg", "backbone = lenet5");
    cmd_train(&lenet, &Overrides { out: Some(ws.out("l")), seed: None }).unwrap();
    let other = ws.config("std.cfg", "backbone = standardcnn");
    let err = cmd_eval(&ws.out("l").join(CHECKPOINT_FILE), &other).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn ablation_covers_baseline_and_full_grid() {
    let ws = Workspace::new();
    let cfg = ws.config("ablate.cfg", "backbone = standardcnn\ndata.train_limit = 16\ndata.test_limit = 10");
    let rows = cmd_ablate(&cfg, &Grid::default(), &Overrides { out: Some(ws.out("abl")), seed: None }).unwrap();
    assert_eq!(rows.len(), 17);
    assert_eq!(rows[0].approach, "standardcnn");
    assert_eq!(rows[0].density_maps, None);
    // d = 9 on MNIST, so every size above 9 is clamped
    for (row, (c, s)) in rows[1..].iter().zip(Grid::default().cells()) {
        assert_eq!(row.density_maps, Some(c));
        if s == 8 {
            assert_eq!((row.approach.as_str(), row.density_size), ("standardcnn+qim", Some(8)));
        } else {
            assert_eq!(row.approach, format!("standardcnn+qim[clamped:{s}->9]"));
            assert_eq!(row.density_size, Some(9));
        }
        assert!(row.accuracy.is_some());
    }
    assert_eq!(rows.iter().filter(|r| r.approach.contains("[clamped:")).count(), 12);
    assert_eq!(read_report(ws.out("abl").join(ABLATION_FILE)).unwrap(), rows);
}

#[test]
fn ablation_records_failed_cells_and_continues() {
    let ws = Workspace::new();
    let cfg = ws.config("paired.cfg", "backbone = standardcnn\nqim.enabled = true\nqim.mode = paired\nqim.filters = 8\nqim.size = 4\ndata.train_limit = 16");
    let grid: Grid = "counts=128,7;sizes=4".parse().unwrap();
    let err = cmd_ablate(&cfg, &grid, &Overrides { out: Some(ws.out("p")), seed: None }).unwrap_err();
    assert!(matches!(err, CommandError::AblationCells { failed: 1, total: 3 }), "{err}");
    let rows = read_report(ws.out("p").join(ABLATION_FILE)).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].accuracy.is_some());
    assert!(rows[2].approach.starts_with("standardcnn+qim[error:"));
    assert_eq!(rows[2].accuracy, None);
}

/// `x²` whose backward is off by a factor of 1.5.
struct WrongSquare;

impl CustomOp<f64> for WrongSquare {
    fn name(&self) -> &str {
        "wrong_square"
    }
    fn forward(&self, inputs: &[&Tensor<f64>]) -> qim::Result<Tensor<f64>> {
        Ok(inputs[0].map(|x| x * x))
    }
    fn backward(&self, inputs: &[&Tensor<f64>], _: &Tensor<f64>, grad: &Tensor<f64>) -> qim::Result<Vec<Tensor<f64>>> {
        let g: Vec<f64> = inputs[0].data().iter().zip(grad.data()).map(|(x, g)| 3.0 * x * g).collect();
        Ok(vec![Tensor::from_vec(inputs[0].shape(), g)?])
    }
}

#[test]
fn gradcheck_catches_a_wrong_backward() {
    let case = CustomCase { op: Arc::new(WrongSquare), input_shapes: vec![vec![5]] };
    let err = cmd_gradcheck(0, &[case]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let msg = err.to_string();
    assert!(msg.contains("wrong_square"), "{msg}");
    assert!(!msg.contains("qim["), "only the broken op should fail: {msg}");
}

fn qim_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qim"))
}

#[test]
fn binary_exit_codes() {
    let ws = Workspace::new();
    let status = qim_bin().args(["train", "--config"]).arg(ws.out("missing.cfg")).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let bad = ws.config("bad.cfg", "backbone = lenet5\ndata.test_limit = 0");
    let status = qim_bin().args(["train", "--config"]).arg(&bad).arg("--out").arg(ws.out("o")).status().unwrap();
    assert_eq!(status.code(), Some(3));

    let good = ws.config("good.cfg", "backbone = lenet5");
    let out = qim_bin().args(["train", "--config"]).arg(&good).arg("--out").arg(ws.out("g")).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval = qim_bin()
        .args(["eval", "--checkpoint"])
        .arg(ws.out("g").join(CHECKPOINT_FILE))
        .arg("--config")
        .arg(&good)
        .output()
        .unwrap();
    assert!(eval.status.success());
    let stdout = String::from_utf8_lossy(&eval.stdout);
    let acc = stdout.trim().strip_prefix("accuracy ").unwrap();
    assert_eq!(read_report(ws.out("g").join(METRICS_FILE)).unwrap()[0].accuracy_field(), acc);

    assert_eq!(qim_bin().arg("frobnicate").status().unwrap().code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["mnist.cfg", "mnist-qim.cfg", "cifar10-qim.cfg"] {
        let cfg = qim::experiment::ExperimentConfig::load(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(cfg.out.is_some(), "{name}");
    }
}
