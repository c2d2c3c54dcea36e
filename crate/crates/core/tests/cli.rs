use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sqcpc::checkpoint::{Checkpoint, Payload};
use sqcpc::data::{Dataset, LabelRow, LabelTable};
use sqcpc::diffcore::Tensor;
use sqcpc::model::{ModelBundle, NetworkConfig};
use sqcpc::semisup::predict_video;

const TINY: &str = "\
# tiny end-to-end run
videos = 4
frames = 40
test_videos = 1
label_fraction = 0.05
pretext_epochs = 1
pretext_batch = 2
finetune_epochs = 1
finetune_lr = 0.001
";

fn sqcpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqcpc"))
        .args(args)
        .env("SQCPC_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Config file under `root` pointing every directory key inside it.
fn write_config(root: &Path, extra: &str) -> PathBuf {
    let d = |name: &str| root.join(name).display().to_string();
    let text = format!(
        "{TINY}data_dir = {}\npretrain_dir = {}\nfinetune_dir = {}\neval_dir = {}\n{extra}",
        d("data"),
        d("pretrain"),
        d("finetune"),
        d("eval")
    );
    let path = root.join("run.conf");
    std::fs::write(&path, text).unwrap();
    path
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_is_byte_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "");
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    ok(&sqcpc(&["synth", "--config", cfg, "--out", a.to_str().unwrap()]));
    ok(&sqcpc(&["synth", "--config", cfg, "--out", b.to_str().unwrap()]));
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta, tb);
    for f in ["manifest.txt", "dense_labels.csv", "labels.csv", "resolved_config.txt"] {
        assert!(ta.contains_key(Path::new(f)), "{f} missing");
    }
    let data = Dataset::load(&a.join("manifest.txt")).unwrap();
    assert_eq!(data.len(), 4);
    let labels = LabelTable::load(&a.join("labels.csv")).unwrap();
    // 5% of the 3 × 40 training frames; the held-out video is never labeled.
    assert_eq!(labels.len(), 6);
    assert!(labels.rows.iter().all(|r| r.video != "vid003"));
    let c = root.path().join("c");
    ok(&sqcpc(&["synth", "--config", cfg, "--seed", "1", "--out", c.to_str().unwrap()]));
    assert_ne!(tree(&c)[Path::new("videos/vid000.sqf")], ta[Path::new("videos/vid000.sqf")]);
}

#[test]
fn default_synth_matches_desk_scale() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("d");
    ok(&sqcpc(&["synth", "--out", out.to_str().unwrap()]));
    let data = Dataset::load(&out.join("manifest.txt")).unwrap();
    assert_eq!((data.len(), data.total_frames()), (20, 4000));
    assert_eq!(data.videos[0].frame_shape(), [1, 16, 16]);
    let labels = LabelTable::load(&out.join("labels.csv")).unwrap();
    assert_eq!((labels.num_outputs, labels.len()), (3, 64));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let root = tempfile::tempdir().unwrap();
    let blocker = root.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = sqcpc(&["synth", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let out = sqcpc(&["synth", "--set", "vidoes=3", "--out", root.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("vidoes"), "{}", stderr(&out));

    let bad = root.path().join("bad.conf");
    std::fs::write(&bad, "seed = 1\nlearning_rate = 3\n").unwrap();
    let out = sqcpc(&["pretrain", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"));

    assert_eq!(sqcpc(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn full_pipeline_from_one_config() {
    let root = tempfile::tempdir().unwrap();
    let pre = root.path().join("pretrain").join("best.sqck");
    let cfg = write_config(root.path(), &format!("init = {}\n", pre.display()));
    let cfg = cfg.to_str().unwrap();
    for cmd in ["synth", "pretrain", "finetune", "eval"] {
        ok(&sqcpc(&[cmd, "--config", cfg]));
    }
    let log = std::fs::read_to_string(root.path().join("pretrain/log.tsv")).unwrap();
    let fields: Vec<&str> = log.lines().next().unwrap().split('\t').collect();
    assert_eq!(fields[..3], ["1", "train", "nce_loss"]);
    assert!(fields[3].parse::<f64>().unwrap().is_finite());
    assert_eq!(fields.len(), 1 + 3 * 5);

    let report = std::fs::read_to_string(root.path().join("eval/report.txt")).unwrap();
    let rows: Vec<Vec<String>> = report
        .lines()
        .map(|l| l.split('\t').map(|f| f.trim().to_string()).collect())
        .collect();
    assert_eq!(rows[0], ["dim", "icc", "mae"]);
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[4][0], "avg");
    for col in 1..3 {
        let vals: Vec<f64> = rows[1..4].iter().map(|r| r[col].parse().unwrap()).collect();
        let avg: f64 = rows[4][col].parse().unwrap();
        assert!((vals.iter().sum::<f64>() / 3.0 - avg).abs() < 1e-9);
    }
    // Same inputs, same report bytes.
    let again = root.path().join("eval2");
    ok(&sqcpc(&["eval", "--config", cfg, "--out", again.to_str().unwrap()]));
    assert_eq!(std::fs::read(again.join("report.txt")).unwrap(), report.as_bytes());
}

#[test]
fn scratch_and_pretrained_runs_differ_only_in_init() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(&sqcpc(&["synth", "--config", cfg]));
    ok(&sqcpc(&["pretrain", "--config", cfg]));
    let ckpt = root.path().join("pretrain/best.sqck");
    let (a, b) = (root.path().join("ft_a"), root.path().join("ft_b"));
    ok(&sqcpc(&["finetune", "--config", cfg, "--out", a.to_str().unwrap()]));
    let init = format!("init={}", ckpt.display());
    ok(&sqcpc(&["finetune", "--config", cfg, "--set", &init, "--out", b.to_str().unwrap()]));
    let ra = std::fs::read_to_string(a.join("resolved_config.txt")).unwrap();
    let rb = std::fs::read_to_string(b.join("resolved_config.txt")).unwrap();
    let diff: Vec<(&str, &str)> = ra.lines().zip(rb.lines()).filter(|(x, y)| x != y).collect();
    assert_eq!(diff, vec![("init = scratch", format!("init = {}", ckpt.display()).as_str())]);
    assert_eq!(std::fs::read(a.join("labels.csv")).unwrap(), std::fs::read(b.join("labels.csv")).unwrap());
}

#[test]
fn finetune_label_fraction_and_failures() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(&sqcpc(&["synth", "--config", cfg]));

    let full = root.path().join("full");
    ok(&sqcpc(&["finetune", "--config", cfg, "--set", "finetune_fraction=1.0", "--out", full.to_str().unwrap()]));
    assert_eq!(LabelTable::load(&full.join("labels.csv")).unwrap().len(), 120);

    let out = sqcpc(&["finetune", "--config", cfg, "--set", "labels=/nonexistent/labels.csv"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    // A checkpoint of a narrower network cannot initialize the default one.
    let narrow = NetworkConfig {
        widths: vec![4, 8, 16],
        ..NetworkConfig::default()
    };
    let path = root.path().join("narrow.sqck");
    ModelBundle::<f32>::init(narrow, 0).unwrap().to_checkpoint().save(&path).unwrap();
    let out = sqcpc(&["finetune", "--config", cfg, "--set", &format!("init={}", path.display())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("f.conv0.weight"), "{}", stderr(&out));
}

#[test]
fn pretrain_resume_continues_step_counter() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "");
    let cfg = cfg.to_str().unwrap();
    ok(&sqcpc(&["synth", "--config", cfg]));
    let steps = |dir: &Path| match Checkpoint::load(&dir.join("last.sqck")).unwrap().get("opt.step") {
        Some(Payload::U64 { data, .. }) => data[0],
        other => panic!("opt.step: {other:?}"),
    };
    let one = root.path().join("one");
    ok(&sqcpc(&["pretrain", "--config", cfg, "--out", one.to_str().unwrap()]));
    let first = steps(&one);
    assert!(first > 0);
    let resume = format!("resume={}", one.join("last.sqck").display());
    ok(&sqcpc(&["pretrain", "--config", cfg, "--set", "pretext_epochs=2", "--set", &resume, "--out", one.to_str().unwrap()]));
    assert_eq!(steps(&one), 2 * first);
    let log = std::fs::read_to_string(one.join("log.tsv")).unwrap();
    let epochs: Vec<&str> = log.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2"]);

    // Uninterrupted two-epoch run reaches the same parameters.
    let two = root.path().join("two");
    ok(&sqcpc(&["pretrain", "--config", cfg, "--set", "pretext_epochs=2", "--out", two.to_str().unwrap()]));
    assert_eq!(std::fs::read(one.join("last.sqck")).unwrap(), std::fs::read(two.join("last.sqck")).unwrap());
    assert_eq!(std::fs::read_to_string(two.join("log.tsv")).unwrap(), log);
}

#[test]
fn perfect_predictions_score_one_and_zero() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "");
    let cfg_s = cfg.to_str().unwrap();
    ok(&sqcpc(&["synth", "--config", cfg_s]));
    let data = Dataset::load(&root.path().join("data/manifest.txt")).unwrap();
    let test = &data.videos[3];

    // Shrink the regressor so outputs stay inside the label range, then
    // use the model's own predictions as ground truth.
    let mut model = ModelBundle::<f32>::init(NetworkConfig::default(), 5).unwrap();
    let w = model.param("c.linear.weight").unwrap().map(|v| 0.1 * v);
    model.set_param("c.linear.weight", w).unwrap();
    model.set_param("c.linear.bias", Tensor::full(vec![3], 2.5)).unwrap();
    let frames: Vec<usize> = (0..test.num_frames()).collect();
    let preds = predict_video(&model, test, &frames).unwrap();
    let rows = preds
        .into_iter()
        .enumerate()
        .map(|(t, values)| LabelRow {
            video: test.id.clone(),
            frame: t,
            values,
        })
        .collect();
    let labels = root.path().join("perfect.csv");
    LabelTable::new(3, rows).unwrap().save(&labels).unwrap();
    let ckpt = root.path().join("model.sqck");
    model.to_checkpoint().save(&ckpt).unwrap();

    let out = sqcpc(&[
        "eval",
        "--config",
        cfg_s,
        "--set",
        &format!("checkpoint={}", ckpt.display()),
        "--set",
        &format!("eval_labels={}", labels.display()),
    ]);
    ok(&out);
    let report = std::fs::read_to_string(root.path().join("eval/report.txt")).unwrap();
    for line in report.lines().skip(1) {
        let f: Vec<f64> = line.split('\t').skip(1).map(|v| v.trim().parse().unwrap()).collect();
        assert_eq!(f, vec![1.0, 0.0], "{line}");
    }
}
