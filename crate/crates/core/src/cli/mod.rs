//! Command line front end: `synth`, `pretrain`, `finetune` and `eval`,
//! each driven by one flat [`RunConfig`].

mod config;

pub use config::RunConfig;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Payload};
use crate::data::{format_manifest, Dataset, LabelTable, ManifestEntry};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, NetworkConfig};
use crate::semisup::{evaluate, train_finetune, train_pretext, PretextResume};

pub const MANIFEST: &str = "manifest.txt";
pub const DENSE_LABELS: &str = "dense_labels.csv";
pub const LABELS: &str = "labels.csv";
pub const RESOLVED: &str = "resolved_config.txt";
pub const LOG: &str = "log.tsv";
pub const BEST: &str = "best.sqck";
pub const LAST: &str = "last.sqck";
pub const REPORT: &str = "report.txt";

const BEST_TOP1: &str = "train.best_top1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Pretrain,
    Finetune,
    Eval,
}

impl Command {
    /// Config key naming the default output directory.
    fn out_key(self) -> &'static str {
        match self {
            Command::Synth => "data_dir",
            Command::Pretrain => "pretrain_dir",
            Command::Finetune => "finetune_dir",
            Command::Eval => "eval_dir",
        }
    }
}

/// Runs `cmd`, writing into `out` (or the command's directory key) and
/// returning that directory.
pub fn run(cmd: Command, cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out.map_or_else(|| cfg.path(cmd.out_key()), Path::to_path_buf);
    // Validate every section before touching the disk.
    cfg.synth_spec()?;
    cfg.network()?;
    cfg.train()?;
    create_dir(&dir)?;
    write(&dir.join(RESOLVED), cfg.to_text())?;
    match cmd {
        Command::Synth => synth(cfg, &dir)?,
        Command::Pretrain => pretrain(cfg, &dir)?,
        Command::Finetune => finetune(cfg, &dir)?,
        Command::Eval => eval(cfg, &dir)?,
    }
    Ok(dir)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generator of the sparse label selection for `seed`.
pub fn label_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn synth(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = cfg.synth_spec()?.generate()?;
    create_dir(&dir.join("videos"))?;
    let mut entries = Vec::with_capacity(data.videos.len());
    for v in &data.videos {
        let rel = PathBuf::from("videos").join(format!("{}.sqf", v.id));
        v.save(&dir.join(&rel))?;
        entries.push(ManifestEntry {
            id: v.id.clone(),
            path: rel,
            num_frames: v.num_frames(),
        });
    }
    write(&dir.join(MANIFEST), format_manifest(&entries))?;
    let dense = data.dense_labels()?;
    dense.save(&dir.join(DENSE_LABELS))?;
    let (train, _) = Dataset { videos: data.videos }.split_tail(cfg.parse("test_videos")?)?;
    let sparse = dense.subsample(&train, cfg.parse("label_fraction")?, &mut label_rng(cfg.seed()?))?;
    sparse.save(&dir.join(LABELS))?;
    println!(
        "wrote {} videos, {} dense and {} sparse labels to {}",
        entries.len(),
        dense.len(),
        sparse.len(),
        dir.display()
    );
    Ok(())
}

/// `(train, test)` splits of the dataset under `data_dir`, checked
/// against the network's frame shape.
fn load_splits(cfg: &RunConfig, net: &NetworkConfig) -> Result<(Dataset, Dataset)> {
    let data = Dataset::load(&cfg.path("data_dir").join(MANIFEST))?;
    if let Some(v) = data.videos.iter().find(|v| v.frame_shape() != net.frame_shape()) {
        return Err(Error::Config(format!(
            "video {} has frames {:?}, the network expects {:?}",
            v.id,
            v.frame_shape(),
            net.frame_shape()
        )));
    }
    data.split_tail(cfg.parse("test_videos")?)
}

fn load_model(net: NetworkConfig, path: &Path) -> Result<(ModelBundle, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let model = ModelBundle::from_checkpoint(net, &ck).map_err(|detail| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    })?;
    Ok((model, ck))
}

fn labels_path(cfg: &RunConfig, key: &str, file: &str) -> PathBuf {
    cfg.optional(key)
        .map_or_else(|| cfg.path("data_dir").join(file), PathBuf::from)
}

fn pretrain(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let net = cfg.network()?;
    let train_cfg = cfg.train()?;
    let (train, test) = load_splits(cfg, &net)?;
    let (model, resume, prior_best) = match cfg.optional("resume") {
        Some(path) => {
            let path = Path::new(path);
            let (model, ck) = load_model(net, path)?;
            let state = PretextResume::read_from(&model, &ck)
                .map_err(|detail| Error::Checkpoint { path: path.to_path_buf(), detail })?
                .ok_or_else(|| Error::Checkpoint {
                    path: path.to_path_buf(),
                    detail: "no optimizer state to resume from".into(),
                })?;
            let best = match ck.get(BEST_TOP1) {
                Some(Payload::F64(t)) => t.item(),
                _ => f64::NEG_INFINITY,
            };
            (model, Some(state), best)
        }
        None => (ModelBundle::init(net, cfg.seed()?)?, None, f64::NEG_INFINITY),
    };
    let resumed = resume.is_some();
    let out = train_pretext(&train, &test, &train_cfg, model, resume)?;
    let best_top1 = out.best_top1.max(prior_best);
    if out.best_top1 > prior_best {
        out.best.to_checkpoint().save(&dir.join(BEST))?;
    }
    let mut last = out.model.to_checkpoint();
    PretextResume {
        optimizer: out.optimizer.clone(),
        epochs_done: out.epochs_done,
    }
    .write_into(&out.model, &mut last);
    last.push(BEST_TOP1, Payload::F64(crate::diffcore::Tensor::scalar(best_top1)));
    last.save(&dir.join(LAST))?;
    let log_path = dir.join(LOG);
    let mut log = if resumed {
        std::fs::read_to_string(&log_path).unwrap_or_default()
    } else {
        String::new()
    };
    log.push_str(&out.log.to_text());
    write(&log_path, log)?;
    println!(
        "pretext: {} epochs, best val top1 {best_top1:.4}, checkpoints in {}",
        out.epochs_done,
        dir.display()
    );
    Ok(())
}

fn finetune(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let net = cfg.network()?;
    let train_cfg = cfg.train()?;
    let (train, test) = load_splits(cfg, &net)?;
    let dense_path = labels_path(cfg, "eval_labels", DENSE_LABELS);
    let labels = match cfg.optional("finetune_fraction") {
        Some(_) => LabelTable::load(&dense_path)?.subsample(
            &train,
            cfg.parse("finetune_fraction")?,
            &mut label_rng(cfg.seed()?),
        )?,
        None => LabelTable::load(&labels_path(cfg, "labels", LABELS))?,
    };
    let model = match cfg.get("init") {
        "scratch" => ModelBundle::init(net, cfg.seed()?)?,
        path => load_model(net, Path::new(path))?.0,
    };
    let val_labels = LabelTable::load(&dense_path)?.restrict_to(&test);
    let val = (!val_labels.is_empty()).then_some((&test, &val_labels));
    let out = train_finetune(&train, &labels, val, &train_cfg, model)?;
    labels.save(&dir.join(LABELS))?;
    out.best.to_checkpoint().save(&dir.join(BEST))?;
    out.model.to_checkpoint().save(&dir.join(LAST))?;
    write(&dir.join(LOG), out.log.to_text())?;
    println!(
        "finetune: {} labels, {} steps, checkpoints in {}",
        labels.len(),
        out.steps,
        dir.display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let net = cfg.network()?;
    let (train, test) = load_splits(cfg, &net)?;
    let data = match cfg.get("eval_split") {
        "test" => test,
        "train" => train,
        "all" => Dataset {
            videos: train.videos.into_iter().chain(test.videos).collect(),
        },
        other => {
            return Err(Error::Config(format!(
                "config key `eval_split`: expected test, train or all, got {other:?}"
            )))
        }
    };
    let ck = cfg
        .optional("checkpoint")
        .map_or_else(|| cfg.path("finetune_dir").join(LAST), PathBuf::from);
    let (model, _) = load_model(net, &ck)?;
    let labels = LabelTable::load(&labels_path(cfg, "eval_labels", DENSE_LABELS))?;
    let report = evaluate(&model, &data, &labels)?;
    let table = report.to_table();
    write(&dir.join(REPORT), &table)?;
    print!("{table}");
    Ok(())
}
