//! Run configurations and the cached trained model shared by the integration tests.

#![allow(dead_code)]

use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use freeu_core::freeu::FreeUConfig;
use freeu_core::unet::UNetConfig;
use freeu_lab::checkpoint::Checkpoint;
use freeu_lab::config::RunConfig;
use freeu_lab::train::{train_to, TrainLog};

/// A 16×16 two-stage model with a 20-step schedule that trains in milliseconds.
pub fn tiny_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.count = 64;
    cfg.dataset.size = 16;
    cfg.schedule.steps = 20;
    cfg.unet = UNetConfig {
        base_channels: 8,
        channel_mults: vec![1, 2],
        norm_groups: 4,
        time_embed_dim: 16,
        image_size: 16,
        ..UNetConfig::default()
    };
    cfg.train.steps = 6;
    cfg.train.batch = 4;
    cfg.train.snapshot_every = 2;
    cfg.train.eval_batch = 4;
    cfg.freeu = FreeUConfig::default_for(&cfg.unet.stage_sites(16));
    cfg.sample.count = 2;
    cfg.sample.steps = 10;
    cfg.output.dir = dir.to_path_buf();
    cfg.output.checkpoint = dir.join("model.ckpt");
    cfg.serve.workers = 1;
    cfg.check().expect("tiny config is valid");
    cfg
}

/// Identity modulation on every stage of the tiny model.
pub fn identity() -> FreeUConfig {
    FreeUConfig::identity(&[1, 2])
}

/// Every file under `dir` with its contents, sorted by relative path.
pub fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).expect("readable file")));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// Sources that determine the trained weights; a change retrains the cache.
const MODEL_SOURCES: &[&str] = &[
    include_str!("../../../core/src/autodiff.rs"),
    include_str!("../../../core/src/diffusion.rs"),
    include_str!("../../../core/src/kernels.rs"),
    include_str!("../../../core/src/optim.rs"),
    include_str!("../../../core/src/rng.rs"),
    include_str!("../../../core/src/schedule.rs"),
    include_str!("../../../core/src/tensor.rs"),
    include_str!("../../../core/src/unet.rs"),
    include_str!("../../src/checkpoint.rs"),
    include_str!("../../src/config.rs"),
    include_str!("../../src/container.rs"),
    include_str!("../../src/dataset.rs"),
    include_str!("../../src/train.rs"),
];

/// The default-config model trained to completion, with its loss log and
/// training wall time in seconds.
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub path: PathBuf,
    pub log: TrainLog,
    pub seconds: f64,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

/// Trains the default configuration once and caches the result under the
/// cargo target directory, keyed by the configuration and model sources.
pub fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let cfg = RunConfig::default();
        let mut hasher = DefaultHasher::new();
        cfg.to_toml_string().hash(&mut hasher);
        MODEL_SOURCES.hash(&mut hasher);
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
            .join("trained-default")
            .join(format!("{:016x}", hasher.finish()));
        let path = dir.join("model.ckpt");
        let (loss, time) = (dir.join("loss.csv"), dir.join("train_seconds.txt"));
        if path.exists() && loss.exists() && time.exists() {
            let checkpoint = Checkpoint::load(&path).expect("cached checkpoint loads");
            let log = TrainLog {
                losses: read_losses(&std::fs::read_to_string(&loss).unwrap()),
                evals: Vec::new(),
            };
            let seconds = std::fs::read_to_string(&time).unwrap().trim().parse().unwrap();
            return Trained { checkpoint, path, log, seconds };
        }
        eprintln!("training the default model into {}", dir.display());
        let mut checkpoint = Checkpoint::initial(&cfg).unwrap();
        let mut log = TrainLog::default();
        let start = Instant::now();
        train_to(&mut checkpoint, None, &mut log, |step, l| {
            if step % 100 == 0 {
                eprintln!("step {step} loss {l:.5}");
            }
        })
        .expect("default training succeeds");
        let seconds = start.elapsed().as_secs_f64();
        checkpoint.save(&path).unwrap();
        std::fs::write(&loss, log.loss_csv()).unwrap();
        std::fs::write(&time, format!("{seconds:.1}\n")).unwrap();
        Trained { checkpoint, path, log, seconds }
    })
}

fn read_losses(csv: &str) -> Vec<(u64, f64)> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let (s, v) = l.split_once(',').unwrap();
            (s.parse().unwrap(), v.parse().unwrap())
        })
        .collect()
}
