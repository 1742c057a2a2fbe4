use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use freeu_core::freeu::FreeUStageConfig;
use freeu_lab::checkpoint::Checkpoint;
use freeu_lab::config::RunConfig;
use freeu_lab::container;
use freeu_lab::dataset::synth_from_spec;
use freeu_lab::figures::{run_figure, FigureName, FigureParams};
use freeu_lab::job::{encode_pgm, run_sample_job, SampleJob};
use freeu_lab::service::{serve, Service};
use freeu_lab::train::{train_to, write_logs, TrainLog};
use freeu_lab::{LabError, Result};

#[derive(Parser)]
#[command(name = "freeu-lab", version, about = "FreeU toy diffusion lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    b1: Option<f64>,
    #[arg(long)]
    s1: Option<f64>,
    #[arg(long)]
    b2: Option<f64>,
    #[arg(long)]
    s2: Option<f64>,
    /// Checkpoint path, overriding `output.checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and a preview.
    SynthData(Common),
    /// Train (or with --resume, continue training) a model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
    },
    /// Sample images with the configured FreeU settings.
    Sample(Common),
    /// Sample baseline and FreeU images from shared noise.
    Compare(Common),
    /// Run a figure pipeline: fig2, fig5, fig6 or fig13.
    Figure {
        name: String,
        #[command(flatten)]
        common: Common,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Clone, Copy, PartialEq)]
enum Verb {
    Synth,
    Train,
    Sample,
}

fn load_config(c: &Common, verb: Verb) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        match verb {
            Verb::Synth => cfg.dataset.seed = seed,
            Verb::Train => cfg.train.seed = seed,
            Verb::Sample => cfg.sample.seed = seed,
        }
    }
    if let Some(steps) = c.steps {
        match verb {
            Verb::Train => cfg.train.steps = steps as u64,
            _ => cfg.sample.steps = steps,
        }
    }
    let sites = cfg.unet.stage_sites(cfg.unet.image_size);
    for (stage, b, s) in [(1, c.b1, c.s1), (2, c.b2, c.s2)] {
        if b.is_none() && s.is_none() {
            continue;
        }
        cfg.freeu.enabled = true;
        if cfg.freeu.stage(stage).is_none() {
            let h = sites.iter().find(|x| x.stage == stage).map_or(0, |x| x.height);
            cfg.freeu
                .stages
                .push(FreeUStageConfig::new(stage, 1.0, 1.0, h as f64 / 4.0));
        }
        let entry = cfg
            .freeu
            .stages
            .iter_mut()
            .find(|x| x.stage == stage)
            .expect("stage present");
        if let Some(b) = b {
            entry.backbone_factor = b;
        }
        if let Some(s) = s {
            entry.skip_factor = s;
        }
    }
    if let Some(p) = &c.checkpoint {
        cfg.output.checkpoint = p.clone();
    }
    if let Some(d) = &c.out {
        cfg.output.dir = d.clone();
    }
    cfg.check()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(c) => {
            let cfg = load_config(&c, Verb::Synth)?;
            let data = synth_from_spec(&cfg.dataset)?;
            let dir = cfg.output.dir.join("dataset");
            container::save(&dir.join("dataset.tensors"), &cfg.dataset, &[("images".into(), data.clone())])?;
            for i in 0..data.shape()[0].min(16) {
                container::write_atomic(
                    &dir.join(format!("preview_{i:03}.pgm")),
                    &encode_pgm(&data.batch_item(i)?)?,
                )?;
            }
            println!("wrote {} images to {}", data.shape()[0], dir.display());
        }
        Command::Train { common, resume } => {
            let cfg = load_config(&common, Verb::Train)?;
            let path = cfg.output.checkpoint.clone();
            let mut ckpt = if resume {
                let mut ck = Checkpoint::load(&path)?;
                ck.config.train.steps = cfg.train.steps;
                ck
            } else {
                Checkpoint::initial(&cfg)?
            };
            let start = ckpt.step;
            let mut log = TrainLog::default();
            let total = ckpt.config.train.steps;
            let result = train_to(&mut ckpt, Some(&path), &mut log, |step, loss| {
                if step % 50 == 0 || step == total {
                    eprintln!("step {step}/{total} loss {loss:.5}");
                }
            });
            let dir = &cfg.output.dir;
            if resume {
                let mut prior = read_loss_csv(&dir.join("loss.csv"));
                prior.retain(|(s, _)| *s <= start);
                prior.append(&mut log.losses);
                log.losses = prior;
            }
            write_logs(dir, &log)?;
            result?;
            println!("checkpoint at step {} written to {}", ckpt.step, path.display());
        }
        Command::Sample(c) => sample_verb(&c, false)?,
        Command::Compare(c) => sample_verb(&c, true)?,
        Command::Figure { name, common } => {
            let figure: FigureName = name.parse()?;
            let cfg = load_config(&common, Verb::Sample)?;
            let ckpt = Checkpoint::load(&cfg.output.checkpoint)?;
            let full = ckpt.config.schedule.build()?;
            let mut params = FigureParams::new(&ckpt.model, cfg.sample.steps);
            params.seed = cfg.sample.seed;
            params.count = cfg.sample.count;
            params.r_cut = cfg.sample.r_cut;
            params.freeu = cfg.freeu.clone();
            let files = run_figure(figure, &ckpt.model, &full, &params, &cfg.output.dir.join("figures"))?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Serve { common, port } => {
            let mut cfg = load_config(&common, Verb::Sample)?;
            if let Some(p) = port {
                cfg.serve.port = p;
            }
            let mut ckpt = Checkpoint::load(&cfg.output.checkpoint)?;
            ckpt.config.freeu = cfg.freeu.clone();
            let addr: SocketAddr = format!("{}:{}", cfg.serve.host, cfg.serve.port)
                .parse()
                .map_err(|_| LabError::field("serve.host", format!("bad address {}", cfg.serve.host)))?;
            let state = Service::new(ckpt, &cfg.serve)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| LabError::Io {
                path: PathBuf::from("<runtime>"),
                source: e,
            })?;
            eprintln!("listening on http://{addr}");
            rt.block_on(serve(state, addr)).map_err(|e| LabError::Io {
                path: PathBuf::from(addr.to_string()),
                source: e,
            })?;
        }
    }
    Ok(())
}

fn sample_verb(c: &Common, compare: bool) -> Result<()> {
    let cfg = load_config(c, Verb::Sample)?;
    let mut job = SampleJob::from_config(&cfg);
    job.compare = job.compare || compare;
    let dir = cfg.output.dir.join(if compare { "compare" } else { "samples" });
    let (_, files) = run_sample_job(&cfg.output.checkpoint, &job, &dir)?;
    println!("wrote {} files to {}", files.len(), dir.display());
    Ok(())
}

fn read_loss_csv(path: &std::path::Path) -> Vec<(u64, f64)> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let (s, v) = l.split_once(',')?;
            Some((s.parse().ok()?, v.parse().ok()?))
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
