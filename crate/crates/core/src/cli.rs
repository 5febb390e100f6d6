//! Command-line interface: `synth`, `train`, `eval` and `predict`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, generate_synthetic, load_isic, preprocess, write_isic, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::lpse::descriptor_csv;
use crate::model::{LesionNet, ModelConfig};
use crate::morphology::BinaryMask;
use crate::params::ParamStore;
use crate::train::{self, evaluate, history_csv, init_model, predict};

pub const CHECKPOINT_FILE: &str = "checkpoint.lckp";

#[derive(Debug, Parser)]
#[command(name = "lesioncascade", version, about = "Skin lesion segmentation and melanoma recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides for individual config keys.
#[derive(Debug, Args, Default)]
struct Overrides {
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    warmup_iters: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Single-threaded numerics (the only mode this build has).
    #[arg(long)]
    deterministic: bool,
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(v) = self.beta {
            c.model.beta = v;
        }
        if let Some(v) = self.stages {
            c.model.stages = v;
        }
        if let Some(v) = self.seed {
            c.set_seed(v);
        }
        if let Some(v) = self.warmup_iters {
            c.train.warmup_iters = v;
        }
        if let Some(v) = self.max_iters {
            c.train.max_iters = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.base_lr {
            c.train.base_lr = v;
        }
        if let Some(v) = self.image_size {
            c.data.synth.image_size = v;
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (train/ and test/ in ISIC layout).
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train on an ISIC-layout directory; writes checkpoint and metrics CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Held-out set scored at every history row.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a checkpoint; writes metric report, ROC and predicted masks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        deterministic: bool,
    },
    /// Segment and diagnose a single image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the final-stage lesion descriptor as CSV.
        #[arg(long)]
        dump_descriptor: bool,
        #[arg(long)]
        deterministic: bool,
    },
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out, overrides } => {
            let cfg = resolve(config.as_deref(), &overrides)?;
            synth(&cfg, &out)
        }
        Command::Train {
            config,
            data,
            eval_data,
            out,
            overrides,
        } => {
            let cfg = resolve(config.as_deref(), &overrides)?;
            train_cmd(&cfg, &data, eval_data.as_deref(), &out)
        }
        Command::Eval {
            checkpoint, data, out, ..
        } => eval_cmd(&checkpoint, &data, &out),
        Command::Predict {
            checkpoint,
            image,
            out,
            dump_descriptor,
            ..
        } => predict_cmd(&checkpoint, &image, &out, dump_descriptor),
    }
}

fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let train_set = generate_synthetic(&cfg.data.synth)?;
    let test_cfg = SynthConfig {
        count_per_class: cfg.data.test_count_per_class,
        stream: cfg.data.synth.stream + 1,
        ..cfg.data.synth.clone()
    };
    write_isic(&out.join("train"), &train_set)?;
    if cfg.data.test_count_per_class > 0 {
        write_isic(&out.join("test"), &generate_synthetic(&test_cfg)?)?;
    }
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    log::info!("wrote {} training samples to {}", train_set.len(), out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let report = load_isic(dir)?;
    for p in &report.problems {
        eprintln!("warning: {p}");
    }
    Ok(report.samples)
}

fn train_cmd(cfg: &RunConfig, data_dir: &Path, eval_dir: Option<&Path>, out: &Path) -> Result<()> {
    let prep = |s: Vec<Sample>| -> Vec<Sample> {
        s.iter().map(|s| preprocess(s, cfg.data.max_extent).sample).collect()
    };
    let samples = prep(load_dataset(data_dir)?);
    if samples.is_empty() {
        return Err(Error::Value(format!("no usable samples in {}", data_dir.display())));
    }
    let eval_set = match eval_dir {
        Some(d) => Some(load_dataset(d)?),
        None => None,
    };
    create_dir(out)?;
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    let (net, mut store) = init_model(&cfg.model, cfg.train.seed)?;
    let outcome = train::train(&net, &mut store, &samples, eval_set.as_deref(), &cfg.train)?;
    write_file(&out.join("metrics.csv"), history_csv(&outcome.history))?;
    let meta = toml::to_string(&cfg.model).expect("model config serializes");
    write_file(&out.join(CHECKPOINT_FILE), Checkpoint::from_store(&store, meta).to_bytes())?;
    Ok(())
}

/// Rebuilds the network described by a checkpoint and loads its weights.
pub fn load_checkpoint(path: &Path) -> Result<(LesionNet, ParamStore)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::read_from(std::io::BufReader::new(file))?;
    let config: ModelConfig =
        toml::from_str(&ckpt.meta).map_err(|e| Error::Checkpoint(format!("bad model metadata: {e}")))?;
    let (net, mut store) = init_model(&config, 0)?;
    ckpt.load_into(&mut store)?;
    Ok((net, store))
}

fn eval_cmd(checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let (net, store) = load_checkpoint(checkpoint)?;
    let samples = load_dataset(data_dir)?;
    if samples.is_empty() {
        return Err(Error::Value(format!("no usable samples in {}", data_dir.display())));
    }
    let eval = evaluate(&net, &store, &samples, data::DEFAULT_MAX_EXTENT)?;
    let masks = out.join("masks");
    create_dir(&masks)?;
    write_file(&out.join("metrics.csv"), eval.report.to_csv())?;
    let roc = match &eval.roc {
        Some(r) => r.to_csv(),
        None => "auc,NA\nfpr,tpr\n".to_string(),
    };
    write_file(&out.join("roc.csv"), roc)?;
    let mut per_image = String::from("image_id,melanoma,melanoma_probability,JA\n");
    for ((p, s), m) in eval.predictions.iter().zip(&samples).zip(&eval.per_image) {
        per_image.push_str(&format!("{},{},{:.6},{:.6}\n", p.id, s.label, p.melanoma_probability, m.ja));
        p.mask.save(&masks.join(format!("{}_segmentation.png", p.id)))?;
    }
    write_file(&out.join("predictions.csv"), per_image)?;
    Ok(())
}

fn predict_cmd(checkpoint: &Path, image: &Path, out: &Path, dump_descriptor: bool) -> Result<()> {
    let (net, store) = load_checkpoint(checkpoint)?;
    let img = image::open(image).map_err(|source| Error::Image {
        path: image.to_path_buf(),
        source,
    })?;
    let tensor = data::rgb_to_tensor(&img.to_rgb8());
    let (h, w) = (tensor.shape()[1], tensor.shape()[2]);
    let id = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    let sample = Sample::new(tensor, BinaryMask::empty(h, w), 0, id.clone())?;
    let p = predict(&net, &store, &sample, data::DEFAULT_MAX_EXTENT)?;
    if dump_descriptor && p.descriptor.is_none() {
        return Err(Error::Config("--dump-descriptor needs a model with lpse pooling".into()));
    }
    create_dir(out)?;
    p.mask.save(&out.join(format!("{id}_segmentation.png")))?;
    let classes = p.stage_diagnoses.first().map_or(0, Vec::len);
    let mut csv = String::from("stage");
    for c in 0..classes {
        csv.push_str(&match (classes, c) {
            (2, 0) => ",non_melanoma".to_string(),
            (2, _) => ",melanoma".to_string(),
            _ => format!(",class_{c}"),
        });
    }
    csv.push('\n');
    for (s, probs) in p.stage_diagnoses.iter().enumerate() {
        csv.push_str(&(s + 1).to_string());
        for v in probs {
            csv.push_str(&format!(",{v:.6}"));
        }
        csv.push('\n');
    }
    write_file(&out.join("diagnosis.csv"), csv)?;
    if let (true, Some(d)) = (dump_descriptor, &p.descriptor) {
        write_file(&out.join("descriptor.csv"), descriptor_csv(d))?;
    }
    Ok(())
}
