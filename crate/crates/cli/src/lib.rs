//! Command implementations behind the `factorizer` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use factorizer::ablate::{ablate, AblationPlan};
use factorizer::checkpoint::Checkpoint;
use factorizer::config::ConfigMap;
use factorizer::data::{self, generate, load_dataset, preprocess_with_origin, SyntheticTaskSpec, VolumeSample};
use factorizer::infer::{class_masks, sliding_window_infer, InferConfig};
use factorizer::inspect::inspect_components;
use factorizer::metrics::MetricsReport;
use factorizer::network::{Factorizer, FactorizerConfig};
use factorizer::train::{TrainConfig, Trainer};
use factorizer_tensor::{io as ftio, Tensor};

#[derive(Debug, Parser)]
#[command(name = "factorizer", version, about = "Factorizer segmentation models on 3D volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train a model and write checkpoints plus the training log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sliding-window inference; writes a label map and probabilities per case.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted label maps against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Foreground classes; read from the dataset spec when omitted.
        #[arg(long)]
        classes: Option<usize>,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inference-time ablation sweeps over the NMF layers.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// keep-first, leave-one-out, t-sweep or r-sweep, optionally with
        /// values (`t-sweep:1,5,10`, `r-sweep:1,2@mu`). Defaults to all four.
        #[arg(long)]
        plan: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump spatial maps of the NMF factors of chosen layers.
    InspectComponents {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Case id; the first case when omitted.
        #[arg(long)]
        case: Option<String>,
        /// Comma-separated NMF layer numbers; all layers when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

const SECTIONS: &[&str] = &["model", "nmf", "train", "data", "infer"];

impl Common {
    fn config_map(&self) -> Result<ConfigMap> {
        let mut map = match &self.config {
            Some(p) => ConfigMap::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => ConfigMap::new(),
        };
        for o in &self.overrides {
            map.apply_override(o)?;
        }
        for key in map.keys() {
            let section = key.split('.').next().unwrap_or_default();
            if !SECTIONS.contains(&section) || !key.contains('.') {
                bail!("unknown config key `{key}`; keys live under {}", SECTIONS.join(", "));
            }
        }
        map.check_known("infer", &["overlap", "threshold"])?;
        Ok(map)
    }
}

fn infer_config(map: &ConfigMap, model: &FactorizerConfig) -> Result<InferConfig> {
    let s = map.section("infer");
    let mut cfg = InferConfig::new(model.patch_size);
    cfg.overlap = s.get_or("overlap", cfg.overlap)?;
    cfg.threshold = s.get_or("threshold", cfg.threshold)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path, seed: Option<u64>) -> Result<Factorizer<f32>> {
    let ckpt = Checkpoint::<f32>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut model = ckpt.restore()?;
    if let Some(s) = seed {
        model.config.nmf.init_seed = s;
    }
    Ok(model)
}

fn load_preprocessed(dir: &Path) -> Result<Vec<(VolumeSample, VolumeSample, [usize; 3])>> {
    load_dataset(dir)?
        .into_iter()
        .map(|raw| {
            let (pre, origin) = preprocess_with_origin(&raw)?;
            Ok((raw, pre, origin))
        })
        .collect()
}

/// Places a label map computed on a crop back into the full volume.
fn uncrop(labels: &[u8], crop: [usize; 3], origin: [usize; 3], full: [usize; 3]) -> Vec<u8> {
    let mut out = vec![0u8; full.iter().product()];
    for i in 0..crop[0] {
        for j in 0..crop[1] {
            let src = (i * crop[1] + j) * crop[2];
            let dst = ((origin[0] + i) * full[1] + origin[1] + j) * full[2] + origin[2];
            out[dst..dst + crop[2]].copy_from_slice(&labels[src..src + crop[2]]);
        }
    }
    out
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out, samples } => {
            let map = common.config_map()?;
            let mut spec = SyntheticTaskSpec::from_map(&map)?;
            if let Some(n) = samples {
                spec.samples = n;
            }
            if let Some(s) = common.seed {
                spec.seed = s;
            }
            let set = generate(&spec)?;
            data::save_dataset(&out, &set, Some(&spec))?;
            println!("wrote {} samples to {}", set.len(), out.display());
        }
        Command::Train { common, data, out } => {
            let map = common.config_map()?;
            let model_cfg = FactorizerConfig::from_map(&map)?;
            let mut cfg = TrainConfig::from_map(&map, model_cfg.patch_size)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let samples: Vec<VolumeSample> = load_preprocessed(&data)?.into_iter().map(|(_, p, _)| p).collect();
            let mut model = Factorizer::<f32>::build(model_cfg, cfg.seed)?;
            println!("parameters {}", model.parameter_count());
            std::fs::create_dir_all(&out)?;
            let mut merged = model.config.to_map();
            merged.extend_prefixed("train", &map.section("train"));
            std::fs::write(out.join("config.cfg"), merged.to_text())?;
            let log_every = cfg.log_every;
            let mut trainer = Trainer::new(&mut model, cfg)?.with_output(&out);
            trainer.run(&samples, |step, loss| {
                if step % log_every == 0 {
                    eprintln!("step {step} loss {loss:.5}");
                }
            })?;
            let hash = trainer.checkpoint().hash();
            println!("final checkpoint {} sha256 {hash}", out.join("final.ckpt").display());
        }
        Command::Infer { common, checkpoint, data, out } => {
            let map = common.config_map()?;
            let model = load_model(&checkpoint, common.seed)?;
            let icfg = infer_config(&map, &model.config)?;
            for (raw, pre, origin) in load_preprocessed(&data)? {
                let pred = sliding_window_infer(&model, &pre.image, &icfg)?;
                let labels = uncrop(&pred.labels(), pre.dims(), origin, raw.dims());
                let dir = out.join(&raw.id);
                std::fs::create_dir_all(&dir)?;
                let [h, w, d] = raw.dims();
                ftio::save(dir.join("label.ft"), &Tensor::new(vec![h, w, d], labels.iter().map(|&l| l as f32).collect())?)?;
                ftio::save(dir.join("probabilities.ft"), &pred.probabilities)?;
                let mut meta = ConfigMap::new();
                meta.set("id", &raw.id);
                meta.set("origin", origin.map(|v| v.to_string()).join(","));
                std::fs::write(dir.join("meta"), meta.to_text())?;
                println!("{}\t{}", raw.id, dir.display());
            }
        }
        Command::Eval { common, data, pred, classes, out } => {
            common.config_map()?;
            let truth = load_dataset(&data)?;
            let classes = match classes {
                Some(c) => c,
                None if data.join("dataset.cfg").exists() => {
                    let spec_map = ConfigMap::load(&data.join("dataset.cfg"))?;
                    SyntheticTaskSpec::from_map(&spec_map)?.classes
                }
                None => truth.iter().flat_map(|s| s.label.iter().copied()).max().unwrap_or(0) as usize,
            };
            let mut report = MetricsReport::default();
            for s in &truth {
                let p: Tensor<f32> = ftio::load(pred.join(&s.id).join("label.ft"))
                    .with_context(|| format!("no prediction for case `{}`", s.id))?;
                if p.shape() != s.dims() {
                    bail!("prediction for `{}` has shape {:?}, expected {:?}", s.id, p.shape(), s.dims());
                }
                let labels: Vec<u8> = p.data().iter().map(|&v| v as u8).collect();
                report.add_case(&s.id, &class_masks(&s.label, &labels, s.dims(), classes)?, s.spacing)?;
            }
            write_out(out.as_deref(), &report.to_tsv())?;
        }
        Command::Ablate { common, checkpoint, data, plan, out } => {
            let map = common.config_map()?;
            let model = load_model(&checkpoint, common.seed)?;
            let icfg = infer_config(&map, &model.config)?;
            let layers = model.nmf_layer_count();
            let plans = if plan.is_empty() {
                AblationPlan::NAMES.iter().map(|n| AblationPlan::standard(n, layers)).collect::<factorizer::Result<Vec<_>>>()?
            } else {
                plan.iter().map(|p| AblationPlan::parse(p, layers)).collect::<factorizer::Result<Vec<_>>>()?
            };
            let eval: Vec<VolumeSample> = load_preprocessed(&data)?.into_iter().map(|(_, p, _)| p).collect();
            let report = ablate(&model, &eval, &plans, &icfg, |row| eprintln!("{} {:?} dice {:.4}", row.plan, row.setting, row.mean_dice))?;
            write_out(out.as_deref(), &report.to_tsv())?;
        }
        Command::InspectComponents { common, checkpoint, data, case, layers, out } => {
            common.config_map()?;
            let model = load_model(&checkpoint, common.seed)?;
            let samples = load_preprocessed(&data)?;
            let (_, sample, _) = match &case {
                Some(id) => samples.iter().find(|(r, _, _)| &r.id == id).with_context(|| format!("no case `{id}`"))?,
                None => samples.first().context("dataset is empty")?,
            };
            let input = centered_window(sample, model.config.patch_size)?;
            let maps = inspect_components(&model, &input, &layers)?;
            std::fs::create_dir_all(&out)?;
            let mut index = String::from("layer\theads\trank\tshape\tfile\n");
            for m in &maps {
                let file = format!("layer_{}.ft", m.layer);
                ftio::save(out.join(&file), &m.maps)?;
                let _ = writeln!(index, "{}\t{}\t{}\t{:?}\t{file}", m.layer, m.heads, m.rank, m.maps.shape());
            }
            std::fs::write(out.join("index.tsv"), &index)?;
            print!("{index}");
        }
    }
    Ok(())
}

/// Window-sized crop around the volume centre as a `(1, C, h, w, d)` batch.
fn centered_window(sample: &VolumeSample, window: [usize; 3]) -> Result<Tensor<f32>> {
    let dims = sample.dims();
    if (0..3).any(|a| dims[a] < window[a]) {
        bail!("case `{}` of extent {dims:?} is smaller than the model window {window:?}", sample.id);
    }
    let corner = [0, 1, 2].map(|a| (dims[a] - window[a]) / 2);
    let crop = sample.crop(corner, window)?;
    let s = crop.image.shape().to_vec();
    Ok(crop.image.reshape([vec![1], s].concat())?)
}
