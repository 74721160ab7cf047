//! The U-shaped Factorizer: stem, encoder, bridge with positional embedding,
//! decoder with skip connections and deep-supervision heads.

use std::collections::BTreeSet;

use factorizer_tensor::{ConvGeometry, Real, Var};

use crate::blocks::{BlockFlags, Conv, FactorizerBlock, PositionalEmbedding, UpConv};
use crate::config::ConfigMap;
use crate::error::{config, usage, Result};
use crate::matricize::{MatricizeConfig, MatricizeMode};
use crate::nmf::{NmfConfig, Solver};
use crate::params::{Ctx, Init, ParamStore};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Softmax,
    Sigmoid,
}

impl std::str::FromStr for Activation {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(config(format!("unknown output activation `{other}`"))),
        }
    }
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizerConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Output channels; with softmax this includes the background class.
    pub out_channels: usize,
    pub stages: usize,
    pub matricize: MatricizeMode,
    /// Head dimension per resolution level `0..=stages`.
    pub head_dims: Vec<usize>,
    /// Window edge per resolution level `0..=stages`, before clamping.
    pub patches: Vec<usize>,
    pub nmf: NmfConfig,
    pub blocks_per_stage: usize,
    pub deep_supervision: bool,
    pub positional_embedding: bool,
    /// Training spatial extent.
    pub patch_size: [usize; 3],
    /// Training-time ablation switches.
    pub nmf_subblocks: bool,
    pub mlp_subblocks: bool,
    pub activation: Activation,
}

impl Default for FactorizerConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            base_channels: 32,
            out_channels: 3,
            stages: 4,
            matricize: MatricizeMode::ShiftedWindow,
            head_dims: vec![8; 5],
            patches: vec![8; 5],
            nmf: NmfConfig::default(),
            blocks_per_stage: 1,
            deep_supervision: true,
            positional_embedding: true,
            patch_size: [128; 3],
            nmf_subblocks: true,
            mlp_subblocks: true,
            activation: Activation::Sigmoid,
        }
    }
}

const KEYS: &[&str] = &[
    "in_channels",
    "base_channels",
    "out_channels",
    "stages",
    "matricize",
    "head_dim",
    "patch",
    "blocks_per_stage",
    "deep_supervision",
    "positional_embedding",
    "patch_size",
    "nmf_subblocks",
    "mlp_subblocks",
    "activation",
];
const NMF_KEYS: &[&str] = &["rank", "iterations", "solver", "eps", "seed"];

fn per_level(values: Vec<usize>, levels: usize, key: &str) -> Result<Vec<usize>> {
    match values.len() {
        1 => Ok(vec![values[0]; levels]),
        n if n == levels => Ok(values),
        n => Err(config(format!("`{key}` needs 1 or {levels} values, got {n}"))),
    }
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl FactorizerConfig {
    /// Reads `model.*` and `nmf.*` keys on top of the defaults.
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        map.check_known("model", KEYS)?;
        map.check_known("nmf", NMF_KEYS)?;
        let m = map.section("model");
        let n = map.section("nmf");
        let d = Self::default();
        let stages = m.get_or("stages", d.stages)?;
        let levels = stages + 1;
        let patch_size = match m.get_list::<usize>("patch_size")? {
            None => d.patch_size,
            Some(v) if v.len() == 1 => [v[0]; 3],
            Some(v) if v.len() == 3 => [v[0], v[1], v[2]],
            Some(v) => return Err(config(format!("`model.patch_size` needs 1 or 3 values, got {}", v.len()))),
        };
        let cfg = Self {
            in_channels: m.get_or("in_channels", d.in_channels)?,
            base_channels: m.get_or("base_channels", d.base_channels)?,
            out_channels: m.get_or("out_channels", d.out_channels)?,
            stages,
            matricize: m.get_or("matricize", d.matricize.name().parse()?)?,
            head_dims: per_level(m.get_list("head_dim")?.unwrap_or(vec![d.head_dims[0]]), levels, "model.head_dim")?,
            patches: per_level(m.get_list("patch")?.unwrap_or(vec![d.patches[0]]), levels, "model.patch")?,
            nmf: NmfConfig {
                rank: n.get_or("rank", d.nmf.rank)?,
                iterations: n.get_or("iterations", d.nmf.iterations)?,
                solver: n.get_or("solver", d.nmf.solver)?,
                eps: n.get_or("eps", d.nmf.eps)?,
                init_seed: n.get_or("seed", d.nmf.init_seed)?,
            },
            blocks_per_stage: m.get_or("blocks_per_stage", d.blocks_per_stage)?,
            deep_supervision: m.get_bool("deep_supervision", d.deep_supervision)?,
            positional_embedding: m.get_bool("positional_embedding", d.positional_embedding)?,
            patch_size,
            nmf_subblocks: m.get_bool("nmf_subblocks", d.nmf_subblocks)?,
            mlp_subblocks: m.get_bool("mlp_subblocks", d.mlp_subblocks)?,
            activation: m.get_or("activation", d.activation)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_map(&self) -> ConfigMap {
        let mut m = ConfigMap::new();
        m.set("model.in_channels", self.in_channels);
        m.set("model.base_channels", self.base_channels);
        m.set("model.out_channels", self.out_channels);
        m.set("model.stages", self.stages);
        m.set("model.matricize", self.matricize.name());
        m.set("model.head_dim", join(&self.head_dims));
        m.set("model.patch", join(&self.patches));
        m.set("model.blocks_per_stage", self.blocks_per_stage);
        m.set("model.deep_supervision", self.deep_supervision);
        m.set("model.positional_embedding", self.positional_embedding);
        m.set("model.patch_size", join(&self.patch_size));
        m.set("model.nmf_subblocks", self.nmf_subblocks);
        m.set("model.mlp_subblocks", self.mlp_subblocks);
        m.set("model.activation", self.activation.name());
        m.set("nmf.rank", self.nmf.rank);
        m.set("nmf.iterations", self.nmf.iterations);
        m.set("nmf.solver", self.nmf.solver.name());
        m.set("nmf.eps", format!("{:e}", self.nmf.eps));
        m.set("nmf.seed", self.nmf.init_seed);
        m
    }

    /// Foreground classes predicted; softmax outputs carry one extra background channel.
    pub fn foreground_classes(&self) -> usize {
        match self.activation {
            Activation::Softmax => self.out_channels - 1,
            Activation::Sigmoid => self.out_channels,
        }
    }

    /// Output heads: full resolution plus up to two coarser decoder levels.
    /// The bridge level has no decoder output, so it is never supervised.
    pub fn supervised_levels(&self) -> usize {
        if self.deep_supervision {
            3.min(self.stages)
        } else {
            1
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn extent(&self, level: usize) -> [usize; 3] {
        self.patch_size.map(|e| e >> level)
    }

    /// Matricize settings at a resolution level, with the window clamped to the
    /// level's spatial extent. A shifted window needs an even edge; below that
    /// it degenerates to a plain local window.
    pub fn matricize_at(&self, level: usize) -> MatricizeConfig {
        let smallest = *self.extent(level).iter().min().expect("three axes");
        let p = self.patches[level].min(smallest);
        let mode = match self.matricize {
            MatricizeMode::ShiftedWindow if p < 2 || p % 2 != 0 => MatricizeMode::Local,
            m => m,
        };
        MatricizeConfig::new(mode, self.head_dims[level], p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.out_channels == 0 {
            return Err(config("channel counts must be positive"));
        }
        if self.activation == Activation::Softmax && self.out_channels < 2 {
            return Err(config("softmax output needs a background channel plus at least one class"));
        }
        if self.stages == 0 {
            return Err(config("at least one stage is required"));
        }
        if self.blocks_per_stage == 0 {
            return Err(config("blocks_per_stage must be at least 1"));
        }
        let levels = self.stages + 1;
        if self.head_dims.len() != levels || self.patches.len() != levels {
            return Err(config(format!("head_dim and patch need {levels} entries (one per resolution level)")));
        }
        let multiple = 1usize << self.stages;
        for (axis, &e) in ["H", "W", "D"].iter().zip(&self.patch_size) {
            if e == 0 || e % multiple != 0 {
                return Err(config(format!("patch size {axis}={e} must be a positive multiple of {multiple} (2^stages)")));
            }
        }
        self.nmf.validate()?;
        for level in 0..levels {
            let c = self.channels(level);
            let mc = self.matricize_at(level);
            let shape = [1, c, self.extent(level)[0], self.extent(level)[1], self.extent(level)[2]];
            mc.validate(&shape).map_err(|e| config(format!("resolution level {level}: {e}")))?;
            let [_, m, n] = mc.matrix_shape(&shape)?;
            if self.nmf.rank > m.min(n) {
                return Err(config(format!("level {level}: NMF rank {} exceeds min(M, N) = {}", self.nmf.rank, m.min(n))));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    blocks: Vec<FactorizerBlock>,
    down: Conv,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: UpConv,
    fuse: Conv,
    blocks: Vec<FactorizerBlock>,
}

/// Runtime NMF overrides for inference ablations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NmfOverrides {
    pub short_circuit: BTreeSet<usize>,
    pub iterations: Option<usize>,
    pub rank: Option<usize>,
    pub solver: Option<Solver>,
}

impl NmfOverrides {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

pub struct NetworkOutput<'g, T: Real> {
    pub logits: Var<'g, T>,
    /// Logits at 1/2 and 1/4 resolution (training with deep supervision only).
    pub aux: Vec<Var<'g, T>>,
}

#[derive(Debug, Clone)]
pub struct Factorizer<T: Real> {
    pub config: FactorizerConfig,
    pub params: ParamStore<T>,
    pub seed: u64,
    stem: Conv,
    encoder: Vec<EncoderStage>,
    pe: Option<PositionalEmbedding>,
    bridge: Vec<FactorizerBlock>,
    decoder: Vec<DecoderStage>,
    heads: Vec<Conv>,
    overrides: NmfOverrides,
    nmf_layers: usize,
}

impl<T: Real> Factorizer<T> {
    pub fn build(config: FactorizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let cfg = &config;
        let mut layer = 0;
        let mut blocks = |init: &mut Init<'_, T>, name: &str, level: usize| -> Result<Vec<FactorizerBlock>> {
            (0..cfg.blocks_per_stage)
                .map(|k| {
                    layer += 1;
                    FactorizerBlock::new(init, &format!("{name}.block{k}"), layer, cfg.channels(level), cfg.matricize_at(level), cfg.nmf)
                })
                .collect()
        };

        let stem = Conv::new(&mut init, "stem", cfg.in_channels, cfg.base_channels, ConvGeometry::new(3, 1, 1))?;
        let mut encoder = Vec::new();
        for s in 0..cfg.stages {
            let b = blocks(&mut init, &format!("enc{s}"), s)?;
            let down = Conv::new(&mut init, &format!("enc{s}.down"), cfg.channels(s), cfg.channels(s + 1), ConvGeometry::new(2, 2, 0))?;
            encoder.push(EncoderStage { blocks: b, down });
        }
        let pe = if cfg.positional_embedding {
            let [h, w, d] = cfg.extent(cfg.stages);
            Some(PositionalEmbedding::new(&mut init, "bridge.pe", [cfg.channels(cfg.stages), h, w, d])?)
        } else {
            None
        };
        let bridge = blocks(&mut init, "bridge", cfg.stages)?;
        let mut decoder = Vec::new();
        for s in (0..cfg.stages).rev() {
            let up = UpConv::new(&mut init, &format!("dec{s}.up"), cfg.channels(s + 1), cfg.channels(s))?;
            let fuse = Conv::pointwise(&mut init, &format!("dec{s}.fuse"), 2 * cfg.channels(s), cfg.channels(s))?;
            let b = blocks(&mut init, &format!("dec{s}"), s)?;
            decoder.push(DecoderStage { up, fuse, blocks: b });
        }
        let heads = (0..cfg.supervised_levels())
            .map(|s| Conv::pointwise(&mut init, &format!("head{s}"), cfg.channels(s), cfg.out_channels))
            .collect::<Result<Vec<_>>>()?;
        let nmf_layers = layer;
        Ok(Self { config, params, seed, stem, encoder, pe, bridge, decoder, heads, overrides: NmfOverrides::default(), nmf_layers })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Number of NMF layers (encoder, bridge, then decoder from deepest).
    pub fn nmf_layer_count(&self) -> usize {
        self.nmf_layers
    }

    pub fn overrides(&self) -> &NmfOverrides {
        &self.overrides
    }

    pub fn set_overrides(&mut self, overrides: NmfOverrides) -> Result<()> {
        self.check_layers(&overrides.short_circuit)?;
        if overrides.iterations == Some(0) || overrides.rank == Some(0) {
            return Err(usage("iteration and rank overrides must be positive"));
        }
        self.overrides = overrides;
        Ok(())
    }

    fn check_layers(&self, layers: &BTreeSet<usize>) -> Result<()> {
        match layers.iter().find(|&&l| l == 0 || l > self.nmf_layers) {
            Some(l) => Err(usage(format!("NMF layer {l} does not exist; valid layers are 1..={}", self.nmf_layers))),
            None => Ok(()),
        }
    }

    /// Replaces the given NMF layers by the identity on their residual path.
    pub fn short_circuit(&mut self, layers: &[usize]) -> Result<()> {
        let set: BTreeSet<usize> = layers.iter().copied().collect();
        self.check_layers(&set)?;
        self.overrides.short_circuit.extend(set);
        Ok(())
    }

    pub fn override_nmf(&mut self, iterations: Option<usize>, rank: Option<usize>, solver: Option<Solver>) -> Result<()> {
        let next = NmfOverrides { iterations, rank, solver, ..self.overrides.clone() };
        self.set_overrides(next)
    }

    pub fn clear_overrides(&mut self) {
        self.overrides = NmfOverrides::default();
    }

    fn run_blocks<'g>(&self, ctx: &Ctx<'g, T>, blocks: &[FactorizerBlock], mut x: Var<'g, T>) -> Result<Var<'g, T>> {
        for block in blocks {
            let layer = block.nmf.layer;
            let flags = BlockFlags {
                skip_nmf: !self.config.nmf_subblocks || self.overrides.short_circuit.contains(&layer),
                skip_mlp: !self.config.mlp_subblocks,
            };
            let mut nmf = block.nmf.nmf;
            nmf.iterations = self.overrides.iterations.unwrap_or(nmf.iterations);
            nmf.solver = self.overrides.solver.unwrap_or(nmf.solver);
            if let Some(r) = self.overrides.rank {
                // Requested ranks above a layer's matrix size are clamped to it.
                let m = block.nmf.matricize;
                let [_, rows, cols] = m.matrix_shape(&x.shape())?;
                nmf.rank = r.min(rows).min(cols);
            }
            nmf.init_seed = rng::derive_seed(self.config.nmf.init_seed, &[layer as u64, ctx.step]);
            x = block.forward_with(ctx, x, flags, &nmf)?;
        }
        Ok(x)
    }

    pub fn forward<'g>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>, training: bool) -> Result<NetworkOutput<'g, T>> {
        let cfg = &self.config;
        let shape = x.shape();
        if shape.len() != 5 || shape[1] != cfg.in_channels {
            return Err(config(format!("expected input (B, {}, H, W, D), got {shape:?}", cfg.in_channels)));
        }
        let multiple = 1usize << cfg.stages;
        if shape[2..].iter().any(|e| e % multiple != 0) {
            return Err(config(format!("spatial extents {:?} must be multiples of {multiple}", &shape[2..])));
        }

        let mut h = self.stem.forward(ctx, x)?;
        let mut skips = Vec::with_capacity(cfg.stages);
        for stage in &self.encoder {
            h = self.run_blocks(ctx, &stage.blocks, h)?;
            skips.push(h);
            h = stage.down.forward(ctx, h)?;
        }
        if let Some(pe) = &self.pe {
            h = pe.forward(ctx, h)?;
        }
        h = self.run_blocks(ctx, &self.bridge, h)?;

        let want_aux = training && cfg.deep_supervision;
        let mut aux = Vec::new();
        for (stage, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = stage.up.forward(ctx, h)?;
            let fused = stage.fuse.forward(ctx, Var::concat(&[up, *skip], 1)?)?;
            h = self.run_blocks(ctx, &stage.blocks, fused)?;
            let level = (shape[2] / h.shape()[2]).trailing_zeros() as usize;
            if want_aux && level >= 1 && level < self.heads.len() {
                aux.push((level, self.heads[level].forward(ctx, h)?));
            }
        }
        aux.sort_by_key(|(level, _)| *level);
        let logits = self.heads[0].forward(ctx, h)?;
        Ok(NetworkOutput { logits, aux: aux.into_iter().map(|(_, v)| v).collect() })
    }

    /// `(channels, spatial extents)` at every resolution level for the training patch.
    pub fn level_shapes(&self) -> Vec<(usize, [usize; 3])> {
        (0..=self.config.stages).map(|l| (self.config.channels(l), self.config.extent(l))).collect()
    }

    /// Matricize settings of every NMF layer, in layer order.
    pub fn nmf_layer_configs(&self) -> Vec<(usize, MatricizeConfig)> {
        self.encoder
            .iter()
            .flat_map(|s| &s.blocks)
            .chain(&self.bridge)
            .chain(self.decoder.iter().flat_map(|s| &s.blocks))
            .map(|b| (b.nmf.layer, b.nmf.matricize))
            .collect()
    }
}
