//! Layers built on the parameter store: convolutions, layer norm, the MLP,
//! the Wrapped NMF module, the Factorizer block and the positional embedding.

use factorizer_tensor::{ConvGeometry, Real, Tensor, Var};

use crate::error::{config, Result};
use crate::matricize::{dematricize, matricize, MatricizeConfig};
use crate::nmf::{self, NmfConfig};
use crate::params::{ComponentRecord, Ctx, Init, ParamId};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geometry: ConvGeometry,
}

impl Conv {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, geometry: ConvGeometry) -> Result<Self> {
        let [kh, kw, kd] = geometry.kernel;
        let weight = init.fan_in_uniform(&format!("{name}.weight"), vec![cout, cin, kh, kw, kd], cin * kh * kw * kd)?;
        let bias = init.constant(&format!("{name}.bias"), vec![cout], 0.0)?;
        Ok(Self { weight, bias, geometry })
    }

    pub fn pointwise<T: Real>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Self::new(init, name, cin, cout, ConvGeometry::new(1, 1, 0))
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.conv3d(ctx.param(self.weight), Some(ctx.param(self.bias)), self.geometry)?)
    }
}

/// Kernel-2, stride-2 transposed convolution (doubles spatial extents).
#[derive(Debug, Clone)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub const GEOMETRY: ConvGeometry = ConvGeometry { kernel: [2; 3], stride: [2; 3], padding: [0; 3] };

    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        // Same fan-in convention as the framework default for transposed convs.
        let weight = init.fan_in_uniform(&format!("{name}.weight"), vec![cin, cout, 2, 2, 2], cout * 8)?;
        let bias = init.constant(&format!("{name}.bias"), vec![cout], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.conv3d_transposed(ctx.param(self.weight), Some(ctx.param(self.bias)), Self::GEOMETRY)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let gain = init.constant(&format!("{name}.gain"), vec![channels], 1.0)?;
        let offset = init.constant(&format!("{name}.offset"), vec![channels], 0.0)?;
        Ok(Self { gain, offset })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.layer_norm(ctx.param(self.gain), ctx.param(self.offset), T::lit(NORM_EPS))?)
    }
}

/// Pointwise `C → 2C → C` with GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Conv,
    pub fc2: Conv,
}

impl Mlp {
    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            fc1: Conv::pointwise(init, &format!("{name}.fc1"), channels, 2 * channels)?,
            fc2: Conv::pointwise(init, &format!("{name}.fc2"), 2 * channels, channels)?,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.fc1.forward(ctx, x)?.gelu();
        self.fc2.forward(ctx, h)
    }
}

/// Projection, matricize, ReLU, NMF reconstruction, dematricize, projection.
#[derive(Debug, Clone)]
pub struct WrappedNmf {
    /// One-based position in the network's NMF-layer list.
    pub layer: usize,
    pub proj_in: Conv,
    pub proj_out: Conv,
    pub matricize: MatricizeConfig,
    pub nmf: NmfConfig,
}

impl WrappedNmf {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        layer: usize,
        channels: usize,
        matricize: MatricizeConfig,
        nmf: NmfConfig,
    ) -> Result<Self> {
        Ok(Self {
            layer,
            proj_in: Conv::pointwise(init, &format!("{name}.proj_in"), channels, channels)?,
            proj_out: Conv::pointwise(init, &format!("{name}.proj_out"), channels, channels)?,
            matricize,
            nmf,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.forward_with(ctx, x, &self.nmf)
    }

    /// Forward with an explicit solver configuration (used for overrides).
    pub fn forward_with<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>, nmf: &NmfConfig) -> Result<Var<'g, T>> {
        let h = self.proj_in.forward(ctx, x)?;
        let batch = matricize(h, self.matricize)?;
        let nonneg = batch.matrices.relu();
        let pair = nmf::factorize(nonneg, nmf)?;
        if ctx.probing() {
            ctx.record(ComponentRecord {
                layer: self.layer,
                factors: pair.g.value(),
                matricize: self.matricize,
                original_shape: batch.original_shape,
            });
        }
        let back = dematricize(&batch.with_matrices(pair.reconstruct()?))?;
        self.proj_out.forward(ctx, back)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockFlags {
    pub skip_nmf: bool,
    pub skip_mlp: bool,
}

/// `y = WrappedNMF(LN(x)) + x`, `z = MLP(LN(y)) + y`.
#[derive(Debug, Clone)]
pub struct FactorizerBlock {
    pub norm1: LayerNorm,
    pub nmf: WrappedNmf,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl FactorizerBlock {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        layer: usize,
        channels: usize,
        matricize: MatricizeConfig,
        nmf: NmfConfig,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), channels)?,
            nmf: WrappedNmf::new(init, &format!("{name}.nmf"), layer, channels, matricize, nmf)?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), channels)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), channels)?,
        })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>, flags: BlockFlags) -> Result<Var<'g, T>> {
        self.forward_with(ctx, x, flags, &self.nmf.nmf)
    }

    pub fn forward_with<'g, T: Real>(
        &self,
        ctx: &Ctx<'g, T>,
        x: Var<'g, T>,
        flags: BlockFlags,
        nmf: &NmfConfig,
    ) -> Result<Var<'g, T>> {
        let y = if flags.skip_nmf {
            x
        } else {
            let n = self.norm1.forward(ctx, x)?;
            self.nmf.forward_with(ctx, n, nmf)?.add(x)?
        };
        if flags.skip_mlp {
            return Ok(y);
        }
        let n = self.norm2.forward(ctx, y)?;
        Ok(self.mlp.forward(ctx, n)?.add(y)?)
    }
}

/// Learnable `(C, H, W, D)` tensor added at bridge resolution.
#[derive(Debug, Clone)]
pub struct PositionalEmbedding {
    pub param: ParamId,
    pub shape: [usize; 4],
}

impl PositionalEmbedding {
    pub const INIT_STD: f64 = 0.02;

    pub fn new<T: Real>(init: &mut Init<'_, T>, name: &str, shape: [usize; 4]) -> Result<Self> {
        let param = init.normal(name, shape.to_vec(), Self::INIT_STD, false)?;
        Ok(Self { param, shape })
    }

    pub fn forward<'g, T: Real>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        add_positional_embedding(x, ctx.param(self.param))
    }
}

/// `x + pe`, broadcasting `pe (C, H, W, D)` over the batch.
pub fn add_positional_embedding<'g, T: Real>(x: Var<'g, T>, pe: Var<'g, T>) -> Result<Var<'g, T>> {
    let xs = x.shape();
    let ps = pe.shape();
    if xs.len() != 5 || ps.len() != 4 || xs[1..] != ps[..] {
        return Err(config(format!(
            "positional embedding of shape {ps:?} does not fit features {xs:?}; the bridge extent is fixed by the training patch size"
        )));
    }
    Ok(x.add(pe.reshape([vec![1], ps].concat())?)?)
}

/// Sets a conv to the identity map (weights `I`, bias 0). Pointwise convs only.
pub fn identity_conv<T: Real>(store: &mut crate::params::ParamStore<T>, conv: &Conv) -> Result<()> {
    let shape = store.get(conv.weight).shape().to_vec();
    let (cout, cin) = (shape[0], shape[1]);
    let w = Tensor::from_fn(shape, |i| if i / cin == i % cin && cout == cin { T::one() } else { T::zero() })?;
    store.set(conv.weight, w)?;
    store.set(conv.bias, Tensor::zeros(vec![cout])?)
}
