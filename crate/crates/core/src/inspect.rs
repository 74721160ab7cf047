//! Spatial maps of the NMF factors `G`, one map per head and component.

use factorizer_tensor::{Graph, Real, Tensor};

use crate::error::{usage, Result};
use crate::matricize::{dematricize, MatricizeConfig, MatricizedBatch};
use crate::network::Factorizer;
use crate::params::{ComponentRecord, Ctx};

/// Factor maps of one NMF layer, `(B, heads·R, H, W, D)`: channel
/// `h·R + r` holds component `r` of head `h`.
#[derive(Debug, Clone)]
pub struct ComponentMaps<T: Real> {
    pub layer: usize,
    pub heads: usize,
    pub rank: usize,
    pub maps: Tensor<T>,
}

/// Puts the `(B', N, R)` factor matrices of a record back on the spatial grid.
pub fn component_maps<T: Real>(rec: &ComponentRecord<T>) -> Result<ComponentMaps<T>> {
    let rank = rec.factors.shape()[2];
    let [b, c, h, w, d] = rec.original_shape;
    let heads = c / rec.matricize.head_dim;
    let g = Graph::new();
    let factors = g.constant(rec.factors.clone()).permute(&[0, 2, 1])?;
    let batch = MatricizedBatch {
        matrices: factors,
        original_shape: [b, heads * rank, h, w, d],
        config: MatricizeConfig { head_dim: rank, ..rec.matricize },
    };
    Ok(ComponentMaps { layer: rec.layer, heads, rank, maps: dematricize(&batch)?.value() })
}

/// Runs one forward pass on `input (B, C, H, W, D)` and returns the factor
/// maps of the requested layers (all layers when `layers` is empty).
pub fn inspect_components<T: Real>(model: &Factorizer<T>, input: &Tensor<T>, layers: &[usize]) -> Result<Vec<ComponentMaps<T>>> {
    let count = model.nmf_layer_count();
    if let Some(l) = layers.iter().find(|&&l| l == 0 || l > count) {
        return Err(usage(format!("NMF layer {l} does not exist; valid layers are 1..={count}")));
    }
    let g = Graph::new();
    let ctx = Ctx::new(&g, &model.params, false).with_probe();
    model.forward(&ctx, g.constant(input.clone()), false)?;
    ctx.take_components()
        .iter()
        .filter(|r| layers.is_empty() || layers.contains(&r.layer))
        .map(component_maps)
        .collect()
}
