//! One correlation-refinement layer: attention across points, then across
//! classes, each followed by a token MLP, with background calibration in
//! between. Every sub-block is pre-norm with a residual connection.

use crate::attention::{AttentionParams, MultiHeadCache};
use crate::error::Result;
use crate::model::correlation::{
    calibrate_background, calibrate_background_backward, CalibrationCache, CorrelationTensor,
};
use crate::rng::Rng;
use crate::tensorops::layers::{LayerNorm, Linear, Mlp, MlpCache, Module, Parameter};
use crate::tensorops::ops::{self, LayerNormCache};
use crate::tensorops::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct HcaLayer {
    pub point_norm: LayerNorm,
    pub point_attention: AttentionParams,
    pub point_mlp_norm: LayerNorm,
    pub point_mlp: Mlp,
    pub class_norm: LayerNorm,
    pub class_attention: AttentionParams,
    pub class_mlp_norm: LayerNorm,
    pub class_mlp: Mlp,
}

#[derive(Debug, Clone)]
struct Block<C> {
    norm: LayerNormCache,
    inner: C,
}

/// Saved state of [`HcaLayer::forward`].
#[derive(Debug, Clone)]
pub struct HcaCache {
    point_attn: Block<MultiHeadCache>,
    point_mlp: Block<MlpCache>,
    calibration: CalibrationCache,
    class_attn: Block<MultiHeadCache>,
    class_mlp: Block<MlpCache>,
}

fn attn_block(
    norm: &LayerNorm,
    attn: &AttentionParams,
    x: &Tensor,
) -> Result<(Tensor, Block<MultiHeadCache>)> {
    let (n, nc) = norm.forward(x)?;
    let (a, ac) = attn.forward(&n)?;
    Ok((
        x.add(&a)?,
        Block {
            norm: nc,
            inner: ac,
        },
    ))
}

fn mlp_block(norm: &LayerNorm, mlp: &Mlp, x: &Tensor) -> Result<(Tensor, Block<MlpCache>)> {
    let (n, nc) = norm.forward(x)?;
    let (m, mc) = mlp.forward(&n)?;
    Ok((
        x.add(&m)?,
        Block {
            norm: nc,
            inner: mc,
        },
    ))
}

fn attn_block_backward(
    norm: &mut LayerNorm,
    attn: &mut AttentionParams,
    cache: &Block<MultiHeadCache>,
    dy: &Tensor,
) -> Tensor {
    let dn = attn.backward(&cache.inner, dy);
    let mut dx = norm.backward(&cache.norm, &dn);
    dx.add_assign(dy).expect("same shape");
    dx
}

fn mlp_block_backward(
    norm: &mut LayerNorm,
    mlp: &mut Mlp,
    cache: &Block<MlpCache>,
    dy: &Tensor,
) -> Tensor {
    let dn = mlp.backward(&cache.inner, dy);
    let mut dx = norm.backward(&cache.norm, &dn);
    dx.add_assign(dy).expect("same shape");
    dx
}

impl HcaLayer {
    pub fn new(
        name: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            point_norm: LayerNorm::new(&format!("{name}.point_norm"), dim),
            point_attention: AttentionParams::new(
                &format!("{name}.point_attention"),
                dim,
                heads,
                rng,
            )?,
            point_mlp_norm: LayerNorm::new(&format!("{name}.point_mlp_norm"), dim),
            point_mlp: Mlp::new(&format!("{name}.point_mlp"), dim, mlp_hidden, dim, rng),
            class_norm: LayerNorm::new(&format!("{name}.class_norm"), dim),
            class_attention: AttentionParams::new(
                &format!("{name}.class_attention"),
                dim,
                heads,
                rng,
            )?,
            class_mlp_norm: LayerNorm::new(&format!("{name}.class_mlp_norm"), dim),
            class_mlp: Mlp::new(&format!("{name}.class_mlp"), dim, mlp_hidden, dim, rng),
        })
    }

    pub fn forward(
        &self,
        c: &CorrelationTensor,
        guide: &Tensor,
        calibration: &Linear,
    ) -> Result<(CorrelationTensor, HcaCache)> {
        let by_class = ops::transpose_first_two(c.values())?;
        let (x, point_attn) = attn_block(&self.point_norm, &self.point_attention, &by_class)?;
        let (x, point_mlp) = mlp_block(&self.point_mlp_norm, &self.point_mlp, &x)?;
        let by_point = CorrelationTensor::new(ops::transpose_first_two(&x)?)?;
        let (x, calibration) = calibrate_background(&by_point, guide, calibration)?;
        let (x, class_attn) = attn_block(&self.class_norm, &self.class_attention, x.values())?;
        let (x, class_mlp) = mlp_block(&self.class_mlp_norm, &self.class_mlp, &x)?;
        Ok((
            CorrelationTensor::new(x)?,
            HcaCache {
                point_attn,
                point_mlp,
                calibration,
                class_attn,
                class_mlp,
            },
        ))
    }

    /// Accumulates gradients of this layer and `calibration`; returns the
    /// input and guide gradients.
    pub fn backward(
        &mut self,
        calibration: &mut Linear,
        cache: &HcaCache,
        dy: &Tensor,
    ) -> (Tensor, Tensor) {
        let d = mlp_block_backward(
            &mut self.class_mlp_norm,
            &mut self.class_mlp,
            &cache.class_mlp,
            dy,
        );
        let d = attn_block_backward(
            &mut self.class_norm,
            &mut self.class_attention,
            &cache.class_attn,
            &d,
        );
        let (d, dguide) = calibrate_background_backward(calibration, &cache.calibration, &d);
        let d = ops::transpose_first_two(&d).expect("rank 3");
        let d = mlp_block_backward(
            &mut self.point_mlp_norm,
            &mut self.point_mlp,
            &cache.point_mlp,
            &d,
        );
        let d = attn_block_backward(
            &mut self.point_norm,
            &mut self.point_attention,
            &cache.point_attn,
            &d,
        );
        (ops::transpose_first_two(&d).expect("rank 3"), dguide)
    }
}

impl Module for HcaLayer {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.point_norm.params();
        v.extend(self.point_attention.params());
        v.extend(self.point_mlp_norm.params());
        v.extend(self.point_mlp.params());
        v.extend(self.class_norm.params());
        v.extend(self.class_attention.params());
        v.extend(self.class_mlp_norm.params());
        v.extend(self.class_mlp.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.point_norm.params_mut();
        v.extend(self.point_attention.params_mut());
        v.extend(self.point_mlp_norm.params_mut());
        v.extend(self.point_mlp.params_mut());
        v.extend(self.class_norm.params_mut());
        v.extend(self.class_attention.params_mut());
        v.extend(self.class_mlp_norm.params_mut());
        v.extend(self.class_mlp.params_mut());
        v
    }
}

/// Free-function form of [`HcaLayer::forward`].
pub fn hca_layer(
    c: &CorrelationTensor,
    guide: &Tensor,
    layer: &HcaLayer,
    calibration: &Linear,
) -> Result<CorrelationTensor> {
    layer.forward(c, guide, calibration).map(|(y, _)| y)
}
