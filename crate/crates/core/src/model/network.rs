//! The full segmentation network: stub backbone, prototypes, correlation
//! construction, refinement layers, decoder and the auxiliary base head.

use std::collections::BTreeSet;

use crate::episodes::{Episode, Phase};
use crate::error::{invalid, shape, Result};
use crate::geometry::{BinaryMask, PointCloud};
use crate::model::bank::{base_guidance, base_guidance_backward, BasePrototypeBank, GuidanceCache};
use crate::model::correlation::{compute_cmc, compute_cmc_backward, CmcCache};
use crate::model::hca::{HcaCache, HcaLayer};
use crate::model::prototypes::{extract_prototypes, extract_prototypes_backward, PrototypeSet};
use crate::rng::{rng_from_seed, Rng};
use crate::tensorops::layers::{Linear, Mlp, MlpCache, Module, Parameter};
use crate::tensorops::{ops, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_prototypes: usize,
    pub layers: usize,
    pub heads: usize,
    /// Number of base (training) classes served by the base head.
    pub n_base: usize,
    /// One calibration layer for all refinement layers instead of one each.
    pub share_calibration: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            n_prototypes: 10,
            layers: 2,
            heads: 1,
            n_base: 1,
            share_calibration: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_prototypes == 0 || self.n_base == 0 {
            return Err(invalid("dim, n_prototypes and n_base must be at least 1"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "{} heads do not divide dim {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

/// All trainable parameters. Shapes depend on the config only, never on the
/// number of ways in an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct CosegParams {
    config: ModelConfig,
    pub backbone: Mlp,
    pub cmc_projection: Mlp,
    pub layers: Vec<HcaLayer>,
    pub calibration: Vec<Linear>,
    pub decoder: Mlp,
    pub base_head: Mlp,
}

/// Per-point input vector: position then color.
pub fn point_inputs(cloud: &PointCloud) -> Tensor {
    let mut data = Vec::with_capacity(cloud.len() * 6);
    for (p, c) in cloud.positions().iter().zip(cloud.colors()) {
        data.extend_from_slice(p);
        data.extend_from_slice(c);
    }
    Tensor::new(vec![cloud.len(), 6], data).expect("six values per point")
}

/// Per-point features of `cloud` (`N x D`).
pub fn backbone_stub(cloud: &PointCloud, backbone: &Mlp) -> Result<Tensor> {
    backbone.forward(&point_inputs(cloud)).map(|(y, _)| y)
}

/// Logits of one forward pass. `seg_logits` columns follow the label
/// convention of episodes: background first, then the ways.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub seg_logits: Tensor,
    pub base_logits: Tensor,
}

#[derive(Debug, Clone)]
struct Encoded {
    features: Tensor,
    cache: MlpCache,
}

/// Everything the backward pass and the bank update need.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n_way: usize,
    k_shot: usize,
    support: Vec<Encoded>,
    query: Encoded,
    protos: PrototypeSet,
    cmc: CmcCache,
    guide: GuidanceCache,
    layers: Vec<HcaCache>,
    decoder: MlpCache,
    base_head: MlpCache,
}

impl ForwardCache {
    /// Support features, way-major.
    pub fn support_features(&self) -> impl Iterator<Item = &Tensor> {
        self.support.iter().map(|e| &e.features)
    }

    pub fn query_features(&self) -> &Tensor {
        &self.query.features
    }

    pub fn prototypes(&self) -> &PrototypeSet {
        &self.protos
    }
}

impl CosegParams {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let backbone = Mlp::new("backbone", 6, d, d, rng);
        let cmc_projection = Mlp::new("cmc_projection", config.n_prototypes, d, d, rng);
        let layers = (0..config.layers)
            .map(|l| HcaLayer::new(&format!("hca{l}"), d, config.heads, 2 * d, rng))
            .collect::<Result<Vec<_>>>()?;
        let n_calibration = if config.share_calibration {
            1
        } else {
            config.layers
        };
        let calibration = (0..n_calibration)
            .map(|l| Linear::new(&format!("calibration{l}"), 2 * d, d, rng))
            .collect();
        let decoder = Mlp::new("decoder", d, d, 1, rng);
        let base_head = Mlp::new("base_head", d, d, config.n_base + 1, rng);
        Ok(Self {
            config,
            backbone,
            cmc_projection,
            layers,
            calibration,
            decoder,
            base_head,
        })
    }

    pub fn from_seed(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut rng_from_seed(seed))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn calibration_index(&self, layer: usize) -> usize {
        if self.config.share_calibration {
            0
        } else {
            layer
        }
    }

    fn encode(&self, cloud: &PointCloud) -> Result<Encoded> {
        let (features, cache) = self.backbone.forward(&point_inputs(cloud))?;
        Ok(Encoded { features, cache })
    }

    fn check_episode(&self, episode: &Episode, bank: &BasePrototypeBank) -> Result<(usize, usize)> {
        let (n, k) = (episode.n_way(), episode.k_shot());
        if n == 0
            || k == 0
            || episode.support.len() != n
            || episode.support.iter().any(|w| w.len() != k)
        {
            return Err(invalid(format!(
                "episode support must be {n} ways of {k} shots"
            )));
        }
        if episode.query_gt.len() != episode.query.len() {
            return Err(shape("query labels do not match query points"));
        }
        if bank.dim() != self.config.dim {
            return Err(shape(format!(
                "bank dimension {} vs model dimension {}",
                bank.dim(),
                self.config.dim
            )));
        }
        Ok((n, k))
    }

    /// One forward pass. In the train phase the episode's target classes are
    /// hidden from the bank guidance; in the test phase the whole bank is used.
    pub fn forward(
        &self,
        episode: &Episode,
        bank: &BasePrototypeBank,
        phase: Phase,
    ) -> Result<(ForwardOutput, ForwardCache)> {
        let (n, k) = self.check_episode(episode, bank)?;
        let n_o = self.config.n_prototypes;
        let support = episode
            .support
            .iter()
            .flatten()
            .map(|shot| self.encode(&shot.cloud))
            .collect::<Result<Vec<_>>>()?;
        let query = self.encode(&episode.query)?;

        let shots: Vec<_> = episode.support.iter().flatten().collect();
        let mut classes = Vec::with_capacity(n + 1);
        for w in 0..n {
            let range = w * k..(w + 1) * k;
            let feats: Vec<&Tensor> = support[range.clone()].iter().map(|e| &e.features).collect();
            let masks: Vec<&BinaryMask> = shots[range.clone()].iter().map(|s| &s.mask).collect();
            let coords: Vec<&[[f64; 3]]> =
                shots[range].iter().map(|s| s.cloud.positions()).collect();
            classes.push(extract_prototypes(
                &feats,
                &masks,
                &coords,
                n_o,
                (n_o / k).max(1),
            )?);
        }
        let bg_masks: Vec<BinaryMask> = shots.iter().map(|s| s.mask.complement()).collect();
        let feats: Vec<&Tensor> = support.iter().map(|e| &e.features).collect();
        let masks: Vec<&BinaryMask> = bg_masks.iter().collect();
        let coords: Vec<&[[f64; 3]]> = shots.iter().map(|s| s.cloud.positions()).collect();
        classes.push(extract_prototypes(
            &feats,
            &masks,
            &coords,
            n_o,
            (n_o / (n * k)).max(1),
        )?);
        let protos = PrototypeSet::new(classes)?;

        let (mut corr, cmc) = compute_cmc(&query.features, &protos, &self.cmc_projection)?;
        let excluded: BTreeSet<i32> = match phase {
            Phase::Train => episode.target_classes.iter().copied().collect(),
            Phase::Test => BTreeSet::new(),
        };
        let (guide, guide_cache) = base_guidance(&query.features, bank, &excluded)?;
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (next, cache) =
                layer.forward(&corr, &guide, &self.calibration[self.calibration_index(l)])?;
            corr = next;
            layer_caches.push(cache);
        }
        let (decoded, decoder) = self.decoder.forward(corr.values())?;
        let seg_logits = to_label_order(&decoded, corr.n_query(), corr.n_classes());
        let (base_logits, base_head) = self.base_head.forward(&query.features)?;
        seg_logits.ensure_finite("segmentation logits")?;
        Ok((
            ForwardOutput {
                seg_logits,
                base_logits,
            },
            ForwardCache {
                n_way: n,
                k_shot: k,
                support,
                query,
                protos,
                cmc,
                guide: guide_cache,
                layers: layer_caches,
                decoder,
                base_head,
            },
        ))
    }

    /// Accumulates the gradients of every parameter given the loss gradients
    /// with respect to both logit blocks.
    pub fn backward(&mut self, cache: &ForwardCache, dseg: &Tensor, dbase: &Tensor) {
        let (nq, nc) = (dseg.rows(), dseg.cols());
        let dseg_internal = from_label_order(dseg)
            .into_reshape(&[nq, nc, 1])
            .expect("shape");
        let mut dcorr = self.decoder.backward(&cache.decoder, &dseg_internal);
        let mut dguide = Tensor::zeros(&[nq]);
        for l in (0..self.layers.len()).rev() {
            let ci = self.calibration_index(l);
            let (dc, dg) =
                self.layers[l].backward(&mut self.calibration[ci], &cache.layers[l], &dcorr);
            dcorr = dc;
            dguide.add_assign(&dg).expect("same shape");
        }
        let (mut dquery, dprotos) = compute_cmc_backward(
            &cache.query.features,
            &cache.protos,
            &mut self.cmc_projection,
            &cache.cmc,
            &dcorr,
        );
        let mut dsupport: Vec<Tensor> = cache
            .support
            .iter()
            .map(|e| Tensor::zeros(e.features.shape()))
            .collect();
        let k = cache.k_shot;
        for (c, dp) in dprotos.iter().enumerate() {
            let class = cache.protos.class(c);
            if c < cache.n_way {
                extract_prototypes_backward(class, dp, &mut dsupport[c * k..(c + 1) * k]);
            } else {
                extract_prototypes_backward(class, dp, &mut dsupport);
            }
        }
        dquery
            .add_assign(&base_guidance_backward(
                &cache.query.features,
                &cache.guide,
                &dguide,
            ))
            .expect("same shape");
        dquery
            .add_assign(&self.base_head.backward(&cache.base_head, dbase))
            .expect("same shape");
        self.backbone.backward(&cache.query.cache, &dquery);
        for (enc, d) in cache.support.iter().zip(&dsupport) {
            self.backbone.backward(&enc.cache, d);
        }
    }
}

impl Module for CosegParams {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.backbone.params();
        v.extend(self.cmc_projection.params());
        for l in &self.layers {
            v.extend(l.params());
        }
        for c in &self.calibration {
            v.extend(c.params());
        }
        v.extend(self.decoder.params());
        v.extend(self.base_head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.backbone.params_mut();
        v.extend(self.cmc_projection.params_mut());
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        for c in &mut self.calibration {
            v.extend(c.params_mut());
        }
        v.extend(self.decoder.params_mut());
        v.extend(self.base_head.params_mut());
        v
    }
}

// Internally the background class is last; labels put it first.
fn to_label_order(decoded: &Tensor, nq: usize, nc: usize) -> Tensor {
    let mut out = Tensor::zeros(&[nq, nc]);
    for i in 0..nq {
        let src = &decoded.data()[i * nc..(i + 1) * nc];
        let row = out.row_mut(i);
        row[0] = src[nc - 1];
        row[1..].copy_from_slice(&src[..nc - 1]);
    }
    out
}

fn from_label_order(logits: &Tensor) -> Tensor {
    let (nq, nc) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(&[nq, nc]);
    for i in 0..nq {
        let src = logits.row(i);
        let row = out.row_mut(i);
        row[nc - 1] = src[0];
        row[..nc - 1].copy_from_slice(&src[1..]);
    }
    out
}

/// Base-head targets: the index of each label among `base_classes`, or
/// `base_classes.len()` for anything else.
pub fn base_targets(labels: &[i32], base_classes: &[i32]) -> Vec<usize> {
    labels
        .iter()
        .map(|l| {
            base_classes
                .iter()
                .position(|c| c == l)
                .unwrap_or(base_classes.len())
        })
        .collect()
}

/// Loss value with the gradients of both logit blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub seg: f64,
    pub base: f64,
    pub dseg: Tensor,
    pub dbase: Tensor,
}

/// Unweighted sum of the two mean cross-entropies.
pub fn loss(
    seg_logits: &Tensor,
    base_logits: &Tensor,
    query_gt: &[usize],
    base_gt: &[usize],
) -> Result<LossOutput> {
    let (seg, seg_probs) = ops::cross_entropy(seg_logits, query_gt)?;
    let (base, base_probs) = ops::cross_entropy(base_logits, base_gt)?;
    Ok(LossOutput {
        total: seg + base,
        seg,
        base,
        dseg: ops::cross_entropy_backward(&seg_probs, query_gt),
        dbase: ops::cross_entropy_backward(&base_probs, base_gt),
    })
}

/// Row-wise argmax of the segmentation logits.
pub fn predict(seg_logits: &Tensor) -> Vec<usize> {
    (0..seg_logits.rows())
        .map(|r| {
            seg_logits
                .row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Forward pass plus loss for a training episode; the bank's classes define
/// the base targets.
pub fn episode_loss(
    params: &CosegParams,
    episode: &Episode,
    bank: &BasePrototypeBank,
    phase: Phase,
) -> Result<(LossOutput, ForwardCache)> {
    let (out, cache) = params.forward(episode, bank, phase)?;
    let base_gt = base_targets(episode.query.labels(), bank.class_ids());
    if out.base_logits.cols() != bank.len() + 1 {
        return Err(shape(format!(
            "base head has {} outputs for a bank of {}",
            out.base_logits.cols(),
            bank.len()
        )));
    }
    Ok((
        loss(
            &out.seg_logits,
            &out.base_logits,
            &episode.query_gt,
            &base_gt,
        )?,
        cache,
    ))
}
