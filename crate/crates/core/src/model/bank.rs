//! Momentum-updated base-class prototypes and the guidance they provide.

use std::collections::BTreeSet;

use crate::error::{invalid, shape, Result};
use crate::geometry::BinaryMask;
use crate::tensorops::{ops, Tensor};

/// One prototype row per base class, zero until the class is first seen.
#[derive(Debug, Clone, PartialEq)]
pub struct BasePrototypeBank {
    class_ids: Vec<i32>,
    prototypes: Tensor,
    update_counts: Vec<u64>,
    momentum: f64,
}

fn check_momentum(momentum: f64) -> Result<()> {
    if (0.0..=1.0).contains(&momentum) {
        Ok(())
    } else {
        Err(invalid(format!("momentum {momentum} outside [0, 1]")))
    }
}

impl BasePrototypeBank {
    pub fn new(class_ids: Vec<i32>, dim: usize, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        if dim == 0 {
            return Err(invalid("bank dimension must be at least 1"));
        }
        let sorted: BTreeSet<i32> = class_ids.iter().copied().collect();
        if sorted.len() != class_ids.len() {
            return Err(invalid("bank class ids must be distinct"));
        }
        let n = class_ids.len();
        Ok(Self {
            class_ids,
            prototypes: Tensor::zeros(&[n, dim]),
            update_counts: vec![0; n],
            momentum,
        })
    }

    /// Rebuilds a bank from stored rows. Rows never updated must be zero.
    pub fn from_parts(
        class_ids: Vec<i32>,
        prototypes: Tensor,
        update_counts: Vec<u64>,
        momentum: f64,
    ) -> Result<Self> {
        let mut bank = Self::new(class_ids, prototypes.cols(), momentum)?;
        if prototypes.shape() != bank.prototypes.shape()
            || update_counts.len() != bank.class_ids.len()
        {
            return Err(shape(format!(
                "bank rows {:?} with {} counts for {} classes",
                prototypes.shape(),
                update_counts.len(),
                bank.class_ids.len()
            )));
        }
        prototypes.ensure_finite("bank prototypes")?;
        for (r, &c) in update_counts.iter().enumerate() {
            if c == 0 && prototypes.row(r).iter().any(|&v| v != 0.0) {
                return Err(invalid(format!(
                    "bank row {r} is nonzero but never updated"
                )));
            }
        }
        bank.prototypes = prototypes;
        bank.update_counts = update_counts;
        Ok(bank)
    }

    pub fn class_ids(&self) -> &[i32] {
        &self.class_ids
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn update_counts(&self) -> &[u64] {
        &self.update_counts
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// Row of a class id, if the bank holds it.
    pub fn index_of(&self, class: i32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    /// Same classes and momentum with every row reset to zero.
    pub fn zeroed(&self) -> Self {
        Self {
            class_ids: self.class_ids.clone(),
            prototypes: Tensor::zeros(self.prototypes.shape()),
            update_counts: vec![0; self.class_ids.len()],
            momentum: self.momentum,
        }
    }

    /// The bank without the listed classes.
    pub fn without(&self, excluded: &BTreeSet<i32>) -> Self {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&r| !excluded.contains(&self.class_ids[r]))
            .collect();
        let dim = self.dim();
        let mut data = Vec::with_capacity(keep.len() * dim);
        for &r in &keep {
            data.extend_from_slice(self.prototypes.row(r));
        }
        Self {
            class_ids: keep.iter().map(|&r| self.class_ids[r]).collect(),
            prototypes: Tensor::new(vec![keep.len(), dim], data).expect("row count"),
            update_counts: keep.iter().map(|&r| self.update_counts[r]).collect(),
            momentum: self.momentum,
        }
    }

    /// Momentum update from one feature block; `base_masks[r]` marks the
    /// points of bank row `r`. Rows with empty masks are left alone.
    pub fn update_base_prototypes(
        &mut self,
        features: &Tensor,
        base_masks: &[BinaryMask],
        momentum: f64,
    ) -> Result<()> {
        self.update_from_many(&[(features, base_masks)], momentum)
    }

    /// Momentum update where a class seen in several blocks first averages
    /// its per-block masked means.
    pub fn update_from_many(
        &mut self,
        observations: &[(&Tensor, &[BinaryMask])],
        momentum: f64,
    ) -> Result<()> {
        check_momentum(momentum)?;
        let dim = self.dim();
        for (f, masks) in observations {
            if masks.len() != self.len() {
                return Err(shape(format!(
                    "{} masks for {} bank rows",
                    masks.len(),
                    self.len()
                )));
            }
            if f.rank() != 2 || f.cols() != dim {
                return Err(shape(format!(
                    "bank of dimension {dim} given features {:?}",
                    f.shape()
                )));
            }
            if masks.iter().any(|m| m.len() != f.rows()) {
                return Err(shape("base mask length does not match feature rows"));
            }
        }
        for r in 0..self.len() {
            let mut sum = vec![0.0; dim];
            let mut seen = 0usize;
            for (f, masks) in observations {
                if !masks[r].any() {
                    continue;
                }
                let mean = ops::masked_mean_rows(f, &masks[r])?;
                for (s, v) in sum.iter_mut().zip(mean.data()) {
                    *s += v;
                }
                seen += 1;
            }
            if seen == 0 {
                continue;
            }
            let fresh: Vec<f64> = sum.iter().map(|s| s / seen as f64).collect();
            let first = self.update_counts[r] == 0;
            for (p, v) in self.prototypes.row_mut(r).iter_mut().zip(&fresh) {
                *p = if first {
                    *v
                } else {
                    momentum * *p + (1.0 - momentum) * v
                };
            }
            self.update_counts[r] += 1;
        }
        Ok(())
    }
}

/// Saved state of [`base_guidance`].
#[derive(Debug, Clone)]
pub struct GuidanceCache {
    eligible: Tensor,
    argmax: Vec<usize>,
}

/// Per-point maximum cosine between `query` rows and the bank rows that are
/// not excluded and have been updated at least once. All zeros when none
/// qualify.
pub fn base_guidance(
    query: &Tensor,
    bank: &BasePrototypeBank,
    excluded: &BTreeSet<i32>,
) -> Result<(Tensor, GuidanceCache)> {
    if query.rank() != 2 || query.cols() != bank.dim() {
        return Err(shape(format!(
            "query {:?} against bank dimension {}",
            query.shape(),
            bank.dim()
        )));
    }
    let rows: Vec<usize> = (0..bank.len())
        .filter(|&r| bank.update_counts[r] > 0 && !excluded.contains(&bank.class_ids[r]))
        .collect();
    let n = query.rows();
    if rows.is_empty() {
        return Ok((
            Tensor::zeros(&[n]),
            GuidanceCache {
                eligible: Tensor::zeros(&[0, bank.dim()]),
                argmax: Vec::new(),
            },
        ));
    }
    let mut data = Vec::with_capacity(rows.len() * bank.dim());
    for &r in &rows {
        data.extend_from_slice(bank.prototypes.row(r));
    }
    let eligible = Tensor::new(vec![rows.len(), bank.dim()], data)?;
    let c_base = ops::cosine_rows(query, &eligible)?;
    let (guide, argmax) = ops::max_pool_rows(&c_base)?;
    Ok((guide, GuidanceCache { eligible, argmax }))
}

/// Gradient of [`base_guidance`] with respect to the query features; the bank
/// is treated as a constant.
pub fn base_guidance_backward(query: &Tensor, cache: &GuidanceCache, dguide: &Tensor) -> Tensor {
    if cache.argmax.is_empty() {
        return Tensor::zeros(query.shape());
    }
    let dc = ops::max_pool_rows_backward(&cache.argmax, cache.eligible.rows(), dguide);
    ops::cosine_rows_backward(query, &cache.eligible, &dc).0
}
