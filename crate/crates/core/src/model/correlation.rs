//! Correlation tensors: query-to-prototype cosines lifted to `D` channels,
//! and background calibration.

use crate::error::{shape, Result};
use crate::model::prototypes::PrototypeSet;
use crate::tensorops::layers::{Linear, Mlp, MlpCache};
use crate::tensorops::{ops, Tensor};

/// `N_Q x N_C x D` correlations; the background class sits last.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTensor {
    values: Tensor,
}

impl CorrelationTensor {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 || values.shape()[1] < 2 || values.is_empty() {
            return Err(shape(format!(
                "correlations must be N_Q x N_C x D with N_C >= 2, got {:?}",
                values.shape()
            )));
        }
        values.ensure_finite("correlations")?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn n_query(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn background_index(&self) -> usize {
        self.n_classes() - 1
    }
}

/// Per-class cosines of every query row with every prototype, stacked to
/// `N_Q x N_C x N_O`.
pub fn raw_correlations(query: &Tensor, protos: &PrototypeSet) -> Result<Tensor> {
    if query.rank() != 2 || query.cols() != protos.dim() {
        return Err(shape(format!(
            "query {:?} against prototypes of dimension {}",
            query.shape(),
            protos.dim()
        )));
    }
    let (nq, nc, no) = (query.rows(), protos.n_classes(), protos.n_prototypes());
    let mut raw = Tensor::zeros(&[nq, nc, no]);
    for (c, class) in protos.classes().iter().enumerate() {
        let cos = ops::cosine_rows(query, &class.values)?;
        for i in 0..nq {
            let dst = (i * nc + c) * no;
            raw.data_mut()[dst..dst + no].copy_from_slice(cos.row(i));
        }
    }
    Ok(raw)
}

/// Saved state of [`compute_cmc`].
#[derive(Debug, Clone)]
pub struct CmcCache {
    mlp: MlpCache,
}

/// Raw correlations projected from `N_O` to `D` channels by `proj`.
pub fn compute_cmc(
    query: &Tensor,
    protos: &PrototypeSet,
    proj: &Mlp,
) -> Result<(CorrelationTensor, CmcCache)> {
    if proj.fc1.fan_in() != protos.n_prototypes() {
        return Err(shape(format!(
            "projection expects {} prototypes per class, got {}",
            proj.fc1.fan_in(),
            protos.n_prototypes()
        )));
    }
    let raw = raw_correlations(query, protos)?;
    let (y, mlp) = proj.forward(&raw)?;
    Ok((CorrelationTensor::new(y)?, CmcCache { mlp }))
}

/// Accumulates projection gradients; returns the gradients of the query
/// features and of each class's prototype block.
pub fn compute_cmc_backward(
    query: &Tensor,
    protos: &PrototypeSet,
    proj: &mut Mlp,
    cache: &CmcCache,
    dc: &Tensor,
) -> (Tensor, Vec<Tensor>) {
    let draw = proj.backward(&cache.mlp, dc);
    let (nq, nc, no) = (query.rows(), protos.n_classes(), protos.n_prototypes());
    let mut dquery = Tensor::zeros(query.shape());
    let mut dprotos = Vec::with_capacity(nc);
    for (c, class) in protos.classes().iter().enumerate() {
        let mut dcos = Tensor::zeros(&[nq, no]);
        for i in 0..nq {
            let src = (i * nc + c) * no;
            dcos.row_mut(i).copy_from_slice(&draw.data()[src..src + no]);
        }
        let (dq, dp) = ops::cosine_rows_backward(query, &class.values, &dcos);
        dquery.add_assign(&dq).expect("same shape");
        dprotos.push(dp);
    }
    (dquery, dprotos)
}

/// Saved state of [`calibrate_background`].
#[derive(Debug, Clone)]
pub struct CalibrationCache {
    input: Tensor,
}

/// Replaces the background slice with `fc([background, guide])`, where the
/// guide value of each point is broadcast over `D` channels. Foreground
/// slices are copied unchanged.
pub fn calibrate_background(
    c: &CorrelationTensor,
    guide: &Tensor,
    fc: &Linear,
) -> Result<(CorrelationTensor, CalibrationCache)> {
    let (nq, nc, d) = (c.n_query(), c.n_classes(), c.dim());
    if guide.len() != nq {
        return Err(shape(format!(
            "guide of {} values for {nq} query points",
            guide.len()
        )));
    }
    if fc.fan_in() != 2 * d || fc.fan_out() != d {
        return Err(shape(format!(
            "calibration maps {}->{}, expected {}->{d}",
            fc.fan_in(),
            fc.fan_out(),
            2 * d
        )));
    }
    let bg = nc - 1;
    let mut input = Tensor::zeros(&[nq, 2 * d]);
    for i in 0..nq {
        let src = (i * nc + bg) * d;
        let row = input.row_mut(i);
        row[..d].copy_from_slice(&c.values.data()[src..src + d]);
        row[d..].fill(guide.data()[i]);
    }
    let calibrated = fc.forward(&input)?;
    let mut out = c.values.clone();
    for i in 0..nq {
        let dst = (i * nc + bg) * d;
        out.data_mut()[dst..dst + d].copy_from_slice(calibrated.row(i));
    }
    Ok((CorrelationTensor::new(out)?, CalibrationCache { input }))
}

/// Accumulates `fc` gradients; returns `(dc, dguide)`.
pub fn calibrate_background_backward(
    fc: &mut Linear,
    cache: &CalibrationCache,
    dout: &Tensor,
) -> (Tensor, Tensor) {
    let (nq, nc, d) = (dout.shape()[0], dout.shape()[1], dout.shape()[2]);
    let bg = nc - 1;
    let mut dcal = Tensor::zeros(&[nq, d]);
    let mut dc = dout.clone();
    for i in 0..nq {
        let src = (i * nc + bg) * d;
        dcal.row_mut(i).copy_from_slice(&dout.data()[src..src + d]);
        dc.data_mut()[src..src + d].fill(0.0);
    }
    let dinput = fc.backward(&cache.input, &dcal);
    let mut dguide = Tensor::zeros(&[nq]);
    for i in 0..nq {
        let row = dinput.row(i);
        let dst = (i * nc + bg) * d;
        dc.data_mut()[dst..dst + d].copy_from_slice(&row[..d]);
        dguide.data_mut()[i] = row[d..].iter().sum();
    }
    (dc, dguide)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::prototypes::ClassPrototypes;
    use crate::rng::rng_from_seed;

    fn protos(blocks: Vec<Tensor>) -> PrototypeSet {
        PrototypeSet::new(
            blocks
                .into_iter()
                .map(|values| ClassPrototypes {
                    values,
                    groups: Vec::new(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cmc_shape() {
        let mut rng = rng_from_seed(1);
        let q = Tensor::uniform(&[4, 8], 1.0, &mut rng);
        let p = protos(vec![
            Tensor::uniform(&[2, 8], 1.0, &mut rng),
            Tensor::uniform(&[2, 8], 1.0, &mut rng),
        ]);
        let proj = Mlp::new("proj", 2, 8, 8, &mut rng);
        let (c, _) = compute_cmc(&q, &p, &proj).unwrap();
        assert_eq!(c.values().shape(), &[4, 2, 8]);
        let bad = Mlp::new("proj", 3, 8, 8, &mut rng);
        assert!(compute_cmc(&q, &p, &bad).is_err());
    }

    #[test]
    fn matching_row_gives_unit_cosine() {
        let mut rng = rng_from_seed(2);
        let fg = Tensor::uniform(&[3, 5], 1.0, &mut rng);
        let mut q = Tensor::uniform(&[2, 5], 1.0, &mut rng);
        q.row_mut(1).copy_from_slice(fg.row(2));
        let p = protos(vec![fg, Tensor::uniform(&[3, 5], 1.0, &mut rng)]);
        let raw = raw_correlations(&q, &p).unwrap();
        assert!((raw.data()[2 * 3 + 2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_calibration_keeps_background() {
        let mut rng = rng_from_seed(3);
        let d = 4;
        let c = CorrelationTensor::new(Tensor::uniform(&[3, 3, d], 1.0, &mut rng)).unwrap();
        let mut w = Tensor::zeros(&[2 * d, d]);
        for k in 0..d {
            w.data_mut()[k * d + k] = 1.0;
        }
        let fc = Linear::from_tensors("fc", w, Tensor::zeros(&[d])).unwrap();
        let (out, _) = calibrate_background(&c, &Tensor::zeros(&[3]), &fc).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn foreground_slices_bit_identical() {
        let mut rng = rng_from_seed(4);
        let c = CorrelationTensor::new(Tensor::uniform(&[5, 3, 4], 1.0, &mut rng)).unwrap();
        let fc = Linear::new("fc", 8, 4, &mut rng);
        let guide = Tensor::uniform(&[5], 1.0, &mut rng);
        let (out, _) = calibrate_background(&c, &guide, &fc).unwrap();
        for i in 0..5 {
            for cls in 0..2 {
                let at = (i * 3 + cls) * 4;
                assert_eq!(
                    &out.values().data()[at..at + 4],
                    &c.values().data()[at..at + 4]
                );
            }
        }
    }
}
