//! Multi-prototype extraction by seed clustering of support features.

use crate::error::{invalid, shape, Error, Result};
use crate::geometry::{cluster_to_seeds, farthest_point_sample, BinaryMask};
use crate::tensorops::Tensor;

/// Points of one shot averaged into one prototype row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrototypeGroup {
    pub shot: usize,
    pub members: Vec<usize>,
}

/// Prototypes of a single class (`N_O x D`) with the point groups each row
/// averages. Rows past the distinct prototypes repeat earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    pub values: Tensor,
    pub groups: Vec<PrototypeGroup>,
}

/// Prototypes for every class of an episode: foreground ways in order, then
/// the background.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    classes: Vec<ClassPrototypes>,
}

impl PrototypeSet {
    pub fn new(classes: Vec<ClassPrototypes>) -> Result<Self> {
        let Some(first) = classes.first() else {
            return Err(invalid("prototype set needs at least one class"));
        };
        let shape0 = first.values.shape().to_vec();
        for c in &classes {
            if c.values.shape() != shape0.as_slice() || c.values.rank() != 2 {
                return Err(shape(format!(
                    "prototype blocks must share one N_O x D shape: {:?} vs {:?}",
                    c.values.shape(),
                    shape0
                )));
            }
            c.values.ensure_finite("prototypes")?;
        }
        Ok(Self { classes })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_prototypes(&self) -> usize {
        self.classes[0].values.rows()
    }

    pub fn dim(&self) -> usize {
        self.classes[0].values.cols()
    }

    pub fn class(&self, c: usize) -> &ClassPrototypes {
        &self.classes[c]
    }

    pub fn classes(&self) -> &[ClassPrototypes] {
        &self.classes
    }
}

/// Builds `n_prototypes` prototypes of one class from its shots.
///
/// Each shot with a nonempty mask contributes up to `per_shot` farthest-point
/// seeds; every masked point joins its nearest seed and a prototype is the
/// mean feature of a group. Too few groups are topped up by cycling from the
/// first, too many are truncated.
pub fn extract_prototypes(
    features: &[&Tensor],
    masks: &[&BinaryMask],
    coords: &[&[[f64; 3]]],
    n_prototypes: usize,
    per_shot: usize,
) -> Result<ClassPrototypes> {
    if n_prototypes == 0 || per_shot == 0 {
        return Err(invalid("prototype counts must be at least 1"));
    }
    if features.is_empty() || features.len() != masks.len() || features.len() != coords.len() {
        return Err(invalid(format!(
            "{} feature blocks, {} masks, {} coordinate sets",
            features.len(),
            masks.len(),
            coords.len()
        )));
    }
    let dim = features[0].cols();
    let mut groups = Vec::new();
    for (shot, ((f, m), xyz)) in features.iter().zip(masks).zip(coords).enumerate() {
        if f.rank() != 2 || f.cols() != dim || f.rows() != m.len() || xyz.len() != m.len() {
            return Err(shape(format!(
                "shot {shot}: features {:?}, mask {}, coords {}",
                f.shape(),
                m.len(),
                xyz.len()
            )));
        }
        if !m.any() {
            continue;
        }
        let seeds = farthest_point_sample(xyz, m, per_shot)?;
        for members in cluster_to_seeds(xyz, m, &seeds)? {
            groups.push(PrototypeGroup { shot, members });
        }
    }
    if groups.is_empty() {
        return Err(Error::EmptyMask);
    }
    let distinct = groups.len();
    groups.truncate(n_prototypes);
    while groups.len() < n_prototypes {
        groups.push(groups[groups.len() % distinct].clone());
    }
    let mut values = Tensor::zeros(&[n_prototypes, dim]);
    for (row, g) in groups.iter().enumerate() {
        let f = features[g.shot];
        let out = values.row_mut(row);
        for &i in &g.members {
            for (o, v) in out.iter_mut().zip(f.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / g.members.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
    }
    Ok(ClassPrototypes { values, groups })
}

/// Scatters a prototype gradient back onto the per-shot features.
pub fn extract_prototypes_backward(
    protos: &ClassPrototypes,
    dvalues: &Tensor,
    dfeatures: &mut [Tensor],
) {
    for (row, g) in protos.groups.iter().enumerate() {
        let scale = 1.0 / g.members.len() as f64;
        let src = dvalues.row(row).to_vec();
        let dst = &mut dfeatures[g.shot];
        for &i in &g.members {
            for (o, v) in dst.row_mut(i).iter_mut().zip(&src) {
                *o += v * scale;
            }
        }
    }
}
