//! Point-cloud containers and coordinate-space primitives: voxel-grid
//! subsampling, horizontal block splitting, farthest point sampling and
//! nearest-seed clustering.

use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};

/// Label value for points without a class.
pub const UNLABELED: i32 = -1;

/// Positions (meters), colors in `[0, 1]` and integer labels of a scene or
/// block. Always holds at least one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    labels: Vec<i32>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>, colors: Vec<[f64; 3]>, labels: Vec<i32>) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(invalid("point cloud must hold at least one point"));
        }
        if colors.len() != n || labels.len() != n {
            return Err(invalid(format!(
                "length mismatch: {} positions, {} colors, {} labels",
                n,
                colors.len(),
                labels.len()
            )));
        }
        if let Some(i) = positions
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(invalid(format!("non-finite coordinate at point {i}")));
        }
        if let Some(i) = colors
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(invalid(format!("color outside [0,1] at point {i}")));
        }
        if let Some(i) = labels.iter().position(|&l| l < UNLABELED) {
            return Err(invalid(format!("label below -1 at point {i}")));
        }
        Ok(Self {
            positions,
            colors,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    /// Builds a cloud from the given point indices (repeats allowed).
    ///
    /// Panics if an index is out of range; callers pass indices derived from
    /// this cloud. Returns an error only for an empty index list.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(invalid("selection is empty"));
        }
        Ok(Self {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Number of points carrying `class`.
    pub fn count_label(&self, class: i32) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Fraction of points carrying `class`.
    pub fn label_fraction(&self, class: i32) -> f64 {
        self.count_label(class) as f64 / self.len() as f64
    }

    /// Mask of points labeled `class`.
    pub fn mask_for(&self, class: i32) -> BinaryMask {
        BinaryMask::new(self.labels.iter().map(|&l| l == class).collect())
    }

    /// Concatenates clouds in order.
    pub fn concat(parts: &[PointCloud]) -> Result<Self> {
        let mut positions = Vec::new();
        let mut colors = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            positions.extend_from_slice(&p.positions);
            colors.extend_from_slice(&p.colors);
            labels.extend_from_slice(&p.labels);
        }
        Self::new(positions, colors, labels)
    }
}

/// Per-point boolean flags annotating a cloud.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn full(len: usize) -> Self {
        Self {
            bits: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    /// Indices of set bits in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Seed indices in farthest-point selection order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedIndexSet(Vec<usize>);

impl SeedIndexSet {
    /// Wraps explicit indices; rejects duplicates.
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("duplicate seed index"));
        }
        Ok(Self(indices))
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn cell(v: f64, size: f64) -> i64 {
    (v / size).floor() as i64
}

/// Keeps the lowest-index point of every occupied voxel; output is ordered by
/// ascending voxel key `(ix, iy, iz)`.
pub fn grid_subsample(cloud: &PointCloud, grid_size: f64) -> Result<PointCloud> {
    if !(grid_size > 0.0 && grid_size.is_finite()) {
        return Err(invalid(format!(
            "grid size must be positive, got {grid_size}"
        )));
    }
    let mut voxels: BTreeMap<(i64, i64, i64), usize> = BTreeMap::new();
    for (i, p) in cloud.positions().iter().enumerate() {
        let key = (
            cell(p[0], grid_size),
            cell(p[1], grid_size),
            cell(p[2], grid_size),
        );
        voxels.entry(key).or_insert(i);
    }
    let kept: Vec<usize> = voxels.into_values().collect();
    cloud.select(&kept)
}

/// Partitions points into `block_size` x `block_size` columns of the xy
/// plane. Blocks come out in ascending cell order; points keep input order.
pub fn split_blocks(cloud: &PointCloud, block_size: f64) -> Result<Vec<PointCloud>> {
    if !(block_size > 0.0 && block_size.is_finite()) {
        return Err(invalid(format!(
            "block size must be positive, got {block_size}"
        )));
    }
    let mut blocks: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions().iter().enumerate() {
        blocks
            .entry((cell(p[0], block_size), cell(p[1], block_size)))
            .or_default()
            .push(i);
    }
    blocks.values().map(|idx| cloud.select(idx)).collect()
}

/// Greedy max-min seed selection over the masked points.
///
/// The first seed is the lowest-index masked point; ties go to the lowest
/// index. Returns `min(count, masked)` seeds.
pub fn farthest_point_sample(
    positions: &[[f64; 3]],
    mask: &BinaryMask,
    count: usize,
) -> Result<SeedIndexSet> {
    if mask.len() != positions.len() {
        return Err(invalid(format!(
            "mask length {} does not match {} points",
            mask.len(),
            positions.len()
        )));
    }
    if count == 0 {
        return Err(invalid("seed count must be at least 1"));
    }
    let candidates = mask.indices();
    let Some(&first) = candidates.first() else {
        return Err(Error::EmptyMask);
    };
    let target = count.min(candidates.len());
    let mut seeds = Vec::with_capacity(target);
    let mut chosen = vec![false; candidates.len()];
    let mut min_dist = vec![f64::INFINITY; candidates.len()];

    seeds.push(first);
    chosen[0] = true;
    let mut last = first;
    while seeds.len() < target {
        let mut best: Option<(usize, f64)> = None;
        for (slot, &idx) in candidates.iter().enumerate() {
            if chosen[slot] {
                continue;
            }
            let d = squared_distance(&positions[idx], &positions[last]);
            if d < min_dist[slot] {
                min_dist[slot] = d;
            }
            // strict comparison keeps the lowest index on ties
            if best.is_none_or(|(_, bd)| min_dist[slot] > bd) {
                best = Some((slot, min_dist[slot]));
            }
        }
        let (slot, _) = best.expect("target never exceeds candidate count");
        chosen[slot] = true;
        last = candidates[slot];
        seeds.push(last);
    }
    Ok(SeedIndexSet(seeds))
}

/// Assigns every masked point to its nearest seed (ties to the earlier seed).
/// Group `g` belongs to `seeds[g]` and always contains that seed.
pub fn cluster_to_seeds(
    positions: &[[f64; 3]],
    mask: &BinaryMask,
    seeds: &SeedIndexSet,
) -> Result<Vec<Vec<usize>>> {
    if mask.len() != positions.len() {
        return Err(invalid("mask length does not match point count"));
    }
    if seeds.is_empty() {
        return Err(invalid("no seeds given"));
    }
    for &s in seeds.indices() {
        if s >= positions.len() || !mask.get(s) {
            return Err(invalid(format!("seed {s} is not a masked point")));
        }
    }
    let mut seed_slot: BTreeMap<usize, usize> = BTreeMap::new();
    for (g, &s) in seeds.indices().iter().enumerate() {
        seed_slot.insert(s, g);
    }
    let mut groups = vec![Vec::new(); seeds.len()];
    for i in mask.indices() {
        if let Some(&g) = seed_slot.get(&i) {
            groups[g].push(i);
            continue;
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (g, &s) in seeds.indices().iter().enumerate() {
            let d = squared_distance(&positions[i], &positions[s]);
            if d < best_d {
                best_d = d;
                best = g;
            }
        }
        groups[best].push(i);
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(
            points.to_vec(),
            vec![[0.5; 3]; points.len()],
            (0..points.len() as i32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cloud_rejects_bad_input() {
        assert!(PointCloud::new(vec![], vec![], vec![]).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![[1.5, 0.0, 0.0]], vec![0]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]], vec![[0.0; 3]], vec![0]).is_err());
        assert!(PointCloud::new(vec![[0.0; 3]], vec![[0.0; 3]], vec![0, 1]).is_err());
    }

    #[test]
    fn complement_flips_every_bit() {
        let m = BinaryMask::new(vec![true, false, true]);
        assert_eq!(m.complement().bits(), &[false, true, false]);
        assert_eq!(m.complement().complement(), m);
    }

    #[test]
    fn grid_same_cell_keeps_one() {
        let c = cloud(&[[0.001, 0.0, 0.0], [0.015, 0.0, 0.0]]);
        let out = grid_subsample(&c, 0.02).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.labels(), &[0]);
    }

    #[test]
    fn grid_distinct_cells_keep_both() {
        let c = cloud(&[[0.01, 0.0, 0.0], [0.03, 0.0, 0.0]]);
        assert_eq!(grid_subsample(&c, 0.02).unwrap().len(), 2);
    }

    #[test]
    fn grid_rejects_non_positive() {
        let c = cloud(&[[0.0; 3]]);
        assert!(matches!(
            grid_subsample(&c, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            grid_subsample(&c, -1.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn blocks_single_cell_is_identity() {
        let c = cloud(&[[0.1, 0.2, 5.0], [0.3, 0.9, -2.0]]);
        let blocks = split_blocks(&c, 1.0).unwrap();
        assert_eq!(blocks, vec![c]);
    }

    #[test]
    fn blocks_two_cells() {
        let c = cloud(&[[0.5, 0.0, 0.0], [1.5, 0.0, 0.0]]);
        let blocks = split_blocks(&c, 1.0).unwrap();
        assert_eq!(blocks.len(), 2);
        assert!(blocks.iter().all(|b| b.len() == 1));
        assert!(split_blocks(&c, 0.0).is_err());
    }

    #[test]
    fn fps_line_examples() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        let mask = BinaryMask::full(3);
        assert_eq!(
            farthest_point_sample(&pts, &mask, 2).unwrap().indices(),
            &[0, 2]
        );
        assert_eq!(
            farthest_point_sample(&pts, &mask, 3).unwrap().indices(),
            &[0, 2, 1]
        );
    }

    #[test]
    fn fps_clamps_to_mask() {
        let pts = [
            [0.0; 3],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
            [4.0, 0.0, 0.0],
        ];
        let mask = BinaryMask::new(vec![false, true, true, false, true]);
        let s = farthest_point_sample(&pts, &mask, 5).unwrap();
        assert_eq!(s.indices(), &[1, 4, 2]);
    }

    #[test]
    fn fps_errors() {
        let pts = [[0.0; 3]];
        assert_eq!(
            farthest_point_sample(&pts, &BinaryMask::new(vec![false]), 1),
            Err(Error::EmptyMask)
        );
        assert!(farthest_point_sample(&pts, &BinaryMask::full(1), 0).is_err());
    }

    #[test]
    fn fps_duplicate_points_never_repeat_seeds() {
        let pts = [[0.0; 3]; 4];
        let s = farthest_point_sample(&pts, &BinaryMask::full(4), 4).unwrap();
        assert_eq!(s.indices(), &[0, 1, 2, 3]);
    }

    #[test]
    fn cluster_single_seed_takes_all() {
        let pts = [[0.0; 3], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let mask = BinaryMask::new(vec![true, false, true]);
        let seeds = SeedIndexSet::new(vec![2]).unwrap();
        assert_eq!(
            cluster_to_seeds(&pts, &mask, &seeds).unwrap(),
            vec![vec![0, 2]]
        );
    }

    #[test]
    fn cluster_nearer_seed_wins() {
        let pts = [[0.0; 3], [10.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let seeds = SeedIndexSet::new(vec![0, 1]).unwrap();
        let groups = cluster_to_seeds(&pts, &BinaryMask::full(3), &seeds).unwrap();
        assert_eq!(groups, vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn cluster_rejects_unmasked_seed() {
        let pts = [[0.0; 3], [1.0, 0.0, 0.0]];
        let mask = BinaryMask::new(vec![true, false]);
        let seeds = SeedIndexSet::new(vec![1]).unwrap();
        assert!(matches!(
            cluster_to_seeds(&pts, &mask, &seeds),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn coincident_seeds_keep_their_own_groups() {
        let pts = [[0.0; 3], [0.0; 3], [0.1, 0.0, 0.0]];
        let seeds = SeedIndexSet::new(vec![0, 1]).unwrap();
        let groups = cluster_to_seeds(&pts, &BinaryMask::full(3), &seeds).unwrap();
        assert_eq!(groups, vec![vec![0, 2], vec![1]]);
    }

    #[test]
    fn seed_set_rejects_duplicates() {
        assert!(SeedIndexSet::new(vec![1, 2, 1]).is_err());
    }
}
