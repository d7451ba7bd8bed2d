//! Class splits, N-way K-shot episode construction over a scene pool, the
//! episode manifest format and mIoU evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{invalid, Error, Result};
use crate::geometry::{BinaryMask, PointCloud};
use crate::rng::{indexed, rng_from_seed, substream};
use crate::sampling::cap_points;

/// Disjoint base (meta-training) and novel (test) class sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    train: BTreeSet<i32>,
    test: BTreeSet<i32>,
}

impl ClassSplit {
    pub fn new(train: BTreeSet<i32>, test: BTreeSet<i32>) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return Err(invalid("both class sets must be nonempty"));
        }
        if let Some(c) = train.intersection(&test).next() {
            return Err(invalid(format!("class {c} is in both train and test sets")));
        }
        Ok(Self { train, test })
    }

    pub fn train_classes(&self) -> &BTreeSet<i32> {
        &self.train
    }

    pub fn test_classes(&self) -> &BTreeSet<i32> {
        &self.test
    }

    pub fn classes(&self, phase: Phase) -> &BTreeSet<i32> {
        match phase {
            Phase::Train => &self.train,
            Phase::Test => &self.test,
        }
    }
}

/// Splits sorted classes by position: fold 0 tests on even positions, fold 1
/// on odd positions.
pub fn make_split(all_classes: &BTreeSet<i32>, fold: u8) -> Result<ClassSplit> {
    if all_classes.len() < 2 {
        return Err(invalid("a split needs at least two classes"));
    }
    if fold > 1 {
        return Err(invalid(format!("fold must be 0 or 1, got {fold}")));
    }
    type Indexed = Vec<(usize, i32)>;
    let (test, train): (Indexed, Indexed) = all_classes
        .iter()
        .copied()
        .enumerate()
        .partition(|(i, _)| i % 2 == usize::from(fold));
    ClassSplit::new(
        train.into_iter().map(|(_, c)| c).collect(),
        test.into_iter().map(|(_, c)| c).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Test => "test",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Phase::Train),
            "test" => Ok(Phase::Test),
            other => Err(invalid(format!("unknown phase `{other}`"))),
        }
    }
}

/// Shape of the episodes to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub min_fg_points: usize,
    pub m_cap: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_way: 1,
            k_shot: 1,
            min_fg_points: 100,
            m_cap: 20_480,
        }
    }
}

impl EpisodeSpec {
    fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(invalid("n_way and k_shot must be at least 1"));
        }
        if self.m_cap == 0 {
            return Err(invalid("m_cap must be at least 1"));
        }
        Ok(())
    }
}

/// One annotated support exemplar.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportShot {
    pub cloud: PointCloud,
    pub mask: BinaryMask,
}

/// An N-way K-shot task. `support[w][s]` is shot `s` of way `w`;
/// `query_gt` holds `w + 1` for way `w` and 0 for background.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub target_classes: Vec<i32>,
    pub support: Vec<Vec<SupportShot>>,
    pub query: PointCloud,
    pub query_gt: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.target_classes.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }
}

/// Which pool entries an episode uses. `support` is way-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodePlan {
    pub seed: u64,
    pub target_classes: Vec<i32>,
    pub support: Vec<Vec<usize>>,
    pub query: usize,
}

fn cap_seed(episode_seed: u64, slot: usize) -> u64 {
    indexed(substream(episode_seed, "cap"), slot as u64)
}

/// Count of `class` points after the slot's cap is applied.
fn capped_count(cloud: &PointCloud, class: i32, m_cap: usize, seed: u64) -> Result<usize> {
    if cloud.len() <= m_cap {
        Ok(cloud.count_label(class))
    } else {
        Ok(cap_points(cloud, m_cap, seed)?.count_label(class))
    }
}

/// Chooses target classes and pool entries for one episode.
pub fn plan_episode(
    pool: &[PointCloud],
    split: &ClassSplit,
    phase: Phase,
    spec: &EpisodeSpec,
    rng_seed: u64,
) -> Result<EpisodePlan> {
    spec.validate()?;
    let classes: Vec<i32> = split.classes(phase).iter().copied().collect();
    if spec.n_way > classes.len() {
        return Err(invalid(format!(
            "{}-way episodes need {} {phase} classes, split has {}",
            spec.n_way,
            spec.n_way,
            classes.len()
        )));
    }
    let mut rng = rng_from_seed(substream(rng_seed, "plan"));
    let mut shuffled = classes;
    shuffled.shuffle(&mut rng);
    let targets: Vec<i32> = shuffled[..spec.n_way].to_vec();

    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let mut used = vec![false; pool.len()];

    let mut support = Vec::with_capacity(spec.n_way);
    for (w, &class) in targets.iter().enumerate() {
        let mut shots = Vec::with_capacity(spec.k_shot);
        for s in 0..spec.k_shot {
            let seed = cap_seed(rng_seed, w * spec.k_shot + s);
            let mut found = None;
            for &cand in &order {
                if used[cand] || pool[cand].count_label(class) < spec.min_fg_points {
                    continue;
                }
                if capped_count(&pool[cand], class, spec.m_cap, seed)? >= spec.min_fg_points {
                    found = Some(cand);
                    break;
                }
            }
            let cand = found.ok_or(Error::PoolExhausted { class })?;
            used[cand] = true;
            shots.push(cand);
        }
        support.push(shots);
    }

    // The query covers as many targets as possible; earlier candidates win ties.
    let query_seed = cap_seed(rng_seed, spec.n_way * spec.k_shot);
    let mut best: Option<(usize, usize)> = None;
    for &cand in &order {
        if used[cand] {
            continue;
        }
        let mut covered = 0;
        for &class in &targets {
            if pool[cand].count_label(class) >= spec.min_fg_points
                && capped_count(&pool[cand], class, spec.m_cap, query_seed)? >= spec.min_fg_points
            {
                covered += 1;
            }
        }
        if covered > 0 && best.is_none_or(|(_, c)| covered > c) {
            best = Some((cand, covered));
        }
    }
    let (query, _) = best.ok_or(Error::PoolExhausted { class: targets[0] })?;

    Ok(EpisodePlan {
        seed: rng_seed,
        target_classes: targets,
        support,
        query,
    })
}

/// Builds an episode from explicit clouds: caps every cloud with its slot
/// seed, derives masks and query ground truth, and checks the episode
/// invariants.
pub fn assemble_episode(
    target_classes: &[i32],
    support: &[Vec<&PointCloud>],
    query: &PointCloud,
    spec: &EpisodeSpec,
    rng_seed: u64,
) -> Result<Episode> {
    spec.validate()?;
    if target_classes.len() != spec.n_way || support.len() != spec.n_way {
        return Err(invalid("support ways do not match n_way"));
    }
    let distinct: BTreeSet<i32> = target_classes.iter().copied().collect();
    if distinct.len() != target_classes.len() {
        return Err(invalid("target classes must be distinct"));
    }
    let mut ways = Vec::with_capacity(spec.n_way);
    for (w, (&class, shots)) in target_classes.iter().zip(support).enumerate() {
        if shots.len() != spec.k_shot {
            return Err(invalid(format!(
                "way {w} has {} shots, expected {}",
                shots.len(),
                spec.k_shot
            )));
        }
        let mut built = Vec::with_capacity(spec.k_shot);
        for (s, cloud) in shots.iter().enumerate() {
            let cloud = cap_points(cloud, spec.m_cap, cap_seed(rng_seed, w * spec.k_shot + s))?;
            let mask = cloud.mask_for(class);
            if mask.count() < spec.min_fg_points {
                return Err(Error::PoolExhausted { class });
            }
            built.push(SupportShot { cloud, mask });
        }
        ways.push(built);
    }
    let query = cap_points(
        query,
        spec.m_cap,
        cap_seed(rng_seed, spec.n_way * spec.k_shot),
    )?;
    let query_gt = query
        .labels()
        .iter()
        .map(|l| {
            target_classes
                .iter()
                .position(|c| c == l)
                .map_or(0, |w| w + 1)
        })
        .collect();
    Ok(Episode {
        seed: rng_seed,
        target_classes: target_classes.to_vec(),
        support: ways,
        query,
        query_gt,
    })
}

/// Realizes a plan against the pool it was drawn from.
pub fn episode_from_plan(
    pool: &[PointCloud],
    plan: &EpisodePlan,
    spec: &EpisodeSpec,
) -> Result<Episode> {
    let support: Vec<Vec<&PointCloud>> = plan
        .support
        .iter()
        .map(|shots| shots.iter().map(|&i| &pool[i]).collect())
        .collect();
    assemble_episode(
        &plan.target_classes,
        &support,
        &pool[plan.query],
        spec,
        plan.seed,
    )
}

/// Draws one N-way K-shot episode from `pool`. Support and query are
/// distinct pool entries; every cloud is capped to `m_cap` points.
pub fn generate_episode(
    pool: &[PointCloud],
    split: &ClassSplit,
    phase: Phase,
    spec: &EpisodeSpec,
    rng_seed: u64,
) -> Result<Episode> {
    let plan = plan_episode(pool, split, phase, spec, rng_seed)?;
    episode_from_plan(pool, &plan, spec)
}

/// Distinct per-episode seeds derived from a root seed.
pub fn episode_seeds(root: u64, count: usize) -> Vec<u64> {
    let stream = substream(root, "episodes");
    (0..count as u64).map(|i| indexed(stream, i)).collect()
}

/// Per-class IoU for one prediction. `per_class[c - 1]` is `None` when class
/// `c` appears in neither prediction nor ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn confusion(pred: &[usize], gt: &[usize], n_way: usize) -> Result<Vec<ConfusionCounts>> {
    if pred.len() != gt.len() {
        return Err(invalid(format!(
            "prediction has {} labels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut counts = vec![ConfusionCounts::default(); n_way];
    for (&p, &g) in pred.iter().zip(gt) {
        if p > n_way || g > n_way {
            return Err(invalid(format!("label outside 0..={n_way}")));
        }
        if p == g {
            if p > 0 {
                counts[p - 1].tp += 1;
            }
        } else {
            if p > 0 {
                counts[p - 1].fp += 1;
            }
            if g > 0 {
                counts[g - 1].fn_ += 1;
            }
        }
    }
    Ok(counts)
}

/// Foreground-class IoU and their mean over classes present in either input.
pub fn miou(pred: &[usize], gt: &[usize], n_way: usize) -> Result<IouReport> {
    let per_class: Vec<Option<f64>> = confusion(pred, gt, n_way)?
        .iter()
        .map(ConfusionCounts::iou)
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(IouReport { per_class, mean })
}

/// Accumulates confusion counts per real class id across episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MiouAccumulator {
    counts: BTreeMap<i32, ConfusionCounts>,
}

impl MiouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one episode; way `w` in `pred`/`gt` is credited to
    /// `target_classes[w]`.
    pub fn add_episode(
        &mut self,
        pred: &[usize],
        gt: &[usize],
        target_classes: &[i32],
    ) -> Result<()> {
        let counts = confusion(pred, gt, target_classes.len())?;
        for (c, cc) in target_classes.iter().zip(&counts) {
            self.counts.entry(*c).or_default().merge(cc);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MiouAccumulator) {
        for (c, cc) in &other.counts {
            self.counts.entry(*c).or_default().merge(cc);
        }
    }

    pub fn per_class(&self) -> BTreeMap<i32, f64> {
        self.counts
            .iter()
            .filter_map(|(&c, cc)| cc.iou().map(|v| (c, v)))
            .collect()
    }

    pub fn mean_iou(&self) -> Option<f64> {
        let ious = self.per_class();
        (!ious.is_empty()).then(|| ious.values().sum::<f64>() / ious.len() as f64)
    }
}

/// One line of an episode manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeDescriptor {
    pub seed: u64,
    pub target_classes: Vec<i32>,
    /// Way-major support paths (`n_way * k_shot` entries).
    pub support_paths: Vec<String>,
    pub query_path: String,
}

fn check_path(p: &str) -> Result<()> {
    if p.is_empty() || p.contains(['\t', ',', '\n']) {
        return Err(invalid(format!(
            "path `{p}` cannot be stored in a manifest"
        )));
    }
    Ok(())
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl EpisodeDescriptor {
    pub fn to_line(&self) -> Result<String> {
        for p in self
            .support_paths
            .iter()
            .chain(std::iter::once(&self.query_path))
        {
            check_path(p)?;
        }
        Ok(format!(
            "{}\t{}\t{}\t{}",
            self.seed,
            join(&self.target_classes),
            join(&self.support_paths),
            self.query_path
        ))
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        let [seed, classes, supports, query] = fields[..] else {
            return Err(Error::Parse(format!(
                "expected 4 tab-separated fields, got {}",
                fields.len()
            )));
        };
        let seed = seed
            .parse()
            .map_err(|e| Error::Parse(format!("seed: {e}")))?;
        let target_classes = classes
            .split(',')
            .map(|c| {
                c.parse()
                    .map_err(|e| Error::Parse(format!("class `{c}`: {e}")))
            })
            .collect::<Result<Vec<i32>>>()?;
        let support_paths: Vec<String> = supports.split(',').map(str::to_string).collect();
        if !support_paths.len().is_multiple_of(target_classes.len())
            || support_paths.iter().any(String::is_empty)
        {
            return Err(Error::Parse(
                "support paths do not divide evenly into ways".into(),
            ));
        }
        Ok(Self {
            seed,
            target_classes,
            support_paths,
            query_path: query.to_string(),
        })
    }

    pub fn k_shot(&self) -> usize {
        self.support_paths.len() / self.target_classes.len()
    }
}

/// Ordered list of episode descriptors with distinct seeds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EpisodeManifest {
    pub entries: Vec<EpisodeDescriptor>,
}

impl EpisodeManifest {
    pub fn new(entries: Vec<EpisodeDescriptor>) -> Result<Self> {
        let seeds: BTreeSet<u64> = entries.iter().map(|e| e.seed).collect();
        if seeds.len() != entries.len() {
            return Err(invalid("manifest seeds must be distinct"));
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.to_line()?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(EpisodeDescriptor::from_line)
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }
}
