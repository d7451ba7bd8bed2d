//! Synthetic scenes: one Gaussian blob per class with a class-specific color.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::geometry::PointCloud;
use crate::rng::{indexed, rng_from_seed, substream};

/// Classes and point budgets of one synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub classes: Vec<(i32, usize)>,
    /// Positional standard deviation of each blob, meters.
    pub sigma: f64,
    /// Minimum distance between blob centers, in units of `sigma`.
    pub separation: f64,
    /// Standard deviation of per-point color noise.
    pub color_sigma: f64,
}

impl SceneLayout {
    pub fn new(classes: Vec<(i32, usize)>) -> Self {
        Self {
            classes,
            sigma: 0.1,
            separation: 10.0,
            color_sigma: 0.05,
        }
    }
}

/// Mean color of a class: hues spaced by the golden ratio.
pub fn class_color(class: i32) -> [f64; 3] {
    let hue = (f64::from(class) * 0.618_033_988_749_895).rem_euclid(1.0) * 6.0;
    let (s, v) = (0.8, 0.9);
    let c = v * s;
    let x = c * (1.0 - (hue.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match hue as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn place_centers(count: usize, min_dist: f64, rng: &mut crate::rng::Rng) -> Vec<[f64; 3]> {
    let mut side = min_dist * (count as f64).cbrt().ceil().max(1.0) * 1.5;
    loop {
        let mut centers: Vec<[f64; 3]> = Vec::with_capacity(count);
        for _ in 0..count * 200 {
            if centers.len() == count {
                break;
            }
            let c = [
                rng.random_range(0.0..side),
                rng.random_range(0.0..side),
                rng.random_range(0.0..side * 0.5),
            ];
            let far = centers.iter().all(|o| {
                let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                d2 >= min_dist * min_dist
            });
            if far {
                centers.push(c);
            }
        }
        if centers.len() == count {
            return centers;
        }
        side *= 1.5;
    }
}

/// Generates a scene whose points are labeled by the blob that produced
/// them. Deterministic per seed.
pub fn synth_scene(seed: u64, layout: &SceneLayout) -> Result<PointCloud> {
    if layout.classes.is_empty() {
        return Err(invalid("scene layout lists no classes"));
    }
    if layout.classes.iter().all(|&(_, n)| n == 0) {
        return Err(invalid("scene layout has no points"));
    }
    if !(layout.sigma > 0.0 && layout.separation >= 0.0 && layout.color_sigma >= 0.0) {
        return Err(invalid("blob spreads must be positive"));
    }
    let mut rng = rng_from_seed(seed);
    let centers = place_centers(
        layout.classes.len(),
        layout.separation * layout.sigma,
        &mut rng,
    );
    let pos_noise = Normal::new(0.0, layout.sigma).expect("sigma validated");
    let col_noise = Normal::new(0.0, layout.color_sigma.max(f64::MIN_POSITIVE)).expect("validated");

    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    for (&(class, count), center) in layout.classes.iter().zip(&centers) {
        let base = class_color(class);
        for _ in 0..count {
            positions.push([
                center[0] + pos_noise.sample(&mut rng),
                center[1] + pos_noise.sample(&mut rng),
                center[2] + pos_noise.sample(&mut rng),
            ]);
            colors.push([
                (base[0] + col_noise.sample(&mut rng)).clamp(0.0, 1.0),
                (base[1] + col_noise.sample(&mut rng)).clamp(0.0, 1.0),
                (base[2] + col_noise.sample(&mut rng)).clamp(0.0, 1.0),
            ]);
            labels.push(class);
        }
    }
    PointCloud::new(positions, colors, labels)
}

/// A pool of `count` scenes, each holding `per_scene` classes drawn from
/// `classes` with `points_per_class` points apiece.
pub fn synth_pool(
    seed: u64,
    count: usize,
    classes: &[i32],
    per_scene: usize,
    points_per_class: usize,
) -> Result<Vec<PointCloud>> {
    if per_scene == 0 || per_scene > classes.len() {
        return Err(invalid(format!(
            "cannot place {per_scene} classes per scene out of {}",
            classes.len()
        )));
    }
    let stream = substream(seed, "pool");
    (0..count as u64)
        .map(|i| {
            let scene_seed = indexed(stream, i);
            let mut rng = rng_from_seed(substream(scene_seed, "layout"));
            let mut chosen = classes.to_vec();
            chosen.shuffle(&mut rng);
            chosen.truncate(per_scene);
            chosen.sort_unstable();
            let layout =
                SceneLayout::new(chosen.into_iter().map(|c| (c, points_per_class)).collect());
            synth_scene(scene_seed, &layout)
        })
        .collect()
}
