//! Input-size control for episodes: the foreground-biased sampler used by
//! earlier benchmarks, the uniform replacement, the point cap, and an audit
//! that measures how much foreground density the biased sampler leaks.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::geometry::PointCloud;
use crate::rng::{rng_from_seed, Rng};

/// Which sampler an audit exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    Biased,
    Uniform,
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sampler::Biased => "biased",
            Sampler::Uniform => "uniform",
        })
    }
}

impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "biased" => Ok(Sampler::Biased),
            "uniform" => Ok(Sampler::Uniform),
            other => Err(invalid(format!("unknown sampler `{other}`"))),
        }
    }
}

/// Draws `count` indices from `0..n`, without replacement when possible.
fn draw(rng: &mut Rng, n: usize, count: usize) -> Vec<usize> {
    if count <= n {
        index::sample(rng, n, count).into_vec()
    } else {
        (0..count).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Number of foreground draws the biased sampler makes before its
/// whole-cloud draw.
pub fn biased_foreground_budget(n: usize, m: usize, fg_count: usize) -> usize {
    if n < m {
        fg_count
    } else {
        // floor(m * |P_FG| / n), exact in integers
        ((m as u128 * fg_count as u128) / n as u128) as usize
    }
}

/// Foreground-biased sampling: `N_FG` draws from the foreground set, then
/// `m - N_FG` draws from the whole cloud. Foreground points may appear twice.
pub fn biased_sample(
    cloud: &PointCloud,
    m: usize,
    fg_class: i32,
    rng_seed: u64,
) -> Result<PointCloud> {
    if m == 0 {
        return Err(invalid("sample size must be at least 1"));
    }
    if fg_class < 0 {
        return Err(invalid(format!(
            "foreground class {fg_class} is not a valid label"
        )));
    }
    let n = cloud.len();
    let fg: Vec<usize> = cloud.mask_for(fg_class).indices();
    let n_fg = biased_foreground_budget(n, m, fg.len());
    let mut rng = rng_from_seed(rng_seed);

    let mut picked: Vec<usize> = draw(&mut rng, fg.len(), n_fg)
        .into_iter()
        .map(|slot| fg[slot])
        .collect();
    picked.extend(draw(&mut rng, n, m - n_fg));
    cloud.select(&picked)
}

/// Uniform sampling of `m` points: without replacement when `n >= m`, with
/// replacement otherwise.
pub fn uniform_sample(cloud: &PointCloud, m: usize, rng_seed: u64) -> Result<PointCloud> {
    if m == 0 {
        return Err(invalid("sample size must be at least 1"));
    }
    let mut rng = rng_from_seed(rng_seed);
    let picked = draw(&mut rng, cloud.len(), m);
    cloud.select(&picked)
}

/// Identity when the cloud already fits, otherwise a uniform draw of
/// `max_points`.
pub fn cap_points(cloud: &PointCloud, max_points: usize, rng_seed: u64) -> Result<PointCloud> {
    if max_points == 0 {
        return Err(invalid("point cap must be at least 1"));
    }
    if cloud.len() <= max_points {
        Ok(cloud.clone())
    } else {
        uniform_sample(cloud, max_points, rng_seed)
    }
}

/// Outcome of a foreground-leakage audit.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityReport {
    pub input_fg_fraction: f64,
    pub mean_output_fg_fraction: f64,
    /// Expected biased-sampler output fraction: `f(2 - f)` when `n >= m`,
    /// `(N_FG + (m - N_FG) f) / m` otherwise.
    pub expected_biased_fraction: f64,
    pub trials: usize,
    /// Output foreground fraction over input foreground fraction (0 when the
    /// input holds no foreground).
    pub density_ratio: f64,
}

const REPORT_KEYS: [&str; 5] = [
    "input_fg_fraction",
    "mean_output_fg_fraction",
    "expected_biased_fraction",
    "density_ratio",
    "trials",
];

impl DensityReport {
    /// Flat `key=value` block, one key per line.
    pub fn to_text(&self) -> String {
        format!(
            "input_fg_fraction={}\nmean_output_fg_fraction={}\nexpected_biased_fraction={}\ndensity_ratio={}\ntrials={}\n",
            self.input_fg_fraction,
            self.mean_output_fg_fraction,
            self.expected_biased_fraction,
            self.density_ratio,
            self.trials
        )
    }

    /// Parses a block written by [`DensityReport::to_text`]. Blank lines and
    /// `#` comments are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut values: [Option<&str>; 5] = [None; 5];
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got `{line}`")))?;
            let slot = REPORT_KEYS
                .iter()
                .position(|k| *k == key.trim())
                .ok_or_else(|| Error::Parse(format!("unknown report key `{key}`")))?;
            values[slot] = Some(value.trim());
        }
        let get = |i: usize| -> Result<&str> {
            values[i].ok_or_else(|| Error::Parse(format!("missing key `{}`", REPORT_KEYS[i])))
        };
        let real = |i: usize| -> Result<f64> {
            get(i)?
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("{}: {e}", REPORT_KEYS[i])))
        };
        Ok(Self {
            input_fg_fraction: real(0)?,
            mean_output_fg_fraction: real(1)?,
            expected_biased_fraction: real(2)?,
            density_ratio: real(3)?,
            trials: get(4)?
                .parse()
                .map_err(|e| Error::Parse(format!("trials: {e}")))?,
        })
    }
}

/// Runs `sampler` for `trials` trials (seed `rng_seed + t`) and summarizes
/// the output foreground fraction.
pub fn leakage_audit(
    cloud: &PointCloud,
    fg_class: i32,
    m: usize,
    sampler: Sampler,
    trials: usize,
    rng_seed: u64,
) -> Result<DensityReport> {
    if trials == 0 {
        return Err(invalid("an audit needs at least one trial"));
    }
    let fractions = audit_fractions(cloud, fg_class, m, sampler, trials, rng_seed)?;
    let mean = fractions.iter().sum::<f64>() / trials as f64;

    let n = cloud.len();
    let fg_count = cloud.count_label(fg_class);
    let f = fg_count as f64 / n as f64;
    let expected = if n >= m {
        f * (2.0 - f)
    } else {
        let n_fg = biased_foreground_budget(n, m, fg_count) as f64;
        (n_fg + (m as f64 - n_fg) * f) / m as f64
    };
    Ok(DensityReport {
        input_fg_fraction: f,
        mean_output_fg_fraction: mean,
        expected_biased_fraction: expected,
        trials,
        density_ratio: if f > 0.0 { mean / f } else { 0.0 },
    })
}

/// Per-trial output foreground fractions, in trial order.
pub fn audit_fractions(
    cloud: &PointCloud,
    fg_class: i32,
    m: usize,
    sampler: Sampler,
    trials: usize,
    rng_seed: u64,
) -> Result<Vec<f64>> {
    (0..trials)
        .map(|t| {
            let seed = rng_seed.wrapping_add(t as u64);
            let out = match sampler {
                Sampler::Biased => biased_sample(cloud, m, fg_class, seed)?,
                Sampler::Uniform => uniform_sample(cloud, m, seed)?,
            };
            Ok(out.label_fraction(fg_class))
        })
        .collect()
}
