use coseg_core::geometry::PointCloud;
use coseg_core::sampling::{
    audit_fractions, biased_foreground_budget, biased_sample, leakage_audit, uniform_sample,
    Sampler,
};
use proptest::prelude::*;

/// `n` points with the first `n_fg` labeled 1, the rest 0.
fn scene(n: usize, n_fg: usize) -> PointCloud {
    let pos = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
    let labels = (0..n).map(|i| i32::from(i < n_fg)).collect();
    PointCloud::new(pos, vec![[0.0; 3]; n], labels).unwrap()
}

fn mean_and_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[test]
fn monte_carlo_means_follow_closed_forms() {
    let cloud = scene(2000, 400);
    let biased = audit_fractions(&cloud, 1, 500, Sampler::Biased, 400, 11).unwrap();
    let uniform = audit_fractions(&cloud, 1, 500, Sampler::Uniform, 400, 12).unwrap();
    let (mb, sb) = mean_and_sd(&biased);
    let (mu, su) = mean_and_sd(&uniform);
    // five standard errors
    assert!((mb - 0.36).abs() < 5.0 * sb / 20.0, "biased mean {mb}");
    assert!((mu - 0.2).abs() < 5.0 * su / 20.0, "uniform mean {mu}");
}

#[test]
fn small_cloud_keeps_every_foreground_point() {
    // n < m: all foreground points are drawn, then m - N_fg draws with replacement
    let cloud = scene(50, 10);
    let report = leakage_audit(&cloud, 1, 200, Sampler::Biased, 300, 5).unwrap();
    let expected = (10.0 + 190.0 * 0.2) / 200.0;
    assert_eq!(report.expected_biased_fraction, expected);
    assert!((report.mean_output_fg_fraction - expected).abs() < 0.01);
}

#[test]
fn no_foreground_means_zero_density() {
    let cloud = scene(300, 0);
    for s in [Sampler::Biased, Sampler::Uniform] {
        let r = leakage_audit(&cloud, 1, 100, s, 10, 1).unwrap();
        assert_eq!(r.mean_output_fg_fraction, 0.0);
        assert_eq!(r.density_ratio, 0.0);
    }
}

proptest! {
    #[test]
    fn budget_matches_floor_formula(n in 1usize..5000, m in 1usize..5000, frac in 0.0f64..=1.0) {
        let fg = (n as f64 * frac) as usize;
        let b = biased_foreground_budget(n, m, fg);
        if n < m {
            prop_assert_eq!(b, fg);
        } else {
            prop_assert_eq!(b, (m * fg) / n);
        }
    }

    #[test]
    fn samplers_return_m_points_from_the_cloud(n in 1usize..300, m in 1usize..400, seed in any::<u64>()) {
        let cloud = scene(n, n / 3);
        for out in [biased_sample(&cloud, m, 1, seed).unwrap(), uniform_sample(&cloud, m, seed).unwrap()] {
            prop_assert_eq!(out.len(), m);
            // positions encode the source index
            prop_assert!(out.positions().iter().all(|p| (p[0] as usize) < n));
        }
        // biased output holds at least the foreground budget
        let b = biased_sample(&cloud, m, 1, seed).unwrap();
        prop_assert!(b.count_label(1) >= biased_foreground_budget(n, m, n / 3));
    }

    #[test]
    fn uniform_without_replacement_when_it_fits(n in 1usize..300, seed in any::<u64>()) {
        let cloud = scene(n, 0);
        let m = n.div_ceil(2);
        let out = uniform_sample(&cloud, m, seed).unwrap();
        let mut idx: Vec<usize> = out.positions().iter().map(|p| p[0] as usize).collect();
        idx.sort();
        idx.dedup();
        prop_assert_eq!(idx.len(), m);
    }
}
