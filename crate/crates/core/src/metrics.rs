//! Batch evaluation, guidance sweeps and trade-off tables.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::anonymizer::{batch_with, sample_report, AttributeMode};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, Guide};
use crate::inversion::Solver;
use crate::schedule::NoiseSchedule;
use crate::world::{posterior_attribute, sample_world, AttributeLabel, GmmWorld};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub reid_rate: f64,
    pub attr_accuracy: f64,
    /// 2-Wasserstein distance between the Gaussian moment fit of the outputs
    /// and the world's marginal moments.
    pub quality: f64,
    /// Mean distance between input and output identity embeddings, in units
    /// of the world's component scale.
    pub mean_identity_distance: f64,
    pub config: GuidanceConfig,
    pub n: usize,
    pub seed: u64,
}

/// Sample mean and unbiased covariance (zero for a single point).
pub fn moment_fit(points: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let first = points.first().ok_or(Error::Empty("points"))?;
    let d = first.len();
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: p.len() });
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(DVector::zeros(d), |acc, p| acc + p) / n;
    let mut cov = DMatrix::zeros(d, d);
    if points.len() > 1 {
        for p in points {
            let dev = p - &mean;
            cov += &dev * dev.transpose();
        }
        cov /= n - 1.0;
    }
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `W2(N(m1, c1), N(m2, c2))` in closed form:
/// `|m1 - m2|^2 + tr(c1 + c2 - 2 (c2^1/2 c1 c2^1/2)^1/2)`, square-rooted.
pub fn w2_gaussian(m1: &DVector<f64>, c1: &DMatrix<f64>, m2: &DVector<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    let d = m1.len();
    for got in [m2.len(), c1.nrows(), c1.ncols(), c2.nrows(), c2.ncols()] {
        if got != d {
            return Err(Error::DimensionMismatch { expected: d, got });
        }
    }
    let r2 = psd_sqrt(c2);
    let cross = psd_sqrt(&(&r2 * c1 * &r2)).trace();
    let sq = (m1 - m2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross;
    Ok(sq.max(0.0).sqrt())
}

/// Scores paired inputs and outputs. Without explicit `targets` the target
/// attribute of each pair is the input's posterior attribute.
pub fn evaluate_batch(
    inputs: &[DVector<f64>],
    outputs: &[DVector<f64>],
    targets: Option<&[AttributeLabel]>,
    w: &GmmWorld,
    g: &GuidanceConfig,
    seed: u64,
) -> Result<MetricsRecord> {
    if inputs.len() != outputs.len() {
        return Err(Error::LengthMismatch { left: inputs.len(), right: outputs.len() });
    }
    if inputs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if let Some(t) = targets {
        if t.len() != inputs.len() {
            return Err(Error::LengthMismatch { left: inputs.len(), right: t.len() });
        }
    }
    let reports = inputs
        .iter()
        .zip(outputs)
        .enumerate()
        .map(|(i, (x, y))| {
            let target = match targets {
                Some(t) => t[i],
                None => posterior_attribute(w, x)?.0,
            };
            sample_report(w, x, y, target)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = reports.len();
    let frac = |f: &dyn Fn(&crate::anonymizer::SampleReport) -> bool| {
        reports.iter().filter(|r| f(r)).count() as f64 / n as f64
    };
    let (m, c) = moment_fit(outputs)?;
    Ok(MetricsRecord {
        reid_rate: frac(&|r| r.reid),
        attr_accuracy: frac(&|r| r.attr_match),
        quality: w2_gaussian(&m, &c, &w.marginal_mean(), &w.marginal_cov())?,
        mean_identity_distance: reports.iter().map(|r| r.identity_distance).sum::<f64>() / n as f64,
        config: *g,
        n,
        seed,
    })
}

/// Evaluates every grid cell on the same `n` inputs,
/// `sample_world(w, n, seed)`; input `i` is anonymized with seed
/// `derive_seed(seed, i)` in every cell, so cells are paired.
pub fn sweep(
    grid: &[GuidanceConfig],
    w: &GmmWorld,
    s: &NoiseSchedule,
    n: usize,
    seed: u64,
    mode: AttributeMode,
) -> Result<Vec<MetricsRecord>> {
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let inputs: Vec<DVector<f64>> = sample_world(w, n, seed)?.into_iter().map(|p| p.point).collect();
    let base = Guide::new(w, s, grid[0])?;
    grid.par_iter()
        .map(|g| {
            let guide = base.with_config(*g)?;
            let outputs: Vec<_> = batch_with(&guide, &inputs, mode, seed)?.into_iter().map(|a| a.output).collect();
            let targets = match mode {
                AttributeMode::Set(a) => Some(vec![a; n]),
                _ => None,
            };
            evaluate_batch(&inputs, &outputs, targets.as_deref(), w, g, seed)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub lambda_cfg: f64,
    pub lambda_ipa: f64,
    pub solver: Solver,
    pub steps: usize,
    pub reid_rate: f64,
    pub attr_accuracy: f64,
    pub quality: f64,
}

/// One row per record, stably sorted by `(lambda_ipa, lambda_cfg)`.
pub fn tradeoff_table(records: &[MetricsRecord]) -> Vec<TradeoffRow> {
    let mut rows: Vec<TradeoffRow> = records
        .iter()
        .map(|r| TradeoffRow {
            lambda_cfg: r.config.lambda_cfg,
            lambda_ipa: r.config.lambda_ipa,
            solver: r.config.solver,
            steps: r.config.steps,
            reid_rate: r.reid_rate,
            attr_accuracy: r.attr_accuracy,
            quality: r.quality,
        })
        .collect();
    rows.sort_by(|a, b| a.lambda_ipa.total_cmp(&b.lambda_ipa).then(a.lambda_cfg.total_cmp(&b.lambda_cfg)));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, ScheduleKind};
    use crate::world::default_world;
    use proptest::prelude::*;

    fn sched() -> NoiseSchedule {
        build_schedule(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap()
    }

    fn points(seed: u64, n: usize) -> Vec<DVector<f64>> {
        sample_world(&default_world(), n, seed).unwrap().into_iter().map(|p| p.point).collect()
    }

    #[test]
    fn identical_outputs() {
        let w = default_world();
        let x = points(1, 200);
        let r = evaluate_batch(&x, &x, None, &w, &GuidanceConfig::default(), 1).unwrap();
        assert_eq!((r.reid_rate, r.attr_accuracy, r.mean_identity_distance), (1.0, 1.0, 0.0));
        assert_eq!(r.n, 200);
    }

    #[test]
    fn independent_outputs_are_at_chance() {
        let w = default_world();
        let n = 4000;
        let r = evaluate_batch(&points(1, n), &points(2, n), None, &w, &GuidanceConfig::default(), 0).unwrap();
        let p = 1.0 / 8.0;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((r.reid_rate - p).abs() <= 3.0 * sd, "reid {}", r.reid_rate);
    }

    #[test]
    fn fresh_samples_have_small_w2() {
        let w = default_world();
        let r = evaluate_batch(&points(1, 5000), &points(2, 5000), None, &w, &GuidanceConfig::default(), 0).unwrap();
        assert!(r.quality < 0.2, "quality {}", r.quality);
    }

    #[test]
    fn batch_errors() {
        let w = default_world();
        let g = GuidanceConfig::default();
        assert!(matches!(
            evaluate_batch(&points(1, 3), &points(1, 2), None, &w, &g, 0),
            Err(Error::LengthMismatch { .. })
        ));
        assert_eq!(evaluate_batch(&[], &[], None, &w, &g, 0), Err(Error::Empty("batch")));
        let x = points(1, 3);
        assert!(evaluate_batch(&x, &x, Some(&[AttributeLabel(0)]), &w, &g, 0).is_err());
    }

    #[test]
    fn w2_one_dimensional() {
        let v = |x: f64| DVector::from_vec(vec![x]);
        let m = |x: f64| DMatrix::from_element(1, 1, x);
        // sqrt((m1 - m2)^2 + (s1 - s2)^2)
        let got = w2_gaussian(&v(1.0), &m(4.0), &v(-2.0), &m(0.25)).unwrap();
        assert!((got - (9.0f64 + 1.5 * 1.5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn w2_commuting_covariances() {
        let c1 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 9.0]));
        let c2 = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let z = DVector::zeros(2);
        let got = w2_gaussian(&z, &c1, &z, &c2).unwrap();
        assert!((got - (1.0f64 + 4.0).sqrt()).abs() < 1e-12);
    }

    /// Symmetric form `tr(c1 + c2 - 2 (c1^1/2 c2 c1^1/2)^1/2)` with 2x2
    /// square roots in closed form: `sqrt(M) = (M + sqrt(det M) I) / sqrt(tr M + 2 sqrt(det M))`.
    fn w2_oracle(m1: &DVector<f64>, c1: &DMatrix<f64>, m2: &DVector<f64>, c2: &DMatrix<f64>) -> f64 {
        let sqrt2 = |m: &DMatrix<f64>| {
            let sd = m.determinant().max(0.0).sqrt();
            (m + DMatrix::identity(2, 2) * sd) / (m.trace() + 2.0 * sd).sqrt()
        };
        let r1 = sqrt2(c1);
        let cross = sqrt2(&(&r1 * c2 * &r1)).trace();
        ((m1 - m2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross).max(0.0).sqrt()
    }

    proptest! {
        #[test]
        fn w2_matches_closed_form_2x2(a in 0.1f64..3.0, b in 0.1f64..3.0, r in -0.9f64..0.9, c in 0.1f64..3.0, d in 0.1f64..3.0, q in -0.9f64..0.9, dx in -2.0f64..2.0) {
            let c1 = DMatrix::from_row_slice(2, 2, &[a, r * (a * b).sqrt(), r * (a * b).sqrt(), b]);
            let c2 = DMatrix::from_row_slice(2, 2, &[c, q * (c * d).sqrt(), q * (c * d).sqrt(), d]);
            let m1 = DVector::from_vec(vec![dx, 0.0]);
            let m2 = DVector::from_vec(vec![0.0, 1.0]);
            let got = w2_gaussian(&m1, &c1, &m2, &c2).unwrap();
            prop_assert!((got - w2_oracle(&m1, &c1, &m2, &c2)).abs() <= 1e-8);
            prop_assert!(w2_gaussian(&m1, &c1, &m1, &c1).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn moment_fit_of_single_point() {
        let (m, c) = moment_fit(&[DVector::from_vec(vec![1.0, 2.0])]).unwrap();
        assert_eq!(m, DVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(c, DMatrix::zeros(2, 2));
        assert!(moment_fit(&[]).is_err());
    }

    #[test]
    fn sweep_unit_cell_and_permutation() {
        let w = default_world();
        let s = sched();
        let g = GuidanceConfig::default();
        let unit = sweep(&[g.with_cfg(1.0)], &w, &s, 40, 3, AttributeMode::Uncontrolled).unwrap();
        assert_eq!(unit[0].reid_rate, 1.0);
        let grid = [g.with_cfg(-5.0), g.with_cfg(0.0), g.with_ipa(0.5)];
        let fwd = sweep(&grid, &w, &s, 30, 4, AttributeMode::Keep).unwrap();
        let rev_grid: Vec<_> = grid.iter().rev().copied().collect();
        let mut rev = sweep(&rev_grid, &w, &s, 30, 4, AttributeMode::Keep).unwrap();
        rev.reverse();
        assert_eq!(fwd, rev);
        assert!(sweep(&[], &w, &s, 10, 0, AttributeMode::Keep).is_err());
    }

    #[test]
    fn tradeoff_ordering() {
        let rec = |cfg: f64, ipa: f64| MetricsRecord {
            reid_rate: 0.0,
            attr_accuracy: 0.0,
            quality: 0.0,
            mean_identity_distance: 0.0,
            config: GuidanceConfig::default().with_cfg(cfg).with_ipa(ipa),
            n: 1,
            seed: 0,
        };
        let records = [rec(-5.0, 1.0), rec(-20.0, 1.0), rec(-10.0, 0.0), rec(-10.0, 0.5)];
        let rows = tradeoff_table(&records);
        assert_eq!(rows.len(), records.len());
        let keys: Vec<_> = rows.iter().map(|r| (r.lambda_ipa, r.lambda_cfg)).collect();
        assert_eq!(keys, vec![(0.0, -10.0), (0.5, -10.0), (1.0, -20.0), (1.0, -5.0)]);
        assert!(tradeoff_table(&[]).is_empty());
    }
}
