//! End-to-end anonymization: extract identity, invert under the null
//! identity, regenerate with reverse guidance.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribute::swap_with;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, Guide};
use crate::inversion::{invert_with, LatentTrajectory};
use crate::rng::derive_seed;
use crate::schedule::NoiseSchedule;
use crate::world::{
    extract_identity, posterior_attribute, posterior_identity, AttributeLabel, Condition, GmmWorld, IdentityLabel,
};

/// Attribute handling of one anonymization run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeMode {
    /// No attribute conditioning on either side.
    #[default]
    Uncontrolled,
    /// Invert and regenerate under the input's attribute.
    Keep,
    /// Invert under the input's attribute, regenerate under another.
    Set(AttributeLabel),
}

impl AttributeMode {
    /// Attribute the output is expected to carry, given the input's.
    pub fn target(self, input: AttributeLabel) -> AttributeLabel {
        match self {
            AttributeMode::Set(a) => a,
            _ => input,
        }
    }
}

/// Per-sample outcome; labels are posterior classifications, used for
/// evaluation only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleReport {
    pub input_identity: IdentityLabel,
    pub output_identity: IdentityLabel,
    pub reid: bool,
    pub target_attribute: AttributeLabel,
    pub output_attribute: AttributeLabel,
    pub attr_match: bool,
    /// Distance between the input's and output's identity embeddings, in
    /// units of the world's component scale.
    pub identity_distance: f64,
}

#[derive(Debug, Clone)]
pub struct Anonymized {
    pub output: DVector<f64>,
    pub traj: LatentTrajectory,
    pub report: SampleReport,
}

pub fn anonymize(
    x0: &DVector<f64>,
    w: &GmmWorld,
    s: &NoiseSchedule,
    g: &GuidanceConfig,
    mode: AttributeMode,
    seed: u64,
) -> Result<Anonymized> {
    anonymize_with(&Guide::new(w, s, *g)?, x0, mode, seed)
}

pub fn anonymize_with(guide: &Guide, x0: &DVector<f64>, mode: AttributeMode, seed: u64) -> Result<Anonymized> {
    let w = guide.world();
    let c_id = extract_identity(w, x0)?;
    let input_attr = posterior_attribute(w, x0)?.0;
    let inv_attr = match mode {
        AttributeMode::Uncontrolled => None,
        AttributeMode::Keep | AttributeMode::Set(_) => Some(input_attr),
    };
    let traj = invert_with(guide, x0, &Condition::null().with_attribute(inv_attr), seed)?;
    let output = match mode {
        AttributeMode::Set(a) => swap_with(guide, &traj, &c_id, a)?,
        _ => guide.sample(&traj, &c_id.clone().with_attribute(inv_attr))?,
    };
    let report = sample_report(w, x0, &output, mode.target(input_attr))?;
    Ok(Anonymized { output, traj, report })
}

pub(crate) fn sample_report(
    w: &GmmWorld,
    input: &DVector<f64>,
    output: &DVector<f64>,
    target_attribute: AttributeLabel,
) -> Result<SampleReport> {
    let input_identity = posterior_identity(w, input)?.0;
    let output_identity = posterior_identity(w, output)?.0;
    let output_attribute = posterior_attribute(w, output)?.0;
    let emb = |id| w.identity_embedding(id).expect("posterior label exists").0;
    Ok(SampleReport {
        input_identity,
        output_identity,
        reid: input_identity == output_identity,
        target_attribute,
        output_attribute,
        attr_match: output_attribute == target_attribute,
        identity_distance: (emb(output_identity) - emb(input_identity)).norm() / w.component_scale(),
    })
}

/// Anonymizes every input; sample `i` uses seed `derive_seed(seed, i)`.
pub fn anonymize_batch(
    inputs: &[DVector<f64>],
    w: &GmmWorld,
    s: &NoiseSchedule,
    g: &GuidanceConfig,
    mode: AttributeMode,
    seed: u64,
) -> Result<Vec<Anonymized>> {
    batch_with(&Guide::new(w, s, *g)?, inputs, mode, seed)
}

pub(crate) fn batch_with(
    guide: &Guide,
    inputs: &[DVector<f64>],
    mode: AttributeMode,
    seed: u64,
) -> Result<Vec<Anonymized>> {
    inputs.par_iter().enumerate().map(|(i, x)| anonymize_with(guide, x, mode, derive_seed(seed, i as u64))).collect()
}

/// Relative error of replaying a trajectory under its own inversion
/// condition with identity guidance off.
pub fn reconstruction_error(guide: &Guide, traj: &LatentTrajectory) -> Result<f64> {
    let rec = guide.sample(traj, traj.cond_used())?;
    let scale = traj.x0().norm().max(f64::MIN_POSITIVE);
    Ok((rec - traj.x0()).norm() / scale)
}

/// Runs the anonymization pipeline again on an anonymized point and checks
/// whether the original identity reappears.
///
/// `original` is consulted only for the final comparison.
pub fn recovery_attack(
    anonymized: &DVector<f64>,
    original: IdentityLabel,
    w: &GmmWorld,
    s: &NoiseSchedule,
    g: &GuidanceConfig,
    mode: AttributeMode,
    seed: u64,
) -> Result<(DVector<f64>, bool)> {
    recover_with(&Guide::new(w, s, *g)?, anonymized, original, mode, seed)
}

fn recover_with(
    guide: &Guide,
    anonymized: &DVector<f64>,
    original: IdentityLabel,
    mode: AttributeMode,
    seed: u64,
) -> Result<(DVector<f64>, bool)> {
    let recovered = anonymize_with(guide, anonymized, mode, seed)?.output;
    let reid = posterior_identity(guide.world(), &recovered)?.0 == original;
    Ok((recovered, reid))
}

/// Batch recovery; sample `i` uses seed `derive_seed(seed, i)`.
pub fn recovery_batch(
    anonymized: &[DVector<f64>],
    originals: &[IdentityLabel],
    w: &GmmWorld,
    s: &NoiseSchedule,
    g: &GuidanceConfig,
    mode: AttributeMode,
    seed: u64,
) -> Result<Vec<(DVector<f64>, bool)>> {
    if anonymized.len() != originals.len() {
        return Err(Error::LengthMismatch { left: anonymized.len(), right: originals.len() });
    }
    let guide = Guide::new(w, s, *g)?;
    anonymized
        .par_iter()
        .zip(originals)
        .enumerate()
        .map(|(i, (x, id))| recover_with(&guide, x, *id, mode, derive_seed(seed, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inversion::Solver;
    use crate::schedule::{build_schedule, ScheduleKind};
    use crate::world::{default_world, sample_world, Component, RingSpec};
    use nalgebra::DMatrix;

    fn sched() -> NoiseSchedule {
        build_schedule(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn zero_guidance_is_a_no_op() {
        let w = default_world();
        let s = sched();
        for mode in [AttributeMode::Uncontrolled, AttributeMode::Keep] {
            for p in sample_world(&w, 5, 1).unwrap() {
                let a = anonymize(&p.point, &w, &s, &GuidanceConfig::default().with_cfg(0.0), mode, 7).unwrap();
                assert!((&a.output - &p.point).norm() / p.point.norm() <= 1e-6);
                assert!(a.report.reid && a.report.attr_match);
                assert_eq!(a.report.identity_distance, 0.0);
            }
        }
    }

    #[test]
    fn unit_guidance_keeps_identity() {
        let w = default_world();
        let s = sched();
        for p in sample_world(&w, 10, 2).unwrap() {
            let a =
                anonymize(&p.point, &w, &s, &GuidanceConfig::default().with_cfg(1.0), AttributeMode::Keep, 3).unwrap();
            assert!(a.report.reid);
        }
    }

    #[test]
    fn reconstruction_error_is_small_for_ddpm() {
        let w = default_world();
        let s = sched();
        let g = GuidanceConfig::default();
        let guide = Guide::new(&w, &s, g).unwrap();
        let x0 = DVector::from_vec(vec![-3.9, 0.3]);
        let a = anonymize_with(&guide, &x0, AttributeMode::Keep, 1).unwrap();
        assert!(reconstruction_error(&guide, &a.traj).unwrap() <= 1e-6);
        let ddim = Guide::new(&w, &s, g.with_solver(Solver::Ddim)).unwrap();
        let b = anonymize_with(&ddim, &x0, AttributeMode::Keep, 1).unwrap();
        assert!(reconstruction_error(&ddim, &b.traj).unwrap() > 1e-6);
    }

    #[test]
    fn batch_is_deterministic_and_order_independent() {
        let w = default_world();
        let s = sched();
        let inputs: Vec<_> = sample_world(&w, 16, 5).unwrap().into_iter().map(|p| p.point).collect();
        let g = GuidanceConfig::default();
        let a = anonymize_batch(&inputs, &w, &s, &g, AttributeMode::Keep, 11).unwrap();
        let b = anonymize_batch(&inputs, &w, &s, &g, AttributeMode::Keep, 11).unwrap();
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            assert_eq!(x.output, y.output);
            let single = anonymize(&inputs[i], &w, &s, &g, AttributeMode::Keep, derive_seed(11, i as u64)).unwrap();
            assert_eq!(single.output, x.output);
        }
    }

    #[test]
    fn set_mode_uses_swap() {
        let w = default_world();
        let s = sched();
        let x0 = DVector::from_vec(vec![2.0, 0.1]);
        let g = GuidanceConfig::default().with_cfg(0.0);
        let a = anonymize(&x0, &w, &s, &g, AttributeMode::Set(AttributeLabel(1)), 2).unwrap();
        assert_eq!(a.report.target_attribute, AttributeLabel(1));
        assert_eq!(a.traj.cond_used().attribute, Some(AttributeLabel(0)));
        assert!(anonymize(&x0, &w, &s, &g, AttributeMode::Set(AttributeLabel(4)), 2).is_err());
    }

    #[test]
    fn single_identity_world_always_reidentifies() {
        let w = GmmWorld::rings(&RingSpec { identities: 1, ..Default::default() }).unwrap();
        let s = sched();
        let x0 = DVector::from_vec(vec![2.1, 0.0]);
        let a = anonymize(&x0, &w, &s, &GuidanceConfig::default(), AttributeMode::Uncontrolled, 0).unwrap();
        let (_, reid) = recovery_attack(
            &a.output,
            IdentityLabel(0),
            &w,
            &s,
            &GuidanceConfig::default(),
            AttributeMode::Uncontrolled,
            1,
        )
        .unwrap();
        assert!(a.report.reid && reid);
    }

    #[test]
    fn identity_distance_uses_component_scale() {
        let comp = |x: f64, id| Component {
            mean: DVector::from_vec(vec![x]),
            cov: DMatrix::from_element(1, 1, 0.25),
            weight: 0.5,
            identity: IdentityLabel(id),
            attribute: AttributeLabel(0),
        };
        let w = GmmWorld::new(vec![comp(0.0, 0), comp(10.0, 1)], 0).unwrap();
        let r =
            sample_report(&w, &DVector::from_vec(vec![0.1]), &DVector::from_vec(vec![9.0]), AttributeLabel(0)).unwrap();
        assert!(!r.reid);
        assert!((r.identity_distance - 20.0).abs() < 1e-12);
    }

    #[test]
    fn recovery_length_mismatch() {
        let w = default_world();
        let s = sched();
        let err = recovery_batch(&[DVector::zeros(2)], &[], &w, &s, &GuidanceConfig::default(), AttributeMode::Keep, 0);
        assert_eq!(err.unwrap_err(), Error::LengthMismatch { left: 1, right: 0 });
    }
}
