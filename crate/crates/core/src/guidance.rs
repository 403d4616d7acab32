//! Reverse-personalization guidance and trajectory-reusing generation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::denoiser::{AnalyticDenoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::inversion::{replay, LatentTrajectory, Solver};
use crate::schedule::NoiseSchedule;
use crate::world::{Condition, GmmWorld};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub lambda_cfg: f64,
    pub lambda_ipa: f64,
    pub solver: Solver,
    pub steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { lambda_cfg: -10.0, lambda_ipa: 1.0, solver: Solver::DpmPp2m, steps: 100 }
    }
}

impl GuidanceConfig {
    pub fn with_cfg(mut self, lambda_cfg: f64) -> Self {
        self.lambda_cfg = lambda_cfg;
        self
    }

    pub fn with_ipa(mut self, lambda_ipa: f64) -> Self {
        self.lambda_ipa = lambda_ipa;
        self
    }

    pub fn with_solver(mut self, solver: Solver) -> Self {
        self.solver = solver;
        self
    }

    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if self.steps != s.steps() {
            return Err(Error::InvalidParameter {
                name: "steps",
                reason: format!("guidance uses {} steps but the schedule has {}", self.steps, s.steps()),
            });
        }
        if !self.lambda_cfg.is_finite() {
            return Err(Error::InvalidParameter { name: "lambda_cfg", reason: "must be finite".into() });
        }
        if !(self.lambda_ipa >= 0.0 && self.lambda_ipa.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "lambda_ipa",
                reason: format!("must be >= 0, got {}", self.lambda_ipa),
            });
        }
        Ok(())
    }
}

/// `lambda * cond + (1 - lambda) * uncond`.
pub fn cfg_combine(cond: &DVector<f64>, uncond: &DVector<f64>, lambda_cfg: f64) -> DVector<f64> {
    cond * lambda_cfg + uncond * (1.0 - lambda_cfg)
}

/// A guidance configuration bound to a world and schedule, with the
/// per-step mixture factorizations cached. Shareable across threads.
#[derive(Debug, Clone)]
pub struct Guide<'a> {
    den: AnalyticDenoiser<'a>,
    cfg: GuidanceConfig,
}

impl<'a> Guide<'a> {
    pub fn new(w: &'a GmmWorld, s: &'a NoiseSchedule, g: GuidanceConfig) -> Result<Self> {
        g.validate(s)?;
        Ok(Self { den: AnalyticDenoiser::new(w, s), cfg: g })
    }

    /// Same cached denoiser under a different configuration.
    pub fn with_config(&self, g: GuidanceConfig) -> Result<Self> {
        g.validate(self.den.schedule())?;
        Ok(Self { den: self.den.clone(), cfg: g })
    }

    pub fn config(&self) -> &GuidanceConfig {
        &self.cfg
    }

    pub fn world(&self) -> &'a GmmWorld {
        self.den.world()
    }

    pub fn schedule(&self) -> &'a NoiseSchedule {
        self.den.schedule()
    }

    pub fn epsilon(&self, x: &DVector<f64>, t: usize, c: &Condition) -> Result<DenoiserOutput> {
        if c.identity.is_none() {
            return self.den.epsilon(x, t, c);
        }
        let (cond, uncond) = self.den.adapter_with_base(x, t, c, self.cfg.lambda_ipa)?;
        let eps = cfg_combine(&cond.eps_hat, &uncond.eps_hat, self.cfg.lambda_cfg);
        Ok(DenoiserOutput::from_epsilon(x, eps, self.schedule().alpha_bar(t)))
    }

    pub fn sample(&self, traj: &LatentTrajectory, c: &Condition) -> Result<DVector<f64>> {
        traj.check_compatible(self.schedule(), self.cfg.solver)?;
        replay(self, traj, c, |t| Ok(traj.residual(t).clone()))
    }
}

/// Guided noise prediction:
/// `lambda_cfg * adapter(c, lambda_ipa) + (1 - lambda_cfg) * eps(c without identity)`.
pub fn guided_epsilon(
    w: &GmmWorld,
    s: &NoiseSchedule,
    x: &DVector<f64>,
    t: usize,
    c: &Condition,
    g: &GuidanceConfig,
) -> Result<DenoiserOutput> {
    Guide::new(w, s, *g)?.epsilon(x, t, c)
}

/// Regenerates from `traj.x_T` reusing the stored noise, under condition `c`.
pub fn sample_with_trajectory(
    traj: &LatentTrajectory,
    w: &GmmWorld,
    s: &NoiseSchedule,
    c: &Condition,
    g: &GuidanceConfig,
) -> Result<DVector<f64>> {
    Guide::new(w, s, *g)?.sample(traj, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{adapter_epsilon, analytic_epsilon};
    use crate::inversion::ddpm_invert;
    use crate::schedule::{build_schedule, ScheduleKind};
    use crate::world::{default_world, sample_world, IdentityLabel};
    use proptest::prelude::*;

    fn sched() -> NoiseSchedule {
        build_schedule(100, ScheduleKind::Linear, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn affine_arithmetic_example() {
        let cond = DVector::from_vec(vec![1.0, 0.0]);
        let uncond = DVector::from_vec(vec![0.0, 0.0]);
        assert_eq!(cfg_combine(&cond, &uncond, -10.0), DVector::from_vec(vec![-10.0, 0.0]));
    }

    #[test]
    fn endpoints_are_exact_branches() {
        let w = default_world();
        let s = sched();
        let pts = sample_world(&w, 50, 3).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let t = 1 + (i * 37) % 100;
            let x = &p.point * s.alpha_bar(t).sqrt();
            let c = Condition::identity(w.identity_embedding(p.identity).unwrap());
            let g = GuidanceConfig::default().with_ipa(0.8);
            let cond = adapter_epsilon(&w, &s, &x, t, &c, 0.8).unwrap();
            let uncond = analytic_epsilon(&w, &s, &x, t, &Condition::null()).unwrap();
            assert_eq!(guided_epsilon(&w, &s, &x, t, &c, &g.with_cfg(1.0)).unwrap().eps_hat, cond.eps_hat);
            assert_eq!(guided_epsilon(&w, &s, &x, t, &c, &g.with_cfg(0.0)).unwrap().eps_hat, uncond.eps_hat);
        }
    }

    #[test]
    fn null_identity_ignores_scale() {
        let w = default_world();
        let s = sched();
        let x = DVector::from_vec(vec![0.5, -2.0]);
        let c = Condition::null();
        let a = guided_epsilon(&w, &s, &x, 40, &c, &GuidanceConfig::default().with_cfg(-20.0)).unwrap();
        let b = guided_epsilon(&w, &s, &x, 40, &c, &GuidanceConfig::default().with_cfg(3.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let s = sched();
        assert!(GuidanceConfig::default().validate(&s).is_ok());
        assert!(GuidanceConfig { steps: 50, ..Default::default() }.validate(&s).is_err());
        assert!(GuidanceConfig::default().with_ipa(-1.0).validate(&s).is_err());
        assert!(GuidanceConfig::default().with_cfg(f64::NAN).validate(&s).is_err());
    }

    #[test]
    fn reconstruction_with_matched_null_condition() {
        let w = default_world();
        let s = sched();
        for p in sample_world(&w, 10, 9).unwrap() {
            for solver in [Solver::DdpmFirstOrder, Solver::DpmPp2m] {
                let traj = ddpm_invert(&p.point, &w, &s, &Condition::null(), solver, 17).unwrap();
                let g = GuidanceConfig::default().with_cfg(1.0).with_solver(solver);
                let out = sample_with_trajectory(&traj, &w, &s, &traj.cond_used().clone(), &g).unwrap();
                assert!((&out - &p.point).norm() / p.point.norm() <= 1e-6);
            }
        }
    }

    #[test]
    fn positive_guidance_pulls_toward_identity() {
        let w = default_world();
        let s = sched();
        let pts = sample_world(&w, 200, 21).unwrap();
        let (mut d4, mut d8) = (0.0, 0.0);
        for (i, p) in pts.iter().enumerate() {
            let a = crate::world::posterior_attribute(&w, &p.point).unwrap().0;
            let cond = Condition::null().with_attribute(Some(a));
            let traj = ddpm_invert(&p.point, &w, &s, &cond, Solver::DpmPp2m, i as u64).unwrap();
            let c = crate::world::extract_identity(&w, &p.point).unwrap().with_attribute(Some(a));
            let mean = &c.identity.as_ref().unwrap().0;
            for (lam, acc) in [(4.0, &mut d4), (8.0, &mut d8)] {
                let g = GuidanceConfig::default().with_cfg(lam);
                *acc += (sample_with_trajectory(&traj, &w, &s, &c, &g).unwrap() - mean).norm();
            }
        }
        assert!(d8 < d4, "d8 = {d8}, d4 = {d4}");
    }

    #[test]
    fn rejects_incompatible_trajectory() {
        let w = default_world();
        let s = sched();
        let x0 = DVector::from_vec(vec![2.0, 0.0]);
        let traj = ddpm_invert(&x0, &w, &s, &Condition::null(), Solver::DdpmFirstOrder, 0).unwrap();
        let g = GuidanceConfig::default();
        assert!(matches!(
            sample_with_trajectory(&traj, &w, &s, &Condition::null(), &g),
            Err(Error::TrajectoryMismatch(_))
        ));
        let other = build_schedule(100, ScheduleKind::Cosine, 1e-4, 0.02).unwrap();
        let g = g.with_solver(Solver::DdpmFirstOrder);
        assert!(matches!(
            sample_with_trajectory(&traj, &w, &other, &Condition::null(), &g),
            Err(Error::TrajectoryMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn affine_in_cfg_scale(la in -20.0f64..5.0, lb in -20.0f64..5.0, mu in 0.0f64..1.0, t in 1usize..=100, id in 0u32..8, x0 in -4.0f64..4.0, x1 in -4.0f64..4.0) {
            let w = default_world();
            let s = sched();
            let x = DVector::from_vec(vec![x0, x1]);
            let c = Condition::identity(w.identity_embedding(IdentityLabel(id)).unwrap());
            let g = GuidanceConfig::default();
            let e = |l: f64| guided_epsilon(&w, &s, &x, t, &c, &g.with_cfg(l)).unwrap().eps_hat;
            let lhs = e(mu * la + (1.0 - mu) * lb);
            let rhs = e(la) * mu + e(lb) * (1.0 - mu);
            prop_assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + la.abs().max(lb.abs())));
        }
    }
}
