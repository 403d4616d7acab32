//! Latent-trajectory recovery: edit-friendly DDPM inversion and the
//! deterministic DDIM variant.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserOutput;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, Guide};
use crate::schedule::NoiseSchedule;
use crate::world::{Condition, GmmWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    DdpmFirstOrder,
    #[serde(rename = "dpm_pp_2m")]
    DpmPp2m,
    Ddim,
}

impl Solver {
    pub fn as_str(self) -> &'static str {
        match self {
            Solver::DdpmFirstOrder => "ddpm_first_order",
            Solver::DpmPp2m => "dpm_pp_2m",
            Solver::Ddim => "ddim",
        }
    }
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm_first_order" => Ok(Solver::DdpmFirstOrder),
            "dpm_pp_2m" => Ok(Solver::DpmPp2m),
            "ddim" => Ok(Solver::Ddim),
            other => Err(Error::InvalidParameter {
                name: "solver",
                reason: format!("expected ddpm_first_order, dpm_pp_2m or ddim, got {other:?}"),
            }),
        }
    }
}

/// States `x_0..x_T` and per-step noise of one inversion.
///
/// `residual(t)` is the full stochastic term `x_{t-1} - mu_hat_t`, i.e.
/// `sigma_t z_t`. At a zero-variance final step `z_t` holds the raw residual.
/// DDIM trajectories carry zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    x: Vec<DVector<f64>>,
    z: Vec<DVector<f64>>,
    residual: Vec<DVector<f64>>,
    cond_used: Condition,
    solver: Solver,
    schedule_id: u64,
}

impl LatentTrajectory {
    pub fn steps(&self) -> usize {
        self.x.len() - 1
    }

    /// `x_t` for `t` in `0..=T`.
    pub fn x(&self, t: usize) -> &DVector<f64> {
        &self.x[t]
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.x
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x[0]
    }

    pub fn x_terminal(&self) -> &DVector<f64> {
        &self.x[self.steps()]
    }

    /// `z_t` for `t` in `1..=T`.
    pub fn z(&self, t: usize) -> &DVector<f64> {
        &self.z[t - 1]
    }

    pub fn residual(&self, t: usize) -> &DVector<f64> {
        &self.residual[t - 1]
    }

    pub fn cond_used(&self) -> &Condition {
        &self.cond_used
    }

    pub fn solver(&self) -> Solver {
        self.solver
    }

    pub fn schedule_id(&self) -> u64 {
        self.schedule_id
    }

    pub fn check_compatible(&self, s: &NoiseSchedule, solver: Solver) -> Result<()> {
        if self.schedule_id != s.fingerprint() || self.steps() != s.steps() {
            return Err(Error::TrajectoryMismatch("trajectory was built on a different schedule".into()));
        }
        if self.solver != solver {
            return Err(Error::TrajectoryMismatch(format!(
                "trajectory solver {} does not match guidance solver {}",
                self.solver, solver
            )));
        }
        Ok(())
    }
}

/// Data prediction used by the step at `t`: the current `x0_hat`, or for
/// `dpm_pp_2m` at interior steps `D_t + (D_t - D_{t+1}) h / (2 h_last)`.
pub(crate) fn data_prediction(
    s: &NoiseSchedule,
    solver: Solver,
    t: usize,
    cur: &DenoiserOutput,
    next: Option<&DenoiserOutput>,
) -> Result<DVector<f64>> {
    if needs_lookahead(solver, t, s.steps()) {
        let next = next.ok_or(Error::MissingLookahead(t))?;
        let h = s.log_snr(t - 1) - s.log_snr(t);
        let h_last = s.log_snr(t) - s.log_snr(t + 1);
        let k = 0.5 * h / h_last;
        Ok(&cur.x0_hat * (1.0 + k) - &next.x0_hat * k)
    } else {
        Ok(cur.x0_hat.clone())
    }
}

/// Mean of the reverse step from the current and (second-order only) the
/// retained previous denoiser output.
fn combine(
    s: &NoiseSchedule,
    solver: Solver,
    t: usize,
    x_t: &DVector<f64>,
    cur: &DenoiserOutput,
    next: Option<&DenoiserOutput>,
) -> Result<DVector<f64>> {
    let a_prev = s.alpha_bar(t - 1);
    let a_t = s.alpha_bar(t);
    if solver == Solver::Ddim {
        return Ok(&cur.x0_hat * a_prev.sqrt() + &cur.eps_hat * (1.0 - a_prev).sqrt());
    }
    let d = data_prediction(s, solver, t, cur, next)?;
    let c0 = a_prev.sqrt() * s.beta(t) / (1.0 - a_t);
    let ct = s.alpha(t).sqrt() * (1.0 - a_prev) / (1.0 - a_t);
    Ok(d * c0 + x_t * ct)
}

fn needs_lookahead(solver: Solver, t: usize, steps: usize) -> bool {
    solver == Solver::DpmPp2m && t > 1 && t < steps
}

/// Reverse-step mean `mu_hat_t(x_t, x_{t+1}, c)` recomputed from scratch.
///
/// First order: DDPM posterior mean from the guided data prediction at
/// `(x_t, t)`. `dpm_pp_2m`: the data prediction is the two-step multistep
/// combination of the outputs at `(x_t, t)` and `(x_{t+1}, t+1)` in log-SNR
/// coordinates, falling back to first order at `t = T` and `t = 1`. `ddim`:
/// the deterministic update.
pub fn mu_estimate(
    x_t: &DVector<f64>,
    x_next: Option<&DVector<f64>>,
    t: usize,
    w: &GmmWorld,
    s: &NoiseSchedule,
    c: &Condition,
    g: &GuidanceConfig,
) -> Result<DVector<f64>> {
    mu_with(&Guide::new(w, s, *g)?, x_t, x_next, t, c)
}

pub(crate) fn mu_with(
    guide: &Guide,
    x_t: &DVector<f64>,
    x_next: Option<&DVector<f64>>,
    t: usize,
    c: &Condition,
) -> Result<DVector<f64>> {
    let s = guide.schedule();
    let solver = guide.config().solver;
    let cur = guide.epsilon(x_t, t, c)?;
    let next = if needs_lookahead(solver, t, s.steps()) {
        let xn = x_next.ok_or(Error::MissingLookahead(t))?;
        Some(guide.epsilon(xn, t + 1, c)?)
    } else {
        None
    };
    combine(s, solver, t, x_t, &cur, next.as_ref())
}

/// Walks `t = T..1` from a trajectory's `x_T`:
/// `x_{t-1} = mu_hat_t(x_t, x_{t+1}, c) + noise(t)`.
pub(crate) fn replay(
    guide: &Guide,
    traj: &LatentTrajectory,
    c: &Condition,
    mut noise: impl FnMut(usize) -> Result<DVector<f64>>,
) -> Result<DVector<f64>> {
    let s = guide.schedule();
    let solver = guide.config().solver;
    let mut x = traj.x_terminal().clone();
    let mut last: Option<DenoiserOutput> = None;
    for t in (1..=s.steps()).rev() {
        let cur = guide.epsilon(&x, t, c)?;
        let mu = combine(s, solver, t, &x, &cur, last.as_ref())?;
        x = mu + noise(t)?;
        last = Some(cur);
    }
    Ok(x)
}

/// Inversion-side means `mu_hat_t(x_t, x_{t+1}, c)` for `t = T..1` over the
/// stored states, reusing each step's denoiser output as the next lookahead.
pub(crate) fn stored_means(
    guide: &Guide,
    xs: &[DVector<f64>],
    c: &Condition,
    mut visit: impl FnMut(usize, DVector<f64>) -> Result<()>,
) -> Result<()> {
    let s = guide.schedule();
    let solver = guide.config().solver;
    let mut last: Option<DenoiserOutput> = None;
    for t in (1..=s.steps()).rev() {
        let cur = guide.epsilon(&xs[t], t, c)?;
        visit(t, combine(s, solver, t, &xs[t], &cur, last.as_ref())?)?;
        last = Some(cur);
    }
    Ok(())
}

fn check_inversion_inputs(x0: &DVector<f64>, w: &GmmWorld, c: &Condition) -> Result<()> {
    if c.identity.is_some() {
        return Err(Error::IdentityNotNull);
    }
    if x0.len() != w.dim() {
        return Err(Error::DimensionMismatch { expected: w.dim(), got: x0.len() });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter { name: "x0", reason: "must be finite".into() });
    }
    w.active_components(c).map(|_| ())
}

/// Inversion guide: with a null identity the guidance scales have no effect,
/// only the solver matters.
fn inversion_guide<'a>(w: &'a GmmWorld, s: &'a NoiseSchedule, solver: Solver) -> Result<Guide<'a>> {
    Guide::new(w, s, GuidanceConfig { lambda_cfg: 1.0, lambda_ipa: 0.0, solver, steps: s.steps() })
}

/// Edit-friendly DDPM inversion under a null-identity condition.
///
/// Each `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps_t` is drawn
/// independently; the noise maps are then read off as
/// `z_t = (x_{t-1} - mu_hat_t(x_t, x_{t+1}, c)) / sigma_t`.
pub fn ddpm_invert(
    x0: &DVector<f64>,
    w: &GmmWorld,
    s: &NoiseSchedule,
    c: &Condition,
    solver: Solver,
    seed: u64,
) -> Result<LatentTrajectory> {
    if solver == Solver::Ddim {
        return Err(Error::InvalidParameter {
            name: "solver",
            reason: "DDPM inversion takes ddpm_first_order or dpm_pp_2m".into(),
        });
    }
    check_inversion_inputs(x0, w, c)?;
    if let Some(t) = (2..=s.steps()).find(|&t| s.sigma(t) <= 0.0) {
        return Err(Error::ZeroInteriorSigma(t));
    }
    invert_with(&inversion_guide(w, s, solver)?, x0, c, seed)
}

pub(crate) fn invert_with(guide: &Guide, x0: &DVector<f64>, c: &Condition, seed: u64) -> Result<LatentTrajectory> {
    let s = guide.schedule();
    let solver = guide.config().solver;
    if solver == Solver::Ddim {
        return ddim_with(guide, x0, c);
    }
    let steps = s.steps();
    let d = x0.len();
    let mut rng = crate::rng::seeded(seed);
    let mut x = Vec::with_capacity(steps + 1);
    x.push(x0.clone());
    for t in 1..=steps {
        let a = s.alpha_bar(t);
        let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        x.push(x0 * a.sqrt() + eps * (1.0 - a).sqrt());
    }
    let mut residual = vec![DVector::zeros(d); steps];
    stored_means(guide, &x, c, |t, mu| {
        residual[t - 1] = &x[t - 1] - mu;
        Ok(())
    })?;
    let z = residual
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let sigma = s.sigma(i + 1);
            if sigma > 0.0 {
                r / sigma
            } else {
                r.clone()
            }
        })
        .collect();
    Ok(LatentTrajectory { x, z, residual, cond_used: c.clone(), solver, schedule_id: s.fingerprint() })
}

/// Deterministic DDIM inversion: with `eps = eps_hat(x_{t-1}, t)`,
/// `x_t = sqrt(abar_t) (x_{t-1} - sqrt(1 - abar_{t-1}) eps) / sqrt(abar_{t-1}) + sqrt(1 - abar_t) eps`.
pub fn ddim_invert(x0: &DVector<f64>, w: &GmmWorld, s: &NoiseSchedule, c: &Condition) -> Result<LatentTrajectory> {
    check_inversion_inputs(x0, w, c)?;
    ddim_with(&inversion_guide(w, s, Solver::Ddim)?, x0, c)
}

fn ddim_with(guide: &Guide, x0: &DVector<f64>, c: &Condition) -> Result<LatentTrajectory> {
    let s = guide.schedule();
    let steps = s.steps();
    let mut x = Vec::with_capacity(steps + 1);
    x.push(x0.clone());
    for t in 1..=steps {
        let eps = guide.epsilon(&x[t - 1], t, c)?.eps_hat;
        let (a_prev, a) = (s.alpha_bar(t - 1), s.alpha_bar(t));
        let x0_hat = (&x[t - 1] - &eps * (1.0 - a_prev).sqrt()) / a_prev.sqrt();
        x.push(x0_hat * a.sqrt() + eps * (1.0 - a).sqrt());
    }
    let zeros = vec![DVector::zeros(x0.len()); steps];
    Ok(LatentTrajectory {
        x,
        z: zeros.clone(),
        residual: zeros,
        cond_used: c.clone(),
        solver: Solver::Ddim,
        schedule_id: s.fingerprint(),
    })
}

/// Dispatches on the solver: DDIM or DDPM inversion.
pub fn invert(
    x0: &DVector<f64>,
    w: &GmmWorld,
    s: &NoiseSchedule,
    c: &Condition,
    solver: Solver,
    seed: u64,
) -> Result<LatentTrajectory> {
    match solver {
        Solver::Ddim => ddim_invert(x0, w, s, c),
        _ => ddpm_invert(x0, w, s, c, solver, seed),
    }
}
