//! Attribute-swap generation from a stored trajectory.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, Guide};
use crate::inversion::{replay, stored_means, LatentTrajectory};
use crate::schedule::NoiseSchedule;
use crate::world::{AttributeLabel, Condition, GmmWorld};

/// Regenerates under `(identity, new_attr)` with
/// `x_{t-1} = mu_hat_t(x_t, x_{t+1}, c_id, new_attr) + x_{t-1}^inv - mu_hat_t^inv`,
/// where the inversion-side mean is recomputed from the stored states under
/// the recorded condition.
pub fn attribute_swap(
    traj: &LatentTrajectory,
    w: &GmmWorld,
    s: &NoiseSchedule,
    identity: &Condition,
    new_attr: AttributeLabel,
    g: &GuidanceConfig,
) -> Result<DVector<f64>> {
    swap_with(&Guide::new(w, s, *g)?, traj, identity, new_attr)
}

pub(crate) fn swap_with(
    guide: &Guide,
    traj: &LatentTrajectory,
    identity: &Condition,
    new_attr: AttributeLabel,
) -> Result<DVector<f64>> {
    traj.check_compatible(guide.schedule(), guide.config().solver)?;
    if traj.cond_used().attribute.is_none() {
        return Err(Error::MissingAttribute);
    }
    if !guide.world().has_attribute(new_attr) {
        return Err(Error::UnknownAttribute(new_attr.0));
    }
    let steps = traj.steps();
    let mut inv_mean = vec![DVector::zeros(0); steps];
    stored_means(guide, traj.states(), traj.cond_used(), |t, mu| {
        inv_mean[t - 1] = mu;
        Ok(())
    })?;
    let target = Condition { identity: identity.identity.clone(), attribute: Some(new_attr) };
    replay(guide, traj, &target, |t| Ok(traj.x(t - 1) - &inv_mean[t - 1]))
}
