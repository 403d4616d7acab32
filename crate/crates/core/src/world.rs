//! Labeled Gaussian-mixture worlds.
//!
//! A world is the ground-truth data distribution of the sandbox. Every
//! component carries an identity label and an attribute label; the set of
//! `(identity, attribute)` pairs forms the conditioning vocabulary. The world
//! also provides the Bayes-optimal matchers used for evaluation.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdentityLabel(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeLabel(pub u32);

impl std::fmt::Display for IdentityLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::fmt::Display for AttributeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Continuous identity embedding: the weighted mean of an identity's
/// components.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding(pub DVector<f64>);

/// Conditioning payload of every denoiser call.
///
/// A null identity is `None`, never a zero vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Condition {
    pub identity: Option<IdentityEmbedding>,
    pub attribute: Option<AttributeLabel>,
}

impl Condition {
    pub fn null() -> Self {
        Self::default()
    }

    pub fn identity(embedding: IdentityEmbedding) -> Self {
        Self { identity: Some(embedding), attribute: None }
    }

    pub fn with_attribute(mut self, attribute: Option<AttributeLabel>) -> Self {
        self.attribute = attribute;
        self
    }

    /// The same condition with the identity nulled.
    pub fn without_identity(&self) -> Self {
        Self { identity: None, attribute: self.attribute }
    }
}

#[derive(Debug, Clone)]
pub struct Component {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub weight: f64,
    pub identity: IdentityLabel,
    pub attribute: AttributeLabel,
}

#[derive(Debug, Clone)]
pub struct LabeledPoint {
    pub point: DVector<f64>,
    pub identity: IdentityLabel,
    pub attribute: AttributeLabel,
}

#[derive(Debug, Clone)]
pub struct GmmWorld {
    dim: usize,
    components: Vec<Component>,
    rng_seed: u64,
    chol: Vec<Cholesky<f64, Dyn>>,
    log_norm: Vec<f64>,
    identity_means: BTreeMap<IdentityLabel, DVector<f64>>,
    attributes: Vec<AttributeLabel>,
}

const WEIGHT_TOL: f64 = 1e-12;

impl GmmWorld {
    pub fn new(components: Vec<Component>, rng_seed: u64) -> Result<Self> {
        let invalid = |field: String, reason: String| Error::InvalidWorld { field, reason };
        let first = components
            .first()
            .ok_or_else(|| invalid("world.components".into(), "at least one component is required".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(invalid("world.components[0].mean".into(), "dimension must be positive".into()));
        }
        let mut chol = Vec::with_capacity(components.len());
        let mut log_norm = Vec::with_capacity(components.len());
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(invalid(
                    format!("world.components[{k}].mean"),
                    format!("expected dimension {dim}, got {}", c.mean.len()),
                ));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("world.components[{k}].mean"), "must be finite".into()));
            }
            if c.cov.nrows() != dim || c.cov.ncols() != dim {
                return Err(invalid(
                    format!("world.components[{k}].cov"),
                    format!("expected {dim}x{dim}, got {}x{}", c.cov.nrows(), c.cov.ncols()),
                ));
            }
            let scale = c.cov.amax().max(f64::MIN_POSITIVE);
            if (&c.cov - c.cov.transpose()).amax() > 1e-12 * scale {
                return Err(invalid(format!("world.components[{k}].cov"), "must be symmetric".into()));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(invalid(format!("world.components[{k}].weight"), format!("must be > 0, got {}", c.weight)));
            }
            let l = Cholesky::new(c.cov.clone())
                .ok_or_else(|| invalid(format!("world.components[{k}].cov"), "must be positive-definite".into()))?;
            let log_det: f64 = 2.0 * l.l_dirty().diagonal().iter().take(dim).map(|d| d.ln()).sum::<f64>();
            log_norm.push(-0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_det));
            chol.push(l);
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(invalid("world.components[].weight".into(), format!("weights must sum to 1, got {total}")));
        }

        let mut sums: BTreeMap<IdentityLabel, (DVector<f64>, f64)> = BTreeMap::new();
        for c in &components {
            let e = sums.entry(c.identity).or_insert_with(|| (DVector::zeros(dim), 0.0));
            e.0 += &c.mean * c.weight;
            e.1 += c.weight;
        }
        let identity_means = sums.into_iter().map(|(id, (s, w))| (id, s / w)).collect();
        let mut attributes: Vec<AttributeLabel> = components.iter().map(|c| c.attribute).collect();
        attributes.sort();
        attributes.dedup();

        Ok(Self { dim, components, rng_seed, chol, log_norm, identity_means, attributes })
    }

    /// Two concentric rings: identity `i` sits at angle `2*pi*i/identities`,
    /// attribute `a` on the ring of radius `inner_radius + a * ring_spacing`.
    pub fn rings(spec: &RingSpec) -> Result<Self> {
        if spec.identities == 0 || spec.attributes == 0 {
            return Err(Error::InvalidWorld {
                field: "world.identities".into(),
                reason: "identity and attribute counts must be positive".into(),
            });
        }
        if spec.variance.is_nan() || spec.variance <= 0.0 {
            return Err(Error::InvalidWorld {
                field: "world.variance".into(),
                reason: format!("must be > 0, got {}", spec.variance),
            });
        }
        let n = (spec.identities * spec.attributes) as f64;
        let mut components = Vec::new();
        for a in 0..spec.attributes {
            let radius = spec.inner_radius + a as f64 * spec.ring_spacing;
            for i in 0..spec.identities {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / spec.identities as f64;
                components.push(Component {
                    mean: DVector::from_vec(vec![radius * angle.cos(), radius * angle.sin()]),
                    cov: DMatrix::identity(2, 2) * spec.variance,
                    weight: 1.0 / n,
                    identity: IdentityLabel(i),
                    attribute: AttributeLabel(a),
                });
            }
        }
        Self::new(components, spec.seed)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn identities(&self) -> impl Iterator<Item = IdentityLabel> + '_ {
        self.identity_means.keys().copied()
    }

    pub fn num_identities(&self) -> usize {
        self.identity_means.len()
    }

    pub fn attributes(&self) -> &[AttributeLabel] {
        &self.attributes
    }

    pub fn has_attribute(&self, a: AttributeLabel) -> bool {
        self.attributes.binary_search(&a).is_ok()
    }

    pub fn identity_embedding(&self, id: IdentityLabel) -> Option<IdentityEmbedding> {
        self.identity_means.get(&id).cloned().map(IdentityEmbedding)
    }

    /// Resolves an embedding back to its identity label.
    pub fn identity_of(&self, emb: &IdentityEmbedding) -> Result<IdentityLabel> {
        if emb.0.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: emb.0.len() });
        }
        self.identity_means
            .iter()
            .find(|(_, m)| (*m - &emb.0).norm() <= 1e-9 * (1.0 + m.norm()))
            .map(|(id, _)| *id)
            .ok_or(Error::UnknownIdentity)
    }

    /// Indices of the components admitted by a condition.
    pub fn active_components(&self, c: &Condition) -> Result<Vec<usize>> {
        let id = c.identity.as_ref().map(|e| self.identity_of(e)).transpose()?;
        if let Some(a) = c.attribute {
            if !self.has_attribute(a) {
                return Err(Error::UnknownAttribute(a.0));
            }
        }
        let active: Vec<usize> = self
            .components
            .iter()
            .enumerate()
            .filter(|(_, k)| id.is_none_or(|i| k.identity == i) && c.attribute.is_none_or(|a| k.attribute == a))
            .map(|(i, _)| i)
            .collect();
        if active.is_empty() {
            return Err(Error::InvalidParameter {
                name: "condition",
                reason: "no component carries this (identity, attribute) pair".into(),
            });
        }
        Ok(active)
    }

    /// Root-mean component standard deviation, `sqrt(mean_k tr(cov_k) / d)`.
    pub fn component_scale(&self) -> f64 {
        let mean_trace = self.components.iter().map(|c| c.cov.trace()).sum::<f64>() / self.components.len() as f64;
        (mean_trace / self.dim as f64).sqrt()
    }

    pub fn marginal_mean(&self) -> DVector<f64> {
        self.components.iter().fold(DVector::zeros(self.dim), |acc, c| acc + &c.mean * c.weight)
    }

    pub fn marginal_cov(&self) -> DMatrix<f64> {
        let m = self.marginal_mean();
        self.components.iter().fold(DMatrix::zeros(self.dim, self.dim), |acc, c| {
            let d = &c.mean - &m;
            acc + (&c.cov + &d * d.transpose()) * c.weight
        })
    }

    /// `log w_k + log N(x; mean_k, cov_k)` for every component.
    pub fn log_joint(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(self
            .components
            .iter()
            .zip(&self.chol)
            .zip(&self.log_norm)
            .map(|((c, l), ln)| {
                let y = l.l_dirty().solve_lower_triangular(&(x - &c.mean)).expect("cholesky factor is invertible");
                c.weight.ln() + ln - 0.5 * y.norm_squared()
            })
            .collect())
    }

    /// Component responsibilities `p(k | x)` via log-sum-exp.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        let lj = self.log_joint(x)?;
        let m = lj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = lj.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= z);
        Ok(r)
    }
}

/// Parameters of the two-ring default world family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RingSpec {
    pub identities: u32,
    pub attributes: u32,
    pub inner_radius: f64,
    pub ring_spacing: f64,
    pub variance: f64,
    pub seed: u64,
}

impl Default for RingSpec {
    fn default() -> Self {
        Self { identities: 8, attributes: 2, inner_radius: 2.0, ring_spacing: 2.0, variance: 0.05, seed: 0 }
    }
}

/// 8 identities x 2 attributes on concentric rings, isotropic 0.05 covariance.
pub fn default_world() -> GmmWorld {
    GmmWorld::rings(&RingSpec::default()).expect("default ring world is valid")
}

/// Serializable component description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub weight: f64,
    pub identity: IdentityLabel,
    pub attribute: AttributeLabel,
}

/// World description as it appears in configuration and world files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldSpec {
    Rings(RingSpec),
    Components { seed: u64, components: Vec<ComponentSpec> },
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec::Rings(RingSpec::default())
    }
}

impl WorldSpec {
    pub fn build(&self) -> Result<GmmWorld> {
        match self {
            WorldSpec::Rings(r) => GmmWorld::rings(r),
            WorldSpec::Components { seed, components } => {
                let comps = components
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        let d = c.mean.len();
                        if c.cov.len() != d || c.cov.iter().any(|row| row.len() != d) {
                            return Err(Error::InvalidWorld {
                                field: format!("world.components[{k}].cov"),
                                reason: format!("expected a {d}x{d} matrix"),
                            });
                        }
                        Ok(Component {
                            mean: DVector::from_vec(c.mean.clone()),
                            cov: DMatrix::from_fn(d, d, |i, j| c.cov[i][j]),
                            weight: c.weight,
                            identity: c.identity,
                            attribute: c.attribute,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                GmmWorld::new(comps, *seed)
            }
        }
    }
}

impl GmmWorld {
    /// Explicit component listing of this world.
    pub fn to_spec(&self) -> WorldSpec {
        WorldSpec::Components {
            seed: self.rng_seed,
            components: self
                .components
                .iter()
                .map(|c| ComponentSpec {
                    mean: c.mean.iter().copied().collect(),
                    cov: c.cov.row_iter().map(|r| r.iter().copied().collect()).collect(),
                    weight: c.weight,
                    identity: c.identity,
                    attribute: c.attribute,
                })
                .collect(),
        }
    }
}

/// Draws `n` labeled points: component first (categorical by weight), then
/// the component Gaussian.
pub fn sample_world(w: &GmmWorld, n: usize, seed: u64) -> Result<Vec<LabeledPoint>> {
    if n == 0 {
        return Err(Error::Empty("sample count"));
    }
    let mut rng = rng::seeded(seed);
    let pick = WeightedIndex::new(w.components.iter().map(|c| c.weight)).expect("weights validated at construction");
    Ok((0..n)
        .map(|_| {
            let k = pick.sample(&mut rng);
            let c = &w.components[k];
            let z = DVector::from_iterator(w.dim, (0..w.dim).map(|_| StandardNormal.sample(&mut rng)));
            LabeledPoint { point: &c.mean + w.chol[k].l() * z, identity: c.identity, attribute: c.attribute }
        })
        .collect())
}

fn label_posterior<L: Ord + Copy>(w: &GmmWorld, x: &DVector<f64>, label: impl Fn(&Component) -> L) -> Result<(L, f64)> {
    let r = w.responsibilities(x)?;
    let mut mass: BTreeMap<L, f64> = BTreeMap::new();
    for (c, rk) in w.components.iter().zip(r) {
        *mass.entry(label(c)).or_insert(0.0) += rk;
    }
    // Ascending label order with strict comparison: ties go to the lowest id.
    let mut best = None;
    for (l, p) in mass {
        match best {
            Some((_, bp)) if p <= bp => {}
            _ => best = Some((l, p)),
        }
    }
    Ok(best.expect("world has at least one component"))
}

/// Maximum-posterior identity of `x` and its posterior probability.
pub fn posterior_identity(w: &GmmWorld, x: &DVector<f64>) -> Result<(IdentityLabel, f64)> {
    label_posterior(w, x, |c| c.identity)
}

/// Maximum-posterior attribute of `x` and its posterior probability.
pub fn posterior_attribute(w: &GmmWorld, x: &DVector<f64>) -> Result<(AttributeLabel, f64)> {
    label_posterior(w, x, |c| c.attribute)
}

/// Identity embedding of the posterior winner, attribute left null.
pub fn extract_identity(w: &GmmWorld, x0: &DVector<f64>) -> Result<Condition> {
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter { name: "x0", reason: "must be finite".into() });
    }
    let (id, _) = posterior_identity(w, x0)?;
    Ok(Condition::identity(w.identity_embedding(id).expect("posterior label exists")))
}
