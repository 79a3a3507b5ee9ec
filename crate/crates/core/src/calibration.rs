//! Calibration of individualized mechanism parameters.
//!
//! Given per-group budgets ε_p sharing one δ, these routines find
//!
//! * **Sample**: one noise multiplier σ_sample and per-group sample rates q_p
//!   whose size-weighted mean is the base rate q;
//! * **Scale**: per-group noise multipliers σ_p at the base rate, realized
//!   through clip norms c_p = σ_scale·c/σ_p under a single batch noise
//!   σ_scale·c, with the size-weighted mean of c_p equal to c;
//! * **Combined**: sample rates interpolated between the two, with noise
//!   re-calibrated per group.
//!
//! All searches use the tight integer-order accountant.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::accountant::{epsilon_raw, RdpOrderGrid};
use crate::{Error, GroupId, Result};

/// Lowest sample rate probed by [`get_sample_rate`].
pub const MIN_SAMPLE_RATE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyGroup {
    pub id: GroupId,
    pub size: u64,
    pub epsilon: f64,
}

impl PrivacyGroup {
    pub fn new(id: impl Into<GroupId>, size: u64, epsilon: f64) -> Self {
        PrivacyGroup {
            id: id.into(),
            size,
            epsilon,
        }
    }
}

/// Privacy groups sorted by budget, sharing one δ.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacySpec {
    groups: Vec<PrivacyGroup>,
    delta: f64,
}

impl PrivacySpec {
    /// Groups are sorted by ascending ε (stable). Equal budgets are allowed.
    pub fn new(mut groups: Vec<PrivacyGroup>, delta: f64) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Validation("privacy spec has no groups".into()));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Validation(format!("delta {delta} outside (0, 1)")));
        }
        let mut seen = std::collections::BTreeSet::new();
        for g in &groups {
            if g.size == 0 {
                return Err(Error::Validation(format!("group `{}` is empty", g.id)));
            }
            if !(g.epsilon > 0.0) || !g.epsilon.is_finite() {
                return Err(Error::Validation(format!(
                    "group `{}` has invalid budget {}",
                    g.id, g.epsilon
                )));
            }
            if !seen.insert(g.id.clone()) {
                return Err(Error::Validation(format!("duplicate group id `{}`", g.id)));
            }
        }
        groups.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
        Ok(PrivacySpec { groups, delta })
    }

    pub fn groups(&self) -> &[PrivacyGroup] {
        &self.groups
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn total_points(&self) -> u64 {
        self.groups.iter().map(|g| g.size).sum()
    }

    pub fn min_epsilon(&self) -> f64 {
        self.groups[0].epsilon
    }

    pub fn is_uniform(&self) -> bool {
        self.groups.iter().all(|g| g.epsilon == self.groups[0].epsilon)
    }

    /// Size-weighted mean `(1/N) Σ |G_p| x_p`.
    pub fn weighted_mean(&self, values: &[f64]) -> f64 {
        let n = self.total_points() as f64;
        self.groups
            .iter()
            .zip(values)
            .map(|(g, v)| g.size as f64 * v)
            .sum::<f64>()
            / n
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    /// Search precision γ: accepted gap between the target ε and the ε of
    /// the returned parameters.
    pub precision: f64,
    /// Per-iteration multiplier applied to σ_sample.
    pub scaling_factor: f64,
    pub max_outer_iterations: usize,
    /// Relative tolerance on the weighted mean of sample rates.
    pub mean_tolerance: f64,
    /// σ_p below this raises a warning flag in Scale outputs.
    pub sigma_floor: f64,
    /// Bracketing gives up once σ would exceed this.
    pub sigma_max: f64,
    pub grid: RdpOrderGrid,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            precision: 0.01,
            scaling_factor: 0.99,
            max_outer_iterations: 5000,
            mean_tolerance: 1e-3,
            sigma_floor: 0.3,
            sigma_max: 1e5,
            grid: RdpOrderGrid::default(),
        }
    }
}

impl CalibrationOptions {
    pub fn with_precision(precision: f64) -> Self {
        CalibrationOptions {
            precision,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.precision > 0.0) {
            return Err(Error::Validation("precision must be positive".into()));
        }
        if !(self.scaling_factor > 0.0 && self.scaling_factor < 1.0) {
            return Err(Error::Validation("scaling factor must lie in (0, 1)".into()));
        }
        if !(self.mean_tolerance > 0.0) {
            return Err(Error::Validation("mean tolerance must be positive".into()));
        }
        Ok(())
    }
}

fn check_common(epsilon: f64, delta: f64, steps: u64) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Validation(format!("target epsilon {epsilon} must be positive")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Validation(format!("delta {delta} outside (0, 1)")));
    }
    if steps == 0 {
        return Err(Error::Validation("steps must be at least 1".into()));
    }
    Ok(())
}

/// ε with overflowing configurations mapped to +∞.
fn eps_at(q: f64, sigma: f64, steps: u64, delta: f64, grid: &RdpOrderGrid) -> Result<f64> {
    match epsilon_raw(q, sigma, steps, delta, grid) {
        Ok(e) => Ok(e),
        Err(Error::Domain(msg)) if msg.starts_with("RDP overflow") => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Smallest bracketed noise multiplier whose ε stays at or below the target,
/// within `opts.precision` of it. Exponential bracketing from σ = 10, then
/// bisection.
pub fn get_noise(
    epsilon_target: f64,
    delta: f64,
    q: f64,
    steps: u64,
    opts: &CalibrationOptions,
) -> Result<f64> {
    check_common(epsilon_target, delta, steps)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Validation(format!("sample rate {q} outside (0, 1]")));
    }
    let grid = &opts.grid;
    let mut sigma_low = 0.0;
    let mut sigma_high = 10.0;
    let mut eps_high = eps_at(q, sigma_high, steps, delta, grid)?;
    while eps_high > epsilon_target {
        sigma_low = sigma_high;
        sigma_high *= 2.0;
        if sigma_high > opts.sigma_max {
            return Err(Error::Calibration {
                group: None,
                reason: format!(
                    "epsilon {epsilon_target} unreachable with noise multiplier <= {}",
                    opts.sigma_max
                ),
            });
        }
        eps_high = eps_at(q, sigma_high, steps, delta, grid)?;
    }
    while epsilon_target - eps_high > opts.precision {
        let mid = 0.5 * (sigma_low + sigma_high);
        if mid <= sigma_low || mid >= sigma_high {
            break;
        }
        let eps = eps_at(q, mid, steps, delta, grid)?;
        if eps <= epsilon_target {
            sigma_high = mid;
            eps_high = eps;
        } else {
            sigma_low = mid;
        }
    }
    Ok(sigma_high)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSearch {
    pub rate: f64,
    /// Even q = 1 leaves more than γ of the budget unspent.
    pub saturated: bool,
}

/// Largest bracketed sample rate whose ε stays at or below the target, within
/// `opts.precision` of it.
pub fn get_sample_rate(
    epsilon_target: f64,
    delta: f64,
    sigma: f64,
    steps: u64,
    opts: &CalibrationOptions,
) -> Result<RateSearch> {
    check_common(epsilon_target, delta, steps)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Validation(format!("noise multiplier {sigma} must be positive")));
    }
    let grid = &opts.grid;
    let mut q_low = MIN_SAMPLE_RATE;
    let mut eps_low = eps_at(q_low, sigma, steps, delta, grid)?;
    if eps_low > epsilon_target {
        return Err(Error::Calibration {
            group: None,
            reason: format!(
                "noise multiplier {sigma} too small: q = {MIN_SAMPLE_RATE} already exceeds epsilon {epsilon_target}"
            ),
        });
    }
    // Grow the upper end until it overshoots the target.
    let mut q_high: f64 = 0.1;
    loop {
        let eps_high = eps_at(q_high, sigma, steps, delta, grid)?;
        if eps_high > epsilon_target {
            break;
        }
        // Under budget at q_high: it is a valid lower end.
        q_low = q_high;
        eps_low = eps_high;
        if q_high >= 1.0 {
            return Ok(RateSearch {
                rate: 1.0,
                saturated: epsilon_target - eps_high > opts.precision,
            });
        }
        q_high = (2.0 * q_high).min(1.0);
    }
    while epsilon_target - eps_low > opts.precision {
        let mid = 0.5 * (q_low + q_high);
        if mid <= q_low || mid >= q_high {
            break;
        }
        let eps = eps_at(mid, sigma, steps, delta, grid)?;
        if eps <= epsilon_target {
            q_low = mid;
            eps_low = eps;
        } else {
            q_high = mid;
        }
    }
    Ok(RateSearch {
        rate: q_low,
        saturated: false,
    })
}

fn check_base(q: f64, steps: u64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Validation(format!("base sample rate {q} outside (0, 1]")));
    }
    if steps == 0 {
        return Err(Error::Validation("steps must be at least 1".into()));
    }
    Ok(())
}

fn with_group<T>(group: &GroupId, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Calibration { group: None, reason } => Error::Calibration {
            group: Some(group.to_string()),
            reason,
        },
        other => other,
    })
}

/// Sample-method parameters: shared σ_sample, per-group rates.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleParams {
    pub sigma_sample: f64,
    pub rates: Vec<(GroupId, f64)>,
    pub steps: u64,
    pub base_rate: f64,
    /// Outer σ updates performed.
    pub iterations: usize,
}

impl SampleParams {
    pub fn rate_of(&self, id: &GroupId) -> Option<f64> {
        self.rates.iter().find(|(g, _)| g == id).map(|(_, q)| *q)
    }
}

struct RateSolver<'a> {
    spec: &'a PrivacySpec,
    steps: u64,
    opts: CalibrationOptions,
}

impl RateSolver<'_> {
    /// Per-group rates at `sigma`, plus their weighted mean. Saturated rates
    /// are reported as 1.
    fn rates(&self, sigma: f64) -> Result<(Vec<RateSearch>, f64)> {
        let mut cache: HashMap<u64, RateSearch> = HashMap::new();
        let mut out = Vec::with_capacity(self.spec.groups().len());
        for g in self.spec.groups() {
            let found = match cache.get(&g.epsilon.to_bits()) {
                Some(r) => *r,
                None => {
                    let r = with_group(
                        &g.id,
                        get_sample_rate(g.epsilon, self.spec.delta(), sigma, self.steps, &self.opts),
                    )?;
                    cache.insert(g.epsilon.to_bits(), r);
                    r
                }
            };
            out.push(found);
        }
        let qs: Vec<f64> = out.iter().map(|r| r.rate).collect();
        let mean = self.spec.weighted_mean(&qs);
        Ok((out, mean))
    }
}

/// Finds σ_sample and per-group rates so that every group exhausts its
/// budget after `steps` steps and the expected batch size stays `q·N`.
///
/// Starts from the noise needed by the strictest group at rate `q` and
/// shrinks σ geometrically until the weighted mean rate reaches `q`; if a
/// step overshoots the tolerance band, the last bracket is bisected.
pub fn derive_sample(
    spec: &PrivacySpec,
    q: f64,
    steps: u64,
    opts: &CalibrationOptions,
) -> Result<SampleParams> {
    opts.validate()?;
    check_base(q, steps)?;
    let delta = spec.delta();
    let sigma_init = with_group(
        &spec.groups()[0].id,
        get_noise(spec.min_epsilon(), delta, q, steps, opts),
    )?;

    if spec.is_uniform() {
        return Ok(SampleParams {
            sigma_sample: sigma_init,
            rates: spec.groups().iter().map(|g| (g.id.clone(), q)).collect(),
            steps,
            base_rate: q,
            iterations: 0,
        });
    }

    // Rate searches run finer than γ so the weighted mean is resolved well
    // below the mean tolerance.
    let mut rate_opts = opts.clone();
    rate_opts.precision = opts.precision.min(1e-4 * spec.min_epsilon());
    let solver = RateSolver {
        spec,
        steps,
        opts: rate_opts,
    };

    let tol = opts.mean_tolerance * q;
    let mut sigma = sigma_init;
    let (mut rates, mut mean) = solver.rates(sigma)?;
    let mut iterations = 0usize;

    let too_high = |m: f64| m > q + tol;
    let too_low = |m: f64| m < q - tol;

    // Geometric phase: move σ towards the band, remembering the last σ on
    // the other side.
    let mut bracket: Option<(f64, f64)> = None;
    if too_high(mean) || too_low(mean) {
        let shrink = too_high(mean);
        loop {
            if iterations >= opts.max_outer_iterations {
                return Err(Error::Calibration {
                    group: None,
                    reason: format!(
                        "sample-rate mean did not converge in {} iterations",
                        opts.max_outer_iterations
                    ),
                });
            }
            let prev = sigma;
            sigma = if shrink {
                sigma * opts.scaling_factor
            } else {
                sigma / opts.scaling_factor
            };
            iterations += 1;
            (rates, mean) = solver.rates(sigma)?;
            if !too_high(mean) && !too_low(mean) {
                break;
            }
            if shrink && too_low(mean) {
                bracket = Some((sigma, prev));
                break;
            }
            if !shrink && too_high(mean) {
                bracket = Some((prev, sigma));
                break;
            }
        }
    }

    // Bisection phase over (σ with mean too low, σ with mean too high).
    if let Some((mut lo, mut hi)) = bracket {
        loop {
            if iterations >= opts.max_outer_iterations {
                return Err(Error::Calibration {
                    group: None,
                    reason: "sample-rate mean bisection did not converge".into(),
                });
            }
            sigma = 0.5 * (lo + hi);
            iterations += 1;
            (rates, mean) = solver.rates(sigma)?;
            if too_high(mean) {
                hi = sigma;
            } else if too_low(mean) {
                lo = sigma;
            } else {
                break;
            }
            if hi - lo <= 1e-12 * hi {
                return Err(Error::Calibration {
                    group: None,
                    reason: format!("cannot place the mean sample rate within {tol} of {q}"),
                });
            }
        }
    }

    for (g, r) in spec.groups().iter().zip(&rates) {
        if r.saturated || r.rate >= 1.0 {
            return Err(Error::Infeasible {
                group: g.id.to_string(),
            });
        }
    }

    Ok(SampleParams {
        sigma_sample: sigma,
        rates: spec
            .groups()
            .iter()
            .zip(&rates)
            .map(|(g, r)| (g.id.clone(), r.rate))
            .collect(),
        steps,
        base_rate: q,
        iterations,
    })
}

/// Scale-method parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParams {
    pub sigma_scale: f64,
    pub noise_multipliers: Vec<(GroupId, f64)>,
    pub clip_norms: Vec<(GroupId, f64)>,
    pub base_clip: f64,
    pub steps: u64,
    pub base_rate: f64,
    /// Groups whose σ_p fell below the configured floor.
    pub low_noise_groups: Vec<GroupId>,
}

/// Per-group noise at given rates, then the shared σ_scale and clip norms.
struct ScaleSolution {
    sigma_scale: f64,
    sigmas: Vec<f64>,
    clips: Vec<f64>,
}

fn solve_scale(
    spec: &PrivacySpec,
    rates: &[f64],
    steps: u64,
    clip: f64,
    opts: &CalibrationOptions,
) -> Result<ScaleSolution> {
    let mut cache: HashMap<(u64, u64), f64> = HashMap::new();
    let mut sigmas = Vec::with_capacity(rates.len());
    for (g, &q) in spec.groups().iter().zip(rates) {
        let key = (g.epsilon.to_bits(), q.to_bits());
        let sigma = match cache.get(&key) {
            Some(s) => *s,
            None => {
                let s = with_group(&g.id, get_noise(g.epsilon, spec.delta(), q, steps, opts))?;
                cache.insert(key, s);
                s
            }
        };
        sigmas.push(sigma);
    }
    if sigmas.iter().all(|s| *s == sigmas[0]) {
        // Equal noise everywhere: keep the base clip bit-for-bit.
        let n = sigmas.len();
        return Ok(ScaleSolution {
            sigma_scale: sigmas[0],
            sigmas,
            clips: vec![clip; n],
        });
    }
    let inv: Vec<f64> = sigmas.iter().map(|s| 1.0 / s).collect();
    let sigma_scale = 1.0 / spec.weighted_mean(&inv);
    let clips = sigmas.iter().map(|s| sigma_scale * clip / s).collect();
    Ok(ScaleSolution {
        sigma_scale,
        sigmas,
        clips,
    })
}

fn check_clip(clip: f64) -> Result<()> {
    if !(clip > 0.0) || !clip.is_finite() {
        return Err(Error::Validation(format!("base clip norm {clip} must be positive")));
    }
    Ok(())
}

pub fn derive_scale(
    spec: &PrivacySpec,
    q: f64,
    steps: u64,
    clip: f64,
    opts: &CalibrationOptions,
) -> Result<ScaleParams> {
    opts.validate()?;
    check_base(q, steps)?;
    check_clip(clip)?;
    let rates = vec![q; spec.groups().len()];
    let sol = solve_scale(spec, &rates, steps, clip, opts)?;
    let ids = spec.groups().iter().map(|g| g.id.clone());
    Ok(ScaleParams {
        sigma_scale: sol.sigma_scale,
        low_noise_groups: spec
            .groups()
            .iter()
            .zip(&sol.sigmas)
            .filter(|(_, s)| **s < opts.sigma_floor)
            .map(|(g, _)| g.id.clone())
            .collect(),
        noise_multipliers: ids.clone().zip(sol.sigmas).collect(),
        clip_norms: ids.zip(sol.clips).collect(),
        base_clip: clip,
        steps,
        base_rate: q,
    })
}

/// Sample and Scale weighted by `weight` (1 = pure Sample, 0 = pure Scale).
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedParams {
    pub weight: f64,
    pub rates: Vec<(GroupId, f64)>,
    pub sigma_scale: f64,
    pub clip_norms: Vec<(GroupId, f64)>,
    pub noise_multipliers: Vec<(GroupId, f64)>,
    pub base_clip: f64,
    pub steps: u64,
    pub base_rate: f64,
}

/// Rates move linearly from `q` towards the Sample rates; each group's noise
/// is then re-calibrated at its rate and realized through clip norms as in
/// Scale.
pub fn derive_combined(
    spec: &PrivacySpec,
    q: f64,
    steps: u64,
    clip: f64,
    weight: f64,
    opts: &CalibrationOptions,
) -> Result<CombinedParams> {
    opts.validate()?;
    check_base(q, steps)?;
    check_clip(clip)?;
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Validation(format!("weight {weight} outside [0, 1]")));
    }
    let rates: Vec<f64> = if weight == 0.0 {
        vec![q; spec.groups().len()]
    } else {
        let sample = derive_sample(spec, q, steps, opts)?;
        sample
            .rates
            .iter()
            .map(|(_, qs)| if weight == 1.0 { *qs } else { q + weight * (qs - q) })
            .collect()
    };
    let sol = solve_scale(spec, &rates, steps, clip, opts)?;
    let ids: Vec<GroupId> = spec.groups().iter().map(|g| g.id.clone()).collect();
    Ok(CombinedParams {
        weight,
        rates: ids.iter().cloned().zip(rates).collect(),
        sigma_scale: sol.sigma_scale,
        clip_norms: ids.iter().cloned().zip(sol.clips).collect(),
        noise_multipliers: ids.into_iter().zip(sol.sigmas).collect(),
        base_clip: clip,
        steps,
        base_rate: q,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sample,
    Scale,
    Combined,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Sample => "sample",
            Method::Scale => "scale",
            Method::Combined => "combined",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactGroup {
    pub id: GroupId,
    pub size: u64,
    pub epsilon: f64,
    pub q: f64,
    pub sigma: f64,
    pub clip: f64,
}

/// Calibrated parameters as exchanged between `calibrate` and `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamArtifact {
    pub method: Method,
    pub delta: f64,
    pub steps: u64,
    pub base_rate: f64,
    pub base_clip: f64,
    pub sigma_shared: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
    pub groups: Vec<ArtifactGroup>,
}

/// Relative tolerance of the σ_shared·c / c_p = σ_p identity.
pub const NOISE_IDENTITY_TOLERANCE: f64 = 1e-12;

impl ParamArtifact {
    fn groups_from(
        spec: &PrivacySpec,
        rows: impl Iterator<Item = (f64, f64, f64)>,
    ) -> Vec<ArtifactGroup> {
        spec.groups()
            .iter()
            .zip(rows)
            .map(|(g, (q, sigma, clip))| ArtifactGroup {
                id: g.id.clone(),
                size: g.size,
                epsilon: g.epsilon,
                q,
                sigma,
                clip,
            })
            .collect()
    }

    pub fn from_sample(spec: &PrivacySpec, p: &SampleParams, base_clip: f64) -> Self {
        ParamArtifact {
            method: Method::Sample,
            delta: spec.delta(),
            steps: p.steps,
            base_rate: p.base_rate,
            base_clip,
            sigma_shared: p.sigma_sample,
            weight: None,
            groups: Self::groups_from(
                spec,
                p.rates.iter().map(|(_, q)| (*q, p.sigma_sample, base_clip)),
            ),
        }
    }

    pub fn from_scale(spec: &PrivacySpec, p: &ScaleParams) -> Self {
        ParamArtifact {
            method: Method::Scale,
            delta: spec.delta(),
            steps: p.steps,
            base_rate: p.base_rate,
            base_clip: p.base_clip,
            sigma_shared: p.sigma_scale,
            weight: None,
            groups: Self::groups_from(
                spec,
                p.noise_multipliers
                    .iter()
                    .zip(&p.clip_norms)
                    .map(|((_, s), (_, c))| (p.base_rate, *s, *c)),
            ),
        }
    }

    pub fn from_combined(spec: &PrivacySpec, p: &CombinedParams) -> Self {
        ParamArtifact {
            method: Method::Combined,
            delta: spec.delta(),
            steps: p.steps,
            base_rate: p.base_rate,
            base_clip: p.base_clip,
            sigma_shared: p.sigma_scale,
            weight: Some(p.weight),
            groups: Self::groups_from(
                spec,
                p.rates
                    .iter()
                    .zip(&p.noise_multipliers)
                    .zip(&p.clip_norms)
                    .map(|(((_, q), (_, s)), (_, c))| (*q, *s, *c)),
            ),
        }
    }

    /// Calibrates `spec` with the given method. `weight` is only read for
    /// [`Method::Combined`].
    pub fn calibrate(
        spec: &PrivacySpec,
        method: Method,
        weight: f64,
        q: f64,
        steps: u64,
        clip: f64,
        opts: &CalibrationOptions,
    ) -> Result<Self> {
        check_clip(clip)?;
        Ok(match method {
            Method::Sample => Self::from_sample(spec, &derive_sample(spec, q, steps, opts)?, clip),
            Method::Scale => Self::from_scale(spec, &derive_scale(spec, q, steps, clip, opts)?),
            Method::Combined => {
                Self::from_combined(spec, &derive_combined(spec, q, steps, clip, weight, opts)?)
            }
        })
    }

    /// Noise multiplier a group effectively receives: σ_shared · c / c_p.
    pub fn effective_sigma(&self, group: &ArtifactGroup) -> f64 {
        self.sigma_shared * self.base_clip / group.clip
    }

    pub fn group(&self, id: &GroupId) -> Option<&ArtifactGroup> {
        self.groups.iter().find(|g| &g.id == id)
    }

    /// Structural checks plus the effective-noise identity for every group.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.groups.is_empty() {
            return bad("artifact has no groups".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("artifact delta {} outside (0, 1)", self.delta));
        }
        if self.steps == 0 {
            return bad("artifact steps must be at least 1".into());
        }
        if !(self.base_rate > 0.0 && self.base_rate <= 1.0) {
            return bad(format!("artifact base rate {} outside (0, 1]", self.base_rate));
        }
        if !(self.base_clip > 0.0) || !(self.sigma_shared > 0.0) {
            return bad("artifact base clip and shared sigma must be positive".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for g in &self.groups {
            if !seen.insert(&g.id) {
                return bad(format!("duplicate group `{}` in artifact", g.id));
            }
            if !(g.q > 0.0 && g.q <= 1.0) || !(g.sigma > 0.0) || !(g.clip > 0.0) {
                return bad(format!("group `{}` has invalid parameters", g.id));
            }
            let effective = self.effective_sigma(g);
            if (effective - g.sigma).abs() > NOISE_IDENTITY_TOLERANCE * g.sigma {
                return bad(format!(
                    "group `{}`: sigma_shared*c/c_p = {effective} but sigma = {}",
                    g.id, g.sigma
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accountant::{epsilon_of, SgmParams};

    const DELTA: f64 = 1e-5;

    fn eps(q: f64, sigma: f64, steps: u64) -> f64 {
        let p = SgmParams::new(q, sigma, steps).unwrap();
        epsilon_of(&p, DELTA, &RdpOrderGrid::default()).unwrap()
    }

    fn three_groups() -> PrivacySpec {
        PrivacySpec::new(
            vec![
                PrivacyGroup::new("hi", 230, 3.0),
                PrivacyGroup::new("lo", 340, 1.0),
                PrivacyGroup::new("mid", 430, 2.0),
            ],
            DELTA,
        )
        .unwrap()
    }

    #[test]
    fn spec_sorts_and_validates() {
        let spec = three_groups();
        let order: Vec<&str> = spec.groups().iter().map(|g| g.id.as_str()).collect();
        assert_eq!(order, ["lo", "mid", "hi"]);
        assert_eq!(spec.total_points(), 1000);
        assert!(PrivacySpec::new(vec![], DELTA).is_err());
        assert!(PrivacySpec::new(vec![PrivacyGroup::new("a", 0, 1.0)], DELTA).is_err());
        assert!(PrivacySpec::new(vec![PrivacyGroup::new("a", 3, 0.0)], DELTA).is_err());
        assert!(PrivacySpec::new(vec![PrivacyGroup::new("a", 3, 1.0)], 1.0).is_err());
        assert!(PrivacySpec::new(
            vec![PrivacyGroup::new("a", 3, 1.0), PrivacyGroup::new("a", 3, 2.0)],
            DELTA
        )
        .is_err());
    }

    #[test]
    fn get_noise_round_trip() {
        let opts = CalibrationOptions::default();
        for &(target, q, steps) in &[(1.0, 0.02, 300), (2.5, 0.05, 100), (0.5, 0.01, 1000)] {
            let sigma = get_noise(target, DELTA, q, steps, &opts).unwrap();
            let e = eps(q, sigma, steps);
            assert!(e <= target && target - e <= opts.precision, "{target} {e}");
        }
    }

    #[test]
    fn get_noise_unreachable_target_fails() {
        // The conversion floor at δ = 1e-5 is about 0.0195 even with zero RDP.
        let err = get_noise(0.01, DELTA, 0.01, 100, &CalibrationOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Calibration { .. }));
    }

    #[test]
    fn get_sample_rate_round_trip_and_monotone() {
        let opts = CalibrationOptions::with_precision(1e-4);
        let (sigma, steps) = (1.2, 500);
        let mut last = 0.0;
        for target in [0.5, 1.0, 2.0, 4.0] {
            let r = get_sample_rate(target, DELTA, sigma, steps, &opts).unwrap();
            assert!(!r.saturated);
            let e = eps(r.rate, sigma, steps);
            assert!(e <= target && target - e <= 1e-4);
            assert!(r.rate > last);
            last = r.rate;
        }
        let q = 0.013;
        let target = eps(q, sigma, steps);
        let back = get_sample_rate(target, DELTA, sigma, steps, &opts).unwrap().rate;
        assert!((back - q).abs() / q < 1e-3, "{back}");
    }

    #[test]
    fn get_sample_rate_saturates_and_fails() {
        let opts = CalibrationOptions::default();
        let r = get_sample_rate(50.0, DELTA, 5.0, 10, &opts).unwrap();
        assert_eq!(r.rate, 1.0);
        assert!(r.saturated);
        assert!(matches!(
            get_sample_rate(0.5, DELTA, 0.05, 10_000, &opts),
            Err(Error::Calibration { .. })
        ));
    }

    #[test]
    fn sample_single_group_is_plain_dpsgd() {
        let opts = CalibrationOptions::default();
        let spec = PrivacySpec::new(vec![PrivacyGroup::new("all", 1000, 1.5)], DELTA).unwrap();
        let p = derive_sample(&spec, 0.05, 200, &opts).unwrap();
        assert_eq!(p.sigma_sample, get_noise(1.5, DELTA, 0.05, 200, &opts).unwrap());
        assert_eq!(p.rates[0].1, 0.05);
    }

    #[test]
    fn sample_three_groups() {
        let opts = CalibrationOptions::with_precision(1e-3);
        let spec = three_groups();
        let (q, steps) = (0.05, 200);
        let p = derive_sample(&spec, q, steps, &opts).unwrap();
        let rates: Vec<f64> = p.rates.iter().map(|r| r.1).collect();
        assert!(rates[0] < rates[1] && rates[1] < rates[2]);
        assert!((spec.weighted_mean(&rates) - q).abs() / q <= 1e-3);
        for (g, r) in spec.groups().iter().zip(&rates) {
            let e = eps(*r, p.sigma_sample, steps);
            assert!(e <= g.epsilon + 1e-12 && (g.epsilon - e) <= (0.01 * g.epsilon).max(1e-3));
        }
    }

    #[test]
    fn sample_infeasible_budget_is_reported() {
        let spec = PrivacySpec::new(
            vec![PrivacyGroup::new("a", 990, 1.0), PrivacyGroup::new("b", 10, 200.0)],
            DELTA,
        )
        .unwrap();
        let err = derive_sample(&spec, 0.3, 50, &CalibrationOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Infeasible { ref group } if group == "b"), "{err}");
    }

    #[test]
    fn scale_identities() {
        let opts = CalibrationOptions::default();
        let spec = three_groups();
        let p = derive_scale(&spec, 0.05, 200, 0.7, &opts).unwrap();
        let sig: Vec<f64> = p.noise_multipliers.iter().map(|x| x.1).collect();
        let clips: Vec<f64> = p.clip_norms.iter().map(|x| x.1).collect();
        assert!(sig[0] > sig[1] && sig[1] > sig[2]);
        assert!(clips[0] < clips[1] && clips[1] < clips[2]);
        assert!((spec.weighted_mean(&clips) - 0.7).abs() / 0.7 <= 1e-9);
        for (s, c) in sig.iter().zip(&clips) {
            assert!((s * c - 0.7 * p.sigma_scale).abs() <= 1e-12 * 0.7 * p.sigma_scale);
        }
    }

    #[test]
    fn scale_single_group() {
        let opts = CalibrationOptions::default();
        let spec = PrivacySpec::new(vec![PrivacyGroup::new("g", 100, 2.0)], DELTA).unwrap();
        let p = derive_scale(&spec, 0.1, 100, 1.3, &opts).unwrap();
        assert_eq!(p.sigma_scale, p.noise_multipliers[0].1);
        assert_eq!(p.clip_norms[0].1, 1.3);
    }

    #[test]
    fn scale_flags_small_noise() {
        let spec = PrivacySpec::new(
            vec![PrivacyGroup::new("a", 100, 1.0), PrivacyGroup::new("b", 100, 200.0)],
            DELTA,
        )
        .unwrap();
        let p = derive_scale(&spec, 0.1, 10, 1.0, &CalibrationOptions::default()).unwrap();
        assert_eq!(p.low_noise_groups, vec![GroupId::new("b")]);
    }

    #[test]
    fn combined_rejects_bad_weight() {
        let spec = three_groups();
        let opts = CalibrationOptions::default();
        assert!(derive_combined(&spec, 0.05, 100, 1.0, 1.5, &opts).is_err());
        assert!(derive_combined(&spec, 0.05, 100, 1.0, -0.1, &opts).is_err());
    }

    #[test]
    fn combined_zero_weight_equals_scale() {
        let spec = three_groups();
        let opts = CalibrationOptions::default();
        let c = derive_combined(&spec, 0.05, 100, 1.0, 0.0, &opts).unwrap();
        let s = derive_scale(&spec, 0.05, 100, 1.0, &opts).unwrap();
        assert_eq!(c.clip_norms, s.clip_norms);
        assert_eq!(c.noise_multipliers, s.noise_multipliers);
        assert_eq!(c.sigma_scale, s.sigma_scale);
        assert!(c.rates.iter().all(|(_, q)| *q == 0.05));
    }

    #[test]
    fn artifact_json_round_trip_and_identity() {
        let spec = three_groups();
        let opts = CalibrationOptions::default();
        let art = ParamArtifact::calibrate(&spec, Method::Scale, 0.0, 0.05, 100, 0.5, &opts)
            .unwrap();
        art.validate().unwrap();
        let json = serde_json::to_string(&art).unwrap();
        assert!(json.contains("\"method\":\"scale\""));
        assert!(!json.contains("weight"));
        let back: ParamArtifact = serde_json::from_str(&json).unwrap();
        assert_eq!(back, art);
        for (method, w) in [(Method::Sample, 1.0), (Method::Combined, 0.37)] {
            let a = ParamArtifact::calibrate(&spec, method, w, 0.05, 100, 0.5, &opts).unwrap();
            let back: ParamArtifact = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
            assert_eq!(back, a, "{method} artifact must survive JSON bit-exactly");
        }

        let mut broken = art.clone();
        broken.groups[1].clip *= 1.001;
        assert!(broken.validate().is_err());
    }
}
