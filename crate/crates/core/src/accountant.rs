//! Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism (SGM).
//!
//! Per-step RDP is evaluated in closed form at integer orders, composed
//! additively over steps and converted to (ε, δ)-DP by minimizing over the
//! order grid. [`SpendLedger`] keeps one cumulative curve per privacy group,
//! since each group behaves like its own SGM running alongside the others.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::{Error, GroupId, Result};

/// Default orders: every integer in `2..=256`.
pub const DEFAULT_MAX_ORDER: u32 = 256;

const LN_FACTORIAL_TABLE_LEN: usize = 1025;

static LN_FACTORIAL: LazyLock<Vec<f64>> = LazyLock::new(|| {
    let mut table = Vec::with_capacity(LN_FACTORIAL_TABLE_LEN);
    let mut acc = 0.0_f64;
    table.push(0.0);
    for n in 1..LN_FACTORIAL_TABLE_LEN {
        acc += (n as f64).ln();
        table.push(acc);
    }
    table
});

fn ln_factorial(n: u32) -> f64 {
    match LN_FACTORIAL.get(n as usize) {
        Some(v) => *v,
        None => libm::lgamma(n as f64 + 1.0),
    }
}

fn ln_binomial(n: u32, k: u32) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// `ln(exp(y) - 1)` for `y > 0`.
fn ln_expm1(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// `ln(1 + exp(x))`.
fn ln1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

fn integer_order(alpha: f64) -> Result<u32> {
    if !alpha.is_finite() || alpha.fract() != 0.0 || alpha < 2.0 || alpha > u32::MAX as f64 {
        return Err(Error::UnsupportedOrder(alpha));
    }
    Ok(alpha as u32)
}

fn check_rate(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("sample rate {q} outside [0, 1]")));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("noise multiplier {sigma} must be positive and finite")));
    }
    Ok(())
}

/// Ascending list of Renyi orders, all `> 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RdpOrderGrid {
    orders: Vec<f64>,
}

impl RdpOrderGrid {
    pub fn new(orders: Vec<f64>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::Domain("order grid is empty".into()));
        }
        if let Some(bad) = orders.iter().find(|a| !(**a > 1.0) || !a.is_finite()) {
            return Err(Error::Domain(format!("order {bad} is not in (1, inf)")));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("orders must be strictly ascending".into()));
        }
        Ok(RdpOrderGrid { orders })
    }

    /// Integer orders `lo..=hi`.
    pub fn integers(lo: u32, hi: u32) -> Result<Self> {
        if lo < 2 || hi < lo {
            return Err(Error::Domain(format!("bad integer order range {lo}..={hi}")));
        }
        Self::new((lo..=hi).map(f64::from).collect())
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }
}

impl Default for RdpOrderGrid {
    fn default() -> Self {
        RdpOrderGrid {
            orders: (2..=DEFAULT_MAX_ORDER).map(f64::from).collect(),
        }
    }
}

impl TryFrom<Vec<f64>> for RdpOrderGrid {
    type Error = Error;

    fn try_from(orders: Vec<f64>) -> Result<Self> {
        Self::new(orders)
    }
}

impl From<RdpOrderGrid> for Vec<f64> {
    fn from(grid: RdpOrderGrid) -> Self {
        grid.orders
    }
}

/// RDP values ε̄(α) over a grid of orders.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpCurve {
    grid: RdpOrderGrid,
    values: Vec<f64>,
}

impl RdpCurve {
    pub fn new(grid: RdpOrderGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Domain(format!(
                "curve has {} values for {} orders",
                values.len(),
                grid.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("RDP value {bad} must be finite and non-negative")));
        }
        Ok(RdpCurve { grid, values })
    }

    pub fn zeros(grid: RdpOrderGrid) -> Self {
        let values = vec![0.0; grid.len()];
        RdpCurve { grid, values }
    }

    pub fn grid(&self) -> &RdpOrderGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Point-wise sum; both curves must share the grid.
    pub fn add(&mut self, other: &RdpCurve) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::Domain("cannot add curves over different order grids".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }
}

/// Parameters of one subsampled Gaussian mechanism run for `steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgmParams {
    pub sample_rate: f64,
    pub noise_multiplier: f64,
    pub steps: u64,
}

impl SgmParams {
    pub fn new(sample_rate: f64, noise_multiplier: f64, steps: u64) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate <= 1.0) {
            return Err(Error::Domain(format!("sample rate {sample_rate} outside (0, 1]")));
        }
        check_sigma(noise_multiplier)?;
        if steps == 0 {
            return Err(Error::Domain("steps must be at least 1".into()));
        }
        Ok(SgmParams {
            sample_rate,
            noise_multiplier,
            steps,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    pub epsilon: f64,
    pub delta: f64,
}

/// Result of an RDP to (ε, δ) conversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conversion {
    pub epsilon: f64,
    pub best_order: f64,
}

/// Per-order pieces of the closed form that depend only on `(q, σ)`.
struct SgmTerms {
    ln_q: f64,
    ln_1mq: f64,
    /// `ln(exp((k² - k) / 2σ²) - 1)` indexed by `k`, valid for `k >= 2`.
    ln_em1: Vec<f64>,
}

impl SgmTerms {
    fn new(q: f64, sigma: f64, max_order: u32) -> Self {
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut ln_em1 = vec![f64::NEG_INFINITY; max_order as usize + 1];
        for k in 2..=max_order {
            let kf = k as f64;
            ln_em1[k as usize] = ln_expm1((kf * kf - kf) * inv);
        }
        SgmTerms {
            ln_q: q.ln(),
            ln_1mq: (-q).ln_1p(),
            ln_em1,
        }
    }

    /// ε̄(α) = ln(1 + Σ_{k≥2} C(α,k)(1-q)^{α-k} q^k (e^{(k²-k)/2σ²} - 1)) / (α - 1).
    ///
    /// The k = 0 and k = 1 terms of the binomial expansion sum to one
    /// together with the "-1" parts of the remaining terms, so the `ln1p`
    /// form keeps full relative precision when the divergence is tiny.
    fn rdp(&self, alpha: u32, scratch: &mut Vec<f64>) -> f64 {
        scratch.clear();
        for k in 2..=alpha {
            let kf = k as f64;
            scratch.push(
                ln_binomial(alpha, k)
                    + (alpha - k) as f64 * self.ln_1mq
                    + kf * self.ln_q
                    + self.ln_em1[k as usize],
            );
        }
        ln1p_exp(log_sum_exp(scratch)) / (alpha as f64 - 1.0)
    }
}

fn sgm_rdp_unchecked(q: f64, sigma: f64, alpha: u32) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if q == 1.0 {
        return alpha as f64 / (2.0 * sigma * sigma);
    }
    let terms = SgmTerms::new(q, sigma, alpha);
    terms.rdp(alpha, &mut Vec::with_capacity(alpha as usize))
}

/// Per-step RDP of the SGM with sample rate `q` and noise multiplier `sigma`
/// at integer order `alpha`, evaluated in log space.
pub fn rdp_sgm_step(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    check_rate(q)?;
    check_sigma(sigma)?;
    let order = integer_order(alpha)?;
    let value = sgm_rdp_unchecked(q, sigma, order);
    if !value.is_finite() {
        return Err(Error::Domain(format!(
            "RDP overflow at q={q}, sigma={sigma}, alpha={alpha}"
        )));
    }
    Ok(value.max(0.0))
}

/// Fast-mode bound `I · 2q²α / σ²`. Looser than [`rdp_sgm_step`]; not used by
/// calibration or ledgers.
pub fn rdp_sgm_approx(q: f64, sigma: f64, steps: u64, alpha: f64) -> Result<f64> {
    check_rate(q)?;
    check_sigma(sigma)?;
    integer_order(alpha)?;
    Ok(steps as f64 * 2.0 * q * q * alpha / (sigma * sigma))
}

/// Per-step SGM curve over an integer order grid.
pub fn sgm_curve(q: f64, sigma: f64, grid: &RdpOrderGrid) -> Result<RdpCurve> {
    check_rate(q)?;
    check_sigma(sigma)?;
    let orders = grid
        .orders()
        .iter()
        .map(|&a| integer_order(a))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = if q == 0.0 || q == 1.0 {
        orders.iter().map(|&a| sgm_rdp_unchecked(q, sigma, a)).collect()
    } else {
        let max_order = *orders.last().expect("grid is non-empty");
        let terms = SgmTerms::new(q, sigma, max_order);
        let mut scratch = Vec::with_capacity(max_order as usize);
        orders.iter().map(|&a| terms.rdp(a, &mut scratch).max(0.0)).collect()
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("RDP overflow at q={q}, sigma={sigma}")));
    }
    RdpCurve::new(grid.clone(), values)
}

/// Composition over `steps` identical steps: RDP adds up linearly.
pub fn compose(curve: &RdpCurve, steps: u64) -> RdpCurve {
    RdpCurve {
        grid: curve.grid.clone(),
        values: curve.values.iter().map(|v| v * steps as f64).collect(),
    }
}

fn conversion_term(rdp: f64, alpha: f64, ln_delta: f64) -> f64 {
    rdp + ((alpha - 1.0) / alpha).ln() - (ln_delta + alpha.ln()) / (alpha - 1.0)
}

/// Converts an RDP curve to (ε, δ)-DP, minimizing over the grid. The result
/// is clamped at zero.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<Conversion> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta {delta} outside (0, 1)")));
    }
    if curve.grid.is_empty() {
        return Err(Error::Domain("empty order grid".into()));
    }
    let ln_delta = delta.ln();
    let mut best = Conversion {
        epsilon: f64::INFINITY,
        best_order: curve.grid.orders[0],
    };
    for (&alpha, &rdp) in curve.grid.orders.iter().zip(&curve.values) {
        let eps = conversion_term(rdp, alpha, ln_delta);
        if eps < best.epsilon {
            best = Conversion {
                epsilon: eps,
                best_order: alpha,
            };
        }
    }
    best.epsilon = best.epsilon.max(0.0);
    Ok(best)
}

/// ε of `params.steps` composed SGM steps at the given δ.
pub fn epsilon_of(params: &SgmParams, delta: f64, grid: &RdpOrderGrid) -> Result<f64> {
    let step = sgm_curve(params.sample_rate, params.noise_multiplier, grid)?;
    Ok(rdp_to_dp(&compose(&step, params.steps), delta)?.epsilon)
}

/// Same quantity as [`epsilon_of`] without the `(0, 1]` restriction on the
/// sample rate; calibration searches probe `q = 0` boundaries.
pub(crate) fn epsilon_raw(
    q: f64,
    sigma: f64,
    steps: u64,
    delta: f64,
    grid: &RdpOrderGrid,
) -> Result<f64> {
    let step = sgm_curve(q, sigma, grid)?;
    Ok(rdp_to_dp(&compose(&step, steps), delta)?.epsilon)
}

/// Any IDP guarantee over groups implies standard DP at the largest budget.
pub fn uniform_guarantee(epsilons: &[f64], delta: f64) -> Result<DpGuarantee> {
    if epsilons.is_empty() {
        return Err(Error::Domain("no per-group epsilons given".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta {delta} outside (0, 1)")));
    }
    let epsilon = epsilons.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(DpGuarantee { epsilon, delta })
}

/// One row of a ledger: group spend at a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub step: u64,
    pub group_id: GroupId,
    pub epsilon_spent: f64,
    pub best_alpha: f64,
}

struct GroupTrack {
    id: GroupId,
    cumulative: RdpCurve,
    last_params: Option<(u64, u64)>,
    last_step_curve: Option<RdpCurve>,
}

/// Per-group cumulative privacy spend over a training run.
pub struct SpendLedger {
    grid: RdpOrderGrid,
    delta: f64,
    stride: u64,
    steps: u64,
    groups: Vec<GroupTrack>,
    index: BTreeMap<GroupId, usize>,
    entries: Vec<LedgerEntry>,
}

impl SpendLedger {
    /// `stride` is the checkpoint cadence in steps (1 = every step).
    pub fn new(
        group_ids: impl IntoIterator<Item = GroupId>,
        delta: f64,
        grid: RdpOrderGrid,
        stride: u64,
    ) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Domain(format!("delta {delta} outside (0, 1)")));
        }
        if stride == 0 {
            return Err(Error::Domain("checkpoint stride must be at least 1".into()));
        }
        let mut groups = Vec::new();
        let mut index = BTreeMap::new();
        for id in group_ids {
            if index.insert(id.clone(), groups.len()).is_some() {
                return Err(Error::Validation(format!("duplicate group id `{id}`")));
            }
            groups.push(GroupTrack {
                id,
                cumulative: RdpCurve::zeros(grid.clone()),
                last_params: None,
                last_step_curve: None,
            });
        }
        if groups.is_empty() {
            return Err(Error::Domain("ledger needs at least one group".into()));
        }
        Ok(SpendLedger {
            grid,
            delta,
            stride,
            steps: 0,
            groups,
            index,
            entries: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn group_ids(&self) -> impl Iterator<Item = &GroupId> {
        self.groups.iter().map(|g| &g.id)
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn cumulative(&self, group: &GroupId) -> Result<&RdpCurve> {
        let idx = self
            .index
            .get(group)
            .ok_or_else(|| Error::UnknownGroup(group.to_string()))?;
        Ok(&self.groups[*idx].cumulative)
    }

    /// Charges one step to every group. Each group must appear exactly once
    /// with `steps == 1`.
    pub fn record_step(&mut self, per_group: &[(GroupId, SgmParams)]) -> Result<()> {
        let mut seen = vec![false; self.groups.len()];
        for (id, params) in per_group {
            let idx = *self
                .index
                .get(id)
                .ok_or_else(|| Error::UnknownGroup(id.to_string()))?;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::Validation(format!("group `{id}` charged twice in one step")));
            }
            if params.steps != 1 {
                return Err(Error::Domain(format!(
                    "ledger steps are recorded one at a time, got steps={}",
                    params.steps
                )));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!(
                "group `{}` missing from step charge",
                self.groups[missing].id
            )));
        }

        for (id, params) in per_group {
            let track = &mut self.groups[self.index[id]];
            let key = (params.sample_rate.to_bits(), params.noise_multiplier.to_bits());
            if track.last_params != Some(key) {
                track.last_step_curve =
                    Some(sgm_curve(params.sample_rate, params.noise_multiplier, &self.grid)?);
                track.last_params = Some(key);
            }
            let step_curve = track.last_step_curve.as_ref().expect("cached above");
            track.cumulative.add(step_curve)?;
        }
        self.steps += 1;
        if self.steps.is_multiple_of(self.stride) {
            self.push_checkpoint()?;
        }
        Ok(())
    }

    /// Adds a checkpoint at the current step unless one already exists.
    pub fn ensure_checkpoint(&mut self) -> Result<()> {
        if self.steps == 0 || self.entries.last().map(|e| e.step) == Some(self.steps) {
            return Ok(());
        }
        self.push_checkpoint()
    }

    fn push_checkpoint(&mut self) -> Result<()> {
        for track in &self.groups {
            let conv = rdp_to_dp(&track.cumulative, self.delta)?;
            self.entries.push(LedgerEntry {
                step: self.steps,
                group_id: track.id.clone(),
                epsilon_spent: conv.epsilon,
                best_alpha: conv.best_order,
            });
        }
        Ok(())
    }

    /// Current converted spend per group, in ledger order.
    pub fn current(&self) -> Result<Vec<(GroupId, Conversion)>> {
        self.groups
            .iter()
            .map(|t| Ok((t.id.clone(), rdp_to_dp(&t.cumulative, self.delta)?)))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_ledger_csv(&self.entries, out)
    }
}

/// Formats `x` with six significant digits, trailing zeros kept.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.5}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding can carry into a new digit (9.999995 -> 10.00000).
    let rounded: f64 = s.parse().unwrap_or(x);
    if rounded != 0.0 && (rounded.abs().log10().floor() as i32) > magnitude {
        let decimals = (4 - magnitude).max(0) as usize;
        return format!("{x:.decimals$}");
    }
    s
}

pub const LEDGER_HEADER: &str = "step,group_id,epsilon_spent,best_alpha";

pub fn write_ledger_csv<W: Write>(entries: &[LedgerEntry], mut out: W) -> Result<()> {
    out.write_all(LEDGER_HEADER.as_bytes())?;
    out.write_all(b"\n")?;
    for e in entries {
        writeln!(
            out,
            "{},{},{},{}",
            e.step,
            e.group_id,
            format_sig6(e.epsilon_spent),
            e.best_alpha
        )?;
    }
    Ok(())
}

/// Parses a ledger CSV; errors carry 1-based line numbers.
pub fn read_ledger_csv<R: BufRead>(input: R) -> Result<Vec<LedgerEntry>> {
    let mut lines = input.lines();
    match lines.next() {
        Some(header) => {
            let header = header?;
            if header.trim_end_matches('\r') != LEDGER_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{LEDGER_HEADER}`, got `{header}`"),
                });
            }
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty ledger file".into(),
            })
        }
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i as u64 + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let step = fields[0]
            .parse::<u64>()
            .map_err(|e| bad(format!("bad step `{}`: {e}", fields[0])))?;
        let epsilon_spent = fields[2]
            .parse::<f64>()
            .map_err(|e| bad(format!("bad epsilon `{}`: {e}", fields[2])))?;
        let best_alpha = fields[3]
            .parse::<f64>()
            .map_err(|e| bad(format!("bad order `{}`: {e}", fields[3])))?;
        if fields[1].is_empty() {
            return Err(bad("empty group id".into()));
        }
        if !epsilon_spent.is_finite() || epsilon_spent < 0.0 {
            return Err(bad(format!("epsilon {epsilon_spent} must be finite and >= 0")));
        }
        entries.push(LedgerEntry {
            step,
            group_id: GroupId::new(fields[1]),
            epsilon_spent,
            best_alpha,
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DELTA: f64 = 1e-5;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn zero_rate_is_free() {
        assert_eq!(rdp_sgm_step(0.0, 1.0, 2.0).unwrap(), 0.0);
        assert_eq!(rdp_sgm_step(0.0, 0.3, 256.0).unwrap(), 0.0);
    }

    #[test]
    fn full_rate_is_plain_gaussian() {
        assert!((rdp_sgm_step(1.0, 2.0, 8.0).unwrap() - 1.0).abs() < 1e-12);
        for &(s, a) in &[(0.7, 3.0), (1.3, 64.0), (5.0, 256.0)] {
            let v = rdp_sgm_step(1.0, s, a).unwrap();
            assert!(rel(v, a / (2.0 * s * s)) < 1e-12);
        }
    }

    #[test]
    fn rate_just_below_one_approaches_gaussian() {
        let v = rdp_sgm_step(1.0 - 1e-12, 2.0, 8.0).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn order_two_matches_known_closed_form() {
        // At α = 2 the sum has the single term C(2,2) q² (e^{1/σ²} - 1).
        let (q, s) = (0.03, 1.1);
        let expected = (q * q * (1.0_f64 / (s * s)).exp_m1()).ln_1p();
        assert!(rel(rdp_sgm_step(q, s, 2.0).unwrap(), expected) < 1e-13);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(rdp_sgm_step(0.1, 1.0, 2.5), Err(Error::UnsupportedOrder(_))));
        assert!(matches!(rdp_sgm_step(0.1, 1.0, 1.0), Err(Error::UnsupportedOrder(_))));
        assert!(matches!(rdp_sgm_step(0.1, 0.0, 2.0), Err(Error::Domain(_))));
        assert!(matches!(rdp_sgm_step(0.1, -1.0, 2.0), Err(Error::Domain(_))));
        assert!(matches!(rdp_sgm_step(1.5, 1.0, 2.0), Err(Error::Domain(_))));
        assert!(matches!(rdp_sgm_approx(0.1, 0.0, 3, 2.0), Err(Error::Domain(_))));
        assert!(matches!(rdp_sgm_approx(0.1, 1.0, 3, 2.5), Err(Error::UnsupportedOrder(_))));
    }

    #[test]
    fn large_order_small_sigma_does_not_overflow() {
        let v = rdp_sgm_step(0.5, 0.3, 256.0).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn approx_bound_examples() {
        assert!((rdp_sgm_approx(0.01, 1.0, 100, 2.0).unwrap() - 0.04).abs() < 1e-15);
        assert_eq!(rdp_sgm_approx(0.0, 1.0, 10, 4.0).unwrap(), 0.0);
        let v = rdp_sgm_approx(0.02, 3.29346, 1465, 8.0).unwrap();
        let by_hand = 1465.0 * 2.0 * 0.0004 * 8.0 / (3.29346 * 3.29346);
        assert!(rel(v, by_hand) < 1e-12);
        assert!((v - 0.8641).abs() < 1e-3);
    }

    #[test]
    fn compose_scales_linearly() {
        let grid = RdpOrderGrid::integers(2, 6).unwrap();
        let zeros = RdpCurve::zeros(grid.clone());
        assert!(compose(&zeros, 1000).values().iter().all(|v| *v == 0.0));

        let curve = RdpCurve::new(grid, vec![0.1, 0.2, 0.001, 0.4, 0.5]).unwrap();
        assert_eq!(compose(&curve, 1), curve);
        assert!((compose(&curve, 2146).values()[2] - 2.146).abs() < 1e-12);
    }

    #[test]
    fn conversion_single_order() {
        let grid = RdpOrderGrid::new(vec![2.0]).unwrap();
        let curve = RdpCurve::new(grid, vec![1.0]).unwrap();
        let conv = rdp_to_dp(&curve, DELTA).unwrap();
        let expected = 1.0 + 0.5f64.ln() - (DELTA.ln() + 2.0f64.ln());
        assert!((conv.epsilon - expected).abs() < 1e-12);
        assert!((conv.epsilon - 11.1266).abs() < 1e-4);
        assert_eq!(conv.best_order, 2.0);
    }

    #[test]
    fn conversion_of_zero_curve_uses_largest_order() {
        let conv = rdp_to_dp(&RdpCurve::zeros(RdpOrderGrid::default()), DELTA).unwrap();
        let scan = (2..=256)
            .map(|a| {
                let a = a as f64;
                ((a - 1.0) / a).ln() - (DELTA.ln() + a.ln()) / (a - 1.0)
            })
            .fold(f64::INFINITY, f64::min)
            .max(0.0);
        assert!((conv.epsilon - scan).abs() < 1e-14);
        assert_eq!(conv.best_order, 256.0);
    }

    #[test]
    fn conversion_rejects_bad_delta() {
        let curve = RdpCurve::zeros(RdpOrderGrid::default());
        assert!(rdp_to_dp(&curve, 0.0).is_err());
        assert!(rdp_to_dp(&curve, 1.0).is_err());
    }

    #[test]
    fn grid_and_curve_validation() {
        assert!(RdpOrderGrid::new(vec![]).is_err());
        assert!(RdpOrderGrid::new(vec![1.0, 2.0]).is_err());
        assert!(RdpOrderGrid::new(vec![3.0, 2.0]).is_err());
        assert!(RdpOrderGrid::new(vec![2.0, 2.0]).is_err());
        let grid = RdpOrderGrid::integers(2, 3).unwrap();
        assert!(RdpCurve::new(grid.clone(), vec![0.0]).is_err());
        assert!(RdpCurve::new(grid.clone(), vec![0.0, -1.0]).is_err());
        assert!(RdpCurve::new(grid, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn sgm_params_validation() {
        assert!(SgmParams::new(0.0, 1.0, 1).is_err());
        assert!(SgmParams::new(0.1, 0.0, 1).is_err());
        assert!(SgmParams::new(0.1, 1.0, 0).is_err());
        assert!(SgmParams::new(1.0, 1.0, 1).is_ok());
    }

    #[test]
    fn uniform_guarantee_is_max() {
        let g = uniform_guarantee(&[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert_eq!((g.epsilon, g.delta), (3.0, 1e-5));
        assert_eq!(uniform_guarantee(&[0.3], 1e-5).unwrap().epsilon, 0.3);
        let g = uniform_guarantee(&[2.0, 2.0, 2.0], 1e-6).unwrap();
        assert_eq!((g.epsilon, g.delta), (2.0, 1e-6));
        assert!(uniform_guarantee(&[], 1e-5).is_err());
    }

    fn ids(names: &[&str]) -> Vec<GroupId> {
        names.iter().map(|n| GroupId::new(*n)).collect()
    }

    #[test]
    fn ledger_matches_epsilon_of() {
        let grid = RdpOrderGrid::default();
        let mut ledger = SpendLedger::new(ids(&["a"]), DELTA, grid.clone(), 1).unwrap();
        let step = SgmParams::new(0.02, 1.2, 1).unwrap();
        for _ in 0..50 {
            ledger.record_step(&[(GroupId::new("a"), step)]).unwrap();
        }
        let direct = epsilon_of(&SgmParams { steps: 50, ..step }, DELTA, &grid).unwrap();
        let last = ledger.entries().last().unwrap();
        assert_eq!(last.step, 50);
        assert!(rel(last.epsilon_spent, direct) < 1e-12);
    }

    #[test]
    fn empty_ledger_is_zero_curve() {
        let grid = RdpOrderGrid::default();
        let ledger = SpendLedger::new(ids(&["a", "b"]), DELTA, grid.clone(), 1).unwrap();
        let zero = rdp_to_dp(&RdpCurve::zeros(grid), DELTA).unwrap();
        for (_, conv) in ledger.current().unwrap() {
            assert_eq!(conv, zero);
        }
    }

    #[test]
    fn ledger_rejects_unknown_and_missing_groups() {
        let grid = RdpOrderGrid::default();
        let mut ledger = SpendLedger::new(ids(&["a", "b"]), DELTA, grid, 1).unwrap();
        let p = SgmParams::new(0.01, 1.0, 1).unwrap();
        assert!(matches!(
            ledger.record_step(&[(GroupId::new("zzz"), p)]),
            Err(Error::UnknownGroup(_))
        ));
        assert!(ledger.record_step(&[(GroupId::new("a"), p)]).is_err());
        assert!(ledger
            .record_step(&[(GroupId::new("a"), p), (GroupId::new("a"), p)])
            .is_err());
        assert_eq!(ledger.steps(), 0);
    }

    #[test]
    fn ledger_stride_and_final_checkpoint() {
        let grid = RdpOrderGrid::integers(2, 32).unwrap();
        let mut ledger = SpendLedger::new(ids(&["a"]), DELTA, grid, 4).unwrap();
        let p = SgmParams::new(0.05, 1.0, 1).unwrap();
        for _ in 0..10 {
            ledger.record_step(&[(GroupId::new("a"), p)]).unwrap();
        }
        ledger.ensure_checkpoint().unwrap();
        ledger.ensure_checkpoint().unwrap();
        let steps: Vec<u64> = ledger.entries().iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![4, 8, 10]);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(1.0), "1.00000");
        assert_eq!(format_sig6(0.9999504), "0.999950");
        assert_eq!(format_sig6(2.9999999), "3.00000");
        assert_eq!(format_sig6(9.9999996), "10.0000");
        assert_eq!(format_sig6(123.456789), "123.457");
        assert_eq!(format_sig6(0.0), "0.00000");
        assert_eq!(format_sig6(0.0195123456), "0.0195123");
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let grid = RdpOrderGrid::default();
        let mut ledger = SpendLedger::new(ids(&["lo", "hi"]), DELTA, grid, 1).unwrap();
        for _ in 0..3 {
            ledger
                .record_step(&[
                    (GroupId::new("lo"), SgmParams::new(0.01, 1.0, 1).unwrap()),
                    (GroupId::new("hi"), SgmParams::new(0.03, 1.0, 1).unwrap()),
                ])
                .unwrap();
        }
        let mut buf = Vec::new();
        ledger.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,group_id,epsilon_spent,best_alpha\n"));
        assert!(!text.contains('\r'));
        let parsed = read_ledger_csv(text.as_bytes()).unwrap();
        assert_eq!(parsed.len(), 6);
        for (p, e) in parsed.iter().zip(ledger.entries()) {
            assert_eq!(p.step, e.step);
            assert_eq!(p.group_id, e.group_id);
            assert!(rel(p.epsilon_spent, e.epsilon_spent) < 1e-5);
        }

        let broken = "step,group_id,epsilon_spent,best_alpha\n1,a,0.5,12\n2,a,zz,12\n";
        match read_ledger_csv(broken.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            read_ledger_csv("nope\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
