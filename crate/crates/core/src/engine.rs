//! The IDP-SGD training loop.
//!
//! Each step Poisson-samples points with their group's rate, clips each
//! per-example gradient to the point's clip norm, adds one Gaussian draw of
//! standard deviation σ_shared·c to the sum, and charges every group's
//! ledger with its own `(q_p, σ_shared·c/c_p)`. Standard DP-SGD, Sample,
//! Scale and their combination only differ in the loaded parameters.

use std::collections::BTreeMap;
use std::io::Write;

use crate::accountant::{RdpOrderGrid, SgmParams, SpendLedger};
use crate::calibration::{ParamArtifact, NOISE_IDENTITY_TOLERANCE};
use crate::data::Dataset;
use crate::model::Model;
use crate::rng::{Stream, StreamRng};
use crate::{Error, GroupId, Result};

/// What the noised gradient sum is divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Divisor {
    /// `max(1, |L_t|)`, the realized batch size.
    #[default]
    Realized,
    /// The expected batch size `B`.
    Expected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub expected_batch: u64,
    pub steps: u64,
    pub base_clip: f64,
    pub seed: u64,
    pub checkpoint_stride: u64,
    pub divisor: Divisor,
}

impl TrainConfig {
    /// `B / N`.
    pub fn base_rate(&self, num_points: usize) -> f64 {
        self.expected_batch as f64 / num_points as f64
    }

    pub fn validate(&self, num_points: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.expected_batch == 0 || self.expected_batch as usize > num_points {
            return bad(format!(
                "expected batch {} must lie in [1, {num_points}]",
                self.expected_batch
            ));
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.base_clip > 0.0) || !self.base_clip.is_finite() {
            return bad(format!("clip norm {} must be positive", self.base_clip));
        }
        if self.checkpoint_stride == 0 {
            return bad("checkpoint stride must be at least 1".into());
        }
        Ok(())
    }
}

/// Per-point group, sample rate and clip norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PointAssignment {
    group_index: Vec<usize>,
    group_ids: Vec<GroupId>,
    rates: Vec<f64>,
    clips: Vec<f64>,
}

impl PointAssignment {
    /// Looks up every point's group in the artifact.
    pub fn new(dataset: &Dataset, artifact: &ParamArtifact) -> Result<Self> {
        let index: BTreeMap<&GroupId, usize> =
            artifact.groups.iter().enumerate().map(|(i, g)| (&g.id, i)).collect();
        let group_index = dataset
            .group_of()
            .iter()
            .map(|g| {
                index
                    .get(g)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("dataset group `{g}` missing from parameters")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PointAssignment {
            rates: group_index.iter().map(|&i| artifact.groups[i].q).collect(),
            clips: group_index.iter().map(|&i| artifact.groups[i].clip).collect(),
            group_ids: artifact.groups.iter().map(|g| g.id.clone()).collect(),
            group_index,
        })
    }

    /// Explicit per-point rates and clips, all in one group `all`.
    pub fn uniform_group(rates: Vec<f64>, clips: Vec<f64>) -> Result<Self> {
        if rates.len() != clips.len() {
            return Err(Error::Validation("rates and clips differ in length".into()));
        }
        if rates.iter().any(|q| !(0.0..=1.0).contains(q)) || clips.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Validation("rates must lie in [0, 1] and clips be positive".into()));
        }
        Ok(PointAssignment {
            group_index: vec![0; rates.len()],
            group_ids: vec![GroupId::new("all")],
            rates,
            clips,
        })
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn rate(&self, i: usize) -> f64 {
        self.rates[i]
    }

    pub fn clip(&self, i: usize) -> f64 {
        self.clips[i]
    }

    pub fn group(&self, i: usize) -> &GroupId {
        &self.group_ids[self.group_index[i]]
    }

    /// Sum of rates, i.e. the expected batch size.
    pub fn expected_batch(&self) -> f64 {
        self.rates.iter().sum()
    }
}

/// Indices included independently with their own rate, in ascending order.
/// Draws exactly one uniform per point.
pub fn poisson_sample(assignment: &PointAssignment, rng: &mut StreamRng) -> Vec<usize> {
    assignment
        .rates
        .iter()
        .enumerate()
        .filter_map(|(i, &q)| (rng.uniform() < q).then_some(i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("gradient contains a non-finite value")]
pub struct NonFiniteGradient;

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `g` in place to norm at most `clip`, returning the original norm.
pub fn clip_in_place(g: &mut [f64], clip: f64) -> Result<f64, NonFiniteGradient> {
    let norm = l2_norm(g);
    if !norm.is_finite() {
        return Err(NonFiniteGradient);
    }
    let scale = (norm / clip).max(1.0);
    if scale > 1.0 {
        for v in g.iter_mut() {
            *v /= scale;
        }
    }
    Ok(norm)
}

/// `g / max(1, ‖g‖₂ / clip)`.
pub fn clip_gradient(g: &[f64], clip: f64) -> Result<Vec<f64>, NonFiniteGradient> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, clip)?;
    Ok(out)
}

/// `(Σ clipped + z) / divisor` with `z ~ N(0, (σ·c)² I)`. The caller passes
/// the sum of clipped gradients taken in index order.
pub fn noise_and_aggregate(
    mut clipped_sum: Vec<f64>,
    divisor: f64,
    sigma_shared: f64,
    base_clip: f64,
    rng: &mut StreamRng,
) -> Vec<f64> {
    let std = sigma_shared * base_clip;
    let divisor = divisor.max(1.0);
    for v in clipped_sum.iter_mut() {
        let z = rng.standard_normal();
        *v = (*v + std * z) / divisor;
    }
    clipped_sum
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetric {
    pub step: u64,
    /// Mean loss over the sampled batch before the update; NaN for an empty
    /// batch.
    pub loss: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub steps: Vec<StepMetric>,
    pub final_accuracy: f64,
}

impl Metrics {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(b"step,loss,batch_size\n")?;
        for m in &self.steps {
            writeln!(out, "{},{},{}", m.step, m.loss, m.batch_size)?;
        }
        Ok(())
    }

    pub fn mean_batch_size(&self) -> f64 {
        let n = self.steps.len().max(1) as f64;
        self.steps.iter().map(|m| m.batch_size as f64).sum::<f64>() / n
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub ledger: SpendLedger,
    pub metrics: Metrics,
}

/// Checks that the artifact, config and dataset describe the same run.
pub fn check_consistency(
    dataset: &Dataset,
    artifact: &ParamArtifact,
    config: &TrainConfig,
) -> Result<()> {
    config.validate(dataset.len())?;
    artifact.validate().map_err(|e| Error::Config(e.to_string()))?;
    if artifact.steps != config.steps {
        return Err(Error::Config(format!(
            "parameters were calibrated for {} steps, config asks for {}",
            artifact.steps, config.steps
        )));
    }
    let q = config.base_rate(dataset.len());
    if (artifact.base_rate - q).abs() > 1e-12 * q {
        return Err(Error::Config(format!(
            "parameters use base rate {}, config implies {q}",
            artifact.base_rate
        )));
    }
    if (artifact.base_clip - config.base_clip).abs() > 1e-12 * config.base_clip {
        return Err(Error::Config(format!(
            "parameters use base clip {}, config has {}",
            artifact.base_clip, config.base_clip
        )));
    }
    let sizes = dataset.group_sizes();
    for g in &artifact.groups {
        let n = sizes.get(&g.id).copied().unwrap_or(0);
        if n != g.size {
            return Err(Error::Config(format!(
                "group `{}` has {n} points, parameters expect {}",
                g.id, g.size
            )));
        }
    }
    if let Some(g) = sizes.keys().find(|g| artifact.group(g).is_none()) {
        return Err(Error::Config(format!("dataset group `{g}` missing from parameters")));
    }
    Ok(())
}

/// Per-group `(q_p, σ_shared·c/c_p)` charged at every step.
pub fn ledger_charges(artifact: &ParamArtifact) -> Result<Vec<(GroupId, SgmParams)>> {
    artifact
        .groups
        .iter()
        .map(|g| {
            let sigma = artifact.effective_sigma(g);
            if (sigma - g.sigma).abs() > NOISE_IDENTITY_TOLERANCE * g.sigma {
                return Err(Error::Config(format!(
                    "group `{}`: effective noise {sigma} differs from calibrated {}",
                    g.id, g.sigma
                )));
            }
            Ok((g.id.clone(), SgmParams::new(g.q, sigma, 1)?))
        })
        .collect()
}

/// Runs exactly `config.steps` steps. `eval` (or the training set when
/// `None`) provides the final accuracy.
pub fn train(
    mut model: Model,
    dataset: &Dataset,
    assignment: &PointAssignment,
    artifact: &ParamArtifact,
    config: &TrainConfig,
    eval: Option<&Dataset>,
) -> Result<TrainOutcome> {
    check_consistency(dataset, artifact, config)?;
    if assignment.len() != dataset.len() {
        return Err(Error::Config("assignment does not cover the dataset".into()));
    }
    if dataset.dim() != model.architecture().input_dim
        || dataset.num_classes() > model.architecture().classes
    {
        return Err(Error::Config("model architecture does not fit the dataset".into()));
    }

    let charges = ledger_charges(artifact)?;
    let mut ledger = SpendLedger::new(
        artifact.groups.iter().map(|g| g.id.clone()),
        artifact.delta,
        RdpOrderGrid::default(),
        config.checkpoint_stride,
    )?;
    let mut sampling_rng = StreamRng::new(config.seed, Stream::Sampling);
    let mut noise_rng = StreamRng::new(config.seed, Stream::Noise);

    let p = model.num_params();
    let mut grad = vec![0.0; p];
    let mut metrics = Vec::with_capacity(config.steps as usize);

    for step in 1..=config.steps {
        let batch = poisson_sample(assignment, &mut sampling_rng);
        let mut sum = vec![0.0; p];
        let mut loss_total = 0.0;
        for &i in &batch {
            let loss = model.loss_and_gradient(dataset.row(i), dataset.label(i), &mut grad)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("non-finite loss on point {i}"),
                });
            }
            loss_total += loss;
            let clip = assignment.clip(i);
            clip_in_place(&mut grad, clip).map_err(|e| Error::Training {
                step,
                reason: format!("point {i}: {e}"),
            })?;
            debug_assert!(l2_norm(&grad) <= clip * (1.0 + 1e-9) + 1e-12);
            for (s, g) in sum.iter_mut().zip(&grad) {
                *s += g;
            }
        }

        let divisor = match config.divisor {
            Divisor::Realized => batch.len().max(1) as f64,
            Divisor::Expected => config.expected_batch as f64,
        };
        // Noise is drawn even for an empty batch so the stream stays aligned.
        let update = noise_and_aggregate(
            sum,
            divisor,
            artifact.sigma_shared,
            artifact.base_clip,
            &mut noise_rng,
        );
        if !batch.is_empty() {
            for (theta, u) in model.params_mut().iter_mut().zip(&update) {
                *theta -= config.learning_rate * u;
            }
            if model.params().iter().any(|t| !t.is_finite()) {
                return Err(Error::Training {
                    step,
                    reason: "parameters became non-finite".into(),
                });
            }
        }

        ledger.record_step(&charges)?;
        metrics.push(StepMetric {
            step,
            loss: if batch.is_empty() {
                f64::NAN
            } else {
                loss_total / batch.len() as f64
            },
            batch_size: batch.len(),
        });
    }
    ledger.ensure_checkpoint()?;

    let final_accuracy = model.accuracy(eval.unwrap_or(dataset));
    Ok(TrainOutcome {
        model,
        ledger,
        metrics: Metrics {
            steps: metrics,
            final_accuracy,
        },
    })
}

/// Ledger spend at the final step against each group's budget, with
/// tolerance `max(γ, 1% of ε_p)`.
pub fn exhaustion_report(
    ledger: &SpendLedger,
    artifact: &ParamArtifact,
    precision: f64,
) -> Result<Vec<(GroupId, f64, f64, bool)>> {
    ledger
        .current()?
        .into_iter()
        .map(|(id, conv)| {
            let g = artifact
                .group(&id)
                .ok_or_else(|| Error::UnknownGroup(id.to_string()))?;
            let tol = precision.max(0.01 * g.epsilon);
            let ok = (conv.epsilon - g.epsilon).abs() <= tol;
            Ok((id, conv.epsilon, g.epsilon, ok))
        })
        .collect()
}
