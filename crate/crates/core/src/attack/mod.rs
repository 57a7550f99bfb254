//! The attack engine.
//!
//! An attack picks a tap layer and drives the encoder output at that layer
//! (every operation up to and including the tap) toward a fixed latent
//! target by plain gradient descent on the input:
//!
//! - type I: the target is the encoding of a reference sample `x̄` and the
//!   attack starts from uniform noise, so a successful run ends far from `x̄`
//!   yet classified like it;
//! - type II: the target is the encoding of a donor sample of another class
//!   and the attack starts from `x̄`, so a successful run ends close to `x̄`
//!   yet classified like the donor.
//!
//! The tap loss is the mean squared error between encodings. An optional
//! oracle term (mean member cross-entropy, weighted by a decaying `λ`) can be
//! added; the default protocol leaves it off.

mod runner;
mod schedule;

pub use runner::{run_attack, run_attacks, AttackResult, TraceRecord};
pub use schedule::{LambdaSchedule, StepSchedule};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{Network, NetworkError, TapPoint};
use crate::tensor::{ops, Graph, Tensor, TensorError};
use crate::training::{Oracle, OracleError};

/// Minimum confidence for a run to count as successful.
pub const SUCCESS_CONFIDENCE: f64 = 0.9;
/// A type I result must keep at least this fraction of the initial noise's
/// distance from the reference.
pub const NOISE_RETENTION: f64 = 0.5;
/// Default trace interval.
pub const DEFAULT_LOG_EVERY: usize = 100;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("lambda schedule is active but no oracle was supplied")]
    OracleRequired,
    #[error("donor is classified as {class}, the same class as the source")]
    SameClass { class: usize },
    #[error("loss diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        partial: Box<AttackResult>,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackKind {
    #[serde(rename = "type1")]
    TypeI,
    #[serde(rename = "type2")]
    TypeII,
}

impl AttackKind {
    pub fn label(self) -> &'static str {
        match self {
            AttackKind::TypeI => "type1",
            AttackKind::TypeII => "type2",
        }
    }
}

/// A latent-space target for a type II attack.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTarget {
    /// Encoder output the attack drives toward.
    pub latent: Tensor,
    /// Class the latent belongs to (the donor's predicted class).
    pub class: usize,
    /// The donor sample, when the latent came from one.
    pub donor: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackTarget {
    TypeI {
        reference: Tensor,
        /// Label `ŷ` the oracle term pushes toward; required only when the
        /// lambda schedule is active.
        oracle_label: Option<usize>,
    },
    TypeII {
        source: Tensor,
        target: LatentTarget,
        /// Class the oracle term preserves; defaults to the oracle's own
        /// prediction for `source`.
        source_label: Option<usize>,
    },
}

impl AttackTarget {
    /// The original sample `x̄` distances are measured against.
    pub fn reference(&self) -> &Tensor {
        match self {
            AttackTarget::TypeI { reference, .. } => reference,
            AttackTarget::TypeII { source, .. } => source,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub tap: TapPoint,
    pub target: AttackTarget,
    pub steps: StepSchedule,
    pub lambda: LambdaSchedule,
    /// Project onto `[0, 1]` after every step.
    pub clamp: bool,
    /// Seeds the type I noise initialisation.
    pub seed: u64,
    pub log_every: usize,
}

impl AttackConfig {
    /// Oracle-free defaults: the MNIST step schedule, clamping on, trace
    /// every 100 iterations.
    pub fn new(tap: TapPoint, target: AttackTarget) -> Self {
        Self {
            tap,
            target,
            steps: StepSchedule::mnist(),
            lambda: LambdaSchedule::Off,
            clamp: true,
            seed: 0,
            log_every: DEFAULT_LOG_EVERY,
        }
    }

    pub fn kind(&self) -> AttackKind {
        match self.target {
            AttackTarget::TypeI { .. } => AttackKind::TypeI,
            AttackTarget::TypeII { .. } => AttackKind::TypeII,
        }
    }

    pub fn iterations(&self) -> usize {
        self.steps.total_iterations()
    }

    pub fn with_steps(mut self, steps: StepSchedule) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_lambda(mut self, lambda: LambdaSchedule) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_log_every(mut self, every: usize) -> Self {
        self.log_every = every;
        self
    }

    pub fn with_clamp(mut self, clamp: bool) -> Self {
        self.clamp = clamp;
        self
    }

    pub(crate) fn validate(&self, net: &Network) -> Result<(), AttackError> {
        net.validate_tap(self.tap)?;
        if self.log_every == 0 {
            return Err(AttackError::Config("log_every must be >= 1".into()));
        }
        let input = net.spec().input_shape();
        if self.target.reference().shape() != input {
            return Err(AttackError::Config(format!(
                "reference shape {:?} does not match network input {input:?}",
                self.target.reference().shape()
            )));
        }
        if let AttackTarget::TypeII { target, .. } = &self.target {
            let tap_shape = net.spec().output_shape(self.tap.layer_index);
            if target.latent.shape() != tap_shape {
                return Err(AttackError::Config(format!(
                    "latent target shape {:?} does not match tap output {tap_shape:?}",
                    target.latent.shape()
                )));
            }
        }
        if let AttackTarget::TypeI {
            oracle_label: None, ..
        } = self.target
        {
            if self.lambda.is_active() {
                return Err(AttackError::Config(
                    "type I oracle term needs a target label".into(),
                ));
            }
        }
        Ok(())
    }
}

/// `J₁(f_enc(x), f_enc(x̄))`: mean squared error between encodings.
pub fn slom_loss_type1(
    net: &Network,
    tap: TapPoint,
    x: &Tensor,
    reference: &Tensor,
) -> Result<f64, AttackError> {
    let a = net.encode(x, tap)?;
    let b = net.encode(reference, tap)?;
    Ok(ops::mse(&a, &b)?)
}

/// `J₁(f_enc(x), P̂)` for a fixed latent target.
pub fn slom_loss_type2(
    net: &Network,
    tap: TapPoint,
    x: &Tensor,
    latent: &Tensor,
) -> Result<f64, AttackError> {
    let a = net.encode(x, tap)?;
    Ok(ops::mse(&a, latent)?)
}

/// Value and input gradient of the tap loss against a fixed latent.
pub fn tap_loss_gradient(
    net: &Network,
    tap: TapPoint,
    x: &Tensor,
    latent: &Tensor,
) -> Result<(f64, Vec<f64>), AttackError> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let enc = net.record(&mut g, xv, tap.layer_index, false)?.last();
    let target = g.leaf_ref(latent, false);
    let loss = g.mse(enc, target)?;
    g.backward(loss)?;
    let value = g.value(loss).data()[0];
    Ok((value, g.take_grad(xv).expect("input requires grad")))
}

/// `P̂ = f_enc(donor)` after checking the donor is classified differently
/// from the source.
pub fn make_latent_target(
    net: &Network,
    tap: TapPoint,
    donor: &Tensor,
    source: &Tensor,
) -> Result<LatentTarget, AttackError> {
    let (donor_class, _) = net.predict(donor)?;
    let (source_class, _) = net.predict(source)?;
    if donor_class == source_class {
        return Err(AttackError::SameClass { class: donor_class });
    }
    Ok(LatentTarget {
        latent: net.encode(donor, tap)?,
        class: donor_class,
        donor: Some(donor.clone()),
    })
}

/// One evaluation of the full objective.
#[derive(Debug, Clone)]
pub(crate) struct Evaluation {
    pub total: f64,
    pub tap_loss: f64,
    pub oracle_loss: Option<f64>,
    pub lambda: f64,
    pub encoded: Tensor,
    pub grad: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn evaluate_objective(
    net: &Network,
    oracle: Option<&Oracle>,
    tap: TapPoint,
    latent: &Tensor,
    oracle_label: Option<usize>,
    lambda: f64,
    x: &Tensor,
    want_grad: bool,
) -> Result<Evaluation, AttackError> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), want_grad);
    let enc = net.record(&mut g, xv, tap.layer_index, false)?.last();
    let target = g.leaf_ref(latent, false);
    let tap_loss = g.mse(enc, target)?;
    let mut total = tap_loss;
    let mut oracle_loss = None;
    if lambda > 0.0 {
        let oracle = oracle.ok_or(AttackError::OracleRequired)?;
        let label =
            oracle_label.ok_or_else(|| AttackError::Config("oracle term needs a label".into()))?;
        let mut sum: Option<crate::tensor::Var> = None;
        for member in oracle.members() {
            let logits = member.record_logits(&mut g, xv, false)?.last();
            let ce = g.softmax_cross_entropy(logits, label)?;
            sum = Some(match sum {
                None => ce,
                Some(s) => g.add(s, ce)?,
            });
        }
        let mean = g.scale(
            sum.expect("oracle has members"),
            1.0 / oracle.members().len() as f64,
        );
        oracle_loss = Some(g.value(mean).data()[0]);
        let weighted = g.scale(mean, lambda);
        total = g.add(tap_loss, weighted)?;
    }
    let total_value = g.value(total).data()[0];
    // A non-finite loss or gradient leaves `grad` empty; the caller treats
    // that as divergence.
    let grad = if want_grad && total_value.is_finite() {
        match g.backward(total) {
            Ok(()) => g.take_grad(xv),
            Err(TensorError::NonFinite(_)) => None,
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };
    Ok(Evaluation {
        total: total_value,
        tap_loss: g.value(tap_loss).data()[0],
        oracle_loss,
        lambda,
        encoded: g.value(enc).clone(),
        grad,
    })
}

/// `J₁ + λ(t)·J₂` at input `x` and iteration `t`.
///
/// Type I uses `J₁(f_enc(x), f_enc(x̄)) + λ·J₂(oracle(x), ŷ)`; type II uses
/// `J₁(f_enc(x), P̂) + λ·J₂(oracle(x), class(x̄))`. `J₂` is the oracle
/// members' mean cross-entropy. With the schedule off this is the tap loss.
pub fn total_loss(
    net: &Network,
    oracle: Option<&Oracle>,
    cfg: &AttackConfig,
    x: &Tensor,
    t: usize,
) -> Result<f64, AttackError> {
    cfg.validate(net)?;
    let lambda = cfg.lambda.at(t);
    if lambda > 0.0 && oracle.is_none() {
        return Err(AttackError::OracleRequired);
    }
    let latent = latent_for(net, cfg)?;
    let label = oracle_label_for(oracle, cfg, lambda)?;
    Ok(evaluate_objective(net, oracle, cfg.tap, &latent, label, lambda, x, false)?.total)
}

pub(crate) fn latent_for(net: &Network, cfg: &AttackConfig) -> Result<Tensor, AttackError> {
    match &cfg.target {
        AttackTarget::TypeI { reference, .. } => Ok(net.encode(reference, cfg.tap)?),
        AttackTarget::TypeII { target, .. } => Ok(target.latent.clone()),
    }
}

pub(crate) fn oracle_label_for(
    oracle: Option<&Oracle>,
    cfg: &AttackConfig,
    lambda: f64,
) -> Result<Option<usize>, AttackError> {
    if lambda <= 0.0 && !cfg.lambda.is_active() {
        return Ok(None);
    }
    match &cfg.target {
        AttackTarget::TypeI { oracle_label, .. } => Ok(*oracle_label),
        AttackTarget::TypeII {
            source,
            source_label,
            ..
        } => match (source_label, oracle) {
            (Some(l), _) => Ok(Some(*l)),
            (None, Some(o)) => Ok(Some(o.predict(source)?.0)),
            (None, None) => Err(AttackError::OracleRequired),
        },
    }
}

/// Quality measures of a finished attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub l2: f64,
    pub linf: f64,
    pub final_tap_loss: f64,
    pub pred_class: usize,
    pub confidence: f64,
    /// First iteration at which the prediction reached the target class
    /// (type II only).
    pub iters_to_flip: Option<usize>,
    /// First iteration at which the tap loss fell below 10% of its initial
    /// value.
    pub iters_to_tenth: Option<usize>,
    /// `L2(x̂, x̄)` when a donor is supplied.
    pub donor_l2: Option<f64>,
}

/// Recomputes the metrics of `result` from its stored tensors.
pub fn evaluate_attack(
    net: &Network,
    result: &AttackResult,
    reference: &Tensor,
    donor: Option<&Tensor>,
) -> Result<AttackMetrics, AttackError> {
    let (pred_class, confidence) = net.predict(&result.x_final)?;
    let final_tap_loss = ops::mse(
        &net.encode(&result.x_final, result.tap)?,
        &result.target_latent,
    )?;
    Ok(AttackMetrics {
        l2: result.x_final.l2_distance(reference)?,
        linf: result.x_final.linf_distance(reference)?,
        final_tap_loss,
        pred_class,
        confidence,
        iters_to_flip: result.iters_to_flip,
        iters_to_tenth: result.iters_to_tenth,
        donor_l2: donor.map(|d| d.l2_distance(reference)).transpose()?,
    })
}
