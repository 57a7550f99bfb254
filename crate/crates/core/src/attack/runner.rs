use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    evaluate_objective, latent_for, oracle_label_for, AttackConfig, AttackError, AttackKind,
    AttackTarget, NOISE_RETENTION, SUCCESS_CONFIDENCE,
};
use crate::network::{prediction, Network, TapPoint};
use crate::par;
use crate::tensor::Tensor;
use crate::training::Oracle;

/// One logged iteration. Values describe the iterate *before* that
/// iteration's step; the last record is the final iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub loss_total: f64,
    pub loss_tap: f64,
    pub loss_oracle: Option<f64>,
    pub lambda: f64,
    pub l2: f64,
    pub linf: f64,
    pub pred_class: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub kind: AttackKind,
    pub tap: TapPoint,
    pub x_initial: Tensor,
    pub x_final: Tensor,
    /// Encoder output the attack drove toward.
    pub target_latent: Tensor,
    pub trace: Vec<TraceRecord>,
    pub iterations_run: usize,
    pub initial_tap_loss: f64,
    pub final_tap_loss: f64,
    pub pred_class: usize,
    pub confidence: f64,
    /// Class a successful run must end in.
    pub goal_class: usize,
    pub iters_to_flip: Option<usize>,
    pub iters_to_tenth: Option<usize>,
    pub success: bool,
    pub wall_time: Duration,
}

impl AttackResult {
    /// `iter,loss_total,loss_tap,loss_oracle,lambda,l2,linf,pred_class,confidence`
    pub fn trace_csv(&self) -> String {
        let mut out = String::from(
            "iter,loss_total,loss_tap,loss_oracle,lambda,l2,linf,pred_class,confidence\n",
        );
        for r in &self.trace {
            let oracle = r.loss_oracle.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.iter,
                r.loss_total,
                r.loss_tap,
                oracle,
                r.lambda,
                r.l2,
                r.linf,
                r.pred_class,
                r.confidence
            ));
        }
        out
    }
}

fn initial_point(cfg: &AttackConfig) -> Tensor {
    match &cfg.target {
        AttackTarget::TypeI { reference, .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let data = (0..reference.len()).map(|_| rng.random::<f64>()).collect();
            Tensor::new(reference.shape().to_vec(), data).expect("same shape as reference")
        }
        AttackTarget::TypeII { source, .. } => source.clone(),
    }
}

/// Runs one attack to completion.
///
/// Type I starts from seeded uniform noise, type II from the source sample.
/// Each iteration takes `x ← x − step(t)·∇(J₁ + λ(t)·J₂)` and, when enabled,
/// clamps to `[0, 1]`. A non-finite loss aborts with the partial result.
pub fn run_attack(
    net: &Network,
    oracle: Option<&Oracle>,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate(net)?;
    if cfg.lambda.is_active() && oracle.is_none() {
        return Err(AttackError::OracleRequired);
    }
    let started = Instant::now();
    let reference = cfg.target.reference();
    let latent = latent_for(net, cfg)?;
    let label = oracle_label_for(oracle, cfg, 0.0)?;
    let goal_class = match &cfg.target {
        AttackTarget::TypeI { reference, .. } => net.predict(reference)?.0,
        AttackTarget::TypeII { target, .. } => target.class,
    };
    let track_flip = cfg.kind() == AttackKind::TypeII;
    let iterations = cfg.iterations();

    let x_initial = initial_point(cfg);
    let mut x = x_initial.clone();
    let mut trace = Vec::new();
    let mut initial_tap_loss = f64::NAN;
    let mut iters_to_flip = None;
    let mut iters_to_tenth = None;
    let mut last = None;

    for t in 0..=iterations {
        let lambda = cfg.lambda.at(t);
        let eval = evaluate_objective(
            net,
            oracle,
            cfg.tap,
            &latent,
            label,
            lambda,
            &x,
            t < iterations,
        )?;
        if t == 0 {
            initial_tap_loss = eval.tap_loss;
        }
        if iters_to_tenth.is_none() && eval.tap_loss < 0.1 * initial_tap_loss {
            iters_to_tenth = Some(t);
        }
        let logged = t % cfg.log_every == 0 || t == iterations;
        let diverged = !eval.total.is_finite() || (t < iterations && eval.grad.is_none());
        let pred = if (track_flip && iters_to_flip.is_none()) || logged || diverged {
            let logits = net.forward_from(cfg.tap.layer_index, &eval.encoded)?;
            Some(prediction(&logits))
        } else {
            None
        };
        if let (true, None, Some((class, _))) = (track_flip, iters_to_flip, pred) {
            if class == goal_class {
                iters_to_flip = Some(t);
            }
        }
        if logged && !diverged {
            let (pred_class, confidence) = pred.expect("computed for logged iterations");
            trace.push(TraceRecord {
                iter: t,
                loss_total: eval.total,
                loss_tap: eval.tap_loss,
                loss_oracle: eval.oracle_loss,
                lambda: eval.lambda,
                l2: x.l2_distance(reference)?,
                linf: x.linf_distance(reference)?,
                pred_class,
                confidence,
            });
        }
        if diverged {
            let partial = finish(
                cfg,
                x_initial,
                x,
                latent,
                trace,
                t,
                initial_tap_loss,
                eval.tap_loss,
                pred,
                goal_class,
                iters_to_flip,
                iters_to_tenth,
                started,
            )?;
            return Err(AttackError::Diverged {
                iteration: t,
                partial: Box::new(partial),
            });
        }
        if t == iterations {
            last = Some((eval.tap_loss, pred));
            break;
        }
        let step = cfg.steps.step_at(t);
        let grad = eval
            .grad
            .expect("gradient requested before the last iteration");
        for (v, g) in x.data_mut().iter_mut().zip(&grad) {
            *v -= step * g;
            if cfg.clamp {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
    let (final_tap_loss, pred) = last.expect("loop runs at least once");
    finish(
        cfg,
        x_initial,
        x,
        latent,
        trace,
        iterations,
        initial_tap_loss,
        final_tap_loss,
        pred,
        goal_class,
        iters_to_flip,
        iters_to_tenth,
        started,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    cfg: &AttackConfig,
    x_initial: Tensor,
    x_final: Tensor,
    target_latent: Tensor,
    trace: Vec<TraceRecord>,
    iterations_run: usize,
    initial_tap_loss: f64,
    final_tap_loss: f64,
    pred: Option<(usize, f64)>,
    goal_class: usize,
    iters_to_flip: Option<usize>,
    iters_to_tenth: Option<usize>,
    started: Instant,
) -> Result<AttackResult, AttackError> {
    let (pred_class, confidence) = pred.unwrap_or((usize::MAX, f64::NAN));
    let reference = cfg.target.reference();
    let distance = x_final.l2_distance(reference)?;
    let confident = pred_class == goal_class && confidence >= SUCCESS_CONFIDENCE;
    let success = confident
        && match &cfg.target {
            AttackTarget::TypeI { .. } => {
                distance >= NOISE_RETENTION * x_initial.l2_distance(reference)?
            }
            AttackTarget::TypeII { target, .. } => match &target.donor {
                Some(d) => distance < d.l2_distance(reference)?,
                None => true,
            },
        };
    Ok(AttackResult {
        kind: cfg.kind(),
        tap: cfg.tap,
        x_initial,
        x_final,
        target_latent,
        trace,
        iterations_run,
        initial_tap_loss,
        final_tap_loss,
        pred_class,
        confidence,
        goal_class,
        iters_to_flip,
        iters_to_tenth,
        success,
        wall_time: started.elapsed(),
    })
}

/// Runs independent attacks, one per worker, results in input order.
pub fn run_attacks(
    net: &Network,
    oracle: Option<&Oracle>,
    cfgs: &[AttackConfig],
) -> Vec<Result<AttackResult, AttackError>> {
    par::map(cfgs, |cfg| run_attack(net, oracle, cfg))
}
