//! Training and inference for DC3 and its baselines.
//!
//! The network predicts partial variables, the family completes them to a
//! point satisfying the equalities, and a few unrolled gradient steps on the
//! inequality violation move that point along the equality manifold. The
//! training loss is taken on the corrected point.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::dataset::InstanceSet;
use crate::family::{complete_on_tape, completion_vjp_on_tape, evaluate_point, FamilyError, Linearization, ProblemFamily};
use crate::nn::{AdamState, MlpParams, Mode, NnError, DROPOUT, HIDDEN};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("correction diverged at step {step}: {msg}")]
    Correction { step: usize, msg: String },
    #[error("training diverged in epoch {epoch}: {msg}")]
    Divergence { epoch: usize, msg: String },
    #[error("variant {0} needs labelled training data")]
    MissingLabels(Variant),
    #[error("{dropped} of {seen} training rows had unconverged completions")]
    TooManyDropped { dropped: usize, seen: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Dc3,
    Dc3NoCompletion,
    Dc3NoCorrTrain,
    Dc3NoCorrTrainTest,
    Dc3NoSoftLoss,
    Nn,
    NnCorrTest,
    EqNn,
    EqNnCorrTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Objective plus squared violation penalties.
    Soft,
    ObjectiveOnly,
    /// Squared distance of the predicted partial variables to labels.
    Supervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionMode {
    /// Steps in the partial variables; the completion keeps equalities exact.
    Partial,
    /// Steps in all variables on the inequality and equality penalties.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Dc3,
        Variant::Dc3NoCompletion,
        Variant::Dc3NoCorrTrain,
        Variant::Dc3NoCorrTrainTest,
        Variant::Dc3NoSoftLoss,
        Variant::Nn,
        Variant::NnCorrTest,
        Variant::EqNn,
        Variant::EqNnCorrTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dc3 => "dc3",
            Variant::Dc3NoCompletion => "dc3-no-completion",
            Variant::Dc3NoCorrTrain => "dc3-no-corr-train",
            Variant::Dc3NoCorrTrainTest => "dc3-no-corr",
            Variant::Dc3NoSoftLoss => "dc3-no-soft-loss",
            Variant::Nn => "nn",
            Variant::NnCorrTest => "nn-corr-test",
            Variant::EqNn => "eqnn",
            Variant::EqNnCorrTest => "eqnn-corr-test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn uses_completion(self) -> bool {
        !matches!(self, Variant::Dc3NoCompletion | Variant::Nn | Variant::NnCorrTest)
    }

    pub fn correction_mode(self) -> CorrectionMode {
        if self.uses_completion() {
            CorrectionMode::Partial
        } else {
            CorrectionMode::Full
        }
    }

    pub fn corrects_in_training(self) -> bool {
        matches!(self, Variant::Dc3 | Variant::Dc3NoCompletion | Variant::Dc3NoSoftLoss)
    }

    pub fn corrects_at_test(self) -> bool {
        !matches!(self, Variant::Dc3NoCorrTrainTest | Variant::Nn | Variant::EqNn)
    }

    pub fn loss(self) -> LossKind {
        match self {
            Variant::Dc3NoSoftLoss => LossKind::ObjectiveOnly,
            Variant::EqNn | Variant::EqNnCorrTest => LossKind::Supervised,
            _ => LossKind::Soft,
        }
    }

    pub fn needs_labels(self) -> bool {
        self.loss() == LossKind::Supervised
    }

    /// Width of the network output for a family with `n` variables and `m`
    /// partial variables.
    pub fn output_dim(self, n: usize, m: usize) -> usize {
        if self.uses_completion() {
            m
        } else {
            n
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dc3Config {
    pub lambda_g: f64,
    pub lambda_h: f64,
    pub corr_lr: f64,
    pub corr_momentum: f64,
    pub corr_tol: f64,
    pub t_train: usize,
    pub t_test: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    pub dropout: f64,
    /// Validation metrics are recorded every this many epochs (and after the
    /// last one); 0 disables them.
    pub eval_every: usize,
    /// Largest tolerated fraction of training rows whose completion failed.
    pub max_drop_fraction: f64,
}

impl Dc3Config {
    fn base(lr: f64, penalty: f64, t: usize, corr_lr: f64) -> Self {
        Dc3Config {
            lambda_g: penalty * 0.5,
            lambda_h: penalty * 0.5,
            corr_lr,
            corr_momentum: 0.5,
            corr_tol: 1e-4,
            t_train: t,
            t_test: t,
            epochs: 1000,
            batch_size: 200,
            lr,
            hidden: HIDDEN,
            dropout: DROPOUT,
            eval_every: 50,
            max_drop_fraction: 0.05,
        }
    }

    /// Tuned settings for the linearly constrained families.
    pub fn qp_defaults(variant: Variant) -> Self {
        let penalty = match variant {
            Variant::Dc3NoCompletion | Variant::Nn | Variant::NnCorrTest => 100.0,
            Variant::EqNn | Variant::EqNnCorrTest => 0.0,
            _ => 10.0,
        };
        Self::base(1e-3, penalty, 10, 1e-6)
    }

    /// Tuned settings for power flow.
    pub fn acopf_defaults(variant: Variant) -> Self {
        let (penalty, corr_lr) = match variant {
            Variant::Dc3NoCompletion => (100.0, 1e-5),
            Variant::Nn | Variant::NnCorrTest => (100.0, 1e-5),
            Variant::EqNn | Variant::EqNnCorrTest => (0.0, 1e-5),
            _ => (10.0, 1e-4),
        };
        Self::base(1e-3, penalty, 5, corr_lr)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if !(self.lambda_g >= 0.0 && self.lambda_h >= 0.0) {
            return bad("penalty weights must be non-negative");
        }
        if !(self.corr_lr > 0.0) {
            return bad("correction step size must be positive");
        }
        if !(0.0..1.0).contains(&self.corr_momentum) {
            return bad("correction momentum must lie in [0, 1)");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }

    pub fn correction(&self, steps: usize) -> CorrectionSettings {
        CorrectionSettings { lr: self.corr_lr, momentum: self.corr_momentum, max_steps: steps, tol: self.corr_tol }
    }
}

/// Per-row `f + λ_g‖ReLU(g)‖² + λ_h‖h‖²`, `batch × 1`.
pub fn soft_loss(
    tape: &mut Tape,
    family: &dyn ProblemFamily,
    x: Var,
    y: Var,
    lambda_g: f64,
    lambda_h: f64,
) -> Result<Var, TensorError> {
    let f = family.objective(tape, x, y)?;
    let g = family.ineq_resid(tape, x, y)?;
    let h = family.eq_resid(tape, x, y)?;
    let gp = tape.clamp_sq(g)?;
    let gp = tape.sum_rows(gp)?;
    let hp = tape.square(h)?;
    let hp = tape.sum_rows(hp)?;
    let gp = tape.scale(gp, lambda_g)?;
    let hp = tape.scale(hp, lambda_h)?;
    let pen = tape.add(gp, hp)?;
    tape.add(f, pen)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionSettings {
    pub lr: f64,
    pub momentum: f64,
    pub max_steps: usize,
    pub tol: f64,
}

/// Point handed to [`correct`]. Partial mode needs the partial variables and
/// the completion linearization that produced `y`.
pub struct CorrectionStart {
    pub y: Var,
    pub z: Option<Var>,
    pub linearization: Option<Arc<dyn Linearization>>,
    /// Rows that take part; others are left untouched.
    pub valid: Vec<bool>,
}

pub struct CorrectionOutcome {
    pub y: Var,
    pub z: Option<Var>,
    pub valid: Vec<bool>,
    pub steps: usize,
    /// Largest row violation before each executed step and at the end.
    pub violation: Vec<f64>,
}

/// Row violations used as the stopping test: `max ReLU(g)` in partial mode,
/// `max(max ReLU(g), max |h|)` in full mode.
pub fn row_violations(g: &Tensor, h: Option<&Tensor>) -> Vec<f64> {
    (0..g.rows())
        .map(|i| {
            let gi = g.row(i).iter().fold(0.0f64, |a, v| a.max(*v));
            let hi = h.map_or(0.0, |h| h.row(i).iter().fold(0.0f64, |a, v| a.max(v.abs())));
            gi.max(hi)
        })
        .collect()
}

/// Unrolled gradient correction with heavy-ball momentum. Each row stops
/// once its violation falls below the tolerance; momentum starts at zero.
pub fn correct(
    tape: &mut Tape,
    family: &dyn ProblemFamily,
    x_value: &Tensor,
    x: Var,
    mode: CorrectionMode,
    start: CorrectionStart,
    settings: &CorrectionSettings,
) -> Result<CorrectionOutcome, EngineError> {
    let CorrectionStart { mut y, mut z, mut linearization, mut valid } = start;
    if mode == CorrectionMode::Partial && (z.is_none() || linearization.is_none()) {
        return Err(EngineError::Config("partial correction needs the completion state".into()));
    }
    let jac = tape.constant(family.ineq_jacobian().clone());
    let mut prev: Option<Var> = None;
    let mut history = Vec::new();
    let mut steps = 0;
    let fail = |step: usize| move |e: TensorError| EngineError::Correction { step, msg: e.to_string() };
    loop {
        let g = family.ineq_resid(tape, x, y).map_err(fail(steps))?;
        let h = match mode {
            CorrectionMode::Full => Some(family.eq_resid(tape, x, y).map_err(fail(steps))?),
            CorrectionMode::Partial => None,
        };
        let viol = row_violations(tape.value(g), h.map(|h| tape.value(h)));
        let worst = viol.iter().zip(&valid).filter(|(_, ok)| **ok).fold(0.0f64, |a, (v, _)| a.max(*v));
        history.push(worst);
        let active: Vec<f64> =
            viol.iter().zip(&valid).map(|(v, ok)| if *ok && *v >= settings.tol { 1.0 } else { 0.0 }).collect();
        if steps >= settings.max_steps || active.iter().all(|a| *a == 0.0) {
            break;
        }
        let f = fail(steps);
        let r = tape.relu(g).map_err(&f)?;
        let r = tape.scale(r, 2.0).map_err(&f)?;
        let dy = tape.matmul(r, jac).map_err(&f)?;
        let mask = tape.constant(Tensor::col_vector(&active));
        let grad = match mode {
            CorrectionMode::Partial => {
                let lin = linearization.as_ref().expect("checked above");
                completion_vjp_on_tape(tape, lin, dy).map_err(&f)?
            }
            CorrectionMode::Full => {
                let eg = family.eq_penalty_grad(tape, x, y).map_err(&f)?;
                tape.add(dy, eg).map_err(&f)?
            }
        };
        let mut step = tape.scale(grad, settings.lr).map_err(&f)?;
        if let Some(p) = prev {
            let p = tape.scale(p, settings.momentum).map_err(&f)?;
            step = tape.add(step, p).map_err(&f)?;
        }
        let step = tape.mul(step, mask).map_err(&f)?;
        match mode {
            CorrectionMode::Partial => {
                let zn = tape.sub(z.expect("checked above"), step).map_err(&f)?;
                let warm = tape.value(y).clone();
                let (yn, comp) = complete_on_tape(tape, family, x_value, zn, Some(&warm))?;
                for (ok, c) in valid.iter_mut().zip(&comp.converged) {
                    *ok &= *c;
                }
                z = Some(zn);
                y = yn;
                linearization = Some(comp.linearization);
            }
            CorrectionMode::Full => {
                y = tape.sub(y, step).map_err(&f)?;
            }
        }
        prev = Some(step);
        steps += 1;
    }
    Ok(CorrectionOutcome { y, z, valid, steps, violation: history })
}

/// Nodes of one pass through network, completion and correction.
pub struct PathOutput {
    pub y: Var,
    /// Decoded partial prediction (completion variants only).
    pub z: Option<Var>,
    pub valid: Vec<bool>,
    pub correction_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

/// Record the full pipeline for `x` on `tape`. `net_out` is the network
/// output node.
pub fn pipeline(
    tape: &mut Tape,
    family: &dyn ProblemFamily,
    variant: Variant,
    config: &Dc3Config,
    x_value: &Tensor,
    x: Var,
    net_out: Var,
    phase: Phase,
) -> Result<PathOutput, EngineError> {
    let rows = x_value.rows();
    let correct_now = match phase {
        Phase::Train => variant.corrects_in_training(),
        Phase::Test => variant.corrects_at_test(),
    };
    let steps = match phase {
        Phase::Train => config.t_train,
        Phase::Test => config.t_test,
    };
    if variant.uses_completion() {
        let z = family.decode_partial(tape, net_out)?;
        if phase == Phase::Train && variant.loss() == LossKind::Supervised {
            return Ok(PathOutput { y: z, z: Some(z), valid: vec![true; rows], correction_steps: 0 });
        }
        let (y, comp) = complete_on_tape(tape, family, x_value, z, None)?;
        let mut out = PathOutput { y, z: Some(z), valid: comp.converged.clone(), correction_steps: 0 };
        if correct_now && steps > 0 {
            let start =
                CorrectionStart { y, z: Some(z), linearization: Some(comp.linearization), valid: out.valid.clone() };
            let c = correct(tape, family, x_value, x, CorrectionMode::Partial, start, &config.correction(steps))?;
            out.y = c.y;
            out.valid = c.valid;
            out.correction_steps = c.steps;
        }
        Ok(out)
    } else {
        let mut out = PathOutput { y: net_out, z: None, valid: vec![true; rows], correction_steps: 0 };
        if correct_now && steps > 0 {
            let start = CorrectionStart { y: net_out, z: None, linearization: None, valid: out.valid.clone() };
            let c = correct(tape, family, x_value, x, CorrectionMode::Full, start, &config.correction(steps))?;
            out.y = c.y;
            out.valid = c.valid;
            out.correction_steps = c.steps;
        }
        Ok(out)
    }
}

fn masked_mean(tape: &mut Tape, per_row: Var, valid: &[bool]) -> Result<Var, TensorError> {
    let count = valid.iter().filter(|v| **v).count().max(1);
    let mask = tape.constant(Tensor::col_vector(&valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect::<Vec<_>>()));
    let m = tape.mul(per_row, mask)?;
    let s = tape.sum(m)?;
    tape.scale(s, 1.0 / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: Option<EvalSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub objective: f64,
    pub eq_max: f64,
    pub ineq_max: f64,
}

pub struct TrainOutcome {
    pub params: MlpParams,
    pub history: Vec<EpochRecord>,
    pub dropped_rows: usize,
    pub seen_rows: usize,
}

/// Train `variant` on the training split of `data`.
pub fn train(
    variant: Variant,
    family: &dyn ProblemFamily,
    data: &InstanceSet,
    config: &Dc3Config,
    seed: u64,
) -> Result<TrainOutcome, EngineError> {
    config.validate()?;
    let dims = family.dims();
    let labels = if variant.needs_labels() {
        let l = data.labels.as_ref().ok_or(EngineError::MissingLabels(variant))?;
        if l.cols() != dims.m() || l.rows() != data.len() {
            return Err(TensorError::shape("labels", &[l.shape(), &[data.len(), dims.m()]]).into());
        }
        Some(l)
    } else {
        None
    };
    let mut params =
        MlpParams::init_with(seed, dims.d, variant.output_dim(dims.n, dims.m()), config.hidden, config.dropout);
    let mut adam = AdamState::new(config.lr, &params.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_d0_7a);
    let valid_x = data.valid_x();
    let mut order: Vec<usize> = data.splits.train.clone().collect();
    let mut history = Vec::with_capacity(config.epochs);
    let (mut dropped, mut seen) = (0usize, 0usize);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let diverged = |e: &dyn fmt::Display| EngineError::Divergence { epoch, msg: e.to_string() };
            let xb = data.x.select_rows(chunk);
            let mut tape = Tape::new();
            let xv = tape.constant(xb.clone());
            let fwd = params.forward(&mut tape, xv, Mode::Train, &mut rng).map_err(|e| diverged(&e))?;
            let path = match pipeline(&mut tape, family, variant, config, &xb, xv, fwd.output, Phase::Train) {
                Ok(p) => p,
                Err(EngineError::Tensor(e)) => return Err(diverged(&e)),
                Err(EngineError::Correction { msg, .. }) => return Err(diverged(&msg)),
                Err(e) => return Err(e),
            };
            seen += chunk.len();
            dropped += path.valid.iter().filter(|v| !**v).count();
            let per_row = match variant.loss() {
                LossKind::Soft => soft_loss(&mut tape, family, xv, path.y, config.lambda_g, config.lambda_h),
                LossKind::ObjectiveOnly => family.objective(&mut tape, xv, path.y),
                LossKind::Supervised => {
                    let lb = tape.constant(labels.expect("checked above").select_rows(chunk));
                    let z = path.z.expect("completion variant");
                    tape.sub(z, lb).and_then(|d| tape.square(d)).and_then(|s| tape.sum_rows(s))
                }
            }
            .map_err(|e| diverged(&e))?;
            let loss = masked_mean(&mut tape, per_row, &path.valid).map_err(|e| diverged(&e))?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(diverged(&"non-finite loss"));
            }
            let grads = tape.backward(loss).map_err(|e| diverged(&e))?;
            let g = params.collect_grads(&fwd, &grads);
            adam.step(&mut params.params_mut(), &g).map_err(|e| diverged(&e))?;
            params.absorb_batch_stats(&fwd.stats);
            loss_sum += lv;
            batches += 1;
        }
        if seen > 0 && dropped as f64 > config.max_drop_fraction * seen as f64 {
            return Err(EngineError::TooManyDropped { dropped, seen });
        }
        let last = epoch + 1 == config.epochs;
        let valid = if config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || last) && valid_x.rows() > 0 {
            let (_, r) = evaluate(&params, variant, family, &valid_x, config, None)?;
            Some(EvalSummary { objective: r.objective_mean, eq_max: r.eq_max, ineq_max: r.ineq_max })
        } else {
            None
        };
        history.push(EpochRecord { epoch: epoch + 1, train_loss: loss_sum / batches.max(1) as f64, valid });
    }
    Ok(TrainOutcome { params, history, dropped_rows: dropped, seen_rows: seen })
}

/// Test-path outputs for every row of `x`.
pub struct Prediction {
    pub y: Tensor,
    pub valid: Vec<bool>,
    pub seconds: f64,
}

/// Network, completion and test-time correction on a whole batch.
pub fn predict(
    params: &MlpParams,
    variant: Variant,
    family: &dyn ProblemFamily,
    x: &Tensor,
    config: &Dc3Config,
) -> Result<Prediction, EngineError> {
    let start = Instant::now();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = params.forward(&mut tape, xv, Mode::Eval, &mut rng)?;
    let path = pipeline(&mut tape, family, variant, config, x, xv, fwd.output, Phase::Test)?;
    let y = tape.value(path.y).clone();
    Ok(Prediction { y, valid: path.valid, seconds: start.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub variant: Variant,
    pub instances: usize,
    /// Rows whose completion converged; statistics cover these rows only.
    pub converged: usize,
    pub objective_mean: f64,
    pub eq_max: f64,
    pub eq_mean: f64,
    pub ineq_max: f64,
    pub ineq_mean: f64,
    pub time_total: f64,
    pub time_per_instance: f64,
    /// Mean of `(f − f_ref)/|f_ref|` when reference objectives are given.
    pub gap_mean: Option<f64>,
}

/// Violation and objective statistics of full points `y` over `valid` rows.
pub fn measure(
    family: &dyn ProblemFamily,
    x: &Tensor,
    y: &Tensor,
    valid: &[bool],
    reference: Option<&Tensor>,
) -> Result<MeasuredRows, TensorError> {
    let e = evaluate_point(family, x, y)?;
    let rows: Vec<usize> = (0..x.rows()).filter(|&i| valid[i]).collect();
    let mut out = MeasuredRows::default();
    let (mut eq_sum, mut ineq_sum, mut eq_n, mut ineq_n) = (0.0, 0.0, 0usize, 0usize);
    for &i in &rows {
        out.objective.push(e.objective.get(i, 0));
        for &v in e.eq.row(i) {
            out.eq_max = out.eq_max.max(v.abs());
            eq_sum += v.abs();
            eq_n += 1;
        }
        for &v in e.ineq.row(i) {
            out.ineq_max = out.ineq_max.max(v.max(0.0));
            ineq_sum += v.max(0.0);
            ineq_n += 1;
        }
        // Rows the reference solver could not solve carry a NaN objective.
        if let Some(fr) = reference.map(|r| r.get(i, 0)).filter(|f| f.is_finite()) {
            out.gap.push((e.objective.get(i, 0) - fr) / fr.abs());
        }
    }
    out.eq_mean = if eq_n > 0 { eq_sum / eq_n as f64 } else { 0.0 };
    out.ineq_mean = if ineq_n > 0 { ineq_sum / ineq_n as f64 } else { 0.0 };
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasuredRows {
    pub objective: Vec<f64>,
    pub gap: Vec<f64>,
    pub eq_max: f64,
    pub eq_mean: f64,
    pub ineq_max: f64,
    pub ineq_mean: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Run the test path on `x` and summarize it. `reference` holds per-row
/// reference objectives (`rows × 1`) for the optimality gap.
pub fn evaluate(
    params: &MlpParams,
    variant: Variant,
    family: &dyn ProblemFamily,
    x: &Tensor,
    config: &Dc3Config,
    reference: Option<&Tensor>,
) -> Result<(Prediction, EvalReport), EngineError> {
    let pred = predict(params, variant, family, x, config)?;
    let m = measure(family, x, &pred.y, &pred.valid, reference)?;
    let report = EvalReport {
        variant,
        instances: x.rows(),
        converged: pred.valid.iter().filter(|v| **v).count(),
        objective_mean: mean(&m.objective),
        eq_max: m.eq_max,
        eq_mean: m.eq_mean,
        ineq_max: m.ineq_max,
        ineq_mean: m.ineq_mean,
        time_total: pred.seconds,
        time_per_instance: pred.seconds / x.rows().max(1) as f64,
        gap_mean: reference.map(|_| mean(&m.gap)),
    };
    Ok((pred, report))
}
