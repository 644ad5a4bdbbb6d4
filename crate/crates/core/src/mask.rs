//! Stage I: per-module categorical preferences over bit-widths, learned by a
//! relaxed selection (Gumbel-Softmax or binary concrete) against teacher-forced
//! layer reconstruction under an average-bit constraint.
//!
//! One training step runs in three parts. The relaxed probabilities `p` are
//! recorded on a small mask tape. The mixed weights `Σ_b p_b W_b` are fed
//! to independent per-(layer, sequence) tapes whose weight gradients are
//! reduced in a fixed order. Those gradients are contracted with the frozen
//! candidates into `∂ℓ/∂p` and re-enter the mask tape as an external node, on
//! top of which the budget penalty is built.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::calib::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{next_token_rows, FullPrecisionModel, HiddenStateTrace, LayerVars, ModuleId};
use crate::parallel;
use crate::quant::{BitWidthSet, CandidatePool};
use crate::seed::{self, Domain};
use crate::tensor::{softmax_row, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelaxationMode {
    GumbelSoftmax,
    /// Two-class binary concrete: `p_high = sigmoid((π_high − π_low + L)/τ)`
    /// with logistic noise `L`.
    BinarySigmoid,
}

impl RelaxationMode {
    pub fn name(self) -> &'static str {
        match self {
            RelaxationMode::GumbelSoftmax => "gumbel_softmax",
            RelaxationMode::BinarySigmoid => "binary_sigmoid",
        }
    }
}

impl fmt::Display for RelaxationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelaxationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gumbel_softmax" => Ok(RelaxationMode::GumbelSoftmax),
            "binary_sigmoid" => Ok(RelaxationMode::BinarySigmoid),
            _ => Err(Error::Format(format!("unknown relaxation `{s}`"))),
        }
    }
}

/// Shape of the multiplicative budget penalty `max(β·ln(dev² + ε)^γ, floor)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyShape {
    pub beta: f64,
    pub gamma: f64,
    pub eps: f64,
    pub floor: f64,
}

impl Default for PenaltyShape {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma: 1.0,
            eps: 1e-4,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stage1Mode {
    AugmentedLagrangian,
    MultiplicativePenalty(PenaltyShape),
    /// Next-token cross-entropy of the whole mixed model, with the
    /// augmented-Lagrangian constraint.
    CrossEntropy,
}

impl Stage1Mode {
    pub fn tag(&self) -> &'static str {
        match self {
            Stage1Mode::AugmentedLagrangian => "al",
            Stage1Mode::MultiplicativePenalty(_) => "mult",
            Stage1Mode::CrossEntropy => "ce",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "al" => Ok(Stage1Mode::AugmentedLagrangian),
            "mult" => Ok(Stage1Mode::MultiplicativePenalty(PenaltyShape::default())),
            "ce" => Ok(Stage1Mode::CrossEntropy),
            _ => Err(Error::Format(format!("unknown stage-1 mode `{tag}`"))),
        }
    }

    fn uses_duals(&self) -> bool {
        !matches!(self, Stage1Mode::MultiplicativePenalty(_))
    }
}

/// How the exported scores are read off the trained logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreExtraction {
    /// `softmax(π/τ)`.
    NoiseFree,
    /// The relaxed sample drawn at the last step.
    FinalSample,
    /// Mean of this many fresh relaxed samples.
    SampleAverage(usize),
}

impl fmt::Display for ScoreExtraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreExtraction::NoiseFree => f.write_str("noise_free"),
            ScoreExtraction::FinalSample => f.write_str("final_sample"),
            ScoreExtraction::SampleAverage(n) => write!(f, "sample_average:{n}"),
        }
    }
}

impl FromStr for ScoreExtraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise_free" => Ok(ScoreExtraction::NoiseFree),
            "final_sample" => Ok(ScoreExtraction::FinalSample),
            _ => s
                .strip_prefix("sample_average:")
                .and_then(|n| n.parse().ok())
                .filter(|&n| n > 0)
                .map(ScoreExtraction::SampleAverage)
                .ok_or_else(|| Error::Format(format!("unknown score extraction `{s}`"))),
        }
    }
}

/// Which probabilities enter the expected bit-width of the constraint term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BudgetEstimate {
    /// The relaxed sample of the current step.
    Sampled,
    /// The noise-free `softmax(π/τ)`.
    MeanField,
}

impl fmt::Display for BudgetEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BudgetEstimate::Sampled => "sampled",
            BudgetEstimate::MeanField => "mean_field",
        })
    }
}

impl FromStr for BudgetEstimate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(BudgetEstimate::Sampled),
            "mean_field" => Ok(BudgetEstimate::MeanField),
            _ => Err(Error::Format(format!("unknown budget estimate `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Momentum { .. } => "momentum",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "momentum" => Ok(Optimizer::Momentum { beta: 0.9 }),
            "adam" => Ok(Optimizer::adam()),
            _ => Err(Error::Format(format!("unknown optimizer `{s}`"))),
        }
    }
}

struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, n: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Momentum { beta } => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    *m = beta * *m + g;
                    *p -= lr * *m;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Trainable logits `π[module, b]` with the relaxation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    logits: Tensor,
    tau: f64,
    seed: u64,
    relaxation: RelaxationMode,
}

impl MaskState {
    /// All-zero logits, i.e. a uniform prior over the bit-widths.
    pub fn new(num_modules: usize, num_bits: usize, tau: f64, seed: u64, relaxation: RelaxationMode) -> Result<Self> {
        Self::from_logits(Tensor::zeros(&[num_modules, num_bits]), tau, seed, relaxation)
    }

    pub fn from_logits(logits: Tensor, tau: f64, seed: u64, relaxation: RelaxationMode) -> Result<Self> {
        if logits.shape().len() != 2 {
            return Err(Error::Dimension("mask logits must be [modules, bits]".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Parameter(format!("temperature {tau} must be positive")));
        }
        if relaxation == RelaxationMode::BinarySigmoid && logits.cols() != 2 {
            return Err(Error::Configuration(format!(
                "binary sigmoid relaxation needs exactly 2 bit-widths, got {}",
                logits.cols()
            )));
        }
        Ok(Self {
            logits,
            tau,
            seed,
            relaxation,
        })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        self.logits.data_mut()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn relaxation(&self) -> RelaxationMode {
        self.relaxation
    }

    pub fn num_modules(&self) -> usize {
        self.logits.rows()
    }

    pub fn num_bits(&self) -> usize {
        self.logits.cols()
    }

    /// Noise for training step `step`, from its own seeded stream.
    pub fn step_noise(&self, step: u64) -> Tensor {
        let mut rng = seed::stream(self.seed, Domain::MaskNoise, step);
        self.sample_noise(&mut rng)
    }

    /// One fresh draw per `(module, b)`. Gumbel mode fills every entry with
    /// `−ln(−ln u)`; binary mode puts logistic noise `ln u − ln(1−u)` on the
    /// high bit-width and zero on the low one.
    pub fn sample_noise<R: Rng>(&self, rng: &mut R) -> Tensor {
        let (m, nb) = (self.num_modules(), self.num_bits());
        let mut data = Vec::with_capacity(m * nb);
        for _ in 0..m {
            match self.relaxation {
                RelaxationMode::GumbelSoftmax => {
                    data.extend((0..nb).map(|_| -(-open_unit(rng).ln()).ln()));
                }
                RelaxationMode::BinarySigmoid => {
                    let u = open_unit(rng);
                    data.push(0.0);
                    data.push(u.ln() - (1.0 - u).ln());
                }
            }
        }
        Tensor::new(vec![m, nb], data).expect("noise shape")
    }

    /// `softmax(π/τ)` per module.
    pub fn mean_field(&self) -> Tensor {
        row_softmax(&self.logits, self.tau)
    }
}

/// Uniform draw from the open interval (0, 1); endpoints are redrawn.
fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

fn row_softmax(x: &Tensor, tau: f64) -> Tensor {
    let c = x.cols();
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        softmax_row(src, tau, dst);
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax shape")
}

/// `softmax((π + noise)/τ)` on the tape; differentiable in `logits`.
pub fn relaxed_on_tape(tape: &mut Tape, logits: Var, noise: &Tensor, tau: f64) -> Result<Var> {
    let n = tape.constant(noise.clone());
    let z = tape.add(logits, n)?;
    tape.softmax_rows(z, tau)
}

/// Relaxed probability rows for the given noise.
pub fn sample_relaxed_probs(state: &MaskState, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != state.logits.shape() {
        return Err(Error::Dimension(format!(
            "noise shape {:?} does not match logits {:?}",
            noise.shape(),
            state.logits.shape()
        )));
    }
    let mut tape = Tape::new();
    let l = tape.constant(state.logits.clone());
    let p = relaxed_on_tape(&mut tape, l, noise, state.tau)?;
    Ok(tape.value(p).clone())
}

/// `W_mix = Σ_b p[m, b] · W_b` for every module.
pub fn mix_weights(pool: &CandidatePool, p: &Tensor) -> Result<Vec<Tensor>> {
    if p.shape() != [pool.num_modules(), pool.bitset().len()] {
        return Err(Error::Configuration(format!(
            "probabilities {:?} do not align with a pool of {} modules over {} bit-widths",
            p.shape(),
            pool.num_modules(),
            pool.bitset().len()
        )));
    }
    (0..pool.num_modules())
        .map(|m| {
            let c = pool.module(m);
            let mut out = vec![0.0; c.fp.numel()];
            for (b, q) in c.quantized.iter().enumerate() {
                let pb = p.row(m)[b];
                for (o, &w) in out.iter_mut().zip(q.data()) {
                    *o += pb * w;
                }
            }
            Tensor::new(c.fp.shape().to_vec(), out)
        })
        .collect()
}

/// Parameter-weighted mean of `Σ_b b·p[m, b]` over modules.
pub fn expected_avg_bits(p: &Tensor, bits: &[u32], counts: &[u64]) -> Result<f64> {
    if p.shape().len() != 2 || p.cols() != bits.len() || p.rows() != counts.len() {
        return Err(Error::Dimension(format!(
            "probabilities {:?} for {} modules over {} bit-widths",
            p.shape(),
            counts.len(),
            bits.len()
        )));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Parameter("parameter counts sum to zero".into()));
    }
    let mut acc = 0.0;
    for (m, &n) in counts.iter().enumerate() {
        let e: f64 = p.row(m).iter().zip(bits).map(|(q, &b)| q * b as f64).sum();
        acc += n as f64 * e;
    }
    Ok(acc / total as f64)
}

/// Rejects budgets outside `[min B, max B]`.
pub fn check_budget(bitset: &BitWidthSet, target: f64) -> Result<()> {
    if !target.is_finite() || target < bitset.min() as f64 {
        return Err(Error::InfeasibleBudget {
            target,
            min_bits: bitset.min(),
        });
    }
    if target > bitset.max() as f64 {
        return Err(Error::BudgetOutOfRange {
            target,
            min_bits: bitset.min(),
            max_bits: bitset.max(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualState {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
}

impl DualState {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("dual learning rate {learning_rate} must be positive")));
        }
        Ok(Self {
            lambda1: 0.0,
            lambda2: 0.0,
            learning_rate,
        })
    }

    /// Projected ascent: `λ ← λ + η·∂L/∂λ`, then `λ2 ← max(λ2, 0)`.
    pub fn ascend(&mut self, grad_lambda1: f64, grad_lambda2: f64) {
        self.lambda1 += self.learning_rate * grad_lambda1;
        self.lambda2 = (self.lambda2 + self.learning_rate * grad_lambda2).max(0.0);
    }
}

/// Components of the Stage-I objective. `recon` is the data term as it enters
/// `total` (after loss scaling); `raw_recon` is the unscaled value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub recon: f64,
    pub raw_recon: f64,
    pub deviation: f64,
    pub penalty_linear: f64,
    pub penalty_quadratic: f64,
    /// Multiplicative penalty factor; 1 in the additive modes.
    pub multiplier: f64,
    pub total: f64,
}

/// `recon + λ1·dev + λ2·dev²`.
pub fn augmented_lagrangian(recon: f64, deviation: f64, dual: &DualState) -> f64 {
    recon + dual.lambda1 * deviation + dual.lambda2 * deviation * deviation
}

/// Token batch together with its full-precision hidden states.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherBatch {
    pub tokens: TokenBatch,
    pub trace: HiddenStateTrace,
}

impl TeacherBatch {
    pub fn new(model: &FullPrecisionModel, tokens: TokenBatch) -> Result<Self> {
        let trace = model.teacher_trace(&tokens)?;
        Ok(Self { tokens, trace })
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            tokens: self.tokens.select(indices),
            trace: self.trace.select(indices),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.tokens.batch_size()
    }
}

/// Loss, probabilities and gradients of one evaluation of the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: LossReport,
    pub probs: Tensor,
    pub grad_logits: Vec<f64>,
    pub grad_lambda1: f64,
    pub grad_lambda2: f64,
}

/// The Stage-I objective bound to a model, its candidate pool and a budget.
#[derive(Clone, Debug)]
pub struct Stage1Objective<'a> {
    model: &'a FullPrecisionModel,
    pool: &'a CandidatePool,
    mode: Stage1Mode,
    b_target: f64,
    tau: f64,
    budget_estimate: BudgetEstimate,
    loss_scale: f64,
    threads: usize,
    coeffs: Tensor,
}

impl<'a> Stage1Objective<'a> {
    pub fn new(
        model: &'a FullPrecisionModel,
        pool: &'a CandidatePool,
        mode: Stage1Mode,
        b_target: f64,
    ) -> Result<Self> {
        check_budget(pool.bitset(), b_target)?;
        if pool.modules() != model.spec().module_ids().as_slice() {
            return Err(Error::Configuration("candidate pool does not match the model's modules".into()));
        }
        let counts = model.spec().param_counts();
        let total: u64 = counts.iter().sum();
        let bits = pool.bitset().bits();
        let data = counts
            .iter()
            .flat_map(|&n| bits.iter().map(move |&b| n as f64 * b as f64 / total as f64))
            .collect();
        let coeffs = Tensor::new(vec![counts.len(), bits.len()], data)?;
        Ok(Self {
            model,
            pool,
            mode,
            b_target,
            tau: 1.0,
            budget_estimate: BudgetEstimate::Sampled,
            loss_scale: 1.0,
            threads: 1,
            coeffs,
        })
    }

    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Parameter(format!("temperature {tau} must be positive")));
        }
        self.tau = tau;
        Ok(self)
    }

    pub fn with_budget_estimate(mut self, estimate: BudgetEstimate) -> Self {
        self.budget_estimate = estimate;
        self
    }

    pub fn with_loss_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Parameter(format!("loss scale {scale} must be positive")));
        }
        self.loss_scale = scale;
        Ok(self)
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn mode(&self) -> Stage1Mode {
        self.mode
    }

    pub fn loss_scale(&self) -> f64 {
        self.loss_scale
    }

    /// Unscaled data term under `mixed` weights (declaration order), with its
    /// gradient with respect to each mixed weight when `want_grad` is set.
    ///
    /// Reconstruction: `(1/L)·Σ_i` mean over sequences of the per-element
    /// squared error between `f_i(H^(i−1); W_mix)` and `H^(i)`. Cross-entropy:
    /// mean next-token loss of the untethered mixed model.
    pub fn data_loss(
        &self,
        mixed: &[Tensor],
        data: &TeacherBatch,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        if mixed.len() != self.pool.num_modules() {
            return Err(Error::Configuration(format!(
                "{} mixed weights for {} modules",
                mixed.len(),
                self.pool.num_modules()
            )));
        }
        match self.mode {
            Stage1Mode::CrossEntropy => self.cross_entropy_loss(mixed, data, want_grad),
            _ => self.reconstruction_loss(mixed, data, want_grad),
        }
    }

    fn reconstruction_loss(
        &self,
        mixed: &[Tensor],
        data: &TeacherBatch,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let layers = self.model.spec().num_layers;
        let nseq = data.batch_size();
        let seq_len = data.trace.seq_len;
        type Unit = Result<(f64, Option<Vec<Vec<f64>>>)>;
        let units = parallel::map_ordered(layers * nseq, self.threads, |u| -> Unit {
            let (layer, s) = (u / nseq + 1, u % nseq);
            let mut tape = Tape::new();
            let x = tape.constant(data.trace.sequence(layer - 1, s));
            let w: Vec<Var> = (0..7)
                .map(|j| tape.leaf(mixed[(layer - 1) * 7 + j].clone(), want_grad))
                .collect();
            let w: LayerVars = w.try_into().expect("seven projections");
            let y = self.model.layer_on_tape(&mut tape, layer, x, &w, seq_len)?;
            let t = tape.constant(data.trace.sequence(layer, s));
            let diff = tape.sub(y, t)?;
            let sq = tape.square(diff);
            let loss = tape.mean(sq);
            let value = tape.value(loss).item()?;
            if !want_grad {
                return Ok((value, None));
            }
            tape.backward(loss)?;
            ensure_frozen(&tape, 7)?;
            let grads: Vec<Vec<f64>> = w
                .iter()
                .map(|&v| tape.grad(v).expect("mixed-weight gradient").to_vec())
                .collect();
            Ok((value, Some(grads)))
        });
        let denom = (layers * nseq) as f64;
        let mut total = 0.0;
        let mut grads: Option<Vec<Vec<f64>>> =
            want_grad.then(|| mixed.iter().map(|w| vec![0.0; w.numel()]).collect());
        for (u, unit) in units.into_iter().enumerate() {
            let (value, g) = unit?;
            total += value;
            if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
                let layer = u / nseq;
                for (j, gj) in g.into_iter().enumerate() {
                    for (a, x) in acc[layer * 7 + j].iter_mut().zip(gj) {
                        *a += x;
                    }
                }
            }
        }
        if let Some(acc) = grads.as_mut() {
            acc.iter_mut().flatten().for_each(|x| *x /= denom);
        }
        Ok((total / denom, grads))
    }

    fn cross_entropy_loss(
        &self,
        mixed: &[Tensor],
        data: &TeacherBatch,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let nseq = data.batch_size();
        type Unit = Result<(f64, Option<Vec<Vec<f64>>>)>;
        let units = parallel::map_ordered(nseq, self.threads, |s| -> Unit {
            let tokens = data.tokens.select(&[s]);
            let mut tape = Tape::new();
            let w: Vec<Var> = mixed.iter().map(|m| tape.leaf(m.clone(), want_grad)).collect();
            let logits = self.model.logits_on_tape(&mut tape, &w, &tokens)?;
            let (rows, targets) = next_token_rows(&tokens);
            let picked = tape.select_rows(logits, &rows)?;
            let loss = tape.cross_entropy(picked, &targets)?;
            let value = tape.value(loss).item()?;
            if !want_grad {
                return Ok((value, None));
            }
            tape.backward(loss)?;
            ensure_frozen(&tape, w.len())?;
            let grads: Vec<Vec<f64>> = w
                .iter()
                .map(|&v| tape.grad(v).expect("mixed-weight gradient").to_vec())
                .collect();
            Ok((value, Some(grads)))
        });
        let mut total = 0.0;
        let mut grads: Option<Vec<Vec<f64>>> =
            want_grad.then(|| mixed.iter().map(|w| vec![0.0; w.numel()]).collect());
        for unit in units {
            let (value, g) = unit?;
            total += value;
            if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
                for (a, gm) in acc.iter_mut().zip(g) {
                    a.iter_mut().zip(gm).for_each(|(x, y)| *x += y);
                }
            }
        }
        let denom = nseq as f64;
        if let Some(acc) = grads.as_mut() {
            acc.iter_mut().flatten().for_each(|x| *x /= denom);
        }
        Ok((total / denom, grads))
    }

    /// Data term with every module at the same candidate (`bit_index`), or at
    /// full precision when `None`.
    pub fn uniform_data_loss(&self, bit_index: Option<usize>, data: &TeacherBatch) -> Result<f64> {
        let mixed: Vec<Tensor> = (0..self.pool.num_modules())
            .map(|m| match bit_index {
                Some(b) => self.pool.candidate(m, b).clone(),
                None => self.pool.module(m).fp.clone(),
            })
            .collect();
        Ok(self.data_loss(&mixed, data, false)?.0)
    }

    /// Loss components for fixed probabilities `p`; the budget term uses `p`.
    pub fn loss(&self, p: &Tensor, dual: &DualState, data: &TeacherBatch) -> Result<LossReport> {
        let mixed = mix_weights(self.pool, p)?;
        let (raw, _) = self.data_loss(&mixed, data, false)?;
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let ext = tape.constant(Tensor::scalar(self.loss_scale * raw));
        let (report, _) = self.assemble(&mut tape, ext, pv, dual, raw)?;
        Ok(report)
    }

    /// Full objective and its gradients at `logits` under fixed `noise`.
    pub fn evaluate(
        &self,
        logits: &Tensor,
        noise: &Tensor,
        dual: &DualState,
        data: &TeacherBatch,
    ) -> Result<Evaluation> {
        if noise.shape() != logits.shape() {
            return Err(Error::Dimension("noise and logits differ in shape".into()));
        }
        let mut tape = Tape::new();
        let pi = tape.leaf(logits.clone(), true);
        let p = relaxed_on_tape(&mut tape, pi, noise, self.tau)?;
        let probs = tape.value(p).clone();
        let mixed = mix_weights(self.pool, &probs)?;
        let (raw, grads) = self.data_loss(&mixed, data, true)?;
        let grads = grads.expect("gradients requested");
        let nb = self.pool.bitset().len();
        let mut gp = Vec::with_capacity(grads.len() * nb);
        for (m, gw) in grads.iter().enumerate() {
            for b in 0..nb {
                let dot: f64 = gw.iter().zip(self.pool.candidate(m, b).data()).map(|(g, w)| g * w).sum();
                gp.push(self.loss_scale * dot);
            }
        }
        let ext = tape.external(p, self.loss_scale * raw, gp)?;
        let budget_p = match self.budget_estimate {
            BudgetEstimate::Sampled => p,
            BudgetEstimate::MeanField => tape.softmax_rows(pi, self.tau)?,
        };
        let (report, lambdas) = self.assemble(&mut tape, ext, budget_p, dual, raw)?;
        let total = lambdas.total;
        tape.backward(total)?;
        let expected = if lambdas.l1.is_some() { 3 } else { 1 };
        ensure_frozen(&tape, expected)?;
        let grad_of = |v: Option<Var>| v.and_then(|v| tape.grad(v)).map_or(0.0, |g| g[0]);
        Ok(Evaluation {
            report,
            probs,
            grad_logits: tape.grad(pi).expect("logit gradient").to_vec(),
            grad_lambda1: grad_of(lambdas.l1),
            grad_lambda2: grad_of(lambdas.l2),
        })
    }

    /// Builds the budget term on top of the data term `ext`.
    fn assemble(
        &self,
        tape: &mut Tape,
        ext: Var,
        budget_p: Var,
        dual: &DualState,
        raw: f64,
    ) -> Result<(LossReport, Penalty)> {
        let c = tape.constant(self.coeffs.clone());
        let weighted = tape.mul(budget_p, c)?;
        let bhat = tape.sum(weighted);
        let dev = tape.add_scalar(bhat, -self.b_target);
        let recon = tape.value(ext).item()?;
        let deviation = tape.value(dev).item()?;
        match self.mode {
            Stage1Mode::MultiplicativePenalty(shape) => {
                let d2 = tape.square(dev);
                let shifted = tape.add_scalar(d2, shape.eps);
                let inner = tape.ln(shifted);
                let base = tape.clamp_min(inner, 1e-12);
                let powered = tape.powf(base, shape.gamma);
                let scaled = tape.scale(powered, shape.beta);
                let factor = tape.clamp_min(scaled, shape.floor);
                let total = tape.mul(ext, factor)?;
                let report = LossReport {
                    recon,
                    raw_recon: raw,
                    deviation,
                    penalty_linear: 0.0,
                    penalty_quadratic: 0.0,
                    multiplier: tape.value(factor).item()?,
                    total: tape.value(total).item()?,
                };
                Ok((
                    report,
                    Penalty {
                        total,
                        l1: None,
                        l2: None,
                    },
                ))
            }
            _ => {
                let l1 = tape.leaf(Tensor::scalar(dual.lambda1), true);
                let l2 = tape.leaf(Tensor::scalar(dual.lambda2), true);
                let lin = tape.mul(l1, dev)?;
                let d2 = tape.square(dev);
                let quad = tape.mul(l2, d2)?;
                let partial = tape.add(ext, lin)?;
                let total = tape.add(partial, quad)?;
                let report = LossReport {
                    recon,
                    raw_recon: raw,
                    deviation,
                    penalty_linear: tape.value(lin).item()?,
                    penalty_quadratic: tape.value(quad).item()?,
                    multiplier: 1.0,
                    total: tape.value(total).item()?,
                };
                Ok((
                    report,
                    Penalty {
                        total,
                        l1: Some(l1),
                        l2: Some(l2),
                    },
                ))
            }
        }
    }
}

struct Penalty {
    total: Var,
    l1: Option<Var>,
    l2: Option<Var>,
}

/// Structural frozen-weights check: only the expected trainable leaves hold gradients.
/// Teacher-forced reconstruction error of a discrete assignment, averaged
/// over sequences and layers, without loss scaling.
pub fn assignment_error(
    model: &FullPrecisionModel,
    pool: &CandidatePool,
    chosen: &[u32],
    data: &TeacherBatch,
) -> Result<f64> {
    if chosen.len() != pool.num_modules() {
        return Err(Error::Configuration(format!(
            "{} bit choices for {} modules",
            chosen.len(),
            pool.num_modules()
        )));
    }
    let weights = chosen
        .iter()
        .enumerate()
        .map(|(m, &b)| {
            let k = pool
                .bitset()
                .index_of(b)
                .ok_or_else(|| Error::Configuration(format!("bit-width {b} has no candidate")))?;
            Ok(pool.candidate(m, k).clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let min = pool.bitset().min() as f64;
    let objective = Stage1Objective::new(model, pool, Stage1Mode::AugmentedLagrangian, min)?
        .with_threads(parallel::worker_count());
    Ok(objective.data_loss(&weights, data, false)?.0)
}

fn ensure_frozen(tape: &Tape, expected: usize) -> Result<()> {
    let n = tape.gradient_buffer_count();
    if n != expected {
        return Err(Error::Configuration(format!(
            "frozen-weights check failed: {n} gradient buffers, expected {expected}"
        )));
    }
    Ok(())
}

/// Learned scores `s[m, b]` and their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftScores {
    pub modules: Vec<ModuleId>,
    pub bits: Vec<u32>,
    pub param_counts: Vec<u64>,
    pub scores: Vec<Vec<f64>>,
    pub expected_avg_bits: f64,
    pub budget_target: f64,
    pub spec_hash: String,
    pub steps: usize,
    pub seed: u64,
    pub mode: String,
    pub relaxation: RelaxationMode,
    pub extraction: ScoreExtraction,
}

pub const SCORES_MAGIC: &str = "# bitbudget soft-scores v1";

impl SoftScores {
    /// Validates the rows and computes `expected_avg_bits` from them.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        modules: Vec<ModuleId>,
        bits: Vec<u32>,
        param_counts: Vec<u64>,
        scores: Vec<Vec<f64>>,
        budget_target: f64,
        spec_hash: String,
        steps: usize,
        seed: u64,
        mode: String,
        relaxation: RelaxationMode,
        extraction: ScoreExtraction,
    ) -> Result<Self> {
        if modules.len() != scores.len() || modules.len() != param_counts.len() {
            return Err(Error::Dimension(format!(
                "{} modules, {} score rows, {} parameter counts",
                modules.len(),
                scores.len(),
                param_counts.len()
            )));
        }
        for (m, row) in modules.iter().zip(&scores) {
            if row.len() != bits.len() {
                return Err(Error::Dimension(format!("module {m}: {} scores for {} bit-widths", row.len(), bits.len())));
            }
            if row.iter().any(|s| !(0.0..=1.0).contains(s)) {
                return Err(Error::Format(format!("module {m}: score outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Format(format!("module {m}: scores sum to {sum}")));
            }
        }
        let flat: Vec<f64> = scores.iter().flatten().copied().collect();
        let p = Tensor::new(vec![modules.len(), bits.len()], flat)?;
        let expected_avg_bits = if modules.is_empty() {
            0.0
        } else {
            expected_avg_bits(&p, &bits, &param_counts)?
        };
        Ok(Self {
            modules,
            bits,
            param_counts,
            scores,
            expected_avg_bits,
            budget_target,
            spec_hash,
            steps,
            seed,
            mode,
            relaxation,
            extraction,
        })
    }

    /// `Σ_b b·s[m, b]` per module.
    pub fn expected_bits_per_module(&self) -> Vec<f64> {
        self.scores
            .iter()
            .map(|row| row.iter().zip(&self.bits).map(|(s, &b)| s * b as f64).sum())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(" ");
        let mut out = String::new();
        out.push_str(SCORES_MAGIC);
        out.push('\n');
        out.push_str(&format!("spec_hash {}\n", self.spec_hash));
        out.push_str(&format!("bits {}\n", join(self.bits.iter().map(u32::to_string).collect())));
        out.push_str(&format!("b_target {}\n", fmt17(self.budget_target)));
        out.push_str(&format!("steps {}\n", self.steps));
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("mode {}\n", self.mode));
        out.push_str(&format!("relaxation {}\n", self.relaxation));
        out.push_str(&format!("extraction {}\n", self.extraction));
        out.push_str(&format!("expected_avg_bits {}\n", fmt17(self.expected_avg_bits)));
        out.push_str(&format!(
            "param_counts {}\n",
            join(self.param_counts.iter().map(u64::to_string).collect())
        ));
        let cols: Vec<String> = self.bits.iter().map(|b| format!("s{b}")).collect();
        out.push_str(&format!("layer proj {} expected_bits\n", cols.join(" ")));
        for ((m, row), e) in self.modules.iter().zip(&self.scores).zip(self.expected_bits_per_module()) {
            let vals: Vec<String> = row.iter().map(|&s| fmt17(s)).collect();
            out.push_str(&format!("{} {} {} {}\n", m.layer, m.proj, vals.join(" "), fmt17(e)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(SCORES_MAGIC) {
            return Err(Error::Format("not a soft-scores file".into()));
        }
        let mut header = std::collections::BTreeMap::new();
        for line in lines.by_ref() {
            if line.starts_with("layer proj") {
                break;
            }
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("malformed header line `{line}`")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Format(format!("missing header `{k}`")))
        };
        let bits: Vec<u32> = parse_list(&get("bits")?)?;
        let param_counts: Vec<u64> = parse_list(&get("param_counts")?)?;
        let mut modules = Vec::new();
        let mut scores = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != bits.len() + 3 {
                return Err(Error::Format(format!("malformed score line `{line}`")));
            }
            let layer = f[0]
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("bad layer `{}`", f[0])))?;
            modules.push(ModuleId::new(layer, f[1].parse()?));
            scores.push(parse_list(&f[2..2 + bits.len()].join(" "))?);
        }
        let parsed = Self::new(
            modules,
            bits,
            param_counts,
            scores,
            parse_num(&get("b_target")?)?,
            get("spec_hash")?,
            parse_num(&get("steps")?)?,
            parse_num(&get("seed")?)?,
            get("mode")?,
            get("relaxation")?.parse()?,
            get("extraction")?.parse()?,
        )?;
        let stated: f64 = parse_num(&get("expected_avg_bits")?)?;
        if (stated - parsed.expected_avg_bits).abs() > 1e-9 {
            return Err(Error::Format(format!(
                "stated expected bits {stated} disagree with the scores ({})",
                parsed.expected_avg_bits
            )));
        }
        Ok(parsed)
    }
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_num<T: FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("cannot parse `{s}`")))
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    s.split_whitespace().map(parse_num).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dual_lr: f64,
    pub tau: f64,
    pub seed: u64,
    pub b_target: f64,
    pub mode: Stage1Mode,
    pub relaxation: RelaxationMode,
    pub optimizer: Optimizer,
    pub extraction: ScoreExtraction,
    pub budget_estimate: BudgetEstimate,
    /// Divide the data term by its value with every module at the lowest bit-width.
    pub normalize_loss: bool,
    pub lambda1_init: f64,
    pub lambda2_init: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            lr: 5e-3,
            dual_lr: 0.01,
            tau: 1.0,
            seed: 0,
            b_target: 3.0,
            mode: Stage1Mode::AugmentedLagrangian,
            relaxation: RelaxationMode::GumbelSoftmax,
            optimizer: Optimizer::adam(),
            extraction: ScoreExtraction::NoiseFree,
            budget_estimate: BudgetEstimate::MeanField,
            normalize_loss: true,
            lambda1_init: 0.0,
            lambda2_init: 10.0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self, bitset: &BitWidthSet) -> Result<()> {
        check_budget(bitset, self.b_target)?;
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        for (name, v) in [("learning rate", self.lr), ("dual learning rate", self.dual_lr), ("temperature", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} {v} must be positive")));
            }
        }
        if self.relaxation == RelaxationMode::BinarySigmoid && bitset.len() != 2 {
            return Err(Error::Configuration(format!(
                "binary sigmoid relaxation needs exactly 2 bit-widths, got {}",
                bitset.len()
            )));
        }
        if !self.lambda1_init.is_finite() || !(self.lambda2_init >= 0.0 && self.lambda2_init.is_finite()) {
            return Err(Error::Parameter("initial multipliers must be finite with λ2 ≥ 0".into()));
        }
        if let Stage1Mode::MultiplicativePenalty(s) = self.mode {
            if !(s.eps > 0.0 && s.floor > 0.0 && s.beta > 0.0 && s.gamma > 0.0) {
                return Err(Error::Parameter("multiplicative penalty parameters must be positive".into()));
            }
        }
        Ok(())
    }
}

/// State after one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub report: LossReport,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Noise-free expected average bits after the update.
    pub expected_bits: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Outcome {
    pub scores: SoftScores,
    pub log: Vec<StepRecord>,
    pub mask: MaskState,
    pub dual: DualState,
    pub loss_scale: f64,
}

/// Runs Stage I over `train` (every sequence of the calibration set) and
/// returns the extracted scores with the per-step log.
///
/// Step `k` uses the `k mod ⌊n/batch⌋`-th contiguous batch and its own noise
/// stream. Primal: one optimizer step on the logits. Dual: projected ascent on
/// `(λ1, λ2)`. A non-finite loss aborts with [`Error::Divergence`].
pub fn train_stage1(
    model: &FullPrecisionModel,
    pool: &CandidatePool,
    train: &TokenBatch,
    config: &Stage1Config,
) -> Result<Stage1Outcome> {
    config.validate(pool.bitset())?;
    let nseq = train.batch_size();
    let nbatches = nseq / config.batch_size;
    if nbatches == 0 {
        return Err(Error::Parameter(format!(
            "batch size {} exceeds {nseq} training sequences",
            config.batch_size
        )));
    }
    let threads = parallel::worker_count();
    let teacher = TeacherBatch::new(model, train.clone())?;
    let mut objective = Stage1Objective::new(model, pool, config.mode, config.b_target)?
        .with_tau(config.tau)?
        .with_budget_estimate(config.budget_estimate)
        .with_threads(threads);
    if config.normalize_loss {
        let low = objective.uniform_data_loss(Some(0), &teacher)?;
        let reference = match config.mode {
            Stage1Mode::CrossEntropy => low - objective.uniform_data_loss(None, &teacher)?,
            _ => low,
        };
        if reference > 0.0 && reference.is_finite() {
            objective = objective.with_loss_scale(1.0 / reference)?;
        }
    }

    let nb = pool.bitset().len();
    let mut mask = MaskState::new(pool.num_modules(), nb, config.tau, config.seed, config.relaxation)?;
    let mut dual = DualState::new(config.dual_lr)?;
    dual.lambda1 = config.lambda1_init;
    dual.lambda2 = config.lambda2_init;
    let mut opt = OptimizerState::new(config.optimizer, pool.num_modules() * nb);
    let counts = model.spec().param_counts();
    let mut log = Vec::with_capacity(config.steps);
    let mut last_probs = None;

    for step in 0..config.steps {
        let start = (step % nbatches) * config.batch_size;
        let indices: Vec<usize> = (start..start + config.batch_size).collect();
        let data = teacher.select(&indices);
        let noise = mask.step_noise(step as u64);
        let eval = objective.evaluate(mask.logits(), &noise, &dual, &data)?;
        let r = eval.report;
        if !r.total.is_finite() || eval.grad_logits.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: format!(
                    "total {} (recon {}, deviation {}, λ1 {}, λ2 {})",
                    r.total, r.recon, r.deviation, dual.lambda1, dual.lambda2
                ),
            });
        }
        opt.step(mask.logits_mut(), &eval.grad_logits, config.lr);
        if config.mode.uses_duals() {
            dual.ascend(eval.grad_lambda1, eval.grad_lambda2);
        }
        let expected_bits = expected_avg_bits(&mask.mean_field(), pool.bitset().bits(), &counts)?;
        log.push(StepRecord {
            step,
            report: r,
            lambda1: dual.lambda1,
            lambda2: dual.lambda2,
            expected_bits,
        });
        last_probs = Some(eval.probs);
    }

    let probs = match config.extraction {
        ScoreExtraction::NoiseFree => mask.mean_field(),
        ScoreExtraction::FinalSample => match last_probs {
            Some(p) => p,
            None => mask.mean_field(),
        },
        ScoreExtraction::SampleAverage(n) => {
            let mut rng = seed::stream(config.seed, Domain::ScoreSampling, 0);
            let mut acc = vec![0.0; mask.logits().numel()];
            for _ in 0..n {
                let noise = mask.sample_noise(&mut rng);
                let p = sample_relaxed_probs(&mask, &noise)?;
                acc.iter_mut().zip(p.data()).for_each(|(a, x)| *a += x);
            }
            acc.iter_mut().for_each(|a| *a /= n as f64);
            Tensor::new(mask.logits().shape().to_vec(), acc)?
        }
    };
    let scores = SoftScores::new(
        pool.modules().to_vec(),
        pool.bitset().bits().to_vec(),
        counts,
        (0..probs.rows()).map(|m| probs.row(m).to_vec()).collect(),
        config.b_target,
        model.spec().fingerprint(),
        config.steps,
        config.seed,
        config.mode.tag().to_string(),
        config.relaxation,
        config.extraction,
    )?;
    Ok(Stage1Outcome {
        scores,
        log,
        mask,
        dual,
        loss_scale: objective.loss_scale(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{generate_calibration, CalibrationConfig};
    use crate::model::{ModelSpec, Proj};
    use crate::quant::{build_pool, ModuleCandidates};
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            num_layers: 1,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 16,
            max_seq_len: 6,
            seed: 3,
            init_std: 0.3,
            module_scales: Vec::new(),
        }
    }

    struct Fixture {
        model: FullPrecisionModel,
        pool: CandidatePool,
        data: TeacherBatch,
    }

    fn fixture(spec: ModelSpec) -> Fixture {
        let model = FullPrecisionModel::build(spec.clone()).unwrap();
        let pool = build_pool(&model, &BitWidthSet::default(), 4).unwrap();
        let cfg = CalibrationConfig {
            num_sequences: 2,
            seq_len: spec.max_seq_len,
            holdout_fraction: 0.0,
            ..Default::default()
        };
        let calib = generate_calibration(spec.vocab_size, &cfg).unwrap();
        let data = TeacherBatch::new(&model, calib.train_batch().unwrap()).unwrap();
        Fixture { model, pool, data }
    }

    fn random_logits(m: usize, nb: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![m, nb], (0..m * nb).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_rel(a: &[f64], b: &[f64], tol: f64) {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * scale, "{x} vs {y} (scale {scale})");
        }
    }

    #[test]
    fn equal_logits_without_noise_are_uniform() {
        let s = MaskState::new(3, 3, 1.0, 0, RelaxationMode::GumbelSoftmax).unwrap();
        let p = sample_relaxed_probs(&s, &Tensor::zeros(&[3, 3])).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn vanishing_temperature_gives_one_hot() {
        let logits = Tensor::from_rows(&[vec![0.1, 0.5, -0.2]]).unwrap();
        let noise = Tensor::from_rows(&[vec![0.3, -0.4, 0.2]]).unwrap();
        let s = MaskState::from_logits(logits, 1e-4, 0, RelaxationMode::GumbelSoftmax).unwrap();
        let p = sample_relaxed_probs(&s, &noise).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
        assert!(p.data()[1] < 1e-12 && p.data()[2] < 1e-12);
    }

    #[test]
    fn gumbel_max_frequencies_match_softmax() {
        let logits = Tensor::from_rows(&[vec![0.5, -0.3, 1.2]]).unwrap();
        let s = MaskState::from_logits(logits.clone(), 1.0, 0, RelaxationMode::GumbelSoftmax).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let g = s.sample_noise(&mut rng);
            let z: Vec<f64> = logits.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
            let arg = (0..3).max_by(|&i, &j| z[i].total_cmp(&z[j])).unwrap();
            counts[arg] += 1;
        }
        let e: Vec<f64> = logits.data().iter().map(|x| x.exp()).collect();
        let tot: f64 = e.iter().sum();
        for (c, ei) in counts.iter().zip(&e) {
            assert!((*c as f64 / n as f64 - ei / tot).abs() < 0.01);
        }
    }

    #[test]
    fn binary_relaxation_is_a_shifted_sigmoid() {
        let logits = Tensor::from_rows(&[vec![0.2, 0.9], vec![-1.0, 0.4]]).unwrap();
        let s = MaskState::from_logits(logits.clone(), 0.7, 5, RelaxationMode::BinarySigmoid).unwrap();
        let noise = s.step_noise(0);
        let p = sample_relaxed_probs(&s, &noise).unwrap();
        for m in 0..2 {
            assert_eq!(noise.row(m)[0], 0.0);
            let z = (logits.row(m)[1] - logits.row(m)[0] + noise.row(m)[1]) / 0.7;
            let high = 1.0 / (1.0 + (-z).exp());
            assert!((p.row(m)[1] - high).abs() < 1e-12);
            assert!((p.row(m)[0] + p.row(m)[1] - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            MaskState::new(2, 3, 1.0, 0, RelaxationMode::BinarySigmoid),
            Err(Error::Configuration(_))
        ));
        assert!(matches!(
            MaskState::new(2, 3, 0.0, 0, RelaxationMode::GumbelSoftmax),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn mixing_examples() {
        let f = fixture(tiny_spec());
        let m = f.pool.num_modules();
        let mut one_hot = vec![0.0; m * 3];
        (0..m).for_each(|i| one_hot[i * 3 + 1] = 1.0);
        let mixed = mix_weights(&f.pool, &Tensor::new(vec![m, 3], one_hot).unwrap()).unwrap();
        for (i, w) in mixed.iter().enumerate() {
            assert_eq!(w, f.pool.candidate(i, 1));
        }

        let c = Tensor::from_rows(&[vec![0.5, -1.25], vec![2.0, 0.125]]).unwrap();
        let neg = Tensor::new(c.shape().to_vec(), c.data().iter().map(|x| -x).collect()).unwrap();
        let pool = CandidatePool::from_parts(
            BitWidthSet::new(vec![2, 4]).unwrap(),
            2,
            vec![ModuleId::new(1, Proj::Q)],
            vec![ModuleCandidates {
                fp: c.clone(),
                quantized: vec![c.clone(), neg],
            }],
        )
        .unwrap();
        let mixed = mix_weights(&pool, &Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap()).unwrap();
        assert!(mixed[0].data().iter().all(|&x| x == 0.0));
        assert!(matches!(
            mix_weights(&pool, &Tensor::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap()),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn mixed_weight_derivative_is_the_candidate() {
        let f = fixture(tiny_spec());
        let m = f.pool.num_modules();
        let p = MaskState::from_logits(random_logits(m, 3, 1), 1.0, 0, RelaxationMode::GumbelSoftmax)
            .unwrap()
            .mean_field();
        let h = 1e-4;
        for b in 0..3 {
            let shift = |sign: f64| {
                let mut q = p.clone();
                q.data_mut()[b] += sign * h;
                mix_weights(&f.pool, &q).unwrap()[0].clone()
            };
            let (plus, minus) = (shift(1.0), shift(-1.0));
            let fd: Vec<f64> = plus.data().iter().zip(minus.data()).map(|(a, c)| (a - c) / (2.0 * h)).collect();
            assert_rel(&fd, f.pool.candidate(0, b).data(), 1e-6);
        }
    }

    #[test]
    fn expected_bits_examples() {
        let bits = [2, 3, 4];
        let at3 = Tensor::from_rows(&vec![vec![0.0, 1.0, 0.0]; 4]).unwrap();
        assert_eq!(expected_avg_bits(&at3, &bits, &[1, 2, 3, 4]).unwrap(), 3.0);
        let uni = Tensor::from_rows(&vec![vec![1.0 / 3.0; 3]; 2]).unwrap();
        assert!((expected_avg_bits(&uni, &bits, &[5, 9]).unwrap() - 3.0).abs() < 1e-15);
        let split = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(expected_avg_bits(&split, &bits, &[100, 300]).unwrap(), 3.5);
    }

    #[test]
    fn augmented_lagrangian_arithmetic() {
        let dual = DualState {
            lambda1: 1.0,
            lambda2: 2.0,
            learning_rate: 0.1,
        };
        assert!((augmented_lagrangian(0.5, 0.1, &dual) - 0.62).abs() < 1e-15);
        assert_eq!(augmented_lagrangian(0.5, 0.0, &dual), 0.5);
    }

    #[test]
    fn full_precision_candidates_reconstruct_exactly() {
        let f = fixture(tiny_spec());
        let fp_pool = CandidatePool::from_parts(
            f.pool.bitset().clone(),
            4,
            f.pool.modules().to_vec(),
            (0..f.pool.num_modules())
                .map(|m| {
                    let fp = f.pool.module(m).fp.clone();
                    ModuleCandidates {
                        quantized: vec![fp.clone(), f.pool.candidate(m, 1).clone(), f.pool.candidate(m, 2).clone()],
                        fp,
                    }
                })
                .collect(),
        )
        .unwrap();
        let obj = Stage1Objective::new(&f.model, &fp_pool, Stage1Mode::AugmentedLagrangian, 2.0).unwrap();
        let mut p = vec![0.0; fp_pool.num_modules() * 3];
        p.iter_mut().step_by(3).for_each(|x| *x = 1.0);
        let p = Tensor::new(vec![fp_pool.num_modules(), 3], p).unwrap();
        let dual = DualState {
            lambda1: 0.7,
            lambda2: 1.3,
            learning_rate: 0.1,
        };
        let r = obj.loss(&p, &dual, &f.data).unwrap();
        assert_eq!(r.recon, 0.0);
        // deviation is exactly zero at b_target = 2 with every module at 2 bits
        assert_eq!(r.deviation, 0.0);
        assert_eq!(r.total, r.recon);
    }

    #[test]
    fn report_components_are_consistent() {
        let f = fixture(tiny_spec());
        let m = f.pool.num_modules();
        let obj = Stage1Objective::new(&f.model, &f.pool, Stage1Mode::AugmentedLagrangian, 2.6)
            .unwrap()
            .with_loss_scale(3.0)
            .unwrap();
        let dual = DualState {
            lambda1: -0.4,
            lambda2: 0.9,
            learning_rate: 0.1,
        };
        let state = MaskState::from_logits(random_logits(m, 3, 4), 1.0, 0, RelaxationMode::GumbelSoftmax).unwrap();
        let r = obj.evaluate(state.logits(), &state.step_noise(0), &dual, &f.data).unwrap().report;
        assert!((r.total - augmented_lagrangian(r.recon, r.deviation, &dual)).abs() < 1e-12);
        assert!((r.recon - 3.0 * r.raw_recon).abs() < 1e-15);
    }

    #[test]
    fn budget_outside_bitset_is_rejected() {
        let f = fixture(tiny_spec());
        let low = Stage1Objective::new(&f.model, &f.pool, Stage1Mode::AugmentedLagrangian, 1.5);
        assert!(matches!(low, Err(Error::InfeasibleBudget { .. })));
        let high = Stage1Objective::new(&f.model, &f.pool, Stage1Mode::AugmentedLagrangian, 4.5);
        assert!(matches!(high, Err(Error::BudgetOutOfRange { .. })));
    }

    /// Central-difference check of every logit and multiplier gradient.
    fn check_gradients(mode: Stage1Mode, target: f64, estimate: BudgetEstimate, logits: Tensor) {
        let f = fixture(tiny_spec());
        let obj = Stage1Objective::new(&f.model, &f.pool, mode, target)
            .unwrap()
            .with_budget_estimate(estimate)
            .with_loss_scale(7.0)
            .unwrap();
        let state = MaskState::from_logits(logits, 1.0, 2, RelaxationMode::GumbelSoftmax).unwrap();
        let noise = state.step_noise(3);
        let dual = DualState {
            lambda1: 0.3,
            lambda2: 0.8,
            learning_rate: 0.1,
        };
        let eval = obj.evaluate(state.logits(), &noise, &dual, &f.data).unwrap();
        let total = |l: &Tensor, d: &DualState| obj.evaluate(l, &noise, d, &f.data).unwrap().report.total;
        let h = 1e-4;
        let fd: Vec<f64> = (0..state.logits().numel())
            .map(|i| {
                let mut a = state.logits().clone();
                a.data_mut()[i] += h;
                let mut b = state.logits().clone();
                b.data_mut()[i] -= h;
                (total(&a, &dual) - total(&b, &dual)) / (2.0 * h)
            })
            .collect();
        assert_rel(&eval.grad_logits, &fd, 1e-4);
        if mode.uses_duals() {
            let shifted = |d1: f64, d2: f64| DualState {
                lambda1: dual.lambda1 + d1,
                lambda2: dual.lambda2 + d2,
                ..dual
            };
            let g1 = (total(state.logits(), &shifted(h, 0.0)) - total(state.logits(), &shifted(-h, 0.0))) / (2.0 * h);
            let g2 = (total(state.logits(), &shifted(0.0, h)) - total(state.logits(), &shifted(0.0, -h))) / (2.0 * h);
            assert_rel(&[eval.grad_lambda1, eval.grad_lambda2], &[g1, g2], 1e-4);
            assert_eq!(eval.grad_lambda1, eval.report.deviation);
        }
    }

    #[test]
    fn al_gradients_match_finite_differences() {
        let m = tiny_spec().num_layers * 7;
        check_gradients(Stage1Mode::AugmentedLagrangian, 3.1, BudgetEstimate::Sampled, random_logits(m, 3, 8));
        check_gradients(Stage1Mode::AugmentedLagrangian, 2.4, BudgetEstimate::MeanField, random_logits(m, 3, 9));
    }

    #[test]
    fn multiplicative_gradients_match_finite_differences() {
        // logits favoring 4 bits against a 2-bit target keep the factor above its floor
        let m = tiny_spec().num_layers * 7;
        let mut logits = random_logits(m, 3, 10);
        logits.data_mut().iter_mut().skip(2).step_by(3).for_each(|x| *x += 3.0);
        let mode = Stage1Mode::MultiplicativePenalty(PenaltyShape::default());
        check_gradients(mode, 2.0, BudgetEstimate::Sampled, logits);
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let m = tiny_spec().num_layers * 7;
        check_gradients(Stage1Mode::CrossEntropy, 3.0, BudgetEstimate::Sampled, random_logits(m, 3, 11));
    }

    #[test]
    fn duals_rise_under_sustained_violation() {
        let mut d = DualState::new(0.05).unwrap();
        let dev = 0.3;
        let mut prev = (d.lambda1, d.lambda2);
        for _ in 0..50 {
            d.ascend(dev, dev * dev);
            assert!(d.lambda1 >= prev.0 && d.lambda2 >= prev.1);
            prev = (d.lambda1, d.lambda2);
        }
        let mut neg = DualState::new(0.5).unwrap();
        neg.ascend(-1.0, -1.0);
        assert_eq!(neg.lambda2, 0.0);
    }

    #[test]
    fn frozen_primal_gives_monotone_duals_through_the_objective() {
        let f = fixture(tiny_spec());
        let m = f.pool.num_modules();
        let obj = Stage1Objective::new(&f.model, &f.pool, Stage1Mode::AugmentedLagrangian, 2.2)
            .unwrap()
            .with_budget_estimate(BudgetEstimate::MeanField);
        let logits = random_logits(m, 3, 12);
        let noise = Tensor::zeros(&[m, 3]);
        let mut d = DualState::new(0.1).unwrap();
        let mut prev = (d.lambda1, d.lambda2);
        for _ in 0..5 {
            let e = obj.evaluate(&logits, &noise, &d, &f.data).unwrap();
            assert!(e.report.deviation > 0.0);
            d.ascend(e.grad_lambda1, e.grad_lambda2);
            assert!(d.lambda1 >= prev.0 && d.lambda2 >= prev.1);
            prev = (d.lambda1, d.lambda2);
        }
    }

    #[test]
    fn evaluation_is_independent_of_worker_count() {
        let f = fixture(tiny_spec());
        let m = f.pool.num_modules();
        let state = MaskState::from_logits(random_logits(m, 3, 13), 1.0, 4, RelaxationMode::GumbelSoftmax).unwrap();
        let dual = DualState::new(0.1).unwrap();
        let run = |threads| {
            Stage1Objective::new(&f.model, &f.pool, Stage1Mode::AugmentedLagrangian, 3.0)
                .unwrap()
                .with_threads(threads)
                .evaluate(state.logits(), &state.step_noise(0), &dual, &f.data)
                .unwrap()
        };
        assert_eq!(run(1), run(3));
    }

    fn short_config(steps: usize) -> Stage1Config {
        Stage1Config {
            steps,
            batch_size: 1,
            optimizer: Optimizer::adam(),
            lr: 0.05,
            dual_lr: 0.05,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_return_the_initial_softmax() {
        let f = fixture(tiny_spec());
        let out = train_stage1(&f.model, &f.pool, &f.data.tokens, &short_config(0)).unwrap();
        assert!(out.log.is_empty());
        for row in &out.scores.scores {
            for s in row {
                assert!((s - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_every_step() {
        let f = fixture(tiny_spec());
        for mode in [
            Stage1Mode::AugmentedLagrangian,
            Stage1Mode::MultiplicativePenalty(PenaltyShape::default()),
            Stage1Mode::CrossEntropy,
        ] {
            let cfg = Stage1Config {
                mode,
                ..short_config(6)
            };
            let a = train_stage1(&f.model, &f.pool, &f.data.tokens, &cfg).unwrap();
            let b = train_stage1(&f.model, &f.pool, &f.data.tokens, &cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.log.len(), 6);
            assert_eq!(a.scores.mode, mode.tag());
            let last = a.log.last().unwrap();
            assert_eq!(last.expected_bits, a.scores.expected_avg_bits);
        }
    }

    #[test]
    fn score_extractions_produce_valid_rows() {
        let f = fixture(tiny_spec());
        for extraction in [
            ScoreExtraction::NoiseFree,
            ScoreExtraction::FinalSample,
            ScoreExtraction::SampleAverage(16),
        ] {
            let cfg = Stage1Config {
                extraction,
                ..short_config(4)
            };
            let out = train_stage1(&f.model, &f.pool, &f.data.tokens, &cfg).unwrap();
            for row in &out.scores.scores {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert_eq!(out.scores.extraction, extraction);
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_the_step() {
        let f = fixture(tiny_spec());
        let mut broken = Vec::new();
        for m in 0..f.pool.num_modules() {
            let mut c = f.pool.module(m).clone();
            c.quantized[0].data_mut()[0] = f64::NAN;
            broken.push(c);
        }
        let pool = CandidatePool::from_parts(f.pool.bitset().clone(), 4, f.pool.modules().to_vec(), broken).unwrap();
        let cfg = Stage1Config {
            normalize_loss: false,
            ..short_config(3)
        };
        let err = train_stage1(&f.model, &pool, &f.data.tokens, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err:?}");
    }

    #[test]
    fn scores_text_round_trips() {
        let f = fixture(tiny_spec());
        let out = train_stage1(&f.model, &f.pool, &f.data.tokens, &short_config(3)).unwrap();
        let text = out.scores.to_text();
        let back = SoftScores::from_text(&text).unwrap();
        assert_eq!(back, out.scores);
        assert!(SoftScores::from_text(&text.replace("bits 2 3 4", "bits 2 3")).is_err());
    }

    proptest! {
        #[test]
        fn relaxed_rows_sum_to_one(seed in any::<u64>(), tau in 0.05f64..5.0, spread in 0.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::new(vec![5, 3], (0..15).map(|_| rng.random_range(-spread..=spread)).collect()).unwrap();
            let s = MaskState::from_logits(logits, tau, seed, RelaxationMode::GumbelSoftmax).unwrap();
            let p = sample_relaxed_probs(&s, &s.step_noise(0)).unwrap();
            for m in 0..5 {
                prop_assert!((p.row(m).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
