//! Run configuration: a flat `key = value` file, overridable by flags.
//!
//! One `seed` drives model initialization, calibration sampling, mask noise
//! and trace probes.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use bitbudget_core::alloc::SolverChoice;
use bitbudget_core::calib::{CalibrationConfig, CalibrationSource};
use bitbudget_core::mask::{
    check_budget, BudgetEstimate, Optimizer, PenaltyShape, RelaxationMode, ScoreExtraction, Stage1Config, Stage1Mode,
};
use bitbudget_core::model::{ModelSpec, ModuleId, Proj};
use bitbudget_core::quant::BitWidthSet;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub init_std: f64,
    pub module_scales: Vec<(ModuleId, f64)>,
    pub seed: u64,
    pub bits: Vec<u32>,
    pub group_size: usize,
    pub num_sequences: usize,
    pub holdout_fraction: f64,
    pub source: CalibrationSource,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dual_lr: f64,
    pub tau: f64,
    pub mode: Stage1Mode,
    pub relaxation: RelaxationMode,
    pub optimizer: Optimizer,
    pub extraction: ScoreExtraction,
    pub budget_estimate: BudgetEstimate,
    pub normalize_loss: bool,
    pub lambda1_init: f64,
    pub lambda2_init: f64,
    pub b_target: f64,
    pub solver: SolverChoice,
    /// Budgets for allocation sweeps and the budget-error curve.
    pub budgets: Vec<f64>,
    /// Budgets at which `compare` trains and evaluates every method.
    pub compare_budgets: Vec<f64>,
    pub probes: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = ModelSpec::default();
        let calib = CalibrationConfig::default();
        let s1 = Stage1Config::default();
        Self {
            layers: spec.num_layers,
            hidden_dim: spec.hidden_dim,
            heads: spec.num_heads,
            ffn_dim: spec.ffn_dim,
            vocab: spec.vocab_size,
            seq_len: calib.seq_len,
            init_std: spec.init_std,
            module_scales: Vec::new(),
            seed: 0,
            bits: BitWidthSet::default().bits().to_vec(),
            group_size: 16,
            num_sequences: calib.num_sequences,
            holdout_fraction: calib.holdout_fraction,
            source: calib.source,
            steps: s1.steps,
            batch_size: s1.batch_size,
            lr: s1.lr,
            dual_lr: s1.dual_lr,
            tau: s1.tau,
            mode: s1.mode,
            relaxation: s1.relaxation,
            optimizer: s1.optimizer,
            extraction: s1.extraction,
            budget_estimate: s1.budget_estimate,
            normalize_loss: s1.normalize_loss,
            lambda1_init: s1.lambda1_init,
            lambda2_init: s1.lambda2_init,
            b_target: s1.b_target,
            solver: SolverChoice::Auto,
            budgets: vec![2.5, 2.7, 3.0, 3.2, 3.5],
            compare_budgets: vec![3.0],
            probes: 16,
            out: PathBuf::from("bitbudget-out"),
        }
    }
}

/// Module whose teacher weights are scaled in the controlled config.
pub const SENSITIVE_MODULE: ModuleId = ModuleId {
    layer: 1,
    proj: Proj::Down,
};
/// Same projection in the other layer, left at its initialized scale.
pub const TWIN_MODULE: ModuleId = ModuleId {
    layer: 2,
    proj: Proj::Down,
};
pub const SENSITIVE_SCALE: f64 = 8.0;

impl RunConfig {
    /// Two-layer model with [`SENSITIVE_MODULE`] scaled by [`SENSITIVE_SCALE`].
    pub fn controlled() -> Self {
        Self {
            layers: 2,
            hidden_dim: 32,
            heads: 4,
            ffn_dim: 64,
            vocab: 64,
            seq_len: 32,
            module_scales: vec![(SENSITIVE_MODULE, SENSITIVE_SCALE)],
            num_sequences: 64,
            steps: 400,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "controlled" => Ok(Self::controlled()),
            _ => Err(CliError::Config(format!("unknown preset `{name}` (default, controlled)"))),
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            num_layers: self.layers,
            hidden_dim: self.hidden_dim,
            num_heads: self.heads,
            ffn_dim: self.ffn_dim,
            vocab_size: self.vocab,
            max_seq_len: self.seq_len,
            seed: self.seed,
            init_std: self.init_std,
            module_scales: self.module_scales.clone(),
        }
    }

    pub fn bitset(&self) -> Result<BitWidthSet> {
        Ok(BitWidthSet::new(self.bits.clone())?)
    }

    pub fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            num_sequences: self.num_sequences,
            seq_len: self.seq_len,
            seed: self.seed,
            source: self.source.clone(),
            holdout_fraction: self.holdout_fraction,
        }
    }

    pub fn stage1(&self, b_target: f64) -> Stage1Config {
        Stage1Config {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            dual_lr: self.dual_lr,
            tau: self.tau,
            seed: self.seed,
            b_target,
            mode: self.mode,
            relaxation: self.relaxation,
            optimizer: self.optimizer,
            extraction: self.extraction,
            budget_estimate: self.budget_estimate,
            normalize_loss: self.normalize_loss,
            lambda1_init: self.lambda1_init,
            lambda2_init: self.lambda2_init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        let bitset = self.bitset()?;
        if self.seq_len < 2 {
            return Err(CliError::Config(format!("seq_len {} must be at least 2", self.seq_len)));
        }
        if self.group_size == 0 {
            return Err(CliError::Config("group_size must be positive".into()));
        }
        if self.batch_size > self.num_sequences {
            return Err(CliError::Config(format!(
                "batch_size {} exceeds num_sequences {}",
                self.batch_size, self.num_sequences
            )));
        }
        if self.probes == 0 {
            return Err(CliError::Config("probes must be positive".into()));
        }
        if self.calibration().holdout_count() == 0 {
            return Err(CliError::Config("holdout_fraction leaves no holdout sequences".into()));
        }
        self.stage1(self.b_target).validate(&bitset)?;
        for &b in self.budgets.iter().chain(&self.compare_budgets) {
            check_budget(&bitset, b)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut first = true;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if !first {
                    return Err(CliError::Config("`preset` must be the first setting".into()));
                }
                cfg = Self::preset(value)?;
            } else {
                cfg.set(key, value)
                    .map_err(|e| CliError::Config(format!("line {}: {e}", lineno + 1)))?;
            }
            first = false;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
        }
        fn list<T: FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| num(key, s))
                .collect()
        }
        let core = |e: bitbudget_core::Error| e.to_string();
        match key {
            "layers" => self.layers = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "ffn_dim" => self.ffn_dim = num(key, value)?,
            "vocab" => self.vocab = num(key, value)?,
            "seq_len" => self.seq_len = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            "scales" => self.module_scales = parse_scales(value)?,
            "seed" => self.seed = num(key, value)?,
            "bits" => self.bits = list(key, value)?,
            "group_size" => self.group_size = num(key, value)?,
            "num_sequences" => self.num_sequences = num(key, value)?,
            "holdout_fraction" => self.holdout_fraction = num(key, value)?,
            "source" => {
                self.source = match value {
                    "markov" => CalibrationSource::Markov,
                    "uniform" => CalibrationSource::UniformRandom,
                    path => CalibrationSource::File(PathBuf::from(path)),
                }
            }
            "steps" => self.steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "dual_lr" => self.dual_lr = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "mode" => {
                let shape = match self.mode {
                    Stage1Mode::MultiplicativePenalty(s) => s,
                    _ => PenaltyShape::default(),
                };
                self.mode = match Stage1Mode::from_tag(value).map_err(core)? {
                    Stage1Mode::MultiplicativePenalty(_) => Stage1Mode::MultiplicativePenalty(shape),
                    m => m,
                };
            }
            "mult_beta" | "mult_gamma" | "mult_eps" | "mult_floor" => {
                let Stage1Mode::MultiplicativePenalty(mut s) = self.mode else {
                    return Err(format!("`{key}` requires mode = mult earlier in the file"));
                };
                let v: f64 = num(key, value)?;
                match key {
                    "mult_beta" => s.beta = v,
                    "mult_gamma" => s.gamma = v,
                    "mult_eps" => s.eps = v,
                    _ => s.floor = v,
                }
                self.mode = Stage1Mode::MultiplicativePenalty(s);
            }
            "relaxation" => self.relaxation = value.parse().map_err(core)?,
            "optimizer" => self.optimizer = value.parse().map_err(core)?,
            "extraction" => self.extraction = value.parse().map_err(core)?,
            "budget_estimate" => self.budget_estimate = value.parse().map_err(core)?,
            "normalize_loss" => self.normalize_loss = num(key, value)?,
            "lambda1_init" => self.lambda1_init = num(key, value)?,
            "lambda2_init" => self.lambda2_init = num(key, value)?,
            "b_target" => self.b_target = num(key, value)?,
            "solver" => self.solver = value.parse().map_err(core)?,
            "budgets" => self.budgets = list(key, value)?,
            "compare_budgets" => self.compare_budgets = list(key, value)?,
            "probes" => self.probes = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every setting except `out`, one per line in a fixed order.
    pub fn canonical(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|b| format!("{b}")).collect::<Vec<_>>().join(",");
        let source = match &self.source {
            CalibrationSource::Markov => "markov".to_string(),
            CalibrationSource::UniformRandom => "uniform".to_string(),
            CalibrationSource::File(p) => p.display().to_string(),
        };
        let solver = match self.solver {
            SolverChoice::Auto => "auto",
            SolverChoice::Dp => "dp",
            SolverChoice::BranchAndBound => "bnb",
            SolverChoice::BruteForce => "brute",
        };
        let mut lines = vec![
            format!("layers = {}", self.layers),
            format!("hidden_dim = {}", self.hidden_dim),
            format!("heads = {}", self.heads),
            format!("ffn_dim = {}", self.ffn_dim),
            format!("vocab = {}", self.vocab),
            format!("seq_len = {}", self.seq_len),
            format!("init_std = {}", self.init_std),
            format!(
                "scales = {}",
                self.module_scales
                    .iter()
                    .map(|(m, f)| format!("{}.{}:{f}", m.layer, m.proj))
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            format!("seed = {}", self.seed),
            format!("bits = {}", self.bits.iter().map(u32::to_string).collect::<Vec<_>>().join(",")),
            format!("group_size = {}", self.group_size),
            format!("num_sequences = {}", self.num_sequences),
            format!("holdout_fraction = {}", self.holdout_fraction),
            format!("source = {source}"),
            format!("steps = {}", self.steps),
            format!("batch_size = {}", self.batch_size),
            format!("lr = {}", self.lr),
            format!("dual_lr = {}", self.dual_lr),
            format!("tau = {}", self.tau),
            format!("mode = {}", self.mode.tag()),
        ];
        if let Stage1Mode::MultiplicativePenalty(s) = self.mode {
            lines.push(format!("mult_beta = {}", s.beta));
            lines.push(format!("mult_gamma = {}", s.gamma));
            lines.push(format!("mult_eps = {}", s.eps));
            lines.push(format!("mult_floor = {}", s.floor));
        }
        lines.extend([
            format!("relaxation = {}", self.relaxation),
            format!("optimizer = {}", self.optimizer.name()),
            format!("extraction = {}", self.extraction),
            format!("budget_estimate = {}", self.budget_estimate),
            format!("normalize_loss = {}", self.normalize_loss),
            format!("lambda1_init = {}", self.lambda1_init),
            format!("lambda2_init = {}", self.lambda2_init),
            format!("b_target = {}", self.b_target),
            format!("solver = {solver}"),
            format!("budgets = {}", join(&self.budgets)),
            format!("compare_budgets = {}", join(&self.compare_budgets)),
            format!("probes = {}", self.probes),
        ]);
        lines.join("\n") + "\n"
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

fn parse_scales(value: &str) -> std::result::Result<Vec<(ModuleId, f64)>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let bad = || format!("scale `{item}` is not `layer.proj:factor`");
            let (module, factor) = item.split_once(':').ok_or_else(bad)?;
            let (layer, proj) = module.split_once('.').ok_or_else(bad)?;
            let layer = layer.parse().map_err(|_| bad())?;
            let proj: Proj = proj.parse().map_err(|_| bad())?;
            let factor = factor.parse().map_err(|_| bad())?;
            Ok((ModuleId::new(layer, proj), factor))
        })
        .collect()
}
