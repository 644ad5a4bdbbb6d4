//! In-memory pipeline stages shared by the subcommands and tests.

use bitbudget_core::alloc::{pearson_alignment, reuse_scores_with, DiscreteAssignment};
use bitbudget_core::baselines::{hawq_allocate, uniform_assignment, TraceEstimate};
use bitbudget_core::calib::{generate_calibration, CalibrationSet};
use bitbudget_core::mask::{assignment_error, train_stage1, SoftScores, Stage1Mode, Stage1Outcome, TeacherBatch};
use bitbudget_core::model::{FullPrecisionModel, LayerParams, Proj};
use bitbudget_core::quant::{build_pool, CandidatePool, ModuleCandidates};
use bitbudget_core::tensor::Tensor;
use bitbudget_core::Error;

use crate::config::RunConfig;
use crate::container::{Container, Section};
use crate::error::{CliError, Result};

/// Everything Stage I and II need, built or loaded once.
pub struct Session {
    pub config: RunConfig,
    pub model: FullPrecisionModel,
    pub pool: CandidatePool,
    pub calibration: CalibrationSet,
    pub train: TeacherBatch,
    pub holdout: TeacherBatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationReport {
    pub assignment: DiscreteAssignment,
    /// `None` when the correlation is undefined (constant scores or indicators).
    pub pearson: Option<f64>,
    pub holdout_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub method: String,
    pub budget: f64,
    pub realized_avg_bits: f64,
    pub holdout_error: f64,
}

impl Session {
    /// Builds the model and pool from `config`.
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = FullPrecisionModel::build(config.model_spec())?;
        let pool = build_pool(&model, &config.bitset()?, config.group_size)?;
        Self::assemble(config, model, pool)
    }

    pub fn assemble(config: &RunConfig, model: FullPrecisionModel, pool: CandidatePool) -> Result<Self> {
        config.validate()?;
        if model.spec() != &config.model_spec() {
            return Err(CliError::Config("stored model does not match the configured model".into()));
        }
        if pool.bitset().bits() != config.bits.as_slice() || pool.group_size() != config.group_size {
            return Err(CliError::Config("stored pool does not match the configured bits / group_size".into()));
        }
        let calibration = generate_calibration(config.vocab, &config.calibration())?;
        let train = TeacherBatch::new(&model, calibration.train_batch()?)?;
        let holdout = TeacherBatch::new(&model, calibration.holdout_batch()?)?;
        Ok(Self {
            config: config.clone(),
            model,
            pool,
            calibration,
            train,
            holdout,
        })
    }

    pub fn train_scores(&self, b_target: f64, mode: Stage1Mode) -> Result<Stage1Outcome> {
        let mut s1 = self.config.stage1(b_target);
        s1.mode = mode;
        Ok(train_stage1(&self.model, &self.pool, &self.train.tokens, &s1)?)
    }

    pub fn holdout_error(&self, assignment: &DiscreteAssignment) -> Result<f64> {
        Ok(assignment_error(&self.model, &self.pool, &assignment.chosen, &self.holdout)?)
    }

    /// Stage II on `scores` at `budget`, audited, with diagnostics.
    pub fn allocate(&self, scores: &SoftScores, budget: f64) -> Result<AllocationReport> {
        let assignment = reuse_scores_with(scores, budget, self.config.solver)?;
        audit(&assignment)?;
        let pearson = match pearson_alignment(scores, &assignment) {
            Ok(r) => Some(r),
            Err(Error::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e.into()),
        };
        let holdout_error = self.holdout_error(&assignment)?;
        Ok(AllocationReport {
            assignment,
            pearson,
            holdout_error,
        })
    }

    pub fn uniform(&self, b: u32) -> Result<CompareRow> {
        let a = uniform_assignment(self.model.spec(), self.pool.bitset(), b)?;
        audit(&a)?;
        self.row(format!("uniform-{b}"), b as f64, &a)
    }

    pub fn traces(&self) -> Result<TraceEstimate> {
        Ok(TraceEstimate::estimate(
            &self.model,
            &self.train,
            self.config.probes,
            self.config.seed,
        )?)
    }

    pub fn hawq(&self, traces: &TraceEstimate, budget: f64) -> Result<CompareRow> {
        let a = hawq_allocate(traces, &self.pool, budget)?.with_spec_hash(self.model.spec().fingerprint());
        audit(&a)?;
        self.row("hawq".into(), budget, &a)
    }

    /// Stage I in `mode` at `budget` followed by Stage II at the same budget.
    pub fn learned(&self, method: &str, mode: Stage1Mode, budget: f64) -> Result<CompareRow> {
        let out = self.train_scores(budget, mode)?;
        let report = self.allocate(&out.scores, budget)?;
        Ok(CompareRow {
            method: method.to_string(),
            budget,
            realized_avg_bits: report.assignment.realized_avg_bits,
            holdout_error: report.holdout_error,
        })
    }

    fn row(&self, method: String, budget: f64, a: &DiscreteAssignment) -> Result<CompareRow> {
        Ok(CompareRow {
            method,
            budget,
            realized_avg_bits: a.realized_avg_bits,
            holdout_error: self.holdout_error(a)?,
        })
    }

    /// Uniform rows for every bit-width, then each learned method and the
    /// trace baseline at each of `budgets`.
    pub fn compare(&self, budgets: &[f64]) -> Result<Vec<CompareRow>> {
        let mut rows = Vec::new();
        for &b in self.pool.bitset().bits() {
            rows.push(self.uniform(b)?);
        }
        let traces = self.traces()?;
        let mult = match self.config.mode {
            m @ Stage1Mode::MultiplicativePenalty(_) => m,
            _ => Stage1Mode::from_tag("mult")?,
        };
        for &budget in budgets {
            rows.push(self.learned("gamma", Stage1Mode::AugmentedLagrangian, budget)?);
            rows.push(self.hawq(&traces, budget)?);
            rows.push(self.learned("mult-penalty", mult, budget)?);
            rows.push(self.learned("ce-loss", Stage1Mode::CrossEntropy, budget)?);
        }
        Ok(rows)
    }
}

/// Structural audit plus the zero-tolerance integer budget check.
pub fn audit(a: &DiscreteAssignment) -> Result<()> {
    a.audit().map_err(|e| CliError::Audit(e.to_string()))?;
    let load = a.bit_load();
    let cap = a.capacity();
    if load > cap {
        return Err(CliError::Audit(format!("bit load {load} exceeds capacity {cap}")));
    }
    Ok(())
}

pub fn model_container(model: &FullPrecisionModel) -> Container {
    let section = |name: String, t: &Tensor| Section {
        name,
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    };
    let mut sections = vec![section("embed".into(), &model.embed), section("pos".into(), &model.pos)];
    for (i, lp) in model.layers.iter().enumerate() {
        let l = i + 1;
        sections.push(section(format!("{l}.attn_norm"), &lp.attn_norm));
        sections.push(section(format!("{l}.mlp_norm"), &lp.mlp_norm));
        for p in Proj::ALL {
            sections.push(section(format!("{l}.{p}"), &lp.proj[p.index()]));
        }
    }
    sections.push(section("final_norm".into(), &model.final_norm));
    sections.push(section("head".into(), &model.head));
    Container {
        kind: "model".into(),
        spec_hash: model.spec().fingerprint(),
        bits: Vec::new(),
        group_size: 0,
        sections,
    }
}

fn tensor(c: &Container, name: &str) -> Result<Tensor> {
    let s = c
        .section(name)
        .ok_or_else(|| CliError::Manifest(format!("{} container lacks section `{name}`", c.kind)))?;
    Ok(Tensor::new(s.shape.clone(), s.data.clone())?)
}

fn check_header(c: &Container, kind: &str, config: &RunConfig) -> Result<()> {
    if c.kind != kind {
        return Err(CliError::Config(format!("expected a {kind} container, found `{}`", c.kind)));
    }
    let want = config.model_spec().fingerprint();
    if c.spec_hash != want {
        return Err(CliError::Config(format!(
            "{kind} container was built for spec {}, config describes {want}",
            c.spec_hash
        )));
    }
    Ok(())
}

pub fn model_from_container(c: &Container, config: &RunConfig) -> Result<FullPrecisionModel> {
    check_header(c, "model", config)?;
    let spec = config.model_spec();
    let layers = (1..=spec.num_layers)
        .map(|l| {
            let proj = Proj::ALL
                .iter()
                .map(|p| tensor(c, &format!("{l}.{p}")))
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerParams {
                attn_norm: tensor(c, &format!("{l}.attn_norm"))?,
                mlp_norm: tensor(c, &format!("{l}.mlp_norm"))?,
                proj: proj.try_into().expect("seven projections"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FullPrecisionModel::from_parts(
        spec,
        tensor(c, "embed")?,
        tensor(c, "pos")?,
        layers,
        tensor(c, "final_norm")?,
        tensor(c, "head")?,
    )?)
}

pub fn pool_container(pool: &CandidatePool, spec_hash: &str) -> Container {
    let mut sections = Vec::new();
    for (i, m) in pool.modules().iter().enumerate() {
        let c = pool.module(i);
        sections.push(Section {
            name: format!("{}.{}.fp", m.layer, m.proj),
            shape: c.fp.shape().to_vec(),
            data: c.fp.data().to_vec(),
        });
        for (b, q) in pool.bitset().bits().iter().zip(&c.quantized) {
            sections.push(Section {
                name: format!("{}.{}.b{b}", m.layer, m.proj),
                shape: q.shape().to_vec(),
                data: q.data().to_vec(),
            });
        }
    }
    Container {
        kind: "pool".into(),
        spec_hash: spec_hash.to_string(),
        bits: pool.bitset().bits().to_vec(),
        group_size: pool.group_size() as u64,
        sections,
    }
}

pub fn pool_from_container(c: &Container, config: &RunConfig) -> Result<CandidatePool> {
    check_header(c, "pool", config)?;
    let bitset = config.bitset()?;
    if c.bits != bitset.bits() || c.group_size != config.group_size as u64 {
        return Err(CliError::Config("pool container bits / group_size differ from the config".into()));
    }
    let modules = config.model_spec().module_ids();
    let parts = modules
        .iter()
        .map(|m| {
            let prefix = format!("{}.{}", m.layer, m.proj);
            Ok(ModuleCandidates {
                fp: tensor(c, &format!("{prefix}.fp"))?,
                quantized: bitset
                    .bits()
                    .iter()
                    .map(|b| tensor(c, &format!("{prefix}.b{b}")))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidatePool::from_parts(bitset, config.group_size, modules, parts)?)
}
