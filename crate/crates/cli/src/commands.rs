//! Subcommands: each reads verified artifacts from the output directory,
//! writes its own, updates the manifest and returns a summary for stdout.

use std::path::Path;

use bitbudget_core::alloc::DiscreteAssignment;
use bitbudget_core::baselines::TraceEstimate;
use bitbudget_core::mask::SoftScores;
use bitbudget_core::model::FullPrecisionModel;

use crate::config::RunConfig;
use crate::container::Container;
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::pipeline::{self, Session};
use crate::report;

pub const MODEL_FILE: &str = "model.bbt";
pub const POOL_FILE: &str = "pool.bbt";
pub const QUANT_FILE: &str = "quant_error.txt";
pub const SCORES_FILE: &str = "scores.txt";
pub const LOG_FILE: &str = "train_log.csv";
pub const EXPECTED_HEATMAP_FILE: &str = "heatmap_expected.csv";
pub const CURVE_FILE: &str = "budget_curve.csv";
pub const COMPARE_FILE: &str = "compare.csv";
pub const TRACES_FILE: &str = "hessian_traces.txt";

pub fn assignment_file(budget: f64) -> String {
    format!("assignment_{}.txt", report::budget_label(budget))
}

pub fn heatmap_file(budget: f64) -> String {
    format!("heatmap_{}.csv", report::budget_label(budget))
}

pub fn allocation_file(budget: f64) -> String {
    format!("allocation_{}.txt", report::budget_label(budget))
}

struct Workspace<'a> {
    config: &'a RunConfig,
    manifest: RunManifest,
}

impl<'a> Workspace<'a> {
    fn open(config: &'a RunConfig) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(&config.out).map_err(|e| CliError::io(&config.out, e))?;
        let manifest = RunManifest::open(&config.out, &config.hash())?;
        Ok(Self { config, manifest })
    }

    fn dir(&self) -> &Path {
        &self.config.out
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let dir = self.config.out.clone();
        self.manifest.write(&dir, name, bytes)
    }

    fn read(&self, name: &str) -> Result<Vec<u8>> {
        self.manifest.read_verified(self.dir(), name)
    }

    fn read_text(&self, name: &str) -> Result<String> {
        String::from_utf8(self.read(name)?).map_err(|_| CliError::Manifest(format!("`{name}` is not UTF-8")))
    }

    fn container(&self, name: &str) -> Result<Container> {
        Container::from_bytes(&self.read(name)?, &self.dir().join(name))
    }

    fn session(&self) -> Result<Session> {
        let model = pipeline::model_from_container(&self.container(MODEL_FILE)?, self.config)?;
        let pool = pipeline::pool_from_container(&self.container(POOL_FILE)?, self.config)?;
        Session::assemble(self.config, model, pool)
    }

    fn finish(mut self) -> Result<()> {
        let dir = self.config.out.clone();
        self.manifest.save(&dir)
    }
}

pub fn cmd_build(config: &RunConfig) -> Result<String> {
    let mut ws = Workspace::open(config)?;
    let session = Session::prepare(config)?;
    let spec_hash = session.model.spec().fingerprint();
    ws.write(MODEL_FILE, &pipeline::model_container(&session.model).to_bytes())?;
    ws.write(POOL_FILE, &pipeline::pool_container(&session.pool, &spec_hash).to_bytes())?;
    let table = report::quant_error_table(&session.pool);
    ws.write(QUANT_FILE, table.as_bytes())?;
    ws.finish()?;
    Ok(format!("spec {spec_hash}\n{table}"))
}

pub fn cmd_learn(config: &RunConfig) -> Result<String> {
    let mut ws = Workspace::open(config)?;
    let session = ws.session()?;
    let out = session.train_scores(config.b_target, config.mode)?;
    ws.write(SCORES_FILE, out.scores.to_text().as_bytes())?;
    ws.write(LOG_FILE, report::train_log_csv(&out.log, config.b_target).as_bytes())?;
    ws.write(
        EXPECTED_HEATMAP_FILE,
        report::heatmap_csv(&out.scores.expected_bits_per_module(), 4).as_bytes(),
    )?;
    ws.finish()?;
    let last = out.log.last();
    Ok(format!(
        "mode {}\nsteps {}\nb_target {}\nexpected_avg_bits {:.6}\nfinal_lambda1 {}\nfinal_lambda2 {}\nloss_scale {:.6e}\n",
        config.mode.tag(),
        out.log.len(),
        config.b_target,
        out.scores.expected_avg_bits,
        last.map(|r| format!("{:.6}", r.lambda1)).unwrap_or_else(|| "-".into()),
        last.map(|r| format!("{:.6}", r.lambda2)).unwrap_or_else(|| "-".into()),
        out.loss_scale,
    ))
}

/// Stage II on the stored scores at each budget; no Stage-I state is touched.
pub fn cmd_allocate(config: &RunConfig, budgets: &[f64]) -> Result<String> {
    let mut ws = Workspace::open(config)?;
    let scores = SoftScores::from_text(&ws.read_text(SCORES_FILE)?)?;
    let session = ws.session()?;
    if scores.spec_hash != session.model.spec().fingerprint() {
        return Err(CliError::Config("scores were learned for a different model".into()));
    }
    let mut reports = Vec::with_capacity(budgets.len());
    let mut summary = String::new();
    for &b in budgets {
        let r = session.allocate(&scores, b)?;
        ws.write(&assignment_file(b), r.assignment.to_text().as_bytes())?;
        let bits: Vec<f64> = r.assignment.chosen.iter().map(|&c| c as f64).collect();
        ws.write(&heatmap_file(b), report::heatmap_csv(&bits, 0).as_bytes())?;
        let text = report::allocation_text(&r, &scores);
        ws.write(&allocation_file(b), text.as_bytes())?;
        summary.push_str(&text);
        summary.push('\n');
        reports.push(r);
    }
    if reports.len() > 1 {
        let curve = report::budget_curve_csv(&reports);
        ws.write(CURVE_FILE, curve.as_bytes())?;
        summary.push_str(&curve);
    }
    ws.finish()?;
    Ok(summary)
}

pub fn cmd_compare(config: &RunConfig) -> Result<String> {
    let mut ws = Workspace::open(config)?;
    let session = ws.session()?;
    let traces = session.traces()?;
    ws.write(TRACES_FILE, traces.to_text().as_bytes())?;
    let rows = session.compare(&config.compare_budgets)?;
    ws.write(COMPARE_FILE, report::compare_csv(&rows).as_bytes())?;
    ws.finish()?;
    Ok(report::compare_table(&rows))
}

/// Re-checks every manifest entry, then parses and audits each known artifact.
pub fn cmd_validate(dir: &Path) -> Result<String> {
    let manifest = RunManifest::load(dir)?;
    manifest.verify_all(dir)?;
    let mut out = String::new();
    for name in manifest.files.keys() {
        let bytes = manifest.read_verified(dir, name)?;
        let text = || String::from_utf8(bytes.clone()).map_err(|_| CliError::Manifest(format!("`{name}` is not UTF-8")));
        let detail = if name.ends_with(".bbt") {
            let c = Container::from_bytes(&bytes, &dir.join(name))?;
            format!("{} container, {} sections", c.kind, c.sections.len())
        } else if name == SCORES_FILE {
            let s = SoftScores::from_text(&text()?)?;
            format!("scores for {} modules, expected bits {:.6}", s.modules.len(), s.expected_avg_bits)
        } else if name.starts_with("assignment_") {
            let a = DiscreteAssignment::from_text(&text()?)?;
            pipeline::audit(&a)?;
            format!("assignment at {} bits, load {} <= {}", a.realized_avg_bits, a.bit_load(), a.capacity())
        } else if name == TRACES_FILE {
            let t = TraceEstimate::from_text(&text()?)?;
            format!("traces for {} modules", t.modules.len())
        } else {
            "hash ok".into()
        };
        out.push_str(&format!("{name}: {detail}\n"));
    }
    Ok(out)
}

/// The stored full-precision model, for callers that only need weights.
pub fn load_model(config: &RunConfig) -> Result<FullPrecisionModel> {
    let ws = Workspace::open(config)?;
    pipeline::model_from_container(&ws.container(MODEL_FILE)?, config)
}
