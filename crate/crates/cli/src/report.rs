//! Plain-text and CSV report emitters. Output depends only on its inputs.

use bitbudget_core::mask::{fmt17, SoftScores, StepRecord};
use bitbudget_core::model::Proj;
use bitbudget_core::quant::CandidatePool;

use crate::pipeline::{AllocationReport, CompareRow};

pub fn budget_label(b: f64) -> String {
    format!("b{b:.2}")
}

pub fn quant_error_table(pool: &CandidatePool) -> String {
    let bits = pool.bitset().bits();
    let mut out = String::from("layer proj params");
    for b in bits {
        out.push_str(&format!(" mse_b{b}"));
    }
    out.push('\n');
    for (i, (m, row)) in pool.modules().iter().zip(pool.mse_table()).enumerate() {
        out.push_str(&format!("{} {} {}", m.layer, m.proj, pool.module(i).fp.numel()));
        for e in row {
            out.push_str(&format!(" {e:.6e}"));
        }
        out.push('\n');
    }
    out
}

/// One row per step; `score_deviation` is the post-update expected bits minus the target.
pub fn train_log_csv(log: &[StepRecord], b_target: f64) -> String {
    let mut out =
        String::from("step,recon,raw_recon,deviation,multiplier,total,lambda1,lambda2,expected_bits,score_deviation\n");
    for r in log {
        let p = &r.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            fmt17(p.recon),
            fmt17(p.raw_recon),
            fmt17(p.deviation),
            fmt17(p.multiplier),
            fmt17(p.total),
            fmt17(r.lambda1),
            fmt17(r.lambda2),
            fmt17(r.expected_bits),
            fmt17(r.expected_bits - b_target),
        ));
    }
    out
}

/// `L` rows of seven per-projection values, modules in layer-major order.
pub fn heatmap_csv(values: &[f64], precision: usize) -> String {
    let mut out = Proj::ALL.iter().map(|p| p.name()).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in values.chunks(Proj::ALL.len()) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.precision$}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn pearson_text(r: Option<f64>) -> String {
    r.map(|v| format!("{v:.6}")).unwrap_or_else(|| "undefined".into())
}

pub fn allocation_text(report: &AllocationReport, scores: &SoftScores) -> String {
    let a = &report.assignment;
    format!(
        "budget {}\nscores_b_target {}\ncapacity_bits {}\nbit_load {}\nrealized_avg_bits {:.6}\nsolver {}\noptimal {}\nobjective {:.9}\npearson {}\nholdout_error {:.9e}\n",
        a.budget,
        scores.budget_target,
        a.capacity(),
        a.bit_load(),
        a.realized_avg_bits,
        a.solver,
        a.optimal,
        a.objective_value,
        pearson_text(report.pearson),
        report.holdout_error,
    )
}

pub fn budget_curve_csv(reports: &[AllocationReport]) -> String {
    let mut sorted: Vec<&AllocationReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.assignment.budget.total_cmp(&b.assignment.budget));
    let mut out = String::from("budget,realized_avg_bits,holdout_error,pearson\n");
    for r in sorted {
        out.push_str(&format!(
            "{},{:.6},{:.9e},{}\n",
            r.assignment.budget,
            r.assignment.realized_avg_bits,
            r.holdout_error,
            pearson_text(r.pearson)
        ));
    }
    out
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("method,budget,realized_avg_bits,holdout_error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.9e}\n",
            r.method, r.budget, r.realized_avg_bits, r.holdout_error
        ));
    }
    out
}

pub fn compare_table(rows: &[CompareRow]) -> String {
    let mut out = format!("{:<14} {:>7} {:>10} {:>14}\n", "method", "budget", "avg_bits", "holdout_error");
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:>7.2} {:>10.4} {:>14.6e}\n",
            r.method, r.budget, r.realized_avg_bits, r.holdout_error
        ));
    }
    out
}
