//! Stage II: one bit-width per module maximizing `Σ s[m, b(m)]` subject to
//! `Σ N_m·b(m) ≤ ⌊b_target·Σ N⌋`, a multiple-choice knapsack.
//!
//! All solvers score an assignment by the right fold
//! `v_0 + (v_1 + (… + v_{M−1}))` and prefer, among equal objectives, the
//! lexicographically smallest assignment in module order (lower bit first).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::{check_budget, fmt17, SoftScores};
use crate::model::ModuleId;
use crate::quant::BitWidthSet;

/// Largest DP table (capacity cells × modules) before switching to branch-and-bound.
pub const DP_CELL_LIMIT: u64 = 10_000_000;
/// Largest instance the exhaustive oracle accepts.
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;
const BNB_NODE_LIMIT: u64 = 200_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct AllocationProblem {
    modules: Vec<ModuleId>,
    bits: Vec<u32>,
    counts: Vec<u64>,
    values: Vec<Vec<f64>>,
    budget: f64,
}

impl AllocationProblem {
    /// A problem over probability rows (each summing to 1 within 1e-6).
    pub fn new(modules: Vec<ModuleId>, bits: Vec<u32>, counts: Vec<u64>, scores: Vec<Vec<f64>>, budget: f64) -> Result<Self> {
        for (m, row) in modules.iter().zip(&scores) {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Parameter(format!("scores of module {m} sum to {sum}")));
            }
        }
        Self::with_values(modules, bits, counts, scores, budget)
    }

    /// A problem over arbitrary finite per-choice values.
    pub fn with_values(
        modules: Vec<ModuleId>,
        bits: Vec<u32>,
        counts: Vec<u64>,
        values: Vec<Vec<f64>>,
        budget: f64,
    ) -> Result<Self> {
        let bitset = BitWidthSet::new(bits.clone())?;
        if bitset.bits() != bits.as_slice() {
            return Err(Error::Parameter("bit-widths must be listed in increasing order".into()));
        }
        if modules.len() != values.len() || modules.len() != counts.len() {
            return Err(Error::Dimension(format!(
                "{} modules, {} value rows, {} parameter counts",
                modules.len(),
                values.len(),
                counts.len()
            )));
        }
        if counts.contains(&0) {
            return Err(Error::Parameter("parameter counts must be positive".into()));
        }
        for (m, row) in modules.iter().zip(&values) {
            if row.len() != bits.len() {
                return Err(Error::Dimension(format!("module {m}: {} values for {} bit-widths", row.len(), bits.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parameter(format!("module {m}: non-finite value")));
            }
        }
        if !budget.is_finite() || budget < bitset.min() as f64 {
            return Err(Error::InfeasibleBudget {
                target: budget,
                min_bits: bitset.min(),
            });
        }
        Ok(Self {
            modules,
            bits,
            counts,
            values,
            budget,
        })
    }

    pub fn from_scores(scores: &SoftScores, budget: f64) -> Result<Self> {
        Self::new(
            scores.modules.clone(),
            scores.bits.clone(),
            scores.param_counts.clone(),
            scores.scores.clone(),
            budget,
        )
    }

    pub fn modules(&self) -> &[ModuleId] {
        &self.modules
    }

    pub fn bits(&self) -> &[u32] {
        &self.bits
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn total_params(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `⌊b_target·Σ N⌋` in bits.
    pub fn capacity(&self) -> u64 {
        bit_capacity(self.budget, self.total_params())
    }

    /// Right-fold objective of choice indices.
    pub fn objective_of(&self, choice: &[usize]) -> f64 {
        choice
            .iter()
            .zip(&self.values)
            .rev()
            .fold(0.0, |acc, (&b, row)| row[b] + acc)
    }

    fn bit_load(&self, choice: &[usize]) -> u64 {
        choice
            .iter()
            .zip(&self.counts)
            .map(|(&b, &n)| n * self.bits[b] as u64)
            .sum()
    }
}

/// `⌊budget·total⌋`, the bit capacity shared by every solver and audit.
pub fn bit_capacity(budget: f64, total: u64) -> u64 {
    (budget * total as f64).floor() as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    Dp,
    BranchAndBound,
    BruteForce,
    /// A prescribed assignment, not the result of optimization.
    Fixed,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Dp => "dp",
            SolverKind::BranchAndBound => "branch_and_bound",
            SolverKind::BruteForce => "brute_force",
            SolverKind::Fixed => "fixed",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dp" => Ok(SolverKind::Dp),
            "branch_and_bound" => Ok(SolverKind::BranchAndBound),
            "brute_force" => Ok(SolverKind::BruteForce),
            "fixed" => Ok(SolverKind::Fixed),
            _ => Err(Error::Format(format!("unknown solver `{s}`"))),
        }
    }
}

/// Solver selection; `Auto` uses DP when the table fits [`DP_CELL_LIMIT`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SolverChoice {
    #[default]
    Auto,
    Dp,
    BranchAndBound,
    BruteForce,
}

impl FromStr for SolverChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(SolverChoice::Auto),
            "dp" => Ok(SolverChoice::Dp),
            "bnb" => Ok(SolverChoice::BranchAndBound),
            "brute" => Ok(SolverChoice::BruteForce),
            _ => Err(Error::Parameter(format!("unknown solver `{s}` (auto, dp, bnb, brute)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteAssignment {
    pub modules: Vec<ModuleId>,
    pub chosen: Vec<u32>,
    pub param_counts: Vec<u64>,
    pub budget: f64,
    pub realized_avg_bits: f64,
    pub objective_value: f64,
    pub solver: SolverKind,
    /// True when the solver proved optimality.
    pub optimal: bool,
    pub spec_hash: String,
}

pub const ASSIGNMENT_MAGIC: &str = "# bitbudget assignment v1";

impl DiscreteAssignment {
    fn from_choice(problem: &AllocationProblem, choice: &[usize], solver: SolverKind, optimal: bool) -> Self {
        let chosen: Vec<u32> = choice.iter().map(|&b| problem.bits[b]).collect();
        Self {
            modules: problem.modules.clone(),
            realized_avg_bits: realized_avg_bits(&chosen, &problem.counts),
            chosen,
            param_counts: problem.counts.clone(),
            budget: problem.budget,
            objective_value: problem.objective_of(choice),
            solver,
            optimal,
            spec_hash: String::new(),
        }
    }

    /// Every module at the same bit-width `b`.
    pub fn fixed(modules: Vec<ModuleId>, param_counts: Vec<u64>, b: u32) -> Self {
        let chosen = vec![b; modules.len()];
        Self {
            realized_avg_bits: realized_avg_bits(&chosen, &param_counts),
            modules,
            chosen,
            param_counts,
            budget: b as f64,
            objective_value: 0.0,
            solver: SolverKind::Fixed,
            optimal: false,
            spec_hash: String::new(),
        }
    }

    pub fn with_spec_hash(mut self, hash: impl Into<String>) -> Self {
        self.spec_hash = hash.into();
        self
    }

    /// `Σ N·b` in bits.
    pub fn bit_load(&self) -> u64 {
        self.chosen.iter().zip(&self.param_counts).map(|(&b, &n)| n * b as u64).sum()
    }

    pub fn capacity(&self) -> u64 {
        bit_capacity(self.budget, self.param_counts.iter().sum())
    }

    /// Hard budget check with no tolerance, plus consistency of the stored average.
    pub fn audit(&self) -> Result<()> {
        if self.chosen.len() != self.modules.len() || self.param_counts.len() != self.modules.len() {
            return Err(Error::Format("assignment columns differ in length".into()));
        }
        let (load, cap) = (self.bit_load(), self.capacity());
        if load > cap {
            return Err(Error::Configuration(format!(
                "assignment uses {load} bits, budget {} allows {cap}",
                self.budget
            )));
        }
        let recomputed = realized_avg_bits(&self.chosen, &self.param_counts);
        if recomputed != self.realized_avg_bits {
            return Err(Error::Format(format!(
                "stored average {} differs from recomputed {recomputed}",
                self.realized_avg_bits
            )));
        }
        if self.realized_avg_bits > self.budget + 1e-12 {
            return Err(Error::Configuration(format!(
                "average {} exceeds budget {}",
                self.realized_avg_bits, self.budget
            )));
        }
        Ok(())
    }

    /// Chosen bits as a per-module map.
    pub fn bit_map(&self) -> BTreeMap<ModuleId, u32> {
        self.modules.iter().copied().zip(self.chosen.iter().copied()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(ASSIGNMENT_MAGIC);
        out.push('\n');
        out.push_str(&format!("spec_hash {}\n", self.spec_hash));
        out.push_str(&format!("b_target {}\n", fmt17(self.budget)));
        out.push_str(&format!("solver {}\n", self.solver));
        out.push_str(&format!("optimal {}\n", self.optimal));
        out.push_str(&format!("objective {}\n", fmt17(self.objective_value)));
        out.push_str(&format!("realized_avg_bits {}\n", fmt17(self.realized_avg_bits)));
        let counts: Vec<String> = self.param_counts.iter().map(u64::to_string).collect();
        out.push_str(&format!("param_counts {}\n", counts.join(" ")));
        out.push_str("layer proj chosen_bit\n");
        for (m, b) in self.modules.iter().zip(&self.chosen) {
            out.push_str(&format!("{} {} {b}\n", m.layer, m.proj));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(ASSIGNMENT_MAGIC) {
            return Err(Error::Format("not an assignment file".into()));
        }
        let mut header = BTreeMap::new();
        for line in lines.by_ref() {
            if line == "layer proj chosen_bit" {
                break;
            }
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("malformed header line `{line}`")))?;
            header.insert(k, v);
        }
        let get = |k: &str| {
            header
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("missing header `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for `{k}`")))
        };
        let param_counts = get("param_counts")?
            .split_whitespace()
            .map(|t| t.parse::<u64>().map_err(|_| Error::Format(format!("bad count `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        let mut modules = Vec::new();
        let mut chosen = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let [layer, proj, bit] = f.as_slice() else {
                return Err(Error::Format(format!("malformed assignment line `{line}`")));
            };
            let layer = layer
                .parse()
                .map_err(|_| Error::Format(format!("bad layer `{layer}`")))?;
            modules.push(ModuleId::new(layer, proj.parse()?));
            chosen.push(bit.parse().map_err(|_| Error::Format(format!("bad bit-width `{bit}`")))?);
        }
        let a = Self {
            modules,
            chosen,
            param_counts,
            budget: num("b_target")?,
            realized_avg_bits: num("realized_avg_bits")?,
            objective_value: num("objective")?,
            solver: get("solver")?.parse()?,
            optimal: get("optimal")?
                .parse()
                .map_err(|_| Error::Format("bad `optimal` flag".into()))?,
            spec_hash: get("spec_hash")?.to_string(),
        };
        a.audit()?;
        Ok(a)
    }
}

/// `Σ N·b / Σ N`; zero for an empty assignment.
pub fn realized_avg_bits(chosen: &[u32], counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let load: u64 = chosen.iter().zip(counts).map(|(&b, &n)| n * b as u64).sum();
    load as f64 / total as f64
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Integer weights above each module's lightest choice, reduced by their
/// common divisor, with the matching residual capacity.
struct Scaled {
    extra: Vec<Vec<u64>>,
    capacity: u64,
}

fn scale(problem: &AllocationProblem) -> Scaled {
    let base: u64 = problem.counts.iter().map(|&n| n * problem.bits[0] as u64).sum();
    let mut extra: Vec<Vec<u64>> = problem
        .counts
        .iter()
        .map(|&n| problem.bits.iter().map(|&b| n * (b - problem.bits[0]) as u64).collect())
        .collect();
    let g = extra.iter().flatten().fold(0, |g, &w| gcd(g, w)).max(1);
    extra.iter_mut().flatten().for_each(|w| *w /= g);
    let reach: u64 = extra.iter().map(|r| r[r.len() - 1]).sum();
    let capacity = ((problem.capacity() - base) / g).min(reach);
    Scaled { extra, capacity }
}

pub fn solve(problem: &AllocationProblem) -> Result<DiscreteAssignment> {
    solve_with(problem, SolverChoice::Auto)
}

pub fn solve_with(problem: &AllocationProblem, choice: SolverChoice) -> Result<DiscreteAssignment> {
    let scaled = scale(problem);
    let cells = (scaled.capacity + 1).saturating_mul(problem.modules.len() as u64);
    match choice {
        SolverChoice::BruteForce => brute_force(problem),
        SolverChoice::BranchAndBound => Ok(branch_and_bound(problem, &scaled)),
        SolverChoice::Dp if cells > DP_CELL_LIMIT => Err(Error::Resource(format!(
            "DP table needs {cells} cells, limit {DP_CELL_LIMIT}"
        ))),
        SolverChoice::Dp => Ok(dynamic_program(problem, &scaled)),
        SolverChoice::Auto if cells > DP_CELL_LIMIT => Ok(branch_and_bound(problem, &scaled)),
        SolverChoice::Auto => Ok(dynamic_program(problem, &scaled)),
    }
}

fn dynamic_program(problem: &AllocationProblem, s: &Scaled) -> DiscreteAssignment {
    let m = problem.modules.len();
    let cap = s.capacity as usize;
    let width = cap + 1;
    // best[i][c]: best right-fold value of modules i.. within residual capacity c
    let mut best = vec![0.0f64; (m + 1) * width];
    for i in (0..m).rev() {
        let (head, tail) = best.split_at_mut((i + 1) * width);
        let next = &tail[..width];
        let cur = &mut head[i * width..];
        for c in 0..=cap {
            let mut v = f64::NEG_INFINITY;
            for (b, &w) in s.extra[i].iter().enumerate() {
                let w = w as usize;
                if w <= c {
                    v = v.max(problem.values[i][b] + next[c - w]);
                }
            }
            cur[c] = v;
        }
    }
    let mut choice = Vec::with_capacity(m);
    let mut c = cap;
    for i in 0..m {
        let target = best[i * width + c];
        let next = &best[(i + 1) * width..(i + 2) * width];
        let b = s.extra[i]
            .iter()
            .enumerate()
            .find(|&(b, &w)| w as usize <= c && problem.values[i][b] + next[c - w as usize] == target)
            .map(|(b, _)| b)
            .expect("DP reconstruction");
        c -= s.extra[i][b] as usize;
        choice.push(b);
    }
    DiscreteAssignment::from_choice(problem, &choice, SolverKind::Dp, true)
}

/// Upper hull of `(extra weight, value)` for one module, as the start value
/// plus incremental `(Δw, Δv)` steps with decreasing slope.
fn hull(extra: &[u64], values: &[f64]) -> (f64, Vec<(f64, f64)>) {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for (&w, &v) in extra.iter().zip(values) {
        let w = w as f64;
        while pts.len() >= 2 {
            let (w1, v1) = pts[pts.len() - 2];
            let (w2, v2) = pts[pts.len() - 1];
            if (v2 - v1) * (w - w1) <= (v - v1) * (w2 - w1) {
                pts.pop();
            } else {
                break;
            }
        }
        pts.push((w, v));
    }
    let steps = pts.windows(2).map(|p| (p[1].0 - p[0].0, p[1].1 - p[0].1)).collect();
    (pts[0].1, steps)
}

struct Bnb<'a> {
    problem: &'a AllocationProblem,
    extra: &'a [Vec<u64>],
    hulls: Vec<(f64, Vec<(f64, f64)>)>,
    best_value: f64,
    best: Option<Vec<usize>>,
    path: Vec<usize>,
    nodes: u64,
    exhausted: bool,
}

impl Bnb<'_> {
    /// LP-relaxation bound of modules `from..` with residual capacity `cap`.
    fn bound(&self, from: usize, cap: u64) -> f64 {
        let mut base = 0.0;
        let mut steps: Vec<(f64, f64)> = Vec::new();
        for (start, s) in &self.hulls[from..] {
            base += start;
            steps.extend(s.iter().copied().filter(|&(_, dv)| dv > 0.0));
        }
        steps.sort_by(|a, b| (b.1 / b.0).total_cmp(&(a.1 / a.0)));
        let mut room = cap as f64;
        for (dw, dv) in steps {
            if dw <= room {
                room -= dw;
                base += dv;
            } else {
                base += dv * room / dw;
                break;
            }
        }
        base
    }

    fn search(&mut self, i: usize, cap: u64, prefix: f64) {
        self.nodes += 1;
        if self.nodes > BNB_NODE_LIMIT {
            self.exhausted = true;
            return;
        }
        if i == self.problem.modules.len() {
            let v = self.problem.objective_of(&self.path);
            if self.best.is_none() || v > self.best_value {
                self.best_value = v;
                self.best = Some(self.path.clone());
            }
            return;
        }
        if self.best.is_some() {
            let bound = prefix + self.bound(i, cap);
            if bound < self.best_value - 1e-9 * (1.0 + self.best_value.abs()) {
                return;
            }
        }
        for b in 0..self.problem.bits.len() {
            let w = self.extra[i][b];
            if w > cap {
                continue;
            }
            self.path.push(b);
            self.search(i + 1, cap - w, prefix + self.problem.values[i][b]);
            self.path.pop();
            if self.exhausted {
                return;
            }
        }
    }
}

fn branch_and_bound(problem: &AllocationProblem, s: &Scaled) -> DiscreteAssignment {
    let hulls = s
        .extra
        .iter()
        .zip(&problem.values)
        .map(|(e, v)| hull(e, v))
        .collect();
    let mut bnb = Bnb {
        problem,
        extra: &s.extra,
        hulls,
        best_value: f64::NEG_INFINITY,
        best: None,
        path: Vec::with_capacity(problem.modules.len()),
        nodes: 0,
        exhausted: false,
    };
    bnb.search(0, s.capacity, 0.0);
    let choice = bnb.best.unwrap_or_else(|| vec![0; problem.modules.len()]);
    DiscreteAssignment::from_choice(problem, &choice, SolverKind::BranchAndBound, !bnb.exhausted)
}

/// Exhaustive enumeration in lexicographic order; at most [`BRUTE_FORCE_LIMIT`] assignments.
pub fn brute_force(problem: &AllocationProblem) -> Result<DiscreteAssignment> {
    let (m, nb) = (problem.modules.len(), problem.bits.len());
    let size = (0..m).try_fold(1u64, |acc, _| acc.checked_mul(nb as u64));
    if size.is_none_or(|s| s > BRUTE_FORCE_LIMIT) {
        return Err(Error::Resource(format!(
            "{nb}^{m} assignments exceed the exhaustive limit of {BRUTE_FORCE_LIMIT}"
        )));
    }
    let cap = problem.capacity();
    let mut choice = vec![0usize; m];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        if problem.bit_load(&choice) <= cap {
            let v = problem.objective_of(&choice);
            if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                best = Some((v, choice.clone()));
            }
        }
        let Some(pos) = (0..m).rev().find(|&i| choice[i] + 1 < nb) else { break };
        choice[pos] += 1;
        choice[pos + 1..].iter_mut().for_each(|c| *c = 0);
    }
    let (_, choice) = best.expect("the all-lowest assignment is always feasible");
    Ok(DiscreteAssignment::from_choice(problem, &choice, SolverKind::BruteForce, true))
}

/// Re-solves the knapsack on existing scores at a new budget.
pub fn reuse_scores(scores: &SoftScores, new_budget: f64) -> Result<DiscreteAssignment> {
    reuse_scores_with(scores, new_budget, SolverChoice::Auto)
}

pub fn reuse_scores_with(scores: &SoftScores, new_budget: f64, choice: SolverChoice) -> Result<DiscreteAssignment> {
    check_budget(&BitWidthSet::new(scores.bits.clone())?, new_budget)?;
    let problem = AllocationProblem::from_scores(scores, new_budget)?;
    Ok(solve_with(&problem, choice)?.with_spec_hash(scores.spec_hash.clone()))
}

/// Right-fold `Σ s[m, b(m)]` of an assignment under `scores`.
pub fn score_objective(scores: &SoftScores, assignment: &DiscreteAssignment) -> Result<f64> {
    if scores.modules != assignment.modules {
        return Err(Error::Configuration("scores and assignment cover different modules".into()));
    }
    let mut acc = 0.0;
    for (row, &c) in scores.scores.iter().zip(&assignment.chosen).rev() {
        let b = scores
            .bits
            .iter()
            .position(|&x| x == c)
            .ok_or_else(|| Error::Configuration(format!("bit-width {c} is not scored")))?;
        acc += row[b];
    }
    Ok(acc)
}

/// Pearson correlation between flattened scores and the assignment's one-hot indicators.
pub fn pearson_alignment(scores: &SoftScores, assignment: &DiscreteAssignment) -> Result<f64> {
    if scores.modules != assignment.modules {
        return Err(Error::Configuration("scores and assignment cover different modules".into()));
    }
    let s: Vec<f64> = scores.scores.iter().flatten().copied().collect();
    let z: Vec<f64> = assignment
        .chosen
        .iter()
        .flat_map(|&c| scores.bits.iter().map(move |&b| if b == c { 1.0 } else { 0.0 }))
        .collect();
    pearson(&s, &z)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", x.len(), y.len())));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(Error::UndefinedCorrelation("a vector has zero variance".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Cosine similarity of two per-module expected-bit maps.
pub fn allocation_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("maps of {} and {} modules", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedCorrelation("a map is the zero vector".into()));
    }
    Ok(dot / (na * nb))
}
