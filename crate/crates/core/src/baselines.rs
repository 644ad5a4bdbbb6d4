//! Comparison allocators: a uniform bit-width, and a Hessian-trace allocator
//! that weighs each candidate's squared quantization error by the module's
//! average curvature.

use rand::Rng;

use crate::alloc::{solve, AllocationProblem, DiscreteAssignment};
use crate::error::{Error, Result};
use crate::mask::{fmt17, TeacherBatch};
use crate::model::{FullPrecisionModel, LayerVars, ModelSpec, ModuleId};
use crate::parallel;
use crate::quant::{BitWidthSet, CandidatePool};
use crate::seed::{self, Domain};
use crate::tensor::{Tape, Tensor, Var};

/// Step of the central difference used for Hessian-vector products.
pub const HVP_STEP: f64 = 1e-3;

pub fn uniform_assignment(spec: &ModelSpec, bitset: &BitWidthSet, b: u32) -> Result<DiscreteAssignment> {
    if bitset.index_of(b).is_none() {
        return Err(Error::Parameter(format!("bit-width {b} is not a candidate in {:?}", bitset.bits())));
    }
    Ok(DiscreteAssignment::fixed(spec.module_ids(), spec.param_counts(), b).with_spec_hash(spec.fingerprint()))
}

/// A differentiable scalar function of a flat parameter vector.
pub trait GradientOracle: Sync {
    fn dim(&self) -> usize;
    fn value(&self, w: &[f64]) -> Result<f64>;
    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>>;
}

/// `½ wᵀAw` for a dense symmetric `A`, scaled by `factor`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub a: Tensor,
    pub factor: f64,
}

impl GradientOracle for Quadratic {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        let g = self.gradient(w)?;
        Ok(0.5 * w.iter().zip(&g).map(|(x, y)| x * y).sum::<f64>())
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if w.len() != n {
            return Err(Error::Dimension(format!("point of length {} for a {n}-dim quadratic", w.len())));
        }
        Ok((0..n)
            .map(|i| self.factor * self.a.row(i).iter().zip(w).map(|(a, x)| a * x).sum::<f64>())
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceSample {
    pub mean: f64,
    /// Standard error of the mean over probes; zero for a single probe.
    pub std_error: f64,
    pub num_probes: usize,
}

/// Per-probe values `vᵀHv` with Rademacher `v` and `Hv` from a central
/// difference of gradients; probe `k` draws from its own seeded stream.
pub fn hutchinson_probes<G: GradientOracle>(
    oracle: &G,
    point: &[f64],
    num_probes: usize,
    seed: u64,
    stream_offset: u64,
) -> Result<Vec<f64>> {
    if num_probes == 0 {
        return Err(Error::Parameter("at least one probe is required".into()));
    }
    let n = oracle.dim();
    if point.len() != n {
        return Err(Error::Dimension(format!("point of length {} for dimension {n}", point.len())));
    }
    let results = parallel::map_ordered(num_probes, parallel::worker_count(), |k| -> Result<f64> {
        let mut rng = seed::stream(seed, Domain::Probes, stream_offset + k as u64);
        let v: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let plus: Vec<f64> = point.iter().zip(&v).map(|(w, d)| w + HVP_STEP * d).collect();
        let minus: Vec<f64> = point.iter().zip(&v).map(|(w, d)| w - HVP_STEP * d).collect();
        let (gp, gm) = (oracle.gradient(&plus)?, oracle.gradient(&minus)?);
        let vhv: f64 = v
            .iter()
            .zip(gp.iter().zip(&gm))
            .map(|(d, (a, b))| d * (a - b) / (2.0 * HVP_STEP))
            .sum();
        if !vhv.is_finite() {
            return Err(Error::Numerical(format!("probe {k}: non-finite Hessian-vector product")));
        }
        Ok(vhv)
    });
    results.into_iter().collect()
}

pub fn hutchinson_trace<G: GradientOracle>(oracle: &G, point: &[f64], num_probes: usize, seed: u64) -> Result<TraceSample> {
    let samples = hutchinson_probes(oracle, point, num_probes, seed, 0)?;
    Ok(summarize(&samples))
}

fn summarize(samples: &[f64]) -> TraceSample {
    let k = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / k;
    let std_error = if samples.len() > 1 {
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    } else {
        0.0
    };
    TraceSample {
        mean,
        std_error,
        num_probes: samples.len(),
    }
}

/// The Stage-I reconstruction loss as a function of one module's weights,
/// every other module held at full precision.
pub struct ModuleReconstruction<'a> {
    model: &'a FullPrecisionModel,
    data: &'a TeacherBatch,
    module: ModuleId,
}

impl<'a> ModuleReconstruction<'a> {
    pub fn new(model: &'a FullPrecisionModel, data: &'a TeacherBatch, module: ModuleId) -> Result<Self> {
        if module.layer == 0 || module.layer > model.spec().num_layers {
            return Err(Error::Configuration(format!("module {module} is not in the model")));
        }
        Ok(Self { model, data, module })
    }

    pub fn point(&self) -> Vec<f64> {
        self.model.weight(self.module).data().to_vec()
    }

    fn evaluate(&self, w: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        let layer = self.module.layer;
        let shape = self.model.spec().module_shape(self.module.proj);
        let candidate = Tensor::new(shape.to_vec(), w.to_vec())?;
        let nseq = self.data.batch_size();
        let seq_len = self.data.trace.seq_len;
        let mut value = 0.0;
        let mut grad = vec![0.0; w.len()];
        for s in 0..nseq {
            let mut tape = Tape::new();
            let x = tape.constant(self.data.trace.sequence(layer - 1, s));
            let mut vars: Vec<Var> = self.model.layer_constants(&mut tape, layer).to_vec();
            let leaf = tape.leaf(candidate.clone(), want_grad);
            vars[self.module.proj.index()] = leaf;
            let vars: LayerVars = vars.try_into().expect("seven projections");
            let y = self.model.layer_on_tape(&mut tape, layer, x, &vars, seq_len)?;
            let t = tape.constant(self.data.trace.sequence(layer, s));
            let diff = tape.sub(y, t)?;
            let sq = tape.square(diff);
            let loss = tape.mean(sq);
            value += tape.value(loss).item()?;
            if want_grad {
                tape.backward(loss)?;
                let g = tape.grad(leaf).expect("module gradient");
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        let denom = (nseq * self.model.spec().num_layers) as f64;
        grad.iter_mut().for_each(|g| *g /= denom);
        Ok((value / denom, grad))
    }
}

impl GradientOracle for ModuleReconstruction<'_> {
    fn dim(&self) -> usize {
        self.model.spec().param_count(self.module) as usize
    }

    fn value(&self, w: &[f64]) -> Result<f64> {
        Ok(self.evaluate(w, false)?.0)
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(w, true)?.1)
    }
}

/// Hutchinson trace per module of the reconstruction loss at full precision.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEstimate {
    pub modules: Vec<ModuleId>,
    pub traces: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub num_probes: usize,
    pub probe_seed: u64,
}

pub const TRACES_MAGIC: &str = "# bitbudget hessian-traces v1";

impl TraceEstimate {
    pub fn estimate(model: &FullPrecisionModel, data: &TeacherBatch, num_probes: usize, probe_seed: u64) -> Result<Self> {
        let modules = model.spec().module_ids();
        let mut traces = Vec::with_capacity(modules.len());
        let mut std_errors = Vec::with_capacity(modules.len());
        for (i, &m) in modules.iter().enumerate() {
            let ctx = ModuleReconstruction::new(model, data, m)?;
            let offset = (i * num_probes) as u64;
            let samples = hutchinson_probes(&ctx, &ctx.point(), num_probes, probe_seed, offset)?;
            let s = summarize(&samples);
            traces.push(s.mean);
            std_errors.push(s.std_error);
        }
        Ok(Self {
            modules,
            traces,
            std_errors,
            num_probes,
            probe_seed,
        })
    }

    pub fn get(&self, m: ModuleId) -> Option<f64> {
        self.modules.iter().position(|&x| x == m).map(|i| self.traces[i])
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{TRACES_MAGIC}\nnum_probes {}\nprobe_seed {}\nlayer proj trace std_error\n",
            self.num_probes, self.probe_seed
        );
        for ((m, t), e) in self.modules.iter().zip(&self.traces).zip(&self.std_errors) {
            out.push_str(&format!("{} {} {} {}\n", m.layer, m.proj, fmt17(*t), fmt17(*e)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("trace table: {what}"));
        let mut lines = text.lines();
        if lines.next() != Some(TRACES_MAGIC) {
            return Err(bad("missing magic line"));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            line.strip_prefix(key)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| bad(&format!("expected `{key}`")))
        };
        let num_probes = field("num_probes")?.parse().map_err(|_| bad("num_probes"))?;
        let probe_seed = field("probe_seed")?.parse().map_err(|_| bad("probe_seed"))?;
        field("layer proj trace std_error")?;
        let (mut modules, mut traces, mut std_errors) = (Vec::new(), Vec::new(), Vec::new());
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let [layer, proj, t, e] = f.as_slice() else {
                return Err(bad(&format!("malformed line `{line}`")));
            };
            modules.push(ModuleId::new(layer.parse().map_err(|_| bad("layer"))?, proj.parse()?));
            let t: f64 = t.parse().map_err(|_| bad("trace"))?;
            if !t.is_finite() {
                return Err(bad("non-finite trace"));
            }
            traces.push(t);
            std_errors.push(e.parse().map_err(|_| bad("std_error"))?);
        }
        if num_probes == 0 {
            return Err(bad("num_probes must be at least 1"));
        }
        Ok(Self {
            modules,
            traces,
            std_errors,
            num_probes,
            probe_seed,
        })
    }
}

/// Minimizes `Σ (trace_m / N_m)·‖W_b − W_fp‖²` under the bit budget.
pub fn hawq_allocate(traces: &TraceEstimate, pool: &CandidatePool, b_target: f64) -> Result<DiscreteAssignment> {
    let errors = pool.squared_error_table();
    let mut counts = Vec::with_capacity(pool.num_modules());
    let mut values = Vec::with_capacity(pool.num_modules());
    for (i, &m) in pool.modules().iter().enumerate() {
        let t = traces
            .get(m)
            .ok_or_else(|| Error::Configuration(format!("no trace estimate for module {m}")))?;
        let n = pool.module(i).fp.numel() as u64;
        counts.push(n);
        values.push(errors[i].iter().map(|e| -(t / n as f64) * e).collect());
    }
    let problem = AllocationProblem::with_values(
        pool.modules().to_vec(),
        pool.bitset().bits().to_vec(),
        counts,
        values,
        b_target,
    )?;
    solve(&problem)
}
