//! Symmetric per-group round-to-nearest weight quantization and the frozen
//! candidate pool `{W_b}` built from it.

use crate::error::{Error, Result};
use crate::model::{FullPrecisionModel, ModuleId};
use crate::tensor::Tensor;

/// Sorted, distinct candidate bit-widths, each at least 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitWidthSet(Vec<u32>);

impl BitWidthSet {
    pub fn new(mut bits: Vec<u32>) -> Result<Self> {
        bits.sort_unstable();
        if bits.len() < 2 {
            return Err(Error::Parameter("need at least two candidate bit-widths".into()));
        }
        if bits[0] < 2 {
            return Err(Error::Parameter(format!("bit-width {} is below 2", bits[0])));
        }
        if bits.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Parameter(format!("duplicate bit-width in {bits:?}")));
        }
        Ok(Self(bits))
    }

    pub fn bits(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> u32 {
        self.0[0]
    }

    pub fn max(&self) -> u32 {
        *self.0.last().expect("non-empty")
    }

    pub fn index_of(&self, b: u32) -> Option<usize> {
        self.0.iter().position(|&x| x == b)
    }
}

impl Default for BitWidthSet {
    fn default() -> Self {
        Self(vec![2, 3, 4])
    }
}

fn quantize_group(src: &[f64], dst: &mut [f64], qmax: f64) {
    let amax = src.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if amax == 0.0 {
        dst.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let scale = amax / qmax;
    for (d, &w) in dst.iter_mut().zip(src) {
        let level = (w / scale).round_ties_even().clamp(-qmax, qmax);
        *d = level * scale;
    }
}

/// Per-group symmetric RTN along each row: `scale = max|w| / (2^(bits-1) - 1)`,
/// levels rounded half-to-even and clamped to `±(2^(bits-1) - 1)`. The last
/// group of a row may be short; an all-zero group maps to zeros.
pub fn quantize_rtn(w: &Tensor, bits: u32, group_size: usize) -> Result<Tensor> {
    if bits < 2 {
        return Err(Error::Parameter(format!("bits must be at least 2, got {bits}")));
    }
    if bits > 52 {
        return Err(Error::Parameter(format!("bits {bits} exceeds the f64 mantissa")));
    }
    if group_size == 0 {
        return Err(Error::Parameter("group_size must be positive".into()));
    }
    let qmax = ((1u64 << (bits - 1)) - 1) as f64;
    let cols = w.cols();
    let mut out = vec![0.0; w.numel()];
    for (src_row, dst_row) in w.data().chunks(cols).zip(out.chunks_mut(cols)) {
        for (src, dst) in src_row.chunks(group_size).zip(dst_row.chunks_mut(group_size)) {
            quantize_group(src, dst, qmax);
        }
    }
    Tensor::new(w.shape().to_vec(), out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleCandidates {
    pub fp: Tensor,
    /// One tensor per bit-width, aligned with the pool's [`BitWidthSet`].
    pub quantized: Vec<Tensor>,
}

/// Immutable pre-quantized weights for every `(module, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    bitset: BitWidthSet,
    group_size: usize,
    modules: Vec<ModuleId>,
    candidates: Vec<ModuleCandidates>,
}

impl CandidatePool {
    pub fn from_parts(
        bitset: BitWidthSet,
        group_size: usize,
        modules: Vec<ModuleId>,
        candidates: Vec<ModuleCandidates>,
    ) -> Result<Self> {
        if modules.len() != candidates.len() {
            return Err(Error::Dimension("module list and candidate list differ in length".into()));
        }
        for (m, c) in modules.iter().zip(&candidates) {
            if c.quantized.len() != bitset.len() {
                return Err(Error::Configuration(format!(
                    "module {m} has {} candidates for {} bit-widths",
                    c.quantized.len(),
                    bitset.len()
                )));
            }
            if c.quantized.iter().any(|q| q.shape() != c.fp.shape()) {
                return Err(Error::Dimension(format!("candidate shape mismatch for module {m}")));
            }
        }
        Ok(Self {
            bitset,
            group_size,
            modules,
            candidates,
        })
    }

    pub fn bitset(&self) -> &BitWidthSet {
        &self.bitset
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn modules(&self) -> &[ModuleId] {
        &self.modules
    }

    pub fn num_modules(&self) -> usize {
        self.modules.len()
    }

    pub fn entry_count(&self) -> usize {
        self.candidates.iter().map(|c| c.quantized.len()).sum()
    }

    pub fn module(&self, index: usize) -> &ModuleCandidates {
        &self.candidates[index]
    }

    pub fn candidate(&self, module: usize, bit_index: usize) -> &Tensor {
        &self.candidates[module].quantized[bit_index]
    }

    /// Mean squared quantization error per module and bit-width.
    pub fn mse_table(&self) -> Vec<Vec<f64>> {
        self.candidates
            .iter()
            .map(|c| {
                c.quantized
                    .iter()
                    .map(|q| q.squared_distance(&c.fp) / c.fp.numel() as f64)
                    .collect()
            })
            .collect()
    }

    /// `‖W_b − W_fp‖²` per module and bit-width.
    pub fn squared_error_table(&self) -> Vec<Vec<f64>> {
        self.candidates
            .iter()
            .map(|c| c.quantized.iter().map(|q| q.squared_distance(&c.fp)).collect())
            .collect()
    }
}

pub fn build_pool(model: &FullPrecisionModel, bitset: &BitWidthSet, group_size: usize) -> Result<CandidatePool> {
    let modules = model.spec().module_ids();
    let mut candidates = Vec::with_capacity(modules.len());
    for &m in &modules {
        let fp = model.weight(m).clone();
        let quantized = bitset
            .bits()
            .iter()
            .map(|&b| quantize_rtn(&fp, b, group_size))
            .collect::<Result<Vec<_>>>()?;
        candidates.push(ModuleCandidates { fp, quantized });
    }
    CandidatePool::from_parts(bitset.clone(), group_size, modules, candidates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn mse(a: &Tensor, b: &Tensor) -> f64 {
        a.squared_distance(b) / a.numel() as f64
    }

    #[test]
    fn two_bit_direct_example() {
        let w = Tensor::vector(vec![1.0, -1.0, 0.4]);
        let q = quantize_rtn(&w, 2, 16).unwrap();
        assert_eq!(q.data(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn on_grid_input_unchanged() {
        // 3-bit levels ±3 with scale 0.25
        let w = Tensor::vector(vec![0.75, -0.5, 0.25, 0.0, -0.75, 0.5]);
        assert_eq!(quantize_rtn(&w, 3, 6).unwrap(), w);
    }

    #[test]
    fn zero_group_and_short_tail() {
        let w = Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 2.0, 0.9]]).unwrap();
        let q = quantize_rtn(&w, 2, 3).unwrap();
        // groups [0,0,0] and the short tail [2.0, 0.9]
        assert_eq!(q.data(), &[0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn rejects_bad_parameters() {
        let w = Tensor::vector(vec![1.0]);
        assert!(matches!(quantize_rtn(&w, 1, 4), Err(Error::Parameter(_))));
        assert!(matches!(quantize_rtn(&w, 2, 0), Err(Error::Parameter(_))));
        assert!(BitWidthSet::new(vec![2]).is_err());
        assert!(BitWidthSet::new(vec![1, 2]).is_err());
        assert!(BitWidthSet::new(vec![3, 3]).is_err());
        assert_eq!(BitWidthSet::new(vec![4, 2, 3]).unwrap().bits(), &[2, 3, 4]);
    }

    #[test]
    fn error_decreases_with_bits() {
        let w = random(64, 64, 5);
        let e: Vec<f64> = [2, 3, 4].iter().map(|&b| mse(&w, &quantize_rtn(&w, b, 16).unwrap())).collect();
        assert!(e[2] < e[1] && e[1] < e[0], "{e:?}");
    }

    #[test]
    fn pool_counts_determinism_and_mse_table() {
        let spec = ModelSpec {
            num_layers: 2,
            hidden_dim: 32,
            ffn_dim: 64,
            vocab_size: 40,
            max_seq_len: 8,
            ..Default::default()
        };
        let model = FullPrecisionModel::build(spec.clone()).unwrap();
        let bits = BitWidthSet::default();
        let pool = build_pool(&model, &bits, 16).unwrap();
        assert_eq!(pool.entry_count(), 2 * 7 * 3);
        assert_eq!(pool, build_pool(&FullPrecisionModel::build(spec).unwrap(), &bits, 16).unwrap());
        let table = pool.mse_table();
        for (i, &m) in pool.modules().iter().enumerate() {
            let w = model.weight(m);
            for (j, &b) in bits.bits().iter().enumerate() {
                let standalone = mse(w, &quantize_rtn(w, b, 16).unwrap());
                assert_eq!(table[i][j], standalone);
                assert_eq!(pool.candidate(i, j).shape(), w.shape());
            }
            // monotone fidelity
            assert!(table[i].windows(2).all(|p| p[1] <= p[0]), "{m}: {:?}", table[i]);
        }
    }

    proptest! {
        #[test]
        fn idempotent_on_grid_aligned_groups(
            levels in prop::collection::vec(-3i32..=3, 1..40),
            exp in -6i32..6,
        ) {
            // every group of 8 attains ±qmax, with a power-of-two scale
            let scale = 2f64.powi(exp);
            let mut data: Vec<f64> = levels.iter().map(|&l| l as f64 * scale).collect();
            for chunk in data.chunks_mut(8) {
                chunk[0] = 3.0 * scale;
            }
            let w = Tensor::vector(data);
            let once = quantize_rtn(&w, 3, 8).unwrap();
            prop_assert_eq!(&once, &w);
            prop_assert_eq!(quantize_rtn(&once, 3, 8).unwrap(), once);
        }

        #[test]
        fn requantization_stays_within_one_step(data in prop::collection::vec(-5.0f64..5.0, 1..64), bits in 2u32..6) {
            let w = Tensor::vector(data);
            let once = quantize_rtn(&w, bits, 16).unwrap();
            let twice = quantize_rtn(&once, bits, 16).unwrap();
            let qmax = ((1u64 << (bits - 1)) - 1) as f64;
            for (g1, g2) in once.data().chunks(16).zip(twice.data().chunks(16)) {
                let step = g1.iter().fold(0.0f64, |m, v| m.max(v.abs())) / qmax;
                for (a, b) in g1.iter().zip(g2) {
                    prop_assert!((a - b).abs() <= step * (1.0 + 1e-12));
                }
            }
        }

        #[test]
        fn odd_symmetry_on_tie_free_inputs(data in prop::collection::vec(-5.0f64..5.0, 1..64), bits in 2u32..6) {
            let w = Tensor::vector(data.clone());
            let neg = Tensor::vector(data.iter().map(|x| -x).collect());
            let qmax = ((1u64 << (bits - 1)) - 1) as f64;
            let tie_free = data.chunks(16).all(|g| {
                let s = g.iter().fold(0.0f64, |m, v| m.max(v.abs())) / qmax;
                g.iter().all(|x| ((x / s).abs().fract() - 0.5).abs() > 1e-9)
            });
            prop_assume!(tie_free);
            let a = quantize_rtn(&w, bits, 16).unwrap();
            let b = quantize_rtn(&neg, bits, 16).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }
}
