//! Label-partitioned kernel memory.
//!
//! Each label owns up to `T` cells `(ℓ, v, α)`. Reads average the cells of
//! one label with weights `K(h, v) / Σ K`, `K(h, v) = exp(λ cos(h, v))`;
//! scores across labels follow a kernel classifier `s_y ∝ α_y^δ K(h, M_y)`.
//! Writes are gated by a log-probability margin and only ever touch cells of
//! the true label.

mod write;

pub use write::{margin_loss, mem_write, mem_write_ablation, WriteOutcome, WritePolicy};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numcore::cosine_unchecked;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    /// Cells per label `T`.
    pub capacity: usize,
    /// Kernel sharpness `λ`.
    pub lambda: f64,
    /// Strength exponent `δ` on the read weight.
    pub delta: f64,
    /// Write margin in log-probability units.
    pub margin: f64,
    pub decay: f64,
    /// Total cell budget `N` for the global LRU ablation; `T·V` when unset.
    pub global_capacity: Option<usize>,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: 1,
            lambda: 10.0,
            delta: 0.5,
            margin: 0.5,
            decay: 0.99,
            global_capacity: None,
        }
    }
}

impl MemoryConfig {
    /// Checks documented ranges; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(invalid("capacity: must be >= 1"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(invalid("lambda: must be finite and > 0"));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(invalid("delta: must be finite and >= 0"));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(invalid("margin: must be finite and >= 0"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(invalid("decay: must lie in (0, 1]"));
        }
        if self.global_capacity == Some(0) {
            return Err(invalid("global_capacity: must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryCell<T> {
    pub label: usize,
    pub content: Vec<T>,
    pub alpha: T,
    /// Logical time of the last read or write, for LRU eviction.
    pub(crate) touched: u64,
}

/// Result of reading the cells of one label.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadResult<T> {
    pub content: Vec<T>,
    pub alpha: T,
    /// One weight per non-empty cell, in cell order.
    pub weights: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMemory<T> {
    config: MemoryConfig,
    dim: usize,
    /// Non-empty cells per label in slot order; absent cells are empty.
    cells: Vec<Vec<MemoryCell<T>>>,
    clock: u64,
}

impl<T: Scalar> LabeledMemory<T> {
    pub fn new(num_labels: usize, dim: usize, config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        if num_labels == 0 || dim == 0 {
            return Err(invalid("memory needs at least one label and dimension"));
        }
        Ok(Self {
            config,
            dim,
            cells: vec![Vec::new(); num_labels],
            clock: 0,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn num_labels(&self) -> usize {
        self.cells.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cell budget used by the global LRU ablation.
    pub fn global_capacity(&self) -> usize {
        self.config
            .global_capacity
            .unwrap_or(self.config.capacity * self.cells.len())
    }

    /// Non-empty cells of `label`.
    pub fn cells(&self, label: usize) -> &[MemoryCell<T>] {
        &self.cells[label]
    }

    pub fn cell_count(&self, label: usize) -> usize {
        self.cells[label].len()
    }

    pub fn total_cells(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(Vec::is_empty)
    }

    /// Drops every cell.
    pub fn clear(&mut self) {
        self.cells.iter_mut().for_each(Vec::clear);
        self.clock = 0;
    }

    /// Places a cell `(label, content, alpha)` in the next free slot of
    /// `label`, returning the slot index.
    pub fn insert_cell(&mut self, label: usize, content: Vec<T>, alpha: T) -> Result<usize> {
        self.check_label(label)?;
        self.check_dim(&content)?;
        if content.iter().any(|v| !v.is_finite()) {
            return Err(invalid("content: must be finite"));
        }
        if !(alpha.is_finite() && alpha > T::zero()) {
            return Err(invalid("alpha: must be finite and > 0"));
        }
        if self.cells[label].len() >= self.config.capacity {
            return Err(invalid(format!("label {label} already has {} cells", self.config.capacity)));
        }
        let touched = self.tick();
        self.cells[label].push(MemoryCell {
            label,
            content,
            alpha,
            touched,
        });
        Ok(self.cells[label].len() - 1)
    }

    pub(crate) fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.cells.len() {
            return Err(invalid(format!("label {y} out of range for V={}", self.cells.len())));
        }
        Ok(())
    }

    pub(crate) fn check_dim(&self, h: &[T]) -> Result<()> {
        if h.len() != self.dim {
            return Err(invalid(format!("h has length {}, memory expects {}", h.len(), self.dim)));
        }
        Ok(())
    }

    fn lambda(&self) -> T {
        T::lit(self.config.lambda)
    }

    /// Normalized kernel weights of `h` against `cells`.
    pub(crate) fn kernel_weights(&self, h: &[T], cells: &[MemoryCell<T>]) -> Vec<T> {
        let lambda = self.lambda();
        let mut w: Vec<T> = cells
            .iter()
            .map(|c| lambda * cosine_unchecked(h, &c.content))
            .collect();
        let max = w.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in w.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        w.iter_mut().for_each(|v| *v /= sum);
        w
    }

    /// Soft read of label `y`; zero content and weight when it has no cell.
    pub fn read(&self, h: &[T], y: usize) -> Result<ReadResult<T>> {
        self.check_label(y)?;
        self.check_dim(h)?;
        Ok(self.read_unchecked(h, y))
    }

    fn read_unchecked(&self, h: &[T], y: usize) -> ReadResult<T> {
        let cells = &self.cells[y];
        let mut content = vec![T::zero(); self.dim];
        let mut alpha = T::zero();
        if cells.is_empty() {
            return ReadResult {
                content,
                alpha,
                weights: Vec::new(),
            };
        }
        let weights = self.kernel_weights(h, cells);
        for (c, &w) in cells.iter().zip(&weights) {
            for (m, &v) in content.iter_mut().zip(&c.content) {
                *m += w * v;
            }
            alpha += w * c.alpha;
        }
        ReadResult {
            content,
            alpha,
            weights,
        }
    }

    /// Kernel-classifier distribution over labels. Labels without cells get
    /// zero; an entirely empty memory gives the uniform distribution.
    pub fn scores(&self, h: &[T]) -> Result<Vec<T>> {
        self.check_dim(h)?;
        let v = self.cells.len();
        if self.is_empty() {
            return Ok(vec![T::one() / T::lit(v as f64); v]);
        }
        let (lambda, delta) = (self.lambda(), T::lit(self.config.delta));
        let mut logits: Vec<Option<T>> = vec![None; v];
        for (y, slot) in logits.iter_mut().enumerate() {
            if self.cells[y].is_empty() {
                continue;
            }
            let r = self.read_unchecked(h, y);
            let strength = if delta == T::zero() {
                T::zero()
            } else {
                delta * r.alpha.ln()
            };
            *slot = Some(strength + lambda * cosine_unchecked(h, &r.content));
        }
        let max = logits.iter().flatten().copied().fold(T::neg_infinity(), T::max);
        let mut out: Vec<T> = logits
            .iter()
            .map(|l| l.map_or(T::zero(), |l| (l - max).exp()))
            .collect();
        let sum: T = out.iter().copied().sum();
        out.iter_mut().for_each(|s| *s /= sum);
        Ok(out)
    }

    /// One line per non-empty cell: `label<TAB>alpha<TAB>v1,v2,…`, label-major
    /// then cell order. Values use the shortest round-trip decimal form.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for cells in &self.cells {
            for c in cells {
                let content: Vec<String> = c.content.iter().map(|v| v.as_f64().to_string()).collect();
                let _ = writeln!(out, "{}\t{}\t{}", c.label, c.alpha.as_f64(), content.join(","));
            }
        }
        out
    }

    pub(crate) fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    pub(crate) fn cells_mut(&mut self, label: usize) -> &mut Vec<MemoryCell<T>> {
        &mut self.cells[label]
    }

    pub(crate) fn all_cells(&self) -> &[Vec<MemoryCell<T>>] {
        &self.cells
    }
}

/// Free-function form of [`LabeledMemory::read`].
pub fn mem_read<T: Scalar>(mem: &LabeledMemory<T>, h: &[T], y: usize) -> Result<ReadResult<T>> {
    mem.read(h, y)
}

/// Free-function form of [`LabeledMemory::scores`].
pub fn mem_scores<T: Scalar>(mem: &LabeledMemory<T>, h: &[T]) -> Result<Vec<T>> {
    mem.scores(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mem(v: usize, d: usize, cfg: MemoryConfig) -> LabeledMemory<f64> {
        LabeledMemory::new(v, d, cfg).unwrap()
    }

    fn put(m: &mut LabeledMemory<f64>, y: usize, v: &[f64], alpha: f64) {
        m.cells_mut(y).push(MemoryCell {
            label: y,
            content: v.to_vec(),
            alpha,
            touched: 0,
        });
    }

    #[test]
    fn singleton_read_returns_the_cell() {
        let mut m = mem(3, 2, MemoryConfig::default());
        put(&mut m, 1, &[0.3, -0.7], 2.5);
        let r = m.read(&[1.0, 1.0], 1).unwrap();
        assert_eq!(r.content, vec![0.3, -0.7]);
        assert_eq!(r.alpha, 2.5);
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn equidistant_cells_average() {
        let mut m = mem(1, 2, MemoryConfig::default());
        put(&mut m, 0, &[1.0, 0.0], 1.0);
        put(&mut m, 0, &[0.0, 1.0], 1.0);
        let r = m.read(&[1.0, 1.0], 0).unwrap();
        assert_eq!(r.weights, vec![0.5, 0.5]);
        assert_eq!(r.content, vec![0.5, 0.5]);
    }

    #[test]
    fn two_cell_read_matches_scalar_oracle() {
        let cfg = MemoryConfig {
            lambda: 1.0,
            ..MemoryConfig::default()
        };
        let mut m = mem(1, 2, cfg);
        put(&mut m, 0, &[1.0, 0.0], 2.0);
        put(&mut m, 0, &[0.0, 1.0], 1.0);
        let r = m.read(&[1.0, 0.0], 0).unwrap();
        assert!((r.weights[0] - 0.73106).abs() < 1e-5);
        assert!((r.content[0] - 0.73106).abs() < 1e-5);
        assert!((r.content[1] - 0.26894).abs() < 1e-5);
        assert!((r.alpha - 1.73106).abs() < 1e-5);
    }

    #[test]
    fn empty_label_read_is_zero() {
        let m = mem(2, 3, MemoryConfig::default());
        let r = m.read(&[1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(r.content, vec![0.0; 3]);
        assert_eq!(r.alpha, 0.0);
        assert!(r.weights.is_empty());
        assert!(m.read(&[1.0, 0.0, 0.0], 2).is_err());
        assert!(m.read(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn empty_memory_scores_uniform() {
        let m = mem(4, 2, MemoryConfig::default());
        assert_eq!(m.scores(&[1.0, 2.0]).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn mirror_symmetric_labels_split_evenly() {
        let mut m = mem(2, 2, MemoryConfig::default());
        put(&mut m, 0, &[1.0, 0.5], 1.5);
        put(&mut m, 1, &[0.5, 1.0], 1.5);
        let s = m.scores(&[1.0, 1.0]).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_label_scores_match_scalar_oracle() {
        let cfg = MemoryConfig {
            lambda: 1.0,
            delta: 0.5,
            ..MemoryConfig::default()
        };
        let mut m = mem(3, 2, cfg);
        put(&mut m, 0, &[1.0, 0.0], 1.0);
        put(&mut m, 1, &[0.0, 1.0], 4.0);
        let s = m.scores(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((s[0] - e / (e + 2.0)).abs() < 1e-12);
        assert!((s[0] - 0.57611).abs() < 1e-5);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn dump_is_label_major() {
        let mut m = mem(3, 2, MemoryConfig::default());
        put(&mut m, 2, &[1.0, 0.0], 1.0);
        put(&mut m, 0, &[0.5, 0.25], 2.0);
        put(&mut m, 0, &[0.0, 1.0], 3.0);
        assert_eq!(m.dump(), "0\t2\t0.5,0.25\n0\t3\t0,1\n2\t1\t1,0\n");
    }

    #[test]
    fn config_errors_name_the_key() {
        for (cfg, key) in [
            (MemoryConfig { capacity: 0, ..Default::default() }, "capacity"),
            (MemoryConfig { lambda: 0.0, ..Default::default() }, "lambda"),
            (MemoryConfig { delta: -1.0, ..Default::default() }, "delta"),
            (MemoryConfig { margin: f64::NAN, ..Default::default() }, "margin"),
            (MemoryConfig { decay: 1.5, ..Default::default() }, "decay"),
        ] {
            let err = cfg.validate().unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
    }

    proptest! {
        #[test]
        fn scores_form_a_distribution(
            cells in proptest::collection::vec((0usize..4, proptest::collection::vec(-2.0f64..2.0, 3), 0.01f64..5.0), 0..8),
            h in proptest::collection::vec(-2.0f64..2.0, 3),
            delta in 0.0f64..2.0,
        ) {
            let mut m = mem(4, 3, MemoryConfig { delta, ..Default::default() });
            for (y, v, a) in &cells {
                put(&mut m, *y, v, *a);
            }
            let s = m.scores(&h).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (y, &p) in s.iter().enumerate() {
                prop_assert!(p >= 0.0);
                if !m.is_empty() && m.cell_count(y) == 0 {
                    prop_assert_eq!(p, 0.0);
                }
            }
        }
    }
}
