use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::memory::{LabeledMemory, MemoryCell};
use crate::numcore::argmax;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WritePolicy {
    /// Margin-gated merge and within-label replacement.
    LabelPartitioned,
    /// Append every step; evict the least recently used cell of any label
    /// once the total budget is exceeded.
    WriteAlwaysGlobalLru,
}

impl WritePolicy {
    pub fn name(self) -> &'static str {
        match self {
            Self::LabelPartitioned => "label_partitioned",
            Self::WriteAlwaysGlobalLru => "write_always_global_lru",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "label_partitioned" => Ok(Self::LabelPartitioned),
            "write_always_global_lru" | "global_lru" => Ok(Self::WriteAlwaysGlobalLru),
            _ => Err(invalid(format!("unknown policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WriteOutcome<T> {
    /// Hinge loss on the log-probability margin.
    pub loss: T,
    /// True when nothing was written.
    pub gated: bool,
    pub merged: bool,
    /// Slot of an occupied cell overwritten by the new cell.
    pub replaced_cell_index: Option<usize>,
    /// Slot of a previously empty cell that received the new cell.
    pub installed_cell_index: Option<usize>,
    /// Label of a cell evicted by the global LRU policy.
    pub evicted_label: Option<usize>,
}

impl<T: Scalar> WriteOutcome<T> {
    fn gated(loss: T) -> Self {
        Self {
            loss,
            gated: true,
            merged: false,
            replaced_cell_index: None,
            installed_cell_index: None,
            evicted_label: None,
        }
    }

    /// True when memory changed.
    pub fn wrote(&self) -> bool {
        !self.gated
    }
}

fn check_distribution<T: Scalar>(p: &[T], v: usize) -> Result<()> {
    if p.len() != v {
        return Err(invalid(format!("P has length {}, memory has {v} labels", p.len())));
    }
    if p.iter().any(|x| !x.is_finite() || *x < T::zero()) {
        return Err(invalid("P has negative or non-finite entries"));
    }
    let sum: T = p.iter().copied().sum();
    if (sum - T::one()).abs() > T::lit(1e-6) {
        return Err(invalid(format!("P sums to {sum}, not 1")));
    }
    Ok(())
}

/// `-min(0, log P(y) - log P(ỹ) - margin)` with `ỹ` the best label other
/// than `y` (lowest id on ties). Probabilities are floored at the smallest
/// positive normal value before the log.
pub fn margin_loss<T: Scalar>(p: &[T], y: usize, margin: T) -> T {
    let floor = T::min_positive_value();
    let lp = |q: T| q.max(floor).ln();
    let mut runner = None::<T>;
    for (i, &q) in p.iter().enumerate() {
        if i != y && runner.is_none_or(|r| q > r) {
            runner = Some(q);
        }
    }
    let Some(runner) = runner else {
        return T::zero();
    };
    let gap = lp(p[y]) - lp(runner) - margin;
    if gap < T::zero() {
        -gap
    } else {
        T::zero()
    }
}

/// Margin-gated write for the true label `y` with combined prediction `p`.
///
/// On a margin violation every cell of `y` is merged towards `h` with
/// weights `softmax(λ cos(h, v))` and has its `α` decayed then incremented.
/// If the prediction was wrong and the label has more than one slot, the new
/// cell `(y, h, 1)` then takes the slot with the smallest pre-merge `α`
/// (an empty slot, weight 0, when one is free). A label without cells always
/// receives the new cell.
pub fn mem_write<T: Scalar>(
    mem: &mut LabeledMemory<T>,
    h: &[T],
    y: usize,
    p: &[T],
) -> Result<WriteOutcome<T>> {
    mem.check_label(y)?;
    mem.check_dim(h)?;
    check_distribution(p, mem.num_labels())?;
    let loss = margin_loss(p, y, T::lit(mem.config().margin));
    if loss == T::zero() {
        return Ok(WriteOutcome::gated(loss));
    }
    let y_hat = argmax(p);
    let capacity = mem.config().capacity;
    let decay = T::lit(mem.config().decay);
    let now = mem.tick();
    let new_cell = MemoryCell {
        label: y,
        content: h.to_vec(),
        alpha: T::one(),
        touched: now,
    };
    let mut out = WriteOutcome {
        loss,
        gated: false,
        merged: false,
        replaced_cell_index: None,
        installed_cell_index: None,
        evicted_label: None,
    };
    if mem.cell_count(y) == 0 {
        mem.cells_mut(y).push(new_cell);
        out.installed_cell_index = Some(0);
        return Ok(out);
    }
    // Slot with the smallest weight before merging; free slots weigh 0.
    let n = mem.cell_count(y);
    let j = if n < capacity {
        n
    } else {
        let cells = mem.cells(y);
        (0..n).fold(0, |best, i| if cells[i].alpha < cells[best].alpha { i } else { best })
    };
    let w = mem.kernel_weights(h, mem.cells(y));
    for (cell, &wm) in mem.cells_mut(y).iter_mut().zip(&w) {
        for (v, &x) in cell.content.iter_mut().zip(h) {
            *v += wm * x;
        }
        cell.alpha = cell.alpha * decay + wm;
        cell.touched = now;
    }
    out.merged = true;
    if y != y_hat && capacity > 1 {
        if j == n {
            mem.cells_mut(y).push(new_cell);
            out.installed_cell_index = Some(j);
        } else {
            mem.cells_mut(y)[j] = new_cell;
            out.replaced_cell_index = Some(j);
        }
    }
    Ok(out)
}

/// Write under an explicit policy. `LabelPartitioned` is [`mem_write`].
///
/// `WriteAlwaysGlobalLru` ignores the margin, reads (touches) the cells of
/// `y`, appends `(y, h, 1)`, and while the total cell count exceeds the
/// global budget evicts the least recently touched cell of any label
/// (lowest label, then lowest slot, on ties).
pub fn mem_write_ablation<T: Scalar>(
    mem: &mut LabeledMemory<T>,
    h: &[T],
    y: usize,
    p: &[T],
    policy: WritePolicy,
) -> Result<WriteOutcome<T>> {
    if policy == WritePolicy::LabelPartitioned {
        return mem_write(mem, h, y, p);
    }
    mem.check_label(y)?;
    mem.check_dim(h)?;
    check_distribution(p, mem.num_labels())?;
    let loss = margin_loss(p, y, T::lit(mem.config().margin));
    let now = mem.tick();
    for cell in mem.cells_mut(y).iter_mut() {
        cell.touched = now;
    }
    mem.cells_mut(y).push(MemoryCell {
        label: y,
        content: h.to_vec(),
        alpha: T::one(),
        touched: now,
    });
    let mut out = WriteOutcome {
        loss,
        gated: false,
        merged: false,
        replaced_cell_index: None,
        installed_cell_index: Some(mem.cell_count(y) - 1),
        evicted_label: None,
    };
    let budget = mem.global_capacity();
    while mem.total_cells() > budget {
        let mut victim: Option<(u64, usize, usize)> = None;
        for (label, cells) in mem.all_cells().iter().enumerate() {
            for (i, c) in cells.iter().enumerate() {
                if victim.is_none_or(|(t, _, _)| c.touched < t) {
                    victim = Some((c.touched, label, i));
                }
            }
        }
        let (_, label, i) = victim.expect("memory over budget has cells");
        mem.cells_mut(label).remove(i);
        if label == y && out.installed_cell_index.is_some_and(|k| k > i) {
            out.installed_cell_index = out.installed_cell_index.map(|k| k - 1);
        }
        out.evicted_label = Some(label);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MemoryConfig;

    fn put(m: &mut LabeledMemory<f64>, y: usize, v: &[f64], alpha: f64) {
        m.cells_mut(y).push(MemoryCell {
            label: y,
            content: v.to_vec(),
            alpha,
            touched: 0,
        });
    }

    #[test]
    fn clear_margin_is_gated_and_bit_identical() {
        let mut m = LabeledMemory::<f64>::new(2, 2, MemoryConfig::default()).unwrap();
        put(&mut m, 0, &[1.0, 0.0], 1.0);
        let before = m.clone();
        // log P(0) - log P(1) = 2.0 > 0.5.
        let e2 = 2f64.exp();
        let p = [e2 / (1.0 + e2), 1.0 / (1.0 + e2)];
        let out = mem_write(&mut m, &[0.0, 1.0], 0, &p).unwrap();
        assert!(out.gated && !out.merged && out.replaced_cell_index.is_none());
        assert_eq!(out.loss, 0.0);
        assert_eq!(m, before);
    }

    #[test]
    fn first_write_installs_a_unit_cell() {
        let mut m = LabeledMemory::<f64>::new(3, 2, MemoryConfig::default()).unwrap();
        let out = mem_write(&mut m, &[0.5, -1.0], 2, &[0.6, 0.3, 0.1]).unwrap();
        assert!(!out.gated && !out.merged);
        assert_eq!(out.installed_cell_index, Some(0));
        assert_eq!(out.replaced_cell_index, None);
        assert_eq!(m.cells(2)[0].content, vec![0.5, -1.0]);
        assert_eq!(m.cells(2)[0].alpha, 1.0);
        assert_eq!(m.total_cells(), 1);
    }

    #[test]
    fn low_margin_correct_prediction_merges_without_replacement() {
        // Contents chosen so the merge weights are exactly [0.6, 0.4]:
        // cos differs by ln(1.5)/λ between the two cells.
        let lambda = 10.0;
        let cfg = MemoryConfig {
            capacity: 2,
            lambda,
            ..MemoryConfig::default()
        };
        let mut m = LabeledMemory::<f64>::new(2, 2, cfg).unwrap();
        let c1 = 1.0f64;
        let c2 = c1 - 1.5f64.ln() / lambda;
        let v1 = [c1, 0.0];
        let v2 = [c2, (1.0 - c2 * c2).sqrt()];
        put(&mut m, 0, &v1, 3.0);
        put(&mut m, 0, &v2, 0.2);
        let h = [1.0, 0.0];
        let out = mem_write(&mut m, &h, 0, &[0.55, 0.45]).unwrap();
        assert!(out.loss > 0.0 && out.merged);
        assert_eq!(out.replaced_cell_index, None);
        let cells = m.cells(0);
        assert!((cells[0].alpha - 3.57).abs() < 1e-12);
        assert!((cells[1].alpha - 0.598).abs() < 1e-12);
        assert!((cells[0].content[0] - (v1[0] + 0.6)).abs() < 1e-12);
        assert!((cells[1].content[0] - (v2[0] + 0.4)).abs() < 1e-12);
    }

    #[test]
    fn wrong_prediction_replaces_smallest_pre_merge_alpha() {
        let cfg = MemoryConfig {
            capacity: 2,
            ..MemoryConfig::default()
        };
        let mut m = LabeledMemory::<f64>::new(2, 2, cfg).unwrap();
        put(&mut m, 0, &[1.0, 0.0], 0.5);
        put(&mut m, 0, &[0.0, 1.0], 2.0);
        let out = mem_write(&mut m, &[0.6, 0.8], 0, &[0.3, 0.7]).unwrap();
        assert_eq!(out.replaced_cell_index, Some(0));
        assert_eq!(m.cells(0)[0].content, vec![0.6, 0.8]);
        assert_eq!(m.cells(0)[0].alpha, 1.0);
        assert_eq!(m.cell_count(0), 2);
    }

    #[test]
    fn wrong_prediction_fills_free_slot() {
        let cfg = MemoryConfig {
            capacity: 3,
            ..MemoryConfig::default()
        };
        let mut m = LabeledMemory::<f64>::new(2, 2, cfg).unwrap();
        put(&mut m, 1, &[1.0, 0.0], 0.5);
        let out = mem_write(&mut m, &[0.0, 1.0], 1, &[0.9, 0.1]).unwrap();
        assert!(out.merged);
        assert_eq!(out.installed_cell_index, Some(1));
        assert_eq!(m.cell_count(1), 2);
        assert!((m.cells(1)[0].alpha - (0.5 * 0.99 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn single_slot_never_replaces() {
        let mut m = LabeledMemory::<f64>::new(2, 2, MemoryConfig::default()).unwrap();
        put(&mut m, 0, &[1.0, 0.0], 1.0);
        let out = mem_write(&mut m, &[0.0, 1.0], 0, &[0.2, 0.8]).unwrap();
        assert!(out.merged && out.replaced_cell_index.is_none() && out.installed_cell_index.is_none());
        assert_eq!(m.cells(0)[0].content, vec![1.0, 1.0]);
        assert!((m.cells(0)[0].alpha - 1.99).abs() < 1e-15);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let mut m = LabeledMemory::<f64>::new(2, 2, MemoryConfig::default()).unwrap();
        assert!(mem_write(&mut m, &[1.0, 0.0], 2, &[0.5, 0.5]).is_err());
        assert!(mem_write(&mut m, &[1.0], 0, &[0.5, 0.5]).is_err());
        assert!(mem_write(&mut m, &[1.0, 0.0], 0, &[0.5, 0.6]).is_err());
    }

    #[test]
    fn global_lru_starves_the_rare_label() {
        let cfg = MemoryConfig {
            capacity: 2,
            global_capacity: Some(4),
            ..MemoryConfig::default()
        };
        let mut lru = LabeledMemory::<f64>::new(2, 2, cfg).unwrap();
        let mut part = lru.clone();
        let mut lru_hit_zero = false;
        let mut seen_b = false;
        for t in 0..40 {
            let y = if t % 4 == 3 { 1 } else { 0 };
            let h = [1.0 + t as f64, if y == 1 { 3.0 } else { -1.0 }];
            let p = part.scores(&h).unwrap();
            mem_write_ablation(&mut part, &h, y, &p, WritePolicy::LabelPartitioned).unwrap();
            let out =
                mem_write_ablation(&mut lru, &h, y, &[0.5, 0.5], WritePolicy::WriteAlwaysGlobalLru)
                    .unwrap();
            assert!(out.wrote());
            assert!(lru.total_cells() <= 4);
            seen_b |= y == 1;
            if seen_b {
                assert!(part.cell_count(1) >= 1);
                lru_hit_zero |= lru.cell_count(1) == 0;
            }
            assert!(part.cell_count(0) <= 2 && part.cell_count(1) <= 2);
        }
        assert!(lru_hit_zero);
    }

    #[test]
    fn margin_loss_hand_values() {
        let p = [0.2f64, 0.5, 0.3];
        let want = -((0.2f64).ln() - (0.5f64).ln() - 0.5);
        assert!((margin_loss(&p, 0, 0.5) - want).abs() < 1e-15);
        assert_eq!(margin_loss(&[1.0f64], 0, 0.5), 0.0);
        assert!(margin_loss(&[0.0f64, 1.0], 0, 0.5).is_finite());
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [WritePolicy::LabelPartitioned, WritePolicy::WriteAlwaysGlobalLru] {
            assert_eq!(WritePolicy::parse(p.name()).unwrap(), p);
        }
        assert!(WritePolicy::parse("fifo").is_err());
    }
}
