//! The deployment loop: predict from `x_t`, then observe `y_t` and adapt the
//! gate states and memory before the next input.

use std::fmt::Write as _;

use serde::Serialize;

use crate::combiner::{combine, combine_fixed, ErrorIndicators, GateStates, GateStep, RnnCombiner};
use crate::data::{Episode, EpisodeDataset, StepInput};
use crate::error::{contract, invalid, Result};
use crate::eval::{compute_metrics, MetricReport};
use crate::memory::{mem_write_ablation, LabeledMemory, MemoryConfig, WriteOutcome, WritePolicy};
use crate::numcore::argmax;
use crate::pcn::{PcnMode, PcnModel, PcnState};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// `θ ≡ 0`; memory is never written.
    PcnOnly,
    /// `θ ≡ 1`.
    MemoryOnly,
    /// One scalar `θ` for every label and step.
    LmnFixed,
    /// Per-label recurrent gate.
    Lmn,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::PcnOnly, Mode::MemoryOnly, Mode::LmnFixed, Mode::Lmn];

    pub fn name(self) -> &'static str {
        match self {
            Mode::PcnOnly => "pcn_only",
            Mode::MemoryOnly => "memory_only",
            Mode::LmnFixed => "lmn_fixed",
            Mode::Lmn => "lmn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown mode `{s}`")))
    }
}

/// The combiners available to a session.
#[derive(Debug, Clone, Copy)]
pub struct Combiners<'a, T> {
    /// `θ` used by [`Mode::LmnFixed`].
    pub fixed_theta: f64,
    /// Required by [`Mode::Lmn`].
    pub rnn: Option<&'a RnnCombiner<T>>,
}

impl<T> Default for Combiners<'_, T> {
    fn default() -> Self {
        Self {
            fixed_theta: 0.5,
            rnn: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub y_true: usize,
    pub y_pred: usize,
    /// `−log P_t(y_t)` in nats.
    pub nll: f64,
    /// 1-based rank of `y_t` under `P_t`; ties go to the lower label id.
    pub rank: usize,
    pub theta_mean: f64,
    /// `None` when the mode never writes.
    pub write: Option<WriteOutcome<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub p: Vec<T>,
    pub predicted: usize,
}

impl<T: Scalar> Prediction<T> {
    /// Labels ordered by decreasing probability, lower id first on ties.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.p.len()).collect();
        order.sort_by(|&a, &b| self.p[b].partial_cmp(&self.p[a]).unwrap().then(a.cmp(&b)));
        order
    }

    /// 1-based rank of `y`.
    pub fn rank_of(&self, y: usize) -> usize {
        let py = self.p[y];
        1 + self
            .p
            .iter()
            .enumerate()
            .filter(|&(j, &q)| q > py || (q == py && j < y))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOptions {
    pub memory: MemoryConfig,
    pub policy: WritePolicy,
    /// When set, `pcn_only` predictions take the argmax over these labels
    /// only (the rows the PCN was trained on).
    pub trained_rows: Option<Vec<bool>>,
    /// Keep `(h, r, s, y)` of every step for combiner training.
    pub record_gate_steps: bool,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            memory: MemoryConfig::default(),
            policy: WritePolicy::LabelPartitioned,
            trained_rows: None,
            record_gate_steps: false,
        }
    }
}

#[derive(Debug, Clone)]
struct Pending<T> {
    h: Vec<T>,
    r: Vec<T>,
    s: Vec<T>,
    prediction: Prediction<T>,
    theta_mean: f64,
    next_mu: Option<Vec<Vec<T>>>,
}

/// One episode of online deployment.
#[derive(Debug, Clone)]
pub struct Session<'a, T> {
    pcn: &'a PcnModel<T>,
    combiners: Combiners<'a, T>,
    mode: Mode,
    options: SessionOptions,
    state: PcnState<T>,
    memory: LabeledMemory<T>,
    gate_states: Option<GateStates<T>>,
    indicators: ErrorIndicators,
    r_prev: Vec<T>,
    s_prev: Vec<T>,
    last_label: Option<usize>,
    t: usize,
    pending: Option<Pending<T>>,
    trace: Vec<StepRecord>,
    gate_steps: Vec<GateStep<T>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(
        pcn: &'a PcnModel<T>,
        combiners: Combiners<'a, T>,
        mode: Mode,
        options: SessionOptions,
    ) -> Result<Self> {
        let memory = LabeledMemory::new(pcn.num_classes(), pcn.hidden_dim(), options.memory)?;
        Self::with_memory(pcn, combiners, mode, options, memory)
    }

    /// Starts from an existing memory (cross-episode persistence).
    pub fn with_memory(
        pcn: &'a PcnModel<T>,
        combiners: Combiners<'a, T>,
        mode: Mode,
        options: SessionOptions,
        memory: LabeledMemory<T>,
    ) -> Result<Self> {
        let v = pcn.num_classes();
        if memory.num_labels() != v || memory.dim() != pcn.hidden_dim() {
            return Err(invalid("memory shape does not match the PCN"));
        }
        if !(0.0..=1.0).contains(&combiners.fixed_theta) {
            return Err(invalid("theta: must lie in [0, 1]"));
        }
        if let Some(rows) = &options.trained_rows {
            if rows.len() != v || !rows.iter().any(|&b| b) {
                return Err(invalid("trained_rows must have one flag per label and at least one set"));
            }
        }
        let gate_states = match mode {
            Mode::Lmn => {
                let rnn = combiners
                    .rnn
                    .ok_or_else(|| invalid("mode lmn needs a trained recurrent combiner"))?;
                if rnn.embed_dim() != pcn.hidden_dim() {
                    return Err(invalid("combiner input size does not match the PCN"));
                }
                Some(rnn.new_states(v))
            }
            _ => None,
        };
        let uniform = vec![T::one() / T::lit(v as f64); v];
        Ok(Self {
            pcn,
            combiners,
            mode,
            options,
            state: pcn.initial_state(),
            memory,
            gate_states,
            indicators: ErrorIndicators::default(),
            r_prev: uniform.clone(),
            s_prev: uniform,
            last_label: None,
            t: 0,
            pending: None,
            trace: Vec::new(),
            gate_steps: Vec::new(),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn memory(&self) -> &LabeledMemory<T> {
        &self.memory
    }

    pub fn into_memory(self) -> LabeledMemory<T> {
        self.memory
    }

    pub fn trace(&self) -> &[StepRecord] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<StepRecord> {
        self.trace
    }

    pub fn gate_states(&self) -> Option<&GateStates<T>> {
        self.gate_states.as_ref()
    }

    pub fn take_gate_steps(&mut self) -> Vec<GateStep<T>> {
        std::mem::take(&mut self.gate_steps)
    }

    /// Computes `P_t` for `input`. Memory and gate states are left untouched
    /// until [`Session::observe`].
    pub fn predict(&mut self, input: StepInput<'_>) -> Result<&Prediction<T>> {
        if self.pending.is_some() {
            return Err(contract("predict called twice without observe"));
        }
        if let (PcnMode::Stateful, Some(prev), StepInput::Token(tok)) =
            (self.pcn.mode(), self.last_label, input)
        {
            if tok != prev {
                return Err(contract(format!(
                    "teacher forcing: input token {tok} differs from the revealed label {prev}"
                )));
            }
        }
        let out = self.pcn.step(&self.state, input)?;
        let (h, r) = (out.h, out.r);
        let s = match self.mode {
            Mode::PcnOnly => vec![T::zero(); r.len()],
            _ => self.memory.scores(&h)?,
        };
        let (p, theta_mean, next_mu) = match self.mode {
            Mode::PcnOnly => (r.clone(), 0.0, None),
            Mode::MemoryOnly => (combine_fixed(&r, &s, T::one())?, 1.0, None),
            Mode::LmnFixed => {
                let th = self.combiners.fixed_theta;
                (combine_fixed(&r, &s, T::lit(th))?, th, None)
            }
            Mode::Lmn => {
                let rnn = self.combiners.rnn.expect("checked at construction");
                let states = self.gate_states.as_ref().expect("lmn has gate states");
                let (theta, mu) = rnn.gates(&h, self.indicators, &self.r_prev, &self.s_prev, states)?;
                let mean = theta.iter().map(|t| t.as_f64()).sum::<f64>() / theta.len() as f64;
                (combine(&r, &s, &theta)?, mean, Some(mu))
            }
        };
        let predicted = match (&self.options.trained_rows, self.mode) {
            (Some(rows), Mode::PcnOnly) => (0..p.len())
                .filter(|&y| rows[y])
                .fold(None, |best: Option<usize>, y| match best {
                    Some(b) if p[b] >= p[y] => Some(b),
                    _ => Some(y),
                })
                .expect("at least one trained row"),
            _ => argmax(&p),
        };
        let pending = self.pending.insert(Pending {
            h,
            r,
            s,
            prediction: Prediction { p, predicted },
            theta_mean,
            next_mu,
        });
        Ok(&pending.prediction)
    }

    /// Reveals `y_t`: scores the pending prediction, advances gate states,
    /// writes memory if needed and moves the PCN state forward.
    pub fn observe(&mut self, y: usize) -> Result<StepRecord> {
        if y >= self.pcn.num_classes() {
            return Err(invalid(format!("label {y} out of range for V={}", self.pcn.num_classes())));
        }
        let pending = self
            .pending
            .take()
            .ok_or_else(|| contract("observe called without a pending prediction"))?;
        let Pending {
            h,
            r,
            s,
            prediction,
            theta_mean,
            next_mu,
        } = pending;
        let py = prediction.p[y];
        let nll = -py.max(T::min_positive_value()).ln();
        let rank = prediction.rank_of(y);
        if let (Some(states), Some(mu)) = (self.gate_states.as_mut(), next_mu) {
            for (label, m) in mu.into_iter().enumerate() {
                states.set(label, m);
            }
        }
        let write = match self.mode {
            Mode::PcnOnly => None,
            _ => {
                let out = mem_write_ablation(&mut self.memory, &h, y, &prediction.p, self.options.policy)?;
                Some(WriteOutcome {
                    loss: out.loss.as_f64(),
                    gated: out.gated,
                    merged: out.merged,
                    replaced_cell_index: out.replaced_cell_index,
                    installed_cell_index: out.installed_cell_index,
                    evicted_label: out.evicted_label,
                })
            }
        };
        self.indicators = ErrorIndicators::from_previous(&r, &s, y);
        if self.pcn.mode() == PcnMode::Stateful {
            self.state = PcnState { hidden: h.clone() };
        }
        if self.options.record_gate_steps {
            self.gate_steps.push(GateStep {
                h,
                r: r.clone(),
                s: s.clone(),
                y,
            });
        }
        self.r_prev = r;
        self.s_prev = s;
        self.last_label = Some(y);
        let record = StepRecord {
            t: self.t,
            y_true: y,
            y_pred: prediction.predicted,
            nll: nll.as_f64(),
            rank,
            theta_mean,
            write,
        };
        self.t += 1;
        self.trace.push(record.clone());
        Ok(record)
    }
}

pub fn session_predict<'s, T: Scalar>(
    sess: &'s mut Session<'_, T>,
    input: StepInput<'_>,
) -> Result<&'s Prediction<T>> {
    sess.predict(input)
}

pub fn session_observe<T: Scalar>(sess: &mut Session<'_, T>, y: usize) -> Result<StepRecord> {
    sess.observe(y)
}

/// Runs one episode to completion in a session.
pub fn drive<T: Scalar>(sess: &mut Session<'_, T>, episode: &Episode) -> Result<()> {
    for step in episode.steps() {
        sess.predict(step.input)?;
        sess.observe(step.label)?;
    }
    Ok(())
}

/// Replays `episode` in `lmn` mode (or `lmn_fixed` without a recurrent
/// combiner) and returns the per-step combiner inputs.
pub fn collect_gate_steps<T: Scalar>(
    pcn: &PcnModel<T>,
    combiners: &Combiners<'_, T>,
    memory: &MemoryConfig,
    policy: WritePolicy,
    episode: &Episode,
) -> Result<Vec<GateStep<T>>> {
    let mode = if combiners.rnn.is_some() { Mode::Lmn } else { Mode::LmnFixed };
    let opts = SessionOptions {
        memory: *memory,
        policy,
        trained_rows: None,
        record_gate_steps: true,
    };
    let mut sess = Session::new(pcn, *combiners, mode, opts)?;
    drive(&mut sess, episode)?;
    Ok(sess.take_gate_steps())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub memory: MemoryConfig,
    pub policy: WritePolicy,
    /// Carry memory across episodes instead of resetting it.
    pub persist_memory: bool,
    /// Worker threads over episodes; ignored when memory persists.
    pub threads: usize,
    pub seed: u64,
    pub trained_rows: Option<Vec<bool>>,
    /// Count only each label's second occurrence within an episode.
    pub second_occurrence_only: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            memory: MemoryConfig::default(),
            policy: WritePolicy::LabelPartitioned,
            persist_memory: false,
            threads: 1,
            seed: 0,
            trained_rows: None,
            second_occurrence_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamResult {
    pub traces: Vec<Vec<StepRecord>>,
    pub report: MetricReport,
}

/// Runs every episode of `ds` and aggregates metrics. Each episode gets a
/// fresh session (and fresh memory unless `persist_memory` is set). The
/// PCN checksum is compared before and after.
pub fn run_stream<T: Scalar>(
    pcn: &PcnModel<T>,
    combiners: &Combiners<'_, T>,
    ds: &EpisodeDataset,
    mode: Mode,
    opts: &RunOptions,
) -> Result<StreamResult> {
    if ds.episodes().is_empty() || ds.total_steps() == 0 {
        return Err(invalid("dataset has no prediction steps"));
    }
    if ds.num_labels() != pcn.num_classes() {
        return Err(invalid(format!(
            "dataset has {} labels, PCN has {}",
            ds.num_labels(),
            pcn.num_classes()
        )));
    }
    let checksum = pcn.checksum();
    let sess_opts = SessionOptions {
        memory: opts.memory,
        policy: opts.policy,
        trained_rows: opts.trained_rows.clone(),
        record_gate_steps: false,
    };
    let run_one = |ep: &Episode, memory: Option<LabeledMemory<T>>| -> Result<(Vec<StepRecord>, LabeledMemory<T>)> {
        let mut sess = match memory {
            Some(m) => Session::with_memory(pcn, *combiners, mode, sess_opts.clone(), m)?,
            None => Session::new(pcn, *combiners, mode, sess_opts.clone())?,
        };
        drive(&mut sess, ep)?;
        let trace = sess.trace.clone();
        Ok((trace, sess.into_memory()))
    };
    let episodes = ds.episodes();
    let traces: Vec<Vec<StepRecord>> = if opts.persist_memory {
        let mut memory = None;
        let mut out = Vec::with_capacity(episodes.len());
        for ep in episodes {
            let (trace, m) = run_one(ep, memory.take())?;
            memory = Some(m);
            out.push(trace);
        }
        out
    } else if opts.threads <= 1 {
        episodes
            .iter()
            .map(|ep| run_one(ep, None).map(|r| r.0))
            .collect::<Result<_>>()?
    } else {
        let chunk = episodes.len().div_ceil(opts.threads);
        let parts: Vec<Result<Vec<Vec<StepRecord>>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = episodes
                .chunks(chunk)
                .map(|eps| {
                    let run_one = &run_one;
                    scope.spawn(move || {
                        eps.iter()
                            .map(|ep| run_one(ep, None).map(|r| r.0))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(episodes.len());
        for p in parts {
            out.extend(p?);
        }
        out
    };
    if pcn.checksum() != checksum {
        return Err(contract("PCN parameters changed during an online run"));
    }
    let seen = ds.seen_mask();
    let report = compute_metrics(&traces, opts.second_occurrence_only, Some(&seen))?;
    Ok(StreamResult { traces, report })
}

/// Picks the fixed `θ` from `grid` with the lowest log-perplexity on `ds`
/// (lowest `θ` on ties). Returns the choice and every `(θ, logppl)` pair.
pub fn select_fixed_theta<T: Scalar>(
    pcn: &PcnModel<T>,
    ds: &EpisodeDataset,
    opts: &RunOptions,
    grid: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(invalid("theta grid is empty"));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &theta in grid {
        let comb = Combiners {
            fixed_theta: theta,
            rnn: None,
        };
        let res = run_stream(pcn, &comb, ds, Mode::LmnFixed, opts)?;
        scores.push((theta, res.report.log_perplexity));
    }
    let best = scores
        .iter()
        .fold(scores[0], |b, &c| if c.1 < b.1 { c } else { b });
    Ok((best.0, scores))
}

/// `0.1, 0.2, …, 0.9`.
pub fn default_theta_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Tab-separated trace with a header line, one row per step.
pub fn format_trace(traces: &[Vec<StepRecord>]) -> String {
    let mut out = String::from("episode\tt\ty_true\ty_pred\tnll\trank\ttheta_mean\tgated\treplaced\n");
    for (e, trace) in traces.iter().enumerate() {
        for r in trace {
            let (gated, replaced) = match &r.write {
                Some(w) => (
                    w.gated.to_string(),
                    w.replaced_cell_index.map_or("-".to_string(), |i| i.to_string()),
                ),
                None => ("-".to_string(), "-".to_string()),
            };
            let _ = writeln!(
                out,
                "{e}\t{}\t{}\t{}\t{}\t{}\t{}\t{gated}\t{replaced}",
                r.t, r.y_true, r.y_pred, r.nll, r.rank, r.theta_mean
            );
        }
    }
    out
}
