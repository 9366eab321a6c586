//! Log-perplexity (nats), mean reciprocal rank and accuracy, plus the
//! mode × policy ablation table.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::data::EpisodeDataset;
use crate::error::{invalid, Result};
use crate::memory::WritePolicy;
use crate::online::{run_stream, Combiners, Mode, RunOptions, StepRecord};
use crate::pcn::PcnModel;
use crate::Scalar;

/// Sums over the counted steps of one episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EpisodeMetrics {
    pub counted: usize,
    pub nll_sum: f64,
    pub rr_sum: f64,
    pub correct: usize,
}

impl EpisodeMetrics {
    pub fn log_perplexity(&self) -> Option<f64> {
        (self.counted > 0).then(|| self.nll_sum / self.counted as f64)
    }

    pub fn mrr(&self) -> Option<f64> {
        (self.counted > 0).then(|| self.rr_sum / self.counted as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.counted > 0).then(|| self.correct as f64 / self.counted as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    /// Mean `−log P(y_t)` over counted steps, nats.
    pub log_perplexity: f64,
    pub mrr: f64,
    pub accuracy: f64,
    /// `None` when no counted step has a seen (resp. unseen) label.
    pub accuracy_seen: Option<f64>,
    pub accuracy_unseen: Option<f64>,
    pub seen_steps: usize,
    pub unseen_steps: usize,
    /// Steps that entered the aggregates.
    pub steps: usize,
    /// Steps in the traces, counted or not.
    pub total_steps: usize,
    pub second_occurrence_only: bool,
    pub per_episode: Vec<EpisodeMetrics>,
}

impl MetricReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        let _ = writeln!(s, "log_perplexity_nats: {:.6}", self.log_perplexity);
        let _ = writeln!(s, "mrr: {:.6}", self.mrr);
        let _ = writeln!(s, "accuracy: {:.6}", self.accuracy);
        let _ = writeln!(s, "accuracy_seen: {}", opt(self.accuracy_seen));
        let _ = writeln!(s, "accuracy_unseen: {}", opt(self.accuracy_unseen));
        let _ = writeln!(s, "seen_steps: {}", self.seen_steps);
        let _ = writeln!(s, "unseen_steps: {}", self.unseen_steps);
        let _ = writeln!(s, "counted_steps: {}", self.steps);
        let _ = writeln!(s, "total_steps: {}", self.total_steps);
        let _ = writeln!(s, "second_occurrence_only: {}", self.second_occurrence_only);
        let _ = writeln!(s, "episodes: {}", self.per_episode.len());
        s
    }
}

/// Folds per-episode traces into a report. With `second_occurrence_only`,
/// a step counts only if it is the second time its label appears in that
/// episode. `seen[y]` splits accuracy by label status.
pub fn compute_metrics(
    traces: &[Vec<StepRecord>],
    second_occurrence_only: bool,
    seen: Option<&[bool]>,
) -> Result<MetricReport> {
    let total_steps: usize = traces.iter().map(Vec::len).sum();
    if total_steps == 0 {
        return Err(invalid("empty trace"));
    }
    let mut per_episode = Vec::with_capacity(traces.len());
    let (mut seen_n, mut seen_ok, mut unseen_n, mut unseen_ok) = (0usize, 0usize, 0usize, 0usize);
    for trace in traces {
        let mut occurrences: HashMap<usize, usize> = HashMap::new();
        let mut m = EpisodeMetrics::default();
        for r in trace {
            let n = occurrences.entry(r.y_true).or_insert(0);
            *n += 1;
            if second_occurrence_only && *n != 2 {
                continue;
            }
            m.counted += 1;
            m.nll_sum += r.nll;
            m.rr_sum += 1.0 / r.rank as f64;
            let ok = r.y_pred == r.y_true;
            m.correct += ok as usize;
            if let Some(seen) = seen {
                if seen.get(r.y_true).copied().unwrap_or(false) {
                    seen_n += 1;
                    seen_ok += ok as usize;
                } else {
                    unseen_n += 1;
                    unseen_ok += ok as usize;
                }
            }
        }
        per_episode.push(m);
    }
    let counted: usize = per_episode.iter().map(|m| m.counted).sum();
    if counted == 0 {
        return Err(invalid("no step satisfies the counting rule"));
    }
    let sum = |f: fn(&EpisodeMetrics) -> f64| per_episode.iter().map(f).sum::<f64>();
    let frac = |ok: usize, n: usize| (n > 0).then(|| ok as f64 / n as f64);
    Ok(MetricReport {
        log_perplexity: sum(|m| m.nll_sum) / counted as f64,
        mrr: sum(|m| m.rr_sum) / counted as f64,
        accuracy: per_episode.iter().map(|m| m.correct).sum::<usize>() as f64 / counted as f64,
        accuracy_seen: frac(seen_ok, seen_n),
        accuracy_unseen: frac(unseen_ok, unseen_n),
        seen_steps: seen_n,
        unseen_steps: unseen_n,
        steps: counted,
        total_steps,
        second_occurrence_only,
        per_episode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub mode: Mode,
    pub policy: WritePolicy,
    pub report: MetricReport,
    /// `logppl − logppl(pcn_only)`, when a `pcn_only` cell exists.
    pub delta_log_perplexity: Option<f64>,
    /// `mrr − mrr(pcn_only)`.
    pub delta_mrr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut s = String::from("mode,policy,logppl,mrr,acc,acc_seen,acc_unseen\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.mode.name(),
                c.policy.name(),
                c.report.log_perplexity,
                c.report.mrr,
                c.report.accuracy,
                opt(c.report.accuracy_seen),
                opt(c.report.accuracy_unseen)
            );
        }
        s
    }

    /// Aligned text table with deltas against `pcn_only`.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:+.4}"));
        let mut s = format!(
            "{:<12} {:<24} {:>9} {:>8} {:>8} {:>9} {:>8}\n",
            "mode", "policy", "logppl", "mrr", "acc", "d_logppl", "d_mrr"
        );
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<12} {:<24} {:>9.4} {:>8.4} {:>8.4} {:>9} {:>8}",
                c.mode.name(),
                c.policy.name(),
                c.report.log_perplexity,
                c.report.mrr,
                c.report.accuracy,
                opt(c.delta_log_perplexity),
                opt(c.delta_mrr)
            );
        }
        s
    }
}

/// Runs every (mode, policy) cell with the same options and seed.
pub fn ablate<T: Scalar>(
    pcn: &PcnModel<T>,
    combiners: &Combiners<'_, T>,
    ds: &EpisodeDataset,
    modes: &[Mode],
    policies: &[WritePolicy],
    opts: &RunOptions,
) -> Result<AblationTable> {
    if modes.is_empty() || policies.is_empty() {
        return Err(invalid("ablation needs at least one mode and one policy"));
    }
    let mut cells = Vec::new();
    for &mode in modes {
        for &policy in policies {
            let run = RunOptions {
                policy,
                ..opts.clone()
            };
            let report = run_stream(pcn, combiners, ds, mode, &run)?.report;
            cells.push(AblationCell {
                mode,
                policy,
                report,
                delta_log_perplexity: None,
                delta_mrr: None,
            });
        }
    }
    let base = cells
        .iter()
        .find(|c| c.mode == Mode::PcnOnly)
        .map(|c| (c.report.log_perplexity, c.report.mrr));
    if let Some((lp, mrr)) = base {
        for c in &mut cells {
            c.delta_log_perplexity = Some(c.report.log_perplexity - lp);
            c.delta_mrr = Some(c.report.mrr - mrr);
        }
    }
    Ok(AblationTable { cells })
}
