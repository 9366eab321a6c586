use crate::data::{Episode, EpisodeDataset, StepInput};
use crate::error::{invalid, Result};
use crate::numcore::{adam_step, AdamConfig, Objective, ParamStore, Prng};
use crate::pcn::{PcnMode, PcnModel};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcnTrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Examples per update in stateless mode; stateful mode updates once per
    /// episode.
    pub batch_size: usize,
}

impl Default for PcnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            adam: AdamConfig::default(),
            seed: 0,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcnTrainReport {
    /// Mean training cross-entropy before the first update.
    pub initial_loss: f64,
    /// Mean cross-entropy over the updates of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Cross-entropy of `target` under a softmax restricted to `mask` (all
/// classes when `None`), and its gradient w.r.t. the logits.
fn masked_ce<T: Scalar>(logits: &[T], target: usize, mask: Option<&[bool]>) -> (T, Vec<T>) {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), T::max);
    let mut probs = vec![T::zero(); logits.len()];
    let mut sum = T::zero();
    for (i, &l) in logits.iter().enumerate() {
        if allowed(i) {
            probs[i] = (l - max).exp();
            sum += probs[i];
        }
    }
    let loss = -(logits[target] - max - sum.ln());
    for p in probs.iter_mut() {
        *p /= sum;
    }
    probs[target] -= T::one();
    (loss, probs)
}

/// Summed loss and step count of one token episode; accumulates gradients
/// scaled by `scale` when `scale` is `Some`.
fn sequence_pass<T: Scalar>(
    model: &mut PcnModel<T>,
    tokens: &[usize],
    mask: Option<&[bool]>,
    scale: Option<T>,
) -> Result<(T, usize)> {
    let record = scale.is_some();
    let mut state = model.initial_state();
    let mut total = T::zero();
    let mut count = 0;
    let mut tapes = Vec::new();
    for w in tokens.windows(2) {
        let (h, tape) = model.embed(&state, StepInput::Token(w[0]), record)?;
        let (loss, dlogits) = masked_ce(&model.logits(&h), w[1], mask);
        total += loss;
        count += 1;
        if record {
            tapes.push((tape.expect("tape requested"), h.clone(), dlogits));
        }
        state.hidden = h;
    }
    if let Some(scale) = scale {
        let beta = model.beta_id();
        let mut dh_next = vec![T::zero(); model.hidden_dim()];
        for (tape, h, mut dlogits) in tapes.into_iter().rev() {
            dlogits.iter_mut().for_each(|g| *g *= scale);
            model.params.grad_mut(beta).add_outer(&dlogits, &h);
            let mut dh = model.beta().matvec_t(&dlogits);
            for (a, b) in dh.iter_mut().zip(&dh_next) {
                *a += *b;
            }
            dh_next = model.backward_embed(&tape, &dh);
        }
    }
    Ok((total, count))
}

/// Summed loss over labeled vectors; skips pairs whose label is masked out.
fn classifier_pass<T: Scalar>(
    model: &mut PcnModel<T>,
    batch: &[(&[f64], usize)],
    mask: Option<&[bool]>,
    scale: Option<T>,
) -> Result<(T, usize)> {
    let state = model.initial_state();
    let beta = model.beta_id();
    let mut total = T::zero();
    let mut count = 0;
    for &(x, y) in batch {
        if mask.is_some_and(|m| !m[y]) {
            continue;
        }
        let (h, tape) = model.embed(&state, StepInput::Features(x), scale.is_some())?;
        let (loss, mut dlogits) = masked_ce(&model.logits(&h), y, mask);
        total += loss;
        count += 1;
        if let (Some(scale), Some(tape)) = (scale, tape) {
            dlogits.iter_mut().for_each(|g| *g *= scale);
            model.params.grad_mut(beta).add_outer(&dlogits, &h);
            let dh = model.beta().matvec_t(&dlogits);
            model.backward_embed(&tape, &dh);
        }
    }
    Ok((total, count))
}

fn mask_for(ds: &EpisodeDataset) -> Option<Vec<bool>> {
    let mask = ds.seen_mask();
    mask.iter().any(|s| !s).then_some(mask)
}

/// Teacher-forced mean cross-entropy (nats) of a frozen model over every
/// step of `ds`, using the full softmax over all classes.
pub fn mean_cross_entropy<T: Scalar>(model: &PcnModel<T>, ds: &EpisodeDataset) -> Result<f64> {
    let mut scratch = model.clone();
    let (mut total, mut count) = (0.0, 0usize);
    for ep in ds.episodes() {
        let (l, c) = match ep {
            Episode::Tokens(ts) => sequence_pass(&mut scratch, ts, None, None)?,
            Episode::Vectors(vs) => {
                let batch: Vec<(&[f64], usize)> = vs.iter().map(|lv| (&lv.x[..], lv.y)).collect();
                classifier_pass(&mut scratch, &batch, None, None)?
            }
        };
        total += l.as_f64();
        count += c;
    }
    if count == 0 {
        return Err(invalid("dataset has no prediction steps"));
    }
    Ok(total / count as f64)
}

fn training_loss<T: Scalar>(
    model: &mut PcnModel<T>,
    ds: &EpisodeDataset,
    mask: Option<&[bool]>,
) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for ep in ds.episodes() {
        let (l, c) = match ep {
            Episode::Tokens(ts) => sequence_pass(model, ts, mask, None)?,
            Episode::Vectors(vs) => {
                let batch: Vec<(&[f64], usize)> = vs.iter().map(|lv| (&lv.x[..], lv.y)).collect();
                classifier_pass(model, &batch, mask, None)?
            }
        };
        total += l.as_f64();
        count += c;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Batch training with Adam.
///
/// Token datasets train next-token prediction with teacher forcing, one
/// update per episode. Labeled-vector datasets train classification on
/// minibatches, restricted to labels annotated seen: the softmax runs over
/// seen classes only, so unseen rows of `β` receive no gradient.
pub fn pcn_train<T: Scalar>(
    model: &mut PcnModel<T>,
    corpus: &EpisodeDataset,
    cfg: &PcnTrainConfig,
) -> Result<PcnTrainReport> {
    if corpus.episodes().is_empty() || corpus.total_steps() == 0 {
        return Err(invalid("empty training corpus"));
    }
    if corpus.num_labels() != model.num_classes() {
        return Err(invalid(format!(
            "corpus has {} labels, model has {}",
            corpus.num_labels(),
            model.num_classes()
        )));
    }
    let mask = mask_for(corpus);
    let mask = mask.as_deref();
    let initial_loss = training_loss(model, corpus, mask)?;
    let mut rng = Prng::new(cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    model.params.zero_grads();
    match model.mode() {
        PcnMode::Stateful => {
            let seqs: Vec<&[usize]> = corpus
                .episodes()
                .iter()
                .filter_map(|e| match e {
                    Episode::Tokens(ts) if ts.len() >= 2 => Some(&ts[..]),
                    _ => None,
                })
                .collect();
            if seqs.is_empty() {
                return Err(invalid("stateful training needs token episodes of length >= 2"));
            }
            let mut order: Vec<usize> = (0..seqs.len()).collect();
            for _ in 0..cfg.epochs {
                rng.shuffle(&mut order);
                let (mut total, mut count) = (0.0, 0usize);
                for &i in &order {
                    let scale = T::one() / T::lit((seqs[i].len() - 1) as f64);
                    let (l, c) = sequence_pass(model, seqs[i], mask, Some(scale))?;
                    adam_step(&mut model.params, cfg.adam)?;
                    total += l.as_f64();
                    count += c;
                }
                epoch_losses.push(total / count.max(1) as f64);
            }
        }
        PcnMode::Stateless => {
            let pairs: Vec<(&[f64], usize)> = corpus
                .episodes()
                .iter()
                .flat_map(|e| match e {
                    Episode::Vectors(vs) => vs
                        .iter()
                        .filter(|lv| mask.is_none_or(|m| m[lv.y]))
                        .map(|lv| (&lv.x[..], lv.y))
                        .collect::<Vec<_>>(),
                    Episode::Tokens(_) => Vec::new(),
                })
                .collect();
            if pairs.is_empty() {
                return Err(invalid("stateless training needs seen-label vectors"));
            }
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            let bs = cfg.batch_size.max(1);
            for _ in 0..cfg.epochs {
                rng.shuffle(&mut order);
                let (mut total, mut count) = (0.0, 0usize);
                for chunk in order.chunks(bs) {
                    let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| pairs[i]).collect();
                    let scale = T::one() / T::lit(batch.len() as f64);
                    let (l, c) = classifier_pass(model, &batch, mask, Some(scale))?;
                    adam_step(&mut model.params, cfg.adam)?;
                    total += l.as_f64();
                    count += c;
                }
                epoch_losses.push(total / count.max(1) as f64);
            }
        }
    }
    Ok(PcnTrainReport {
        initial_loss,
        epoch_losses,
    })
}

impl<T: Scalar> PcnModel<T> {
    /// Mean training loss under the seen-label restriction used by
    /// [`pcn_train`].
    pub fn training_loss(&self, ds: &EpisodeDataset) -> Result<f64> {
        let mask = mask_for(ds);
        training_loss(&mut self.clone(), ds, mask.as_deref())
    }
}

/// Mean next-token cross-entropy of a stateful PCN on one token sequence.
pub struct SequenceObjective<T> {
    pub model: PcnModel<T>,
    pub tokens: Vec<usize>,
}

impl<T: Scalar> Objective<T> for SequenceObjective<T> {
    fn params(&self) -> &ParamStore<T> {
        self.model.params()
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        self.model.params_mut()
    }
    fn loss(&self) -> Result<T> {
        let (l, c) = sequence_pass(&mut self.model.clone(), &self.tokens, None, None)?;
        Ok(l / T::lit(c as f64))
    }
    fn compute_gradients(&mut self) -> Result<T> {
        self.model.params.zero_grads();
        let scale = T::one() / T::lit((self.tokens.len() - 1) as f64);
        let (l, c) = sequence_pass(&mut self.model, &self.tokens, None, Some(scale))?;
        Ok(l / T::lit(c as f64))
    }
}

/// Mean cross-entropy of a stateless PCN on a batch of labeled vectors,
/// optionally restricted to a label mask.
pub struct ClassifierObjective<T> {
    pub model: PcnModel<T>,
    pub batch: Vec<(Vec<f64>, usize)>,
    pub mask: Option<Vec<bool>>,
}

impl<T: Scalar> ClassifierObjective<T> {
    fn refs(&self) -> Vec<(&[f64], usize)> {
        self.batch.iter().map(|(x, y)| (&x[..], *y)).collect()
    }
}

impl<T: Scalar> Objective<T> for ClassifierObjective<T> {
    fn params(&self) -> &ParamStore<T> {
        self.model.params()
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        self.model.params_mut()
    }
    fn loss(&self) -> Result<T> {
        let (l, c) = classifier_pass(
            &mut self.model.clone(),
            &self.refs(),
            self.mask.as_deref(),
            None,
        )?;
        Ok(l / T::lit(c.max(1) as f64))
    }
    fn compute_gradients(&mut self) -> Result<T> {
        let mut model = self.model.clone();
        model.params.zero_grads();
        let n = self
            .batch
            .iter()
            .filter(|(_, y)| self.mask.as_ref().is_none_or(|m| m[*y]))
            .count()
            .max(1);
        let scale = T::one() / T::lit(n as f64);
        let (l, c) = classifier_pass(&mut model, &self.refs(), self.mask.as_deref(), Some(scale))?;
        self.model = model;
        Ok(l / T::lit(c.max(1) as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetKind, LabeledVector, Vocab};
    use crate::numcore::backprop_check;
    use crate::pcn::PcnShape;

    fn seq_model(v: usize, seed: u64) -> PcnModel<f64> {
        PcnModel::new(
            PcnShape {
                mode: PcnMode::Stateful,
                num_classes: v,
                input_dim: 4,
                hidden_dim: 5,
            },
            seed,
            &[],
        )
        .unwrap()
    }

    #[test]
    fn masked_ce_matches_full_when_unmasked() {
        let logits = [0.3f64, -1.0, 2.0];
        let (l, g) = masked_ce(&logits, 2, None);
        let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((l - (lse - 2.0)).abs() < 1e-14);
        assert!(g.iter().sum::<f64>().abs() < 1e-14);
        let (_, g) = masked_ce(&logits, 0, Some(&[true, false, true]));
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn sequence_gradient_passes_check() {
        for seed in 0..3 {
            let mut obj = SequenceObjective {
                model: seq_model(5, seed),
                tokens: vec![1, 3, 0, 2],
            };
            let rep = backprop_check(&mut obj, 1e-5, 1e-4).unwrap();
            assert!(rep.passed(), "{rep:?}");
        }
    }

    #[test]
    fn classifier_gradient_passes_check_with_mask() {
        let model = PcnModel::<f64>::new(
            PcnShape {
                mode: PcnMode::Stateless,
                num_classes: 4,
                input_dim: 3,
                hidden_dim: 5,
            },
            2,
            &[3],
        )
        .unwrap();
        let mut obj = ClassifierObjective {
            model,
            batch: vec![(vec![0.5, -0.2, 1.0], 0), (vec![-1.0, 0.3, 0.1], 2), (vec![0.0, 0.0, 2.0], 3)],
            mask: Some(vec![true, true, true, false]),
        };
        let rep = backprop_check(&mut obj, 1e-5, 1e-4).unwrap();
        assert!(rep.passed(), "{rep:?}");
        // The masked-out row has exactly zero gradient.
        let beta = obj.model.params().id("pcn.beta").unwrap();
        assert!(obj.model.params().grad(beta).row(3).iter().all(|&g| g == 0.0));
    }

    fn alternating() -> EpisodeDataset {
        let vocab = Vocab::from_names(["a", "b", "c"]).unwrap();
        let tokens: Vec<usize> = (0..40).map(|i| i % 2).collect();
        EpisodeDataset::new(DatasetKind::TokenSequences, vocab, vec![Episode::Tokens(tokens)]).unwrap()
    }

    #[test]
    fn memorizes_alternating_sequence() {
        let ds = alternating();
        let mut m = seq_model(3, 4);
        let cfg = PcnTrainConfig {
            epochs: 150,
            adam: AdamConfig {
                lr: 0.02,
                ..AdamConfig::default()
            },
            seed: 1,
            batch_size: 1,
        };
        let rep = pcn_train(&mut m, &ds, &cfg).unwrap();
        assert!(rep.epoch_losses.last().unwrap() < &rep.initial_loss);
        let Episode::Tokens(ts) = &ds.episodes()[0] else { unreachable!() };
        let mut state = m.initial_state();
        for w in ts.windows(2) {
            let out = m.step(&state, StepInput::Token(w[0])).unwrap();
            assert_eq!(crate::numcore::argmax(&out.r), w[1]);
            state = out.state;
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = alternating();
        let mut m = seq_model(3, 4);
        let before = m.params().clone();
        let cfg = PcnTrainConfig {
            epochs: 2,
            adam: AdamConfig {
                lr: 0.0,
                ..AdamConfig::default()
            },
            ..PcnTrainConfig::default()
        };
        pcn_train(&mut m, &ds, &cfg).unwrap();
        assert!(m.params().values_bit_equal(&before));
    }

    #[test]
    fn first_epoch_reduces_loss() {
        let ds = crate::data::gen_repeat_markov(&crate::data::GeneratorSpec {
            seed: 3,
            num_labels: 30,
            episodes: 20,
            min_len: 20,
            max_len: 30,
            ..Default::default()
        })
        .unwrap();
        let mut m = seq_model(30, 0);
        let before = m.training_loss(&ds).unwrap();
        let cfg = PcnTrainConfig {
            epochs: 1,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..PcnTrainConfig::default()
        };
        pcn_train(&mut m, &ds, &cfg).unwrap();
        assert!(m.training_loss(&ds).unwrap() < before);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let vocab = Vocab::from_names(["a"]).unwrap();
        let ds = EpisodeDataset::new(
            DatasetKind::LabeledVectors,
            vocab,
            vec![Episode::Vectors(vec![LabeledVector { x: vec![1.0], y: 0 }])],
        )
        .unwrap()
        .with_unseen(&[0])
        .unwrap();
        let mut m = PcnModel::<f64>::new(
            PcnShape {
                mode: PcnMode::Stateless,
                num_classes: 1,
                input_dim: 1,
                hidden_dim: 2,
            },
            0,
            &[],
        )
        .unwrap();
        assert!(pcn_train(&mut m, &ds, &PcnTrainConfig::default()).is_err());
    }
}
