use crate::combiner::{ErrorIndicators, GateTape, RnnCombiner};
use crate::data::EpisodeDataset;
use crate::error::{contract, invalid, Result};
use crate::memory::{MemoryConfig, WritePolicy};
use crate::numcore::{adam_step, AdamConfig, GateInputs, Objective, ParamStore, Prng};
use crate::online::{collect_gate_steps, Combiners};
use crate::pcn::PcnModel;
use crate::Scalar;

/// Episodes up to this length are backpropagated in full.
const FULL_BPTT_MAX: usize = 256;
/// Truncation window for longer episodes.
const BPTT_WINDOW: usize = 64;

/// Inputs of one online step as seen by the combiner. Memory and PCN scores
/// are constants for training.
#[derive(Debug, Clone, PartialEq)]
pub struct GateStep<T> {
    pub h: Vec<T>,
    pub r: Vec<T>,
    pub s: Vec<T>,
    pub y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinerTrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Recurrent state size `k`.
    pub state_dim: usize,
    /// Initial read-out bias, so gates start at `σ(init_bias)`.
    pub init_bias: f64,
    pub policy: WritePolicy,
}

impl Default for CombinerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            seed: 0,
            state_dim: 8,
            init_bias: 0.0,
            policy: WritePolicy::LabelPartitioned,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinerTrainReport {
    /// Mean `−log P(y_t)` over each epoch's steps, measured during the
    /// forward passes of that epoch.
    pub epoch_losses: Vec<f64>,
}

fn nll<T: Scalar>(p: T) -> T {
    -p.max(T::min_positive_value()).ln()
}

/// Summed loss and step count over one recorded episode. With `scale`,
/// accumulates `scale ×` the gradient into the combiner's store.
pub(crate) fn episode_pass<T: Scalar>(
    c: &mut RnnCombiner<T>,
    steps: &[GateStep<T>],
    scale: Option<T>,
) -> Result<(T, usize)> {
    let Some(first) = steps.first() else {
        return Ok((T::zero(), 0));
    };
    let v = first.r.len();
    let k = c.state_dim();
    let uniform = vec![T::one() / T::lit(v as f64); v];
    let record = scale.is_some();
    let mut mu: Vec<Vec<T>> = vec![vec![T::zero(); k]; v];
    let mut tapes: Vec<GateTape<T>> = Vec::new();
    let mut total = T::zero();
    for (t, st) in steps.iter().enumerate() {
        if st.r.len() != v || st.s.len() != v || st.y >= v || st.h.len() != c.embed_dim() {
            return Err(invalid(format!("gate step {t} has inconsistent shapes")));
        }
        let (ind, r_prev, s_prev) = if t == 0 {
            (ErrorIndicators::default(), &uniform, &uniform)
        } else {
            let p = &steps[t - 1];
            (ErrorIndicators::from_previous(&p.r, &p.s, p.y), &p.r, &p.s)
        };
        let tape = c.forward_step(&st.h, ind, r_prev, s_prev, |y| mu[y].clone(), record);
        let p = super::combine(&st.r, &st.s, &tape.theta)?;
        total += nll(p[st.y]);
        mu.clone_from(&tape.mu);
        if record {
            tapes.push(tape);
        }
    }
    if let Some(scale) = scale {
        backward(c, steps, &tapes, scale);
    }
    Ok((total, steps.len()))
}

fn backward<T: Scalar>(c: &mut RnnCombiner<T>, steps: &[GateStep<T>], tapes: &[GateTape<T>], scale: T) {
    let v = steps[0].r.len();
    let k = c.state_dim();
    let d = c.embed_dim();
    let gru = c.gru().clone();
    let (w_id, b_id) = c.readout_ids();
    let w_theta: Vec<T> = c.params().value(w_id).as_slice().to_vec();
    let truncate = steps.len() > FULL_BPTT_MAX;
    let mut carry: Vec<Vec<T>> = vec![vec![T::zero(); k]; v];
    for t in (0..steps.len()).rev() {
        let (st, tape) = (&steps[t], &tapes[t]);
        let u: Vec<T> = (0..v)
            .map(|y| (T::one() - tape.theta[y]) * st.r[y] + tape.theta[y] * st.s[y])
            .collect();
        let z: T = u.iter().copied().sum();
        let mut shared: GateInputs<T> = std::array::from_fn(|_| vec![T::zero(); k]);
        let mut db = T::zero();
        for y in 0..v {
            let mut du = T::one() / z;
            if y == st.y {
                du -= T::one() / u[y];
            }
            let th = tape.theta[y];
            let da = scale * du * (st.s[y] - st.r[y]) * th * (T::one() - th);
            db += da;
            c.params_mut().grad_mut(w_id).add_outer(&[da], &tape.mu[y]);
            let dmu: Vec<T> = (0..k).map(|i| carry[y][i] + da * w_theta[i]).collect();
            let (dproj, dprev) = gru.backward_projected(c.params_mut(), &tape.gru[y], &dmu);
            gru.accumulate_input_grads(c.params_mut(), &dproj, d, &tape.extras[y], false);
            for g in 0..3 {
                shared[g].iter_mut().zip(&dproj[g]).for_each(|(a, &b)| *a += b);
            }
            carry[y] = dprev;
        }
        c.params_mut().grad_mut(b_id).as_mut_slice()[0] += db;
        gru.accumulate_input_grads(c.params_mut(), &shared, 0, &st.h, true);
        if truncate && t % BPTT_WINDOW == 0 {
            carry.iter_mut().for_each(|m| m.fill(T::zero()));
        }
    }
}

/// Mean `−log P(y_t)` of the recurrent combiner over a fixed recorded
/// episode.
pub struct CombinerObjective<T> {
    pub combiner: RnnCombiner<T>,
    pub steps: Vec<GateStep<T>>,
}

impl<T: Scalar> Objective<T> for CombinerObjective<T> {
    fn params(&self) -> &ParamStore<T> {
        self.combiner.params()
    }
    fn params_mut(&mut self) -> &mut ParamStore<T> {
        self.combiner.params_mut()
    }
    fn loss(&self) -> Result<T> {
        let (l, n) = episode_pass(&mut self.combiner.clone(), &self.steps, None)?;
        Ok(l / T::lit(n.max(1) as f64))
    }
    fn compute_gradients(&mut self) -> Result<T> {
        self.combiner.params_mut().zero_grads();
        let n = self.steps.len().max(1);
        let scale = T::one() / T::lit(n as f64);
        let (l, _) = episode_pass(&mut self.combiner, &self.steps, Some(scale))?;
        Ok(l / T::lit(n as f64))
    }
}

/// Trains the recurrent gate on top of a frozen PCN.
///
/// Each episode is first replayed online with the current combiner (fresh
/// memory, writes driven by the combined prediction), recording `h`, `r`,
/// `s` and `y` per step. The recorded scores are then held constant and the
/// mean `−log P` of the episode is backpropagated through the gate only,
/// followed by one Adam update.
pub fn combiner_train<T: Scalar>(
    pcn: &PcnModel<T>,
    mem_cfg: &MemoryConfig,
    episodes: &EpisodeDataset,
    cfg: &CombinerTrainConfig,
) -> Result<(RnnCombiner<T>, CombinerTrainReport)> {
    if episodes.episodes().is_empty() || episodes.total_steps() == 0 {
        return Err(invalid("combiner training needs at least one non-empty episode"));
    }
    mem_cfg.validate()?;
    let checksum = pcn.checksum();
    let mut combiner = RnnCombiner::new(pcn.hidden_dim(), cfg.state_dim, cfg.seed, cfg.init_bias)?;
    let mut rng = Prng::new(cfg.seed).fork(1);
    let mut order: Vec<usize> = (0..episodes.episodes().len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let (mut total, mut count) = (0.0, 0usize);
        for &i in &order {
            let steps = {
                let comb = Combiners {
                    fixed_theta: 0.0,
                    rnn: Some(&combiner),
                };
                collect_gate_steps(pcn, &comb, mem_cfg, cfg.policy, &episodes.episodes()[i])?
            };
            if steps.is_empty() {
                continue;
            }
            combiner.params_mut().zero_grads();
            let scale = T::one() / T::lit(steps.len() as f64);
            let (l, n) = episode_pass(&mut combiner, &steps, Some(scale))?;
            adam_step(combiner.params_mut(), cfg.adam)?;
            total += l.as_f64();
            count += n;
        }
        epoch_losses.push(total / count.max(1) as f64);
    }
    if pcn.checksum() != checksum {
        return Err(contract("PCN parameters changed during combiner training"));
    }
    Ok((combiner, CombinerTrainReport { epoch_losses }))
}
