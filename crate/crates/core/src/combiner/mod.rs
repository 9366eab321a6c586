//! Mixing of PCN scores `r` and memory scores `s`:
//! `P(y) ∝ (1 − θ_y) r_y + θ_y s_y`.
//!
//! `θ` is either one fixed scalar or produced per label by a shared GRU whose
//! input is `[h_t, e_pcn, e_mem, r_{t−1,y}, s_{t−1,y}]` and a sigmoid read-out.

mod train;

pub use train::{
    combiner_train, CombinerObjective, CombinerTrainConfig, CombinerTrainReport, GateStep,
};

use crate::error::{invalid, LmnError, Result};
use crate::pcn::{Checkpoint, PcnModel};
use crate::numcore::{argmax, sigmoid, DenseMatrix, GateInputs, Gru, GruTape, ParamId, ParamStore, Prng};
use crate::Scalar;

pub(crate) const GRU_PREFIX: &str = "combiner.gru";
pub(crate) const W_THETA: &str = "combiner.w_theta";
pub(crate) const B_THETA: &str = "combiner.b_theta";
/// Block holding the selected fixed `θ` in checkpoints.
pub const THETA_FIXED: &str = "combiner.theta_fixed";

/// Number of scalar per-label inputs appended to `h_t`.
const EXTRA_INPUTS: usize = 4;

/// A single scalar mixing weight shared by all labels and steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedCombiner {
    theta: f64,
}

impl FixedCombiner {
    pub fn new(theta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(invalid(format!("theta: {theta} is outside [0, 1]")));
        }
        Ok(Self { theta })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}

/// Misprediction flags of the previous step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ErrorIndicators {
    pub pcn: bool,
    pub memory: bool,
}

impl ErrorIndicators {
    pub fn from_previous<T: Scalar>(r_prev: &[T], s_prev: &[T], y_prev: usize) -> Self {
        Self {
            pcn: argmax(r_prev) != y_prev,
            memory: argmax(s_prev) != y_prev,
        }
    }

    fn as_inputs<T: Scalar>(self) -> [T; 2] {
        let f = |b: bool| if b { T::one() } else { T::zero() };
        [f(self.pcn), f(self.memory)]
    }
}

fn check_pair<T: Scalar>(r: &[T], s: &[T]) -> Result<()> {
    if r.len() != s.len() {
        return Err(invalid(format!("r has {} entries, s has {}", r.len(), s.len())));
    }
    Ok(())
}

/// Per-label mixture, renormalized. When every gate is equal the mixture is
/// already normalized and is returned without division, so `θ ≡ 0` gives
/// `r` and `θ ≡ 1` gives `s` exactly.
pub fn combine<T: Scalar>(r: &[T], s: &[T], theta: &[T]) -> Result<Vec<T>> {
    check_pair(r, s)?;
    if theta.len() != r.len() {
        return Err(invalid(format!("{} gates for {} labels", theta.len(), r.len())));
    }
    if theta.iter().any(|t| !(*t >= T::zero() && *t <= T::one())) {
        return Err(invalid("gates must lie in [0, 1]"));
    }
    let mut p: Vec<T> = (0..r.len())
        .map(|y| (T::one() - theta[y]) * r[y] + theta[y] * s[y])
        .collect();
    if theta.iter().any(|&t| t != theta[0]) {
        let z: T = p.iter().copied().sum();
        p.iter_mut().for_each(|v| *v /= z);
    }
    Ok(p)
}

/// `(1 − θ) r + θ s` for one scalar gate.
pub fn combine_fixed<T: Scalar>(r: &[T], s: &[T], theta: T) -> Result<Vec<T>> {
    check_pair(r, s)?;
    if !(theta >= T::zero() && theta <= T::one()) {
        return Err(invalid("theta must lie in [0, 1]"));
    }
    Ok(r.iter()
        .zip(s)
        .map(|(&a, &b)| (T::one() - theta) * a + theta * b)
        .collect())
}

/// Per-label recurrent states `μ_y`, materialized as zeros on first use.
#[derive(Debug, Clone, PartialEq)]
pub struct GateStates<T> {
    k: usize,
    mu: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GateStates<T> {
    pub fn new(num_labels: usize, k: usize) -> Self {
        Self {
            k,
            mu: vec![None; num_labels],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.mu.len()
    }

    /// State of `y`, zeros if never touched.
    pub fn get(&self, y: usize) -> Vec<T> {
        self.mu[y].clone().unwrap_or_else(|| vec![T::zero(); self.k])
    }

    pub fn is_materialized(&self, y: usize) -> bool {
        self.mu[y].is_some()
    }

    pub fn set(&mut self, y: usize, mu: Vec<T>) {
        debug_assert_eq!(mu.len(), self.k);
        self.mu[y] = Some(mu);
    }
}

/// Forward activations of one step across all labels.
#[derive(Debug, Clone)]
pub(crate) struct GateTape<T> {
    pub extras: Vec<[T; EXTRA_INPUTS]>,
    pub gru: Vec<GruTape<T>>,
    pub mu: Vec<Vec<T>>,
    pub theta: Vec<T>,
}

/// Shared weights of the recurrent gate.
#[derive(Debug, Clone)]
pub struct RnnCombiner<T> {
    params: ParamStore<T>,
    gru: Gru,
    w_theta: ParamId,
    b_theta: ParamId,
    embed_dim: usize,
}

impl<T: Scalar> RnnCombiner<T> {
    /// Random GRU weights, zero read-out weights and read-out bias `b_theta`
    /// (so every gate starts at `σ(b_theta)`).
    pub fn new(embed_dim: usize, k: usize, seed: u64, b_theta: f64) -> Result<Self> {
        if embed_dim == 0 || k == 0 {
            return Err(invalid("combiner dimensions must be positive"));
        }
        let mut params = ParamStore::new();
        let mut rng = Prng::new(seed);
        let gru = Gru::register(&mut params, GRU_PREFIX, embed_dim + EXTRA_INPUTS, k, &mut rng)?;
        let w_theta = params.insert(W_THETA, DenseMatrix::zeros(1, k))?;
        let b_theta = params.insert(B_THETA, DenseMatrix::from_vec(1, 1, vec![T::lit(b_theta)])?)?;
        Ok(Self {
            params,
            gru,
            w_theta,
            b_theta,
            embed_dim,
        })
    }

    /// Rebuilds from a store holding the `combiner.*` parameters.
    pub fn from_params(params: ParamStore<T>) -> Result<Self> {
        let gru = Gru::bind(&params, GRU_PREFIX)?;
        let find = |n: &str| params.id(n).ok_or_else(|| invalid(format!("missing parameter `{n}`")));
        let (w_theta, b_theta) = (find(W_THETA)?, find(B_THETA)?);
        let k = gru.hidden_size();
        if params.value(w_theta).shape() != (1, k) || params.value(b_theta).shape() != (1, 1) {
            return Err(invalid("combiner read-out has the wrong shape"));
        }
        if gru.input_size() <= EXTRA_INPUTS {
            return Err(invalid("combiner GRU input is too small"));
        }
        let embed_dim = gru.input_size() - EXTRA_INPUTS;
        Ok(Self {
            params,
            gru,
            w_theta,
            b_theta,
            embed_dim,
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn state_dim(&self) -> usize {
        self.gru.hidden_size()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn new_states(&self, num_labels: usize) -> GateStates<T> {
        GateStates::new(num_labels, self.state_dim())
    }

    fn theta_of(&self, mu: &[T]) -> T {
        let w = self.params.value(self.w_theta).as_slice();
        let a = crate::numcore::dot(w, mu) + self.params.value(self.b_theta).as_slice()[0];
        sigmoid(a)
    }

    /// `W_g[:, ..d] h + b_g`, shared by every label.
    fn shared_projection(&self, h: &[T]) -> GateInputs<T> {
        let k = self.state_dim();
        std::array::from_fn(|g| {
            let mut out = vec![T::zero(); k];
            self.params
                .value(self.gru.input_weight(g))
                .matvec_cols_into(0, h, &mut out);
            for (o, &b) in out.iter_mut().zip(self.params.value(self.gru.bias(g)).as_slice()) {
                *o += b;
            }
            out
        })
    }

    fn label_step(
        &self,
        shared: &GateInputs<T>,
        extras: &[T; EXTRA_INPUTS],
        mu_prev: &[T],
        record: bool,
    ) -> (Vec<T>, Option<GruTape<T>>) {
        let k = self.state_dim();
        let proj: GateInputs<T> = std::array::from_fn(|g| {
            let mut own = vec![T::zero(); k];
            self.params
                .value(self.gru.input_weight(g))
                .matvec_cols_into(self.embed_dim, extras, &mut own);
            own.iter_mut().zip(&shared[g]).for_each(|(o, &s)| *o += s);
            own
        });
        self.gru.step_projected(&self.params, &proj, mu_prev, record)
    }

    /// One gate update for label `y`: returns `(θ_y, μ_y')`.
    pub fn gate_step(
        &self,
        h: &[T],
        ind: ErrorIndicators,
        r_prev_y: T,
        s_prev_y: T,
        mu: &[T],
    ) -> Result<(T, Vec<T>)> {
        if h.len() != self.embed_dim || mu.len() != self.state_dim() {
            return Err(invalid(format!(
                "gate expects h of length {} and state of length {}",
                self.embed_dim,
                self.state_dim()
            )));
        }
        let [e_p, e_m] = ind.as_inputs::<T>();
        let shared = self.shared_projection(h);
        let (mu_new, _) = self.label_step(&shared, &[e_p, e_m, r_prev_y, s_prev_y], mu, false);
        Ok((self.theta_of(&mu_new), mu_new))
    }

    /// Gates of every label for one step, with the candidate next states.
    /// `states` is not modified.
    pub fn gates(
        &self,
        h: &[T],
        ind: ErrorIndicators,
        r_prev: &[T],
        s_prev: &[T],
        states: &GateStates<T>,
    ) -> Result<(Vec<T>, Vec<Vec<T>>)> {
        let v = states.num_labels();
        if h.len() != self.embed_dim || r_prev.len() != v || s_prev.len() != v {
            return Err(invalid("gate inputs have inconsistent lengths"));
        }
        let tape = self.forward_step(h, ind, r_prev, s_prev, |y| states.get(y), false);
        Ok((tape.theta, tape.mu))
    }

    pub(crate) fn forward_step(
        &self,
        h: &[T],
        ind: ErrorIndicators,
        r_prev: &[T],
        s_prev: &[T],
        mu_prev: impl Fn(usize) -> Vec<T>,
        record: bool,
    ) -> GateTape<T> {
        let [e_p, e_m] = ind.as_inputs::<T>();
        let shared = self.shared_projection(h);
        let v = r_prev.len();
        let mut tape = GateTape {
            extras: Vec::with_capacity(v),
            gru: Vec::with_capacity(if record { v } else { 0 }),
            mu: Vec::with_capacity(v),
            theta: Vec::with_capacity(v),
        };
        for y in 0..v {
            let extras = [e_p, e_m, r_prev[y], s_prev[y]];
            let (mu, gt) = self.label_step(&shared, &extras, &mu_prev(y), record);
            tape.theta.push(self.theta_of(&mu));
            tape.mu.push(mu);
            if let Some(gt) = gt {
                tape.gru.push(gt);
                tape.extras.push(extras);
            }
        }
        tape
    }

    pub(crate) fn gru(&self) -> &Gru {
        &self.gru
    }

    pub(crate) fn readout_ids(&self) -> (ParamId, ParamId) {
        (self.w_theta, self.b_theta)
    }
}

/// Free-function form of [`RnnCombiner::gate_step`].
pub fn gate_step<T: Scalar>(
    c: &RnnCombiner<T>,
    h: &[T],
    ind: ErrorIndicators,
    r_prev_y: T,
    s_prev_y: T,
    mu: &[T],
) -> Result<(T, Vec<T>)> {
    c.gate_step(h, ind, r_prev_y, s_prev_y, mu)
}

/// Checkpoint holding the PCN blocks, the combiner parameters (when
/// present) and the selected fixed `θ`.
pub fn combiner_checkpoint<T: Scalar>(
    pcn: &PcnModel<T>,
    rnn: Option<&RnnCombiner<T>>,
    theta_fixed: f64,
) -> Result<Checkpoint> {
    FixedCombiner::new(theta_fixed)?;
    let mut ck = Checkpoint::from_pcn(pcn);
    if let Some(c) = rnn {
        ck.push_params(c.params());
    }
    ck.blocks.push((THETA_FIXED.to_owned(), DenseMatrix::from_vec(1, 1, vec![theta_fixed])?));
    Ok(ck)
}

/// Fixed `θ` stored in `ck`, if any.
pub fn checkpoint_theta(ck: &Checkpoint) -> Result<Option<f64>> {
    match ck.block(THETA_FIXED) {
        None => Ok(None),
        Some(m) if m.shape() == (1, 1) => Ok(Some(FixedCombiner::new(m.as_slice()[0])?.theta())),
        Some(_) => Err(LmnError::Schema(format!("`{THETA_FIXED}` must be 1x1"))),
    }
}

/// Recurrent combiner stored in `ck`, if any.
pub fn checkpoint_combiner<T: Scalar>(ck: &Checkpoint) -> Result<Option<RnnCombiner<T>>> {
    let mut store = ParamStore::new();
    for (name, m) in ck.blocks.iter().filter(|(n, _)| n.starts_with("combiner.") && n != THETA_FIXED) {
        let vals = m.as_slice().iter().map(|&v| T::lit(v)).collect();
        store
            .insert(name.clone(), DenseMatrix::from_vec(m.rows(), m.cols(), vals)?)
            .map_err(|e| LmnError::Schema(e.to_string()))?;
    }
    if store.is_empty() {
        return Ok(None);
    }
    RnnCombiner::from_params(store)
        .map(Some)
        .map_err(|e| LmnError::Schema(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_limits_are_exact() {
        let r = [0.7, 0.2, 0.1];
        let s = [0.1, 0.3, 0.6];
        assert_eq!(combine(&r, &s, &[0.0; 3]).unwrap(), r);
        assert_eq!(combine(&r, &s, &[1.0; 3]).unwrap(), s);
        assert_eq!(combine_fixed(&r, &s, 0.0).unwrap(), r);
        assert_eq!(combine_fixed(&r, &s, 1.0).unwrap(), s);
    }

    #[test]
    fn half_gate_hand_values() {
        let p: Vec<f64> = combine(&[0.8, 0.2], &[0.1, 0.9], &[0.5, 0.5]).unwrap();
        assert!((p[0] - 0.45).abs() < 1e-15 && (p[1] - 0.55).abs() < 1e-15);
        let p: Vec<f64> = combine_fixed(&[0.8, 0.2], &[0.1, 0.9], 0.5).unwrap();
        assert!((p[0] - 0.45).abs() < 1e-15 && (p[1] - 0.55).abs() < 1e-15);
    }

    #[test]
    fn per_label_gates_renormalize() {
        let r = [0.8f64, 0.2];
        let s = [0.1, 0.9];
        let p = combine(&r, &s, &[0.0, 1.0]).unwrap();
        let z = 0.8f64 + 0.9;
        assert!((p[0] - 0.8 / z).abs() < 1e-15 && (p[1] - 0.9 / z).abs() < 1e-15);
    }

    #[test]
    fn combine_rejects_bad_shapes() {
        assert!(combine(&[0.5, 0.5], &[1.0], &[0.5, 0.5]).is_err());
        assert!(combine(&[0.5, 0.5], &[0.5, 0.5], &[0.5]).is_err());
        assert!(combine(&[0.5, 0.5], &[0.5, 0.5], &[1.5, 0.5]).is_err());
        assert!(FixedCombiner::new(1.1).is_err());
    }

    #[test]
    fn zero_readout_gives_half() {
        let c = RnnCombiner::<f64>::new(3, 4, 1, 0.0).unwrap();
        let states = c.new_states(5);
        let (theta, _) = c
            .gates(&[0.3, -1.0, 2.0], ErrorIndicators { pcn: true, memory: false }, &[0.2; 5], &[0.2; 5], &states)
            .unwrap();
        assert!(theta.iter().all(|&t| t == 0.5));
    }

    #[test]
    fn identical_label_inputs_identical_gates() {
        let mut c = RnnCombiner::<f64>::new(2, 3, 9, 0.3).unwrap();
        let (w, _) = c.readout_ids();
        c.params_mut().value_mut(w).as_mut_slice().copy_from_slice(&[0.5, -1.0, 2.0]);
        let states = c.new_states(3);
        let (theta, mu) = c
            .gates(&[1.0, 0.5], ErrorIndicators::default(), &[0.3, 0.3, 0.4], &[0.1, 0.1, 0.8], &states)
            .unwrap();
        assert_eq!(theta[0].to_bits(), theta[1].to_bits());
        assert_eq!(mu[0], mu[1]);
        assert_ne!(theta[0], theta[2]);
    }

    #[test]
    fn two_unit_gate_matches_hand_equations() {
        // d = 1, k = 2; every weight set by hand.
        let mut c = RnnCombiner::<f64>::new(1, 2, 0, 0.0).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let w_z = [0.1, -0.2, 0.3, 0.0, 0.5, 0.2, 0.1, -0.1, 0.4, 0.3];
        let w_r = [0.2, 0.1, -0.3, 0.2, 0.0, -0.1, 0.3, 0.2, 0.1, 0.0];
        let w_n = [-0.4, 0.2, 0.1, 0.3, -0.2, 0.5, 0.0, 0.1, 0.2, -0.3];
        let u = [0.3, -0.1, 0.2, 0.4];
        let set = |c: &mut RnnCombiner<f64>, name: &str, v: &[f64]| {
            let id = c.params().id(name).unwrap();
            c.params_mut().value_mut(id).as_mut_slice().copy_from_slice(v);
        };
        for (g, w) in [("z", &w_z), ("r", &w_r), ("n", &w_n)] {
            set(&mut c, &format!("combiner.gru.w_{g}"), w);
            set(&mut c, &format!("combiner.gru.u_{g}"), &u);
            set(&mut c, &format!("combiner.gru.b_{g}"), &[0.05, -0.05]);
        }
        set(&mut c, W_THETA, &[1.5, -0.7]);
        set(&mut c, B_THETA, &[0.2]);
        let h = [0.8];
        let x = [0.8, 1.0, 0.0, 0.25, 0.6];
        let mu = [0.1, -0.3];
        let ind = ErrorIndicators { pcn: true, memory: false };
        let (theta, mu_new) = c.gate_step(&h, ind, 0.25, 0.6, &mu).unwrap();

        let row = |w: &[f64], i: usize| (0..5).map(|j| w[i * 5 + j] * x[j]).sum::<f64>();
        let urow = |v: &[f64], i: usize| u[i * 2] * v[0] + u[i * 2 + 1] * v[1];
        let b = [0.05, -0.05];
        let z: Vec<f64> = (0..2).map(|i| sig(row(&w_z, i) + urow(&mu, i) + b[i])).collect();
        let r: Vec<f64> = (0..2).map(|i| sig(row(&w_r, i) + urow(&mu, i) + b[i])).collect();
        let rh = [r[0] * mu[0], r[1] * mu[1]];
        let n: Vec<f64> = (0..2).map(|i| (row(&w_n, i) + urow(&rh, i) + b[i]).tanh()).collect();
        let want: Vec<f64> = (0..2).map(|i| (1.0 - z[i]) * mu[i] + z[i] * n[i]).collect();
        let want_theta = sig(1.5 * want[0] - 0.7 * want[1] + 0.2);
        for i in 0..2 {
            assert!((mu_new[i] - want[i]).abs() < 1e-12);
        }
        assert!((theta - want_theta).abs() < 1e-12);
    }

    #[test]
    fn states_are_lazy_and_isolated() {
        let c = RnnCombiner::<f64>::new(2, 3, 4, 0.0).unwrap();
        let mut st = c.new_states(3);
        assert!(!st.is_materialized(1));
        assert_eq!(st.get(1), vec![0.0; 3]);
        st.set(1, vec![1.0, 2.0, 3.0]);
        assert!(!st.is_materialized(0) && !st.is_materialized(2));
        assert_eq!(st.get(0), vec![0.0; 3]);
    }

    #[test]
    fn indicators_follow_argmax() {
        let ind = ErrorIndicators::from_previous(&[0.1, 0.9], &[0.6, 0.4], 1);
        assert!(!ind.pcn && ind.memory);
    }

    proptest! {
        #[test]
        fn mixture_is_a_distribution(
            raw in proptest::collection::vec((0.001f64..1.0, 0.0f64..1.0, 0.0f64..=1.0), 1..8),
        ) {
            let rs: f64 = raw.iter().map(|t| t.0).sum();
            let ss: f64 = raw.iter().map(|t| t.1).sum::<f64>() + 1e-9;
            let r: Vec<f64> = raw.iter().map(|t| t.0 / rs).collect();
            let s: Vec<f64> = raw.iter().map(|t| (t.1 + 1e-9 / raw.len() as f64) / ss).collect();
            let th: Vec<f64> = raw.iter().map(|t| t.2).collect();
            let p = combine(&r, &s, &th).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn unnormalized_score_increases_with_gate_when_memory_leads(
            r in 0.0f64..1.0, s in 0.0f64..1.0, a in 0.0f64..1.0, b in 0.0f64..1.0,
        ) {
            prop_assume!(s > r && a < b);
            let u = |t: f64| (1.0 - t) * r + t * s;
            prop_assert!(u(a) < u(b));
        }
    }

    #[test]
    fn checkpoint_round_trips_combiner_and_theta() {
        use crate::pcn::{PcnMode, PcnShape};
        let pcn = PcnModel::<f64>::new(
            PcnShape { mode: PcnMode::Stateless, num_classes: 3, input_dim: 2, hidden_dim: 4 },
            1,
            &[],
        )
        .unwrap();
        let c = RnnCombiner::<f64>::new(4, 3, 2, 0.3).unwrap();
        let ck = Checkpoint::decode(&combiner_checkpoint(&pcn, Some(&c), 0.6).unwrap().encode()).unwrap();
        assert_eq!(checkpoint_theta(&ck).unwrap(), Some(0.6));
        let back: RnnCombiner<f64> = checkpoint_combiner(&ck).unwrap().unwrap();
        assert!(back.params().values_bit_equal(c.params()));
        assert_eq!(ck.to_pcn::<f64>().unwrap().checksum(), pcn.checksum());

        let bare = combiner_checkpoint(&pcn, None, 0.5).unwrap();
        assert!(checkpoint_combiner::<f64>(&bare).unwrap().is_none());
        assert!(combiner_checkpoint(&pcn, None, 1.5).is_err());
    }
}
