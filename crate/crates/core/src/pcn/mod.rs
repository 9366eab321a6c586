//! The primary classification network: maps each input to an embedding `h_t`
//! and class scores `r_t = softmax(β h_t)`.
//!
//! The stateful variant embeds a token and runs a GRU; the stateless variant
//! is a one-hidden-layer tanh perceptron over a feature vector. `β` has one
//! row per class and no bias.

mod checkpoint;
mod train;

use crate::data::StepInput;
use crate::error::{invalid, Result};
use crate::numcore::{softmax_in_place, DenseMatrix, Gru, GruTape, ParamId, ParamStore, Prng};
use crate::Scalar;

pub use checkpoint::{pcn_load, pcn_save, read_checkpoint, write_checkpoint_atomic, Checkpoint};
pub use train::{
    mean_cross_entropy, pcn_train, ClassifierObjective, PcnTrainConfig, PcnTrainReport,
    SequenceObjective,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcnMode {
    Stateful,
    Stateless,
}

#[derive(Debug, Clone)]
enum Layers {
    Stateful { embedding: ParamId, gru: Gru },
    Stateless { weight: ParamId, bias: ParamId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcnShape {
    pub mode: PcnMode,
    /// Class (or vocabulary) count `V`.
    pub num_classes: usize,
    /// Embedding width for stateful models, feature length for stateless.
    pub input_dim: usize,
    /// Width `d` of `h_t`.
    pub hidden_dim: usize,
}

#[derive(Debug, Clone)]
pub struct PcnModel<T> {
    shape: PcnShape,
    params: ParamStore<T>,
    layers: Layers,
    beta: ParamId,
}

/// Recurrent state carried between steps; zero at each sequence start.
#[derive(Debug, Clone, PartialEq)]
pub struct PcnState<T> {
    pub hidden: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct PcnOutput<T> {
    /// Embedding fed to the softmax layer.
    pub h: Vec<T>,
    /// Class probabilities.
    pub r: Vec<T>,
    pub state: PcnState<T>,
}

/// Per-step activations kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) enum StepTape<T> {
    Token { token: usize, gru: GruTape<T> },
    Features { x: Vec<T>, h: Vec<T> },
}

pub(crate) const BETA: &str = "pcn.beta";
pub(crate) const EMBEDDING: &str = "pcn.embedding";
pub(crate) const GRU_PREFIX: &str = "pcn.gru";
pub(crate) const MLP_W: &str = "pcn.mlp.w";
pub(crate) const MLP_B: &str = "pcn.mlp.b";

impl<T: Scalar> PcnModel<T> {
    /// Random initialization. Rows of `β` listed in `zero_rows` start at zero
    /// (used for classes absent from training, which then never move).
    pub fn new(shape: PcnShape, seed: u64, zero_rows: &[usize]) -> Result<Self> {
        if shape.num_classes == 0 || shape.input_dim == 0 || shape.hidden_dim == 0 {
            return Err(invalid("PCN dimensions must be positive"));
        }
        let mut rng = Prng::new(seed);
        let mut params = ParamStore::new();
        let (v, e, d) = (shape.num_classes, shape.input_dim, shape.hidden_dim);
        let mut init = |rows: usize, cols: usize, scale: f64| {
            let vals = (0..rows * cols).map(|_| rng.symmetric::<T>(scale)).collect();
            DenseMatrix::from_vec(rows, cols, vals)
        };
        let layers = match shape.mode {
            PcnMode::Stateful => {
                let embedding = params.insert(EMBEDDING, init(v, e, 1.0)?)?;
                let mut grng = Prng::new(seed).fork(1);
                let gru = Gru::register(&mut params, GRU_PREFIX, e, d, &mut grng)?;
                Layers::Stateful { embedding, gru }
            }
            PcnMode::Stateless => {
                let weight = params.insert(MLP_W, init(d, e, 1.0 / (e as f64).sqrt())?)?;
                let bias = params.insert(MLP_B, DenseMatrix::zeros(d, 1))?;
                Layers::Stateless { weight, bias }
            }
        };
        let mut beta_init = init(v, d, 1.0 / (d as f64).sqrt())?;
        for &r in zero_rows {
            if r >= v {
                return Err(invalid(format!("zero row {r} >= V={v}")));
            }
            beta_init.row_mut(r).fill(T::zero());
        }
        let beta = params.insert(BETA, beta_init)?;
        Ok(Self {
            shape,
            params,
            layers,
            beta,
        })
    }

    /// Rebuilds a model around an existing parameter store, checking that all
    /// expected parameters exist with consistent shapes.
    pub fn from_params(mode: PcnMode, params: ParamStore<T>) -> Result<Self> {
        let beta = params
            .id(BETA)
            .ok_or_else(|| invalid(format!("missing parameter `{BETA}`")))?;
        let (v, d) = params.value(beta).shape();
        let (layers, input_dim) = match mode {
            PcnMode::Stateful => {
                let embedding = params
                    .id(EMBEDDING)
                    .ok_or_else(|| invalid(format!("missing parameter `{EMBEDDING}`")))?;
                let (ev, e) = params.value(embedding).shape();
                let gru = Gru::bind(&params, GRU_PREFIX)?;
                if ev != v || gru.input_size() != e || gru.hidden_size() != d {
                    return Err(invalid("stateful PCN parameter shapes disagree"));
                }
                (Layers::Stateful { embedding, gru }, e)
            }
            PcnMode::Stateless => {
                let find = |n: &str| params.id(n).ok_or_else(|| invalid(format!("missing `{n}`")));
                let (weight, bias) = (find(MLP_W)?, find(MLP_B)?);
                let (wd, e) = params.value(weight).shape();
                if wd != d || params.value(bias).shape() != (d, 1) {
                    return Err(invalid("stateless PCN parameter shapes disagree"));
                }
                (Layers::Stateless { weight, bias }, e)
            }
        };
        Ok(Self {
            shape: PcnShape {
                mode,
                num_classes: v,
                input_dim,
                hidden_dim: d,
            },
            params,
            layers,
            beta,
        })
    }

    pub fn shape(&self) -> PcnShape {
        self.shape
    }

    pub fn mode(&self) -> PcnMode {
        self.shape.mode
    }

    pub fn num_classes(&self) -> usize {
        self.shape.num_classes
    }

    pub fn hidden_dim(&self) -> usize {
        self.shape.hidden_dim
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    pub fn beta(&self) -> &DenseMatrix<T> {
        self.params.value(self.beta)
    }

    pub fn initial_state(&self) -> PcnState<T> {
        PcnState {
            hidden: vec![T::zero(); self.shape.hidden_dim],
        }
    }

    /// `β h`.
    pub fn logits(&self, h: &[T]) -> Vec<T> {
        self.beta().matvec(h)
    }

    /// Computes `(h_t, r_t, state')`. Stateless models return the state
    /// unchanged.
    pub fn step(&self, state: &PcnState<T>, input: StepInput<'_>) -> Result<PcnOutput<T>> {
        let (h, _) = self.embed(state, input, false)?;
        let mut r = self.logits(&h);
        softmax_in_place(&mut r);
        let state = match self.shape.mode {
            PcnMode::Stateful => PcnState { hidden: h.clone() },
            PcnMode::Stateless => state.clone(),
        };
        Ok(PcnOutput { h, r, state })
    }

    /// The pre-softmax embedding, optionally recording a tape.
    pub(crate) fn embed(
        &self,
        state: &PcnState<T>,
        input: StepInput<'_>,
        record: bool,
    ) -> Result<(Vec<T>, Option<StepTape<T>>)> {
        match (&self.layers, input) {
            (Layers::Stateful { embedding, gru }, StepInput::Token(tok)) => {
                if tok >= self.shape.num_classes {
                    return Err(invalid(format!(
                        "token {tok} out of range for V={}",
                        self.shape.num_classes
                    )));
                }
                if state.hidden.len() != self.shape.hidden_dim {
                    return Err(invalid("PCN state has the wrong length"));
                }
                let x = self.params.value(*embedding).row(tok);
                let (h, tape) = gru.step(&self.params, x, &state.hidden, record)?;
                Ok((h, tape.map(|gru| StepTape::Token { token: tok, gru })))
            }
            (Layers::Stateless { weight, bias }, StepInput::Features(xs)) => {
                if xs.len() != self.shape.input_dim {
                    return Err(invalid(format!(
                        "feature length {} != expected {}",
                        xs.len(),
                        self.shape.input_dim
                    )));
                }
                let x: Vec<T> = xs.iter().map(|&v| T::lit(v)).collect();
                let mut h = self.params.value(*weight).matvec(&x);
                for (hv, &b) in h.iter_mut().zip(self.params.value(*bias).as_slice()) {
                    *hv = (*hv + b).tanh();
                }
                let tape = record.then(|| StepTape::Features {
                    x,
                    h: h.clone(),
                });
                Ok((h, tape))
            }
            (Layers::Stateful { .. }, StepInput::Features(_)) => {
                Err(invalid("stateful PCN expects token input"))
            }
            (Layers::Stateless { .. }, StepInput::Token(_)) => {
                Err(invalid("stateless PCN expects feature input"))
            }
        }
    }

    /// Backward from `dh` through the embedding layers of one step.
    /// Returns the gradient w.r.t. the incoming recurrent state.
    pub(crate) fn backward_embed(&mut self, tape: &StepTape<T>, dh: &[T]) -> Vec<T> {
        match (&self.layers, tape) {
            (Layers::Stateful { embedding, gru }, StepTape::Token { token, gru: gt }) => {
                let (dx, dh_prev) = gru.backward(&mut self.params, gt, dh);
                let emb = *embedding;
                let row = self.params.grad_mut(emb).row_mut(*token);
                for (g, d) in row.iter_mut().zip(dx) {
                    *g += d;
                }
                dh_prev
            }
            (Layers::Stateless { weight, bias }, StepTape::Features { x, h }) => {
                let da: Vec<T> = dh
                    .iter()
                    .zip(h)
                    .map(|(&g, &hv)| g * (T::one() - hv * hv))
                    .collect();
                let (w, b) = (*weight, *bias);
                self.params.grad_mut(w).add_outer(&da, x);
                self.params.grad_mut(b).add_assign_slice(&da);
                vec![T::zero(); self.shape.hidden_dim]
            }
            _ => unreachable!("tape recorded by a different PCN mode"),
        }
    }

    pub(crate) fn beta_id(&self) -> ParamId {
        self.beta
    }
}

/// Free-function form of [`PcnModel::step`].
pub fn pcn_step<T: Scalar>(
    model: &PcnModel<T>,
    state: &PcnState<T>,
    input: StepInput<'_>,
) -> Result<PcnOutput<T>> {
    model.step(state, input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::argmax;
    use proptest::prelude::*;

    fn stateless(v: usize, e: usize, d: usize) -> PcnModel<f64> {
        PcnModel::new(
            PcnShape {
                mode: PcnMode::Stateless,
                num_classes: v,
                input_dim: e,
                hidden_dim: d,
            },
            3,
            &[],
        )
        .unwrap()
    }

    fn set(model: &mut PcnModel<f64>, name: &str, vals: &[f64]) {
        let id = model.params().id(name).unwrap();
        model.params_mut().value_mut(id).as_mut_slice().copy_from_slice(vals);
    }

    #[test]
    fn zero_beta_gives_uniform_scores() {
        let mut m = stateless(4, 3, 5);
        let id = m.beta_id();
        m.params_mut().value_mut(id).fill(0.0);
        let out = m.step(&m.initial_state(), StepInput::Features(&[0.3, 1.0, -2.0])).unwrap();
        assert!(out.r.iter().all(|&p| p == 0.25));
    }

    #[test]
    fn identical_rows_identical_scores() {
        let mut m = stateless(3, 2, 4);
        let row: Vec<f64> = m.beta().row(0).to_vec();
        let id = m.beta_id();
        m.params_mut().value_mut(id).row_mut(1).copy_from_slice(&row);
        let out = m.step(&m.initial_state(), StepInput::Features(&[0.7, -0.1])).unwrap();
        assert_eq!(out.r[0].to_bits(), out.r[1].to_bits());
    }

    #[test]
    fn two_class_scores_from_fixed_embedding() {
        // h = [1, 2] lies outside tanh's range; evaluate the output layer directly.
        let mut m = stateless(2, 2, 2);
        set(&mut m, BETA, &[1.0, 0.0, 0.0, 1.0]);
        let mut r = m.logits(&[1.0, 2.0]);
        softmax_in_place(&mut r);
        assert!((r[0] - 0.2689414213699951).abs() < 1e-5);
        assert!((r[1] - 0.7310585786300049).abs() < 1e-5);
    }

    #[test]
    fn stateful_rejects_bad_tokens_and_advances_state() {
        let m: PcnModel<f64> = PcnModel::new(
            PcnShape {
                mode: PcnMode::Stateful,
                num_classes: 6,
                input_dim: 3,
                hidden_dim: 4,
            },
            1,
            &[],
        )
        .unwrap();
        let s0 = m.initial_state();
        assert!(m.step(&s0, StepInput::Token(6)).is_err());
        assert!(m.step(&s0, StepInput::Features(&[1.0])).is_err());
        let out = m.step(&s0, StepInput::Token(2)).unwrap();
        assert_eq!(out.state.hidden, out.h);
        // Pure function of its inputs.
        let again = m.step(&s0, StepInput::Token(2)).unwrap();
        assert_eq!(out.r, again.r);
    }

    #[test]
    fn stateless_leaves_state_alone() {
        let m = stateless(3, 2, 4);
        let s = PcnState {
            hidden: vec![0.5; 4],
        };
        let out = m.step(&s, StepInput::Features(&[1.0, 2.0])).unwrap();
        assert_eq!(out.state, s);
        assert!(m.step(&s, StepInput::Features(&[1.0])).is_err());
    }

    #[test]
    fn zero_rows_start_at_zero() {
        let m: PcnModel<f64> = PcnModel::new(
            PcnShape {
                mode: PcnMode::Stateless,
                num_classes: 4,
                input_dim: 2,
                hidden_dim: 3,
            },
            9,
            &[2, 3],
        )
        .unwrap();
        assert!(m.beta().row(2).iter().chain(m.beta().row(3)).all(|&v| v == 0.0));
        assert!(m.beta().row(0).iter().any(|&v| v != 0.0));
    }

    proptest! {
        #[test]
        fn scores_normalized_and_argmax_preserved(
            xs in proptest::collection::vec(-3.0f64..3.0, 5),
            seed in 0u64..50,
        ) {
            let m: PcnModel<f64> = PcnModel::new(
                PcnShape { mode: PcnMode::Stateless, num_classes: 7, input_dim: 5, hidden_dim: 6 },
                seed,
                &[],
            ).unwrap();
            let out = m.step(&m.initial_state(), StepInput::Features(&xs)).unwrap();
            prop_assert!((out.r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert_eq!(argmax(&out.r), argmax(&m.logits(&out.h)));
        }
    }
}
