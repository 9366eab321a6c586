use crate::error::{invalid, Result};
use crate::numcore::{sigmoid, DenseMatrix, ParamId, ParamStore, Prng};
use crate::Scalar;

const GATES: [&str; 3] = ["z", "r", "n"];
const Z: usize = 0;
const R: usize = 1;
const N: usize = 2;

/// Input-side pre-activations `W_g x + b_g` for the update (`z`), reset (`r`)
/// and candidate (`n`) gates.
pub type GateInputs<T> = [Vec<T>; 3];

/// Activations retained by a forward step for the matching backward pass.
#[derive(Debug, Clone)]
pub struct GruTape<T> {
    pub x: Vec<T>,
    pub h_prev: Vec<T>,
    pub z: Vec<T>,
    pub r: Vec<T>,
    pub n: Vec<T>,
    pub rh: Vec<T>,
}

/// Handle to the weights of one GRU cell inside a [`ParamStore`]:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// n  = tanh(W_n x + U_n (r ⊙ h) + b_n)
/// h' = (1 - z) ⊙ h + z ⊙ n
/// ```
#[derive(Debug, Clone)]
pub struct Gru {
    input_size: usize,
    hidden_size: usize,
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
}

impl Gru {
    /// Registers a freshly initialized cell under `prefix` (uniform weights in
    /// `±1/sqrt(hidden)`, zero biases).
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut Prng,
    ) -> Result<Self> {
        let scale = 1.0 / (hidden_size as f64).sqrt();
        let mut init = |rows: usize, cols: usize| -> Result<DenseMatrix<T>> {
            let vals = (0..rows * cols).map(|_| rng.symmetric::<T>(scale)).collect();
            DenseMatrix::from_vec(rows, cols, vals)
        };
        let mut w = Vec::new();
        let mut u = Vec::new();
        let mut b = Vec::new();
        for g in GATES {
            w.push(store.insert(format!("{prefix}.w_{g}"), init(hidden_size, input_size)?)?);
            u.push(store.insert(format!("{prefix}.u_{g}"), init(hidden_size, hidden_size)?)?);
            b.push(store.insert(format!("{prefix}.b_{g}"), DenseMatrix::zeros(hidden_size, 1))?);
        }
        Ok(Self {
            input_size,
            hidden_size,
            w: [w[0], w[1], w[2]],
            u: [u[0], u[1], u[2]],
            b: [b[0], b[1], b[2]],
        })
    }

    /// Looks up an existing cell by prefix, validating shapes.
    pub fn bind<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let find = |kind: &str, g: &str| {
            let name = format!("{prefix}.{kind}_{g}");
            store
                .id(&name)
                .ok_or_else(|| invalid(format!("missing GRU parameter `{name}`")))
        };
        let mut ids = [[ParamId(0); 3]; 3];
        for (k, kind) in ["w", "u", "b"].iter().enumerate() {
            for (gi, g) in GATES.iter().enumerate() {
                ids[k][gi] = find(kind, g)?;
            }
        }
        let (hidden_size, input_size) = store.value(ids[0][0]).shape();
        for gi in 0..3 {
            let ok = store.value(ids[0][gi]).shape() == (hidden_size, input_size)
                && store.value(ids[1][gi]).shape() == (hidden_size, hidden_size)
                && store.value(ids[2][gi]).shape() == (hidden_size, 1);
            if !ok {
                return Err(invalid(format!("GRU `{prefix}` has inconsistent shapes")));
            }
        }
        Ok(Self {
            input_size,
            hidden_size,
            w: ids[0],
            u: ids[1],
            b: ids[2],
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn input_weight(&self, gate: usize) -> ParamId {
        self.w[gate]
    }

    pub fn bias(&self, gate: usize) -> ParamId {
        self.b[gate]
    }

    /// `W_g x + b_g` for each gate.
    pub fn project<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> GateInputs<T> {
        std::array::from_fn(|g| {
            let mut out = store.value(self.w[g]).matvec(x);
            for (o, &b) in out.iter_mut().zip(store.value(self.b[g]).as_slice()) {
                *o += b;
            }
            out
        })
    }

    /// One step from precomputed input projections.
    pub fn step_projected<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        proj: &GateInputs<T>,
        h_prev: &[T],
        record_tape: bool,
    ) -> (Vec<T>, Option<GruTape<T>>) {
        let hs = self.hidden_size;
        let mut z = store.value(self.u[Z]).matvec(h_prev);
        let mut r = store.value(self.u[R]).matvec(h_prev);
        for i in 0..hs {
            z[i] = sigmoid(z[i] + proj[Z][i]);
            r[i] = sigmoid(r[i] + proj[R][i]);
        }
        let rh: Vec<T> = r.iter().zip(h_prev).map(|(&a, &b)| a * b).collect();
        let mut n = store.value(self.u[N]).matvec(&rh);
        for i in 0..hs {
            n[i] = (n[i] + proj[N][i]).tanh();
        }
        let h_new = (0..hs)
            .map(|i| (T::one() - z[i]) * h_prev[i] + z[i] * n[i])
            .collect();
        let tape = record_tape.then(|| GruTape {
            x: Vec::new(),
            h_prev: h_prev.to_vec(),
            z,
            r,
            n,
            rh,
        });
        (h_new, tape)
    }

    pub fn step<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        h_prev: &[T],
        record_tape: bool,
    ) -> Result<(Vec<T>, Option<GruTape<T>>)> {
        if x.len() != self.input_size || h_prev.len() != self.hidden_size {
            return Err(invalid(format!(
                "GRU expects input {} / hidden {}, got {} / {}",
                self.input_size,
                self.hidden_size,
                x.len(),
                h_prev.len()
            )));
        }
        let proj = self.project(store, x);
        let (h, mut tape) = self.step_projected(store, &proj, h_prev, record_tape);
        if let Some(t) = tape.as_mut() {
            t.x = x.to_vec();
        }
        Ok((h, tape))
    }

    /// Backward through one step, accumulating gradients of the recurrent
    /// weights `U_g`. Returns the gradient w.r.t. the gate pre-activations
    /// (which equals the gradient w.r.t. `W_g x + b_g`) and w.r.t. `h_prev`.
    pub fn backward_projected<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        tape: &GruTape<T>,
        dh_new: &[T],
    ) -> (GateInputs<T>, Vec<T>) {
        let hs = self.hidden_size;
        let one = T::one();
        let mut dh_prev: Vec<T> = (0..hs).map(|i| dh_new[i] * (one - tape.z[i])).collect();
        let da_z: Vec<T> = (0..hs)
            .map(|i| {
                let dz = dh_new[i] * (tape.n[i] - tape.h_prev[i]);
                dz * tape.z[i] * (one - tape.z[i])
            })
            .collect();
        let da_n: Vec<T> = (0..hs)
            .map(|i| dh_new[i] * tape.z[i] * (one - tape.n[i] * tape.n[i]))
            .collect();

        store.grad_mut(self.u[N]).add_outer(&da_n, &tape.rh);
        let d_rh = store.value(self.u[N]).matvec_t(&da_n);
        let da_r: Vec<T> = (0..hs)
            .map(|i| {
                dh_prev[i] += d_rh[i] * tape.r[i];
                let dr = d_rh[i] * tape.h_prev[i];
                dr * tape.r[i] * (one - tape.r[i])
            })
            .collect();

        store.grad_mut(self.u[Z]).add_outer(&da_z, &tape.h_prev);
        store.grad_mut(self.u[R]).add_outer(&da_r, &tape.h_prev);
        store.value(self.u[Z]).matvec_t_cols_acc(0, &da_z, &mut dh_prev);
        store.value(self.u[R]).matvec_t_cols_acc(0, &da_r, &mut dh_prev);

        ([da_z, da_r, da_n], dh_prev)
    }

    /// Accumulates `W_g`/`b_g` gradients for an input `x` given the gate
    /// pre-activation gradients, writing into the column window starting at
    /// `col0` (so callers can split the input into shared and private parts).
    pub fn accumulate_input_grads<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        dproj: &GateInputs<T>,
        col0: usize,
        x: &[T],
        with_bias: bool,
    ) {
        for g in 0..3 {
            store.grad_mut(self.w[g]).add_outer_cols(col0, &dproj[g], x);
            if with_bias {
                store.grad_mut(self.b[g]).add_assign_slice(&dproj[g]);
            }
        }
    }

    /// Full backward through a step recorded by [`Gru::step`]. Returns
    /// `(dx, dh_prev)`.
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        tape: &GruTape<T>,
        dh_new: &[T],
    ) -> (Vec<T>, Vec<T>) {
        let (dproj, dh_prev) = self.backward_projected(store, tape, dh_new);
        self.accumulate_input_grads(store, &dproj, 0, &tape.x, true);
        let mut dx = vec![T::zero(); self.input_size];
        for g in 0..3 {
            store.value(self.w[g]).matvec_t_cols_acc(0, &dproj[g], &mut dx);
        }
        (dx, dh_prev)
    }
}

/// Single GRU step using the cell registered under `prefix` in `params`.
pub fn gru_step<T: Scalar>(
    params: &ParamStore<T>,
    prefix: &str,
    x: &[T],
    h_prev: &[T],
    record_tape: bool,
) -> Result<(Vec<T>, Option<GruTape<T>>)> {
    Gru::bind(params, prefix)?.step(params, x, h_prev, record_tape)
}
