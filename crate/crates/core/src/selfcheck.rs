//! Registered finite-difference gradient suites, each over randomized small
//! instances.

use serde::Serialize;

use crate::combiner::{CombinerObjective, GateStep, RnnCombiner};
use crate::error::Result;
use crate::numcore::{backprop_check, log_softmax, softmax, DenseMatrix, Gru, Objective, ParamStore, Prng};
use crate::pcn::{ClassifierObjective, PcnMode, PcnModel, PcnShape};

pub const SUITES: [&str; 4] = ["gru", "softmax_ce", "mlp", "combiner_gate"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub worst: String,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// `Σ_t c · h_t` over a GRU run from a zero state.
struct GruObjective {
    store: ParamStore<f64>,
    gru: Gru,
    xs: Vec<Vec<f64>>,
    readout: Vec<f64>,
}

impl GruObjective {
    fn random(rng: &mut Prng) -> Result<Self> {
        let (n, k, len) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(5));
        let mut store = ParamStore::new();
        let gru = Gru::register(&mut store, "gru", n, k, rng)?;
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.value_mut(id).as_mut_slice() {
                *v = rng.symmetric(1.0);
            }
        }
        let xs = (0..len).map(|_| (0..n).map(|_| rng.symmetric(1.5)).collect()).collect();
        let readout = (0..k).map(|_| rng.symmetric(1.0)).collect();
        Ok(Self {
            store,
            gru,
            xs,
            readout,
        })
    }

    fn run(&mut self, grads: bool) -> Result<f64> {
        let k = self.gru.hidden_size();
        let mut h = vec![0.0; k];
        let mut tapes = Vec::new();
        let mut loss = 0.0;
        for x in &self.xs {
            let (next, tape) = self.gru.step(&self.store, x, &h, grads)?;
            loss += crate::numcore::dot(&self.readout, &next);
            tapes.extend(tape);
            h = next;
        }
        if grads {
            self.store.zero_grads();
            let mut carry = vec![0.0; k];
            for tape in tapes.iter().rev() {
                let dh: Vec<f64> = carry.iter().zip(&self.readout).map(|(a, b)| a + b).collect();
                carry = self.gru.backward(&mut self.store, tape, &dh).1;
            }
        }
        Ok(loss)
    }
}

impl Objective<f64> for GruObjective {
    fn params(&self) -> &ParamStore<f64> {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }
    fn loss(&self) -> Result<f64> {
        let mut me = Self {
            store: self.store.clone(),
            gru: self.gru.clone(),
            xs: self.xs.clone(),
            readout: self.readout.clone(),
        };
        me.run(false)
    }
    fn compute_gradients(&mut self) -> Result<f64> {
        self.run(true)
    }
}

/// Mean `−log softmax(W x_i)[y_i]` with `W` the only parameter.
struct SoftmaxObjective {
    store: ParamStore<f64>,
    data: Vec<(Vec<f64>, usize)>,
}

impl SoftmaxObjective {
    fn random(rng: &mut Prng) -> Result<Self> {
        let (v, n, m) = (2 + rng.below(5), 1 + rng.below(4), 1 + rng.below(4));
        let vals = (0..v * n).map(|_| rng.symmetric(2.0)).collect();
        let mut store = ParamStore::new();
        store.insert("w", DenseMatrix::from_vec(v, n, vals)?)?;
        let data = (0..m)
            .map(|_| ((0..n).map(|_| rng.symmetric(1.5)).collect(), rng.below(v)))
            .collect();
        Ok(Self { store, data })
    }
}

impl Objective<f64> for SoftmaxObjective {
    fn params(&self) -> &ParamStore<f64> {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }
    fn loss(&self) -> Result<f64> {
        let w = self.store.value(self.store.id("w").expect("registered"));
        let mut total = 0.0;
        for (x, y) in &self.data {
            total -= log_softmax(&w.matvec(x))?[*y];
        }
        Ok(total / self.data.len() as f64)
    }
    fn compute_gradients(&mut self) -> Result<f64> {
        let id = self.store.id("w").expect("registered");
        self.store.zero_grads();
        let scale = 1.0 / self.data.len() as f64;
        for (x, y) in &self.data {
            let mut g = softmax(&self.store.value(id).matvec(x))?.into_vec();
            g[*y] -= 1.0;
            g.iter_mut().for_each(|v| *v *= scale);
            self.store.grad_mut(id).add_outer(&g, x);
        }
        self.loss()
    }
}

fn random_mlp(rng: &mut Prng) -> Result<ClassifierObjective<f64>> {
    let (v, n, d, m) = (2 + rng.below(4), 1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(4));
    let model = PcnModel::new(
        PcnShape {
            mode: PcnMode::Stateless,
            num_classes: v,
            input_dim: n,
            hidden_dim: d,
        },
        rng.next_u64(),
        &[],
    )?;
    let mut obj = ClassifierObjective {
        model,
        batch: (0..m)
            .map(|_| ((0..n).map(|_| rng.symmetric(1.5)).collect(), rng.below(v)))
            .collect(),
        mask: None,
    };
    let store = obj.params_mut();
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.value_mut(id).as_mut_slice() {
            *x = rng.symmetric(1.0);
        }
    }
    Ok(obj)
}

fn random_gate(rng: &mut Prng) -> Result<CombinerObjective<f64>> {
    let (v, d, k, len) = (2 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(5));
    let mut combiner = RnnCombiner::new(d, k, rng.next_u64(), rng.symmetric(1.0))?;
    let store = combiner.params_mut();
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.value_mut(id).as_mut_slice() {
            *x = rng.symmetric(1.0);
        }
    }
    let dist = |rng: &mut Prng| {
        let raw: Vec<f64> = (0..v).map(|_| rng.uniform() + 0.05).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let steps = (0..len)
        .map(|_| GateStep {
            h: (0..d).map(|_| rng.symmetric(1.0)).collect(),
            r: dist(rng),
            s: dist(rng),
            y: rng.below(v),
        })
        .collect();
    Ok(CombinerObjective { combiner, steps })
}

fn run_suite<O: Objective<f64>>(
    name: &'static str,
    instances: usize,
    eps: f64,
    tol: f64,
    mut make: impl FnMut() -> Result<O>,
) -> Result<SuiteResult> {
    let mut out = SuiteResult {
        name,
        instances,
        max_rel_error: 0.0,
        worst: String::new(),
        tolerance: tol,
    };
    for i in 0..instances {
        let rep = backprop_check(&mut make()?, eps, tol)?;
        if out.worst.is_empty() || rep.max_rel_error > out.max_rel_error {
            out.max_rel_error = rep.max_rel_error;
            out.worst = format!("instance {i}: {}", rep.worst);
        }
    }
    Ok(out)
}

/// Runs every suite in [`SUITES`] on `instances` random instances.
pub fn run_gradcheck_suites(seed: u64, instances: usize, eps: f64, tol: f64) -> Result<Vec<SuiteResult>> {
    let root = Prng::new(seed);
    let mut rng = root.fork(0);
    let gru = run_suite(SUITES[0], instances, eps, tol, || GruObjective::random(&mut rng))?;
    let mut rng = root.fork(1);
    let ce = run_suite(SUITES[1], instances, eps, tol, || SoftmaxObjective::random(&mut rng))?;
    let mut rng = root.fork(2);
    let mlp = run_suite(SUITES[2], instances, eps, tol, || random_mlp(&mut rng))?;
    let mut rng = root.fork(3);
    let gate = run_suite(SUITES[3], instances, eps, tol, || random_gate(&mut rng))?;
    Ok(vec![gru, ce, mlp, gate])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_on_a_few_instances() {
        for r in run_gradcheck_suites(3, 3, 1e-5, 1e-4).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
