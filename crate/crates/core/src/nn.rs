//! Parameter storage and the small set of layers the models are built from.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sq_norm).sum()
    }

    /// Bit-level hash of the selected tensors.
    pub fn fingerprint(&self, ids: &[ParamId]) -> u64 {
        let mut h = DefaultHasher::new();
        for id in ids {
            for v in self.get(*id).data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// Lazily binds parameters of one store as leaves of one graph.
pub struct Binder<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| g.variable(self.store.get(id).clone()))
    }

    /// Gradient per parameter; `None` for parameters absent from the graph.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}

pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, rows, cols, bound)
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

/// `y = x·W (+ b)` with `W: in×out`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, input, output));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, output)));
        Self { w, b, input, output }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Var {
        let w = p.var(g, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = p.var(g, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        v.extend(self.b);
        v
    }
}

/// Single-layer LSTM, gate order (input, forget, cell, output).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Lstm {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, hidden: usize) -> Self {
        let w_x = store.add(format!("{name}.w_x"), xavier(rng, input, 4 * hidden));
        let w_h = store.add(format!("{name}.w_h"), xavier(rng, hidden, 4 * hidden));
        let mut bias = Tensor::zeros(1, 4 * hidden);
        for k in hidden..2 * hidden {
            bias.data_mut()[k] = 1.0;
        }
        let b = store.add(format!("{name}.b"), bias);
        Self {
            w_x,
            w_h,
            b,
            input,
            hidden,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_x, self.w_h, self.b]
    }

    /// Runs over `steps` (each `batch×input`) and returns hidden states in
    /// time order. With `reverse` the recurrence runs from the last step.
    pub fn run(&self, g: &mut Graph, p: &mut Binder, steps: &[Var], reverse: bool) -> Vec<Var> {
        let batch = g.shape(steps[0]).0;
        let hsz = self.hidden;
        let w_x = p.var(g, self.w_x);
        let w_h = p.var(g, self.w_h);
        let b = p.var(g, self.b);
        // input contribution for all steps at once
        let stacked = g.concat_rows(steps);
        let xw_all = g.matmul(stacked, w_x);
        let xw_all = g.add_row(xw_all, b);
        let mut h = g.constant(Tensor::zeros(batch, hsz));
        let mut c = g.constant(Tensor::zeros(batch, hsz));
        let mut out = vec![h; steps.len()];
        let order: Vec<usize> = if reverse {
            (0..steps.len()).rev().collect()
        } else {
            (0..steps.len()).collect()
        };
        for (k, &t) in order.iter().enumerate() {
            let xw = if steps.len() == 1 {
                xw_all
            } else {
                g.slice_rows(xw_all, t * batch, (t + 1) * batch)
            };
            let gates = if k == 0 {
                xw
            } else {
                let hw = g.matmul(h, w_h);
                g.add(xw, hw)
            };
            let i = g.slice_cols(gates, 0, hsz);
            let f = g.slice_cols(gates, hsz, 2 * hsz);
            let gg = g.slice_cols(gates, 2 * hsz, 3 * hsz);
            let o = g.slice_cols(gates, 3 * hsz, 4 * hsz);
            let i = g.sigmoid(i);
            let f = g.sigmoid(f);
            let gg = g.tanh(gg);
            let o = g.sigmoid(o);
            let ig = g.mul(i, gg);
            c = if k == 0 {
                ig
            } else {
                let fc = g.mul(f, c);
                g.add(fc, ig)
            };
            let tc = g.tanh(c);
            h = g.mul(o, tc);
            out[t] = h;
        }
        out
    }
}

/// Causal dilated convolution over rows of `(batch·cin)×T`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CausalConv {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl CausalConv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        // He-uniform keeps ReLU stacks from shrinking activations
        let bound = (6.0 / (cin * kernel) as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, cout, cin * kernel, bound));
        let b = store.add(format!("{name}.b"), Tensor::zeros(cout, 1));
        Self {
            w,
            b,
            cin,
            cout,
            kernel,
            dilation,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var, batch: usize) -> Var {
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        g.conv1d_causal(x, w, b, batch, self.kernel, self.dilation)
    }

    /// How many past steps one application can see.
    pub fn reach(&self) -> usize {
        (self.kernel - 1) * self.dilation
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var) -> Var {
        let n = g.layer_norm_rows(x, Self::EPS);
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}
