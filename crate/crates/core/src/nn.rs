//! Parameter storage, per-forward binding, and the reusable layers the
//! model is assembled from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, Graph, Tensor, Var};
use crate::error::{MrtError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names are unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    ///
    /// On mismatch the error lists every offending tensor.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            match other.find(name) {
                None => problems.push(format!("{name}: missing from checkpoint")),
                Some(id) if other.get(id).shape() != t.shape() => problems.push(format!(
                    "{name}: model {:?} vs checkpoint {:?}",
                    t.shape(),
                    other.get(id).shape()
                )),
                Some(_) => {}
            }
        }
        for name in &other.names {
            if self.find(name).is_none() {
                problems.push(format!("{name}: not a model parameter"));
            }
        }
        if !problems.is_empty() {
            return Err(MrtError::Config(format!(
                "checkpoint does not match model: {}",
                problems.join("; ")
            )));
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let id = other.find(name).expect("checked above");
            *t = other.get(id).clone();
        }
        Ok(())
    }
}

/// Uniform initialiser over `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

/// One forward pass: a graph with every parameter bound as a leaf.
pub struct Ctx {
    pub g: Graph,
    params: Vec<Var>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl Ctx {
    pub fn new(store: &ParamStore, requires_grad: bool) -> Self {
        let mut g = Graph::new();
        let params = store
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), requires_grad))
            .collect();
        Self {
            g,
            params,
            dropout: None,
        }
    }

    /// Enables inverted dropout with the given rate for this pass.
    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, rng));
        }
        self
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Gradients per parameter, in store order; zeros where the loss is independent.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| grads.get_or_zeros(self.params[id.0], store.get(id).shape()))
            .collect()
    }

    /// Identity unless dropout is enabled.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let shape = self.g.value(x).shape().to_vec();
        let len: usize = shape.iter().product();
        let mask = (0..len)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.g.constant(Tensor::new(shape, mask)?);
        self.g.mul(x, m)
    }
}

/// `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(rng, &[d_in, d_out], d_in));
        let b = store.add(format!("{name}.b"), uniform_init(rng, &[1, d_out], d_in));
        Self { w, b }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = cx.g.matmul(x, cx.p(self.w))?;
        cx.g.add_broadcast(y, cx.p(self.b))
    }
}

/// Layer norm over channels with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[1, d], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, d]));
        Self { gamma, beta }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = cx.g.layer_norm(x, Self::EPS)?;
        let y = cx.g.mul_broadcast(y, cx.p(self.gamma))?;
        cx.g.add_broadcast(y, cx.p(self.beta))
    }
}

/// Depthwise-separable convolution: per-channel kernel then a pointwise projection.
#[derive(Clone, Debug)]
pub struct SepConv {
    pub depthwise: ParamId,
    pub pointwise: Linear,
}

impl SepConv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kernel: usize,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(MrtError::Config(format!("kernel size must be odd, got {kernel}")));
        }
        let depthwise = store.add(
            format!("{name}.depthwise"),
            uniform_init(rng, &[kernel, d_in], kernel),
        );
        let pointwise = Linear::new(store, rng, &format!("{name}.pointwise"), d_in, d_out);
        Ok(Self {
            depthwise,
            pointwise,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = cx.g.depthwise_conv1d(x, cx.p(self.depthwise))?;
        self.pointwise.forward(cx, y)
    }
}

/// Multi-head scaled dot-product self-attention with key masking.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(MrtError::Config(format!(
                "hidden size {d} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            query: Linear::new(store, rng, &format!("{name}.q"), d, d),
            key: Linear::new(store, rng, &format!("{name}.k"), d, d),
            value: Linear::new(store, rng, &format!("{name}.v"), d, d),
            out: Linear::new(store, rng, &format!("{name}.o"), d, d),
        })
    }

    /// `x` is `n×d`; `key_bias` is a constant `1×n` row holding 0 for valid keys
    /// and a large negative value for padding.
    pub fn forward(&self, cx: &mut Ctx, x: Var, key_bias: Var) -> Result<Var> {
        let d = cx.g.value(x).cols();
        let dh = d / self.heads;
        let q = self.query.forward(cx, x)?;
        let k = self.key.forward(cx, x)?;
        let v = self.value.forward(cx, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = cx.g.slice_cols(q, h * dh, dh)?;
            let kh = cx.g.slice_cols(k, h * dh, dh)?;
            let vh = cx.g.slice_cols(v, h * dh, dh)?;
            let kt = cx.g.transpose(kh)?;
            let scores = cx.g.matmul(qh, kt)?;
            let scores = cx.g.scale(scores, scale);
            let scores = cx.g.add_broadcast(scores, key_bias)?;
            let attn = cx.g.softmax(scores, 1)?;
            outs.push(cx.g.matmul(attn, vh)?);
        }
        let cat = cx.g.concat_cols(&outs)?;
        self.out.forward(cx, cat)
    }
}

/// Single-layer unidirectional LSTM; gate order is input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub hidden: usize,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, hidden: usize) -> Self {
        let w_ih = store.add(format!("{name}.w_ih"), uniform_init(rng, &[d_in, 4 * hidden], hidden));
        let w_hh = store.add(format!("{name}.w_hh"), uniform_init(rng, &[hidden, 4 * hidden], hidden));
        let mut b = uniform_init(rng, &[1, 4 * hidden], hidden);
        // forget gate starts open
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            hidden,
            w_ih,
            w_hh,
            bias,
        }
    }

    /// Runs over the rows of `x` (`n×d_in`) and returns the hidden sequence `n×hidden`.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let n = cx.g.value(x).rows();
        let h = self.hidden;
        let xw = cx.g.matmul(x, cx.p(self.w_ih))?;
        let xw = cx.g.add_broadcast(xw, cx.p(self.bias))?;
        let mut hidden = cx.g.constant(Tensor::zeros(&[1, h]));
        let mut cell = cx.g.constant(Tensor::zeros(&[1, h]));
        let mut states = Vec::with_capacity(n);
        for t in 0..n {
            let xt = cx.g.slice_rows(xw, t, 1)?;
            let hw = cx.g.matmul(hidden, cx.p(self.w_hh))?;
            let pre = cx.g.add(xt, hw)?;
            let i = cx.g.slice_cols(pre, 0, h)?;
            let f = cx.g.slice_cols(pre, h, h)?;
            let c = cx.g.slice_cols(pre, 2 * h, h)?;
            let o = cx.g.slice_cols(pre, 3 * h, h)?;
            let i = cx.g.sigmoid(i);
            let f = cx.g.sigmoid(f);
            let c = cx.g.tanh(c);
            let o = cx.g.sigmoid(o);
            let keep = cx.g.mul(f, cell)?;
            let write = cx.g.mul(i, c)?;
            cell = cx.g.add(keep, write)?;
            let squashed = cx.g.tanh(cell);
            hidden = cx.g.mul(o, squashed)?;
            states.push(hidden);
        }
        cx.g.concat_rows(&states)
    }
}
