//! Transformer building blocks recorded onto an autodiff [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Glorot-uniform weight matrix.
pub fn xavier<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::lit(rng.gen_range(-a..a))).collect();
    Matrix::from_vec(fan_in, fan_out, data)
}

pub fn normal<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    let dist = Normal::new(0.0, std).expect("positive standard deviation");
    let data = (0..rows * cols).map(|_| T::lit(dist.sample(rng))).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Sinusoidal position table, `n × dim`.
pub fn sinusoidal_positions<T: Scalar>(n: usize, dim: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(n, dim);
    for pos in 0..n {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            out.set(pos, i, T::lit(v));
        }
    }
    out
}

/// Affine map `x · W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.register(format!("{name}.weight"), xavier(rng, fan_in, fan_out));
        let bias = store.register(format!("{name}.bias"), Matrix::zeros(1, fan_out));
        Self { weight, bias }
    }

    /// Weight and bias both start at zero.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.register(format!("{name}.weight"), Matrix::zeros(fan_in, fan_out));
        let bias = store.register(format!("{name}.bias"), Matrix::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.register(format!("{name}.gain"), Matrix::filled(1, dim, T::one()));
        let bias = store.register(format!("{name}.bias"), Matrix::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let n = g.normalize_rows(x, T::lit(LAYER_NORM_EPS));
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Scaled dot-product attention with `heads` heads over a shared width.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, rng),
            heads,
            width,
        }
    }

    /// Queries come from `queries`, keys and values from `memory`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, queries: Var, memory: Var, causal: bool) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, memory);
        let v = self.value.forward(g, memory);
        let head_dim = self.width / self.heads;
        let scale = T::one() / T::lit(head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let qh = g.slice_cols(q, cols.clone());
            let kh = g.slice_cols(k, cols.clone());
            let vh = g.slice_cols(v, cols);
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores, causal);
            outs.push(g.matmul(weights, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.output.forward(g, merged)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, width: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, ff_width, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let n = self.attn_norm.forward(g, x);
        let a = self.attn.forward(g, n, n, false);
        let x = g.add(x, a);
        let n = self.ff_norm.forward(g, x);
        let f = self.ff.forward(g, n);
        g.add(x, f)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over a
/// memory sequence, then feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), width),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), width, heads, rng),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), width),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), width, heads, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, ff_width, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, memory: Var) -> Var {
        let n = self.self_norm.forward(g, x);
        let a = self.self_attn.forward(g, n, n, true);
        let x = g.add(x, a);
        let n = self.cross_norm.forward(g, x);
        let c = self.cross_attn.forward(g, n, memory, false);
        let x = g.add(x, c);
        let n = self.ff_norm.forward(g, x);
        let f = self.ff.forward(g, n);
        g.add(x, f)
    }
}
