//! Parameterized building blocks shared by the backbone and the adapter.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::param::{init_rng, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Initial value distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Inserts a parameter initialized from a name-derived stream.
pub fn new_param<T: Real>(
    store: &mut ParamStore<T>,
    seed: u64,
    name: &str,
    shape: &[usize],
    init: Init,
    trainable: bool,
) -> Result<ParamId> {
    let t = match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Ones => Tensor::ones(shape.to_vec()),
        Init::Normal(std) => {
            let mut rng = init_rng(seed, name);
            Tensor::from_fn(shape.to_vec(), |_| T::c(std * rng.sample::<f64, _>(StandardNormal)))
        }
    };
    store.insert(name, t, trainable)
}

/// Affine map `x·Wᵀ + b` with `W` stored `[out × in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        weight: Init,
        bias: bool,
        trainable: bool,
    ) -> Result<Self> {
        let w = new_param(store, seed, &format!("{name}.weight"), &[fan_out, fan_in], weight, trainable)?;
        let b = if bias {
            Some(new_param(store, seed, &format!("{name}.bias"), &[fan_out], Init::Zeros, trainable)?)
        } else {
            None
        };
        Ok(Linear { weight: w, bias: b })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Var {
        let w = t.param(s, self.weight);
        let y = t.matmul_nt(x, w);
        match self.bias {
            Some(b) => {
                let b = t.param(s, b);
                t.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Layer normalization over the feature axis with learnable gain and bias.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, trainable: bool) -> Result<Self> {
        let gain = store.insert(format!("{name}.gain"), Tensor::ones([dim]), trainable)?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros([dim]), trainable)?;
        Ok(Norm { gain, bias })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Var {
        let g = t.param(s, self.gain);
        let b = t.param(s, self.bias);
        t.layer_norm(x, Some(g), Some(b), LN_EPS)
    }
}

/// Scaled dot-product attention of already projected `q`, `k`, `v`, split
/// into `heads` contiguous column groups.
pub fn attention<T: Real>(t: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let d = t.value(q).rows_cols().1;
    let dh = d / heads;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (t.cols(q, h * dh, dh), t.cols(k, h * dh, dh), t.cols(v, h * dh, dh))
        };
        let s = t.matmul_nt(qh, kh);
        let s = t.scale(s, scale);
        let a = t.softmax(s);
        outs.push(t.matmul(a, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        t.concat_cols(&outs)
    }
}

/// Multi-head attention with query, key, value and output projections.
#[derive(Debug, Clone)]
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("embedding width {dim} is not divisible by {heads} heads")));
        }
        let std = Init::Normal(1.0 / (dim as f64).sqrt());
        let mk = |s: &mut ParamStore<T>, p: &str| Linear::new(s, seed, &format!("{name}.{p}"), dim, dim, std, true, trainable);
        Ok(Mha { q: mk(store, "q")?, k: mk(store, "k")?, v: mk(store, "v")?, o: mk(store, "o")?, heads })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, q: Var, k: Var, v: Var) -> Var {
        let qp = self.q.forward(t, s, q);
        let kp = self.k.forward(t, s, k);
        let vp = self.v.forward(t, s, v);
        let a = attention(t, qp, kp, vp, self.heads);
        self.o.forward(t, s, a)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        dim: usize,
        hidden: usize,
        out_init: Init,
        trainable: bool,
    ) -> Result<Self> {
        let fc1 = Linear::new(store, seed, &format!("{name}.fc1"), dim, hidden, Init::Normal(1.0 / (dim as f64).sqrt()), true, trainable)?;
        let fc2 = Linear::new(store, seed, &format!("{name}.fc2"), hidden, dim, out_init, true, trainable)?;
        Ok(Ffn { fc1, fc2 })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, x: Var) -> Var {
        let h = self.fc1.forward(t, s, x);
        let h = t.gelu(h);
        self.fc2.forward(t, s, h)
    }
}
