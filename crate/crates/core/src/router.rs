//! Softmax router over the concatenated CLS rows, per-modality heads and the
//! losses that train them.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{new_param, Init, Linear};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Sign of the entropy term in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MoeSign {
    /// `+λH(p)`: minimizing sharpens the routing.
    #[default]
    Literal,
    /// `−λH(p)`: minimizing spreads the routing.
    Balance,
}

impl MoeSign {
    pub fn name(self) -> &'static str {
        match self {
            MoeSign::Literal => "literal",
            MoeSign::Balance => "balance",
        }
    }

    pub fn factor(self) -> f64 {
        match self {
            MoeSign::Literal => 1.0,
            MoeSign::Balance => -1.0,
        }
    }
}

impl fmt::Display for MoeSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MoeSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "literal" => Ok(MoeSign::Literal),
            "balance" => Ok(MoeSign::Balance),
            o => Err(Error::Config(format!("moe sign must be literal or balance, got {o:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Router {
    pub w: ParamId,
    pub b: ParamId,
    pub streams: usize,
    pub dim: usize,
}

impl Router {
    pub fn new<T: Real>(store: &mut ParamStore<T>, streams: usize, dim: usize) -> Result<Self> {
        Ok(Router {
            w: new_param(store, 0, "router.W", &[streams * dim, streams], Init::Zeros, true)?,
            b: new_param(store, 0, "router.b", &[streams], Init::Zeros, true)?,
            streams,
            dim,
        })
    }

    /// `softmax(F_cls · W + b)` for a `[1 × (M+1)·D]` row.
    pub fn route<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, fcls: Var) -> Var {
        let w = t.param(s, self.w);
        let b = t.param(s, self.b);
        let z = t.matmul(fcls, w);
        let z = t.add_row(z, b);
        t.softmax(z)
    }

    pub fn route_checked<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, fcls: Var) -> Result<Var> {
        let n = t.value(fcls).len();
        if n != self.streams * self.dim {
            return Err(Error::Dimension(format!("router expects {} features, got {n}", self.streams * self.dim)));
        }
        let x = t.reshape(fcls, &[1, n]);
        Ok(self.route(t, s, x))
    }
}

/// One affine logit head `R^D → R` per modality, plus the optional shared head
/// over all CLS rows used when routing is ablated.
#[derive(Debug, Clone)]
pub struct Heads {
    pub per: Vec<Linear>,
    pub shared: Option<Linear>,
}

impl Heads {
    pub fn new<T: Real>(store: &mut ParamStore<T>, streams: usize, dim: usize, shared: bool) -> Result<Self> {
        let per = (0..streams)
            .map(|i| Linear::new(store, 0, &format!("heads.{i}"), dim, 1, Init::Zeros, true, true))
            .collect::<Result<Vec<_>>>()?;
        let shared = if shared {
            Some(Linear::new(store, 0, "heads.shared", streams * dim, 1, Init::Zeros, true, true)?)
        } else {
            None
        };
        Ok(Heads { per, shared })
    }

    /// `sigmoid(head_i(cls_i))` as a `[1 × 1]` value.
    pub fn head<T: Real>(&self, t: &mut Tape<T>, s: &ParamStore<T>, i: usize, cls: Var) -> Var {
        let z = self.per[i].forward(t, s, cls);
        t.sigmoid(z)
    }
}

/// `Σ pᵢ · hᵢ` as a `[1]` value.
pub fn mixture<T: Real>(t: &mut Tape<T>, p: Var, per_head: Var) -> Var {
    let ph = t.reshape(per_head, &[1, t.value(per_head).len()]);
    let pp = t.reshape(p, &[1, t.value(p).len()]);
    let m = t.mul(pp, ph);
    t.sum(m)
}

/// BCE of the fused probability plus `±λ·H(p)`; exactly the BCE when `λ = 0`
/// or there is no routing distribution.
pub fn total_loss<T: Real>(t: &mut Tape<T>, y: f64, fused: Var, p: Option<Var>, lambda: f64, sign: MoeSign) -> Var {
    let bce = t.bce(fused, y);
    match p {
        Some(p) if lambda != 0.0 => {
            let h = t.entropy(p);
            let h = t.scale(h, T::c(sign.factor() * lambda));
            t.add(bce, h)
        }
        _ => bce,
    }
}

/// Uniform routing distribution used when the router is ablated.
pub fn uniform<T: Real>(streams: usize) -> Tensor<T> {
    Tensor::full([1, streams], T::c(1.0 / streams as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn zero_router_is_uniform_and_bias_dominates() {
        let mut s = ParamStore::<f64>::new();
        let r = Router::new(&mut s, 4, 3).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([1, 12], |i| i as f64));
        let p = r.route(&mut t, &s, x);
        assert!(t.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        s.get_mut(r.b).value = Tensor::new([4], vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn([1, 12], |i| i as f64));
        let p = r.route(&mut t, &s, x);
        let e10 = 10f64.exp();
        assert!((t.value(p).data()[0] - e10 / (e10 + 3.0)).abs() < 1e-12);
        assert!((t.value(p).data()[0] - 0.99986).abs() < 1e-5);
        let bad = t.constant(Tensor::zeros([1, 11]));
        assert!(r.route_checked(&mut t, &s, bad).is_err());
    }

    #[test]
    fn mixture_examples() {
        let mut t = Tape::<f64>::new();
        let p = t.constant(Tensor::full([1, 4], 0.25));
        let h = t.constant(Tensor::new([1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let f = mixture(&mut t, p, h);
        assert_eq!(t.value(f).data()[0], 0.25);
        let p = t.constant(Tensor::new([1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap());
        let h = t.constant(Tensor::new([1, 4], vec![0.1, 0.2, 0.7, 0.4]).unwrap());
        let f = mixture(&mut t, p, h);
        assert_eq!(t.value(f).data()[0], 0.7);
    }

    #[test]
    fn total_loss_closed_forms() {
        let mut t = Tape::<f64>::new();
        let f = t.constant(Tensor::scalar(0.5));
        let p = t.constant(uniform(4));
        let l = total_loss(&mut t, 1.0, f, Some(p), 0.1, MoeSign::Literal);
        assert!((t.value(l).data()[0] - 0.831777).abs() < 1e-5);
        let l = total_loss(&mut t, 1.0, f, Some(p), 0.1, MoeSign::Balance);
        assert!((t.value(l).data()[0] - (2f64.ln() - 0.1 * 4f64.ln())).abs() < 1e-12);
        let l0 = total_loss(&mut t, 1.0, f, Some(p), 0.0, MoeSign::Literal);
        let b = t.bce(f, 1.0);
        assert_eq!(t.value(l0).data(), t.value(b).data());
    }

    #[test]
    fn entropy_gradient_at_softmax_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::from_fn([1, 4], |_| rng.sample::<f64, _>(StandardNormal));
        let mut t = Tape::new();
        let zv = t.input(z.clone());
        let p = t.softmax(zv);
        let pv = t.value(p).clone();
        // Gradient with respect to p itself.
        let mut t2 = Tape::new();
        let pin = t2.input(pv.clone());
        let h = t2.entropy(pin);
        let g = t2.backward(h);
        let eps = 1e-6;
        for k in 0..4 {
            let ent = |d: f64| {
                let mut q = pv.data().to_vec();
                q[k] += d;
                -q.iter().map(|v| v * v.ln()).sum::<f64>()
            };
            let num = (ent(eps) - ent(-eps)) / (2.0 * eps);
            assert!(crate::gradcheck::rel_err(g.wrt(pin).unwrap().data()[k], num) < 1e-5);
        }
    }

    #[test]
    fn routed_loss_gradient() {
        let mut s = ParamStore::<f64>::new();
        let r = Router::new(&mut s, 3, 4).unwrap();
        let heads = Heads::new(&mut s, 3, 4, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ids: Vec<_> = s.ids().collect();
        for id in ids {
            for v in s.get_mut(id).value.data_mut() {
                *v = 0.5 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let cls: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn([1, 4], |_| rng.sample(StandardNormal))).collect();
        let rep = GradCheck::default()
            .run(&mut s, |t, st| {
                let c: Vec<Var> = cls.iter().map(|x| t.constant(x.clone())).collect();
                let hs: Vec<Var> = (0..3).map(|i| heads.head(t, st, i, c[i])).collect();
                let ph = t.concat_cols(&hs);
                let f = t.concat_cols(&c);
                let p = r.route(t, st, f);
                let fused = mixture(t, p, ph);
                Ok(total_loss(t, 1.0, fused, Some(p), 0.1, MoeSign::Literal))
            })
            .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }

    proptest! {
        #[test]
        fn mixture_stays_within_head_range(
            z in prop::collection::vec(-20.0f64..20.0, 4),
            h in prop::collection::vec(0.0f64..=1.0, 4),
        ) {
            let mut t = Tape::<f64>::new();
            let zv = t.constant(Tensor::new([1, 4], z).unwrap());
            let p = t.softmax(zv);
            let hv = t.constant(Tensor::new([1, 4], h.clone()).unwrap());
            let f = mixture(&mut t, p, hv);
            let fv = t.value(f).data()[0];
            let lo = h.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(fv >= lo - 1e-12 && fv <= hi + 1e-12);
            let e = t.entropy(p);
            let ev = t.value(e).data()[0];
            prop_assert!(ev >= 0.0 && ev <= 4f64.ln() + 1e-12);
        }
    }
}
