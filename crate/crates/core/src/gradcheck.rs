//! Central-difference gradient oracle.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::adapter::EncoderConfig;
use crate::backbone::{default_fusion_layers, BackboneConfig};
use crate::error::{Error, Result};
use crate::extract::ExtractorKind;
use crate::model::{AleiModel, Components, ModelConfig};
use crate::param::{ParamId, ParamStore};
use crate::router::MoeSign;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error used by every gradient comparison.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    /// Checks at most this many evenly spaced coordinates per parameter.
    pub max_coords: Option<usize>,
    /// Coordinates whose analytic and numeric values are both below this are
    /// treated as agreeing zeros; difference noise dominates there.
    pub zero_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { eps: 1e-4, max_coords: None, zero_floor: 1e-7 }
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric values at `worst`.
    pub worst_values: (f64, f64),
    pub coords: usize,
}

impl GradCheck {
    /// Compares tape gradients of the scalar built by `f` against central
    /// differences for every trainable parameter in `store`.
    pub fn run<F>(&self, store: &mut ParamStore<f64>, f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        let eval = |store: &ParamStore<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let out = f(&mut tape, store)?;
            let v = tape.value(out).data()[0];
            if !v.is_finite() {
                return Err(Error::Numerical(format!("objective evaluated to {v}")));
            }
            Ok(v)
        };
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        let grads = tape.backward(out);
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
        let mut report = GradReport { max_rel_err: 0.0, worst: None, worst_values: (0.0, 0.0), coords: 0 };
        for id in ids {
            let n = store.get(id).value.len();
            let analytic = grads.param(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
            let step = match self.max_coords {
                Some(m) if m < n => n.div_ceil(m),
                _ => 1,
            };
            for k in (0..n).step_by(step) {
                let orig = store.get(id).value.data()[k];
                store.get_mut(id).value.data_mut()[k] = orig + self.eps;
                let fp = eval(store);
                store.get_mut(id).value.data_mut()[k] = orig - self.eps;
                let fm = eval(store);
                store.get_mut(id).value.data_mut()[k] = orig;
                let numeric = (fp? - fm?) / (2.0 * self.eps);
                let e = if analytic[k].abs().max(numeric.abs()) < self.zero_floor {
                    0.0
                } else {
                    rel_err(analytic[k], numeric)
                };
                report.coords += 1;
                if e > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = e;
                    report.worst = Some((store.get(id).name.clone(), k));
                    report.worst_values = (analytic[k], numeric);
                }
            }
        }
        Ok(report)
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample(StandardNormal))
}

/// Projects `y` onto a fixed random direction so one scalar covers the whole
/// Jacobian.
pub fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let r = randn(&mut rng, t.value(y).shape());
    let r = t.constant(r);
    let m = t.mul(y, r);
    t.sum(m)
}

/// Checks `op` at a random point; `shapes` are its inputs' shapes.
pub fn check_op(shapes: &[&[usize]], seed: u64, op: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.insert(format!("x{i}"), randn(&mut rng, s), true))
        .collect::<Result<Vec<ParamId>>>()?;
    GradCheck::default().run(&mut store, |t, s| {
        let vs: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect();
        let y = op(t, &vs);
        Ok(probe(t, y, seed))
    })
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Var;

/// Every differentiable primitive with representative shapes.
pub const OPS: &[(&str, &[&[usize]], OpFn)] = &[
    ("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
    ("matmul_nt", &[&[3, 4], &[2, 4]], |t, v| t.matmul_nt(v[0], v[1])),
    ("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
    ("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
    ("add_row", &[&[3, 4], &[4]], |t, v| t.add_row(v[0], v[1])),
    ("mul_row", &[&[3, 4], &[4]], |t, v| t.mul_row(v[0], v[1])),
    ("add_col", &[&[3, 4], &[3]], |t, v| t.add_col(v[0], v[1])),
    ("mul_col", &[&[3, 4], &[3]], |t, v| t.mul_col(v[0], v[1])),
    ("scale", &[&[3, 4]], |t, v| t.scale(v[0], -1.7)),
    ("gelu", &[&[5, 3]], |t, v| t.gelu(v[0])),
    ("sigmoid", &[&[5, 3]], |t, v| t.sigmoid(v[0])),
    ("sum", &[&[3, 4]], |t, v| t.sum(v[0])),
    ("mean_cols", &[&[3, 4]], |t, v| t.mean_cols(v[0])),
    ("rows", &[&[5, 4]], |t, v| t.rows(v[0], 1, 3)),
    ("cols", &[&[3, 6]], |t, v| t.cols(v[0], 2, 3)),
    ("concat_rows", &[&[2, 3], &[1, 3]], |t, v| t.concat_rows(&[v[0], v[1], v[0]])),
    ("concat_cols", &[&[2, 3], &[2, 1]], |t, v| t.concat_cols(&[v[1], v[0], v[1]])),
    ("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
    ("softmax", &[&[3, 5]], |t, v| t.softmax(v[0])),
    ("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)),
    ("layer_norm_plain", &[&[2, 6]], |t, v| t.layer_norm(v[0], None, None, 1e-5)),
    ("conv2d", &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
    ("conv2d_stride2", &[&[2, 6, 6], &[3, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], None, 2, 1)),
    ("avg_pool2", &[&[2, 4, 6]], |t, v| t.avg_pool2(v[0])),
    ("patchify", &[&[3, 4, 8]], |t, v| t.patchify(v[0], 2)),
    ("bce_fake", &[&[1]], |t, v| {
        let p = t.sigmoid(v[0]);
        t.bce(p, 1.0)
    }),
    ("bce_real", &[&[1]], |t, v| {
        let p = t.sigmoid(v[0]);
        t.bce(p, 0.0)
    }),
    ("entropy", &[&[1, 4]], |t, v| {
        let p = t.softmax(v[0]);
        t.entropy(p)
    }),
];

/// Worst error of each primitive over `points` random points.
pub fn op_suite(points: u64) -> Result<Vec<(&'static str, f64)>> {
    OPS.iter()
        .map(|&(name, shapes, op)| {
            let mut worst = 0f64;
            for seed in 0..points {
                worst = worst.max(check_op(shapes, seed, op)?.max_rel_err);
            }
            Ok((name, worst))
        })
        .collect()
}

/// Model sizes for the end-to-end check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dims {
    /// Width 8, two layers, four patches, three streams.
    Tiny,
    /// Width 16, four layers, sixteen patches, four streams; a coordinate
    /// subset is checked.
    Small,
}

impl Dims {
    pub fn name(self) -> &'static str {
        match self {
            Dims::Tiny => "tiny",
            Dims::Small => "small",
        }
    }

    pub fn model_config(self) -> ModelConfig {
        use ExtractorKind::*;
        let (kinds, size, dim, layers) = match self {
            Dims::Tiny => (vec![Image, Npr, Srm], 4, 8, 2),
            Dims::Small => (vec![Image, Npr, Srm, Bayar], 8, 16, 4),
        };
        ModelConfig {
            backbone: BackboneConfig {
                kinds,
                image_size: size,
                patch: 2,
                dim,
                layers,
                heads: 4,
                fusion_layers: default_fusion_layers(layers),
                ..Default::default()
            },
            encoder: EncoderConfig { channels: (8, 8), groups: 4 },
            seed: 5,
        }
    }

    fn max_coords(self) -> Option<usize> {
        match self {
            Dims::Tiny => None,
            Dims::Small => Some(16),
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Dims::Tiny),
            "small" => Ok(Dims::Small),
            _ => Err(Error::Config(format!("unknown dims {s:?}; expected tiny or small"))),
        }
    }
}

/// Gradient of the routed total loss of the full model with respect to every
/// trainable parameter. Zero-initialized tensors are randomized first so no
/// branch is trivially closed.
pub fn end_to_end(dims: Dims, seed: u64) -> Result<GradReport> {
    let cfg = dims.model_config();
    let mut store = ParamStore::<f64>::new();
    let model = AleiModel::new(&mut store, &cfg, Components::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if p.trainable && p.value.data().iter().all(|&v| v == 0.0) {
            for v in p.value.data_mut() {
                *v = 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let s = cfg.backbone.image_size;
    let planes = randn(&mut rng, &[3 * model.streams(), s, s]);
    let check = GradCheck { max_coords: dims.max_coords(), ..Default::default() };
    check.run(&mut store, |t, st| {
        let f = model.forward(t, st, &planes)?;
        Ok(model.loss(t, &f, 1.0, 0.1, MoeSign::Literal))
    })
}
