//! Shared trunk with one scoring head per expert, stored as a single flat
//! parameter vector so optimizers and gradient checks can treat it uniformly.

pub mod loss;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, Matrix};

pub use loss::{ce_loss, gla_grad, gla_loss, gla_loss_pairwise, total_loss};
pub use train::{train, EpochRecord, Schedule, TrainConfig, TrainState, Trainer};

/// Cosine scores are zero for inputs with a norm below this.
const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum HeadKind {
    Linear,
    /// `kappa * w_y·z / (|w_y| |z|)`, no bias.
    Cosine {
        kappa: f64,
    },
}

/// Architecture of a [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub input_dim: usize,
    /// 0: heads read the features directly; 1: one hidden layer.
    pub depth: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub head: HeadKind,
    pub classes: usize,
    pub experts: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 || self.experts == 0 {
            return Err(Error::invalid(
                "shape",
                "input_dim, classes and experts must be positive",
            ));
        }
        if self.depth > 1 {
            return Err(Error::invalid("depth", "only depth 0 or 1 is supported"));
        }
        if self.depth == 1 && self.hidden == 0 {
            return Err(Error::invalid("hidden", "must be positive for depth 1"));
        }
        if let HeadKind::Cosine { kappa } = self.head {
            if !(kappa.is_finite() && kappa > 0.0) {
                return Err(Error::invalid("kappa", "must be positive"));
            }
        }
        Ok(())
    }

    /// Width of the representation the heads see.
    pub fn feature_dim(&self) -> usize {
        if self.depth == 0 {
            self.input_dim
        } else {
            self.hidden
        }
    }

    fn layout(&self) -> Layout {
        let h = self.feature_dim();
        let (trunk_w, trunk_b, mut off) = if self.depth == 1 {
            let w = 0;
            let b = self.hidden * self.input_dim;
            (w, b, b + self.hidden)
        } else {
            (0, 0, 0)
        };
        let has_bias = matches!(self.head, HeadKind::Linear);
        let heads = (0..self.experts)
            .map(|_| {
                let w = off;
                off += self.classes * h;
                let b = off;
                if has_bias {
                    off += self.classes;
                }
                (w, b)
            })
            .collect();
        Layout {
            trunk_w,
            trunk_b,
            heads,
            total: off,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone)]
struct Layout {
    trunk_w: usize,
    trunk_b: usize,
    heads: Vec<(usize, usize)>,
    total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    shape: ModelShape,
    params: Vec<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pre: Option<Matrix>,
    hidden: Matrix,
    /// One `B×C` matrix per expert.
    pub logits: Vec<Matrix>,
}

impl Model {
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        let n = shape.num_params();
        Ok(Model {
            shape,
            params: vec![0.0; n],
        })
    }

    /// Weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Result<Self> {
        let mut m = Model::zeros(shape)?;
        let layout = m.shape.layout();
        let d = m.shape.input_dim;
        if m.shape.depth == 1 {
            let bound = 1.0 / (d as f64).sqrt();
            for p in &mut m.params[layout.trunk_w..layout.trunk_b] {
                *p = rng.random_range(-bound..bound);
            }
        }
        let h = m.shape.feature_dim();
        let bound = 1.0 / (h as f64).sqrt();
        let c = m.shape.classes;
        for &(w, _) in &layout.heads {
            for p in &mut m.params[w..w + c * h] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(m)
    }

    pub fn from_params(shape: ModelShape, params: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if params.len() != shape.num_params() {
            return Err(Error::invalid(
                "params",
                format!(
                    "expected {} values, got {}",
                    shape.num_params(),
                    params.len()
                ),
            ));
        }
        Ok(Model { shape, params })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Mutable views of one linear head: `(weights C×h, bias C)`.
    pub fn head_mut(&mut self, expert: usize) -> (&mut [f64], &mut [f64]) {
        let layout = self.shape.layout();
        let (w, b) = layout.heads[expert];
        let wlen = self.shape.classes * self.shape.feature_dim();
        let blen = if matches!(self.shape.head, HeadKind::Linear) {
            self.shape.classes
        } else {
            0
        };
        let (left, right) = self.params.split_at_mut(b);
        (&mut left[w..w + wlen], &mut right[..blen])
    }

    /// Per-expert logits, each `B×C`.
    pub fn forward(&self, features: &Matrix) -> Result<Vec<Matrix>> {
        Ok(self.forward_cached(features)?.logits)
    }

    pub fn forward_cached(&self, features: &Matrix) -> Result<ForwardCache> {
        if features.cols() != self.shape.input_dim {
            return Err(Error::invalid(
                "features",
                format!(
                    "expected {} columns, got {}",
                    self.shape.input_dim,
                    features.cols()
                ),
            ));
        }
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i}")));
        }
        let layout = self.shape.layout();
        let b = features.rows();
        let (pre, hidden) = if self.shape.depth == 1 {
            let (h, d) = (self.shape.hidden, self.shape.input_dim);
            let w = &self.params[layout.trunk_w..layout.trunk_w + h * d];
            let bias = &self.params[layout.trunk_b..layout.trunk_b + h];
            let mut pre = Matrix::zeros(b, h);
            let mut hid = Matrix::zeros(b, h);
            for i in 0..b {
                let x = features.row(i);
                let p = pre.row_mut(i);
                for (k, out) in p.iter_mut().enumerate() {
                    *out = bias[k] + dot(&w[k * d..(k + 1) * d], x);
                }
                let act = self.shape.activation;
                for (o, &v) in hid.row_mut(i).iter_mut().zip(pre.row(i)) {
                    *o = act.apply(v);
                }
            }
            (Some(pre), hid)
        } else {
            (None, features.clone())
        };
        let logits = (0..self.shape.experts)
            .map(|e| self.head_forward(&layout, e, &hidden))
            .collect();
        Ok(ForwardCache {
            pre,
            hidden,
            logits,
        })
    }

    fn head_forward(&self, layout: &Layout, expert: usize, z: &Matrix) -> Matrix {
        let (c, h) = (self.shape.classes, self.shape.feature_dim());
        let (wo, bo) = layout.heads[expert];
        let w = &self.params[wo..wo + c * h];
        let mut out = Matrix::zeros(z.rows(), c);
        match self.shape.head {
            HeadKind::Linear => {
                let bias = &self.params[bo..bo + c];
                for i in 0..z.rows() {
                    let zi = z.row(i);
                    for (y, o) in out.row_mut(i).iter_mut().enumerate() {
                        *o = bias[y] + dot(&w[y * h..(y + 1) * h], zi);
                    }
                }
            }
            HeadKind::Cosine { kappa } => {
                let wnorm: Vec<f64> = (0..c)
                    .map(|y| crate::numeric::norm(&w[y * h..(y + 1) * h]))
                    .collect();
                for i in 0..z.rows() {
                    let zi = z.row(i);
                    let zn = crate::numeric::norm(zi);
                    for (y, o) in out.row_mut(i).iter_mut().enumerate() {
                        *o = if zn < COSINE_EPS || wnorm[y] < COSINE_EPS {
                            0.0
                        } else {
                            kappa * dot(&w[y * h..(y + 1) * h], zi) / (wnorm[y] * zn)
                        };
                    }
                }
            }
        }
        out
    }

    /// Gradient of `Σ_e Σ_i Σ_y dlogits[e][i][y] * logits[e][i][y]` with
    /// respect to the parameters.
    pub fn backward(
        &self,
        features: &Matrix,
        cache: &ForwardCache,
        dlogits: &[Matrix],
    ) -> Vec<f64> {
        let layout = self.shape.layout();
        let (c, h) = (self.shape.classes, self.shape.feature_dim());
        let b = features.rows();
        let mut grad = vec![0.0; layout.total];
        let mut dz = Matrix::zeros(b, h);
        let z = &cache.hidden;

        for (e, g) in dlogits.iter().enumerate() {
            let (wo, bo) = layout.heads[e];
            let w = &self.params[wo..wo + c * h];
            match self.shape.head {
                HeadKind::Linear => {
                    for i in 0..b {
                        let zi = z.row(i);
                        let gi = g.row(i);
                        for y in 0..c {
                            let gy = gi[y];
                            if gy == 0.0 {
                                continue;
                            }
                            grad[bo + y] += gy;
                            let gw = &mut grad[wo + y * h..wo + (y + 1) * h];
                            for (gwk, zk) in gw.iter_mut().zip(zi) {
                                *gwk += gy * zk;
                            }
                            let wy = &w[y * h..(y + 1) * h];
                            for (dzk, wk) in dz.row_mut(i).iter_mut().zip(wy) {
                                *dzk += gy * wk;
                            }
                        }
                    }
                }
                HeadKind::Cosine { kappa } => {
                    let wnorm: Vec<f64> = (0..c)
                        .map(|y| crate::numeric::norm(&w[y * h..(y + 1) * h]))
                        .collect();
                    for i in 0..b {
                        let zi = z.row(i);
                        let zn = crate::numeric::norm(zi);
                        if zn < COSINE_EPS {
                            continue;
                        }
                        let gi = g.row(i);
                        for y in 0..c {
                            let gy = gi[y];
                            if gy == 0.0 || wnorm[y] < COSINE_EPS {
                                continue;
                            }
                            let wy = &w[y * h..(y + 1) * h];
                            let cos = dot(wy, zi) / (wnorm[y] * zn);
                            // d cos / d w = (z/|z| - cos * w/|w|) / |w|
                            let gw = &mut grad[wo + y * h..wo + (y + 1) * h];
                            for k in 0..h {
                                let d = (zi[k] / zn - cos * wy[k] / wnorm[y]) / wnorm[y];
                                gw[k] += gy * kappa * d;
                            }
                            let dzi = dz.row_mut(i);
                            for k in 0..h {
                                let d = (wy[k] / wnorm[y] - cos * zi[k] / zn) / zn;
                                dzi[k] += gy * kappa * d;
                            }
                        }
                    }
                }
            }
        }

        if let Some(pre) = &cache.pre {
            let d = self.shape.input_dim;
            let act = self.shape.activation;
            for i in 0..b {
                let x = features.row(i);
                for k in 0..h {
                    let dp = dz.row(i)[k] * act.derivative(pre.row(i)[k]);
                    if dp == 0.0 {
                        continue;
                    }
                    grad[layout.trunk_b + k] += dp;
                    let gw = &mut grad[layout.trunk_w + k * d..layout.trunk_w + (k + 1) * d];
                    for (g, xv) in gw.iter_mut().zip(x) {
                        *g += dp * xv;
                    }
                }
            }
        }
        grad
    }

    /// Pre-activations of the hidden layer, for choosing gradient-check points
    /// away from activation kinks.
    pub fn hidden_preactivations(&self, features: &Matrix) -> Result<Option<Matrix>> {
        Ok(self.forward_cached(features)?.pre)
    }
}
