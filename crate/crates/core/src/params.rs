//! Named parameter tensors, initialization and the AdamW optimizer.

use ndarray::Zip;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Mat, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
}

/// An ordered collection of named tensors owned by one model component.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Index of a tensor inside its `ParamSet`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Xavier-uniform `rows x cols` weight.
    pub fn add_weight(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let value = Mat::from_shape_fn((rows, cols), |_| rng.random_range(-a..a));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::ones((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Puts every tensor on the tape, trainable or frozen.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(&p.value)
                } else {
                    tape.frozen(&p.value)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

/// Tape vars for a bound `ParamSet`, indexed by `ParamId`.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients of every tensor, zero-filled where nothing flowed.
    pub fn collect(&self, grads: &mut Gradients, set: &ParamSet) -> Vec<Mat> {
        self.vars
            .iter()
            .zip(set.iter())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Mat::zeros(p.value.raw_dim())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with decoupled weight decay. State covers exactly the parameter
/// sets handed to `new`; frozen components are simply not registered.
/// Weight decay skips single-row tensors (biases and normalization gains).
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<Mat>>,
    v: Vec<Vec<Mat>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, sets: &[&ParamSet]) -> Self {
        let zeros = |s: &ParamSet| s.iter().map(|p| Mat::zeros(p.value.raw_dim())).collect::<Vec<_>>();
        Self {
            cfg,
            step: 0,
            m: sets.iter().map(|s| zeros(s)).collect(),
            v: sets.iter().map(|s| zeros(s)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of tensors with optimizer state.
    pub fn state_len(&self) -> usize {
        self.m.iter().map(Vec::len).sum()
    }

    /// Applies one update. `grads[i][j]` is the gradient of tensor `j` in
    /// set `i`. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, sets: &mut [&mut ParamSet], grads: &mut [Vec<Mat>]) -> f64 {
        assert_eq!(sets.len(), self.m.len(), "AdamW: parameter set count changed");
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if let Some(max) = self.cfg.clip_norm {
            if norm > max {
                let c = max / norm;
                for g in grads.iter_mut().flatten() {
                    g.mapv_inplace(|v| v * c);
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamWConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
            ..
        } = self.cfg;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (si, set) in sets.iter_mut().enumerate() {
            for (pi, p) in set.iter_mut().enumerate() {
                let g = &grads[si][pi];
                let decay = if p.value.nrows() > 1 { wd } else { 0.0 };
                Zip::from(&mut p.value)
                    .and(&mut self.m[si][pi])
                    .and(&mut self.v[si][pi])
                    .and(g)
                    .for_each(|w, m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *w -= lr * (mhat / (vhat.sqrt() + eps) + decay * *w);
                    });
            }
        }
        norm
    }
}
