//! Row-wise L2 normalization and the fusion layer that merges the target
//! and retrieved-code representations.
//!
//! The three-branch layer computes
//! `G1 = F1([t; s])`, `G2 = F2([t; t - s])`, `G3 = F3([t; t * s])` and
//! `G = F([G1; G2; G3])`, each `F` a bias-carrying affine map with no
//! nonlinearity. The simple variant is a single affine map over `[t; s]`.

use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var, L2_EPS};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamSet};

/// A batch of position-aligned sequence representations,
/// `batch x positions x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRepr {
    pub values: Array3<f64>,
    /// `true` at real (non-padding) positions.
    pub pad_mask: Array2<bool>,
}

impl SequenceRepr {
    pub fn new(values: Array3<f64>, pad_mask: Array2<bool>) -> Result<Self> {
        let (b, p, _) = values.dim();
        if pad_mask.dim() != (b, p) {
            return Err(Error::ShapeMismatch(format!(
                "pad mask {:?} does not match values {:?}",
                pad_mask.dim(),
                values.dim()
            )));
        }
        Ok(Self { values, pad_mask })
    }

    /// All positions valid.
    pub fn dense(values: Array3<f64>) -> Self {
        let (b, p, _) = values.dim();
        Self {
            values,
            pad_mask: Array2::from_elem((b, p), true),
        }
    }

    /// Stacks per-sequence `len x d` matrices, padding with zero rows or
    /// truncating to `positions`.
    pub fn aligned(seqs: &[Mat], positions: usize) -> Result<Self> {
        let d = seqs.first().map_or(0, |m| m.ncols());
        let mut values = Array3::zeros((seqs.len(), positions, d));
        let mut pad_mask = Array2::from_elem((seqs.len(), positions), false);
        for (b, m) in seqs.iter().enumerate() {
            if m.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: m.ncols(),
                });
            }
            let n = m.nrows().min(positions);
            values.slice_mut(s![b, ..n, ..]).assign(&m.slice(s![..n, ..]));
            pad_mask.slice_mut(s![b, ..n]).fill(true);
        }
        Ok(Self { values, pad_mask })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    fn flat(&self) -> Mat {
        let (b, p, d) = self.values.dim();
        self.values.to_shape((b * p, d)).unwrap().to_owned()
    }

    fn from_flat(m: Mat, shape: (usize, usize, usize), pad_mask: Array2<bool>) -> Self {
        let values = m.into_shape_with_order(shape).unwrap();
        Self { values, pad_mask }
    }
}

/// Divides each position vector by `max(||v||_2, 1e-12)`; zero rows stay zero.
pub fn l2_normalize(m: &SequenceRepr) -> SequenceRepr {
    let mut values = m.values.clone();
    for mut row in values.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = 1.0 / n.max(L2_EPS);
        row.mapv_inplace(|v| v * inv);
    }
    SequenceRepr {
        values,
        pad_mask: m.pad_mask.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    ThreeBranch,
    Simple,
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

impl Affine {
    fn new(set: &mut ParamSet, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: set.add_weight(format!("{name}.w"), rows, cols, rng),
            b: set.add_zeros(format!("{name}.b"), 1, cols),
        }
    }

    fn apply(&self, tape: &mut Tape<'_>, bound: &Bound, x: Var) -> Var {
        tape.linear(x, bound.var(self.w), bound.var(self.b))
    }
}

#[derive(Debug, Clone)]
enum Layout {
    ThreeBranch {
        f1: Affine,
        f2: Affine,
        f3: Affine,
        f: Affine,
    },
    Simple {
        s: Affine,
    },
}

/// Fusion-layer weights. Three-branch: `fusion.f1/f2/f3` map `2d -> d` and
/// `fusion.f` maps `3d -> d`. Simple: `fusion.simple` maps `2d -> d`.
#[derive(Debug, Clone)]
pub struct FusionParams {
    d_model: usize,
    params: ParamSet,
    layout: Layout,
}

impl FusionParams {
    pub fn new(kind: FusionKind, d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = d_model;
        let layout = match kind {
            FusionKind::ThreeBranch => Layout::ThreeBranch {
                f1: Affine::new(&mut params, "fusion.f1", 2 * d, d, &mut rng),
                f2: Affine::new(&mut params, "fusion.f2", 2 * d, d, &mut rng),
                f3: Affine::new(&mut params, "fusion.f3", 2 * d, d, &mut rng),
                f: Affine::new(&mut params, "fusion.f", 3 * d, d, &mut rng),
            },
            FusionKind::Simple => Layout::Simple {
                s: Affine::new(&mut params, "fusion.simple", 2 * d, d, &mut rng),
            },
        };
        Self {
            d_model,
            params,
            layout,
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self.layout {
            Layout::ThreeBranch { .. } => FusionKind::ThreeBranch,
            Layout::Simple { .. } => FusionKind::Simple,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Fuses packed, position-aligned rows of the two representations.
    pub fn forward(&self, tape: &mut Tape<'_>, b: &Bound, v_tar: Var, v_sim: Var) -> Var {
        match &self.layout {
            Layout::ThreeBranch { f1, f2, f3, f } => {
                let x1 = tape.concat(&[v_tar, v_sim]);
                let g1 = f1.apply(tape, b, x1);
                let diff = tape.sub(v_tar, v_sim);
                let x2 = tape.concat(&[v_tar, diff]);
                let g2 = f2.apply(tape, b, x2);
                let prod = tape.mul(v_tar, v_sim);
                let x3 = tape.concat(&[v_tar, prod]);
                let g3 = f3.apply(tape, b, x3);
                let all = tape.concat(&[g1, g2, g3]);
                f.apply(tape, b, all)
            }
            Layout::Simple { s } => {
                let x = tape.concat(&[v_tar, v_sim]);
                s.apply(tape, b, x)
            }
        }
    }

    fn run(&self, v_tar: &SequenceRepr, v_sim: &SequenceRepr) -> Result<SequenceRepr> {
        if v_tar.shape() != v_sim.shape() {
            return Err(Error::ShapeMismatch(format!(
                "fusion inputs {:?} and {:?} differ",
                v_tar.shape(),
                v_sim.shape()
            )));
        }
        if v_tar.shape().2 != self.d_model {
            return Err(Error::DimensionMismatch {
                expected: self.d_model,
                actual: v_tar.shape().2,
            });
        }
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let t = tape.constant(v_tar.flat());
        let s = tape.constant(v_sim.flat());
        let g = self.forward(&mut tape, &b, t, s);
        let mask = &v_tar.pad_mask | &v_sim.pad_mask;
        Ok(SequenceRepr::from_flat(tape.value(g).clone(), v_tar.shape(), mask))
    }
}

/// Three-branch fusion of aligned inputs. An output position is real when
/// it is real in either input.
pub fn fuse(v_tar: &SequenceRepr, v_sim: &SequenceRepr, params: &FusionParams) -> Result<SequenceRepr> {
    if params.kind() != FusionKind::ThreeBranch {
        return Err(Error::InvalidArgument("fuse needs three-branch fusion parameters".into()));
    }
    params.run(v_tar, v_sim)
}

/// Single affine map over `[v_tar; v_sim]`.
pub fn simple_fuse(v_tar: &SequenceRepr, v_sim: &SequenceRepr, params: &FusionParams) -> Result<SequenceRepr> {
    if params.kind() != FusionKind::Simple {
        return Err(Error::InvalidArgument("simple_fuse needs simple fusion parameters".into()));
    }
    params.run(v_tar, v_sim)
}

/// Packs target/similar final states into position-aligned rows on a tape.
///
/// For pair `i`, both sides are zero-padded to `max(len_tar, len_sim)` rows;
/// positions beyond that are padding on both sides and are never attended
/// to, so this is equivalent to padding everything to the maximum input
/// length. Returns the aligned `(tar, sim)` vars and per-pair row spans.
pub fn align_pairs(
    tape: &mut Tape<'_>,
    tar: Var,
    tar_spans: &[(usize, usize)],
    sim: Var,
    sim_spans: &[(usize, usize)],
    normalize: bool,
) -> (Var, Var, Vec<(usize, usize)>) {
    let mut tar_rows = Vec::new();
    let mut sim_rows = Vec::new();
    let mut spans = Vec::with_capacity(tar_spans.len());
    for (&(ts, tl), &(ss, sl)) in tar_spans.iter().zip(sim_spans) {
        let p = tl.max(sl);
        spans.push((tar_rows.len(), p));
        for i in 0..p {
            tar_rows.push((i < tl).then_some(ts + i));
            sim_rows.push((i < sl).then_some(ss + i));
        }
    }
    let mut t = tape.gather(tar, tar_rows);
    let mut s = tape.gather(sim, sim_rows);
    if normalize {
        t = tape.l2_rows(t);
        s = tape.l2_rows(s);
    }
    (t, s, spans)
}
