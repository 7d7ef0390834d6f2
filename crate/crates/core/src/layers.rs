//! Transformer building blocks shared by the encoder and decoder.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, Segment, Tape, Var};
use crate::params::{Bound, ParamId, ParamSet};

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl AttentionParams {
    pub fn new(set: &mut ParamSet, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: set.add_weight(format!("{prefix}.wq"), d, d, rng),
            bq: set.add_zeros(format!("{prefix}.bq"), 1, d),
            wk: set.add_weight(format!("{prefix}.wk"), d, d, rng),
            bk: set.add_zeros(format!("{prefix}.bk"), 1, d),
            wv: set.add_weight(format!("{prefix}.wv"), d, d, rng),
            bv: set.add_zeros(format!("{prefix}.bv"), 1, d),
            wo: set.add_weight(format!("{prefix}.wo"), d, d, rng),
            bo: set.add_zeros(format!("{prefix}.bo"), 1, d),
        }
    }

    /// Projects queries from `x_q` and keys/values from `x_kv`, attends per
    /// segment, then applies the output projection.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        x_q: Var,
        x_kv: Var,
        heads: usize,
        segments: Vec<Segment>,
        causal: bool,
    ) -> Var {
        let q = tape.linear(x_q, b.var(self.wq), b.var(self.bq));
        let k = tape.linear(x_kv, b.var(self.wk), b.var(self.bk));
        let v = tape.linear(x_kv, b.var(self.wv), b.var(self.bv));
        let a = tape.attention(q, k, v, heads, segments, causal);
        tape.linear(a, b.var(self.wo), b.var(self.bo))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForwardParams {
    pub fn new(set: &mut ParamSet, prefix: &str, d: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: set.add_weight(format!("{prefix}.w1"), d, ff, rng),
            b1: set.add_zeros(format!("{prefix}.b1"), 1, ff),
            w2: set.add_weight(format!("{prefix}.w2"), ff, d, rng),
            b2: set.add_zeros(format!("{prefix}.b2"), 1, d),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, b: &Bound, x: Var, dropout: f64) -> Var {
        let h = tape.linear(x, b.var(self.w1), b.var(self.b1));
        let h = tape.gelu(h);
        let h = tape.dropout(h, dropout);
        tape.linear(h, b.var(self.w2), b.var(self.b2))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    gamma: ParamId,
    beta: ParamId,
}

impl NormParams {
    pub fn new(set: &mut ParamSet, prefix: &str, d: usize) -> Self {
        Self {
            gamma: set.add_ones(format!("{prefix}.gamma"), 1, d),
            beta: set.add_zeros(format!("{prefix}.beta"), 1, d),
        }
    }

    /// Post-norm residual: `LayerNorm(x + dropout(sub))`.
    pub fn residual(&self, tape: &mut Tape<'_>, b: &Bound, x: Var, sub: Var, dropout: f64) -> Var {
        let sub = tape.dropout(sub, dropout);
        let y = tape.add(x, sub);
        tape.layer_norm(y, b.var(self.gamma), b.var(self.beta))
    }
}

/// Sinusoidal position table, `len x d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Mat {
    Mat::from_shape_fn((len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Row offsets of packed sequences with the given lengths.
pub fn offsets(lengths: impl IntoIterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|len| {
            let o = (start, len);
            start += len;
            o
        })
        .collect()
}

/// Token-embedding lookup scaled by `sqrt(d)` plus positions, for packed
/// sequences.
pub fn embed(
    tape: &mut Tape<'_>,
    table: Var,
    positions: Var,
    seqs: &[&[u32]],
) -> Var {
    let d = tape.value(table).ncols();
    let ids: Vec<Option<usize>> = seqs.iter().flat_map(|s| s.iter().map(|&t| Some(t as usize))).collect();
    let pos: Vec<Option<usize>> = seqs.iter().flat_map(|s| (0..s.len()).map(Some)).collect();
    let tok = tape.gather(table, ids);
    let tok = tape.scale(tok, (d as f64).sqrt());
    let p = tape.gather(positions, pos);
    tape.add(tok, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_start_with_sin0_cos0() {
        let p = sinusoidal_positions(4, 6);
        assert_eq!(p[[0, 0]], 0.0);
        assert_eq!(p[[0, 1]], 1.0);
        assert!((p[[1, 0]] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn packed_offsets() {
        assert_eq!(offsets([3, 1, 2]), vec![(0, 3), (3, 1), (4, 2)]);
    }
}
