//! Causal transformer decoder that cross-attends to a memory sequence,
//! teacher-forced cross-entropy, and greedy/beam decoding.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, Mat, Segment, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, AttentionParams, FeedForwardParams, NormParams};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tokenizer::{TokenSequence, BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub max_output_length: usize,
    pub beam_size: usize,
    pub feedforward_size: usize,
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn paper() -> Self {
        Self {
            num_layers: 6,
            hidden_size: 768,
            num_heads: 12,
            max_output_length: 32,
            beam_size: 10,
            feedforward_size: 3072,
            dropout: 0.1,
        }
    }

    pub fn desk() -> Self {
        Self {
            num_layers: 2,
            hidden_size: 128,
            num_heads: 4,
            max_output_length: 32,
            beam_size: 10,
            feedforward_size: 512,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "decoder hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.beam_size == 0 {
            return Err(Error::InvalidConfig("beam_size must be at least 1".into()));
        }
        if self.max_output_length < 2 {
            return Err(Error::InvalidConfig("max_output_length must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("decoder dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Log-probabilities over the output vocabulary for one position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub log_probs: Vec<f64>,
}

impl StepDistribution {
    pub fn argmax(&self) -> u32 {
        argmax(&self.log_probs) as u32
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
struct LayerIds {
    self_attn: AttentionParams,
    norm1: NormParams,
    cross_attn: AttentionParams,
    norm2: NormParams,
    ff: FeedForwardParams,
    norm3: NormParams,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    config: DecoderConfig,
    vocab_size: usize,
    params: ParamSet,
    embed: ParamId,
    layers: Vec<LayerIds>,
    out_w: ParamId,
    out_b: ParamId,
    positions: Mat,
}

impl Decoder {
    /// `prefix` namespaces tensor names so a stage-1 scaffold decoder and
    /// the generation decoder can share a checkpoint format.
    pub fn new(config: DecoderConfig, vocab_size: usize, prefix: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_size;
        let mut params = ParamSet::new();
        let a = (3.0 / d as f64).sqrt();
        let embed = params.add(
            format!("{prefix}.embed"),
            Mat::from_shape_fn((vocab_size, d), |_| rand::Rng::random_range(&mut rng, -a..a)),
        );
        let layers = (0..config.num_layers)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                LayerIds {
                    self_attn: AttentionParams::new(&mut params, &format!("{p}.self_attn"), d, &mut rng),
                    norm1: NormParams::new(&mut params, &format!("{p}.norm1"), d),
                    cross_attn: AttentionParams::new(&mut params, &format!("{p}.cross_attn"), d, &mut rng),
                    norm2: NormParams::new(&mut params, &format!("{p}.norm2"), d),
                    ff: FeedForwardParams::new(&mut params, &format!("{p}.ff"), d, config.feedforward_size, &mut rng),
                    norm3: NormParams::new(&mut params, &format!("{p}.norm3"), d),
                }
            })
            .collect();
        let out_w = params.add_weight(format!("{prefix}.out.w"), d, vocab_size, &mut rng);
        let out_b = params.add_zeros(format!("{prefix}.out.b"), 1, vocab_size);
        Ok(Self {
            positions: layers::sinusoidal_positions(config.max_output_length, d),
            config,
            vocab_size,
            params,
            embed,
            layers,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Output projection weight and bias ids, exposed for tests that pin
    /// the softmax layer.
    pub fn output_ids(&self) -> (ParamId, ParamId) {
        (self.out_w, self.out_b)
    }

    /// Packed forward pass. `memory` holds one block of rows per input, with
    /// `memory_spans[i]` the rows that `prefixes[i]` may cross-attend to.
    /// Returns logits with one row per prefix position.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        b: &Bound,
        memory: Var,
        memory_spans: &[(usize, usize)],
        prefixes: &[&[u32]],
    ) -> Var {
        let spans = layers::offsets(prefixes.iter().map(|p| p.len()));
        let self_segments: Vec<Segment> = spans
            .iter()
            .map(|&(s, l)| Segment {
                q_start: s,
                q_len: l,
                k_start: s,
                k_len: l,
            })
            .collect();
        let cross_segments: Vec<Segment> = spans
            .iter()
            .zip(memory_spans)
            .map(|(&(s, l), &(ms, ml))| Segment {
                q_start: s,
                q_len: l,
                k_start: ms,
                k_len: ml,
            })
            .collect();
        let positions = tape.frozen(&self.positions);
        let h = layers::embed(tape, b.var(self.embed), positions, prefixes);
        let dropout = self.config.dropout;
        let heads = self.config.num_heads;
        let mut x = tape.dropout(h, dropout);
        for l in &self.layers {
            let a = l.self_attn.forward(tape, b, x, x, heads, self_segments.clone(), true);
            x = l.norm1.residual(tape, b, x, a, dropout);
            let c = l.cross_attn.forward(tape, b, x, memory, heads, cross_segments.clone(), false);
            x = l.norm2.residual(tape, b, x, c, dropout);
            let f = l.ff.forward(tape, b, x, dropout);
            x = l.norm3.residual(tape, b, x, f, dropout);
        }
        tape.linear(x, b.var(self.out_w), b.var(self.out_b))
    }

    /// Summed teacher-forced cross-entropy over packed targets. Each target
    /// is `BOS .. EOS`; the decoder reads `target[..n-1]` and predicts
    /// `target[1..]`. `PAD` labels are ignored.
    pub fn loss<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        b: &Bound,
        memory: Var,
        memory_spans: &[(usize, usize)],
        targets: &[&[u32]],
    ) -> (Var, Var) {
        let inputs: Vec<&[u32]> = targets.iter().map(|t| &t[..t.len() - 1]).collect();
        let labels: Vec<Option<usize>> = targets
            .iter()
            .flat_map(|t| t[1..].iter().map(|&y| (y != PAD).then_some(y as usize)))
            .collect();
        let logits = self.forward(tape, b, memory, memory_spans, &inputs);
        (tape.cross_entropy(logits, labels), logits)
    }

    /// Next-token distributions for several prefixes that all attend to the
    /// same memory rows. Used by beam search.
    pub fn next_log_probs(&self, memory: &Mat, prefixes: &[Vec<u32>]) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let mem = tape.frozen(memory);
        let spans = vec![(0, memory.nrows()); prefixes.len()];
        let refs: Vec<&[u32]> = prefixes.iter().map(Vec::as_slice).collect();
        let logits = self.forward(&mut tape, &b, mem, &spans, &refs);
        let lp = log_softmax_rows(tape.value(logits));
        let mut row = 0;
        prefixes
            .iter()
            .map(|p| {
                row += p.len();
                lp.row(row - 1).to_vec()
            })
            .collect()
    }
}

/// Distributions at every position of `prefix` given memory rows `g`
/// (`positions x d`). Position `t` depends only on `prefix[..=t]`.
pub fn decode_forward(decoder: &Decoder, g: &Mat, prefix: &TokenSequence) -> Result<Vec<StepDistribution>> {
    let ids = prefix.valid();
    if ids.first() != Some(&BOS) {
        return Err(Error::InvalidArgument("decoder prefix must start with BOS".into()));
    }
    if ids.len() >= decoder.config.max_output_length {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: decoder.config.max_output_length - 1,
        });
    }
    check_memory(decoder, g)?;
    let mut tape = Tape::new();
    let b = decoder.params.bind(&mut tape, false);
    let mem = tape.frozen(g);
    let logits = decoder.forward(&mut tape, &b, mem, &[(0, g.nrows())], &[ids]);
    let lp = log_softmax_rows(tape.value(logits));
    Ok(lp
        .rows()
        .into_iter()
        .map(|r| StepDistribution { log_probs: r.to_vec() })
        .collect())
}

/// Summed negative log-likelihood of `target` (`BOS .. EOS`, optionally
/// `PAD`-suffixed) under teacher forcing.
pub fn loss(decoder: &Decoder, g: &Mat, target: &TokenSequence) -> Result<f64> {
    let ids = target.ids.as_slice();
    let valid = target.len();
    if valid < 2 {
        return Err(Error::EmptySequence);
    }
    if ids.len() > decoder.config.max_output_length {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: decoder.config.max_output_length,
        });
    }
    check_memory(decoder, g)?;
    let mut tape = Tape::new();
    let b = decoder.params.bind(&mut tape, false);
    let mem = tape.frozen(g);
    let (l, _) = decoder.loss(&mut tape, &b, mem, &[(0, g.nrows())], &[ids]);
    Ok(tape.scalar(l))
}

fn check_memory(decoder: &Decoder, g: &Mat) -> Result<()> {
    if g.ncols() != decoder.config.hidden_size {
        return Err(Error::DimensionMismatch {
            expected: decoder.config.hidden_size,
            actual: g.ncols(),
        });
    }
    if g.nrows() == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(())
}

/// Anything that can score next tokens for a batch of prefixes.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    /// One log-probability vector per prefix.
    fn log_probs(&self, prefixes: &[Vec<u32>]) -> Vec<Vec<f64>>;
}

/// A decoder bound to fixed memory rows. `PAD` and `BOS` are never emitted,
/// and `EOS` is blocked at the first step so comments are never empty.
pub struct DecoderStep<'a> {
    pub decoder: &'a Decoder,
    pub memory: &'a Mat,
}

impl StepModel for DecoderStep<'_> {
    fn vocab_size(&self) -> usize {
        self.decoder.vocab_size
    }

    fn log_probs(&self, prefixes: &[Vec<u32>]) -> Vec<Vec<f64>> {
        let mut out = self.decoder.next_log_probs(self.memory, prefixes);
        for (lp, p) in out.iter_mut().zip(prefixes) {
            lp[PAD as usize] = f64::NEG_INFINITY;
            lp[BOS as usize] = f64::NEG_INFINITY;
            if p.len() == 1 {
                lp[EOS as usize] = f64::NEG_INFINITY;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// `BOS`-prefixed ids; `EOS`, when present, is last.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// Per-generated-token log-probabilities.
    pub token_log_probs: Vec<f64>,
    pub finished: bool,
}

/// Higher score first, then lexicographically smaller ids.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search without length normalization. Each step expands every live
/// hypothesis, keeps the best `beam_size` candidates overall, and sets aside
/// those ending in `EOS`. Stops once `beam_size` hypotheses have finished or
/// hypotheses reach `max_len` ids (including `BOS`); unfinished survivors at
/// that point compete as-is. Returns the best finished hypothesis.
pub fn beam_search(model: &dyn StepModel, beam_size: usize, max_len: usize) -> Hypothesis {
    let beam_size = beam_size.max(1);
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        token_log_probs: Vec::new(),
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() && finished.len() < beam_size {
        if live[0].tokens.len() >= max_len {
            finished.append(&mut live);
            break;
        }
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| h.tokens.clone()).collect();
        let dists = model.log_probs(&prefixes);
        let mut candidates = Vec::with_capacity(live.len() * model.vocab_size());
        for (h, lp) in live.iter().zip(&dists) {
            for (tok, &p) in lp.iter().enumerate() {
                if p == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok as u32);
                let mut token_log_probs = h.token_log_probs.clone();
                token_log_probs.push(p);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + p,
                    token_log_probs,
                    finished: tok as u32 == EOS,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(beam_size);
        live.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    finished.sort_by(rank);
    finished.into_iter().next().unwrap_or(Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        token_log_probs: Vec::new(),
        finished: false,
    })
}

/// Picks the most likely token at every step (ties to the smaller id).
pub fn greedy(model: &dyn StepModel, max_len: usize) -> Hypothesis {
    let mut h = Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        token_log_probs: Vec::new(),
        finished: false,
    };
    while h.tokens.len() < max_len {
        let lp = model.log_probs(std::slice::from_ref(&h.tokens)).pop().unwrap();
        let tok = argmax(&lp);
        h.tokens.push(tok as u32);
        h.log_prob += lp[tok];
        h.token_log_probs.push(lp[tok]);
        if tok as u32 == EOS {
            h.finished = true;
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> DecoderConfig {
        DecoderConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            max_output_length: 6,
            beam_size: 3,
            feedforward_size: 16,
            dropout: 0.0,
        }
    }

    fn memory(rows: usize, d: usize) -> Mat {
        Mat::from_shape_fn((rows, d), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6)
    }

    #[test]
    fn distributions_normalize() {
        let dec = Decoder::new(micro(), 9, "decoder", 1).unwrap();
        let d = decode_forward(&dec, &memory(3, 8), &TokenSequence::new(vec![BOS, 5, 6])).unwrap();
        assert_eq!(d.len(), 3);
        for s in d {
            let z: f64 = s.log_probs.iter().map(|v| v.exp()).sum();
            assert!((z - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn appending_keeps_earlier_positions() {
        let dec = Decoder::new(micro(), 9, "decoder", 2).unwrap();
        let g = memory(4, 8);
        let short = decode_forward(&dec, &g, &TokenSequence::new(vec![BOS, 5])).unwrap();
        let long = decode_forward(&dec, &g, &TokenSequence::new(vec![BOS, 5, 7, 4])).unwrap();
        for (a, b) in short.iter().zip(&long) {
            for (x, y) in a.log_probs.iter().zip(&b.log_probs) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let mut dec = Decoder::new(micro(), 9, "decoder", 3).unwrap();
        let (w, b) = dec.output_ids();
        for (i, p) in dec.params_mut().iter_mut().enumerate() {
            if i == w.0 || i == b.0 {
                p.value.fill(0.0);
            }
        }
        let d = decode_forward(&dec, &memory(2, 8), &TokenSequence::new(vec![BOS])).unwrap();
        for lp in &d[0].log_probs {
            assert!((lp.exp() - 1.0 / 9.0).abs() < 1e-12);
        }
        // Uniform model: loss over three predicted tokens is 3 ln 9.
        let l = loss(&dec, &memory(2, 8), &TokenSequence::new(vec![BOS, 4, 5, EOS])).unwrap();
        assert!((l - 3.0 * 9f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn pad_labels_contribute_nothing() {
        let dec = Decoder::new(micro(), 9, "decoder", 4).unwrap();
        let g = memory(3, 8);
        let t = TokenSequence::new(vec![BOS, 4, EOS]);
        let a = loss(&dec, &g, &t).unwrap();
        let b = loss(&dec, &g, &t.padded(6)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn over_length_and_bad_prefix() {
        let dec = Decoder::new(micro(), 9, "decoder", 5).unwrap();
        let g = memory(2, 8);
        assert!(decode_forward(&dec, &g, &TokenSequence::new(vec![BOS; 6])).is_err());
        assert!(decode_forward(&dec, &g, &TokenSequence::new(vec![4, 5])).is_err());
        assert!(matches!(loss(&dec, &g, &TokenSequence::new(vec![BOS])), Err(Error::EmptySequence)));
    }

    #[test]
    fn decoder_beam_respects_length_and_specials() {
        let dec = Decoder::new(micro(), 9, "decoder", 6).unwrap();
        let g = memory(3, 8);
        let step = DecoderStep { decoder: &dec, memory: &g };
        let h = beam_search(&step, 3, 6);
        assert!(h.tokens.len() <= 6);
        assert_eq!(h.tokens[0], BOS);
        assert!(h.tokens[1..].iter().all(|&t| t != PAD && t != BOS));
        assert!(h.tokens.iter().filter(|&&t| t == EOS).count() <= 1);
        let g1 = greedy(&step, 6);
        let b1 = beam_search(&step, 1, 6);
        assert_eq!(g1.tokens, b1.tokens);
    }
}
