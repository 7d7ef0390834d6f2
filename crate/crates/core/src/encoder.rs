//! Transformer code encoder exposing every layer's hidden states and the
//! pooled semantic vector used for retrieval.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Segment, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, AttentionParams, FeedForwardParams, NormParams};
use crate::params::{Bound, ParamId, ParamSet};
use crate::tokenizer::{TokenSequence, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub max_input_length: usize,
    pub feedforward_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Full-size encoder (12 layers, width 768, inputs up to 64 ids).
    pub fn paper() -> Self {
        Self {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            max_input_length: 64,
            feedforward_size: 3072,
            dropout: 0.1,
        }
    }

    pub fn desk() -> Self {
        Self {
            num_layers: 2,
            hidden_size: 128,
            num_heads: 4,
            max_input_length: 64,
            feedforward_size: 512,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "encoder hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_input_length < 2 {
            return Err(Error::InvalidConfig("encoder max_input_length must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("encoder dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-layer encoder outputs for one sequence. `layers[0]` is the embedding
/// output, `layers[n]` the final layer. Rows at padded positions are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub layers: Vec<Mat>,
    pub pad_mask: Vec<bool>,
}

impl HiddenStates {
    pub fn num_valid(&self) -> usize {
        self.pad_mask.iter().filter(|&&v| v).count()
    }

    pub fn last(&self) -> &Mat {
        self.layers.last().expect("hidden states have at least one layer")
    }

    /// Final-layer rows at valid positions.
    pub fn final_valid(&self) -> Mat {
        let n = self.num_valid();
        self.last().slice(ndarray::s![..n, ..]).to_owned()
    }
}

/// Pooled code representation, one value per hidden unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticVector(pub Vec<f64>);

impl SemanticVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Mean over non-pad positions of `h^0 + h^n`.
pub fn semantic_vector(states: &HiddenStates) -> Result<SemanticVector> {
    let first = states.layers.first().ok_or(Error::AllPadding)?;
    let last = states.last();
    let d = first.ncols();
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for (p, &valid) in states.pad_mask.iter().enumerate() {
        if !valid {
            continue;
        }
        count += 1;
        for (j, s) in sum.iter_mut().enumerate() {
            *s += first[[p, j]] + last[[p, j]];
        }
    }
    if count == 0 {
        return Err(Error::AllPadding);
    }
    Ok(SemanticVector(sum.into_iter().map(|s| s / count as f64).collect()))
}

#[derive(Debug, Clone)]
struct LayerIds {
    attn: AttentionParams,
    norm1: NormParams,
    ff: FeedForwardParams,
    norm2: NormParams,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    vocab_size: usize,
    params: ParamSet,
    embed: ParamId,
    layers: Vec<LayerIds>,
    positions: Mat,
}

/// Tape vars produced by a packed encoder pass.
pub struct EncodedBatch {
    /// `num_layers + 1` vars, each with one row per packed position.
    pub layers: Vec<Var>,
    /// `(start_row, len)` per input sequence.
    pub spans: Vec<(usize, usize)>,
}

impl EncodedBatch {
    pub fn output(&self) -> Var {
        *self.layers.last().unwrap()
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_size;
        let mut params = ParamSet::new();
        let a = (3.0 / d as f64).sqrt();
        let embed = params.add(
            "encoder.embed",
            Mat::from_shape_fn((vocab_size, d), |_| rand::Rng::random_range(&mut rng, -a..a)),
        );
        let layers = (0..config.num_layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                LayerIds {
                    attn: AttentionParams::new(&mut params, &format!("{p}.attn"), d, &mut rng),
                    norm1: NormParams::new(&mut params, &format!("{p}.norm1"), d),
                    ff: FeedForwardParams::new(&mut params, &format!("{p}.ff"), d, config.feedforward_size, &mut rng),
                    norm2: NormParams::new(&mut params, &format!("{p}.norm2"), d),
                }
            })
            .collect();
        Ok(Self {
            positions: layers::sinusoidal_positions(config.max_input_length, d),
            config,
            vocab_size,
            params,
            embed,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
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

    fn check(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_input_length {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_input_length,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(Error::UnknownTokenId {
                id,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Packed forward pass over unpadded sequences. Sequences must already be
    /// validated (see `encode`).
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, b: &Bound, seqs: &[&[u32]]) -> EncodedBatch {
        let spans = layers::offsets(seqs.iter().map(|s| s.len()));
        let segments: Vec<Segment> = spans
            .iter()
            .map(|&(start, len)| Segment {
                q_start: start,
                q_len: len,
                k_start: start,
                k_len: len,
            })
            .collect();
        let positions = tape.frozen(&self.positions);
        let h0 = layers::embed(tape, b.var(self.embed), positions, seqs);
        let dropout = self.config.dropout;
        let mut out = vec![h0];
        let mut x = tape.dropout(h0, dropout);
        for l in &self.layers {
            let a = l.attn.forward(tape, b, x, x, self.config.num_heads, segments.clone(), false);
            x = l.norm1.residual(tape, b, x, a, dropout);
            let f = l.ff.forward(tape, b, x, dropout);
            x = l.norm2.residual(tape, b, x, f, dropout);
            out.push(x);
        }
        EncodedBatch { layers: out, spans }
    }

    /// Encodes several sequences in evaluation mode. Trailing `PAD` ids are
    /// masked out and their rows left at zero.
    pub fn encode_many(&self, seqs: &[&TokenSequence]) -> Result<Vec<HiddenStates>> {
        for s in seqs {
            self.check(&s.ids)?;
        }
        let valid: Vec<&[u32]> = seqs.iter().map(|s| s.valid()).collect();
        let nonempty: Vec<&[u32]> = valid.iter().copied().filter(|v| !v.is_empty()).collect();
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let batch = if nonempty.is_empty() {
            None
        } else {
            Some(self.forward(&mut tape, &b, &nonempty))
        };
        let d = self.config.hidden_size;
        let mut next = 0;
        let mut out = Vec::with_capacity(seqs.len());
        for (s, v) in seqs.iter().zip(&valid) {
            let total = s.ids.len();
            let mut layers = vec![Mat::zeros((total, d)); self.config.num_layers + 1];
            if !v.is_empty() {
                let batch = batch.as_ref().unwrap();
                let (start, len) = batch.spans[next];
                next += 1;
                for (dst, &var) in layers.iter_mut().zip(&batch.layers) {
                    dst.slice_mut(ndarray::s![..len, ..])
                        .assign(&tape.value(var).slice(ndarray::s![start..start + len, ..]));
                }
            }
            let pad_mask = (0..total).map(|p| p < v.len() && s.ids[p] != PAD).collect();
            out.push(HiddenStates { layers, pad_mask });
        }
        Ok(out)
    }

    /// Hidden states of one sequence, deterministic in evaluation mode.
    pub fn encode(&self, tokens: &TokenSequence) -> Result<HiddenStates> {
        Ok(self.encode_many(&[tokens])?.pop().unwrap())
    }

    /// Semantic vectors for many sequences, computed in chunks.
    pub fn semantic_vectors(&self, seqs: &[&TokenSequence], chunk: usize) -> Result<Vec<SemanticVector>> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            for hs in self.encode_many(part)? {
                out.push(semantic_vector(&hs)?);
            }
        }
        Ok(out)
    }

    /// Final-layer states for many sequences (valid rows only).
    pub fn final_states(&self, seqs: &[&TokenSequence], chunk: usize) -> Result<Vec<Mat>> {
        let mut out = Vec::with_capacity(seqs.len());
        for part in seqs.chunks(chunk.max(1)) {
            for hs in self.encode_many(part)? {
                out.push(hs.final_valid());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS, EOS};

    fn micro() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden_size: 16,
            num_heads: 2,
            max_input_length: 8,
            feedforward_size: 32,
            dropout: 0.1,
        }
    }

    #[test]
    fn rejects_bad_head_split() {
        let cfg = EncoderConfig {
            num_heads: 3,
            ..micro()
        };
        assert!(matches!(Encoder::new(cfg, 10, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn shape_contract() {
        let enc = Encoder::new(micro(), 10, 0).unwrap();
        let hs = enc.encode(&TokenSequence::new(vec![BOS, 5, 6, EOS])).unwrap();
        assert_eq!(hs.layers.len(), 3);
        for l in &hs.layers {
            assert_eq!(l.dim(), (4, 16));
        }
        assert_eq!(hs.num_valid(), 4);
    }

    #[test]
    fn desk_and_full_size_widths() {
        assert_eq!(EncoderConfig::paper().hidden_size, 768);
        assert_eq!(EncoderConfig::paper().max_input_length, 64);
        let enc = Encoder::new(EncoderConfig::desk(), 20, 1).unwrap();
        let hs = enc.encode(&TokenSequence::new(vec![BOS, 4, EOS])).unwrap();
        assert!(hs.layers.iter().all(|l| l.ncols() == 128));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let enc = Encoder::new(micro(), 10, 3).unwrap();
        let seq = TokenSequence::new(vec![BOS, 7, 8, 9, EOS]);
        assert_eq!(enc.encode(&seq).unwrap(), enc.encode(&seq).unwrap());
    }

    #[test]
    fn errors() {
        let enc = Encoder::new(micro(), 10, 0).unwrap();
        let long = TokenSequence::new(vec![4; 9]);
        assert!(matches!(enc.encode(&long), Err(Error::SequenceTooLong { len: 9, max: 8 })));
        let bad = TokenSequence::new(vec![BOS, 10, EOS]);
        assert!(matches!(enc.encode(&bad), Err(Error::UnknownTokenId { id: 10, .. })));
        let pads = enc.encode(&TokenSequence::new(vec![PAD; 3])).unwrap();
        assert!(matches!(semantic_vector(&pads), Err(Error::AllPadding)));
    }

    #[test]
    fn pad_invariance() {
        let enc = Encoder::new(micro(), 10, 5).unwrap();
        let seq = TokenSequence::new(vec![BOS, 4, 5, EOS]);
        let a = semantic_vector(&enc.encode(&seq).unwrap()).unwrap();
        let b = semantic_vector(&enc.encode(&seq.padded(8)).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batched_matches_single() {
        let enc = Encoder::new(micro(), 10, 9).unwrap();
        let a = TokenSequence::new(vec![BOS, 4, 5, EOS]);
        let b = TokenSequence::new(vec![BOS, 6, EOS]);
        let both = enc.encode_many(&[&a, &b]).unwrap();
        let single = enc.encode(&b).unwrap();
        for (x, y) in both[1].layers.iter().zip(&single.layers) {
            let diff = (x - y).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(diff < 1e-12);
        }
    }

    fn states(h0: Vec<[f64; 2]>, hn: Vec<[f64; 2]>) -> HiddenStates {
        let to = |rows: Vec<[f64; 2]>| {
            Mat::from_shape_vec((rows.len(), 2), rows.into_iter().flatten().collect()).unwrap()
        };
        let n = h0.len();
        HiddenStates {
            layers: vec![to(h0), to(hn)],
            pad_mask: vec![true; n],
        }
    }

    #[test]
    fn pooling_by_hand() {
        let single = states(vec![[1.0, 2.0]], vec![[0.5, -1.0]]);
        assert_eq!(semantic_vector(&single).unwrap().0, vec![1.5, 1.0]);

        let cancel = states(vec![[1.0, -3.0], [2.0, 4.0]], vec![[-1.0, 3.0], [-2.0, -4.0]]);
        assert_eq!(semantic_vector(&cancel).unwrap().0, vec![0.0, 0.0]);

        let two = states(vec![[1.0, 0.0], [0.0, 1.0]], vec![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(semantic_vector(&two).unwrap().0, vec![1.0, 1.0]);
    }
}
