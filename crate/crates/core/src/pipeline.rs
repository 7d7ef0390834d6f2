//! Tokenized datasets, the exemplar repository, and the assembled
//! generator: encode, retrieve, normalize, fuse, decode.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape};
use crate::checkpoint::{Checkpoint, CheckpointHeader, CheckpointKind, FORMAT_VERSION};
use crate::corpus::{Corpus, Sample, Split};
use crate::decoder::{beam_search, Decoder, DecoderConfig, DecoderStep};
use crate::encoder::{semantic_vector, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{align_pairs, FusionKind, FusionParams};
use crate::metrics::{score_tokens, ScoreReport};
use crate::retrieval::{build_index, retrieve, CodeIndex, RetrievalMode, RetrievalResult, DEFAULT_TOP_K};
use crate::tokenizer::{surface_tokens, tokenize, TokenSequence, Vocabulary};

pub const MODEL_FILE: &str = "model.ckpt";
pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const CODE_VOCAB_FILE: &str = "code_vocab.json";
pub const COMMENT_VOCAB_FILE: &str = "comment_vocab.json";
pub const INDEX_FILE: &str = "index.bin";
pub const REPOSITORY_FILE: &str = "repository.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-size configuration: 12-layer 768-wide encoder, 6-layer decoder.
    Paper,
    /// Small configuration for a single CPU core.
    #[default]
    Desk,
}

impl Profile {
    pub fn encoder(self) -> EncoderConfig {
        match self {
            Profile::Paper => EncoderConfig::paper(),
            Profile::Desk => EncoderConfig::desk(),
        }
    }

    pub fn decoder(self) -> DecoderConfig {
        match self {
            Profile::Paper => DecoderConfig::paper(),
            Profile::Desk => DecoderConfig::desk(),
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::InvalidArgument(format!("unknown profile {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    WithNngen,
    ReverseRetrieve,
    NoNormalization,
    SimpleFusion,
    NoNmt,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::WithNngen,
        Ablation::ReverseRetrieve,
        Ablation::NoNormalization,
        Ablation::SimpleFusion,
        Ablation::NoNmt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::WithNngen => "with_nngen",
            Ablation::ReverseRetrieve => "reverse_retrieve",
            Ablation::NoNormalization => "no_normalization",
            Ablation::SimpleFusion => "simple_fusion",
            Ablation::NoNmt => "no_nmt",
        }
    }

    pub fn retrieval_mode(self) -> RetrievalMode {
        match self {
            Ablation::WithNngen => RetrievalMode::NnGen,
            Ablation::ReverseRetrieve => RetrievalMode::Reverse,
            _ => RetrievalMode::Standard,
        }
    }

    pub fn normalize(self) -> bool {
        self != Ablation::NoNormalization
    }

    pub fn fusion_kind(self) -> FusionKind {
        if self == Ablation::SimpleFusion {
            FusionKind::Simple
        } else {
            FusionKind::ThreeBranch
        }
    }

    /// Whether a decoder generates the comment (otherwise the exemplar's
    /// comment is returned verbatim).
    pub fn generates(self) -> bool {
        self != Ablation::NoNmt
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation {s:?}")))
    }
}

/// A sample with its tokenized forms.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: u32,
    pub code: String,
    pub comment: String,
    pub code_tokens: Vec<String>,
    pub code_seq: TokenSequence,
    pub comment_seq: TokenSequence,
}

fn comment_surface(comment: &str) -> Vec<String> {
    surface_tokens(&comment.to_lowercase())
}

impl Item {
    pub fn new(sample: &Sample, code_vocab: &Vocabulary, comment_vocab: &Vocabulary, max_in: usize, max_out: usize) -> Self {
        Self {
            id: sample.id,
            code: sample.code.clone(),
            comment: sample.comment.clone(),
            code_tokens: surface_tokens(&sample.code),
            code_seq: tokenize(&sample.code, code_vocab, max_in),
            comment_seq: tokenize(&sample.comment.to_lowercase(), comment_vocab, max_out),
        }
    }

    /// Lowercased reference tokens for scoring.
    pub fn reference_tokens(&self) -> Vec<String> {
        score_tokens(&comment_surface(&self.comment).join(" "))
    }
}

/// A split corpus tokenized with vocabularies built from its training part.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub code_vocab: Vocabulary,
    pub comment_vocab: Vocabulary,
    pub train: Vec<Item>,
    pub valid: Vec<Item>,
    pub test: Vec<Item>,
}

impl Dataset {
    pub fn new(corpus: &Corpus, max_in: usize, max_out: usize) -> Result<Self> {
        if !corpus.is_split() {
            return Err(Error::InvalidArgument("corpus has no split labels".into()));
        }
        let train = corpus.part(Split::Train);
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let code_vocab = Vocabulary::build(train.iter().map(|s| surface_tokens(&s.code)));
        let comment_vocab = Vocabulary::build(train.iter().map(|s| comment_surface(&s.comment)));
        let items = |split| -> Vec<Item> {
            corpus
                .part(split)
                .into_iter()
                .map(|s| Item::new(s, &code_vocab, &comment_vocab, max_in, max_out))
                .collect()
        };
        Ok(Self {
            train: items(Split::Train),
            valid: items(Split::Valid),
            test: items(Split::Test),
            code_vocab,
            comment_vocab,
        })
    }
}

/// Indexed exemplars: code tokens, comments and semantic vectors.
#[derive(Debug, Clone)]
pub struct Repository {
    pub items: Vec<Item>,
    pub code_tokens: Vec<Vec<String>>,
    pub index: CodeIndex,
}

#[derive(Serialize, Deserialize)]
struct RepositoryRecord {
    id: u32,
    code: String,
    comment: String,
}

impl Repository {
    pub fn build(encoder: &Encoder, items: Vec<Item>) -> Result<Self> {
        let seqs: Vec<&TokenSequence> = items.iter().map(|i| &i.code_seq).collect();
        let vectors = encoder.semantic_vectors(&seqs, 64)?;
        let entries: Vec<_> = items.iter().map(|i| i.id).zip(vectors).collect();
        let index = build_index(&entries)?;
        let code_tokens = items.iter().map(|i| i.code_tokens.clone()).collect();
        Ok(Self { items, code_tokens, index })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, sample_id: u32) -> Option<&Item> {
        self.index.position(sample_id).map(|p| &self.items[p])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.index.save(&dir.join(INDEX_FILE))?;
        let path = dir.join(REPOSITORY_FILE);
        let mut out = String::new();
        for i in &self.items {
            let rec = RepositoryRecord { id: i.id, code: i.code.clone(), comment: i.comment.clone() };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))
    }

    /// Loads a saved repository, re-tokenizing its samples with `model`'s
    /// vocabularies.
    pub fn load(dir: &Path, model: &Model) -> Result<Self> {
        let index = CodeIndex::load(&dir.join(INDEX_FILE))?;
        let path = dir.join(REPOSITORY_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let rec: RepositoryRecord = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                path: path.clone(),
                line: n + 1,
                reason: e.to_string(),
            })?;
            let sample = Sample { id: rec.id, code: rec.code, comment: rec.comment };
            items.push(model.item(&sample));
        }
        if items.len() != index.len() || items.iter().zip(index.sample_ids()).any(|(i, &id)| i.id != id) {
            return Err(Error::Checkpoint("repository records do not match the index".into()));
        }
        let code_tokens = items.iter().map(|i| i.code_tokens.clone()).collect();
        Ok(Self { items, code_tokens, index })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub comment: String,
    pub similar_code: String,
    pub similar_comment: String,
    pub semantic_distance: f64,
    pub lexical_sim: f64,
    pub token_logprobs: Vec<f64>,
}

/// Everything needed to turn a Bash command into a comment.
#[derive(Debug, Clone)]
pub struct Model {
    pub code_vocab: Vocabulary,
    pub comment_vocab: Vocabulary,
    pub encoder: Encoder,
    /// Absent for the retrieval-only configuration.
    pub fusion: Option<FusionParams>,
    pub decoder: Option<Decoder>,
    pub ablation: Ablation,
    pub top_k: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelSettings {
    ablation: Ablation,
    top_k: usize,
}

impl Model {
    /// A freshly initialized generator around `encoder`.
    pub fn untrained(
        code_vocab: Vocabulary,
        comment_vocab: Vocabulary,
        encoder: Encoder,
        decoder_config: DecoderConfig,
        ablation: Ablation,
        seed: u64,
    ) -> Result<Self> {
        let d = encoder.config().hidden_size;
        if decoder_config.hidden_size != d {
            return Err(Error::InvalidConfig(format!(
                "decoder width {} differs from encoder width {d}",
                decoder_config.hidden_size
            )));
        }
        let (fusion, decoder) = if ablation.generates() {
            (
                Some(FusionParams::new(ablation.fusion_kind(), d, seed.wrapping_add(2))),
                Some(Decoder::new(decoder_config, comment_vocab.len(), "decoder", seed.wrapping_add(1))?),
            )
        } else {
            (None, None)
        };
        Ok(Self { code_vocab, comment_vocab, encoder, fusion, decoder, ablation, top_k: DEFAULT_TOP_K })
    }

    pub fn max_output_length(&self) -> usize {
        self.decoder.as_ref().map_or(32, |d| d.config().max_output_length)
    }

    pub fn item(&self, sample: &Sample) -> Item {
        Item::new(
            sample,
            &self.code_vocab,
            &self.comment_vocab,
            self.encoder.config().max_input_length,
            self.max_output_length(),
        )
    }

    /// Exemplar for a tokenized code.
    pub fn retrieve(&self, repo: &Repository, code_tokens: &[String], code_seq: &TokenSequence, exclude: Option<u32>) -> Result<RetrievalResult> {
        if code_tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let states = self.encoder.encode(code_seq)?;
        let v = semantic_vector(&states)?;
        retrieve(
            &repo.index,
            &repo.code_tokens,
            code_tokens,
            &v,
            self.top_k,
            self.ablation.retrieval_mode(),
            exclude,
        )
    }

    /// Fused memory rows for one target/exemplar pair of final states.
    pub fn fused_memory(&self, tar: &Mat, sim: &Mat) -> Result<Mat> {
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("retrieval-only model has no fusion layer".into()))?;
        let mut tape = Tape::new();
        let b = fusion.params().bind(&mut tape, false);
        let t = tape.constant(tar.clone());
        let s = tape.constant(sim.clone());
        let (tv, sv, _) = align_pairs(&mut tape, t, &[(0, tar.nrows())], s, &[(0, sim.nrows())], self.ablation.normalize());
        let g = fusion.forward(&mut tape, &b, tv, sv);
        Ok(tape.value(g).clone())
    }

    pub fn generate(&self, repo: &Repository, code: &str, beam_size: usize, exclude: Option<u32>) -> Result<GenerationResult> {
        let sample = Sample { id: u32::MAX, code: code.to_string(), comment: String::new() };
        let item = self.item(&sample);
        self.generate_item(repo, &item, beam_size, exclude)
    }

    pub fn generate_item(&self, repo: &Repository, item: &Item, beam_size: usize, exclude: Option<u32>) -> Result<GenerationResult> {
        let r = self.retrieve(repo, &item.code_tokens, &item.code_seq, exclude)?;
        let sim = repo.item(r.sample_id).expect("retrieved id is indexed");
        let (comment, token_logprobs) = match &self.decoder {
            None => (sim.comment.clone(), Vec::new()),
            Some(decoder) => {
                let states = self.encoder.final_states(&[&item.code_seq, &sim.code_seq], 2)?;
                let g = self.fused_memory(&states[0], &states[1])?;
                let step = DecoderStep { decoder, memory: &g };
                let h = beam_search(&step, beam_size, decoder.config().max_output_length);
                (self.comment_vocab.decode(&h.tokens).join(" "), h.token_log_probs)
            }
        };
        Ok(GenerationResult {
            comment,
            similar_code: sim.code.clone(),
            similar_comment: sim.comment.clone(),
            semantic_distance: r.semantic_distance,
            lexical_sim: r.lexical_sim,
            token_logprobs,
        })
    }

    fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Generator,
            encoder: *self.encoder.config(),
            decoder: self.decoder.as_ref().map(|d| *d.config()),
            fusion: self.fusion.as_ref().map(FusionParams::kind),
            code_vocab_hash: self.code_vocab.hash(),
            comment_vocab_hash: self.comment_vocab.hash(),
            settings: serde_json::to_value(ModelSettings { ablation: self.ablation, top_k: self.top_k })
                .expect("settings serialize"),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut sets = vec![self.encoder.params()];
        sets.extend(self.fusion.as_ref().map(FusionParams::params));
        sets.extend(self.decoder.as_ref().map(Decoder::params));
        Checkpoint::new(self.header(), &sets)
    }

    /// Writes the checkpoint and both vocabularies into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.code_vocab.save(&dir.join(CODE_VOCAB_FILE))?;
        self.comment_vocab.save(&dir.join(COMMENT_VOCAB_FILE))?;
        self.checkpoint().save(&dir.join(MODEL_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let code_vocab = Vocabulary::load(&dir.join(CODE_VOCAB_FILE))?;
        let comment_vocab = Vocabulary::load(&dir.join(COMMENT_VOCAB_FILE))?;
        let ck = Checkpoint::load(&dir.join(MODEL_FILE))?;
        Self::from_checkpoint(&ck, code_vocab, comment_vocab)
    }

    pub fn from_checkpoint(ck: &Checkpoint, code_vocab: Vocabulary, comment_vocab: Vocabulary) -> Result<Self> {
        let h = &ck.header;
        if h.kind != CheckpointKind::Generator {
            return Err(Error::Checkpoint("expected a generator checkpoint".into()));
        }
        if h.code_vocab_hash != code_vocab.hash() || h.comment_vocab_hash != comment_vocab.hash() {
            return Err(Error::Checkpoint("vocabulary does not match checkpoint".into()));
        }
        let settings: ModelSettings = serde_json::from_value(h.settings.clone())?;
        let mut encoder = Encoder::new(h.encoder, code_vocab.len(), 0)?;
        ck.restore(encoder.params_mut())?;
        let (fusion, decoder) = match (h.fusion, h.decoder) {
            (Some(kind), Some(cfg)) => {
                let mut f = FusionParams::new(kind, h.encoder.hidden_size, 0);
                ck.restore(f.params_mut())?;
                let mut d = Decoder::new(cfg, comment_vocab.len(), "decoder", 0)?;
                ck.restore(d.params_mut())?;
                (Some(f), Some(d))
            }
            (None, None) => (None, None),
            _ => return Err(Error::Checkpoint("fusion and decoder must be stored together".into())),
        };
        Ok(Self { code_vocab, comment_vocab, encoder, fusion, decoder, ablation: settings.ablation, top_k: settings.top_k })
    }
}

/// Writes a stage-1 encoder checkpoint and both vocabularies into `dir`.
pub fn save_encoder(dir: &Path, encoder: &Encoder, code_vocab: &Vocabulary, comment_vocab: &Vocabulary) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    code_vocab.save(&dir.join(CODE_VOCAB_FILE))?;
    comment_vocab.save(&dir.join(COMMENT_VOCAB_FILE))?;
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Encoder,
        encoder: *encoder.config(),
        decoder: None,
        fusion: None,
        code_vocab_hash: code_vocab.hash(),
        comment_vocab_hash: comment_vocab.hash(),
        settings: serde_json::Value::Null,
    };
    Checkpoint::new(header, &[encoder.params()]).save(&dir.join(ENCODER_FILE))
}

/// Loads a stage-1 encoder, checking it was trained with `code_vocab`.
pub fn load_encoder(dir: &Path, code_vocab: &Vocabulary) -> Result<Encoder> {
    let ck = Checkpoint::load(&dir.join(ENCODER_FILE))?;
    let h = &ck.header;
    if h.kind != CheckpointKind::Encoder {
        return Err(Error::Checkpoint("expected an encoder checkpoint".into()));
    }
    if h.code_vocab_hash != code_vocab.hash() {
        return Err(Error::Checkpoint("code vocabulary does not match the encoder checkpoint".into()));
    }
    let mut encoder = Encoder::new(h.encoder, code_vocab.len(), 0)?;
    ck.restore(encoder.params_mut())?;
    Ok(encoder)
}

/// Scores and predictions over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scores: ScoreReport,
    pub predictions: Vec<String>,
}

/// Generates a comment for each item and scores it against the reference.
pub fn evaluate(model: &Model, repo: &Repository, items: &[Item], beam_size: usize) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mut predictions = Vec::with_capacity(items.len());
    let mut cands = Vec::with_capacity(items.len());
    let mut refs = Vec::with_capacity(items.len());
    for item in items {
        let g = model.generate_item(repo, item, beam_size, Some(item.id))?;
        cands.push(score_tokens(&comment_surface(&g.comment).join(" ")));
        refs.push(item.reference_tokens());
        predictions.push(g.comment);
    }
    Ok(Evaluation { scores: ScoreReport::compute(&cands, &refs)?, predictions })
}
