//! Two-stage training, the single-stage control, and ablation variants.

use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{align_pairs, FusionParams};
use crate::params::{AdamW, AdamWConfig, Bound};
use crate::pipeline::{Ablation, Dataset, Item, Model, Repository};
use crate::retrieval::retrieve;
use crate::tokenizer::{TokenSequence, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Stage1,
    Stage2,
    SingleStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Stop once teacher-forced accuracy on the training split reaches this
    /// value (checked after every epoch; stage 1 only).
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Stage1,
            epochs: 30,
            learning_rate: 2e-4,
            batch_size: 32,
            seed: 42,
            ablation: Ablation::None,
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { learning_rate: self.learning_rate, ..AdamWConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub ablation: Ablation,
    /// Mean per-token loss of each epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Teacher-forced training accuracy per epoch, when tracked.
    pub train_accuracy: Vec<f64>,
    /// Zero-based index of the epoch whose weights were kept.
    pub best_epoch: usize,
    pub index_rebuilds: usize,
    pub steps: u64,
    /// Tensors carrying optimizer state.
    pub optimized_tensors: usize,
    pub seconds: f64,
}

impl TrainReport {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            stage: cfg.stage,
            ablation: cfg.ablation,
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            train_accuracy: Vec::new(),
            best_epoch: 0,
            index_rebuilds: 0,
            steps: 0,
            optimized_tensors: 0,
            seconds: 0.0,
        }
    }

    /// Records an epoch and reports whether its validation loss is the best
    /// so far (ties keep the earlier epoch).
    fn push(&mut self, train: f64, val: f64) -> bool {
        let best = self.val_loss.iter().all(|&v| val < v);
        self.train_loss.push(train);
        self.val_loss.push(val);
        if best {
            self.best_epoch = self.val_loss.len() - 1;
        }
        best
    }
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, loss })
    }
}

fn label_count(targets: &[&[u32]]) -> usize {
    targets.iter().map(|t| t[1..].iter().filter(|&&y| y != PAD).count()).sum()
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Stacks the rows of `mats` picked by `which`, returning row spans.
fn stack(mats: &[Mat], which: &[usize], d: usize) -> (Mat, Vec<(usize, usize)>) {
    let total: usize = which.iter().map(|&i| mats[i].nrows()).sum();
    let mut out = Mat::zeros((total, d));
    let mut spans = Vec::with_capacity(which.len());
    let mut row = 0;
    for &i in which {
        let n = mats[i].nrows();
        out.slice_mut(ndarray::s![row..row + n, ..]).assign(&mats[i]);
        spans.push((row, n));
        row += n;
    }
    (out, spans)
}


/// Stage-1 result: the trained code encoder and its auxiliary decoder.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub encoder: Encoder,
    pub aux_decoder: Decoder,
    pub report: TrainReport,
}

fn seq2seq_loss<'p>(
    tape: &mut Tape<'p>,
    encoder: &'p Encoder,
    eb: &Bound,
    decoder: &'p Decoder,
    db: &Bound,
    items: &[&Item],
) -> (Var, Var) {
    let codes: Vec<&[u32]> = items.iter().map(|i| i.code_seq.valid()).collect();
    let targets: Vec<&[u32]> = items.iter().map(|i| i.comment_seq.valid()).collect();
    let enc = encoder.forward(tape, eb, &codes);
    decoder.loss(tape, db, enc.output(), &enc.spans, &targets)
}

/// Mean per-token loss of a plain encoder-decoder in evaluation mode.
pub fn seq2seq_eval_loss(encoder: &Encoder, decoder: &Decoder, items: &[Item], batch: usize) -> f64 {
    let (mut total, mut count) = (0.0, 0);
    for chunk in items.chunks(batch.max(1)) {
        let refs: Vec<&Item> = chunk.iter().collect();
        let mut tape = Tape::new();
        let eb = encoder.params().bind(&mut tape, false);
        let db = decoder.params().bind(&mut tape, false);
        let (l, _) = seq2seq_loss(&mut tape, encoder, &eb, decoder, &db, &refs);
        total += tape.scalar(l);
        count += label_count(&refs.iter().map(|i| i.comment_seq.valid()).collect::<Vec<_>>());
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Fraction of non-`PAD` target tokens predicted exactly under teacher
/// forcing, with the encoder output as decoder memory.
pub fn teacher_forced_accuracy(encoder: &Encoder, decoder: &Decoder, items: &[Item], batch: usize) -> f64 {
    let (mut hits, mut count) = (0usize, 0usize);
    for chunk in items.chunks(batch.max(1)) {
        let refs: Vec<&Item> = chunk.iter().collect();
        let mut tape = Tape::new();
        let eb = encoder.params().bind(&mut tape, false);
        let db = decoder.params().bind(&mut tape, false);
        let (_, logits) = seq2seq_loss(&mut tape, encoder, &eb, decoder, &db, &refs);
        let logits = tape.value(logits);
        let labels = refs.iter().flat_map(|i| i.comment_seq.valid()[1..].iter().copied());
        for (row, y) in logits.rows().into_iter().zip(labels) {
            if y == PAD {
                continue;
            }
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            hits += usize::from(best == y as usize);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        hits as f64 / count as f64
    }
}

/// Trains the encoder jointly with a scaffold decoder on code to comment.
/// The weights of the epoch with the lowest validation loss are kept
/// (training loss when there is no validation split).
pub fn train_stage1(data: &Dataset, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, cfg: &TrainConfig) -> Result<Stage1Output> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut encoder = Encoder::new(enc_cfg, data.code_vocab.len(), cfg.seed)?;
    let mut aux = Decoder::new(dec_cfg, data.comment_vocab.len(), "aux_decoder", cfg.seed.wrapping_add(1))?;
    let mut opt = AdamW::new(cfg.optimizer(), &[encoder.params(), aux.params()]);
    let mut report = TrainReport { stage: Stage::Stage1, ..TrainReport::new(cfg) };
    let mut best = (encoder.clone(), aux.clone());

    for epoch in 0..cfg.epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for batch in shuffled(data.train.len(), &mut rng).chunks(cfg.batch_size) {
            let items: Vec<&Item> = batch.iter().map(|&i| &data.train[i]).collect();
            let mut grads = {
                let mut tape = Tape::training(ChaCha8Rng::seed_from_u64(rng.random()));
                let eb = encoder.params().bind(&mut tape, true);
                let db = aux.params().bind(&mut tape, true);
                let (loss, _) = seq2seq_loss(&mut tape, &encoder, &eb, &aux, &db, &items);
                let l = tape.scalar(loss);
                check_finite(l, epoch)?;
                total += l;
                count += label_count(&items.iter().map(|i| i.comment_seq.valid()).collect::<Vec<_>>());
                let mut g = tape.backward(loss);
                vec![eb.collect(&mut g, encoder.params()), db.collect(&mut g, aux.params())]
            };
            opt.step(&mut [encoder.params_mut(), aux.params_mut()], &mut grads);
        }
        let train_loss = total / count.max(1) as f64;
        let val_loss = if data.valid.is_empty() {
            train_loss
        } else {
            seq2seq_eval_loss(&encoder, &aux, &data.valid, cfg.batch_size)
        };
        check_finite(val_loss, epoch)?;
        if report.push(train_loss, val_loss) {
            best = (encoder.clone(), aux.clone());
        }
        info!("stage1 epoch {} train {train_loss:.4} valid {val_loss:.4}", epoch + 1);
        if let Some(target) = cfg.stop_at_accuracy {
            let acc = teacher_forced_accuracy(&encoder, &aux, &data.train, cfg.batch_size);
            report.train_accuracy.push(acc);
            if acc >= target {
                best = (encoder.clone(), aux.clone());
                report.best_epoch = epoch;
                break;
            }
        }
    }
    let (mut encoder, mut aux) = best;
    encoder.params_mut().round_to_f32();
    aux.params_mut().round_to_f32();
    report.steps = opt.steps();
    report.optimized_tensors = opt.state_len();
    report.seconds = started.elapsed().as_secs_f64();
    Ok(Stage1Output { encoder, aux_decoder: aux, report })
}


/// Repository position of the exemplar for each item.
fn exemplars(encoder: &Encoder, repo: &Repository, items: &[Item], exclude_self: bool, model: &Model) -> Result<Vec<usize>> {
    let seqs: Vec<&TokenSequence> = items.iter().map(|i| &i.code_seq).collect();
    let vectors = encoder.semantic_vectors(&seqs, 64)?;
    items
        .iter()
        .zip(&vectors)
        .map(|(item, v)| {
            let exclude = exclude_self.then_some(item.id);
            let r = retrieve(
                &repo.index,
                &repo.code_tokens,
                &item.code_tokens,
                v,
                model.top_k,
                model.ablation.retrieval_mode(),
                exclude,
            )?;
            assert!(!exclude_self || r.sample_id != item.id, "sample {} retrieved itself", item.id);
            Ok(repo.index.position(r.sample_id).expect("retrieved id is indexed"))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn fused_decoder_loss<'p>(
    tape: &mut Tape<'p>,
    fusion: &'p FusionParams,
    fb: &Bound,
    decoder: &'p Decoder,
    db: &Bound,
    tar: (Var, &[(usize, usize)]),
    sim: (Var, &[(usize, usize)]),
    normalize: bool,
    targets: &[&[u32]],
) -> Var {
    let (t, s, spans) = align_pairs(tape, tar.0, tar.1, sim.0, sim.1, normalize);
    let g = fusion.forward(tape, fb, t, s);
    decoder.loss(tape, db, g, &spans, targets).0
}

/// Mean per-token loss of the fusion + decoder on fixed encoder states.
#[allow(clippy::too_many_arguments)]
fn frozen_eval_loss(
    fusion: &FusionParams,
    decoder: &Decoder,
    normalize: bool,
    states: &[Mat],
    repo_states: &[Mat],
    items: &[Item],
    pairs: &[usize],
    batch: usize,
) -> f64 {
    let d = fusion.d_model();
    let (mut total, mut count) = (0.0, 0);
    let idx: Vec<usize> = (0..items.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let targets: Vec<&[u32]> = chunk.iter().map(|&i| items[i].comment_seq.valid()).collect();
        let (tm, ts) = stack(states, chunk, d);
        let sims: Vec<usize> = chunk.iter().map(|&i| pairs[i]).collect();
        let (sm, ss) = stack(repo_states, &sims, d);
        let mut tape = Tape::new();
        let fb = fusion.params().bind(&mut tape, false);
        let db = decoder.params().bind(&mut tape, false);
        let (tv, sv) = (tape.constant(tm), tape.constant(sm));
        let l = fused_decoder_loss(&mut tape, fusion, &fb, decoder, &db, (tv, &ts), (sv, &ss), normalize, &targets);
        total += tape.scalar(l);
        count += label_count(&targets);
    }
    total / count.max(1) as f64
}

/// Result of stage 2 or single-stage training.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub model: Model,
    pub repository: Repository,
    pub report: TrainReport,
}

/// Trains fusion and decoder on top of a frozen stage-1 encoder. The index
/// is built once over the training split; every training sample is paired
/// with its best exemplar other than itself.
pub fn train_stage2(data: &Dataset, encoder: &Encoder, dec_cfg: DecoderConfig, cfg: &TrainConfig) -> Result<GeneratorOutput> {
    cfg.validate()?;
    if data.train.len() < 2 {
        return Err(Error::CorpusTooSmall(data.train.len()));
    }
    if encoder.vocab_size() != data.code_vocab.len() {
        return Err(Error::Checkpoint(format!(
            "encoder vocabulary size {} does not match dataset vocabulary size {}",
            encoder.vocab_size(),
            data.code_vocab.len()
        )));
    }
    let started = Instant::now();
    let mut report = TrainReport { stage: Stage::Stage2, ..TrainReport::new(cfg) };
    let mut model = Model::untrained(
        data.code_vocab.clone(),
        data.comment_vocab.clone(),
        encoder.clone(),
        dec_cfg,
        cfg.ablation,
        cfg.seed,
    )?;
    let repository = Repository::build(encoder, data.train.clone())?;
    report.index_rebuilds = 1;
    if !cfg.ablation.generates() {
        report.seconds = started.elapsed().as_secs_f64();
        return Ok(GeneratorOutput { model, repository, report });
    }

    let train_states = encoder.final_states(&data.train.iter().map(|i| &i.code_seq).collect::<Vec<_>>(), 64)?;
    let valid_states = encoder.final_states(&data.valid.iter().map(|i| &i.code_seq).collect::<Vec<_>>(), 64)?;
    let train_pairs = exemplars(encoder, &repository, &data.train, true, &model)?;
    let valid_pairs = exemplars(encoder, &repository, &data.valid, false, &model)?;
    // Repository rows follow training order.
    let repo_states = &train_states;

    let normalize = cfg.ablation.normalize();
    let d = encoder.config().hidden_size;
    let mut fusion = model.fusion.take().unwrap();
    let mut decoder = model.decoder.take().unwrap();
    let mut opt = AdamW::new(cfg.optimizer(), &[fusion.params(), decoder.params()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = (fusion.clone(), decoder.clone());

    for epoch in 0..cfg.epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for batch in shuffled(data.train.len(), &mut rng).chunks(cfg.batch_size) {
            let targets: Vec<&[u32]> = batch.iter().map(|&i| data.train[i].comment_seq.valid()).collect();
            let (tm, ts) = stack(&train_states, batch, d);
            let sims: Vec<usize> = batch.iter().map(|&i| train_pairs[i]).collect();
            let (sm, ss) = stack(repo_states, &sims, d);
            let mut grads = {
                let mut tape = Tape::training(ChaCha8Rng::seed_from_u64(rng.random()));
                let fb = fusion.params().bind(&mut tape, true);
                let db = decoder.params().bind(&mut tape, true);
                let (tv, sv) = (tape.constant(tm), tape.constant(sm));
                let loss = fused_decoder_loss(&mut tape, &fusion, &fb, &decoder, &db, (tv, &ts), (sv, &ss), normalize, &targets);
                let l = tape.scalar(loss);
                check_finite(l, epoch)?;
                total += l;
                count += label_count(&targets);
                let mut g = tape.backward(loss);
                vec![fb.collect(&mut g, fusion.params()), db.collect(&mut g, decoder.params())]
            };
            opt.step(&mut [fusion.params_mut(), decoder.params_mut()], &mut grads);
        }
        let train_loss = total / count.max(1) as f64;
        let val_loss = if data.valid.is_empty() {
            train_loss
        } else {
            frozen_eval_loss(&fusion, &decoder, normalize, &valid_states, repo_states, &data.valid, &valid_pairs, cfg.batch_size)
        };
        check_finite(val_loss, epoch)?;
        if report.push(train_loss, val_loss) {
            best = (fusion.clone(), decoder.clone());
        }
        info!("stage2 epoch {} train {train_loss:.4} valid {val_loss:.4}", epoch + 1);
    }
    let (mut fusion, mut decoder) = best;
    fusion.params_mut().round_to_f32();
    decoder.params_mut().round_to_f32();
    model.fusion = Some(fusion);
    model.decoder = Some(decoder);
    report.steps = opt.steps();
    report.optimized_tensors = opt.state_len();
    report.seconds = started.elapsed().as_secs_f64();
    Ok(GeneratorOutput { model, repository, report })
}

/// Trains encoder, fusion and decoder jointly from scratch, rebuilding the
/// index from the current encoder at the start of every epoch.
pub fn train_single_stage(data: &Dataset, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, cfg: &TrainConfig) -> Result<GeneratorOutput> {
    cfg.validate()?;
    if !cfg.ablation.generates() {
        return Err(Error::InvalidConfig("single-stage training needs a decoder".into()));
    }
    if data.train.len() < 2 {
        return Err(Error::CorpusTooSmall(data.train.len()));
    }
    let started = Instant::now();
    let mut report = TrainReport { stage: Stage::SingleStage, ..TrainReport::new(cfg) };
    let encoder = Encoder::new(enc_cfg, data.code_vocab.len(), cfg.seed)?;
    let mut model = Model::untrained(
        data.code_vocab.clone(),
        data.comment_vocab.clone(),
        encoder,
        dec_cfg,
        cfg.ablation,
        cfg.seed,
    )?;
    let normalize = cfg.ablation.normalize();
    let mut encoder = model.encoder.clone();
    let mut fusion = model.fusion.take().unwrap();
    let mut decoder = model.decoder.take().unwrap();
    let mut opt = AdamW::new(cfg.optimizer(), &[encoder.params(), fusion.params(), decoder.params()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = (encoder.clone(), fusion.clone(), decoder.clone());

    for epoch in 0..cfg.epochs {
        let repo = Repository::build(&encoder, data.train.clone())?;
        report.index_rebuilds += 1;
        model.encoder = encoder.clone();
        let train_pairs = exemplars(&encoder, &repo, &data.train, true, &model)?;
        let valid_pairs = exemplars(&encoder, &repo, &data.valid, false, &model)?;
        let (mut total, mut count) = (0.0, 0usize);
        for batch in shuffled(data.train.len(), &mut rng).chunks(cfg.batch_size) {
            let items: Vec<&Item> = batch.iter().map(|&i| &data.train[i]).collect();
            let sims: Vec<&Item> = batch.iter().map(|&i| &repo.items[train_pairs[i]]).collect();
            let mut grads = {
                let mut tape = Tape::training(ChaCha8Rng::seed_from_u64(rng.random()));
                let eb = encoder.params().bind(&mut tape, true);
                let fb = fusion.params().bind(&mut tape, true);
                let db = decoder.params().bind(&mut tape, true);
                let (loss, n) = joint_step(&mut tape, &encoder, &eb, &fusion, &fb, &decoder, &db, &items, &sims, normalize);
                let l = tape.scalar(loss);
                check_finite(l, epoch)?;
                total += l;
                count += n;
                let mut g = tape.backward(loss);
                vec![
                    eb.collect(&mut g, encoder.params()),
                    fb.collect(&mut g, fusion.params()),
                    db.collect(&mut g, decoder.params()),
                ]
            };
            opt.step(&mut [encoder.params_mut(), fusion.params_mut(), decoder.params_mut()], &mut grads);
        }
        let train_loss = total / count.max(1) as f64;
        let val_loss = if data.valid.is_empty() {
            train_loss
        } else {
            let (mut t, mut c) = (0.0, 0);
            let idx: Vec<usize> = (0..data.valid.len()).collect();
            for chunk in idx.chunks(cfg.batch_size) {
                let items: Vec<&Item> = chunk.iter().map(|&i| &data.valid[i]).collect();
                let sims: Vec<&Item> = chunk.iter().map(|&i| &repo.items[valid_pairs[i]]).collect();
                let mut tape = Tape::new();
                let eb = encoder.params().bind(&mut tape, false);
                let fb = fusion.params().bind(&mut tape, false);
                let db = decoder.params().bind(&mut tape, false);
                let (l, n) = joint_step(&mut tape, &encoder, &eb, &fusion, &fb, &decoder, &db, &items, &sims, normalize);
                t += tape.scalar(l);
                c += n;
            }
            t / c.max(1) as f64
        };
        check_finite(val_loss, epoch)?;
        if report.push(train_loss, val_loss) {
            best = (encoder.clone(), fusion.clone(), decoder.clone());
        }
        info!("single-stage epoch {} train {train_loss:.4} valid {val_loss:.4}", epoch + 1);
    }
    let (mut encoder, mut fusion, mut decoder) = best;
    for set in [encoder.params_mut(), fusion.params_mut(), decoder.params_mut()] {
        set.round_to_f32();
    }
    let repository = Repository::build(&encoder, data.train.clone())?;
    model.encoder = encoder;
    model.fusion = Some(fusion);
    model.decoder = Some(decoder);
    report.steps = opt.steps();
    report.optimized_tensors = opt.state_len();
    report.seconds = started.elapsed().as_secs_f64();
    Ok(GeneratorOutput { model, repository, report })
}

/// Encodes targets and exemplars in one packed pass, then fuses and decodes.
/// Returns the summed loss and the number of scored tokens.
#[allow(clippy::too_many_arguments)]
fn joint_step<'p>(
    tape: &mut Tape<'p>,
    encoder: &'p Encoder,
    eb: &Bound,
    fusion: &'p FusionParams,
    fb: &Bound,
    decoder: &'p Decoder,
    db: &Bound,
    items: &[&Item],
    sims: &[&Item],
    normalize: bool,
) -> (Var, usize) {
    let n = items.len();
    let codes: Vec<&[u32]> = items.iter().chain(sims).map(|i| i.code_seq.valid()).collect();
    let targets: Vec<&[u32]> = items.iter().map(|i| i.comment_seq.valid()).collect();
    let enc = encoder.forward(tape, eb, &codes);
    let out = enc.output();
    let loss = fused_decoder_loss(tape, fusion, fb, decoder, db, (out, &enc.spans[..n]), (out, &enc.spans[n..]), normalize, &targets);
    (loss, label_count(&targets))
}
