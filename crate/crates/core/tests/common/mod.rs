//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use bashcomment_core::autograd::{Mat, Tape};
use bashcomment_core::corpus::{compute_stats, Corpus};
use bashcomment_core::decoder::{Decoder, DecoderConfig, StepModel};
use bashcomment_core::encoder::{Encoder, EncoderConfig};
use bashcomment_core::fusion::{align_pairs, FusionKind, FusionParams};
use bashcomment_core::params::ParamSet;
use bashcomment_core::retrieval::{CodeIndex, RetrievalMode, RetrievalResult};
use bashcomment_core::tokenizer::EOS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- strings

/// Edit distance by memoized recursion over suffixes.
pub fn levenshtein_memo<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn lcs_memo<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize, alphabet: usize) -> Vec<String> {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| format!("t{}", rng.random_range(0..alphabet))).collect()
}

/// METEOR chunk count by enumerating every maximum exact matching.
pub fn meteor_chunks_brute(cand: &[String], reference: &[String]) -> (usize, usize) {
    fn go(
        i: usize,
        cand: &[String],
        reference: &[String],
        used: &mut Vec<bool>,
        links: &mut Vec<Option<usize>>,
        best: &mut (usize, usize),
    ) {
        if i == cand.len() {
            let m = links.iter().flatten().count();
            let mut chunks = 0;
            let mut prev: Option<usize> = None;
            for l in links.iter() {
                match (prev, l) {
                    (Some(p), Some(j)) if p + 1 == *j => {}
                    (_, Some(_)) => chunks += 1,
                    _ => {}
                }
                prev = *l;
            }
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        links.push(None);
        go(i + 1, cand, reference, used, links, best);
        links.pop();
        for j in 0..reference.len() {
            if !used[j] && reference[j] == cand[i] {
                used[j] = true;
                links.push(Some(j));
                go(i + 1, cand, reference, used, links, best);
                links.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0);
    go(0, cand, reference, &mut vec![false; reference.len()], &mut Vec::new(), &mut best);
    best
}

// -------------------------------------------------------------- retrieval

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Smoothed sentence BLEU-4 written out directly from n-gram lists.
fn bleu4_smoothed(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut log = 0.0;
    for n in 1..=4 {
        let grams = |s: &[String]| -> Vec<Vec<String>> {
            if s.len() < n {
                vec![]
            } else {
                (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
            }
        };
        let cg = grams(c);
        let mut rg = grams(r);
        let mut matched = 0;
        for g in &cg {
            if let Some(pos) = rg.iter().position(|x| x == g) {
                rg.remove(pos);
                matched += 1;
            }
        }
        let p = if matched == 0 {
            1.0 / (cg.len() as f64 + 1.0)
        } else {
            matched as f64 / cg.len() as f64
        };
        log += p.ln();
    }
    let bp = if c.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * (log / 4.0).exp()
}

fn lex(a: &[String], b: &[String]) -> f64 {
    1.0 - levenshtein_memo(a, b) as f64 / a.len().max(b.len()) as f64
}

/// Exhaustive-scan retrieval: full sorts with explicit tie keys.
pub fn retrieve_brute(
    index: &CodeIndex,
    codes: &[Vec<String>],
    query_code: &[String],
    query: &[f64],
    k: usize,
    mode: RetrievalMode,
    exclude: Option<u32>,
) -> RetrievalResult {
    let q: Vec<f32> = query.iter().map(|&x| x as f32).collect();
    type Entry<'a> = (u32, &'a [f32], &'a Vec<String>);
    let entries: Vec<Entry> = (0..index.len())
        .map(|p| (index.sample_ids()[p], index.vector(p), &codes[p]))
        .filter(|e| Some(e.0) != exclude)
        .collect();
    // Sort by key descending (negate for ascending), then by id.
    let top = |key: &dyn Fn(&Entry) -> f64| {
        let mut v = entries.clone();
        v.sort_by(|a, b| key(b).partial_cmp(&key(a)).unwrap().then(a.0.cmp(&b.0)));
        v.truncate(k);
        v
    };
    let chosen = match mode {
        RetrievalMode::Standard => {
            let cands = top(&|e| -dist(e.1, &q));
            let mut best = cands[0];
            for c in &cands[1..] {
                let (lc, lb) = (lex(query_code, c.2), lex(query_code, best.2));
                if lc > lb || (lc == lb && c.0 < best.0) {
                    best = *c;
                }
            }
            best
        }
        RetrievalMode::Reverse => {
            let cands = top(&|e| lex(query_code, e.2));
            let mut best = cands[0];
            for c in &cands[1..] {
                let (dc, db) = (dist(c.1, &q), dist(best.1, &q));
                if dc < db || (dc == db && c.0 < best.0) {
                    best = *c;
                }
            }
            best
        }
        RetrievalMode::NnGen => {
            let cands = top(&|e| cos(e.1, &q));
            let mut best = cands[0];
            for c in &cands[1..] {
                let (sc, sb) = (bleu4_smoothed(query_code, c.2), bleu4_smoothed(query_code, best.2));
                if sc > sb || (sc == sb && c.0 < best.0) {
                    best = *c;
                }
            }
            best
        }
    };
    RetrievalResult {
        sample_id: chosen.0,
        semantic_distance: dist(chosen.1, &q),
        lexical_sim: lex(query_code, chosen.2),
    }
}

// ------------------------------------------------------------------- beam

/// A toy next-token model whose distribution is a seeded function of the
/// whole prefix. Logits are small integers so score ties are common.
pub struct ToyModel {
    pub vocab: usize,
    pub seed: u64,
}

impl ToyModel {
    pub fn dist(&self, prefix: &[u32]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(0..3) as f64).collect();
        let z = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - z).collect()
    }
}

impl StepModel for ToyModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn log_probs(&self, prefixes: &[Vec<u32>]) -> Vec<Vec<f64>> {
        prefixes.iter().map(|p| self.dist(p)).collect()
    }
}

/// Best complete sequence over all continuations of `BOS` with at most
/// `steps` generated tokens: either ending in `EOS` or hitting the limit.
/// Ties go to the lexicographically smaller id sequence.
pub fn exhaustive_best(model: &ToyModel, steps: usize) -> (Vec<u32>, f64) {
    fn go(model: &ToyModel, prefix: &mut Vec<u32>, score: f64, left: usize, best: &mut Option<(Vec<u32>, f64)>) {
        let done = prefix.last() == Some(&EOS) && prefix.len() > 1;
        if done || left == 0 {
            let better = match best {
                None => true,
                Some((t, s)) => score > *s || (score == *s && prefix.as_slice() < t.as_slice()),
            };
            if better {
                *best = Some((prefix.clone(), score));
            }
            return;
        }
        let d = model.dist(prefix);
        for (tok, &lp) in d.iter().enumerate() {
            prefix.push(tok as u32);
            go(model, prefix, score + lp, left - 1, best);
            prefix.pop();
        }
    }
    let mut best = None;
    go(model, &mut vec![bashcomment_core::tokenizer::BOS], 0.0, steps, &mut best);
    best.unwrap()
}

// --------------------------------------------------------------- gradients

pub fn micro_encoder() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden_size: 8,
        num_heads: 2,
        max_input_length: 8,
        feedforward_size: 16,
        dropout: 0.1,
    }
}

pub fn micro_decoder() -> DecoderConfig {
    DecoderConfig {
        num_layers: 2,
        hidden_size: 8,
        num_heads: 2,
        max_output_length: 8,
        beam_size: 2,
        feedforward_size: 16,
        dropout: 0.1,
    }
}

/// What the composite loss routes through.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Route {
    /// Encoder output feeds the decoder directly.
    Seq2Seq,
    /// Target and exemplar encodings are aligned, optionally normalized,
    /// fused, then decoded.
    Fused { kind: FusionKind, normalize: bool },
}

pub struct Composite {
    pub encoder: Encoder,
    pub fusion: Option<FusionParams>,
    pub decoder: Decoder,
    pub route: Route,
    pub codes: Vec<Vec<u32>>,
    pub exemplars: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
}

impl Composite {
    pub fn new(route: Route, seed: u64) -> Self {
        Self::sized(route, seed, micro_encoder(), micro_decoder())
    }

    pub fn sized(route: Route, seed: u64, enc: EncoderConfig, dec: DecoderConfig) -> Self {
        let (vc, vt) = (11, 9);
        let d = enc.hidden_size;
        let encoder = Encoder::new(enc, vc, seed).unwrap();
        let decoder = Decoder::new(dec, vt, "decoder", seed + 1).unwrap();
        let fusion = match route {
            Route::Seq2Seq => None,
            Route::Fused { kind, .. } => Some(FusionParams::new(kind, d, seed + 2)),
        };
        Self {
            encoder,
            fusion,
            decoder,
            route,
            codes: vec![vec![1, 5, 7, 4, 2], vec![1, 9, 10, 2]],
            exemplars: vec![vec![1, 5, 6, 2], vec![1, 8, 10, 3, 6, 2]],
            targets: vec![vec![1, 4, 5, 6, 2], vec![1, 7, 3, 2, 0]],
        }
    }

    /// Loss and, on request, one gradient list per parameter set.
    pub fn eval(&self, with_grads: bool) -> (f64, Vec<Vec<Mat>>) {
        let mut tape = Tape::new();
        let eb = self.encoder.params().bind(&mut tape, true);
        let fb = self.fusion.as_ref().map(|f| f.params().bind(&mut tape, true));
        let db = self.decoder.params().bind(&mut tape, true);
        let mut inputs: Vec<&[u32]> = self.codes.iter().map(Vec::as_slice).collect();
        if matches!(self.route, Route::Fused { .. }) {
            inputs.extend(self.exemplars.iter().map(Vec::as_slice));
        }
        let enc = self.encoder.forward(&mut tape, &eb, &inputs);
        let n = self.codes.len();
        let (memory, spans) = match self.route {
            Route::Seq2Seq => (enc.output(), enc.spans.clone()),
            Route::Fused { normalize, .. } => {
                let out = enc.output();
                let (t, s, spans) = align_pairs(&mut tape, out, &enc.spans[..n], out, &enc.spans[n..], normalize);
                let f = self.fusion.as_ref().unwrap();
                (f.forward(&mut tape, fb.as_ref().unwrap(), t, s), spans)
            }
        };
        let targets: Vec<&[u32]> = self.targets.iter().map(Vec::as_slice).collect();
        let (loss, _) = self.decoder.loss(&mut tape, &db, memory, &spans, &targets);
        let value = tape.scalar(loss);
        if !with_grads {
            return (value, Vec::new());
        }
        let mut grads = tape.backward(loss);
        let mut out = vec![eb.collect(&mut grads, self.encoder.params())];
        if let (Some(fb), Some(f)) = (&fb, &self.fusion) {
            out.push(fb.collect(&mut grads, f.params()));
        }
        out.push(db.collect(&mut grads, self.decoder.params()));
        (value, out)
    }

    fn set_mut(&mut self, i: usize) -> &mut ParamSet {
        match (i, self.fusion.is_some()) {
            (0, _) => self.encoder.params_mut(),
            (1, true) => self.fusion.as_mut().unwrap().params_mut(),
            _ => self.decoder.params_mut(),
        }
    }

    pub fn num_sets(&self) -> usize {
        2 + usize::from(self.fusion.is_some())
    }
}

/// Relative error `|a - n| / (|a| + |n|)` between analytic and central
/// finite-difference gradients, per parameter set.
#[allow(clippy::needless_range_loop)]
pub fn gradcheck(model: &mut Composite, h: f64) -> Vec<(String, f64)> {
    let (_, analytic) = model.eval(true);
    let mut report = Vec::new();
    for s in 0..model.num_sets() {
        let shapes: Vec<(String, usize)> = model
            .set_mut(s)
            .iter()
            .map(|p| (p.name.clone(), p.value.len()))
            .collect();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (t, (_, len)) in shapes.iter().enumerate() {
            for e in 0..*len {
                let orig = model.set_mut(s).iter().nth(t).unwrap().value.as_slice().unwrap()[e];
                let at = |v: f64, m: &mut Composite| {
                    m.set_mut(s).iter_mut().nth(t).unwrap().value.as_slice_mut().unwrap()[e] = v;
                    m.eval(false).0
                };
                let plus = at(orig + h, model);
                let minus = at(orig - h, model);
                at(orig, model);
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[s][t].as_slice().unwrap()[e];
                diff += (a - numeric).powi(2);
                na += a * a;
                nn += numeric * numeric;
            }
        }
        let name = shapes[0].0.split('.').next().unwrap().to_string();
        report.push((name, diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-300)));
    }
    report
}

// ------------------------------------------------------------------ stats

/// Words with their hand-counted token counts under the surface tokenizer.
const WORDS: &[(&str, usize)] = &[
    ("ls", 1),
    ("-la", 1),
    ("\"*.php\"", 3),
    ("dir;", 2),
    ("(a)", 3),
    ("file.", 2),
    ("a/b.txt", 1),
    ("'x'", 3),
];

fn naive_stats(lengths: &[usize]) -> (f64, usize, f64, [f64; 3]) {
    let n = lengths.len();
    let average = lengths.iter().sum::<usize>() as f64 / n as f64;
    let max = *lengths.iter().max().unwrap();
    let mut mode = 0;
    let mut best = 0;
    for l in 0..=max {
        let c = lengths.iter().filter(|&&x| x == l).count();
        if c > best {
            best = c;
            mode = l;
        }
    }
    let mut s = lengths.to_vec();
    s.sort();
    let median = if n % 2 == 1 { s[n / 2] as f64 } else { (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0 };
    let cdf = [16, 32, 48].map(|t| lengths.iter().filter(|&&x| x < t).count() as f64 / n as f64);
    (average, mode, median, cdf)
}

/// Builds a random corpus of up to 100 samples from `WORDS` and compares
/// `compute_stats` with the hand counts.
pub fn check_stats_fixture(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=100);
    let mut pairs = Vec::new();
    let mut code_lens = Vec::new();
    let mut comment_lens = Vec::new();
    for i in 0..n {
        let text = |rng: &mut ChaCha8Rng, lens: &mut Vec<usize>, max: usize| {
            let words = rng.random_range(1..=max);
            let mut parts = vec![format!("u{seed}x{i}")];
            let mut count = 1;
            for _ in 1..words {
                let (w, c) = WORDS[rng.random_range(0..WORDS.len())];
                parts.push(w.to_string());
                count += c;
            }
            lens.push(count);
            parts.join(if rng.random_bool(0.5) { " " } else { "  " })
        };
        let code = text(&mut rng, &mut code_lens, 20);
        let comment = text(&mut rng, &mut comment_lens, 12);
        pairs.push((code, comment));
    }
    let corpus = Corpus::from_pairs(pairs);
    let stats = compute_stats(&corpus).map_err(|e| e.to_string())?;
    if corpus.len() != n || stats.samples != n {
        return Err(format!("seed {seed}: sample count {} != {n}", stats.samples));
    }
    for (got, lens) in [(&stats.code, &code_lens), (&stats.comment, &comment_lens)] {
        let (average, mode, median, cdf) = naive_stats(lens);
        let ok = (got.average - average).abs() < 1e-12
            && got.mode == mode
            && got.median == median
            && [got.cdf16, got.cdf32, got.cdf48] == cdf;
        if !ok {
            return Err(format!("seed {seed}: {got:?} vs hand counts ({average}, {mode}, {median}, {cdf:?})"));
        }
    }
    Ok(())
}
