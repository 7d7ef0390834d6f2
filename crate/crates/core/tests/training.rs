mod common;

use bashcomment_core::corpus::split_corpus;
use bashcomment_core::decoder::DecoderConfig;
use bashcomment_core::encoder::EncoderConfig;
use bashcomment_core::pipeline::{evaluate, load_encoder, save_encoder, Ablation, Dataset, Model, Repository};
use bashcomment_core::synth::synthetic_corpus;
use common::check_stats_fixture;
use bashcomment_core::trainer::{
    train_single_stage, train_stage1, train_stage2, Stage, TrainConfig, TrainReport,
};

fn small_configs() -> (EncoderConfig, DecoderConfig) {
    let mut enc = EncoderConfig::desk();
    enc.hidden_size = 32;
    enc.num_layers = 1;
    enc.num_heads = 2;
    enc.feedforward_size = 64;
    let mut dec = DecoderConfig::desk();
    dec.hidden_size = 32;
    dec.num_layers = 1;
    dec.num_heads = 2;
    dec.feedforward_size = 64;
    (enc, dec)
}

fn dataset(n: usize, seed: u64) -> Dataset {
    let corpus = split_corpus(synthetic_corpus(n, seed), seed).unwrap();
    Dataset::new(&corpus, 64, 32).unwrap()
}

fn cfg(stage: Stage, epochs: usize) -> TrainConfig {
    TrainConfig { stage, epochs, batch_size: 16, seed: 9, ..TrainConfig::default() }
}

fn without_time(mut r: TrainReport) -> TrainReport {
    r.seconds = 0.0;
    r
}

#[test]
fn first_epoch_loss_is_near_uniform() {
    let data = dataset(120, 1);
    let ln_v = (data.comment_vocab.len() as f64).ln();
    let (enc, dec) = small_configs();
    let s1 = train_stage1(&data, enc, dec, &cfg(Stage::Stage1, 1)).unwrap();
    let l = s1.report.train_loss[0];
    assert!((l - ln_v).abs() <= 0.2 * ln_v, "stage 1 loss {l} vs ln|V| {ln_v}");

    let s2 = train_stage2(&data, &s1.encoder, dec, &cfg(Stage::Stage2, 1)).unwrap();
    let l = s2.report.train_loss[0];
    assert!((l - ln_v).abs() <= 0.2 * ln_v, "stage 2 loss {l} vs ln|V| {ln_v}");
}

#[test]
fn stage2_freezes_the_encoder() {
    let data = dataset(80, 2);
    let (enc, dec) = small_configs();
    let s1 = train_stage1(&data, enc, dec, &cfg(Stage::Stage1, 2)).unwrap();
    let before = s1.encoder.params().clone();
    let out = train_stage2(&data, &s1.encoder, dec, &cfg(Stage::Stage2, 2)).unwrap();
    assert_eq!(out.model.encoder.params(), &before);
    assert_eq!(s1.encoder.params(), &before);
    let trainable = out.model.fusion.as_ref().unwrap().params().len() + out.model.decoder.as_ref().unwrap().params().len();
    assert_eq!(out.report.optimized_tensors, trainable);
    assert_eq!(out.report.index_rebuilds, 1);
    assert_eq!(s1.report.optimized_tensors, s1.encoder.params().len() + s1.aux_decoder.params().len());
}

#[test]
fn training_is_bit_reproducible() {
    let data = dataset(80, 3);
    let (enc, dec) = small_configs();
    let run = || {
        let s1 = train_stage1(&data, enc, dec, &cfg(Stage::Stage1, 2)).unwrap();
        let out = train_stage2(&data, &s1.encoder, dec, &cfg(Stage::Stage2, 2)).unwrap();
        let eval = evaluate(&out.model, &out.repository, &data.test, 3).unwrap();
        let gen = out.model.generate(&out.repository, "find . -name \"*.txt\"", 4, None).unwrap();
        (
            without_time(s1.report),
            without_time(out.report),
            out.model.checkpoint().to_bytes().unwrap(),
            eval,
            gen,
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn different_seeds_give_different_weights() {
    let data = dataset(60, 4);
    let (enc, dec) = small_configs();
    let a = train_stage1(&data, enc, dec, &cfg(Stage::Stage1, 1)).unwrap();
    let b = train_stage1(&data, enc, dec, &TrainConfig { seed: 10, ..cfg(Stage::Stage1, 1) }).unwrap();
    assert_ne!(a.encoder.params(), b.encoder.params());
}

#[test]
fn best_epoch_has_lowest_validation_loss() {
    let data = dataset(80, 5);
    let (enc, dec) = small_configs();
    let r = train_stage1(&data, enc, dec, &cfg(Stage::Stage1, 4)).unwrap().report;
    assert_eq!(r.val_loss.len(), 4);
    assert!(r.train_loss.iter().chain(&r.val_loss).all(|l| l.is_finite()));
    let min = r.val_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(r.val_loss[r.best_epoch], min);
    assert!(r.val_loss[..r.best_epoch].iter().all(|&v| v > min));
}

#[test]
fn no_nmt_skips_training_and_returns_the_exemplar() {
    let data = dataset(60, 6);
    let (enc, dec) = small_configs();
    let s1 = train_stage1(&data, enc, dec, &cfg(Stage::Stage1, 1)).unwrap();
    let out = train_stage2(&data, &s1.encoder, dec, &TrainConfig { ablation: Ablation::NoNmt, ..cfg(Stage::Stage2, 3) }).unwrap();
    assert!(out.model.decoder.is_none() && out.model.fusion.is_none());
    assert_eq!(out.report.steps, 0);
    assert!(out.report.train_loss.is_empty());
    for item in &data.test {
        let g = out.model.generate_item(&out.repository, item, 10, None).unwrap();
        assert_eq!(g.comment, g.similar_comment);
        assert!(!g.comment.is_empty());
    }
}

#[test]
fn every_ablation_trains_and_generates() {
    let data = dataset(60, 7);
    let (enc, dec) = small_configs();
    let s1 = train_stage1(&data, enc, dec, &cfg(Stage::Stage1, 1)).unwrap();
    for ablation in Ablation::ALL {
        let out = train_stage2(&data, &s1.encoder, dec, &TrainConfig { ablation, ..cfg(Stage::Stage2, 1) }).unwrap();
        let g = out.model.generate_item(&out.repository, &data.test[0], 3, None).unwrap();
        assert!(!g.comment.is_empty(), "{ablation:?}");
        assert!((0.0..=1.0).contains(&g.lexical_sim));
    }
}

#[test]
fn single_stage_rebuilds_the_index_each_epoch() {
    let data = dataset(60, 8);
    let (enc, dec) = small_configs();
    let out = train_single_stage(&data, enc, dec, &cfg(Stage::SingleStage, 3)).unwrap();
    assert_eq!(out.report.index_rebuilds, 3);
    assert_eq!(out.report.train_loss.len(), 3);
    let eval = evaluate(&out.model, &out.repository, &data.test, 3).unwrap();
    assert_eq!(eval.predictions.len(), data.test.len());
    assert!(train_single_stage(&data, enc, dec, &TrainConfig { ablation: Ablation::NoNmt, ..cfg(Stage::SingleStage, 1) }).is_err());
}

#[test]
fn invalid_configs_and_tiny_corpora_are_rejected() {
    let data = dataset(60, 9);
    let (enc, dec) = small_configs();
    for bad in [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
        TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
    ] {
        assert!(train_stage1(&data, enc, dec, &bad).is_err());
    }
    let mut tiny = data.clone();
    tiny.train.truncate(1);
    let s1 = train_stage1(&data, enc, dec, &cfg(Stage::Stage1, 1)).unwrap();
    assert!(train_stage2(&tiny, &s1.encoder, dec, &cfg(Stage::Stage2, 1)).is_err());
}

#[test]
fn stage2_rejects_an_encoder_from_another_vocabulary() {
    let a = dataset(60, 10);
    let b = dataset(200, 11);
    let (enc, dec) = small_configs();
    let s1 = train_stage1(&a, enc, dec, &cfg(Stage::Stage1, 1)).unwrap();
    assert!(train_stage2(&b, &s1.encoder, dec, &cfg(Stage::Stage2, 1)).is_err());
}

#[test]
fn saved_models_reload_identically() {
    let data = dataset(60, 12);
    let (enc, dec) = small_configs();
    let s1 = train_stage1(&data, enc, dec, &cfg(Stage::Stage1, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_encoder(dir.path(), &s1.encoder, &data.code_vocab, &data.comment_vocab).unwrap();
    let encoder = load_encoder(dir.path(), &data.code_vocab).unwrap();
    assert_eq!(encoder.params(), s1.encoder.params());
    assert!(load_encoder(dir.path(), &dataset(200, 13).code_vocab).is_err());

    let out = train_stage2(&data, &encoder, dec, &cfg(Stage::Stage2, 1)).unwrap();
    out.model.save(dir.path()).unwrap();
    out.repository.save(dir.path()).unwrap();
    let model = Model::load(dir.path()).unwrap();
    let repo = Repository::load(dir.path(), &model).unwrap();
    assert_eq!(model.checkpoint(), out.model.checkpoint());
    for item in data.test.iter().take(4) {
        assert_eq!(
            model.generate(&repo, &item.code, 5, None).unwrap(),
            out.model.generate(&out.repository, &item.code, 5, None).unwrap()
        );
    }
}

#[test]
fn corpus_stats_match_hand_counts() {
    for seed in 0..40 {
        check_stats_fixture(seed).unwrap();
    }
}
