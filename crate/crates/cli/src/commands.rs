//! Subcommand definitions and their implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bashcomment_core::corpus::{compute_stats, load_corpus, split_corpus, Corpus, Split};
use bashcomment_core::metrics::ScoreReport;
use bashcomment_core::pipeline::{
    evaluate, load_encoder, save_encoder, Ablation, Dataset, Item, Model, Profile, Repository,
};
use bashcomment_core::retrieval::semantic_topk;
use bashcomment_core::synth::synthetic_corpus;
use bashcomment_core::trainer::{train_single_stage, train_stage1, train_stage2, Stage, TrainConfig, TrainReport};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::config::{GlobalFlags, Settings};
use crate::error::CliError;
use crate::service::{self, ServiceState};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Debug, Parser)]
#[command(name = "bashcomment", version, about = "Retrieval-augmented Bash code comment generation")]
pub struct Cli {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Model size preset: `paper` or `desk`.
    #[arg(long, global = true, value_parser = parse_profile)]
    pub profile: Option<Profile>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: bashcomment_core::Error| e.to_string())
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: bashcomment_core::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Stage1,
    Stage2,
    Single,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Stage1 => Stage::Stage1,
            StageArg::Stage2 => Stage::Stage2,
            StageArg::Single => Stage::SingleStage,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelDirArg {
    /// Model directory (defaults to $BASHEXPLAINER_MODEL_DIR, then the
    /// config file, then `model`).
    #[arg(long)]
    pub model_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic corpus as JSON lines.
    Synth {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load, deduplicate and split a corpus, and compute length statistics.
    Prepare {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train stage 1, stage 2 or the single-stage control.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Directory written by `prepare`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model_dir: ModelDirArg,
        #[arg(long, default_value = "none", value_parser = parse_ablation)]
        ablation: Ablation,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the trained model on the test split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model_dir: ModelDirArg,
        #[arg(long)]
        beam_size: Option<usize>,
        /// Print the score report as JSON only.
        #[arg(long)]
        json: bool,
    },
    /// Generate a comment for one piece of Bash code.
    Generate {
        #[arg(long)]
        code: String,
        #[command(flatten)]
        model_dir: ModelDirArg,
        #[arg(long)]
        beam_size: Option<usize>,
    },
    /// Show the semantic top-k neighbours and the selected exemplar.
    Retrieve {
        #[arg(long)]
        code: String,
        #[command(flatten)]
        model_dir: ModelDirArg,
        #[arg(long, default_value_t = bashcomment_core::retrieval::DEFAULT_TOP_K)]
        k: usize,
    },
    /// Train and score the full configuration and its five ablations on top
    /// of the stage-1 encoder.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model_dir: ModelDirArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        beam_size: Option<usize>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[command(flatten)]
        model_dir: ModelDirArg,
    },
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn load_split(data: &Path) -> Result<Corpus, CliError> {
    let corpus = load_corpus(&data.join(CORPUS_FILE))?;
    if !corpus.is_split() {
        return Err(CliError::Usage(format!("{} has no split labels; run `prepare` first", data.display())));
    }
    Ok(corpus)
}

fn dataset(settings: &Settings, data: &Path) -> Result<Dataset, CliError> {
    let corpus = load_split(data)?;
    Ok(Dataset::new(&corpus, settings.encoder.max_input_length, settings.decoder.max_output_length)?)
}

fn items(model: &Model, corpus: &Corpus, split: Split) -> Vec<Item> {
    corpus.part(split).into_iter().map(|s| model.item(s)).collect()
}

fn train_config(settings: &Settings, stage: Stage, ablation: Ablation, epochs: Option<usize>) -> TrainConfig {
    TrainConfig { stage, ablation, epochs: epochs.unwrap_or(settings.train.epochs), ..settings.train }
}

fn report_file(stage: Stage) -> &'static str {
    match stage {
        Stage::Stage1 => "stage1_report.json",
        Stage::Stage2 => "stage2_report.json",
        Stage::SingleStage => "single_stage_report.json",
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

const SCORE_HEADER: &str = "BLEU-1  BLEU-2  BLEU-3  BLEU-4  METEOR  ROUGE-L";

fn score_row(s: &ScoreReport) -> String {
    s.as_array().iter().map(|v| format!("{:>6.2}", v * 100.0)).collect::<Vec<_>>().join("  ")
}

const SCORE_NOTE: &str = "scores in %; BLEU is corpus-level, METEOR and ROUGE-L are sentence means";

/// Text table with one row per named score report.
pub fn score_table(rows: &[(String, ScoreReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:width$}  {SCORE_HEADER}\n", "Model");
    for (name, s) in rows {
        let _ = writeln!(out, "{name:width$}  {}", score_row(s));
    }
    out.push_str(SCORE_NOTE);
    out.push('\n');
    out
}

#[derive(Serialize)]
struct AblationRow {
    ablation: Ablation,
    scores: ScoreReport,
    report: TrainReport,
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let flags = GlobalFlags { config: cli.config, seed: cli.seed, profile: cli.profile };
    let settings = Settings::resolve(&flags)?;
    match cli.command {
        Command::Synth { n, out } => {
            let corpus = synthetic_corpus(n, settings.seed);
            let mut buf = Vec::new();
            corpus.write_jsonl(&mut buf, None).map_err(|e| CliError::io(&out, e))?;
            write_file(&out, buf)?;
            info!("wrote {} samples to {}", corpus.len(), out.display());
            Ok(())
        }
        Command::Prepare { input, out } => {
            let corpus = split_corpus(load_corpus(&input)?, settings.seed)?;
            let stats = compute_stats(&corpus)?;
            create_dir(&out)?;
            let mut all = Vec::new();
            corpus.write_jsonl(&mut all, None).map_err(|e| CliError::io(&out, e))?;
            write_file(&out.join(CORPUS_FILE), all)?;
            for split in Split::ALL {
                let mut buf = Vec::new();
                corpus.write_jsonl(&mut buf, Some(split)).map_err(|e| CliError::io(&out, e))?;
                write_file(&out.join(format!("{split}.jsonl")), buf)?;
            }
            write_json(&out.join(STATS_FILE), &stats)?;
            print_json(&stats)
        }
        Command::Train { stage, data, model_dir, ablation, epochs } => {
            let dir = settings.model_dir(model_dir.model_dir.as_deref());
            let data = dataset(&settings, &data)?;
            let stage = Stage::from(stage);
            let cfg = train_config(&settings, stage, ablation, epochs);
            create_dir(&dir)?;
            let report = match stage {
                Stage::Stage1 => {
                    let out = train_stage1(&data, settings.encoder, settings.decoder, &cfg)?;
                    save_encoder(&dir, &out.encoder, &data.code_vocab, &data.comment_vocab)?;
                    out.report
                }
                Stage::Stage2 => {
                    let encoder = load_encoder(&dir, &data.code_vocab)?;
                    let out = train_stage2(&data, &encoder, settings.decoder, &cfg)?;
                    out.model.save(&dir)?;
                    out.repository.save(&dir)?;
                    out.report
                }
                Stage::SingleStage => {
                    let out = train_single_stage(&data, settings.encoder, settings.decoder, &cfg)?;
                    out.model.save(&dir)?;
                    out.repository.save(&dir)?;
                    out.report
                }
            };
            write_json(&dir.join(report_file(stage)), &report)?;
            print_json(&report)
        }
        Command::Evaluate { data, model_dir, beam_size, json } => {
            let dir = settings.model_dir(model_dir.model_dir.as_deref());
            let corpus = load_split(&data)?;
            let model = Model::load(&dir)?;
            let repo = Repository::load(&dir, &model)?;
            let test = items(&model, &corpus, Split::Test);
            let eval = evaluate(&model, &repo, &test, beam_size.unwrap_or(settings.beam_size))?;
            write_json(&dir.join(EVALUATION_FILE), &eval)?;
            if json {
                print_json(&eval.scores)
            } else {
                print!("{}", score_table(&[(model.ablation.name().to_string(), eval.scores)]));
                Ok(())
            }
        }
        Command::Generate { code, model_dir, beam_size } => {
            let dir = settings.model_dir(model_dir.model_dir.as_deref());
            if code.trim().is_empty() {
                return Err(CliError::Usage("--code must not be empty".into()));
            }
            let model = Model::load(&dir)?;
            let repo = Repository::load(&dir, &model)?;
            let result = model.generate(&repo, &code, beam_size.unwrap_or(settings.beam_size), None)?;
            print_json(&result)
        }
        Command::Retrieve { code, model_dir, k } => {
            let dir = settings.model_dir(model_dir.model_dir.as_deref());
            if code.trim().is_empty() {
                return Err(CliError::Usage("--code must not be empty".into()));
            }
            let model = Model::load(&dir)?;
            let repo = Repository::load(&dir, &model)?;
            let sample = bashcomment_core::corpus::Sample { id: u32::MAX, code, comment: String::new() };
            let item = model.item(&sample);
            let vector = model.encoder.semantic_vectors(&[&item.code_seq], 1)?.remove(0);
            let top: Vec<_> = semantic_topk(&repo.index, &vector, k, None)?
                .into_iter()
                .map(|r| {
                    let i = repo.item(r.sample_id).expect("indexed id");
                    serde_json::json!({
                        "sample_id": r.sample_id,
                        "semantic_distance": r.semantic_distance,
                        "code": i.code,
                        "comment": i.comment,
                    })
                })
                .collect();
            let selected = model.retrieve(&repo, &item.code_tokens, &item.code_seq, None)?;
            print_json(&serde_json::json!({ "top_k": top, "selected": selected, "mode": model.ablation.retrieval_mode() }))
        }
        Command::Ablate { data, model_dir, epochs, beam_size } => {
            let dir = settings.model_dir(model_dir.model_dir.as_deref());
            let corpus = load_split(&data)?;
            let data = Dataset::new(&corpus, settings.encoder.max_input_length, settings.decoder.max_output_length)?;
            let encoder = load_encoder(&dir, &data.code_vocab)?;
            let beam = beam_size.unwrap_or(settings.beam_size);
            let mut rows = Vec::new();
            for ablation in Ablation::ALL {
                info!("ablation {}", ablation.name());
                let cfg = train_config(&settings, Stage::Stage2, ablation, epochs);
                let out = train_stage2(&data, &encoder, settings.decoder, &cfg)?;
                let eval = evaluate(&out.model, &out.repository, &data.test, beam)?;
                rows.push(AblationRow { ablation, scores: eval.scores, report: out.report });
            }
            write_json(&dir.join(ABLATION_FILE), &rows)?;
            let named: Vec<_> = rows
                .iter()
                .map(|r| {
                    let name = match r.ablation {
                        Ablation::None => "full".to_string(),
                        a => a.name().to_string(),
                    };
                    (name, r.scores)
                })
                .collect();
            print!("{}", score_table(&named));
            Ok(())
        }
        Command::Serve { port, model_dir } => {
            let dir = settings.model_dir(model_dir.model_dir.as_deref());
            let state = Arc::new(ServiceState::from_dir(&dir, settings.beam_size));
            let port = port.unwrap_or(settings.port);
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime { kind: "io", message: e.to_string() })?;
            rt.block_on(service::serve(state, port))
                .map_err(|e| CliError::Runtime { kind: "io", message: format!("port {port}: {e}") })
        }
    }
}
