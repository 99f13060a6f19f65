//! Command-line entry point: data generation, training, evaluation,
//! prediction, gradient checking, ablation sweeps, and corpus statistics.
//!
//! Flag precedence: command-line flags override config-file values, which
//! override built-in defaults.  All randomness flows from the single
//! `--seed`; submodules derive child seeds deterministically, so re-running
//! any subcommand with identical inputs reproduces identical artifacts.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dst_core::data::{load_corpus, load_ontology, pair_counts, save_corpus, save_ontology, Ontology};
use dst_core::encoder::Ablation;
use dst_core::gradcheck::gradient_check;
use dst_core::metrics::{evaluate, EvalReport, DEFAULT_BUCKET_EDGES};
use dst_core::model::{Model, ModelConfig};
use dst_core::synth::{generate_synthetic, SyntheticConfig};
use dst_core::tracker::{track_dialogue_records, PredictOptions};
use dst_core::train::{child_seed, train, TrainConfig};
use dst_core::vocab::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "dst", version, about = "Dialogue state tracker toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded synthetic ontology and train/dev/test splits.
    GenData(GenDataArgs),
    /// Train a tracker and write a checkpoint plus a run log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Dump per-turn predictions for a corpus as JSON lines.
    Predict(PredictArgs),
    /// Validate reverse-mode gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Train every ablation configuration over a list of seeds.
    Ablate(AblateArgs),
    /// Report slot-value frequency statistics for a corpus.
    Stats(StatsArgs),
}

/// Optional config file sections; anything absent falls back to defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    train: Option<TrainConfig>,
    data: Option<SyntheticConfig>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config file {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config file {}", p.display()))
        }
    }
}

fn require_exists(paths: &[(&str, &Path)]) -> Result<()> {
    for (what, p) in paths {
        if !p.exists() {
            bail!("{what} path does not exist: {}", p.display());
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON config file with a "data" section (SyntheticConfig fields).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for ontology.json and the three splits.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let mut config = file.data.unwrap_or_default();
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let (ontology, train_c, dev_c, test_c) = generate_synthetic(&config)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    save_ontology(&args.out.join("ontology.json"), &ontology)?;
    save_corpus(&args.out.join("train.json"), &train_c)?;
    save_corpus(&args.out.join("dev.json"), &dev_c)?;
    save_corpus(&args.out.join("test.json"), &test_c)?;
    println!(
        "wrote ontology + {}/{}/{} train/dev/test dialogues to {}",
        train_c.dialogues.len(),
        dev_c.dialogues.len(),
        test_c.dialogues.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file with a "train" section (TrainConfig fields).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ontology: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Optional pretrained embedding file(s); freezes the embedding table.
    #[arg(long)]
    embeddings: Vec<PathBuf>,
    /// Where to write the trained model.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write the run log (JSON); omit to skip.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ablation mode; overrides the config file.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Decision threshold; overrides the config file.
    #[arg(long)]
    threshold: Option<f64>,
}

fn merged_train_config(
    file: &FileConfig,
    seed: Option<u64>,
    ablation: Option<Ablation>,
    threshold: Option<f64>,
) -> TrainConfig {
    let mut config = file.train.clone().unwrap_or_default();
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(a) = ablation {
        config.ablation = a;
    }
    if let Some(t) = threshold {
        config.threshold = t;
    }
    config
}

fn load_pretrained(
    paths: &[PathBuf],
) -> Result<Option<Vec<dst_core::embedding::PretrainedTable>>> {
    if paths.is_empty() {
        return Ok(None);
    }
    let tables = paths
        .iter()
        .map(|p| dst_core::embedding::load_embedding_file(p).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(tables))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    require_exists(&[
        ("ontology", &args.ontology),
        ("train", &args.train),
        ("dev", &args.dev),
    ])?;
    for p in &args.embeddings {
        require_exists(&[("embeddings", p)])?;
    }
    let file = load_file_config(args.config.as_deref())?;
    let config = merged_train_config(&file, args.seed, args.ablation, args.threshold);
    let ontology = load_ontology(&args.ontology)?;
    let train_c = load_corpus(&args.train, &ontology)?;
    let dev_c = load_corpus(&args.dev, &ontology)?;
    let pretrained = load_pretrained(&args.embeddings)?;

    let (model, report) = train(&train_c, &dev_c, &ontology, &config, pretrained.as_deref())?;
    model.save(&args.checkpoint)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    println!(
        "best epoch {} dev joint goal {:.4} ({} epochs run, {:.1}s)",
        report.best_epoch,
        report.best_dev_joint_goal,
        report.epochs.len(),
        report.wall_clock_secs
    );
    println!("checkpoint written to {}", args.checkpoint.display());
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to evaluate.
    #[arg(long)]
    test: PathBuf,
    /// Training split used for frequency-bucketed F1; omit to bucket
    /// every pair as unseen.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Where to write the evaluation report (JSON); omit to skip.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    require_exists(&[("checkpoint", &args.checkpoint), ("test", &args.test)])?;
    if let Some(t) = &args.train {
        require_exists(&[("train", t)])?;
    }
    let model = Model::load(&args.checkpoint)?;
    let corpus = load_corpus(&args.test, &model.ontology)?;
    let counts = match &args.train {
        Some(t) => pair_counts(&load_corpus(t, &model.ontology)?),
        None => BTreeMap::new(),
    };
    let options = PredictOptions {
        threshold: args.threshold.unwrap_or(0.5),
        ..Default::default()
    };
    let report = evaluate(&model, &corpus, &options, &counts, &DEFAULT_BUCKET_EDGES)?;
    print!("{}", render_headline(&report));
    print!("{}", report.render());
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(())
}

/// Headline accuracy table: one row, joint goal and turn request percent.
fn render_headline(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str("              joint goal   turn request\n");
    s.push_str(&format!(
        "this tracker      {:5.1}%         {:5.1}%\n",
        100.0 * report.joint_goal_accuracy,
        100.0 * report.turn_request_accuracy
    ));
    s
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus to run the tracker over.
    #[arg(long)]
    test: PathBuf,
    /// Output JSONL file: one record per turn.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    require_exists(&[("checkpoint", &args.checkpoint), ("test", &args.test)])?;
    let model = Model::load(&args.checkpoint)?;
    let corpus = load_corpus(&args.test, &model.ontology)?;
    let options = PredictOptions {
        threshold: args.threshold.unwrap_or(0.5),
        ..Default::default()
    };
    let mut lines = String::new();
    for (d, dialogue) in corpus.dialogues.iter().enumerate() {
        for record in track_dialogue_records(&model, dialogue, &options)? {
            #[derive(Serialize)]
            struct Row<'a> {
                dialogue: usize,
                #[serde(flatten)]
                record: &'a dst_core::tracker::TurnRecord,
            }
            lines.push_str(&serde_json::to_string(&Row { dialogue: d, record: &record })?);
            lines.push('\n');
        }
    }
    std::fs::write(&args.out, lines)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} turn records to {}", corpus.num_turns(), args.out.display());
    Ok(())
}

#[derive(Args)]
struct GradCheckArgs {
    /// Seed for the random tiny-model initialization.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Ablation mode to check.
    #[arg(long, default_value_t = Ablation::Full)]
    ablation: Ablation,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

/// The built-in gradient-check fixture: 2 slots x 2 values, d_emb=4,
/// hidden size 3 per direction, a 2-token utterance and one system action
/// plus the sentinel.
fn gradcheck_fixture(seed: u64, ablation: Ablation) -> Result<(Model, dst_core::data::Turn)> {
    let mut informable = indexmap::IndexMap::new();
    informable.insert("food".to_string(), vec!["french".to_string(), "thai".to_string()]);
    informable.insert("area".to_string(), vec!["south".to_string(), "north".to_string()]);
    let ontology = Ontology { informable, requestable: vec![] };
    let tokens: Vec<String> = "french thai south north food area = ( ) request please"
        .split(' ')
        .map(String::from)
        .collect();
    let vocab = Vocabulary::build(std::iter::once(tokens.as_slice()), 1)?;
    let config = ModelConfig { d_emb: 4, d_rnn: 6, ablation, frozen_embeddings: false };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(ontology, vocab, config, &mut rng, None)?;
    let turn = dst_core::data::Turn {
        system_acts: vec![vec!["request".into(), "(".into(), "area".into(), ")".into()]],
        transcript: "french please".into(),
        asr: None,
        turn_label: vec![("food".into(), "french".into())],
    };
    Ok((model, turn))
}

fn cmd_grad_check(args: &GradCheckArgs) -> Result<()> {
    let (mut model, turn) = gradcheck_fixture(args.seed, args.ablation)?;
    let report = gradient_check(&mut model, &turn, args.step)?;
    println!(
        "checked {} entries; max relative error {:.3e} at {}",
        report.entries_checked, report.max_rel_error, report.worst_param
    );
    if report.max_rel_error > 1e-4 {
        bail!("gradient check failed: {:.3e} > 1e-4", report.max_rel_error);
    }
    Ok(())
}

#[derive(Args)]
struct AblateArgs {
    /// JSON config file with a "train" section (TrainConfig fields).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; run i uses the i-th derived child seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds per ablation mode.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    ontology: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Output directory for the comparison table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct AblateCell {
    ablation: String,
    seed: u64,
    dev_joint_goal: f64,
    dev_turn_request: f64,
    best_epoch: usize,
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    require_exists(&[
        ("ontology", &args.ontology),
        ("train", &args.train),
        ("dev", &args.dev),
    ])?;
    if args.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let file = load_file_config(args.config.as_deref())?;
    let base = merged_train_config(&file, args.seed, None, None);
    let ontology = load_ontology(&args.ontology)?;
    let train_c = load_corpus(&args.train, &ontology)?;
    let dev_c = load_corpus(&args.dev, &ontology)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let modes = [
        Ablation::Full,
        Ablation::NoGlobal,
        Ablation::NoLocal,
        Ablation::NoSelfAttn,
        Ablation::NoLstm,
    ];
    let mut cells = Vec::new();
    for mode in modes {
        for i in 0..args.seeds {
            let mut config = base.clone();
            config.ablation = mode;
            config.seed = child_seed(base.seed, i);
            let (_, report) = train(&train_c, &dev_c, &ontology, &config, None)?;
            let last = report
                .epochs
                .get(report.best_epoch.saturating_sub(1))
                .context("empty training report")?;
            println!(
                "{mode} seed {i}: dev joint goal {:.4}, request {:.4} (epoch {})",
                last.dev_joint_goal, last.dev_turn_request, report.best_epoch
            );
            cells.push(AblateCell {
                ablation: mode.to_string(),
                seed: i,
                dev_joint_goal: last.dev_joint_goal,
                dev_turn_request: last.dev_turn_request,
                best_epoch: report.best_epoch,
            });
        }
    }
    write_json(&args.out.join("ablation.json"), &cells)?;

    let mut table = String::from("ablation      mean joint goal   mean turn request\n");
    for mode in modes {
        let rows: Vec<&AblateCell> =
            cells.iter().filter(|c| c.ablation == mode.to_string()).collect();
        let n = rows.len() as f64;
        let jg: f64 = rows.iter().map(|c| c.dev_joint_goal).sum::<f64>() / n;
        let tr: f64 = rows.iter().map(|c| c.dev_turn_request).sum::<f64>() / n;
        table.push_str(&format!("{:<13} {jg:>15.4} {tr:>19.4}\n", mode.to_string()));
    }
    std::fs::write(args.out.join("ablation.txt"), &table)
        .with_context(|| format!("writing table to {}", args.out.display()))?;
    print!("{table}");
    Ok(())
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    ontology: PathBuf,
    #[arg(long)]
    train: PathBuf,
    /// Where to write the statistics (JSON); omit to skip.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct CorpusStats {
    dialogues: usize,
    turns: usize,
    candidate_pairs: usize,
    /// Pairs observed fewer than 20 times in training.
    rare_pairs: usize,
    rare_fraction: f64,
    /// Pair counts per training-frequency bucket (same edges as eval).
    bucket_pairs: Vec<(String, usize)>,
    pair_counts: BTreeMap<String, usize>,
}

fn cmd_stats(args: &StatsArgs) -> Result<()> {
    require_exists(&[("ontology", &args.ontology), ("train", &args.train)])?;
    let ontology = load_ontology(&args.ontology)?;
    let corpus = load_corpus(&args.train, &ontology)?;
    let counts = pair_counts(&corpus);
    let pairs = ontology.all_pairs();
    let get = |p: &(String, String)| counts.get(p).copied().unwrap_or(0);
    let rare = pairs.iter().filter(|p| get(p) < 20).count();

    let mut bucket_pairs = Vec::new();
    for (i, &lower) in DEFAULT_BUCKET_EDGES.iter().enumerate() {
        let upper = DEFAULT_BUCKET_EDGES.get(i + 1).copied();
        let label = match upper {
            Some(u) => format!("[{lower}, {u})"),
            None => format!("[{lower}, inf)"),
        };
        let n = pairs
            .iter()
            .filter(|p| {
                let c = get(p);
                c >= lower && upper.map_or(true, |u| c < u)
            })
            .count();
        bucket_pairs.push((label, n));
    }
    let stats = CorpusStats {
        dialogues: corpus.dialogues.len(),
        turns: corpus.num_turns(),
        candidate_pairs: pairs.len(),
        rare_pairs: rare,
        rare_fraction: rare as f64 / pairs.len() as f64,
        bucket_pairs,
        pair_counts: counts.iter().map(|((s, v), c)| (format!("{s}={v}"), *c)).collect(),
    };
    println!(
        "{} dialogues, {} turns, {} candidate pairs, {} rare (<20 occurrences, {:.1}%)",
        stats.dialogues,
        stats.turns,
        stats.candidate_pairs,
        stats.rare_pairs,
        100.0 * stats.rare_fraction
    );
    for (label, n) in &stats.bucket_pairs {
        println!("  {label:<12} {n} pairs");
    }
    if let Some(out) = &args.out {
        write_json(out, &stats)?;
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Stats(a) => cmd_stats(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
