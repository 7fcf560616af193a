//! Command-line surface for the hipcap captioning library: dataset
//! generation, tree inspection, training, captioning, evaluation, the
//! IoU-threshold sweep, and gradient checking.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hipcap::data::{
    generate_sceneworld, load_dataset, save_dataset, SceneRecord, SceneWorldConfig, Vocab,
};
use hipcap::decoder::AblationFlags;
use hipcap::hierarchy::{build_tree, tree_to_dot, HierarchyTree, NodeKind, Region};
use hipcap::model::{Model, ModelConfig};
use hipcap::training::{
    evaluate, full_pipeline_gradcheck, sweep_csv, sweep_epsilon, train, train_scst, TrainConfig,
    DEFAULT_EPSILON_GRID,
};

#[derive(Parser)]
#[command(name = "hipcap", version, about = "Tree-structured image captioning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset with template captions.
    Generate(GenerateArgs),
    /// Print one image's region hierarchy as DOT or JSON.
    BuildTree(BuildTreeArgs),
    /// Train a captioning model and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Caption every image in a dataset with a trained checkpoint.
    Caption(CaptionArgs),
    /// Score a checkpoint's captions (and labels, when present) on a dataset.
    Evaluate(EvaluateArgs),
    /// Train one model per IoU threshold and write a CSV of the results.
    SweepEpsilon(SweepArgs),
    /// Compare analytic gradients against finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Destination dataset file (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability that each object after the first nests inside an earlier one.
    #[arg(long, default_value_t = 0.35)]
    nesting: f64,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
}

#[derive(Args)]
struct BuildTreeArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Image to inspect.
    #[arg(long)]
    image_id: String,
    /// IoU threshold for nesting regions.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, value_enum, default_value_t = TreeFormat::Dot)]
    format: TreeFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum TreeFormat {
    Dot,
    Json,
}

#[derive(Args)]
struct ModelShape {
    /// Encoder hidden size.
    #[arg(long, default_value_t = 64)]
    h_enc: usize,
    /// Decoder hidden size.
    #[arg(long, default_value_t = 64)]
    h_dec: usize,
    /// Word-embedding dimension.
    #[arg(long, default_value_t = 32)]
    d_word: usize,
    /// Attention dimension.
    #[arg(long, default_value_t = 32)]
    d_attn: usize,
    /// Longest caption the decoder will emit.
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    /// Keep only words with at least this many training occurrences.
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    /// Enrich features with the relation (GCN) pass.
    #[arg(long)]
    use_gcn: bool,
    /// Drop instance features from the decoder's view.
    #[arg(long)]
    no_instances: bool,
    /// Skip the Tree-LSTM refinement (raw features only).
    #[arg(long)]
    no_treelstm: bool,
    /// Drop region features from the decoder's view.
    #[arg(long)]
    no_regions: bool,
}

impl ModelShape {
    fn flags(&self) -> AblationFlags {
        AblationFlags {
            use_regions: !self.no_regions,
            use_instances: !self.no_instances,
            use_treelstm: !self.no_treelstm,
            use_gcn: self.use_gcn,
        }
    }

    fn config(&self, vocab: Vocab, records: &[SceneRecord], epsilon: f64) -> Result<ModelConfig> {
        let d_r = records
            .iter()
            .find_map(SceneRecord::feature_dim)
            .ok_or_else(|| anyhow!("dataset has no regions to infer the feature size from"))?;
        let relation_labels = records
            .iter()
            .filter_map(|r| r.edges.as_ref())
            .flatten()
            .map(|&(_, _, label)| label + 1)
            .max()
            .unwrap_or(5);
        Ok(ModelConfig {
            d_r,
            h_enc: self.h_enc,
            h_dec: self.h_dec,
            d_word: self.d_word,
            d_attn: self.d_attn,
            epsilon,
            max_len: self.max_len,
            relation_labels,
            k_fallback: 2,
            flags: self.flags(),
            recognition_classes: None,
            vocab,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Validation dataset; defaults to holding out the last tenth of --dataset.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Where the best-validation checkpoint goes.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Epoch CSV log destination.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Self-critical epochs to run from the best checkpoint afterwards.
    #[arg(long, default_value_t = 0)]
    scst_epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 5e-5)]
    scst_lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Beam width for validation decoding (1 = greedy).
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// IoU threshold for nesting regions.
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Attach the multi-label recognition head (classes inferred from labels).
    #[arg(long)]
    recognition: bool,
    #[command(flatten)]
    shape: ModelShape,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Beam width.
    #[arg(long, default_value_t = 3)]
    beam: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Beam width.
    #[arg(long, default_value_t = 3)]
    beam: usize,
    /// Emit the full report (per-image rows included) as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Validation dataset; defaults to holding out the last tenth of --dataset.
    #[arg(long)]
    val: Option<PathBuf>,
    /// CSV destination.
    #[arg(long)]
    out: PathBuf,
    /// Threshold to include (repeat the flag); defaults to the standard grid.
    #[arg(long = "epsilon")]
    epsilons: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[command(flatten)]
    shape: ModelShape,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Include the relation (GCN) pass in the checked pipeline.
    #[arg(long)]
    use_gcn: bool,
    /// Corrupt one gradient on purpose to prove the check catches it.
    #[arg(long)]
    break_gradient: bool,
    /// Machine-readable report.
    #[arg(long)]
    json: bool,
}

/// A precondition the caller got wrong, as opposed to a runtime failure.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(message.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = cap_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// HIPCAP_THREADS caps the worker pool; unset means one worker per core.
fn cap_threads() -> Result<()> {
    let Ok(raw) = std::env::var("HIPCAP_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .map_err(|_| anyhow!("HIPCAP_THREADS must be a positive integer, got {raw:?}"))?;
    if threads == 0 {
        bail!("HIPCAP_THREADS must be a positive integer, got 0");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("installing the capped thread pool")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::BuildTree(args) => cmd_build_tree(args),
        Command::Train(args) => cmd_train(args),
        Command::Caption(args) => cmd_caption(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::SweepEpsilon(args) => cmd_sweep_epsilon(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn load(path: &Path) -> Result<Vec<SceneRecord>> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// Splits off an explicit or held-out validation set.
fn split(dataset: &Path, val: Option<&Path>) -> Result<(Vec<SceneRecord>, Vec<SceneRecord>)> {
    let mut records = load(dataset)?;
    if let Some(val) = val {
        let val_records = load(val)?;
        return Ok((records, val_records));
    }
    if records.len() < 2 {
        return Err(usage(format!(
            "dataset {} has {} scene(s); holding out a validation split needs at least 2 \
             (or pass --val)",
            dataset.display(),
            records.len()
        )));
    }
    let holdout = (records.len() / 10).max(1);
    let val_records = records.split_off(records.len() - holdout);
    Ok((records, val_records))
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let records = generate_sceneworld(&SceneWorldConfig {
        n_scenes: args.scenes,
        seed: args.seed,
        nesting_rate: args.nesting,
        feature_dim: args.feature_dim,
        ..Default::default()
    })?;
    save_dataset(&args.out, &records)?;
    println!("wrote {} scenes to {}", records.len(), args.out.display());
    Ok(())
}

fn node_label(tree: &HierarchyTree, regions: &[Region], node: usize) -> String {
    match tree.kind(node) {
        NodeKind::Root => "image".to_string(),
        NodeKind::RegionNode(i) => {
            let b = &regions[i].bbox;
            format!("region {i} [{}, {}, {}, {}]", b.x1, b.y1, b.x2, b.y2)
        }
        NodeKind::InstanceLeaf(i) => format!("instance {i}"),
    }
}

/// Nested JSON rendering; friendlier to eyeballs than the flat node dump.
fn json_subtree(tree: &HierarchyTree, regions: &[Region], node: usize) -> serde_json::Value {
    let children: Vec<serde_json::Value> = tree
        .children(node)
        .iter()
        .map(|&c| json_subtree(tree, regions, c))
        .collect();
    let mut value = serde_json::json!({ "node": node_label(tree, regions, node) });
    if let NodeKind::RegionNode(i) = tree.kind(node) {
        let b = &regions[i].bbox;
        value["box"] = serde_json::json!([b.x1, b.y1, b.x2, b.y2]);
    }
    if !children.is_empty() {
        value["children"] = serde_json::Value::Array(children);
    }
    value
}

fn cmd_build_tree(args: BuildTreeArgs) -> Result<()> {
    let records = load(&args.dataset)?;
    let record = records
        .iter()
        .find(|r| r.image_id == args.image_id)
        .ok_or_else(|| {
            anyhow!("no image {:?} in {}", args.image_id, args.dataset.display())
        })?;
    let regions = record.to_regions()?;
    let tree = build_tree(&regions, args.epsilon)?;
    match args.format {
        TreeFormat::Dot => print!("{}", tree_to_dot(&tree, &regions)),
        TreeFormat::Json => {
            let doc = serde_json::json!({
                "image_id": record.image_id,
                "epsilon": args.epsilon,
                "tree": json_subtree(&tree, &regions, HierarchyTree::ROOT),
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (train_set, val_set) = split(&args.dataset, args.val.as_deref())?;
    let vocab = Vocab::build(&train_set, args.shape.min_count)?;
    let mut config = args.shape.config(vocab, &train_set, args.epsilon)?;
    if args.recognition {
        let classes = train_set
            .iter()
            .chain(&val_set)
            .filter_map(|r| r.labels.as_ref())
            .flatten()
            .map(|&l| l + 1)
            .max()
            .ok_or_else(|| usage("--recognition needs labeled scenes"))?;
        config.recognition_classes = Some(classes);
    }
    println!(
        "training on {} scenes ({} validation), vocabulary {}",
        train_set.len(),
        val_set.len(),
        config.vocab.len()
    );

    let (model, mut store) = Model::new(config, args.seed)?;
    let tc = TrainConfig {
        lr: args.lr,
        scst_lr: args.scst_lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed: args.seed,
        val_beam: args.beam,
        checkpoint: Some(args.checkpoint.clone()),
        log: args.log.clone(),
        ..Default::default()
    };
    let report = train(&model, &mut store, &train_set, &val_set, &tc)?;
    print!("{}", report.csv());
    println!(
        "best epoch {} (val CIDEr-D {:.4}); checkpoint {}",
        report.best_epoch,
        report.best_val_cider,
        args.checkpoint.display()
    );

    if args.scst_epochs > 0 {
        let (model, mut store) = Model::load(&args.checkpoint)?;
        let scst = train_scst(&model, &mut store, &train_set, &tc, args.scst_epochs)?;
        for row in &scst.rows {
            println!(
                "scst epoch {}: mean advantage {:.4}, greedy CIDEr-D {:.4}",
                row.epoch, row.mean_reward, row.greedy_cider
            );
        }
        model.save(&store, &args.checkpoint)?;
        println!("self-critical phase saved to {}", args.checkpoint.display());
    }
    Ok(())
}

fn cmd_caption(args: CaptionArgs) -> Result<()> {
    let records = load(&args.dataset)?;
    let (model, store) = Model::load(&args.checkpoint)?;
    use rayon::prelude::*;
    let captions: Vec<Result<String>> = records
        .par_iter()
        .map(|record| {
            let regions = record.to_regions()?;
            let tokens = model.caption(&store, &regions, record.edges.as_deref(), args.beam)?;
            Ok(model.config.vocab.decode(&tokens))
        })
        .collect();
    for (record, caption) in records.iter().zip(captions) {
        println!("{}\t{}", record.image_id, caption?);
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let records = load(&args.dataset)?;
    let (model, store) = Model::load(&args.checkpoint)?;
    let report = evaluate(&model, &store, &records, args.beam)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    for (n, score) in report.bleu.iter().enumerate() {
        println!("BLEU@{}  {score:.4}", n + 1);
    }
    println!("ROUGE-L {:.4}", report.rouge_l);
    println!("CIDEr-D {:.4}", report.cider_d);
    if let Some(r) = &report.recognition {
        println!(
            "C-P {:.4}  C-R {:.4}  C-F1 {:.4}",
            r.c_precision, r.c_recall, r.c_f1
        );
        println!(
            "O-P {:.4}  O-R {:.4}  O-F1 {:.4}",
            r.o_precision, r.o_recall, r.o_f1
        );
    }
    Ok(())
}

fn cmd_sweep_epsilon(args: SweepArgs) -> Result<()> {
    let grid: Vec<f64> = if args.epsilons.is_empty() {
        DEFAULT_EPSILON_GRID.to_vec()
    } else if args.epsilons.len() < 2 {
        return Err(usage("--epsilon must be given at least twice (a sweep needs two thresholds)"));
    } else {
        args.epsilons.clone()
    };
    let (train_set, val_set) = split(&args.dataset, args.val.as_deref())?;
    let vocab = Vocab::build(&train_set, args.shape.min_count)?;
    // The sweep replaces the threshold per grid point, so the template's is moot.
    let template = args.shape.config(vocab, &train_set, grid[0])?;
    let tc = TrainConfig {
        lr: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed: args.seed,
        ..Default::default()
    };
    let rows = sweep_epsilon(&template, &train_set, &val_set, &tc, &grid)?;
    let csv = sweep_csv(&rows);
    fs::write(&args.out, &csv)
        .with_context(|| format!("writing sweep CSV {}", args.out.display()))?;
    print!("{csv}");
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = full_pipeline_gradcheck(args.use_gcn, args.break_gradient)?;
    if args.json {
        let params: Vec<serde_json::Value> = report
            .params
            .iter()
            .map(|p| {
                serde_json::json!({
                    "name": p.name,
                    "max_rel_err": p.max_rel_err,
                    "worst_index": p.worst_index,
                })
            })
            .collect();
        let doc = serde_json::json!({
            "passed": report.passed(),
            "tolerance": report.tolerance,
            "max_rel_err": report.max_rel_err(),
            "params": params,
        });
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        for p in &report.params {
            println!("{}  max rel err {:.3e}", p.name, p.max_rel_err);
        }
        println!(
            "{}: max rel err {:.3e} (tolerance {:.1e})",
            if report.passed() { "pass" } else { "FAIL" },
            report.max_rel_err(),
            report.tolerance
        );
    }
    if !report.passed() {
        let worst = report.worst().expect("a failing report names a worst parameter");
        bail!(
            "gradient check failed: {} is off by {:.3e} (index {})",
            worst.name,
            worst.max_rel_err,
            worst.worst_index
        );
    }
    Ok(())
}
