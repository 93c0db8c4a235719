//! `dst`: train, evaluate, and inspect act-aware dialogue state trackers.
//!
//! Every subcommand is thin orchestration over `dst_core`; anything with
//! modeling semantics lives in the library where it is unit-tested. Artifacts
//! land under `--out`, warnings go to stderr and `warnings.jsonl`, and each
//! command prints one summary line to stdout.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dst_core::corpus::{
    build_examples, convert_multiwoz, default_aliases, is_examples_file, load_dialogues,
    load_examples, save_examples, ConvertOptions, Corpus, LoadOptions, TurnExample, WarningSink,
};
use dst_core::evaluation::{ablation_run, evaluate_checkpoint, export_attention};
use dst_core::model::Model;
use dst_core::training::{gradient_check, train, Checkpoint, RunConfig};
use dst_core::{DstError, Ontology, Result, SlotPolicy};

/// Consulted by `prepare` when `--out` is omitted.
const CACHE_DIR_VAR: &str = "DST_CACHE_DIR";

/// Finite-difference step and acceptance threshold for `gradcheck`.
const GRADCHECK_EPS: f64 = 1e-3;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Examples audited by `gradcheck`; enough to cover both head families
/// without turning the audit into a training run.
const GRADCHECK_EXAMPLES: usize = 4;

const EXIT_CODES_HELP: &str = "Exit codes:
  0  success
  1  gradcheck found gradients outside tolerance
  2  usage error (unknown flag or subcommand)
  3  missing or unreadable file
  4  configuration validation failure
  5  malformed corpus, ontology, or raw data
  6  model, checkpoint, or training failure

Environment:
  DST_CACHE_DIR  default output directory for `prepare`";

#[derive(Parser)]
#[command(
    name = "dst",
    version,
    about = "Act-aware dialogue state tracking",
    after_help = EXIT_CODES_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    /// Every slot classifies over its ontology value list.
    #[value(name = "all_cat")]
    AllCat,
    /// Every slot extracts spans from the dialogue context.
    #[value(name = "all_noncat")]
    AllNoncat,
    /// Number- and time-like slots extract spans; the rest classify.
    #[value(name = "hybrid")]
    Hybrid,
}

impl From<PolicyArg> for SlotPolicy {
    fn from(arg: PolicyArg) -> SlotPolicy {
        match arg {
            PolicyArg::AllCat => SlotPolicy::AllCategorical,
            PolicyArg::AllNoncat => SlotPolicy::AllNonCategorical,
            PolicyArg::Hybrid => SlotPolicy::Hybrid,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw MultiWOZ 2.1 data.json into canonical dialogue files.
    ///
    /// Writes train.json into --out. When valListFile/testListFile sit next
    /// to the raw file (either .json or .txt), the listed dialogues go to
    /// dev.json and test.json instead; all splits share one act inventory.
    Convert {
        /// Raw data.json from the MultiWOZ 2.1 distribution.
        #[arg(long)]
        data: PathBuf,
        /// Directory for the canonical dialogue files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize and label a dialogue file into a cached example set.
    Prepare {
        /// Canonical dialogue file.
        #[arg(long)]
        data: PathBuf,
        /// Ontology file.
        #[arg(long)]
        ontology: PathBuf,
        /// Slot partition to label under.
        #[arg(long, value_enum, default_value = "hybrid")]
        policy: PolicyArg,
        /// Output file; defaults to $DST_CACHE_DIR/<data stem>.examples.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write the best checkpoint plus an epoch log.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dialogue file, or a directory holding train.json and dev.json.
        #[arg(long)]
        data: PathBuf,
        /// Ontology file.
        #[arg(long)]
        ontology: PathBuf,
        /// Directory for checkpoint, metrics log, and resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured slot partition.
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Train without attention over system acts.
        #[arg(long)]
        no_act_attention: bool,
    },
    /// Score a checkpoint and write metrics plus a prediction dump.
    Evaluate {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Canonical dialogue file or a `prepare` cache.
        #[arg(long)]
        data: PathBuf,
        /// Ontology file; must hash-match the checkpoint.
        #[arg(long)]
        ontology: PathBuf,
        /// Directory for metrics.json and predictions.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-turn predicted states without a metrics summary.
    Predict {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Canonical dialogue file or a `prepare` cache.
        #[arg(long)]
        data: PathBuf,
        /// Ontology file; must hash-match the checkpoint.
        #[arg(long)]
        ontology: PathBuf,
        /// Directory for predictions.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train twins differing only in act attention and report the deltas.
    Ablate {
        /// Run configuration (TOML); act attention is forced on for the
        /// reference twin and off for the ablated one.
        #[arg(long)]
        config: PathBuf,
        /// Dialogue file, or a directory holding train.json and dev.json.
        #[arg(long)]
        data: PathBuf,
        /// Ontology file.
        #[arg(long)]
        ontology: PathBuf,
        /// Directory for ablation.json and both checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed (shared by both twins).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export act-attention weights for a simulated act sequence.
    ExportAttention {
        /// Checkpoint written by `train` with act attention enabled.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ontology file; must hash-match the checkpoint.
        #[arg(long)]
        ontology: PathBuf,
        /// Output file (tab-separated matrix, acts by slots).
        #[arg(long)]
        out: PathBuf,
        /// Act names to simulate, in dialogue order.
        #[arg(value_name = "ACT", required = true)]
        acts: Vec<String>,
    },
    /// Audit analytic gradients against finite differences on a fresh model.
    Gradcheck {
        /// Run configuration (TOML); sizes the model under audit.
        #[arg(long)]
        config: PathBuf,
        /// Dialogue file, or a directory holding train.json.
        #[arg(long)]
        data: PathBuf,
        /// Ontology file.
        #[arg(long)]
        ontology: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Optional JSON report with one entry per probed coordinate.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &DstError) -> u8 {
    match err {
        DstError::Io { .. } => 3,
        DstError::Config(_) => 4,
        DstError::Format(_) | DstError::Ontology(_) | DstError::Corpus(_) => 5,
        _ => 6,
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Convert { data, out } => cmd_convert(&data, &out),
        Command::Prepare {
            data,
            ontology,
            policy,
            out,
        } => cmd_prepare(&data, &ontology, policy, out),
        Command::Train {
            config,
            data,
            ontology,
            out,
            seed,
            policy,
            no_act_attention,
        } => cmd_train(&config, &data, &ontology, &out, seed, policy, no_act_attention),
        Command::Evaluate {
            checkpoint,
            data,
            ontology,
            out,
        } => cmd_evaluate(&checkpoint, &data, &ontology, &out, true),
        Command::Predict {
            checkpoint,
            data,
            ontology,
            out,
        } => cmd_evaluate(&checkpoint, &data, &ontology, &out, false),
        Command::Ablate {
            config,
            data,
            ontology,
            out,
            seed,
        } => cmd_ablate(&config, &data, &ontology, &out, seed),
        Command::ExportAttention {
            checkpoint,
            ontology,
            out,
            acts,
        } => cmd_export_attention(&checkpoint, &ontology, &out, &acts),
        Command::Gradcheck {
            config,
            data,
            ontology,
            seed,
            out,
        } => cmd_gradcheck(&config, &data, &ontology, seed, out.as_deref()),
    }
}

// ── shared plumbing ──────────────────────────────────────────────────

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| DstError::io(path, e))
}

fn load_partitioned_ontology(path: &Path, policy: SlotPolicy) -> Result<Ontology> {
    let mut ontology = Ontology::load(path)?;
    ontology.partition_slots(policy)?;
    Ok(ontology)
}

/// Loads train and dev corpora. A directory must hold train.json and may
/// hold dev.json; a single file serves as both sides, which only makes
/// sense for overfitting probes.
fn load_split(
    data: &Path,
    ontology: &Ontology,
    sink: &mut WarningSink,
) -> Result<(Corpus, Corpus)> {
    let options = LoadOptions::default();
    if data.is_dir() {
        let train = load_dialogues(&data.join("train.json"), ontology, &options, sink)?;
        let dev_path = data.join("dev.json");
        let dev = if dev_path.is_file() {
            load_dialogues(&dev_path, ontology, &options, sink)?
        } else {
            eprintln!("note: no dev.json in {}; selecting on the training set", data.display());
            train.clone()
        };
        Ok((train, dev))
    } else {
        let train = load_dialogues(data, ontology, &options, sink)?;
        eprintln!("note: single-file --data; selecting on the training set");
        let dev = train.clone();
        Ok((train, dev))
    }
}

/// Loads examples from either a canonical dialogue file or a `prepare`
/// cache, returning the act inventory the file carries.
fn load_any_examples(
    data: &Path,
    ontology: &Ontology,
    context_cap: usize,
    sink: &mut WarningSink,
) -> Result<(Vec<TurnExample>, Vec<String>)> {
    let text = std::fs::read_to_string(data).map_err(|e| DstError::io(data, e))?;
    if is_examples_file(&text) {
        return load_examples(data, ontology);
    }
    let corpus = dst_core::corpus::dialogues_from_json(&text, ontology, &LoadOptions::default(), sink)?;
    let examples = build_examples(&corpus, ontology, context_cap, sink)?;
    Ok((examples, corpus.act_inventory))
}

fn write_warnings(sink: &WarningSink, out_dir: &Path) -> Result<()> {
    if sink.is_empty() {
        return Ok(());
    }
    let path = out_dir.join("warnings.jsonl");
    sink.write_jsonl(&path)?;
    eprintln!("{} warnings written to {}", sink.len(), path.display());
    Ok(())
}

/// Reads a split list: a JSON array of dialogue ids, or one id per line.
fn read_id_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
    if let Ok(ids) = serde_json::from_str::<Vec<String>>(&text) {
        return Ok(ids.into_iter().collect());
    }
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// First existing sibling of `data` among the given file names.
fn sibling(data: &Path, names: &[&str]) -> Option<PathBuf> {
    let dir = data.parent()?;
    names.iter().map(|n| dir.join(n)).find(|p| p.is_file())
}

// ── subcommands ──────────────────────────────────────────────────────

fn cmd_convert(data: &Path, out: &Path) -> Result<u8> {
    let raw = std::fs::read_to_string(data).map_err(|e| DstError::io(data, e))?;
    let mut sink = WarningSink::new();
    let mut corpus = convert_multiwoz(&raw, &ConvertOptions::default(), &mut sink)?;
    ensure_dir(out)?;

    let mut written = Vec::new();
    for (list_names, split) in [
        (&["testListFile.json", "testListFile.txt"][..], "test.json"),
        (&["valListFile.json", "valListFile.txt"][..], "dev.json"),
    ] {
        let Some(list_path) = sibling(data, list_names) else {
            continue;
        };
        let ids = read_id_list(&list_path)?;
        let taken = corpus.take(&ids);
        if taken.is_empty() {
            eprintln!(
                "note: no dialogue matched {}; {} not written",
                list_path.display(),
                split
            );
            continue;
        }
        taken.write(&out.join(split))?;
        written.push(format!("{split} ({} dialogues)", taken.len()));
    }
    corpus.write(&out.join("train.json"))?;
    written.push(format!("train.json ({} dialogues)", corpus.len()));
    written.reverse();

    write_warnings(&sink, out)?;
    println!("converted to {}: {}", out.display(), written.join(", "));
    Ok(0)
}

fn cmd_prepare(
    data: &Path,
    ontology_path: &Path,
    policy: PolicyArg,
    out: Option<PathBuf>,
) -> Result<u8> {
    let ontology = load_partitioned_ontology(ontology_path, policy.into())?;
    let mut sink = WarningSink::new();
    let options = LoadOptions::default();
    let corpus = load_dialogues(data, &ontology, &options, &mut sink)?;
    let config = RunConfig::default();
    let examples = build_examples(&corpus, &ontology, config.context_cap, &mut sink)?;

    let out = match out {
        Some(path) => path,
        None => {
            let cache = std::env::var(CACHE_DIR_VAR).map_err(|_| {
                DstError::Config(format!("pass --out or set {CACHE_DIR_VAR}"))
            })?;
            let stem = data
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("examples");
            PathBuf::from(cache).join(format!("{stem}.examples.json"))
        }
    };
    if let Some(dir) = out.parent() {
        ensure_dir(dir)?;
        write_warnings(&sink, dir)?;
    }
    save_examples(&out, &examples, &ontology, &corpus.act_inventory)?;
    println!(
        "prepared {} examples from {} dialogues into {}",
        examples.len(),
        corpus.dialogues.len(),
        out.display()
    );
    Ok(0)
}

fn cmd_train(
    config_path: &Path,
    data: &Path,
    ontology_path: &Path,
    out: &Path,
    seed: Option<u64>,
    policy: Option<PolicyArg>,
    no_act_attention: bool,
) -> Result<u8> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(policy) = policy {
        config.slot_policy = policy.into();
    }
    if no_act_attention {
        config.act_attention = false;
    }
    config.validate()?;

    let ontology = load_partitioned_ontology(ontology_path, config.slot_policy)?;
    let mut sink = WarningSink::new();
    let (train_corpus, dev_corpus) = load_split(data, &ontology, &mut sink)?;

    let outcome = train(&config, &train_corpus, &dev_corpus, &ontology)?;

    ensure_dir(out)?;
    let ckpt_path = out.join("model.ckpt");
    outcome.checkpoint.save(&ckpt_path)?;
    std::fs::write(out.join("config.toml"), config.to_toml_string()?)
        .map_err(|e| DstError::io(out.join("config.toml"), e))?;
    let mut log = String::new();
    for epoch in &outcome.metrics {
        log.push_str(&serde_json::to_string(epoch).expect("epoch metrics serialize"));
        log.push('\n');
    }
    std::fs::write(out.join("metrics.jsonl"), log)
        .map_err(|e| DstError::io(out.join("metrics.jsonl"), e))?;
    sink.warnings.extend(outcome.warnings.iter().cloned());
    write_warnings(&sink, out)?;

    println!(
        "trained {} steps; best dev joint {:.4}, slot {:.4}; checkpoint {}",
        outcome.checkpoint.step,
        outcome.checkpoint.dev_joint,
        outcome.checkpoint.dev_slot,
        ckpt_path.display()
    );
    Ok(0)
}

fn cmd_evaluate(
    checkpoint_path: &Path,
    data: &Path,
    ontology_path: &Path,
    out: &Path,
    with_metrics: bool,
) -> Result<u8> {
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let ontology = checkpoint.partitioned_ontology(&Ontology::load(ontology_path)?)?;
    let mut sink = WarningSink::new();
    let (examples, _) =
        load_any_examples(data, &ontology, checkpoint.config.context_cap, &mut sink)?;

    let (metrics, records) = evaluate_checkpoint(
        &checkpoint,
        &examples,
        &ontology,
        &checkpoint.act_inventory,
        &default_aliases(),
    )?;

    ensure_dir(out)?;
    dst_core::evaluation::write_predictions_jsonl(&out.join("predictions.jsonl"), &records)?;
    write_warnings(&sink, out)?;
    if with_metrics {
        metrics.write_json(&out.join("metrics.json"))?;
        println!(
            "joint {:.4}, slot {:.4} over {} turns; artifacts in {}",
            metrics.joint,
            metrics.slot,
            metrics.n_turns,
            out.display()
        );
    } else {
        println!(
            "predicted {} turns into {}",
            metrics.n_turns,
            out.join("predictions.jsonl").display()
        );
    }
    Ok(0)
}

fn cmd_ablate(
    config_path: &Path,
    data: &Path,
    ontology_path: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<u8> {
    let mut with_acts = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        with_acts.seed = seed;
    }
    with_acts.act_attention = true;
    with_acts.validate()?;
    let mut without_acts = with_acts.clone();
    without_acts.act_attention = false;

    let ontology = load_partitioned_ontology(ontology_path, with_acts.slot_policy)?;
    let mut sink = WarningSink::new();
    let (train_corpus, dev_corpus) = load_split(data, &ontology, &mut sink)?;

    let (report, with_run, without_run) = ablation_run(
        &with_acts,
        &without_acts,
        &train_corpus,
        &dev_corpus,
        &ontology,
    )?;

    ensure_dir(out)?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| DstError::Evaluation(format!("ablation report: {e}")))?;
    std::fs::write(out.join("ablation.json"), text + "\n")
        .map_err(|e| DstError::io(out.join("ablation.json"), e))?;
    with_run.checkpoint.save(&out.join("with_acts.ckpt"))?;
    without_run.checkpoint.save(&out.join("without_acts.ckpt"))?;
    write_warnings(&sink, out)?;

    println!(
        "dev joint with acts {:.4}, without {:.4}, delta {:+.4}; report in {}",
        report.dev_joint_with,
        report.dev_joint_without,
        report.joint_delta,
        out.join("ablation.json").display()
    );
    Ok(0)
}

fn cmd_export_attention(
    checkpoint_path: &Path,
    ontology_path: &Path,
    out: &Path,
    acts: &[String],
) -> Result<u8> {
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let ontology = checkpoint.partitioned_ontology(&Ontology::load(ontology_path)?)?;
    let model: Model<f64> = checkpoint.to_model(&ontology)?;
    let export = export_attention(&model, acts, &ontology, &checkpoint.act_inventory)?;
    if let Some(dir) = out.parent() {
        ensure_dir(dir)?;
    }
    std::fs::write(out, export.to_tsv()).map_err(|e| DstError::io(out, e))?;
    println!(
        "exported {} act rows over {} slots to {}",
        export.acts.len(),
        export.slots.len(),
        out.display()
    );
    Ok(0)
}

fn cmd_gradcheck(
    config_path: &Path,
    data: &Path,
    ontology_path: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<u8> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;

    let ontology = load_partitioned_ontology(ontology_path, config.slot_policy)?;
    let mut sink = WarningSink::new();
    let (train_corpus, _) = load_split(data, &ontology, &mut sink)?;
    let examples = build_examples(&train_corpus, &ontology, config.context_cap, &mut sink)?;
    if examples.is_empty() {
        return Err(DstError::Corpus("no examples to audit".to_string()));
    }
    let probe = &examples[..examples.len().min(GRADCHECK_EXAMPLES)];

    let vocab = dst_core::encoder::Vocab::build(&train_corpus, &ontology);
    let model: Model<f64> = Model::init(
        config.embedding.clone(),
        config.act_attention,
        vocab,
        &ontology,
        config.seed,
    )?;
    let report = gradient_check(
        &model,
        probe,
        &ontology,
        &train_corpus.act_inventory,
        GRADCHECK_EPS,
        2,
        config.seed,
    )?;

    if let Some(out) = out {
        if let Some(dir) = out.parent() {
            ensure_dir(dir)?;
        }
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| DstError::Model(format!("gradcheck report: {e}")))?;
        std::fs::write(out, text + "\n").map_err(|e| DstError::io(out, e))?;
    }

    let verdict = if report.max_rel_err < GRADCHECK_TOLERANCE {
        "ok"
    } else {
        "FAILED"
    };
    println!(
        "gradcheck {verdict}: max relative error {:.3e} over {} coordinates ({} examples)",
        report.max_rel_err,
        report.entries.len(),
        probe.len()
    );
    Ok(if report.max_rel_err < GRADCHECK_TOLERANCE {
        0
    } else {
        1
    })
}
