use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use capplan::captioner::DecodeRecord;
use capplan::harness::{
    decode_records, emit_report, evaluate_records, load_model, partition_records, read_jsonl, retrieval_metrics,
    run_experiment, save_model, split_vocabulary, train_model, write_json, write_jsonl, CellStatus,
    ExperimentConfig,
};
use capplan::planner::{Approach, TagSet};
use capplan::splits::{build_splits, read_split_manifest, write_split_manifest, Partition};
use capplan::world::{generate_corpus, read_corpus, write_corpus, Lexicon};

#[derive(Parser)]
#[command(name = "capplan", version, about = "Planned caption decoding on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--param train.adam.lr=0.002`.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let cfg = base.with_overrides(&self.params)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the scene corpus.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partition a corpus around one held-out set and build its vocabulary.
    BuildSplits {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Held-out set index.
        #[arg(long, default_value_t = 0)]
        heldout: usize,
        /// Writes `set{N}.jsonl` and `set{N}.vocab.tsv` here.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one model with early stopping.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value = "standard")]
        approach: Approach,
        #[arg(long, default_value = "pos")]
        tagset: TagSet,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam-decode a partition with a trained model.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value = "test")]
        partition: String,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a decode file.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        decode: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value = "test")]
        partition: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every cell of a configuration (resumable).
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Aggregate finished runs into tables, curve data and a summary.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// An error tagged with the stage that raised it.
struct StageError(&'static str, anyhow::Error);

trait Stage<T> {
    fn stage(self, name: &'static str) -> Result<T, StageError>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn stage(self, name: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError(name, e.into()))
    }
}

fn parse_partition(s: &str) -> anyhow::Result<Partition> {
    match s {
        "train" => Ok(Partition::Train),
        "val" => Ok(Partition::Val),
        "test" => Ok(Partition::Test),
        _ => Err(anyhow!("unknown partition `{s}` (train, val, test)")),
    }
}

fn ensure_parent(p: &Path) -> anyhow::Result<()> {
    if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), StageError> {
    let lex = Lexicon::default();
    match cli.cmd {
        Cmd::GenData { cfg, out } => {
            let cfg = cfg.load().stage("config")?;
            let corpus = generate_corpus(cfg.scenes, cfg.world_seed, &cfg.world, &lex).stage("world")?;
            ensure_parent(&out).stage("world")?;
            write_corpus(&out, &corpus).stage("world")?;
            println!("{} scenes -> {}", corpus.len(), out.display());
        }
        Cmd::BuildSplits {
            cfg,
            corpus,
            heldout,
            out_dir,
        } => {
            let cfg = cfg.load().stage("config")?;
            let corpus = read_corpus(&corpus).stage("splits")?;
            let spec = cfg.split_spec(heldout, &lex).stage("config")?;
            let split = build_splits(&corpus, &spec, cfg.split_ratios, cfg.split_seed, &lex).stage("splits")?;
            std::fs::create_dir_all(&out_dir).stage("splits")?;
            write_split_manifest(&out_dir.join(format!("set{heldout}.jsonl")), &split).stage("splits")?;
            let train = partition_records(&corpus, &split, Partition::Train);
            let vocab = split_vocabulary(&train, &cfg.tagsets).stage("planner")?;
            vocab.write_tsv(&out_dir.join(format!("set{heldout}.vocab.tsv"))).stage("planner")?;
            for w in &split.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "train {} / val {} / test {} scenes, vocabulary {}",
                split.train.len(),
                split.val.len(),
                split.test.len(),
                vocab.len()
            );
        }
        Cmd::Train {
            cfg,
            corpus,
            split,
            approach,
            tagset,
            seed,
            out,
        } => {
            let mut cfg = cfg.load().stage("config")?;
            if approach.uses_tags() && !cfg.tagsets.contains(&tagset) {
                cfg.tagsets.push(tagset);
            }
            let corpus = read_corpus(&corpus).stage("train")?;
            let split = read_split_manifest(&split).stage("train")?;
            let train = partition_records(&corpus, &split, Partition::Train);
            let val = partition_records(&corpus, &split, Partition::Val);
            let vocab = split_vocabulary(&train, &cfg.tagsets).stage("planner")?;
            let (model, outcome) = train_model(&cfg, &train, &val, &vocab, approach, tagset, seed).stage("train")?;
            ensure_parent(&out).stage("train")?;
            save_model(&out, &model).stage("train")?;
            println!(
                "best epoch {} (val BLEU {:.2}), stopped after {} -> {}",
                outcome.best_epoch,
                outcome.best_bleu,
                outcome.stopped_epoch,
                out.display()
            );
        }
        Cmd::Decode {
            cfg,
            model,
            corpus,
            split,
            partition,
            limit,
            out,
        } => {
            let cfg = cfg.load().stage("config")?;
            let part = parse_partition(&partition).stage("config")?;
            let m = load_model(&model).stage("decode")?;
            let corpus = read_corpus(&corpus).stage("decode")?;
            let split = read_split_manifest(&split).stage("decode")?;
            let mut scenes = partition_records(&corpus, &split, part);
            if let Some(n) = limit {
                scenes.truncate(n);
            }
            let recs = decode_records(&m, &scenes, &cfg.decode, cfg.train.max_len(m.approach)).stage("decode")?;
            ensure_parent(&out).stage("decode")?;
            write_jsonl(&out, &recs).stage("decode")?;
            println!("{} captions for {} scenes -> {}", recs.len(), scenes.len(), out.display());
        }
        Cmd::Evaluate {
            cfg,
            model,
            decode,
            corpus,
            split,
            partition,
            out,
        } => {
            let cfg = cfg.load().stage("config")?;
            let part = parse_partition(&partition).stage("config")?;
            let m = load_model(&model).stage("eval")?;
            let records: Vec<DecodeRecord> = read_jsonl(&decode).stage("eval")?;
            let corpus = read_corpus(&corpus).stage("eval")?;
            let split = read_split_manifest(&split).stage("eval")?;
            let train = partition_records(&corpus, &split, Partition::Train);
            let mut scenes = partition_records(&corpus, &split, part);
            scenes.retain(|r| records.iter().any(|d| d.scene == r.scene.id));
            let k = records.iter().map(|r| r.rank + 1).max().unwrap_or(1);
            let mut report = evaluate_records(
                &records,
                &scenes,
                &train,
                split.spec.active(),
                m.approach,
                m.tagset,
                k,
                cfg.world.n_refs,
                &lex,
            )
            .stage("eval")?;
            report.backend = m.captioner.config.backend.to_string();
            report.heldout_set = split.spec.active_set;
            report.split = partition;
            if m.ranker.is_some() && cfg.retrieval_gallery > 0 {
                let n = cfg.retrieval_gallery.min(scenes.len());
                report.retrieval = Some(retrieval_metrics(&m, &scenes[..n]).stage("eval")?);
            }
            print!("{}", report.render());
            if let Some(out) = out {
                ensure_parent(&out).stage("eval")?;
                write_json(&out, &report).stage("eval")?;
            }
        }
        Cmd::Experiment { cfg, output_dir } => {
            let mut cfg = cfg.load().stage("config")?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let manifest = run_experiment(&cfg).map_err(|e| {
                let stage = match &e {
                    capplan::Error::Stage { stage, .. } if stage == "config" => "config",
                    _ => "experiment",
                };
                StageError(stage, e.into())
            })?;
            let failed: Vec<_> = manifest
                .cells
                .iter()
                .filter(|(_, c)| c.status == CellStatus::Failed)
                .collect();
            for (id, c) in &failed {
                eprintln!(
                    "cell {id} failed in stage `{}`: {}",
                    c.failed_stage.as_deref().unwrap_or("?"),
                    c.error.as_deref().unwrap_or("")
                );
            }
            println!(
                "{} cells done, {} failed -> {}",
                manifest.cells.len() - failed.len(),
                failed.len(),
                cfg.output_dir.display()
            );
            if !failed.is_empty() {
                return Err(StageError("experiment", anyhow!("{} cell(s) failed", failed.len())));
            }
        }
        Cmd::Report { runs, out } => {
            let report = emit_report(&runs, &out).stage("report")?;
            print!("{}", report.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(StageError(stage, e)) => {
            log::debug!("{e:?}");
            eprintln!("capplan: stage `{stage}` failed: {e:#}");
            ExitCode::from(if stage == "config" { 2 } else { 1 })
        }
    }
}
