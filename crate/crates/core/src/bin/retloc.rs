use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use retloc::error::{Error, Result};
use retloc::fine::FineModel;
use retloc::language::parse_hint;
use retloc::pipeline::checkpoint::Checkpoint;
use retloc::pipeline::eval::{pad_seed, LOCALIZATION_EPS, LOCALIZATION_KS};
use retloc::pipeline::experiments::{
    ablate_regression, ablate_relations, ablate_training, evaluate, train_without_cross_attention, RELATION_VARIANTS,
};
use retloc::pipeline::report::MetricsReport;
use retloc::pipeline::{train_coarse, train_fine, Config, Dataset};
use retloc::scene::io::{load_queries, load_scene, save_queries, save_scene, write_atomic, write_json};

const SCENE_FILE: &str = "scene.json";
const QUERIES_FILE: &str = "queries.json";
const COARSE_FINAL: &str = "coarse_final.ckpt";
const COARSE_BEST: &str = "coarse_best.ckpt";
const FINE_FILE: &str = "fine.ckpt";

#[derive(Parser)]
#[command(name = "retloc", version, about = "Text-to-point-cloud localization on synthetic city scenes")]
struct Cli {
    /// JSON config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed and RETLOC_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scene and the train/val query sets.
    Gen {
        #[arg(long)]
        scene_out: Option<PathBuf>,
        #[arg(long)]
        queries_out: Option<PathBuf>,
    },
    /// Train the retrieval model.
    TrainCoarse,
    /// Train matcher and regressor.
    TrainFine,
    /// Evaluate the trained pipeline on the val queries.
    Eval {
        /// Top-k cells for localization recall (repeatable).
        #[arg(long = "k", value_delimiter = ',')]
        k: Vec<usize>,
        /// Error thresholds in metres (repeatable).
        #[arg(long = "eps", value_delimiter = ',')]
        eps: Vec<f64>,
    },
    /// Localize one query given as hint sentences.
    Localize {
        text: String,
        #[arg(long = "k", default_value_t = 5)]
        k: usize,
    },
    /// Write cell and query embeddings as CSV.
    DumpEmbeddings,
    /// Relation ablation and joint-vs-cascade comparison.
    Ablate {
        /// Skip the four coarse trainings.
        #[arg(long)]
        skip_relations: bool,
        /// Skip the fine-stage ablations.
        #[arg(long)]
        skip_fine: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => 1,
        Error::Numeric(_) | Error::Tensor(_) => 3,
        Error::Data(_)
        | Error::Io { .. }
        | Error::Json { .. }
        | Error::Checkpoint(_)
        | Error::Parse { .. }
        | Error::Vocabulary(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => {
            let mut c = Config::default();
            c.apply_env()?;
            c
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reuses `gen` output from the artifact directory when present.
fn dataset(out: &Path, cfg: &Config) -> Result<Dataset> {
    let (scene, queries) = (out.join(SCENE_FILE), out.join(QUERIES_FILE));
    if scene.exists() && queries.exists() {
        Dataset::assemble(load_scene(&scene)?, &cfg.data, load_queries(&queries)?)
    } else {
        Dataset::generate(&cfg.data, cfg.seed)
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Data(format!("missing checkpoint {}", path.display())))
    }
}

fn load_fine(out: &Path, cfg: &Config) -> Result<FineModel> {
    Checkpoint::load(&require(out.join(FINE_FILE))?)?.fine_model(cfg)
}

fn write_report(out: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    write_json(&out.join(format!("{stem}.json")), report)?;
    let text = report.render();
    write_atomic(&out.join(format!("{stem}.txt")), text.as_bytes())?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Gen { scene_out, queries_out } => {
            let ds = Dataset::generate(&cfg.data, cfg.seed)?;
            let scene = scene_out.clone().unwrap_or_else(|| out.join(SCENE_FILE));
            let queries = queries_out.clone().unwrap_or_else(|| out.join(QUERIES_FILE));
            save_scene(&scene, &ds.scene)?;
            save_queries(&queries, &ds.queries())?;
            eprintln!(
                "{} instances, {} cells ({} train, {} val), {} train / {} val queries",
                ds.scene.instances.len(),
                ds.cells.len(),
                ds.train_cells.len(),
                ds.val_cells.len(),
                ds.train.len(),
                ds.val.len()
            );
        }
        Command::TrainCoarse => {
            let ds = dataset(out, &cfg)?;
            let run = train_coarse(&ds, &cfg, &mut |e| eprintln!("coarse epoch {} loss {:.4} val {:?}", e.epoch, e.train_loss, e.val_recall))?;
            Checkpoint::coarse(&cfg, &run.model, Some(&run.optimizer)).save(&out.join(COARSE_FINAL))?;
            Checkpoint::coarse(&cfg, &run.best, None).save(&out.join(COARSE_BEST))?;
            write_json(&out.join("coarse_history.json"), &run.history)?;
        }
        Command::TrainFine => {
            let ds = dataset(out, &cfg)?;
            let run = train_fine(&ds, &cfg, &mut |e| {
                eprintln!("{:?} epoch {} loss {:.4} val {:?} {:?}", e.phase, e.epoch, e.train_loss, e.val_matcher, e.val_regression)
            })?;
            Checkpoint::fine(&cfg, &run.model, Some(&run.optimizer)).save(&out.join(FINE_FILE))?;
            write_json(&out.join("fine_history.json"), &run.history)?;
        }
        Command::Eval { k, eps } => {
            let coarse = Checkpoint::load(&require(out.join(COARSE_FINAL))?)?.coarse_model(&cfg)?;
            let fine = load_fine(out, &cfg)?;
            let ds = dataset(out, &cfg)?;
            let ks = if k.is_empty() { LOCALIZATION_KS.to_vec() } else { k.clone() };
            let eps = if eps.is_empty() { LOCALIZATION_EPS.to_vec() } else { eps.clone() };
            let ev = evaluate(&ds, &cfg, &coarse, &fine, &ks, &eps)?;
            let mut lines = String::new();
            for p in &ev.predictions {
                let _ = writeln!(lines, "{}", serde_json::to_string(p).expect("predictions serialise"));
            }
            write_atomic(&out.join("predictions.jsonl"), lines.as_bytes())?;
            write_report(out, "metrics", &ev.report)?;
        }
        Command::Localize { text, k } => {
            if *k == 0 {
                return Err(Error::InvalidInput("--k must be positive".into()));
            }
            let coarse = Checkpoint::load(&require(out.join(COARSE_FINAL))?)?.coarse_model(&cfg)?;
            let fine = load_fine(out, &cfg)?;
            let ds = dataset(out, &cfg)?;
            let groups = split_hints(text)?;
            let refs: Vec<_> = groups.iter().collect();
            let q = coarse.query_embeddings(&[refs.clone()])?.remove(0);
            let cells = ds.all_cells();
            let emb = coarse.cell_embeddings(&cells)?;
            let mut order: Vec<usize> = (0..cells.len()).collect();
            let score = |i: usize| emb[i].iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
            let estimates = order
                .iter()
                .take(*k)
                .map(|&i| fine.localize(&refs, cells[i], pad_seed(usize::MAX, cells[i].id)))
                .collect::<Result<Vec<_>>>()?;
            let best = &estimates[0].prediction;
            let report = serde_json::json!({
                "position": best.position,
                "fallback": best.fallback,
                "cells": estimates,
            });
            println!("{}", serde_json::to_string_pretty(&report).expect("json"));
        }
        Command::DumpEmbeddings => {
            let coarse = Checkpoint::load(&require(out.join(COARSE_FINAL))?)?.coarse_model(&cfg)?;
            let ds = dataset(out, &cfg)?;
            let cells = ds.all_cells();
            let mut csv = String::from("kind,id,split");
            for i in 0..cfg.coarse.d {
                let _ = write!(csv, ",e{i}");
            }
            csv.push('\n');
            let split_of = |k: usize| {
                if ds.train_cells.contains(&k) {
                    "train"
                } else if ds.val_cells.contains(&k) {
                    "val"
                } else {
                    "none"
                }
            };
            for (k, e) in coarse.cell_embeddings(&cells)?.iter().enumerate() {
                push_row(&mut csv, "cell", cells[k].id, split_of(k), e);
            }
            for (split, qs) in [("train", &ds.train), ("val", &ds.val)] {
                let groups: Vec<Vec<_>> = qs.iter().map(|q| q.hints.iter().map(|h| &h.groups).collect()).collect();
                for (q, e) in qs.iter().zip(coarse.query_embeddings(&groups)?) {
                    push_row(&mut csv, "query", q.id, split, &e);
                }
            }
            write_atomic(&out.join("embeddings.csv"), csv.as_bytes())?;
        }
        Command::Ablate { skip_relations, skip_fine } => {
            let ds = dataset(out, &cfg)?;
            let mut report = MetricsReport::new(&cfg);
            if !skip_relations {
                let t = ablate_relations(&ds, &cfg, &RELATION_VARIANTS, &mut |label, e| {
                    eprintln!("{label} epoch {} loss {:.4} val {:?}", e.epoch, e.train_loss, e.val_recall)
                })?;
                report.tables.push(t);
            }
            if !skip_fine {
                let log = &mut |e: &retloc::pipeline::FineEpoch| eprintln!("{:?} epoch {} loss {:.4}", e.phase, e.epoch, e.train_loss);
                let cascade = match out.join(FINE_FILE) {
                    p if p.exists() => Checkpoint::load(&p)?.fine_model(&cfg)?,
                    _ => train_fine(&ds, &cfg, log)?.model,
                };
                let (t, _) = ablate_training(&ds, &cfg, &cascade, log)?;
                report.tables.push(t);
                let no_cross = train_without_cross_attention(&ds, &cfg, &cascade, log)?;
                report.tables.push(ablate_regression(&ds, &cascade, &no_cross)?);
            }
            write_report(out, "ablation", &report)?;
        }
    }
    Ok(())
}

fn push_row(csv: &mut String, kind: &str, id: usize, split: &str, e: &[f64]) {
    let _ = write!(csv, "{kind},{id},{split}");
    for v in e {
        let _ = write!(csv, ",{v}");
    }
    csv.push('\n');
}

/// Splits a query into its hint sentences, each starting with "The pose is".
fn split_hints(text: &str) -> Result<Vec<retloc::language::WordGroups>> {
    const START: &str = "The pose is ";
    let starts: Vec<usize> = text.match_indices(START).map(|(i, _)| i).collect();
    if starts.is_empty() {
        return Err(Error::InvalidInput(format!("no hint sentence found in {text:?}")));
    }
    let mut ends = starts[1..].to_vec();
    ends.push(text.len());
    starts.iter().zip(ends).map(|(&a, b)| parse_hint(text[a..b].trim())).collect()
}
