//! `sshr`: corpus generation, training, evaluation, probing, ablation and gradient checks.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sshr_core::datagen::{generate_corpus, write_corpus};
use sshr_core::evalkit::{evaluate, run_ablation, Ladder};
use sshr_core::probe::probe_all_layers;
use sshr_core::trainer::{gradcheck_suite, train_model, TrainOutputs};
use sshr_core::{CorpusConfig, Error, SshrModel};

use config::{read_ablate, read_corpus_config, read_eval, read_probe, read_train, AblateFile};

const MANIFEST: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "sshr", version, about = "Toy-scale SSHR fine-tuning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for every random choice in the run
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory; every output path is relative to it
    #[arg(long, default_value = "sshr-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multilingual corpus
    Datagen {
        #[command(flatten)]
        common: Common,
        /// Corpus config JSON [default: built-in corpus settings]
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model from a run file
    Train {
        #[command(flatten)]
        common: Common,
        /// Run file JSON with `corpus`, `model`, `train` and optional `base_checkpoint` [required]
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on corpus splits
    Eval {
        #[command(flatten)]
        common: Common,
        /// Eval file JSON with `checkpoint`, optional `corpus` and `splits` [required]
        #[arg(long)]
        config: PathBuf,
    },
    /// Layer-wise LID probes and cluster/phoneme mutual information
    Probe {
        #[command(flatten)]
        common: Common,
        /// Probe file JSON with `checkpoint`, optional `corpus`, `split` and `probe` [required]
        #[arg(long)]
        config: PathBuf,
        /// K-means clusters [default: 4 x phoneme inventory]
        #[arg(long)]
        k: Option<usize>,
        /// Probe only this depth [default: every depth]
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Train and score every variant of an ablation ladder
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Built-in ladder (default, lid, refine, content) or a ladder JSON path
        #[arg(long, default_value = "default")]
        ladder: String,
        /// Seeds per variant; they are seed+1 ..= seed+N
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Runs trained concurrently
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Ablation file JSON with an optional `corpus` [default: built-in corpus]
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = std::result::Result<serde_json::Value, Failure>;

#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    config: serde_json::Value,
    seed: u64,
    version: &'static str,
    started: String,
    finished: String,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn list_outputs(root: &Path) -> Vec<String> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<String>) {
        let Ok(entries) = fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(&p, root, out);
            } else if let Ok(rel) = p.strip_prefix(root) {
                if rel != Path::new(MANIFEST) {
                    out.push(rel.to_string_lossy().replace('\\', "/"));
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn create_out(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))
}

fn datagen(c: &Common, config: Option<&Path>) -> Outcome {
    let mut cfg = match config {
        Some(p) => read_corpus_config(p)?,
        None => CorpusConfig::default(),
    };
    cfg.seed = c.seed;
    cfg.validate()?;
    let corpus = generate_corpus(&cfg)?;
    create_out(&c.out)?;
    write_corpus(&corpus, &c.out)?;
    println!(
        "wrote {} train / {} dev / {} test utterances to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        c.out.display()
    );
    Ok(json!(cfg))
}

fn train(c: &Common, config: &Path) -> Outcome {
    let mut file = read_train(config)?;
    file.train.seed = c.seed;
    file.train.validate()?;
    let corpus = file.corpus.load()?;
    let model_cfg = file.model.resolve(&corpus, c.seed);
    let model = match &file.base_checkpoint {
        Some(p) => SshrModel::from_base(model_cfg.clone(), &SshrModel::load(p)?)?,
        None => SshrModel::new(model_cfg.clone())?,
    };
    create_out(&c.out)?;
    let outcome = train_model(model, &file.train, &corpus.train, &corpus.dev, TrainOutputs { dir: Some(&c.out) })?;
    if let Some(last) = outcome.metrics.last() {
        println!("step {} loss {:.4} dev PER {:.4}", last.step, last.loss, last.dev_per);
    }
    if outcome.skipped > 0 {
        println!("skipped {} infeasible utterances", outcome.skipped);
    }
    Ok(json!({
        "corpus": file.corpus,
        "model": model_cfg,
        "train": file.train,
        "base_checkpoint": file.base_checkpoint,
    }))
}

fn eval(c: &Common, config: &Path) -> Outcome {
    let file = read_eval(config)?;
    let model = SshrModel::load(&file.checkpoint)?;
    let corpus = file.corpus.load()?;
    create_out(&c.out)?;
    let mut scores = Vec::new();
    for name in &file.splits {
        let utts = corpus
            .split(name)
            .ok_or_else(|| Failure::Validation(format!("unknown split {name:?}; expected train, dev or test")))?;
        let ev = evaluate(&model, utts)?;
        let vocab = model.vocabulary();
        let hyp_path = c.out.join(format!("hypotheses-{name}.jsonl"));
        let mut hyp = String::new();
        for (u, h) in utts.iter().zip(&ev.hypotheses) {
            let symbols: Vec<&str> = h.iter().map(|&t| vocab.symbol(t)).collect();
            hyp.push_str(&json!({"id": u.id, "hyp": symbols.join(" ")}).to_string());
            hyp.push('\n');
        }
        fs::write(&hyp_path, hyp).map_err(|e| Failure::Runtime(format!("{}: {e}", hyp_path.display())))?;
        println!("{name}: PER {:.4} LID {:?}", ev.per, ev.lid_accuracy);
        scores.push(json!({"split": name, "per": ev.per, "lid_accuracy": ev.lid_accuracy, "utterances": utts.len()}));
    }
    write_json(&c.out.join("eval.json"), &scores)?;
    Ok(json!(file))
}

fn probe(c: &Common, config: &Path, k: Option<usize>, layer: Option<usize>) -> Outcome {
    let mut file = read_probe(config)?;
    file.probe.seed = c.seed;
    if k.is_some() {
        file.probe.k = k;
    }
    if let Some(d) = layer {
        file.probe.layers = Some(vec![d]);
    }
    let model = SshrModel::load(&file.checkpoint)?;
    let corpus = file.corpus.load()?;
    let utts = corpus
        .split(&file.split)
        .ok_or_else(|| Failure::Validation(format!("unknown split {:?}", file.split)))?;
    let report = probe_all_layers(&model, utts, &file.probe)?;
    create_out(&c.out)?;
    report.write(&c.out)?;
    print!("{}", report.to_csv());
    Ok(json!(file))
}

fn ablate(c: &Common, ladder: &str, seeds: u64, jobs: usize, config: Option<&Path>) -> Outcome {
    if seeds == 0 || jobs == 0 {
        return Err(Failure::Validation("--seeds and --jobs must be at least 1".into()));
    }
    let ladder = Ladder::resolve(ladder)?;
    let file = match config {
        Some(p) => read_ablate(p)?,
        None => AblateFile::default(),
    };
    let corpus = file.corpus.load()?;
    let seed_list: Vec<u64> = (1..=seeds).map(|i| c.seed + i).collect();
    create_out(&c.out)?;
    let report = run_ablation(&ladder, &seed_list, &corpus, jobs, Some(&c.out))?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "variant  test_per(mean±sd)  lid_acc  rel_impr  failed");
    for s in &report.summary {
        let per = s.test_per.as_ref().map_or("-".into(), |t| format!("{:.4}±{:.4}", t.mean, t.sd));
        let lid = s.lid_accuracy.as_ref().map_or("-".into(), |t| format!("{:.3}", t.mean));
        let rel = s.relative_improvement.map_or("-".into(), |r| format!("{:+.1}%", 100.0 * r));
        let _ = writeln!(stdout, "{:<8} {:<18} {:<8} {:<9} {}", s.variant, per, lid, rel, s.failed_runs);
    }
    if report.results.iter().all(|r| r.error.is_some()) {
        return Err(Failure::Runtime("every run failed".into()));
    }
    Ok(json!({"ladder": ladder, "seeds": seed_list, "jobs": jobs, "corpus": file.corpus}))
}

fn gradcheck(c: &Common) -> Outcome {
    let report = gradcheck_suite(c.seed);
    create_out(&c.out)?;
    write_json(&c.out.join("gradcheck.json"), &report)?;
    for e in &report.entries {
        println!(
            "{:<28} {:>10.3e} {}",
            e.name,
            e.worst_relative,
            if e.passed { "ok" } else { "FAIL" }
        );
    }
    if !report.all_passed() {
        return Err(Failure::Runtime(format!(
            "gradient check failed for: {}",
            report.failures().iter().map(|e| e.name.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(json!({"step": report.step, "tolerance": report.tolerance}))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let started = now();
    let (name, common, result) = match &cli.command {
        Command::Datagen { common, config } => ("datagen", common, datagen(common, config.as_deref())),
        Command::Train { common, config } => ("train", common, train(common, config)),
        Command::Eval { common, config } => ("eval", common, eval(common, config)),
        Command::Probe { common, config, k, layer } => ("probe", common, probe(common, config, *k, *layer)),
        Command::Ablate {
            common,
            ladder,
            seeds,
            jobs,
            config,
        } => ("ablate", common, ablate(common, ladder, *seeds, *jobs, config.as_deref())),
        Command::Gradcheck { common } => ("gradcheck", common, gradcheck(common)),
    };
    match result {
        Ok(config) => write_manifest(name, common, config, started, None),
        Err(e) => {
            if common.out.is_dir() {
                let msg = match &e {
                    Failure::Validation(m) | Failure::Runtime(m) => m.clone(),
                };
                let _ = write_manifest(name, common, serde_json::Value::Null, started, Some(msg));
            }
            Err(e)
        }
    }
}

fn write_manifest(
    command: &'static str,
    c: &Common,
    config: serde_json::Value,
    started: String,
    error: Option<String>,
) -> Result<(), Failure> {
    let manifest = RunManifest {
        command,
        config,
        seed: c.seed,
        version: env!("CARGO_PKG_VERSION"),
        started,
        finished: now(),
        outputs: list_outputs(&c.out),
        error,
    };
    write_json(&c.out.join(MANIFEST), &manifest)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SSHR_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
