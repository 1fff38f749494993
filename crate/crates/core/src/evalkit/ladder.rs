use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::Vocabulary;
use crate::datagen::Corpus;
use crate::encoder::{StackConfig, Surgery};
use crate::error::{Error, Result};
use crate::sshr_model::SshrConfig;
use crate::trainer::{train, TrainConfig, TrainOutputs};

use super::evaluate;

/// A published score attached to a variant for context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub value: f64,
    pub table: String,
}

/// Model-side settings of one ladder row; dimensions come from the ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub surgery: Surgery,
    #[serde(default)]
    pub lid_extract_layer: Option<usize>,
    #[serde(default)]
    pub lid_in_targets: bool,
    #[serde(default)]
    pub cross_taps: Vec<usize>,
    #[serde(default)]
    pub loss_weight: Option<f64>,
    #[serde(default)]
    pub reference: Vec<Reference>,
}

impl VariantConfig {
    fn new(id: &str, description: &str, refs: &[(f64, &str)]) -> Self {
        Self {
            id: id.into(),
            description: description.into(),
            surgery: Surgery::None,
            lid_extract_layer: None,
            lid_in_targets: false,
            cross_taps: Vec::new(),
            loss_weight: None,
            reference: refs
                .iter()
                .map(|&(value, table)| Reference {
                    value,
                    table: table.into(),
                })
                .collect(),
        }
    }

    pub fn model_config(&self, stack: &StackConfig, input_dim: usize, vocabulary: &Vocabulary, seed: u64) -> SshrConfig {
        SshrConfig {
            stack: StackConfig {
                surgery: self.surgery,
                ..stack.clone()
            },
            input_dim,
            lid_extract_layer: self.lid_extract_layer,
            lid_in_targets: self.lid_in_targets,
            cross_taps: self.cross_taps.clone(),
            loss_weight: self.loss_weight,
            vocabulary: vocabulary.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ladder {
    pub name: String,
    /// Shared dimensions; any surgery here is replaced by each variant's.
    #[serde(default)]
    pub stack: StackConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub variants: Vec<VariantConfig>,
}

pub const LADDER_NAMES: [&str; 4] = ["default", "lid", "refine", "content"];

fn with(mut v: VariantConfig, f: impl FnOnce(&mut VariantConfig)) -> VariantConfig {
    f(&mut v);
    v
}

fn b0() -> VariantConfig {
    VariantConfig::new("B0", "baseline", &[(6.70, "Table 1")])
}

fn c1(refs: &[(f64, &str)]) -> VariantConfig {
    with(VariantConfig::new("C1", "+ LID frame from layer 3", refs), |v| {
        v.lid_extract_layer = Some(3);
        v.lid_in_targets = true;
    })
}

fn c2() -> VariantConfig {
    with(VariantConfig::new("C2", "+ delete last layer", &[(6.25, "Table 1")]), |v| {
        v.surgery = Surgery::DeleteLast(1);
    })
}

fn c3() -> VariantConfig {
    with(VariantConfig::new("C3", "+ Cross-CTC at layers 5 and 7", &[(6.12, "Table 1")]), |v| {
        v.cross_taps = vec![5, 7];
    })
}

/// The 8-layer stack used by every built-in ladder.
pub fn default_ladder() -> Ladder {
    Ladder {
        name: "default".into(),
        stack: StackConfig::default(),
        train: TrainConfig::default(),
        variants: vec![
            b0(),
            c1(&[(6.39, "Table 1"), (6.38, "Table 2")]),
            c2(),
            c3(),
            with(
                VariantConfig::new("C4", "LID frame + delete last layer + Cross-CTC at 4 and 6", &[(6.09, "Table 1")]),
                |v| {
                    v.lid_extract_layer = Some(3);
                    v.lid_in_targets = true;
                    v.surgery = Surgery::DeleteLast(1);
                    v.cross_taps = vec![4, 6];
                },
            ),
        ],
    }
}

pub fn ladder_by_name(name: &str) -> Option<Ladder> {
    let base = default_ladder();
    let variants = match name {
        "default" => return Some(base),
        "lid" => vec![
            b0(),
            with(
                VariantConfig::new("D2", "LID token in targets, no LID frame", &[(6.68, "Table 2")]),
                |v| v.lid_in_targets = true,
            ),
            with(VariantConfig::new("D3", "LID frame from layer 1", &[(6.51, "Table 2")]), |v| {
                v.lid_extract_layer = Some(1);
                v.lid_in_targets = true;
            }),
            c1(&[(6.38, "Table 2"), (6.39, "Table 1")]),
        ],
        "refine" => vec![
            b0(),
            with(VariantConfig::new("E1", "random init last layer", &[(6.44, "Table 3")]), |v| {
                v.surgery = Surgery::RandomInitLast(1);
            }),
            with(VariantConfig::new("E2", "replace last layer with a middle copy", &[(6.52, "Table 3")]), |v| {
                v.surgery = Surgery::ReplaceLastWithMiddle(1);
            }),
            with(VariantConfig::new("E3", "delete last 2 layers", &[(6.26, "Table 3")]), |v| {
                v.surgery = Surgery::DeleteLast(2);
            }),
            c2(),
        ],
        "content" => vec![
            b0(),
            with(VariantConfig::new("F2", "Cross-CTC at layer 7", &[(6.13, "Table 4")]), |v| {
                v.cross_taps = vec![7];
            }),
            c3(),
        ],
        _ => return None,
    };
    Some(Ladder {
        name: name.into(),
        variants,
        ..base
    })
}

impl Ladder {
    /// A built-in name or a path to a ladder JSON file.
    pub fn resolve(spec: &str) -> Result<Self> {
        if let Some(l) = ladder_by_name(spec) {
            return Ok(l);
        }
        let path = Path::new(spec);
        if !path.exists() {
            return Err(Error::config(format!(
                "ladder {spec:?} is neither one of {LADDER_NAMES:?} nor an existing file"
            )));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ladder: Ladder = serde_json::from_str(&text)?;
        ladder.validate()?;
        Ok(ladder)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::config("ladder has no variants"));
        }
        self.train.validate()?;
        let vocab = Vocabulary::new(vec!["x".into()], vec!["<l>".into()])?;
        for v in &self.variants {
            v.model_config(&self.stack, 1, &vocab, 0)
                .validate()
                .map_err(|e| e.at(format!("variant {}", v.id)))?;
        }
        Ok(())
    }
}

/// CRC-32 of the canonical JSON of everything that determines a run.
pub fn config_hash(model: &SshrConfig, train: &TrainConfig) -> String {
    let value = serde_json::json!({ "model": model.resolved(), "train": train });
    format!("{:08x}", crc32fast::hash(value.to_string().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub dev_per: Option<f64>,
    pub test_per: Option<f64>,
    pub lid_accuracy: Option<f64>,
    pub reference: Vec<Reference>,
    pub error: Option<String>,
    /// Not serialized: timing is the one output allowed to vary between runs.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Stat {
    /// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n: xs.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub description: String,
    pub dev_per: Option<Stat>,
    pub test_per: Option<Stat>,
    pub lid_accuracy: Option<Stat>,
    /// `(first − this) / first` on mean test PER, relative to the first row.
    pub relative_improvement: Option<f64>,
    pub reference: Vec<Reference>,
    pub failed_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ladder: String,
    pub seeds: Vec<u64>,
    pub results: Vec<ExperimentResult>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,dev_per,test_per,lid_acc,paper_ref_value,paper_ref_table\n");
        let num = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.results {
            let values: Vec<String> = r.reference.iter().map(|p| p.value.to_string()).collect();
            let tables: Vec<&str> = r.reference.iter().map(|p| p.table.as_str()).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.variant,
                r.seed,
                num(r.dev_per),
                num(r.test_per),
                num(r.lid_accuracy),
                values.join(";"),
                tables.join(";")
            );
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("ablation.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("ablation.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}

pub fn summarize(ladder: &Ladder, results: &[ExperimentResult]) -> Vec<VariantSummary> {
    let mut out: Vec<VariantSummary> = Vec::new();
    for v in &ladder.variants {
        if out.iter().any(|s| s.variant == v.id) {
            continue;
        }
        let rows: Vec<&ExperimentResult> = results.iter().filter(|r| r.variant == v.id).collect();
        let col = |f: fn(&ExperimentResult) -> Option<f64>| Stat::of(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
        out.push(VariantSummary {
            variant: v.id.clone(),
            description: v.description.clone(),
            dev_per: col(|r| r.dev_per),
            test_per: col(|r| r.test_per),
            lid_accuracy: col(|r| r.lid_accuracy),
            relative_improvement: None,
            reference: v.reference.clone(),
            failed_runs: rows.iter().filter(|r| r.error.is_some()).count(),
        });
    }
    if let Some(base) = out.first().and_then(|s| s.test_per.as_ref()).map(|s| s.mean) {
        for s in &mut out {
            s.relative_improvement = s.test_per.as_ref().filter(|_| base > 0.0).map(|t| (base - t.mean) / base);
        }
    }
    out
}

fn run_one(ladder: &Ladder, v: &VariantConfig, seed: u64, corpus: &Corpus, out: Option<&Path>) -> ExperimentResult {
    let start = Instant::now();
    let model_cfg = v.model_config(&ladder.stack, corpus.config.feature_dim, &corpus.vocabulary, seed);
    let train_cfg = TrainConfig {
        seed,
        ..ladder.train.clone()
    };
    let mut result = ExperimentResult {
        variant: v.id.clone(),
        seed,
        config_hash: config_hash(&model_cfg, &train_cfg),
        dev_per: None,
        test_per: None,
        lid_accuracy: None,
        reference: v.reference.clone(),
        error: None,
        wall_clock_secs: 0.0,
    };
    let dir = out.map(|d| d.join(format!("{}-seed{seed}", v.id)));
    let run = || -> Result<(f64, f64, Option<f64>)> {
        let trained = train(
            &model_cfg,
            &train_cfg,
            &corpus.train,
            &corpus.dev,
            TrainOutputs { dir: dir.as_deref() },
        )?;
        let dev = evaluate(&trained.model, &corpus.dev)?;
        let test = evaluate(&trained.model, &corpus.test)?;
        Ok((dev.per, test.per, test.lid_accuracy))
    };
    match run() {
        Ok((d, t, l)) => {
            result.dev_per = Some(d);
            result.test_per = Some(t);
            result.lid_accuracy = l;
        }
        Err(e) => {
            log::error!("variant {} seed {seed} failed: {e}", v.id);
            result.error = Some(e.to_string());
        }
    }
    result.wall_clock_secs = start.elapsed().as_secs_f64();
    log::info!(
        "{} seed {seed}: test PER {:?} LID {:?} ({:.1}s)",
        v.id,
        result.test_per,
        result.lid_accuracy,
        result.wall_clock_secs
    );
    result
}

/// Trains and scores every (variant, seed) pair, `jobs` at a time, and
/// reports rows in ladder order. A failing run is recorded and skipped.
pub fn run_ablation(ladder: &Ladder, seeds: &[u64], corpus: &Corpus, jobs: usize, out: Option<&Path>) -> Result<AblationReport> {
    ladder.train.validate()?;
    if seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    let runs: Vec<(&VariantConfig, u64)> = ladder
        .variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<ExperimentResult> = if jobs <= 1 {
        runs.iter().map(|&(v, s)| run_one(ladder, v, s, corpus, out)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| runs.par_iter().map(|&(v, s)| run_one(ladder, v, s, corpus, out)).collect())
    };
    let report = AblationReport {
        ladder: ladder.name.clone(),
        seeds: seeds.to_vec(),
        summary: summarize(ladder, &results),
        results,
    };
    if let Some(d) = out {
        report.write(d)?;
    }
    Ok(report)
}
