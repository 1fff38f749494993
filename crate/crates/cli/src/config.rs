//! JSON run files. Relative paths inside a file resolve against its directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sshr_core::datagen::{generate_corpus, load_corpus};
use sshr_core::{Corpus, CorpusConfig, Error, ProbeConfig, Result, SshrConfig, StackConfig, TrainConfig};

/// A corpus directory written by `datagen`, or settings to generate one in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorpusSource {
    Dir(PathBuf),
    Generate(CorpusConfig),
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Generate(CorpusConfig::default())
    }
}

impl CorpusSource {
    fn rebase(&mut self, base: &Path) {
        if let CorpusSource::Dir(p) = self {
            *p = base.join(&*p);
        }
    }

    pub fn load(&self) -> Result<Corpus> {
        match self {
            CorpusSource::Dir(p) => load_corpus(p),
            CorpusSource::Generate(c) => generate_corpus(c),
        }
    }
}

/// Model settings; input width and vocabulary come from the corpus.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub stack: StackConfig,
    pub lid_extract_layer: Option<usize>,
    pub lid_in_targets: bool,
    pub cross_taps: Vec<usize>,
    pub loss_weight: Option<f64>,
}

impl ModelSpec {
    pub fn resolve(&self, corpus: &Corpus, seed: u64) -> SshrConfig {
        SshrConfig {
            stack: self.stack.clone(),
            input_dim: corpus.config.feature_dim,
            lid_extract_layer: self.lid_extract_layer,
            lid_in_targets: self.lid_in_targets,
            cross_taps: self.cross_taps.clone(),
            loss_weight: self.loss_weight,
            vocabulary: corpus.vocabulary.clone(),
            seed,
        }
        .resolved()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFile {
    pub corpus: CorpusSource,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Unmodified trained stack whose weights seed the kept and copied layers.
    pub base_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub corpus: CorpusSource,
    #[serde(default = "default_eval_splits")]
    pub splits: Vec<String>,
}

fn default_eval_splits() -> Vec<String> {
    vec!["dev".into(), "test".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeFile {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub corpus: CorpusSource,
    #[serde(default = "default_probe_split")]
    pub split: String,
    #[serde(default)]
    pub probe: ProbeConfig,
}

fn default_probe_split() -> String {
    "test".into()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateFile {
    pub corpus: CorpusSource,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

fn dir_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn read_train(path: &Path) -> Result<TrainFile> {
    let mut f: TrainFile = read_json(path)?;
    let base = dir_of(path);
    f.corpus.rebase(&base);
    f.base_checkpoint = f.base_checkpoint.map(|p| base.join(p));
    Ok(f)
}

pub fn read_eval(path: &Path) -> Result<EvalFile> {
    let mut f: EvalFile = read_json(path)?;
    let base = dir_of(path);
    f.corpus.rebase(&base);
    f.checkpoint = base.join(&f.checkpoint);
    Ok(f)
}

pub fn read_probe(path: &Path) -> Result<ProbeFile> {
    let mut f: ProbeFile = read_json(path)?;
    let base = dir_of(path);
    f.corpus.rebase(&base);
    f.checkpoint = base.join(&f.checkpoint);
    Ok(f)
}

pub fn read_ablate(path: &Path) -> Result<AblateFile> {
    let mut f: AblateFile = read_json(path)?;
    f.corpus.rebase(&dir_of(path));
    Ok(f)
}

pub fn read_corpus_config(path: &Path) -> Result<CorpusConfig> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<TrainFile>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<TrainFile>(r#"{"model": {"cross_tap": [1]}}"#).is_err());
        assert!(serde_json::from_str::<TrainFile>(r#"{"train": {"step": 3}}"#).is_err());
    }

    #[test]
    fn corpus_source_forms() {
        let f: TrainFile = serde_json::from_str(r#"{"corpus": "data"}"#).unwrap();
        assert_eq!(f.corpus, CorpusSource::Dir("data".into()));
        let f: TrainFile = serde_json::from_str(r#"{"corpus": {"noise": 0.0}}"#).unwrap();
        let CorpusSource::Generate(c) = f.corpus else { panic!() };
        assert_eq!(c.noise, 0.0);
        assert!(serde_json::from_str::<TrainFile>(r#"{"corpus": {"nosie": 0.0}}"#).is_err());
    }
}
