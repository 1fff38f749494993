//! Synthetic multilingual corpus: per-language affine realizations of shared
//! phoneme prototypes, plus the manifest / feature-shard file format.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::{collapse, Vocabulary, BLANK};
use crate::encoder::stream_rng;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const STREAM_PROTOTYPES: u64 = 1;
const STREAM_LANGUAGE: u64 = 1_000;
const STREAM_UTTERANCE: u64 = 1 << 32;

/// Largest accepted condition number of a language transform.
pub const MAX_CONDITION: f64 = 1e3;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub languages: usize,
    pub phonemes_per_language: usize,
    /// Phonemes present in every inventory.
    pub shared_phonemes: usize,
    pub feature_dim: usize,
    pub noise: f64,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub min_frames_per_phoneme: usize,
    pub max_frames_per_phoneme: usize,
    /// Per-language split sizes.
    pub train_per_language: usize,
    pub dev_per_language: usize,
    pub test_per_language: usize,
    /// Range of the per-axis scale inside each language transform.
    pub min_axis_scale: f64,
    pub max_axis_scale: f64,
    pub bias_scale: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            languages: 4,
            phonemes_per_language: 10,
            shared_phonemes: 4,
            feature_dim: 16,
            noise: 0.3,
            min_phonemes: 6,
            max_phonemes: 10,
            min_frames_per_phoneme: 5,
            max_frames_per_phoneme: 8,
            train_per_language: 200,
            dev_per_language: 40,
            test_per_language: 40,
            min_axis_scale: 0.7,
            max_axis_scale: 1.4,
            bias_scale: 0.5,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.languages == 0 || self.feature_dim == 0 {
            return bad("languages and feature_dim must be positive");
        }
        if self.phonemes_per_language == 0 {
            return bad("empty phoneme inventory");
        }
        if self.shared_phonemes > self.phonemes_per_language {
            return bad("more shared phonemes than inventory size");
        }
        if self.phonemes_per_language < 2 && self.max_phonemes > 1 {
            return bad("an inventory of one phoneme cannot avoid adjacent repeats");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite value ≥ 0");
        }
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return bad("phoneme count range is empty");
        }
        if self.min_frames_per_phoneme == 0 || self.min_frames_per_phoneme > self.max_frames_per_phoneme {
            return bad("frames-per-phoneme range is empty");
        }
        if self.train_per_language == 0 || self.dev_per_language == 0 || self.test_per_language == 0 {
            return bad("split counts must be ≥ 1");
        }
        if !(self.min_axis_scale > 0.0 && self.min_axis_scale <= self.max_axis_scale) {
            return bad("axis scale range must be positive and nonempty");
        }
        Ok(())
    }

    pub fn total_phonemes(&self) -> usize {
        self.shared_phonemes + self.languages * (self.phonemes_per_language - self.shared_phonemes)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(
            (0..self.total_phonemes()).map(|p| format!("p{p:02}")).collect(),
            (0..self.languages).map(|l| format!("<L{l}>")).collect(),
        )
    }

    pub fn split_counts(&self) -> [usize; 3] {
        [
            self.train_per_language * self.languages,
            self.dev_per_language * self.languages,
            self.test_per_language * self.languages,
        ]
    }

    /// Inventories, prototypes and transforms for every language.
    pub fn language_specs(&self) -> Result<Vec<LanguageSpec>> {
        self.validate()?;
        let f = self.feature_dim;
        let mut rng = stream_rng(self.seed, STREAM_PROTOTYPES);
        let prototypes: Vec<Vec<f64>> = (0..self.total_phonemes())
            .map(|_| (0..f).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let unique = self.phonemes_per_language - self.shared_phonemes;
        (0..self.languages)
            .map(|l| {
                let mut rng = stream_rng(self.seed, STREAM_LANGUAGE + l as u64);
                let gauss = DMatrix::<f64>::from_fn(f, f, |_, _| StandardNormal.sample(&mut rng));
                let q = gauss.qr().q();
                let scales: Vec<f64> = (0..f)
                    .map(|_| rng.random_range(self.min_axis_scale..=self.max_axis_scale))
                    .collect();
                let m = q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(scales));
                let bias = (0..f)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        self.bias_scale * e
                    })
                    .collect();
                let inventory: Vec<usize> = (0..self.shared_phonemes)
                    .chain(self.shared_phonemes + l * unique..self.shared_phonemes + (l + 1) * unique)
                    .collect();
                let spec = LanguageSpec {
                    id: l,
                    prototypes: inventory.iter().map(|&p| prototypes[p].clone()).collect(),
                    inventory,
                    transform: m.transpose().as_slice().to_vec(),
                    bias,
                    phonemes: (self.min_phonemes, self.max_phonemes),
                    frames_per_phoneme: (self.min_frames_per_phoneme, self.max_frames_per_phoneme),
                };
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: usize,
    /// Global phoneme indices (0-based, not token ids).
    pub inventory: Vec<usize>,
    /// Base prototype per inventory entry, `F` values each.
    pub prototypes: Vec<Vec<f64>>,
    /// Row-major `F×F` matrix `M`; a prototype `x` is realized as `M·x + bias`.
    pub transform: Vec<f64>,
    pub bias: Vec<f64>,
    pub phonemes: (usize, usize),
    pub frames_per_phoneme: (usize, usize),
}

impl LanguageSpec {
    pub fn feature_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.feature_dim();
        if self.inventory.is_empty() {
            return Err(Error::config(format!("language {} has an empty inventory", self.id)));
        }
        if self.prototypes.len() != self.inventory.len() || self.prototypes.iter().any(|p| p.len() != f) {
            return Err(Error::config(format!("language {} prototype shapes", self.id)));
        }
        if self.transform.len() != f * f {
            return Err(Error::config(format!("language {} transform is not {f}×{f}", self.id)));
        }
        let cond = self.condition_number();
        if !(cond <= MAX_CONDITION) {
            return Err(Error::config(format!(
                "language {} transform has condition number {cond:e}",
                self.id
            )));
        }
        Ok(())
    }

    pub fn condition_number(&self) -> f64 {
        let f = self.feature_dim();
        let sv = DMatrix::from_row_slice(f, f, &self.transform).singular_values();
        sv.max() / sv.min()
    }

    /// `M·prototype + bias` for inventory entry `slot`.
    pub fn realize(&self, slot: usize) -> Vec<f64> {
        let f = self.feature_dim();
        let x = &self.prototypes[slot];
        (0..f)
            .map(|r| {
                let row = &self.transform[r * f..(r + 1) * f];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.bias[r]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub lang: usize,
    /// `T×F`.
    pub features: Tensor<f32>,
    /// Phoneme token ids.
    pub transcript: Vec<usize>,
    /// Phoneme token id per frame.
    pub alignment: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn check(&self) -> Result<()> {
        let corrupt = |reason: String| Error::CorruptData {
            id: self.id.clone(),
            reason,
        };
        if self.alignment.len() != self.frames() {
            return Err(corrupt(format!(
                "{} alignment labels for {} frames",
                self.alignment.len(),
                self.frames()
            )));
        }
        if collapse(&self.alignment, BLANK) != self.transcript {
            return Err(corrupt("alignment does not collapse to the transcript".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocabulary: Vocabulary,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[Utterance]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

fn sample_utterance(
    spec: &LanguageSpec,
    realized: &[Vec<f64>],
    noise: f64,
    id: String,
    rng: &mut impl Rng,
) -> Utterance {
    let f = spec.feature_dim();
    let n = rng.random_range(spec.phonemes.0..=spec.phonemes.1);
    let mut slots = Vec::with_capacity(n);
    while slots.len() < n {
        let s = rng.random_range(0..spec.inventory.len());
        if slots.last() != Some(&s) {
            slots.push(s);
        }
    }
    let mut values = Vec::new();
    let mut alignment = Vec::new();
    for &s in &slots {
        let frames = rng.random_range(spec.frames_per_phoneme.0..=spec.frames_per_phoneme.1);
        for _ in 0..frames {
            for &v in &realized[s] {
                let e: f64 = StandardNormal.sample(rng);
                values.push((v + noise * e) as f32);
            }
            alignment.push(spec.inventory[s] + 1);
        }
    }
    let frames = alignment.len();
    Utterance {
        id,
        lang: spec.id,
        features: Tensor::new(vec![frames, f], values).expect("frames ≥ 1"),
        transcript: slots.iter().map(|&s| spec.inventory[s] + 1).collect(),
        alignment,
    }
}

/// Samples every split. Utterance `i` of a split belongs to language
/// `i mod L` and draws from its own stream, so the output does not depend
/// on how work is scheduled.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    let specs = cfg.language_specs()?;
    let realized: Vec<Vec<Vec<f64>>> = specs
        .iter()
        .map(|s| (0..s.inventory.len()).map(|k| s.realize(k)).collect())
        .collect();
    let counts = cfg.split_counts();
    let mut splits = Vec::with_capacity(3);
    let mut base = 0u64;
    for (name, &count) in SPLITS.iter().zip(&counts) {
        let utts: Vec<Utterance> = (0..count)
            .into_par_iter()
            .map(|i| {
                let lang = i % cfg.languages;
                let mut rng = stream_rng(cfg.seed, STREAM_UTTERANCE + base + i as u64);
                let id = format!("{name}-{lang}-{i:05}");
                sample_utterance(&specs[lang], &realized[lang], cfg.noise, id, &mut rng)
            })
            .collect();
        base += count as u64;
        splits.push(utts);
    }
    let test = splits.pop().unwrap();
    let dev = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Corpus {
        config: cfg.clone(),
        vocabulary: cfg.vocabulary()?,
        train,
        dev,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub id: String,
    pub lang: String,
    pub n_frames: usize,
    /// Space-separated phoneme symbols.
    pub transcript: String,
    pub feat_file: String,
    pub offset_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub config: CorpusConfig,
    pub vocabulary: Vocabulary,
}

pub const CORPUS_HEADER: &str = "corpus.json";

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `corpus.json` plus `{split}.jsonl`, `{split}.feats` and `{split}.ali` per split.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = CorpusHeader {
        config: corpus.config.clone(),
        vocabulary: corpus.vocabulary.clone(),
    };
    write(&dir.join(CORPUS_HEADER), serde_json::to_string_pretty(&header)?.as_bytes())?;
    for name in SPLITS {
        let utts = corpus.split(name).unwrap();
        let feat_file = format!("{name}.feats");
        let mut feats = Vec::new();
        let mut ali = Vec::new();
        let mut manifest = String::new();
        for u in utts {
            let row = ManifestRow {
                id: u.id.clone(),
                lang: corpus.vocabulary.languages()[u.lang].clone(),
                n_frames: u.frames(),
                transcript: symbols(&corpus.vocabulary, &u.transcript),
                feat_file: feat_file.clone(),
                offset_bytes: feats.len() as u64,
            };
            manifest.push_str(&serde_json::to_string(&row)?);
            manifest.push('\n');
            for v in u.features.values() {
                feats.extend_from_slice(&v.to_le_bytes());
            }
            for &a in &u.alignment {
                let a = u16::try_from(a).map_err(|_| Error::config("phoneme id exceeds 16 bits"))?;
                ali.extend_from_slice(&a.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&feats);
        feats.extend_from_slice(&crc.to_le_bytes());
        write(&dir.join(&feat_file), &feats)?;
        write(&dir.join(format!("{name}.ali")), &ali)?;
        write(&dir.join(format!("{name}.jsonl")), manifest.as_bytes())?;
    }
    Ok(())
}

fn symbols(vocab: &Vocabulary, tokens: &[usize]) -> String {
    tokens.iter().map(|&t| vocab.symbol(t)).collect::<Vec<_>>().join(" ")
}

pub fn read_header(dir: &Path) -> Result<CorpusHeader> {
    let path = dir.join(CORPUS_HEADER);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: CorpusHeader = serde_json::from_str(&text)?;
    header.vocabulary.validate()?;
    Ok(header)
}

/// Reads one split's manifest with its feature shard(s) and alignments.
///
/// Shapes are checked before checksums so a truncated shard names the first
/// utterance that no longer fits.
pub fn load_manifest(path: &Path, vocab: &Vocabulary, feature_dim: usize) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let rows: Vec<ManifestRow> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    let ali_path: PathBuf = path.with_extension("ali");
    let ali = fs::read(&ali_path).map_err(|e| Error::io(&ali_path, e))?;

    let mut shards: Vec<(String, Vec<u8>)> = Vec::new();
    let row_bytes = 4 * feature_dim;
    for row in &rows {
        if !shards.iter().any(|s| s.0 == row.feat_file) {
            let p = dir.join(&row.feat_file);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            shards.push((row.feat_file.clone(), bytes));
        }
        let shard = shards.iter().find(|s| s.0 == row.feat_file).unwrap();
        let data_len = shard.1.len().saturating_sub(4);
        let start = row.offset_bytes as usize;
        let end = start + row.n_frames * row_bytes;
        if row.n_frames == 0 || end > data_len {
            return Err(Error::CorruptData {
                id: row.id.clone(),
                reason: format!(
                    "{} frames at byte {start} overrun {} ({data_len} data bytes)",
                    row.n_frames, row.feat_file
                ),
            });
        }
    }
    for (name, bytes) in &shards {
        let (data, footer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(data) != u32::from_le_bytes(footer.try_into().unwrap()) {
            let first = rows.iter().find(|r| &r.feat_file == name).unwrap();
            return Err(Error::CorruptData {
                id: first.id.clone(),
                reason: format!("checksum mismatch in {name}, the shard starting at this utterance"),
            });
        }
    }

    let mut out = Vec::with_capacity(rows.len());
    let mut frame_cursor = 0usize;
    for row in rows {
        let corrupt = |reason: String| Error::CorruptData {
            id: row.id.clone(),
            reason,
        };
        let shard = shards.iter().find(|s| s.0 == row.feat_file).unwrap();
        let start = row.offset_bytes as usize;
        let end = start + row.n_frames * row_bytes;
        let values: Vec<f32> = shard.1[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let a_end = (frame_cursor + row.n_frames) * 2;
        if a_end > ali.len() {
            return Err(corrupt("alignment file too short".into()));
        }
        let alignment: Vec<usize> = ali[frame_cursor * 2..a_end]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
            .collect();
        frame_cursor += row.n_frames;
        let transcript = row
            .transcript
            .split_whitespace()
            .map(|s| vocab.id_of(s).filter(|&t| vocab.is_phoneme(t)))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| corrupt(format!("unknown symbol in transcript {:?}", row.transcript)))?;
        let lang = vocab
            .languages()
            .iter()
            .position(|l| *l == row.lang)
            .ok_or_else(|| corrupt(format!("unknown language {:?}", row.lang)))?;
        let utt = Utterance {
            id: row.id.clone(),
            lang,
            features: Tensor::new(vec![row.n_frames, feature_dim], values)?,
            transcript,
            alignment,
        };
        utt.check()?;
        out.push(utt);
    }
    if frame_cursor * 2 != ali.len() {
        return Err(Error::CorruptData {
            id: path.display().to_string(),
            reason: format!("alignment file holds {} labels, manifest {frame_cursor}", ali.len() / 2),
        });
    }
    Ok(out)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let header = read_header(dir)?;
    let f = header.config.feature_dim;
    let load = |name: &str| load_manifest(&dir.join(format!("{name}.jsonl")), &header.vocabulary, f);
    Ok(Corpus {
        train: load("train")?,
        dev: load("dev")?,
        test: load("test")?,
        config: header.config,
        vocabulary: header.vocabulary,
    })
}
