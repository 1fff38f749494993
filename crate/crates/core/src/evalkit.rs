//! Edit-distance metrics, LID accuracy, split evaluation and the ablation ladder.

use rayon::prelude::*;

use crate::ctc::{ctc_greedy_decode, Vocabulary};
use crate::datagen::Utterance;
use crate::error::{Error, Result};
use crate::sshr_model::SshrModel;

mod ladder;

pub use ladder::{
    config_hash, default_ladder, ladder_by_name, run_ablation, summarize, AblationReport, ExperimentResult,
    Ladder, Reference, Stat, VariantConfig, VariantSummary, LADDER_NAMES,
};

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Pooled `Σ edit_distance / Σ |ref|` after removing LID tokens from both sides.
pub fn error_rate(refs: &[Vec<usize>], hyps: &[Vec<usize>], vocab: &Vocabulary) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::config(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut errors = 0usize;
    let mut total = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (vocab.strip_lid(r), vocab.strip_lid(h));
        errors += edit_distance(&r, &h);
        total += r.len();
    }
    if total == 0 {
        return Err(Error::EmptyInput { op: "error_rate" });
    }
    Ok(errors as f64 / total as f64)
}

/// Fraction of decodes whose first token is the right LID token.
pub fn lid_accuracy(decoded: &[Vec<usize>], langs: &[usize], vocab: &Vocabulary) -> f64 {
    if decoded.is_empty() {
        return 0.0;
    }
    let hits = decoded
        .iter()
        .zip(langs)
        .filter(|(d, &l)| d.first().is_some_and(|&t| vocab.lid_token(l).is_ok_and(|want| want == t)))
        .count();
    hits as f64 / decoded.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per: f64,
    /// Present when the model was trained with LID targets.
    pub lid_accuracy: Option<f64>,
    pub hypotheses: Vec<Vec<usize>>,
}

/// Greedy-decodes every utterance and scores the split.
pub fn evaluate(model: &SshrModel, utts: &[Utterance]) -> Result<Evaluation> {
    let hyps = utts
        .par_iter()
        .map(|u| {
            model
                .forward(&u.features, false)
                .map(|o| ctc_greedy_decode(&o.final_posterior.log_probs))
                .map_err(|e| e.at(format!("utterance {}", u.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let vocab = model.vocabulary();
    let refs: Vec<Vec<usize>> = utts.iter().map(|u| u.transcript.clone()).collect();
    let langs: Vec<usize> = utts.iter().map(|u| u.lang).collect();
    Ok(Evaluation {
        per: error_rate(&refs, &hyps, vocab)?,
        lid_accuracy: model
            .config()
            .lid_in_targets
            .then(|| lid_accuracy(&hyps, &langs, vocab)),
        hypotheses: hyps,
    })
}
