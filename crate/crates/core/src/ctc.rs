//! Connectionist temporal classification: exact loss, an enumeration oracle,
//! greedy decoding and the shared posterior head.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::kernels::logsumexp;
use crate::numcore::{NodeId, Scalar, Tape, Tensor};

pub const BLANK: usize = 0;

/// Token inventory: blank at 0, phonemes at `1..=P`, then one LID token per language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    phonemes: Vec<String>,
    languages: Vec<String>,
}

impl Vocabulary {
    pub fn new(phonemes: Vec<String>, languages: Vec<String>) -> Result<Self> {
        let v = Self {
            phonemes,
            languages,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phonemes.is_empty() {
            return Err(Error::config("vocabulary has no phonemes"));
        }
        let mut seen = HashMap::new();
        for id in 0..self.size() {
            let sym = self.symbol(id);
            if let Some(prev) = seen.insert(sym.to_string(), id) {
                return Err(Error::config(format!(
                    "symbol {sym:?} maps to ids {prev} and {id}"
                )));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        1 + self.phonemes.len() + self.languages.len()
    }

    pub fn num_phonemes(&self) -> usize {
        self.phonemes.len()
    }

    pub fn num_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn phonemes(&self) -> &[String] {
        &self.phonemes
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    /// Token id of global phoneme index `p`.
    pub fn phoneme_token(&self, p: usize) -> Result<usize> {
        if p < self.phonemes.len() {
            Ok(1 + p)
        } else {
            Err(Error::config(format!("phoneme index {p} out of range")))
        }
    }

    pub fn lid_token(&self, lang: usize) -> Result<usize> {
        if lang < self.languages.len() {
            Ok(1 + self.phonemes.len() + lang)
        } else {
            Err(Error::UnknownLanguage(lang))
        }
    }

    pub fn is_phoneme(&self, tok: usize) -> bool {
        (1..=self.phonemes.len()).contains(&tok)
    }

    pub fn is_lid(&self, tok: usize) -> bool {
        tok > self.phonemes.len() && tok < self.size()
    }

    pub fn language_of(&self, tok: usize) -> Option<usize> {
        self.is_lid(tok).then(|| tok - 1 - self.phonemes.len())
    }

    pub fn symbol(&self, id: usize) -> &str {
        if id == BLANK {
            "<blank>"
        } else if self.is_phoneme(id) {
            &self.phonemes[id - 1]
        } else if self.is_lid(id) {
            &self.languages[id - 1 - self.phonemes.len()]
        } else {
            "<unk>"
        }
    }

    pub fn id_of(&self, symbol: &str) -> Option<usize> {
        (0..self.size()).find(|&id| self.symbol(id) == symbol)
    }

    pub fn strip_lid(&self, tokens: &[usize]) -> Vec<usize> {
        tokens.iter().copied().filter(|&t| !self.is_lid(t)).collect()
    }
}

/// Log-probabilities from the shared head at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPosterior<T> {
    /// 1-based encoder layer the posterior was read from.
    pub layer: usize,
    pub log_probs: Tensor<T>,
}

/// Minimum number of frames CTC needs to emit `targets`.
pub fn min_frames(targets: &[usize]) -> usize {
    targets.len() + targets.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_targets(targets: &[usize], vocab: usize, blank: usize) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::config("CTC targets are empty"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t == blank || t >= vocab) {
        return Err(Error::config(format!(
            "invalid CTC target {t} (blank {blank}, vocabulary {vocab})"
        )));
    }
    Ok(())
}

/// Negative log-likelihood of `targets` under frame-wise `log_probs` (T'×V),
/// with its gradient w.r.t. `log_probs`.
///
/// Forward and backward variables are kept in log space; infeasible lengths
/// are reported as [`Error::CtcInfeasible`].
pub fn ctc_loss<T: Scalar>(
    log_probs: &Tensor<T>,
    targets: &[usize],
    blank: usize,
) -> Result<(T, Vec<T>)> {
    let (frames, vocab) = match log_probs.shape() {
        [t, v] => (*t, *v),
        s => return Err(Error::config(format!("ctc_loss expects T×V, got {s:?}"))),
    };
    check_targets(targets, vocab, blank)?;
    let required = min_frames(targets);
    if frames < required {
        return Err(Error::CtcInfeasible {
            frames,
            targets: targets.len(),
            required,
        });
    }

    let lp = log_probs.values();
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(targets.iter().flat_map(|&t| [t, blank]))
        .collect();
    let s_len = ext.len();
    let ninf = T::neg_infinity();
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp[ext[0]];
    alpha[1] = lp[ext[1]];
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf {
                ninf
            } else {
                acc + lp[t * vocab + ext[s]]
            };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = lp[(frames - 1) * vocab + ext[s_len - 1]];
    beta[last + s_len - 2] = lp[(frames - 1) * vocab + ext[s_len - 2]];
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        for s in 0..s_len {
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = lse2(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = lse2(acc, next[s + 2]);
            }
            cur[s] = if acc == ninf {
                ninf
            } else {
                acc + lp[t * vocab + ext[s]]
            };
        }
    }

    let log_z = lse2(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if !log_z.is_finite() {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }

    // d(-log Z)/d lp[t,k] = -Σ_{s: ext[s]=k} exp(α + β − lp − log Z)
    let mut grad = vec![T::zero(); frames * vocab];
    for t in 0..frames {
        for (s, &k) in ext.iter().enumerate() {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            grad[t * vocab + k] -= (a + b - lp[t * vocab + k] - log_z).exp();
        }
    }
    Ok((-log_z, grad))
}

fn lse2<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Records the CTC loss of `log_probs` on the tape as a scalar node.
pub fn ctc_loss_node<T: Scalar>(
    tape: &mut Tape<T>,
    log_probs: NodeId,
    targets: &[usize],
) -> Result<NodeId> {
    let (loss, grad) = ctc_loss(tape.value(log_probs), targets, BLANK)?;
    tape.precomputed(log_probs, loss, grad)
}

/// Upper bound on `V^T'` for [`ctc_brute_force`].
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

/// Collapses repeats, then removes blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Total probability of `targets` by enumerating every length-T' path over
/// frame-wise probabilities `probs` (not log-probabilities).
pub fn ctc_brute_force(probs: &Tensor<f64>, targets: &[usize], blank: usize) -> Result<f64> {
    let (frames, vocab) = match probs.shape() {
        [t, v] => (*t, *v),
        s => return Err(Error::config(format!("expected T×V, got {s:?}"))),
    };
    let total = (vocab as u64).checked_pow(frames as u32);
    if total.is_none_or(|n| n > BRUTE_FORCE_LIMIT) {
        return Err(Error::GuardExceeded(format!("{vocab}^{frames} paths")));
    }
    let p = probs.values();
    let mut path = vec![0usize; frames];
    let mut sum = 0.0;
    loop {
        if collapse(&path, blank) == targets {
            sum += path
                .iter()
                .enumerate()
                .map(|(t, &k)| p[t * vocab + k])
                .product::<f64>();
        }
        // odometer increment
        let mut i = frames;
        loop {
            if i == 0 {
                return Ok(sum);
            }
            i -= 1;
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Frame-wise argmax (ties go to the lower id), then [`collapse`].
pub fn ctc_greedy_decode<T: Scalar>(log_probs: &Tensor<T>) -> Vec<usize> {
    let vocab = log_probs.cols();
    let best: Vec<usize> = log_probs
        .values()
        .chunks_exact(vocab)
        .map(|row| {
            let mut arg = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = k;
                }
            }
            arg
        })
        .collect();
    collapse(&best, BLANK)
}

/// `log_softmax(hidden · w + b)` with one (w, b) pair shared by every layer that reads it.
pub fn ctc_head<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let logits = tape.linear(hidden, w, b)?;
    tape.log_softmax_rows(logits)
}

/// Row check used by tests and the gradcheck suite.
pub fn rows_normalized<T: Scalar>(log_probs: &Tensor<T>, tol: f64) -> bool {
    log_probs
        .values()
        .chunks_exact(log_probs.cols())
        .all(|r| logsumexp(r).as_f64().abs() <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOLERANCE};
    use crate::numcore::random_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn log_of(p: &[f64], cols: usize) -> Tensor<f64> {
        Tensor::matrix(p.len() / cols, cols, p.iter().map(|v| v.ln()).collect()).unwrap()
    }

    #[test]
    fn single_frame_forced_alignment() {
        let p = [0.2, 0.5, 0.3];
        let (loss, _) = ctc_loss(&log_of(&p, 3), &[1], BLANK).unwrap();
        assert!((loss - -(0.5f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_paths() {
        let p = [0.1, 0.6, 0.3, 0.4, 0.35, 0.25];
        let (loss, _) = ctc_loss(&log_of(&p, 3), &[1], BLANK).unwrap();
        let expected = p[1] * p[4] + p[1] * p[3] + p[0] * p[4];
        assert!(((-loss).exp() - expected).abs() < 1e-12);
        let probs = Tensor::matrix(2, 3, p.to_vec()).unwrap();
        assert!((ctc_brute_force(&probs, &[1], BLANK).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn brute_force_trivial_cases() {
        let uniform = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(ctc_brute_force(&uniform, &[1], BLANK).unwrap(), 0.5);
        // all mass on the path [a, blank, b]
        let det = Tensor::matrix(3, 3, vec![0., 1., 0., 1., 0., 0., 0., 0., 1.]).unwrap();
        assert_eq!(ctc_brute_force(&det, &[1, 2], BLANK).unwrap(), 1.0);
        let big = Tensor::filled(vec![12, 5], 0.2).unwrap();
        assert!(matches!(
            ctc_brute_force(&big, &[1], BLANK),
            Err(Error::GuardExceeded(_))
        ));
    }

    #[test]
    fn random_instance_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random_tensor(&mut rng, vec![5, 4]);
        let lp = Tensor::matrix(
            5,
            4,
            crate::numcore::kernels::log_softmax_rows(logits.values(), 4),
        )
        .unwrap();
        let probs = Tensor::matrix(5, 4, lp.values().iter().map(|v| v.exp()).collect()).unwrap();
        let targets = [2, 3];
        let (loss, _) = ctc_loss(&lp, &targets, BLANK).unwrap();
        let brute = ctc_brute_force(&probs, &targets, BLANK).unwrap();
        assert!(((-loss).exp() - brute).abs() < 1e-6);
    }

    #[test]
    fn infeasible_length_is_an_error() {
        let lp = log_of(&[0.5, 0.5, 0.5, 0.5], 2);
        // [a, a] needs a blank between the repeats: 3 frames
        match ctc_loss(&lp, &[1, 1], BLANK) {
            Err(Error::CtcInfeasible { required, .. }) => assert_eq!(required, 3),
            other => panic!("expected infeasibility, got {other:?}"),
        }
        assert!(ctc_loss(&lp, &[0], BLANK).is_err());
        assert!(ctc_loss(&lp, &[], BLANK).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lp = random_tensor(&mut rng, vec![6, 4]);
        let r = check_gradients(&[lp], DEFAULT_STEP, |t, ids| {
            ctc_loss_node(t, ids[0], &[1, 3, 3])
        })
        .unwrap();
        assert!(r.passes(DEFAULT_TOLERANCE), "{r:?}");
    }

    #[test]
    fn greedy_decode_examples() {
        let onehot = |ids: &[usize]| {
            let mut v = vec![0.0f64; ids.len() * 3];
            for (t, &k) in ids.iter().enumerate() {
                v[t * 3 + k] = 1.0;
            }
            Tensor::matrix(ids.len(), 3, v).unwrap()
        };
        assert_eq!(ctc_greedy_decode(&onehot(&[1, 1, 0, 2])), vec![1, 2]);
        assert_eq!(ctc_greedy_decode(&onehot(&[0, 0, 0])), Vec::<usize>::new());
        assert_eq!(ctc_greedy_decode(&onehot(&[1, 0, 1])), vec![1, 1]);
        let tie = Tensor::matrix(1, 3, vec![0.0, 0.5, 0.5]).unwrap();
        assert_eq!(ctc_greedy_decode(&tie), vec![1]);
    }

    #[test]
    fn head_examples() {
        let mut t = Tape::<f64>::new();
        let h = t.constant(vec![3, 4], vec![0.0; 12]).unwrap();
        let w = t.param(vec![4, 5], vec![0.3; 20]).unwrap();
        let b = t.param(vec![5], vec![0.0; 5]).unwrap();
        let lp = ctc_head(&mut t, h, w, b).unwrap();
        assert!(t
            .value(lp)
            .values()
            .iter()
            .all(|&v| (v - (0.2f64).ln()).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let row: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows: Vec<f64> = row.iter().cycle().take(12).copied().collect();
        let h2 = t.constant(vec![3, 4], rows).unwrap();
        let w2 = t.leaf(random_tensor(&mut rng, vec![4, 5]));
        let lp2 = ctc_head(&mut t, h2, w2, b).unwrap();
        let v = t.value(lp2);
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(v.row(1), v.row(2));
        assert!(rows_normalized(v, 1e-12));

        let bad = t.constant(vec![3, 3], vec![0.0; 9]).unwrap();
        assert!(matches!(ctc_head(&mut t, bad, w, b), Err(Error::Config(_))));
    }

    #[test]
    fn head_and_loss_composite_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random_tensor(&mut rng, vec![5, 4]);
        let w = random_tensor(&mut rng, vec![4, 5]);
        let b = random_tensor(&mut rng, vec![5]);
        let r = check_gradients(&[h, w, b], DEFAULT_STEP, |t, ids| {
            let lp = ctc_head(t, ids[0], ids[1], ids[2])?;
            ctc_loss_node(t, lp, &[2, 4])
        })
        .unwrap();
        assert!(r.passes(DEFAULT_TOLERANCE), "{r:?}");
    }

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["en".into(), "fr".into()],
        )
        .unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.lid_token(1).unwrap(), 5);
        assert!(v.is_lid(4) && v.is_lid(5) && !v.is_lid(3));
        assert_eq!(v.language_of(4), Some(0));
        assert_eq!(v.id_of("b"), Some(2));
        assert!(matches!(v.lid_token(2), Err(Error::UnknownLanguage(2))));
        assert!(Vocabulary::new(vec!["a".into()], vec!["a".into()]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (usize, usize, Vec<usize>, u64)> {
            (1usize..=6, 2usize..=5).prop_flat_map(|(frames, vocab)| {
                (
                    Just(frames),
                    Just(vocab),
                    prop::collection::vec(1..vocab, 1..=3),
                    any::<u64>(),
                )
            })
        }

        proptest! {
            #[test]
            fn loss_matches_enumeration((frames, vocab, targets, seed) in instance()) {
                prop_assume!(min_frames(&targets) <= frames);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let logits = random_tensor(&mut rng, vec![frames, vocab]).values().iter().map(|v| v * 3.0).collect::<Vec<_>>();
                let lp = Tensor::matrix(frames, vocab, crate::numcore::kernels::log_softmax_rows(&logits, vocab)).unwrap();
                let probs = Tensor::matrix(frames, vocab, lp.values().iter().map(|v| v.exp()).collect()).unwrap();
                let (loss, _) = ctc_loss(&lp, &targets, BLANK).unwrap();
                let brute = ctc_brute_force(&probs, &targets, BLANK).unwrap();
                prop_assert!(((-loss).exp() - brute).abs() < 1e-6);
            }

            #[test]
            fn loss_is_relabeling_covariant((frames, vocab, targets, seed) in instance()) {
                prop_assume!(min_frames(&targets) <= frames);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let lp = random_tensor(&mut rng, vec![frames, vocab]);
                // reverse the non-blank ids: k -> vocab - k
                let relabel = |k: usize| if k == BLANK { BLANK } else { vocab - k };
                let mut permuted = vec![0.0; frames * vocab];
                for t in 0..frames {
                    for k in 0..vocab {
                        permuted[t * vocab + relabel(k)] = lp.values()[t * vocab + k];
                    }
                }
                let lp2 = Tensor::matrix(frames, vocab, permuted).unwrap();
                let t2: Vec<usize> = targets.iter().map(|&k| relabel(k)).collect();
                let (a, _) = ctc_loss(&lp, &targets, BLANK).unwrap();
                let (b, _) = ctc_loss(&lp2, &t2, BLANK).unwrap();
                prop_assert!((a - b).abs() < 1e-9);
            }

            #[test]
            fn decode_then_reencode_is_stable(path in prop::collection::vec(0usize..4, 0..20)) {
                let decoded = collapse(&path, BLANK);
                prop_assert!(!decoded.contains(&BLANK));
                // canonical re-encoding: one frame per token with a blank after each
                let reencoded: Vec<usize> = decoded.iter().flat_map(|&k| [k, BLANK]).collect();
                prop_assert_eq!(collapse(&reencoded, BLANK), decoded);
            }
        }
    }
}
