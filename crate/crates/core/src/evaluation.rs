//! Identification accuracy, cosine verification scoring and equal error rate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::features::FeatureMatrix;
use crate::numerics::{math, Tensor};
use crate::variants::{SpeakerEmbedding, SpeakerModel};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<(Trial, f64)>,
}

impl ScoreSet {
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut tar, mut non) = (Vec::new(), Vec::new());
        for (t, s) in &self.scores {
            if t.target { tar.push(*s) } else { non.push(*s) }
        }
        (tar, non)
    }

    pub fn eer(&self) -> Result<EerResult> {
        let (tar, non) = self.split();
        eer(&tar, &non)
    }
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_score", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = math::sqrt(a.iter().map(|x| x * x).sum());
    let nb = math::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Evaluation("cannot score a zero embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Percentage of rows of `logits: [B, C]` whose argmax equals the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape("top1_accuracy", logits.shape(), &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Evaluation("accuracy over an empty set".into()));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) == l)
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult {
    /// Percent.
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate over a threshold sweep at every distinct score, with
/// `FAR(θ) = #{nontarget ≥ θ} / N_non` and `FRR(θ) = #{target < θ} / N_tar`.
/// When the two curves cross between adjacent sweep points the crossing is
/// linearly interpolated (in both the rate and the threshold).
pub fn eer(targets: &[f64], nontargets: &[f64]) -> Result<EerResult> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::Evaluation("EER needs at least one target and one nontarget score".into()));
    }
    if targets.iter().chain(nontargets).any(|s| !s.is_finite()) {
        return Err(Error::Evaluation("non-finite score".into()));
    }
    let mut all: Vec<(f64, bool)> = targets
        .iter()
        .map(|&s| (s, true))
        .chain(nontargets.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, nn) = (targets.len() as f64, nontargets.len() as f64);
    // Walk the distinct scores upward; before each group, `tar_below` and
    // `non_below` count scores strictly under the threshold.
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut prev: Option<(f64, f64, f64)> = None;
    let mut i = 0;
    while i < all.len() {
        let theta = all[i].0;
        let far = (nontargets.len() - non_below) as f64 / nn;
        let frr = tar_below as f64 / nt;
        let d = far - frr;
        if d <= 0.0 {
            return Ok(match prev {
                Some((p_theta, p_far, p_frr)) if d < 0.0 => {
                    let pd = p_far - p_frr;
                    let s = pd / (pd - d);
                    EerResult {
                        eer: 100.0 * (p_far + s * (far - p_far)),
                        threshold: p_theta + s * (theta - p_theta),
                    }
                }
                _ => EerResult {
                    eer: 100.0 * far,
                    threshold: theta,
                },
            });
        }
        prev = Some((theta, far, frr));
        while i < all.len() && all[i].0 == theta {
            if all[i].1 { tar_below += 1 } else { non_below += 1 }
            i += 1;
        }
    }
    unreachable!("the top score always closes the sweep")
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentificationReport {
    /// Percent.
    pub accuracy: f64,
    pub n_utterances: usize,
}

/// Label index of each utterance's speaker within `speakers`.
pub fn speaker_labels(utts: &[FeatureMatrix], speakers: &[String]) -> Result<Vec<usize>> {
    utts.iter()
        .map(|u| {
            speakers.iter().position(|s| *s == u.speaker_id).ok_or_else(|| {
                Error::Evaluation(format!("utterance {} has unknown speaker {}", u.utterance_id, u.speaker_id))
            })
        })
        .collect()
}

/// Top-1 accuracy of whole (uncropped, unaugmented) utterances, dropout off.
pub fn evaluate_identification(
    model: &SpeakerModel,
    utts: &[FeatureMatrix],
    speakers: &[String],
) -> Result<IdentificationReport> {
    if speakers.len() != model.config.n_speakers {
        return Err(Error::Evaluation(format!(
            "model classifies {} speakers, speaker list has {}",
            model.config.n_speakers,
            speakers.len()
        )));
    }
    let labels = speaker_labels(utts, speakers)?;
    let mut rows = Vec::with_capacity(utts.len() * speakers.len());
    for u in utts {
        rows.extend(model.logits(u)?);
    }
    let logits = Tensor::new(alloc::vec![utts.len(), speakers.len()], rows)?;
    Ok(IdentificationReport {
        accuracy: top1_accuracy(&logits, &labels)?,
        n_utterances: utts.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub eer: EerResult,
    pub scores: ScoreSet,
}

pub fn score_trials(trials: &TrialList, embeddings: &BTreeMap<String, SpeakerEmbedding>) -> Result<ScoreSet> {
    let lookup = |id: &str| {
        embeddings
            .get(id)
            .ok_or_else(|| Error::Evaluation(format!("trial references unknown utterance {id}")))
    };
    let scores = trials
        .trials
        .iter()
        .map(|t| {
            let s = cosine_score(&lookup(&t.enroll)?.vector, &lookup(&t.test)?.vector)?;
            Ok((t.clone(), s))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreSet { scores })
}

/// Embeds every utterance a trial needs once, scores trials by cosine
/// similarity, and computes the EER.
pub fn evaluate_verification(
    model: &SpeakerModel,
    utts: &[FeatureMatrix],
    trials: &TrialList,
) -> Result<VerificationReport> {
    let by_id: BTreeMap<&str, &FeatureMatrix> = utts.iter().map(|u| (u.utterance_id.as_str(), u)).collect();
    let mut embeddings = BTreeMap::new();
    for t in &trials.trials {
        for id in [&t.enroll, &t.test] {
            if embeddings.contains_key(id) {
                continue;
            }
            let utt = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Evaluation(format!("trial references unknown utterance {id}")))?;
            embeddings.insert(id.clone(), model.embed(utt)?);
        }
    }
    let scores = score_trials(trials, &embeddings)?;
    Ok(VerificationReport {
        eer: scores.eer()?,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        let (a, b) = ([0.3, -1.2, 2.0], [1.5, 0.1, -0.4]);
        let a2: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        assert!((cosine_score(&a2, &b).unwrap() - cosine_score(&a, &b).unwrap()).abs() < 1e-15);
        assert!(matches!(cosine_score(&[0.0, 0.0], &b[..2]), Err(Error::Evaluation(_))));
    }

    #[test]
    fn accuracy_examples() {
        let logits = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0]).unwrap();
        assert_eq!(top1_accuracy(&logits, &[0, 1, 0]).unwrap(), 100.0);
        assert_eq!(top1_accuracy(&logits, &[1, 0, 1]).unwrap(), 0.0);
        // Tie resolves to the lower index.
        let tied = Tensor::new(vec![1, 3], vec![0.5, 0.5, 0.1]).unwrap();
        assert_eq!(top1_accuracy(&tied, &[0]).unwrap(), 100.0);
    }

    #[test]
    fn accuracy_matches_loop_oracle() {
        let mut rng = Rng::new(12);
        let logits = Tensor::from_fn(&[100, 7], |_| (rng.index(5) as f64) * 0.5);
        let labels: Vec<usize> = (0..100).map(|_| rng.index(7)).collect();
        let mut correct = 0;
        for (i, &l) in labels.iter().enumerate() {
            let mut best = 0;
            for c in 1..7 {
                if logits.at(&[i, c]) > logits.at(&[i, best]) {
                    best = c;
                }
            }
            correct += (best == l) as usize;
        }
        assert_eq!(top1_accuracy(&logits, &labels).unwrap(), correct as f64);
    }

    #[test]
    fn eer_edge_cases() {
        let r = eer(&[0.9, 0.8, 0.7], &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(r.eer, 0.0);
        assert_eq!(eer(&[0.3], &[0.7]).unwrap().eer, 100.0);
        assert!(eer(&[], &[0.1]).is_err());
        assert!(eer(&[0.1], &[]).is_err());
    }

    /// Rates at every distinct score by direct counting, then the first
    /// sign change of FAR − FRR, interpolated.
    fn sweep_oracle(tar: &[f64], non: &[f64]) -> (f64, f64) {
        let mut th: Vec<f64> = tar.iter().chain(non).copied().collect();
        th.sort_by(f64::total_cmp);
        th.dedup();
        let rates: Vec<(f64, f64, f64)> = th
            .iter()
            .map(|&t| {
                let far = non.iter().filter(|&&s| s >= t).count() as f64 / non.len() as f64;
                let frr = tar.iter().filter(|&&s| s < t).count() as f64 / tar.len() as f64;
                (t, far, frr)
            })
            .collect();
        let k = rates.iter().position(|r| r.1 <= r.2).unwrap();
        let (t1, far1, frr1) = rates[k];
        if far1 == frr1 || k == 0 {
            return (100.0 * far1, t1);
        }
        let (t0, far0, frr0) = rates[k - 1];
        // Intersect the two segments.
        let s = (far0 - frr0) / ((far0 - frr0) - (far1 - frr1));
        (100.0 * (far0 + s * (far1 - far0)), t0 + s * (t1 - t0))
    }

    #[test]
    fn eer_matches_sweep_oracle_on_random_trials() {
        let mut rng = Rng::new(31);
        let tar: Vec<f64> = (0..500).map(|_| rng.normal() + 1.0).collect();
        let non: Vec<f64> = (0..500).map(|_| rng.normal()).collect();
        let r = eer(&tar, &non).unwrap();
        let (e, t) = sweep_oracle(&tar, &non);
        assert!((r.eer - e).abs() < 1e-9 && (r.threshold - t).abs() < 1e-9);
        // With ties from coarse quantization.
        let tar: Vec<f64> = tar.iter().map(|s| (s * 4.0).round() / 4.0).collect();
        let non: Vec<f64> = non.iter().map(|s| (s * 4.0).round() / 4.0).collect();
        let r = eer(&tar, &non).unwrap();
        let (e, t) = sweep_oracle(&tar, &non);
        assert!((r.eer - e).abs() < 1e-9 && (r.threshold - t).abs() < 1e-9);
    }

    fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(-5.0f64..5.0, 2..40),
            proptest::collection::vec(-5.0f64..5.0, 2..40),
        )
    }

    proptest! {
        #[test]
        fn eer_invariant_under_monotone_transform((tar, non) in scores()) {
            let f = |s: &f64| math::exp(0.7 * s) + 3.0;
            let a = eer(&tar, &non).unwrap().eer;
            let b = eer(&tar.iter().map(f).collect::<Vec<_>>(), &non.iter().map(f).collect::<Vec<_>>()).unwrap().eer;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn eer_symmetric_under_label_swap_and_negation((tar, non) in scores()) {
            let a = eer(&tar, &non).unwrap().eer;
            let neg = |v: &[f64]| v.iter().map(|s| -s).collect::<Vec<_>>();
            let b = eer(&neg(&non), &neg(&tar)).unwrap().eer;
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }

        #[test]
        fn far_frr_monotone_over_sweep((tar, non) in scores()) {
            let mut th: Vec<f64> = tar.iter().chain(&non).copied().collect();
            th.sort_by(f64::total_cmp);
            let far = |t: f64| non.iter().filter(|&&s| s >= t).count();
            let frr = |t: f64| tar.iter().filter(|&&s| s < t).count();
            for w in th.windows(2) {
                prop_assert!(far(w[1]) <= far(w[0]));
                prop_assert!(frr(w[1]) >= frr(w[0]));
            }
        }
    }

    #[test]
    fn eer_is_order_invariant() {
        let mut rng = Rng::new(2);
        let mut tar: Vec<f64> = (0..50).map(|_| rng.normal() + 0.5).collect();
        let mut non: Vec<f64> = (0..50).map(|_| rng.normal()).collect();
        let a = eer(&tar, &non).unwrap();
        rng.shuffle(&mut tar);
        rng.shuffle(&mut non);
        assert_eq!(a, eer(&tar, &non).unwrap());
    }
}
