//! Uniqueness, correctness and distinctiveness of caption candidates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::{ScorerBackend, TokenSequence};
use crate::error::{Error, Result};
use crate::maskops::{CropSpec, Patch};
use crate::SCORE_FLOOR;

pub const DEFAULT_TAU: f64 = 1.3;

const PREPOSITIONS: &[&str] = &["with", "in", "on", "at", "near", "behind", "under", "over", "by", "of"];
const RELATIVE_MARKERS: &[&str] = &["that", "which", "who"];
const VERB_MARKERS: &[&str] = &[
    "wearing", "holding", "sitting", "standing", "riding", "eating", "looking",
];

fn is_stop_word(word: &str) -> bool {
    PREPOSITIONS.contains(&word) || RELATIVE_MARKERS.contains(&word) || VERB_MARKERS.contains(&word)
}

/// Subject phrase of a caption: every word before the first relational
/// stop word (preposition, relative marker or verb), lowercased.
///
/// Returns an empty string when the caption opens with a stop word.
pub fn extract_noun_phrase(text: &str) -> Result<String> {
    let lowered = text.trim().to_lowercase();
    if lowered.is_empty() {
        return Err(Error::Usage("cannot extract a noun phrase from empty text".into()));
    }
    Ok(lowered
        .split_whitespace()
        .take_while(|w| !is_stop_word(w))
        .collect::<Vec<_>>()
        .join(" "))
}

fn max_or_none(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    values
        .into_iter()
        .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

/// Target score over the best distractor score; `+inf` without distractors.
pub fn uos(theta_target: f64, theta_others: &[f64]) -> f64 {
    match max_or_none(theta_others.iter().copied()) {
        None => f64::INFINITY,
        Some(best) => theta_target / best,
    }
}

/// Scorer output for the masked target region against the caption's noun phrase.
pub fn cos_score(scorer: &dyn ScorerBackend, masked_patch: &Patch, caption: &str) -> Result<f64> {
    if !masked_patch.spec.masked {
        return Err(Error::Contract("correctness needs a masked patch".into()));
    }
    let phrase = extract_noun_phrase(caption)?;
    floored_score(scorer, masked_patch, &phrase)
}

/// Scorer output floored at [`SCORE_FLOOR`]; empty text scores the floor
/// without consulting the backend.
pub fn floored_score(scorer: &dyn ScorerBackend, patch: &Patch, text: &str) -> Result<f64> {
    if text.trim().is_empty() {
        return Ok(SCORE_FLOOR);
    }
    let raw = scorer.score(patch, text)?;
    if raw.is_nan() {
        return Err(Error::Contract("scorer returned NaN".into()));
    }
    Ok(raw.max(SCORE_FLOOR))
}

/// `(CoS_t * theta_t) / max_j (CoS_j * theta_j)`; `+inf` without distractors.
pub fn dos(cos_target: f64, theta_target: f64, cos_others: &[f64], theta_others: &[f64]) -> Result<f64> {
    if cos_others.len() != theta_others.len() {
        return Err(Error::Shape(format!(
            "{} correctness scores but {} image-text scores",
            cos_others.len(),
            theta_others.len()
        )));
    }
    Ok(
        match max_or_none(cos_others.iter().zip(theta_others).map(|(c, t)| c * t)) {
            None => f64::INFINITY,
            Some(best) => cos_target * theta_target / best,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Uniqueness,
    Correctness,
    #[default]
    Distinctiveness,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Uniqueness => "uniqueness",
            Metric::Correctness => "correctness",
            Metric::Distinctiveness => "distinctiveness",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniqueness" | "uos" => Ok(Metric::Uniqueness),
            "correctness" | "cos" => Ok(Metric::Correctness),
            "distinctiveness" | "dos" => Ok(Metric::Distinctiveness),
            other => Err(Error::Config(format!("unknown filter metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub metric: Metric,
    pub tau: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Distinctiveness,
            tau: DEFAULT_TAU,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        // tau = 0 is allowed: it disables filtering
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::Config(format!(
                "tau must be a finite value >= 0, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// The three scores of one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub uos: f64,
    pub cos: f64,
    pub dos: f64,
}

impl Scores {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Uniqueness => self.uos,
            Metric::Correctness => self.cos,
            Metric::Distinctiveness => self.dos,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionCandidate {
    pub mask_id: usize,
    pub text: String,
    pub tokens: TokenSequence,
    pub crop_index: usize,
    pub crop_spec: CropSpec,
    pub decoding_config_index: usize,
    pub theta_target: Option<f64>,
    pub theta_others: Vec<f64>,
    pub scores: Option<Scores>,
}

impl CaptionCandidate {
    pub fn metric(&self, metric: Metric) -> Option<f64> {
        self.scores.map(|s| s.get(metric))
    }
}

/// Keep candidates whose chosen metric is `>= tau`; order is preserved.
pub fn filter_candidates(candidates: &[CaptionCandidate], config: &FilterConfig) -> Result<Vec<CaptionCandidate>> {
    config.validate()?;
    let mut kept = Vec::new();
    for c in candidates {
        let value = c.metric(config.metric).ok_or_else(|| {
            Error::State(format!(
                "candidate `{}` of mask {} has no {} score",
                c.text, c.mask_id, config.metric
            ))
        })?;
        if passes(value, config.tau) {
            kept.push(c.clone());
        }
    }
    Ok(kept)
}

/// Inclusive threshold; `+inf` always passes.
pub fn passes(value: f64, tau: f64) -> bool {
    value >= tau
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn candidate(dos_value: f64) -> CaptionCandidate {
        CaptionCandidate {
            mask_id: 0,
            text: format!("c{dos_value}"),
            tokens: TokenSequence::default(),
            crop_index: 0,
            crop_spec: CropSpec::new(0.0, false),
            decoding_config_index: 0,
            theta_target: None,
            theta_others: vec![],
            scores: Some(Scores {
                uos: dos_value,
                cos: 1.0,
                dos: dos_value,
            }),
        }
    }

    #[test]
    fn noun_phrase_examples() {
        assert_eq!(
            extract_noun_phrase("a brown cow with a long tail").unwrap(),
            "a brown cow"
        );
        assert_eq!(extract_noun_phrase("cow").unwrap(), "cow");
        assert_eq!(extract_noun_phrase("man wearing a red tie").unwrap(), "man");
        assert_eq!(extract_noun_phrase("  The Dog ON the sofa ").unwrap(), "the dog");
        assert_eq!(extract_noun_phrase("with a hat").unwrap(), "");
        assert!(matches!(extract_noun_phrase("   "), Err(Error::Usage(_))));
    }

    #[test]
    fn uos_examples() {
        assert!((uos(0.3, &[0.2, 0.1]) - 1.5).abs() < 1e-12);
        assert_eq!(uos(0.4, &[0.4, 0.1]), 1.0);
        assert_eq!(uos(0.4, &[]), f64::INFINITY);
    }

    #[test]
    fn dos_examples() {
        assert!((dos(0.8, 0.3, &[0.4], &[0.3]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(dos(0.5, 0.4, &[0.4], &[0.5]).unwrap(), 1.0);
        assert_eq!(dos(0.5, 0.4, &[], &[]).unwrap(), f64::INFINITY);
        assert!(matches!(dos(0.5, 0.4, &[0.1], &[]), Err(Error::Shape(_))));
        let theta = [0.3, 0.25, 0.1];
        assert_eq!(dos(0.7, 0.6, &[0.7; 3], &theta).unwrap(), uos(0.6, &theta));
    }

    #[test]
    fn filter_examples() {
        let cands: Vec<_> = [1.1, 1.35, 2.0].into_iter().map(candidate).collect();
        let kept = filter_candidates(&cands, &FilterConfig::default()).unwrap();
        let kept_dos: Vec<f64> = kept.iter().map(|c| c.scores.unwrap().dos).collect();
        assert_eq!(kept_dos, vec![1.35, 2.0]);

        let all = filter_candidates(
            &cands,
            &FilterConfig {
                metric: Metric::Distinctiveness,
                tau: 0.0,
            },
        )
        .unwrap();
        assert_eq!(all.len(), 3);
        assert!(filter_candidates(&[], &FilterConfig::default()).unwrap().is_empty());

        let inf = candidate(f64::INFINITY);
        assert_eq!(
            filter_candidates(
                &[inf],
                &FilterConfig {
                    metric: Metric::Uniqueness,
                    tau: 1e9
                }
            )
            .unwrap()
            .len(),
            1
        );
    }

    #[test]
    fn filter_requires_scores() {
        let mut c = candidate(2.0);
        c.scores = None;
        assert!(matches!(
            filter_candidates(&[c], &FilterConfig::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn metric_names() {
        for m in [Metric::Uniqueness, Metric::Correctness, Metric::Distinctiveness] {
            assert_eq!(m.as_str().parse::<Metric>().unwrap(), m);
        }
        assert!("novelty".parse::<Metric>().is_err());
    }

    proptest! {
        #[test]
        fn noun_phrase_is_idempotent(words in prop::collection::vec(
            prop::sample::select(vec!["a", "brown", "Cow", "with", "tail", "man", "wearing", "that", "red", "on"]),
            1..8,
        )) {
            let text = words.join(" ");
            let once = extract_noun_phrase(&text).unwrap();
            prop_assume!(!once.is_empty());
            prop_assert_eq!(extract_noun_phrase(&once).unwrap(), once);
        }

        #[test]
        fn ratios_are_scale_invariant(
            theta in prop::collection::vec(1e-3f64..1.0, 2..6),
            cos in prop::collection::vec(1e-3f64..1.0, 6),
            scale in 0.01f64..100.0,
        ) {
            let (t, others) = (theta[0], &theta[1..]);
            let cos_o = &cos[1..theta.len()];
            let scaled: Vec<f64> = others.iter().map(|v| v * scale).collect();
            let u = uos(t, others);
            let d = dos(cos[0], t, cos_o, others).unwrap();
            prop_assert!((uos(t * scale, &scaled) - u).abs() <= 1e-9 * u);
            prop_assert!((dos(cos[0], t * scale, cos_o, &scaled).unwrap() - d).abs() <= 1e-9 * d);
        }
    }
}
