use std::cmp::Ordering;

use rand::Rng;

use crate::backends::{CaptionerBackend, TokenId, TokenSequence, WordDistribution};
use crate::error::{Error, Result};
use crate::maskops::Patch;

use super::{calibrate, restrict_vocab, sample_next, similarity, DecodingConfig, Restriction, Strategy};

/// The target patch, the same-image distractor patches, and their similarities.
#[derive(Debug, Clone)]
pub struct CalibrationContext {
    pub target: Patch,
    pub others: Vec<Patch>,
    pub sims: Vec<f64>,
}

impl CalibrationContext {
    /// Embeds every patch with `captioner` and records clamped cosine similarities.
    pub fn new(captioner: &dyn CaptionerBackend, target: Patch, others: Vec<Patch>) -> Result<Self> {
        let t = captioner.embed(&target)?;
        let sims = others
            .iter()
            .map(|o| similarity(&t, &captioner.embed(o)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { target, others, sims })
    }

    pub fn from_parts(target: Patch, others: Vec<Patch>, sims: Vec<f64>) -> Result<Self> {
        if others.len() != sims.len() {
            return Err(Error::Shape(format!(
                "{} patches but {} similarities",
                others.len(),
                sims.len()
            )));
        }
        if sims.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Contract("similarities must lie in [0, 1]".into()));
        }
        Ok(Self { target, others, sims })
    }

    /// Context with no distractors.
    pub fn single(target: Patch) -> Self {
        Self {
            target,
            others: Vec::new(),
            sims: Vec::new(),
        }
    }
}

fn next_dist(
    captioner: &dyn CaptionerBackend,
    patch: &Patch,
    prefix: &[TokenId],
    step: usize,
) -> Result<WordDistribution> {
    let d = captioner
        .next_word_dist(patch, prefix)
        .map_err(|e| Error::at_step(e, step))?;
    if d.len() != captioner.vocabulary().len() {
        return Err(Error::Contract(format!(
            "captioner returned {} probabilities for a {}-token vocabulary",
            d.len(),
            captioner.vocabulary().len()
        )));
    }
    Ok(d)
}

/// Remove bos mass: sequences never contain bos.
fn without_bos(dist: WordDistribution, bos: TokenId, step: usize) -> Result<WordDistribution> {
    let b = dist.probs()[bos as usize];
    if b == 0.0 {
        return Ok(dist);
    }
    let mut probs = dist.probs().to_vec();
    probs[bos as usize] = 0.0;
    WordDistribution::from_weights(probs).map_err(|_| Error::Backend {
        step: Some(step),
        message: "distribution puts all mass on bos".into(),
    })
}

/// Token-by-token sampling decode (every strategy except beam).
///
/// Distinctive strategies condition every distractor distribution on the
/// target's own prefix, calibrate, then restrict the calibrated distribution.
pub fn generate<R: Rng + ?Sized>(
    captioner: &dyn CaptionerBackend,
    ctx: &CalibrationContext,
    config: &DecodingConfig,
    rng: &mut R,
) -> Result<TokenSequence> {
    config.validate()?;
    if config.strategy == Strategy::Beam {
        return Err(Error::Usage("beam search is decoded by `beam_search`".into()));
    }
    let vocab = captioner.vocabulary();
    let (bos, eos) = (vocab.bos_id(), vocab.eos_id());
    let mut ids: Vec<TokenId> = Vec::new();

    for step in 0..config.max_len {
        let target = next_dist(captioner, &ctx.target, &ids, step)?;
        let dist = if config.strategy.is_distinctive() {
            let others = ctx
                .others
                .iter()
                .map(|o| next_dist(captioner, o, &ids, step))
                .collect::<Result<Vec<_>>>()?;
            calibrate(&target, &others, &ctx.sims, config.temperature, config.calibration_mode)?
        } else {
            target
        };
        let dist = without_bos(dist, bos, step)?;

        let token = match config.strategy {
            Strategy::Greedy => dist.argmax(),
            Strategy::Sample => sample_next(&dist, rng),
            Strategy::TopkNaive | Strategy::TopkDistinctive => {
                sample_next(&restrict_vocab(&dist, Restriction::TopK(config.k.unwrap_or(1))), rng)
            }
            Strategy::ToppNaive | Strategy::ToppDistinctive => {
                sample_next(&restrict_vocab(&dist, Restriction::TopP(config.p.unwrap_or(1.0))), rng)
            }
            Strategy::Beam => unreachable!("rejected above"),
        };
        ids.push(token);
        if token == eos {
            return Ok(TokenSequence { ids, complete: true });
        }
    }
    Ok(TokenSequence { ids, complete: false })
}

#[derive(Debug, Clone)]
struct Hypothesis {
    ids: Vec<TokenId>,
    log_prob: f64,
}

/// Higher score first, then lexicographically smaller token ids.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.ids.cmp(&b.ids))
}

/// Uncalibrated beam search over cumulative log-probability.
///
/// Returns the best finished hypothesis, or the best of the longest
/// unfinished ones when nothing reached eos within `max_len`.
pub fn beam_search(
    captioner: &dyn CaptionerBackend,
    target: &Patch,
    width: usize,
    max_len: usize,
) -> Result<TokenSequence> {
    if width == 0 {
        return Err(Error::Usage("beam width must be >= 1".into()));
    }
    let vocab = captioner.vocabulary();
    let (bos, eos) = (vocab.bos_id(), vocab.eos_id());

    let mut live = vec![Hypothesis {
        ids: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..max_len {
        let mut expansions = Vec::new();
        for hyp in &live {
            let dist = without_bos(next_dist(captioner, target, &hyp.ids, step)?, bos, step)?;
            for (tok, &p) in dist.probs().iter().enumerate() {
                if p > 0.0 {
                    let mut ids = hyp.ids.clone();
                    ids.push(tok as TokenId);
                    expansions.push(Hypothesis {
                        ids,
                        log_prob: hyp.log_prob + p.ln(),
                    });
                }
            }
        }
        expansions.sort_by(rank);
        expansions.truncate(width);

        live.clear();
        for h in expansions {
            if h.ids.last() == Some(&eos) {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
        finished.sort_by(rank);
        // log-probs never increase, so no live beam can overtake the best finished one
        match (finished.first(), live.first()) {
            (_, None) => break,
            (Some(f), Some(l)) if f.log_prob >= l.log_prob => break,
            _ => {}
        }
    }

    if let Some(best) = finished.into_iter().next() {
        return Ok(TokenSequence {
            ids: best.ids,
            complete: true,
        });
    }
    live.sort_by(|a, b| b.ids.len().cmp(&a.ids.len()).then_with(|| rank(a, b)));
    Ok(TokenSequence {
        ids: live.into_iter().next().map(|h| h.ids).unwrap_or_default(),
        complete: false,
    })
}

/// Decode one candidate with whichever routine the strategy calls for.
pub fn decode_candidate<R: Rng + ?Sized>(
    captioner: &dyn CaptionerBackend,
    ctx: &CalibrationContext,
    config: &DecodingConfig,
    rng: &mut R,
) -> Result<TokenSequence> {
    config.validate()?;
    match config.strategy {
        Strategy::Beam => beam_search(captioner, &ctx.target, config.beam_width.unwrap_or(1), config.max_len),
        _ => generate(captioner, ctx, config, rng),
    }
}
