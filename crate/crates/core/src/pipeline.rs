//! Masks to patches to candidates to scores to pseudo-annotations.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendRegistry, CaptionerBackend, MaskExtractorBackend, ScorerBackend};
use crate::decoding::{
    candidate_rng, decode_candidate, default_grid, similarity, CalibrationContext, CandidateKey, DecodingConfig,
};
use crate::error::{Error, Result};
use crate::maskops::{crop, reduce_masks, rle_encode, BinaryMask, CropSpec, Image, Patch, Rle};
use crate::scoring::{dos, extract_noun_phrase, floored_score, passes, uos, CaptionCandidate, FilterConfig, Scores};

/// Unmasked crop used for every image-text score.
pub const THETA_CROP: CropSpec = CropSpec::new(0.1, false);
/// Masked crop used for correctness.
pub const CORRECTNESS_CROP: CropSpec = CropSpec::new(0.0, true);

/// Which registered backends to use, by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendSelection {
    pub captioner: String,
    pub scorer: String,
    /// Mask extractor used when an image comes without masks.
    pub mask_source: String,
}

impl Default for BackendSelection {
    fn default() -> Self {
        Self {
            captioner: "synth".into(),
            scorer: "synth".into(),
            mask_source: "synth".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub crop_specs: Vec<CropSpec>,
    pub decoding_configs: Vec<DecodingConfig>,
    pub filter: FilterConfig,
    pub seed: u64,
    pub backends: BackendSelection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            crop_specs: CropSpec::canonical(),
            decoding_configs: default_grid(),
            filter: FilterConfig::default(),
            seed: 0,
            backends: BackendSelection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_specs.is_empty() {
            return Err(Error::Config("at least one crop spec is required".into()));
        }
        if self.decoding_configs.is_empty() {
            return Err(Error::Config("at least one decoding config is required".into()));
        }
        for c in &self.crop_specs {
            c.validate()?;
        }
        for (i, d) in self.decoding_configs.iter().enumerate() {
            d.validate().map_err(|e| Error::Config(format!("decoder {i}: {e}")))?;
        }
        self.filter.validate()
    }

    pub fn candidates_per_mask(&self) -> usize {
        self.crop_specs.len() * self.decoding_configs.len()
    }
}

/// Resolved backend instances.
#[derive(Clone)]
pub struct Backends {
    pub captioner: Arc<dyn CaptionerBackend>,
    pub scorer: Arc<dyn ScorerBackend>,
    pub mask_extractor: Option<Arc<dyn MaskExtractorBackend>>,
    /// Some backend asked for serialized access.
    pub exclusive: bool,
}

impl Backends {
    pub fn resolve(registry: &BackendRegistry, selection: &BackendSelection) -> Result<Self> {
        let (captioner, ec) = registry.captioner(&selection.captioner)?;
        let (scorer, es) = registry.scorer(&selection.scorer)?;
        let (mask_extractor, em) = if selection.mask_source.is_empty() || selection.mask_source == "none" {
            (None, false)
        } else {
            let (m, e) = registry.mask_extractor(&selection.mask_source)?;
            (Some(m), e)
        };
        Ok(Self {
            captioner,
            scorer,
            mask_extractor,
            exclusive: ec || es || em,
        })
    }
}

/// A candidate that could not be decoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFailure {
    pub image_id: String,
    pub mask_index: usize,
    pub crop_index: usize,
    pub config_index: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct CandidateBatch {
    pub candidates: Vec<CaptionCandidate>,
    pub failures: Vec<CandidateFailure>,
}

fn check_masks(image: &Image, masks: &[BinaryMask]) -> Result<()> {
    for (i, m) in masks.iter().enumerate() {
        if m.width() != image.width || m.height() != image.height {
            return Err(Error::Shape(format!(
                "mask {i} is {}x{}, image `{}` is {}x{}",
                m.width(),
                m.height(),
                image.id,
                image.width,
                image.height
            )));
        }
        if m.area() == 0 {
            return Err(Error::Contract(format!("mask {i} of image `{}` is empty", image.id)));
        }
    }
    Ok(())
}

fn crop_all(image: &Image, masks: &[BinaryMask], spec: CropSpec) -> Result<Vec<Patch>> {
    masks.iter().enumerate().map(|(i, m)| crop(image, m, i, spec)).collect()
}

/// One candidate per (mask, crop spec, decoding config), in that nesting order.
///
/// Decoding failures are recorded and skipped.
pub fn generate_candidates(
    image: &Image,
    masks: &[BinaryMask],
    backends: &Backends,
    config: &PipelineConfig,
) -> Result<CandidateBatch> {
    if masks.is_empty() {
        return Err(Error::Usage(format!("image `{}` has no masks", image.id)));
    }
    config.validate()?;
    check_masks(image, masks)?;
    let captioner = backends.captioner.as_ref();
    let vocab = captioner.vocabulary();
    let mut batch = CandidateBatch::default();

    // per crop spec: patches and embeddings for every mask
    let mut per_crop = Vec::with_capacity(config.crop_specs.len());
    for &spec in &config.crop_specs {
        let patches = crop_all(image, masks, spec)?;
        let embeddings: Vec<_> = patches.iter().map(|p| captioner.embed(p)).collect();
        per_crop.push((patches, embeddings));
    }

    for mask_index in 0..masks.len() {
        for (crop_index, (patches, embeddings)) in per_crop.iter().enumerate() {
            let fail_all = |batch: &mut CandidateBatch, message: String| {
                for config_index in 0..config.decoding_configs.len() {
                    batch.failures.push(CandidateFailure {
                        image_id: image.id.clone(),
                        mask_index,
                        crop_index,
                        config_index,
                        message: message.clone(),
                    });
                }
            };
            let ctx = match build_context(patches, embeddings, mask_index) {
                Ok(ctx) => ctx,
                Err(e) => {
                    fail_all(&mut batch, e.to_string());
                    continue;
                }
            };
            for (config_index, dc) in config.decoding_configs.iter().enumerate() {
                let mut rng = candidate_rng(&CandidateKey {
                    seed: config.seed,
                    image_id: &image.id,
                    mask_index,
                    crop_index,
                    config_index,
                });
                match decode_candidate(captioner, &ctx, dc, &mut rng) {
                    Ok(tokens) => batch.candidates.push(CaptionCandidate {
                        mask_id: mask_index,
                        text: vocab.decode(&tokens.ids),
                        tokens,
                        crop_index,
                        crop_spec: config.crop_specs[crop_index],
                        decoding_config_index: config_index,
                        theta_target: None,
                        theta_others: Vec::new(),
                        scores: None,
                    }),
                    Err(e) => batch.failures.push(CandidateFailure {
                        image_id: image.id.clone(),
                        mask_index,
                        crop_index,
                        config_index,
                        message: e.to_string(),
                    }),
                }
            }
        }
    }
    Ok(batch)
}

fn build_context(
    patches: &[Patch],
    embeddings: &[std::result::Result<crate::backends::VisualEmbedding, crate::error::BackendError>],
    target: usize,
) -> Result<CalibrationContext> {
    let own = embeddings[target].as_ref().map_err(|e| Error::from(e.clone()))?;
    let mut others = Vec::with_capacity(patches.len() - 1);
    let mut sims = Vec::with_capacity(patches.len() - 1);
    for (j, (p, e)) in patches.iter().zip(embeddings).enumerate() {
        if j == target {
            continue;
        }
        let e = e.as_ref().map_err(|e| Error::from(e.clone()))?;
        sims.push(similarity(own, e)?);
        others.push(p.clone());
    }
    CalibrationContext::from_parts(patches[target].clone(), others, sims)
}

/// Fill theta and the three scores of every candidate.
///
/// Theta uses [`THETA_CROP`] patches of every mask; correctness uses
/// [`CORRECTNESS_CROP`] patches and the caption's noun phrase.
pub fn score_candidates(
    candidates: &mut [CaptionCandidate],
    masks: &[BinaryMask],
    image: &Image,
    backends: &Backends,
) -> Result<()> {
    check_masks(image, masks)?;
    let theta_patches = crop_all(image, masks, THETA_CROP)?;
    let cos_patches = crop_all(image, masks, CORRECTNESS_CROP)?;
    let scorer = backends.scorer.as_ref();

    // captions repeat a lot across crops and decoders
    let mut cache: HashMap<String, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for c in candidates.iter_mut() {
        if c.mask_id >= masks.len() {
            return Err(Error::State(format!(
                "candidate refers to mask {} of {}",
                c.mask_id,
                masks.len()
            )));
        }
        if !cache.contains_key(&c.text) {
            let phrase = if c.text.trim().is_empty() {
                String::new()
            } else {
                extract_noun_phrase(&c.text)?
            };
            let theta = theta_patches
                .iter()
                .map(|p| floored_score(scorer, p, &c.text))
                .collect::<Result<Vec<_>>>()?;
            let cos = cos_patches
                .iter()
                .map(|p| floored_score(scorer, p, &phrase))
                .collect::<Result<Vec<_>>>()?;
            cache.insert(c.text.clone(), (theta, cos));
        }
        let (theta, cos) = &cache[&c.text];
        let i = c.mask_id;
        let others =
            |v: &[f64]| -> Vec<f64> { v.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| *x).collect() };
        let (theta_o, cos_o) = (others(theta), others(cos));
        c.theta_target = Some(theta[i]);
        c.scores = Some(Scores {
            uos: uos(theta[i], &theta_o),
            cos: cos[i],
            dos: dos(cos[i], theta[i], &cos_o, &theta_o)?,
        });
        c.theta_others = theta_o;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedCaption {
    pub text: String,
    pub uos: f64,
    pub cos: f64,
    pub dos: f64,
    pub crop_spec: CropSpec,
    /// Index into the decoding config list.
    pub decoder: usize,
}

/// A mask with the captions that survived filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoAnnotation {
    pub image_id: String,
    pub file_name: String,
    pub mask_index: usize,
    pub mask: Rle,
    /// Candidates generated for this mask before filtering.
    pub n_candidates: usize,
    pub captions: Vec<AnnotatedCaption>,
}

impl PseudoAnnotation {
    /// No caption survived the filter.
    pub fn flagged(&self) -> bool {
        self.captions.is_empty()
    }
}

/// Group scored candidates by mask, keeping those that pass `filter`
/// (all of them when `filter` is `None`).
pub fn build_annotations(
    image_id: &str,
    file_name: &str,
    masks: &[BinaryMask],
    candidates: &[CaptionCandidate],
    filter: Option<&FilterConfig>,
) -> Result<Vec<PseudoAnnotation>> {
    if let Some(f) = filter {
        f.validate()?;
    }
    let mut out: Vec<PseudoAnnotation> = masks
        .iter()
        .enumerate()
        .map(|(i, m)| PseudoAnnotation {
            image_id: image_id.to_string(),
            file_name: file_name.to_string(),
            mask_index: i,
            mask: rle_encode(m),
            n_candidates: 0,
            captions: Vec::new(),
        })
        .collect();
    for c in candidates {
        let scores = c
            .scores
            .ok_or_else(|| Error::State(format!("candidate `{}` has not been scored", c.text)))?;
        let ann = out
            .get_mut(c.mask_id)
            .ok_or_else(|| Error::State(format!("candidate refers to mask {}", c.mask_id)))?;
        ann.n_candidates += 1;
        if filter.is_none_or(|f| passes(scores.get(f.metric), f.tau)) {
            ann.captions.push(AnnotatedCaption {
                text: c.text.clone(),
                uos: scores.uos,
                cos: scores.cos,
                dos: scores.dos,
                crop_spec: c.crop_spec,
                decoder: c.decoding_config_index,
            });
        }
    }
    Ok(out)
}

/// Re-apply a filter to already-scored annotations.
pub fn refilter(annotations: &[PseudoAnnotation], filter: &FilterConfig) -> Result<Vec<PseudoAnnotation>> {
    filter.validate()?;
    Ok(annotations
        .iter()
        .map(|a| PseudoAnnotation {
            captions: a
                .captions
                .iter()
                .filter(|c| {
                    let s = Scores {
                        uos: c.uos,
                        cos: c.cos,
                        dos: c.dos,
                    };
                    passes(s.get(filter.metric), filter.tau)
                })
                .cloned()
                .collect(),
            ..a.clone()
        })
        .collect())
}

/// Score, filter and group one image's candidates.
pub fn score_and_filter(
    candidates: &mut [CaptionCandidate],
    masks: &[BinaryMask],
    image: &Image,
    file_name: &str,
    backends: &Backends,
    config: &PipelineConfig,
) -> Result<Vec<PseudoAnnotation>> {
    score_candidates(candidates, masks, image, backends)?;
    build_annotations(&image.id, file_name, masks, candidates, Some(&config.filter))
}

/// One input image with optional precomputed masks.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image: Image,
    pub file_name: String,
    /// Masks to caption; extracted with the mask backend when absent.
    pub masks: Option<Vec<BinaryMask>>,
    /// Coarse masks that select among the fine ones.
    pub coarse_masks: Option<Vec<BinaryMask>>,
}

impl ImageRecord {
    pub fn new(image: Image) -> Self {
        let file_name = image.id.clone();
        Self {
            image,
            file_name,
            masks: None,
            coarse_masks: None,
        }
    }
}

/// An image that could not be read or processed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_images: usize,
    pub n_failed_images: usize,
    pub n_masks: usize,
    pub n_candidates: usize,
    pub n_failed_candidates: usize,
    pub n_kept: usize,
    /// Distinct lowercased whitespace tokens across kept captions.
    pub vocabulary_size: usize,
}

impl CorpusStats {
    /// Counts derivable from annotations alone; `n_images` counts distinct ids.
    pub fn from_annotations(annotations: &[PseudoAnnotation]) -> Self {
        let images: BTreeSet<&str> = annotations.iter().map(|a| a.image_id.as_str()).collect();
        let vocab: BTreeSet<String> = annotations
            .iter()
            .flat_map(|a| &a.captions)
            .flat_map(|c| c.text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .collect();
        Self {
            n_images: images.len(),
            n_failed_images: 0,
            n_masks: annotations.len(),
            n_candidates: annotations.iter().map(|a| a.n_candidates).sum(),
            n_failed_candidates: 0,
            n_kept: annotations.iter().map(|a| a.captions.len()).sum(),
            vocabulary_size: vocab.len(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    /// Filtered annotations, sorted by (image id, mask index).
    pub annotations: Vec<PseudoAnnotation>,
    /// Every scored candidate, same order, no filtering.
    pub candidates: Vec<PseudoAnnotation>,
    pub stats: CorpusStats,
    pub image_failures: Vec<ImageFailure>,
    pub candidate_failures: Vec<CandidateFailure>,
}

struct ImageResult {
    filtered: Vec<PseudoAnnotation>,
    all: Vec<PseudoAnnotation>,
    failures: Vec<CandidateFailure>,
}

fn process_image(record: ImageRecord, backends: &Backends, config: &PipelineConfig) -> Result<ImageResult> {
    let ImageRecord {
        image,
        file_name,
        masks,
        coarse_masks,
    } = record;
    let fine = match masks {
        Some(m) => m,
        None => {
            let extractor = backends
                .mask_extractor
                .as_ref()
                .ok_or_else(|| Error::Config(format!("no masks for `{}` and no mask extractor", image.id)))?;
            extractor.extract(&image)?
        }
    };
    let mut masks = match coarse_masks {
        Some(coarse) => reduce_masks(&fine, &coarse)?,
        None => fine,
    };
    masks.retain(|m| m.area() > 0);
    if masks.is_empty() {
        return Ok(ImageResult {
            filtered: Vec::new(),
            all: Vec::new(),
            failures: Vec::new(),
        });
    }
    let mut batch = generate_candidates(&image, &masks, backends, config)?;
    score_candidates(&mut batch.candidates, &masks, &image, backends)?;
    Ok(ImageResult {
        filtered: build_annotations(&image.id, &file_name, &masks, &batch.candidates, Some(&config.filter))?,
        all: build_annotations(&image.id, &file_name, &masks, &batch.candidates, None)?,
        failures: batch.failures,
    })
}

/// Run every image of `source` through the pipeline.
///
/// Unreadable or failing images are recorded and skipped. Images run in
/// parallel unless a backend declared exclusive access.
pub fn run_pipeline<I>(source: I, backends: &Backends, config: &PipelineConfig) -> Result<PipelineOutput>
where
    I: IntoIterator<Item = std::result::Result<ImageRecord, ImageFailure>>,
{
    config.validate()?;
    let items: Vec<_> = source.into_iter().collect();
    let run = |item: std::result::Result<ImageRecord, ImageFailure>| -> std::result::Result<ImageResult, ImageFailure> {
        let record = item?;
        let image_id = record.image.id.clone();
        process_image(record, backends, config).map_err(|e| ImageFailure {
            image_id,
            message: e.to_string(),
        })
    };
    let results: Vec<_> = if backends.exclusive {
        items.into_iter().map(run).collect()
    } else {
        items.into_par_iter().map(run).collect()
    };

    let mut out = PipelineOutput::default();
    let mut n_images = 0;
    for r in results {
        match r {
            Ok(r) => {
                n_images += 1;
                out.annotations.extend(r.filtered);
                out.candidates.extend(r.all);
                out.candidate_failures.extend(r.failures);
            }
            Err(f) => out.image_failures.push(f),
        }
    }
    let key = |a: &PseudoAnnotation| (a.image_id.clone(), a.mask_index);
    out.annotations.sort_by_key(key);
    out.candidates.sort_by_key(key);
    out.image_failures.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut stats = CorpusStats::from_annotations(&out.annotations);
    stats.n_images = n_images;
    stats.n_failed_images = out.image_failures.len();
    stats.n_failed_candidates = out.candidate_failures.len();
    out.stats = stats;
    Ok(out)
}
