use std::collections::BTreeMap;

use crate::backends::{
    CaptionerBackend, MaskExtractorBackend, ScorerBackend, TokenId, VisualEmbedding, Vocabulary, WordDistribution,
};
use crate::error::BackendError;
use crate::maskops::{BinaryMask, Image, Patch};
use crate::SCORE_FLOOR;

use super::{content_words, Descriptors, SynthWorld};

/// Slot mass on the primary object's words.
pub const ALPHA: f64 = 0.6;
/// Slot mass on words of other objects visible in the patch.
pub const BETA: f64 = 0.3;
/// Slot mass on every remaining word of the slot's class.
pub const GAMMA: f64 = 0.1;

/// Objects visible in a patch: the one covering the most pixels, then the rest.
struct PatchView {
    primary: Descriptors,
    distractors: Vec<Descriptors>,
}

impl PatchView {
    fn of(world: &SynthWorld, patch: &Patch) -> Option<Self> {
        let mut colors: BTreeMap<[u8; 3], usize> = BTreeMap::new();
        // neighbouring pixels mostly repeat, so tally runs
        let mut run: Option<([u8; 3], usize)> = None;
        for px in patch.pixel_iter().chain(std::iter::once([0; 3])) {
            match &mut run {
                Some((c, n)) if *c == px => *n += 1,
                _ => {
                    if let Some((c, n)) = run.take() {
                        if c[0] != 0 {
                            *colors.entry(c).or_insert(0) += n;
                        }
                    }
                    run = Some((px, 1));
                }
            }
        }
        let mut counts: BTreeMap<u8, (usize, Descriptors)> = BTreeMap::new();
        for (px, n) in colors {
            if let Some(d) = world.decode_pixel(px) {
                counts.entry(d.object_code).or_insert((0, d)).0 += n;
            }
        }
        let (&primary_code, _) = counts
            .iter()
            .fold(None::<(&u8, usize)>, |best, (code, (n, _))| match best {
                Some((_, b)) if b >= *n => best,
                _ => Some((code, *n)),
            })?;
        let primary = counts.remove(&primary_code)?.1;
        Some(Self {
            primary,
            distractors: counts.into_values().map(|(_, d)| d).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Determiner,
    Attribute,
    Category,
    End,
}

/// Reference captioner over the template `a <attr> <category> <eos>`.
#[derive(Debug, Clone)]
pub struct SynthCaptioner {
    world: SynthWorld,
    category_ids: Vec<TokenId>,
    attribute_ids: Vec<TokenId>,
}

impl SynthCaptioner {
    pub fn new(world: SynthWorld) -> Self {
        let v = world.vocabulary();
        let category_ids = world.space().categories.iter().filter_map(|c| v.id(c)).collect();
        let attribute_ids = world.space().attributes().filter_map(|a| v.id(a)).collect();
        Self {
            world,
            category_ids,
            attribute_ids,
        }
    }

    pub fn world(&self) -> &SynthWorld {
        &self.world
    }

    fn slot(&self, prefix: &[TokenId]) -> Slot {
        let eos = self.world.vocabulary().eos_id();
        if prefix.is_empty() {
            Slot::Determiner
        } else if prefix.iter().any(|t| *t == eos || self.category_ids.contains(t)) {
            Slot::End
        } else if prefix.iter().any(|t| self.attribute_ids.contains(t)) {
            Slot::Category
        } else {
            Slot::Attribute
        }
    }

    /// `ALPHA` over `primary`, `BETA` over `distractor` (which may repeat
    /// primary words), `GAMMA` over the rest of `slot_tokens`; an empty group
    /// hands its mass to `primary`.
    fn spread(&self, slot_tokens: &[TokenId], primary: &[TokenId], distractor: &[TokenId]) -> Vec<f64> {
        let rest: Vec<TokenId> = slot_tokens
            .iter()
            .copied()
            .filter(|t| !primary.contains(t) && !distractor.contains(t))
            .collect();
        let mut a = ALPHA;
        let b = if distractor.is_empty() {
            a += BETA;
            0.0
        } else {
            BETA
        };
        let g = if rest.is_empty() {
            a += GAMMA;
            0.0
        } else {
            GAMMA
        };
        let mut w = vec![0.0; self.world.vocabulary().len()];
        for &t in primary {
            w[t as usize] += a / primary.len() as f64;
        }
        for &t in distractor {
            w[t as usize] += b / distractor.len() as f64;
        }
        for &t in &rest {
            w[t as usize] += g / rest.len() as f64;
        }
        w
    }

    fn ids(&self, words: impl IntoIterator<Item = impl AsRef<str>>) -> Vec<TokenId> {
        let v = self.world.vocabulary();
        let mut out: Vec<TokenId> = words.into_iter().filter_map(|w| v.id(w.as_ref())).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

impl CaptionerBackend for SynthCaptioner {
    fn vocabulary(&self) -> &Vocabulary {
        self.world.vocabulary()
    }

    /// Normalized indicator vector of the primary object's descriptors.
    fn embed(&self, patch: &Patch) -> Result<VisualEmbedding, BackendError> {
        let view = PatchView::of(&self.world, patch).ok_or_else(|| BackendError("patch covers no object".into()))?;
        let mut raw = vec![0.0; self.world.vocabulary().len()];
        for t in self.ids(std::iter::once(&view.primary.category).chain(&view.primary.attrs)) {
            raw[t as usize] = 1.0;
        }
        VisualEmbedding::normalized(raw).map_err(|e| BackendError(e.to_string()))
    }

    fn next_word_dist(&self, patch: &Patch, prefix: &[TokenId]) -> Result<WordDistribution, BackendError> {
        let view = PatchView::of(&self.world, patch).ok_or_else(|| BackendError("patch covers no object".into()))?;
        let v = self.world.vocabulary();
        let weights = match self.slot(prefix) {
            Slot::Determiner => {
                let det = v
                    .id(&self.world.space().function_words[0])
                    .expect("function words are in the vocabulary");
                return Ok(WordDistribution::one_hot(v.len(), det));
            }
            Slot::End => return Ok(WordDistribution::one_hot(v.len(), v.eos_id())),
            Slot::Attribute => {
                let primary = self.ids(&view.primary.attrs);
                let distractor = self.ids(view.distractors.iter().flat_map(|d| &d.attrs));
                self.spread(&self.attribute_ids, &primary, &distractor)
            }
            Slot::Category => {
                let primary = self.ids([&view.primary.category]);
                let distractor = self.ids(view.distractors.iter().map(|d| &d.category));
                self.spread(&self.category_ids, &primary, &distractor)
            }
        };
        WordDistribution::from_weights(weights).map_err(|e| BackendError(e.to_string()))
    }
}

/// Reference image-text scorer: fraction of content words that describe the
/// patch's primary object. Words describing another visible object earn
/// half credit.
#[derive(Debug, Clone)]
pub struct SynthScorer {
    world: SynthWorld,
}

impl SynthScorer {
    pub fn new(world: SynthWorld) -> Self {
        Self { world }
    }
}

impl ScorerBackend for SynthScorer {
    fn score(&self, patch: &Patch, text: &str) -> Result<f64, BackendError> {
        let words = content_words(self.world.space(), text);
        let Some(view) = PatchView::of(&self.world, patch) else {
            return Ok(SCORE_FLOOR);
        };
        if words.is_empty() {
            return Ok(SCORE_FLOOR);
        }
        let credit: f64 = words
            .iter()
            .map(|w| {
                if view.primary.contains(w) {
                    1.0
                } else if view.distractors.iter().any(|d| d.contains(w)) {
                    0.5
                } else {
                    0.0
                }
            })
            .sum();
        Ok((credit / words.len() as f64).max(SCORE_FLOOR))
    }
}

/// One mask per encoded object, ordered by object id.
#[derive(Debug, Clone)]
pub struct SynthMaskExtractor {
    world: SynthWorld,
}

impl SynthMaskExtractor {
    pub fn new(world: SynthWorld) -> Self {
        Self { world }
    }
}

impl MaskExtractorBackend for SynthMaskExtractor {
    fn extract(&self, image: &Image) -> Result<Vec<BinaryMask>, BackendError> {
        let mut codes: Vec<u8> = image
            .pixels
            .chunks_exact(3)
            .filter_map(|c| self.world.decode_pixel([c[0], c[1], c[2]]).map(|d| d.object_code))
            .collect();
        codes.sort_unstable();
        codes.dedup();
        codes
            .into_iter()
            .map(|code| {
                BinaryMask::from_fn(image.width, image.height, |x, y| image.pixel(x, y)[0] == code)
                    .map_err(|e| BackendError(e.to_string()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::{calibrate, similarity, CalibrationMode};
    use crate::maskops::{crop, BBox, CropSpec};
    use crate::synthworld::{make_scene, render, Scene, SynthObject};

    fn scene(objects: Vec<(&str, &[&str], BBox)>) -> Scene {
        Scene {
            width: 96,
            height: 96,
            objects: objects
                .into_iter()
                .enumerate()
                .map(|(id, (c, a, rect))| SynthObject {
                    id,
                    category: c.into(),
                    attrs: a.iter().map(|s| s.to_string()).collect(),
                    rect,
                })
                .collect(),
            seed: 0,
        }
    }

    fn rect(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox { x0, y0, x1, y1 }
    }

    fn patch_of(world: &SynthWorld, s: &Scene, i: usize, spec: CropSpec) -> Patch {
        let img = render(world, s, "t");
        crop(&img, &s.masks()[i], i, spec).unwrap()
    }

    fn prob(world: &SynthWorld, d: &WordDistribution, w: &str) -> f64 {
        d.probs()[world.vocabulary().id(w).unwrap() as usize]
    }

    #[test]
    fn isolated_object_attribute_slot() {
        let world = SynthWorld::default();
        let s = scene(vec![("cow", &["large", "spotted", "brown"], rect(10, 10, 30, 30))]);
        let cap = SynthCaptioner::new(world.clone());
        let p = patch_of(&world, &s, 0, CropSpec::new(0.2, false));
        let a = world.vocabulary().id("a").unwrap();
        let d = cap.next_word_dist(&p, &[a]).unwrap();
        for w in ["large", "spotted", "brown"] {
            assert!((prob(&world, &d, w) - 0.3).abs() < 1e-12);
        }
        // 12 non-scene attributes share gamma
        for w in ["white", "small", "horned"] {
            assert!(prob(&world, &d, w) <= GAMMA / 12.0 + 1e-12);
        }
        assert_eq!(prob(&world, &d, "cow"), 0.0);
    }

    #[test]
    fn grammar_walk() {
        let world = SynthWorld::default();
        let v = world.vocabulary();
        let s = scene(vec![("dog", &["small", "striped", "white"], rect(10, 10, 30, 30))]);
        let cap = SynthCaptioner::new(world.clone());
        let p = patch_of(&world, &s, 0, CropSpec::new(0.0, false));
        let id = |w: &str| v.id(w).unwrap();
        assert_eq!(cap.next_word_dist(&p, &[]).unwrap().argmax(), id("a"));
        let cat = cap.next_word_dist(&p, &[id("a"), id("white")]).unwrap();
        assert!((prob(&world, &cat, "dog") - 0.9).abs() < 1e-12);
        assert_eq!(
            cap.next_word_dist(&p, &[id("a"), id("white"), id("dog")])
                .unwrap()
                .argmax(),
            v.eos_id()
        );
        let again = cap.next_word_dist(&p, &[id("a"), id("white")]).unwrap();
        assert_eq!(cat, again);
    }

    #[test]
    fn empty_patch_is_an_error() {
        let world = SynthWorld::default();
        let s = scene(vec![("dog", &["small"], rect(10, 10, 20, 20))]);
        let mut p = patch_of(&world, &s, 0, CropSpec::new(0.0, false));
        p.pixels.iter_mut().for_each(|b| *b = 0);
        let cap = SynthCaptioner::new(world.clone());
        assert!(cap.next_word_dist(&p, &[]).is_err());
        assert!(cap.embed(&p).is_err());
    }

    #[test]
    fn distributions_and_embeddings_satisfy_contracts() {
        let world = SynthWorld::default();
        let cap = SynthCaptioner::new(world.clone());
        let v = world.vocabulary();
        for seed in 0..20 {
            let s = make_scene(&world, seed, 5, 0.6).unwrap();
            for i in 0..s.objects.len() {
                for spec in CropSpec::canonical() {
                    let p = patch_of(&world, &s, i, spec);
                    let e = cap.embed(&p).unwrap();
                    let norm = e.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-6);
                    for prefix in [vec![], vec![2], vec![2, v.id("brown").unwrap()], vec![2, 3, 4]] {
                        let d = cap.next_word_dist(&p, &prefix).unwrap();
                        assert!(WordDistribution::check(d.probs()).is_ok());
                    }
                }
            }
        }
    }

    #[test]
    fn calibration_prefers_differing_color_over_shared_accessory() {
        // two cows, both large and spotted, colors differ; each wide crop shows the other
        let world = SynthWorld::default();
        let s = scene(vec![
            ("cow", &["large", "spotted", "brown"], rect(10, 10, 29, 29)),
            ("cow", &["large", "spotted", "white"], rect(31, 10, 50, 29)),
        ]);
        let cap = SynthCaptioner::new(world.clone());
        let spec = CropSpec::new(0.2, false);
        let (t, o) = (patch_of(&world, &s, 0, spec), patch_of(&world, &s, 1, spec));
        let prefix = [world.vocabulary().id("a").unwrap()];
        let pt = cap.next_word_dist(&t, &prefix).unwrap();
        let po = cap.next_word_dist(&o, &prefix).unwrap();

        // target: own attrs 0.2 each, sibling attrs 0.1 each -> large/spotted 0.3, brown 0.2, white 0.1
        assert!((prob(&world, &pt, "spotted") - 0.3).abs() < 1e-12);
        assert!((prob(&world, &pt, "brown") - 0.2).abs() < 1e-12);
        assert!((prob(&world, &pt, "white") - 0.1).abs() < 1e-12);
        let naive = world.vocabulary().token(pt.argmax()).unwrap();
        assert!(naive == "large" || naive == "spotted");

        let sim = similarity(&cap.embed(&t).unwrap(), &cap.embed(&o).unwrap()).unwrap();
        assert!((sim - 0.75).abs() < 1e-12);
        let cal = calibrate(&pt, &[po], &[sim], 1.0, CalibrationMode::Average).unwrap();
        // pre-softmax: brown 0.2 - 0.75*0.1 = 0.125, spotted 0.3 - 0.75*0.3 = 0.075
        let expected_ratio = (0.125f64 - 0.075).exp();
        let ratio = prob(&world, &cal, "brown") / prob(&world, &cal, "spotted");
        assert!((ratio - expected_ratio).abs() < 1e-12);
        assert!(prob(&world, &cal, "brown") > prob(&world, &cal, "spotted"));
        assert_eq!(world.vocabulary().token(cal.argmax()), Some("brown"));
    }

    #[test]
    fn scorer_examples() {
        let world = SynthWorld::default();
        let scorer = SynthScorer::new(world.clone());
        let s = scene(vec![
            ("cow", &["large", "spotted", "brown"], rect(5, 5, 25, 25)),
            ("cow", &["small", "striped", "white"], rect(60, 60, 80, 80)),
        ]);
        let target = patch_of(&world, &s, 0, CropSpec::new(0.1, false));
        let sibling = patch_of(&world, &s, 1, CropSpec::new(0.1, false));
        assert_eq!(scorer.score(&target, "a large spotted brown cow").unwrap(), 1.0);
        assert_eq!(scorer.score(&target, "brown cow").unwrap(), 1.0);
        assert_eq!(scorer.score(&sibling, "brown cow").unwrap(), 0.5);
        assert_eq!(
            crate::scoring::uos(
                scorer.score(&target, "brown cow").unwrap(),
                &[scorer.score(&sibling, "brown cow").unwrap()]
            ),
            2.0
        );
        assert_eq!(scorer.score(&target, "a red car").unwrap(), SCORE_FLOOR);
        assert_eq!(scorer.score(&target, "a the").unwrap(), SCORE_FLOOR);
    }

    #[test]
    fn scorer_half_credit_for_visible_neighbors_only_when_unmasked() {
        let world = SynthWorld::default();
        let scorer = SynthScorer::new(world.clone());
        let s = scene(vec![
            ("cow", &["large", "spotted", "brown"], rect(10, 10, 29, 29)),
            ("dog", &["small", "striped", "white"], rect(31, 10, 50, 29)),
        ]);
        let wide = patch_of(&world, &s, 0, CropSpec::new(0.2, false));
        let masked = patch_of(&world, &s, 0, CropSpec::new(0.0, true));
        assert_eq!(scorer.score(&wide, "white dog").unwrap(), 0.5);
        assert_eq!(scorer.score(&masked, "white dog").unwrap(), SCORE_FLOOR);
        assert_eq!(scorer.score(&wide, "white cow").unwrap(), 0.75);
    }

    #[test]
    fn mask_extractor_recovers_objects() {
        let world = SynthWorld::default();
        let s = make_scene(&world, 5, 4, 0.5).unwrap();
        let img = render(&world, &s, "x");
        let masks = SynthMaskExtractor::new(world).extract(&img).unwrap();
        assert_eq!(masks, s.masks());
    }
}
