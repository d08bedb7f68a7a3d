use std::collections::{BTreeMap, BTreeSet};

use crate::maskops::{rle_decode, BinaryMask};
use crate::pipeline::PseudoAnnotation;

use super::{AttributeSpace, Scene, BOS, EOS};

/// Lowercased whitespace tokens minus function words and special tokens.
pub fn content_words(space: &AttributeSpace, text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(str::to_lowercase)
        .filter(|w| !space.is_function_word(w) && w != BOS && w != EOS)
        .collect()
}

/// Ids of every object that each content word of `caption` describes.
pub fn oracle_resolve(space: &AttributeSpace, caption: &str, scene: &Scene) -> BTreeSet<usize> {
    let words = content_words(space, caption);
    scene
        .objects
        .iter()
        .filter(|o| words.iter().all(|w| o.has_descriptor(w)))
        .map(|o| o.id)
        .collect()
}

/// Object whose rectangle covers the most pixels of `mask`.
pub fn target_object(scene: &Scene, mask: &BinaryMask) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for o in &scene.objects {
        let r = o.rect;
        let mut n = 0;
        for y in r.y0..=r.y1.min(mask.height().saturating_sub(1)) {
            for x in r.x0..=r.x1.min(mask.width().saturating_sub(1)) {
                n += mask.get(x, y) as usize;
            }
        }
        if n > 0 && best.is_none_or(|(_, b)| n > b) {
            best = Some((o.id, n));
        }
    }
    best.map(|(id, _)| id)
}

/// Fraction of kept captions that the oracle resolves to exactly their
/// target object. Zero when there are no captions.
pub fn uniqueness_rate(
    space: &AttributeSpace,
    annotations: &[PseudoAnnotation],
    scenes: &BTreeMap<String, Scene>,
) -> f64 {
    let (mut unique, mut total) = (0usize, 0usize);
    for ann in annotations {
        let Some(scene) = scenes.get(&ann.image_id) else {
            total += ann.captions.len();
            continue;
        };
        let target = rle_decode(&ann.mask).ok().and_then(|m| target_object(scene, &m));
        for cap in &ann.captions {
            total += 1;
            if let Some(t) = target {
                let hits = oracle_resolve(space, &cap.text, scene);
                unique += (hits.len() == 1 && hits.contains(&t)) as usize;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        unique as f64 / total as f64
    }
}
