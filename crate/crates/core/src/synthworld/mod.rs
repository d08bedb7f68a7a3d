//! Deterministic synthetic scenes and reference backends.
//!
//! Objects are axis-aligned rectangles carrying a category and one attribute
//! per family. Rendering encodes each object's identity into its pixels
//! (R = object id + 1, G = category index + 1, B = packed attribute codes),
//! so the reference backends work from pixels alone and masked patches
//! naturally hide every other object.

mod backends;
mod bench;
mod oracle;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendInstance, BackendKind, BackendRegistry, Vocabulary};
use crate::error::{Error, Result};
use crate::maskops::{BBox, BinaryMask, Image};

pub use backends::{SynthCaptioner, SynthMaskExtractor, SynthScorer, ALPHA, BETA, GAMMA};
pub use bench::{benchmark, BenchConfig, BenchReport, BenchRow, Variant};
pub use oracle::{content_words, oracle_resolve, target_object, uniqueness_rate};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Grid cell side in pixels; one object per cell.
pub const CELL: u32 = 32;
pub const GRID_COLS: u32 = 3;
pub const GRID_ROWS: u32 = 3;
const MIN_SIDE: u32 = 18;
const MAX_SIDE: u32 = 28;
/// Codes per family including "absent"; B packs three families in base 6.
const FAMILY_BASE: u32 = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeFamily {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpace {
    pub categories: Vec<String>,
    pub families: Vec<AttributeFamily>,
    pub function_words: Vec<String>,
}

impl Default for AttributeSpace {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            categories: s(&["cow", "man", "chair", "dog", "car", "cup"]),
            families: vec![
                AttributeFamily {
                    name: "size".into(),
                    values: s(&["small", "large", "tiny", "huge", "tall"]),
                },
                AttributeFamily {
                    name: "accessory".into(),
                    values: s(&["spotted", "striped", "hooded", "horned", "bearded"]),
                },
                AttributeFamily {
                    name: "color".into(),
                    values: s(&["brown", "white", "black", "red", "blue"]),
                },
            ],
            function_words: s(&["a", "the", "with"]),
        }
    }
}

impl AttributeSpace {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let all = self
            .categories
            .iter()
            .chain(self.families.iter().flat_map(|f| &f.values))
            .chain(&self.function_words);
        for t in all {
            if t == BOS || t == EOS || !seen.insert(t.as_str()) {
                return Err(Error::Config(format!("token `{t}` is reserved or repeated")));
            }
        }
        if self.categories.is_empty() || self.categories.len() >= 255 {
            return Err(Error::Config("need between 1 and 254 categories".into()));
        }
        if self.families.len() > 3
            || self
                .families
                .iter()
                .any(|f| f.values.is_empty() || f.values.len() as u32 >= FAMILY_BASE)
        {
            return Err(Error::Config(format!(
                "at most 3 attribute families with 1..{} values each",
                FAMILY_BASE - 1
            )));
        }
        if self.function_words.is_empty() {
            return Err(Error::Config("the determiner slot needs a function word".into()));
        }
        Ok(())
    }

    pub fn attributes(&self) -> impl Iterator<Item = &String> {
        self.families.iter().flat_map(|f| &f.values)
    }

    pub fn is_function_word(&self, w: &str) -> bool {
        self.function_words.iter().any(|f| f == w)
    }
}

/// The attribute space plus the shared vocabulary built from it.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    space: AttributeSpace,
    vocab: Vocabulary,
}

impl Default for SynthWorld {
    fn default() -> Self {
        Self::new(AttributeSpace::default()).expect("default space is valid")
    }
}

impl SynthWorld {
    /// Vocabulary order: bos, eos, function words, categories, attributes by family.
    pub fn new(space: AttributeSpace) -> Result<Self> {
        space.validate()?;
        let tokens: Vec<String> = [BOS.to_string(), EOS.to_string()]
            .into_iter()
            .chain(space.function_words.iter().cloned())
            .chain(space.categories.iter().cloned())
            .chain(space.attributes().cloned())
            .collect();
        let vocab = Vocabulary::new(tokens, 0, 1)?;
        Ok(Self { space, vocab })
    }

    pub fn space(&self) -> &AttributeSpace {
        &self.space
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn encode(&self, id: usize, obj: &SynthObject) -> Result<[u8; 3]> {
        if id >= 255 {
            return Err(Error::Placement("at most 255 objects per scene".into()));
        }
        let cat = self
            .space
            .categories
            .iter()
            .position(|c| *c == obj.category)
            .ok_or_else(|| Error::Contract(format!("unknown category `{}`", obj.category)))?;
        let mut code = 0u32;
        for fam in self.space.families.iter().rev() {
            let v = obj
                .attrs
                .iter()
                .find_map(|a| fam.values.iter().position(|x| x == a))
                .map_or(0, |p| p as u32 + 1);
            code = code * FAMILY_BASE + v;
        }
        Ok([id as u8 + 1, cat as u8 + 1, code as u8])
    }

    /// Category and attributes encoded in an object pixel.
    pub fn decode_pixel(&self, px: [u8; 3]) -> Option<Descriptors> {
        if px[0] == 0 {
            return None;
        }
        let category = self.space.categories.get(px[1].checked_sub(1)? as usize)?.clone();
        let mut attrs = Vec::new();
        let mut code = px[2] as u32;
        for fam in &self.space.families {
            let v = code % FAMILY_BASE;
            code /= FAMILY_BASE;
            if v > 0 {
                attrs.push(fam.values.get(v as usize - 1)?.clone());
            }
        }
        Some(Descriptors {
            object_code: px[0],
            category,
            attrs,
        })
    }
}

/// What a pixel says about the object it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Descriptors {
    pub object_code: u8,
    pub category: String,
    pub attrs: Vec<String>,
}

impl Descriptors {
    pub fn contains(&self, word: &str) -> bool {
        self.category == word || self.attrs.iter().any(|a| a == word)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthObject {
    pub id: usize,
    pub category: String,
    /// One value per family, in family order.
    pub attrs: Vec<String>,
    pub rect: BBox,
}

impl SynthObject {
    pub fn descriptors(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.category.as_str()).chain(self.attrs.iter().map(String::as_str))
    }

    pub fn has_descriptor(&self, word: &str) -> bool {
        self.descriptors().any(|d| d == word)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub width: u32,
    pub height: u32,
    pub objects: Vec<SynthObject>,
    pub seed: u64,
}

impl Scene {
    /// One mask per object, in object order.
    pub fn masks(&self) -> Vec<BinaryMask> {
        self.objects
            .iter()
            .map(|o| BinaryMask::from_rect(self.width, self.height, o.rect).expect("rect lies inside the scene"))
            .collect()
    }
}

/// Seeded scene with `n_objects` in distinct grid cells.
///
/// `overlap` is the probability that an object copies the scene's base
/// category and base value of each family; one randomly chosen family always
/// gets distinct values (while they last), so at `overlap = 1` objects share
/// everything except that family.
pub fn make_scene(world: &SynthWorld, seed: u64, n_objects: usize, overlap: f64) -> Result<Scene> {
    if n_objects == 0 {
        return Err(Error::Usage("a scene needs at least one object".into()));
    }
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::Usage(format!("overlap must be in [0, 1], got {overlap}")));
    }
    let cells = (GRID_COLS * GRID_ROWS) as usize;
    if n_objects > cells {
        return Err(Error::Placement(format!(
            "{n_objects} objects do not fit a {cells}-cell grid"
        )));
    }
    let space = world.space();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut cell_order: Vec<u32> = (0..cells as u32).collect();
    cell_order.shuffle(&mut rng);

    let base_category = rng.gen_range(0..space.categories.len());
    let base_attrs: Vec<usize> = space
        .families
        .iter()
        .map(|f| rng.gen_range(0..f.values.len()))
        .collect();
    let distinct_family = rng.gen_range(0..space.families.len());
    let distinct_values: Vec<usize> = {
        let size = space.families[distinct_family].values.len();
        if n_objects <= size {
            let mut v: Vec<usize> = (0..size).collect();
            v.shuffle(&mut rng);
            v.truncate(n_objects);
            v
        } else {
            (0..n_objects).map(|_| rng.gen_range(0..size)).collect()
        }
    };

    let mut objects = Vec::with_capacity(n_objects);
    for (id, &cell) in cell_order.iter().take(n_objects).enumerate() {
        let category = if rng.gen::<f64>() < overlap {
            base_category
        } else {
            rng.gen_range(0..space.categories.len())
        };
        let attrs = space
            .families
            .iter()
            .enumerate()
            .map(|(f, fam)| {
                let v = if f == distinct_family {
                    distinct_values[id]
                } else if rng.gen::<f64>() < overlap {
                    base_attrs[f]
                } else {
                    rng.gen_range(0..fam.values.len())
                };
                fam.values[v].clone()
            })
            .collect();

        let (cx, cy) = ((cell % GRID_COLS) * CELL, (cell / GRID_COLS) * CELL);
        let w = rng.gen_range(MIN_SIDE..=MAX_SIDE);
        let h = rng.gen_range(MIN_SIDE..=MAX_SIDE);
        let x0 = cx + 2 + rng.gen_range(0..=MAX_SIDE - w);
        let y0 = cy + 2 + rng.gen_range(0..=MAX_SIDE - h);
        objects.push(SynthObject {
            id,
            category: space.categories[category].clone(),
            attrs,
            rect: BBox {
                x0,
                y0,
                x1: x0 + w - 1,
                y1: y0 + h - 1,
            },
        });
    }
    Ok(Scene {
        width: GRID_COLS * CELL,
        height: GRID_ROWS * CELL,
        objects,
        seed,
    })
}

/// Pixel rendering of a scene; background is black.
pub fn render(world: &SynthWorld, scene: &Scene, image_id: &str) -> Image {
    let mut image = Image::blank(image_id, scene.width, scene.height);
    for (i, obj) in scene.objects.iter().enumerate() {
        let rgb = world.encode(i, obj).expect("scene objects come from the world's space");
        for y in obj.rect.y0..=obj.rect.y1 {
            for x in obj.rect.x0..=obj.rect.x1 {
                image.set_pixel(x, y, rgb);
            }
        }
    }
    image
}

/// Register the synthetic backends as `synth` for every kind.
pub fn register_builtin(reg: &mut BackendRegistry) -> Result<()> {
    reg.register("synth", BackendKind::Captioner, || {
        Ok(BackendInstance::Captioner(Arc::new(SynthCaptioner::new(
            SynthWorld::default(),
        ))))
    })?;
    reg.register("synth", BackendKind::Scorer, || {
        Ok(BackendInstance::Scorer(Arc::new(SynthScorer::new(
            SynthWorld::default(),
        ))))
    })?;
    reg.register("synth", BackendKind::MaskExtractor, || {
        Ok(BackendInstance::MaskExtractor(Arc::new(SynthMaskExtractor::new(
            SynthWorld::default(),
        ))))
    })?;
    Ok(())
}
