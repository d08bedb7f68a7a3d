//! Masks, patches and their serialized form.
//!
//! Masks are stored row-major in memory; the run-length form scans
//! column-major and always starts with a run of zeros.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(id: impl Into<String>, width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} pixel bytes for {width}x{height}, got {}",
                pixels.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            width,
            height,
            pixels,
        })
    }

    pub fn blank(id: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            id: id.into(),
            width,
            height,
            pixels: vec![0; width as usize * height as usize * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0 + 1
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
    bbox: Option<BBox>,
    area: usize,
}

impl BinaryMask {
    /// Builds a mask from row-major bits.
    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("mask must be at least 1x1, got {width}x{height}")));
        }
        if bits.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "expected {} bits for {width}x{height}, got {}",
                width as usize * height as usize,
                bits.len()
            )));
        }
        let mut area = 0;
        let mut bbox: Option<BBox> = None;
        for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
            area += 1;
            let x = (i % width as usize) as u32;
            let y = (i / width as usize) as u32;
            bbox = Some(match bbox {
                None => BBox {
                    x0: x,
                    y0: y,
                    x1: x,
                    y1: y,
                },
                Some(b) => BBox {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x),
                    y1: b.y1.max(y),
                },
            });
        }
        Ok(Self {
            width,
            height,
            bits,
            bbox,
            area,
        })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Result<Self> {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::from_bits(width, height, bits)
    }

    /// Mask covering an inclusive rectangle.
    pub fn from_rect(width: u32, height: u32, rect: BBox) -> Result<Self> {
        Self::from_fn(width, height, |x, y| rect.contains(x, y))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Tight bounding box of the set bits; `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        self.bbox
    }

    pub fn area(&self) -> usize {
        self.area
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    fn check_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Shape(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

/// Intersection over union of two equally-sized masks.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same_shape(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// For every coarse mask, pick the fine mask with the highest IoU against it.
///
/// Ties go to the lowest fine index, repeated picks are dropped, and the
/// output follows coarse order.
pub fn reduce_masks(fine: &[BinaryMask], coarse: &[BinaryMask]) -> Result<Vec<BinaryMask>> {
    Ok(reduce_mask_indices(fine, coarse)?
        .into_iter()
        .map(|i| fine[i].clone())
        .collect())
}

/// Index form of [`reduce_masks`].
pub fn reduce_mask_indices(fine: &[BinaryMask], coarse: &[BinaryMask]) -> Result<Vec<usize>> {
    if coarse.is_empty() {
        return Ok(Vec::new());
    }
    if fine.is_empty() {
        return Err(Error::Config(
            "mask reduction needs at least one fine mask when coarse masks are given".into(),
        ));
    }
    let mut selected: Vec<usize> = Vec::with_capacity(coarse.len());
    for c in coarse {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in fine.iter().enumerate() {
            let v = iou(f, c)?;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        let (idx, _) = best.expect("fine is nonempty");
        if !selected.contains(&idx) {
            selected.push(idx);
        }
    }
    Ok(selected)
}

/// How a patch is cut out of the image around a mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Per-side expansion as a fraction of the bbox side length.
    pub margin: f64,
    /// Zero every pixel outside the mask before cropping.
    pub masked: bool,
}

impl CropSpec {
    pub const fn new(margin: f64, masked: bool) -> Self {
        Self { margin, masked }
    }

    /// 0%, 10%, 20% margins plus the tight masked variant.
    pub fn canonical() -> Vec<CropSpec> {
        vec![
            CropSpec::new(0.0, false),
            CropSpec::new(0.1, false),
            CropSpec::new(0.2, false),
            CropSpec::new(0.0, true),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.margin.is_finite() || self.margin < 0.0 {
            return Err(Error::Config(format!("crop margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// A cropped image region for one mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image_id: String,
    pub source_mask_id: usize,
    pub spec: CropSpec,
    /// Region of the source image, inclusive.
    pub crop_box: BBox,
    pub width: u32,
    pub height: u32,
    /// Row-major RGB bytes of the cropped region.
    pub pixels: Vec<u8>,
}

impl Patch {
    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn pixel_iter(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.pixels.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }
}

/// Expand the mask bbox by `spec.margin` per side and cut the region out.
pub fn crop(image: &Image, mask: &BinaryMask, mask_id: usize, spec: CropSpec) -> Result<Patch> {
    if image.width != mask.width || image.height != mask.height {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width, mask.height, image.width, image.height
        )));
    }
    spec.validate()?;
    let bbox = mask
        .bbox
        .ok_or_else(|| Error::Contract(format!("mask {mask_id} is empty")))?;

    let dx = (spec.margin * bbox.width() as f64).round() as i64;
    let dy = (spec.margin * bbox.height() as f64).round() as i64;
    let clamp = |v: i64, hi: u32| v.clamp(0, hi as i64 - 1) as u32;
    let crop_box = BBox {
        x0: clamp(bbox.x0 as i64 - dx, image.width),
        y0: clamp(bbox.y0 as i64 - dy, image.height),
        x1: clamp(bbox.x1 as i64 + dx, image.width),
        y1: clamp(bbox.y1 as i64 + dy, image.height),
    };

    let (w, h) = (crop_box.width(), crop_box.height());
    let mut pixels = Vec::with_capacity(w as usize * h as usize * 3);
    for y in crop_box.y0..=crop_box.y1 {
        for x in crop_box.x0..=crop_box.x1 {
            if spec.masked && !mask.get(x, y) {
                pixels.extend_from_slice(&[0, 0, 0]);
            } else {
                pixels.extend_from_slice(&image.pixel(x, y));
            }
        }
    }
    Ok(Patch {
        image_id: image.id.clone(),
        source_mask_id: mask_id,
        spec,
        crop_box,
        width: w,
        height: h,
        pixels,
    })
}

/// Column-major run-length encoding, first run counts zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [u32; 2],
    pub counts: Vec<u64>,
}

pub fn rle_encode(mask: &BinaryMask) -> Rle {
    let (w, h) = (mask.width, mask.height);
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            let bit = mask.get(x, y);
            if bit != current {
                counts.push(run);
                run = 0;
                current = bit;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle { size: [h, w], counts }
}

pub fn rle_decode(rle: &Rle) -> Result<BinaryMask> {
    let [h, w] = rle.size;
    let total = h as u64 * w as u64;
    let sum: u64 = rle.counts.iter().sum();
    if sum != total {
        return Err(Error::CorruptData(format!(
            "run lengths sum to {sum}, expected {h}x{w} = {total}"
        )));
    }
    if w == 0 || h == 0 {
        return Err(Error::CorruptData(format!("degenerate mask size {h}x{w}")));
    }
    let mut bits = vec![false; total as usize];
    let mut pos = 0u64;
    for (i, &run) in rle.counts.iter().enumerate() {
        if i % 2 == 1 {
            for p in pos..pos + run {
                let (x, y) = (p / h as u64, p % h as u64);
                bits[(y * w as u64 + x) as usize] = true;
            }
        }
        pos += run;
    }
    BinaryMask::from_bits(w, h, bits)
}
