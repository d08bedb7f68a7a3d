use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use pseudoris::export::{canonical_value, parse_mask_file, render};
use pseudoris::maskops::{rle_decode, BinaryMask, Image};
use pseudoris::pipeline::{ImageFailure, ImageRecord, PipelineConfig};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Write `contents` next to `path` and rename it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(contents.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| anyhow!("writing {}: {}", path.display(), e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `a.json` -> `a.<suffix>.json` in the same directory.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = out
        .extension()
        .map(|e| e.to_string_lossy().into_owned())
        .unwrap_or_else(|| "json".into());
    out.with_file_name(format!("{stem}.{suffix}.{ext}"))
}

pub fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files of `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading image directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_png(p))
        .collect();
    paths.sort();
    Ok(paths)
}

fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn decode_png(id: &str, bytes: &[u8]) -> Result<Image> {
    let rgb = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image::new(id, w, h, rgb.into_raw())?)
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let buf = image::RgbImage::from_raw(image.width, image.height, image.pixels.clone())
        .ok_or_else(|| anyhow!("pixel buffer does not match {}x{}", image.width, image.height))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

fn load_masks(path: &Path, image: &Image) -> Result<Vec<BinaryMask>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading mask file {}", path.display()))?;
    let masks = parse_mask_file(&text)
        .and_then(|rles| rles.iter().map(rle_decode).collect::<pseudoris::Result<Vec<_>>>())
        .with_context(|| format!("in mask file {}", path.display()))?;
    if let Some(m) = masks
        .iter()
        .find(|m| m.width() != image.width || m.height() != image.height)
    {
        return Err(anyhow!(
            "mask file {} has a {}x{} mask for a {}x{} image",
            path.display(),
            m.width(),
            m.height(),
            image.width,
            image.height
        ));
    }
    Ok(masks)
}

/// Input images plus checksums of everything read, keyed by
/// `images/<name>`, `masks/<name>` and `coarse/<name>`.
pub struct LoadedInputs {
    pub records: Vec<std::result::Result<ImageRecord, ImageFailure>>,
    pub checksums: BTreeMap<String, String>,
}

/// Read every PNG in `images`; masks come from `<stem>.json` in the mask
/// directories when given.
pub fn load_inputs(images: &Path, masks: Option<&Path>, coarse: Option<&Path>) -> Result<LoadedInputs> {
    let mut checksums = BTreeMap::new();
    let mut records = Vec::new();
    for path in list_images(images)? {
        let id = image_id(&path);
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let result = (|| -> Result<ImageRecord> {
            let bytes = std::fs::read(&path)?;
            checksums.insert(format!("images/{name}"), sha256_hex(&bytes));
            let image = decode_png(&id, &bytes).with_context(|| format!("decoding {}", path.display()))?;
            let mut record = ImageRecord::new(image);
            record.file_name = name.clone();
            for (dir, label) in [(masks, "masks"), (coarse, "coarse")] {
                let Some(dir) = dir else { continue };
                let mask_path = dir.join(format!("{id}.json"));
                let bytes = std::fs::read(&mask_path).with_context(|| format!("reading {}", mask_path.display()))?;
                checksums.insert(format!("{label}/{id}.json"), sha256_hex(&bytes));
                let loaded = load_masks(&mask_path, &record.image)?;
                if label == "masks" {
                    record.masks = Some(loaded);
                } else {
                    record.coarse_masks = Some(loaded);
                }
            }
            Ok(record)
        })();
        records.push(result.map_err(|e| ImageFailure {
            image_id: id,
            message: format!("{e:#}"),
        }));
    }
    Ok(LoadedInputs { records, checksums })
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub struct Manifest<'a> {
    pub config: &'a PipelineConfig,
    pub input_checksums: &'a BTreeMap<String, String>,
    pub output_checksums: &'a BTreeMap<String, String>,
    pub started_at: u64,
    pub finished_at: u64,
}

impl Manifest<'_> {
    pub fn to_json(&self) -> Result<String> {
        let mut m = serde_json::Map::new();
        m.insert("tool".into(), Value::String(env!("CARGO_PKG_NAME").into()));
        m.insert("tool_version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
        m.insert("config".into(), canonical_value(self.config)?);
        m.insert("seed".into(), Value::from(self.config.seed));
        m.insert("inputs".into(), serde_json::to_value(self.input_checksums)?);
        m.insert("outputs".into(), serde_json::to_value(self.output_checksums)?);
        m.insert("started_at".into(), Value::from(self.started_at));
        m.insert("finished_at".into(), Value::from(self.finished_at));
        Ok(render(&Value::Object(m)))
    }
}
