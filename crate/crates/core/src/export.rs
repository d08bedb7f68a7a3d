//! Byte-stable JSON for annotation files, mask files and corpus stats.
//!
//! Object keys are sorted, floats carry exactly six decimals, infinities are
//! the strings `"inf"`/`"-inf"`, and every document ends with a newline.

use serde::Serialize;
use serde_json::{Map, Number, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::maskops::{CropSpec, Rle};
use crate::pipeline::{AnnotatedCaption, CorpusStats, PipelineConfig, PseudoAnnotation};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationFile {
    pub version: u64,
    pub config_digest: String,
    pub annotations: Vec<PseudoAnnotation>,
}

/// Six-decimal number, or the infinity sentinel strings.
pub fn float_value(x: f64) -> Result<Value> {
    if x.is_nan() {
        return Err(Error::Format("NaN cannot be serialized".into()));
    }
    if x.is_infinite() {
        return Ok(Value::String(if x > 0.0 { "inf" } else { "-inf" }.into()));
    }
    // avoid "-0.000000"
    let text = format!("{:.6}", if x == 0.0 { 0.0 } else { x });
    let text = if text.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        "0.000000".to_string()
    } else {
        text
    };
    text.parse::<Number>()
        .map(Value::Number)
        .map_err(|e| Error::Format(format!("cannot encode {x}: {e}")))
}

fn float_from(v: &Value, what: &str) -> Result<f64> {
    match v {
        Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| Error::Format(format!("{what} is not a float"))),
        Value::String(s) if s == "inf" => Ok(f64::INFINITY),
        Value::String(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
        _ => Err(Error::Format(format!("{what} must be a number"))),
    }
}

fn uint_from(v: &Value, what: &str) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::Format(format!("{what} must be a non-negative integer")))
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, ctx: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::Format(format!("{ctx}: missing `{key}`")))
}

fn object<'a>(v: &'a Value, ctx: &str) -> Result<&'a Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| Error::Format(format!("{ctx} must be an object")))
}

fn array<'a>(v: &'a Value, ctx: &str) -> Result<&'a Vec<Value>> {
    v.as_array()
        .ok_or_else(|| Error::Format(format!("{ctx} must be an array")))
}

fn string(v: &Value, ctx: &str) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Format(format!("{ctx} must be a string")))
}

fn obj(entries: Vec<(&str, Value)>) -> Value {
    Value::Object(entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

/// Pretty-printed document with a trailing newline.
pub fn render(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("a Value always serializes");
    s.push('\n');
    s
}

pub fn rle_value(rle: &Rle) -> Value {
    obj(vec![
        ("size", Value::from(rle.size.to_vec())),
        ("counts", Value::from(rle.counts.clone())),
    ])
}

pub fn rle_from_value(v: &Value) -> Result<Rle> {
    let o = object(v, "mask")?;
    let size = array(field(o, "size", "mask")?, "mask size")?;
    if size.len() != 2 {
        return Err(Error::Format("mask size must be [height, width]".into()));
    }
    let dim = |i: usize| -> Result<u32> {
        u32::try_from(uint_from(&size[i], "mask size")?).map_err(|_| Error::Format("mask size overflows".into()))
    };
    let counts = array(field(o, "counts", "mask")?, "mask counts")?
        .iter()
        .map(|c| uint_from(c, "mask count"))
        .collect::<Result<Vec<_>>>()?;
    Ok(Rle {
        size: [dim(0)?, dim(1)?],
        counts,
    })
}

fn caption_value(c: &AnnotatedCaption) -> Result<Value> {
    Ok(obj(vec![
        ("text", Value::String(c.text.clone())),
        ("uos", float_value(c.uos)?),
        ("cos", float_value(c.cos)?),
        ("dos", float_value(c.dos)?),
        (
            "crop",
            obj(vec![
                ("margin", float_value(c.crop_spec.margin)?),
                ("masked", Value::Bool(c.crop_spec.masked)),
            ]),
        ),
        ("decoder", Value::from(c.decoder)),
    ]))
}

fn caption_from_value(v: &Value) -> Result<AnnotatedCaption> {
    let ctx = "caption";
    let o = object(v, ctx)?;
    let crop = object(field(o, "crop", ctx)?, "crop")?;
    let spec = CropSpec {
        margin: float_from(field(crop, "margin", "crop")?, "crop margin")?,
        masked: field(crop, "masked", "crop")?
            .as_bool()
            .ok_or_else(|| Error::Format("crop masked must be a boolean".into()))?,
    };
    spec.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(AnnotatedCaption {
        text: string(field(o, "text", ctx)?, "caption text")?,
        uos: float_from(field(o, "uos", ctx)?, "uos")?,
        cos: float_from(field(o, "cos", ctx)?, "cos")?,
        dos: float_from(field(o, "dos", ctx)?, "dos")?,
        crop_spec: spec,
        decoder: uint_from(field(o, "decoder", ctx)?, "decoder")? as usize,
    })
}

fn annotation_value(a: &PseudoAnnotation) -> Result<Value> {
    Ok(obj(vec![
        ("image_id", Value::String(a.image_id.clone())),
        ("file_name", Value::String(a.file_name.clone())),
        ("mask_index", Value::from(a.mask_index)),
        ("mask", rle_value(&a.mask)),
        ("n_candidates", Value::from(a.n_candidates)),
        ("flagged", Value::Bool(a.flagged())),
        (
            "captions",
            Value::Array(a.captions.iter().map(caption_value).collect::<Result<_>>()?),
        ),
    ]))
}

fn annotation_from_value(v: &Value) -> Result<PseudoAnnotation> {
    let ctx = "annotation";
    let o = object(v, ctx)?;
    let captions = array(field(o, "captions", ctx)?, "captions")?
        .iter()
        .map(caption_from_value)
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoAnnotation {
        image_id: string(field(o, "image_id", ctx)?, "image_id")?,
        file_name: string(field(o, "file_name", ctx)?, "file_name")?,
        mask_index: match o.get("mask_index") {
            Some(v) => uint_from(v, "mask_index")? as usize,
            None => 0,
        },
        mask: rle_from_value(field(o, "mask", ctx)?)?,
        n_candidates: match o.get("n_candidates") {
            Some(v) => uint_from(v, "n_candidates")? as usize,
            None => captions.len(),
        },
        captions,
    })
}

pub fn annotation_file_value(file: &AnnotationFile) -> Result<Value> {
    Ok(obj(vec![
        ("version", Value::from(file.version)),
        ("config_digest", Value::String(file.config_digest.clone())),
        (
            "annotations",
            Value::Array(file.annotations.iter().map(annotation_value).collect::<Result<_>>()?),
        ),
    ]))
}

pub fn write_annotation_file(file: &AnnotationFile) -> Result<String> {
    Ok(render(&annotation_file_value(file)?))
}

pub fn parse_annotation_file(text: &str) -> Result<AnnotationFile> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Format(format!("invalid JSON: {e}")))?;
    let o = object(&v, "annotation file")?;
    let version = uint_from(field(o, "version", "annotation file")?, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported annotation file version {version}")));
    }
    Ok(AnnotationFile {
        version,
        config_digest: string(field(o, "config_digest", "annotation file")?, "config_digest")?,
        annotations: array(field(o, "annotations", "annotation file")?, "annotations")?
            .iter()
            .map(annotation_from_value)
            .collect::<Result<_>>()?,
    })
}

/// A JSON array of RLE records.
pub fn write_mask_file(masks: &[Rle]) -> String {
    render(&Value::Array(masks.iter().map(rle_value).collect()))
}

pub fn parse_mask_file(text: &str) -> Result<Vec<Rle>> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Format(format!("invalid JSON: {e}")))?;
    array(&v, "mask file")?.iter().map(rle_from_value).collect()
}

pub fn write_stats(stats: &CorpusStats) -> String {
    render(&serde_json::to_value(stats).expect("stats serialize"))
}

/// Normalize any serializable value: sorted keys and six-decimal floats.
pub fn canonical_value<T: Serialize>(value: &T) -> Result<Value> {
    let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    normalize(v)
}

fn normalize(v: Value) -> Result<Value> {
    Ok(match v {
        Value::Number(n) if !(n.is_u64() || n.is_i64()) => {
            float_value(n.as_f64().ok_or_else(|| Error::Format(format!("bad number {n}")))?)?
        }
        Value::Array(items) => Value::Array(items.into_iter().map(normalize).collect::<Result<_>>()?),
        Value::Object(m) => Value::Object(
            m.into_iter()
                .map(|(k, v)| Ok((k, normalize(v)?)))
                .collect::<Result<_>>()?,
        ),
        other => other,
    })
}

/// SHA-256 of the canonical JSON form of a pipeline config.
pub fn config_digest(config: &PipelineConfig) -> Result<String> {
    let text = render(&canonical_value(config)?);
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}
