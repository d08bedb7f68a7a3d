//! Flat `key = value` configuration files with dotted keys.
//!
//! ```text
//! seed = 7
//! filter.tau = 1.3
//! decoding.temperature = 0.5
//! decoder.0.strategy = beam
//! decoder.0.beam_width = 5
//! crop.0.margin = 0.1
//! ```
//!
//! `decoder.N.*` and `crop.N.*` replace the default lists when present; `N`
//! must run from 0 without gaps. `decoding.*` sets a default for every
//! decoder that does not set the field itself.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use pseudoris::decoding::{CalibrationMode, DecodingConfig, Strategy, DEFAULT_MAX_LEN, DEFAULT_TEMPERATURE};
use pseudoris::maskops::CropSpec;
use pseudoris::pipeline::PipelineConfig;
use pseudoris::scoring::Metric;

pub const SEED_ENV: &str = "PSEUDORIS_SEED";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    /// key -> (line number, raw value)
    entries: BTreeMap<String, (usize, String)>,
}

const DECODER_FIELDS: &[&str] = &[
    "strategy",
    "k",
    "p",
    "beam_width",
    "temperature",
    "max_len",
    "calibration_mode",
];
const CROP_FIELDS: &[&str] = &["margin", "masked"];
const PLAIN_KEYS: &[&str] = &[
    "seed",
    "backend.captioner",
    "backend.scorer",
    "backend.mask_source",
    "filter.metric",
    "filter.tau",
    "decoding.temperature",
    "decoding.max_len",
    "decoding.calibration_mode",
];

fn indexed_key<'a>(key: &'a str, prefix: &str, fields: &[&str]) -> Option<(usize, &'a str)> {
    let rest = key.strip_prefix(prefix)?.strip_prefix('.')?;
    let (n, field) = rest.split_once('.')?;
    let n = n.parse().ok()?;
    fields.contains(&field).then_some((n, field))
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {line_no}: expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let known = PLAIN_KEYS.contains(&key)
                || indexed_key(key, "decoder", DECODER_FIELDS).is_some()
                || indexed_key(key, "crop", CROP_FIELDS).is_some();
            if !known {
                bail!("line {line_no}: unknown key `{key}`");
            }
            if entries.insert(key.to_string(), (line_no, value.to_string())).is_some() {
                bail!("line {line_no}: duplicate key `{key}`");
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("line {line}: bad value `{v}` for `{key}`: {e}")),
        }
    }

    fn indices(&self, prefix: &str, fields: &[&str]) -> Result<usize> {
        let mut seen: Vec<usize> = self
            .entries
            .keys()
            .filter_map(|k| indexed_key(k, prefix, fields).map(|(n, _)| n))
            .collect();
        seen.sort_unstable();
        seen.dedup();
        for (expected, n) in seen.iter().enumerate() {
            if *n != expected {
                bail!("`{prefix}.N` entries must be numbered 0, 1, 2, ... without gaps");
            }
        }
        Ok(seen.len())
    }

    /// Overlay every value of this file onto `config`.
    pub fn apply(&self, config: &mut PipelineConfig) -> Result<()> {
        if let Some(seed) = self.get("seed")? {
            config.seed = seed;
        }
        if let Some(v) = self.get::<String>("backend.captioner")? {
            config.backends.captioner = v;
        }
        if let Some(v) = self.get::<String>("backend.scorer")? {
            config.backends.scorer = v;
        }
        if let Some(v) = self.get::<String>("backend.mask_source")? {
            config.backends.mask_source = v;
        }
        if let Some(m) = self.get::<Metric>("filter.metric")? {
            config.filter.metric = m;
        }
        if let Some(t) = self.get("filter.tau")? {
            config.filter.tau = t;
        }

        let n_crops = self.indices("crop", CROP_FIELDS)?;
        if n_crops > 0 {
            config.crop_specs = (0..n_crops)
                .map(|i| {
                    let margin = self
                        .get(&format!("crop.{i}.margin"))?
                        .ok_or_else(|| anyhow!("crop.{i}.margin is required"))?;
                    let masked = self.get(&format!("crop.{i}.masked"))?.unwrap_or(false);
                    Ok(CropSpec { margin, masked })
                })
                .collect::<Result<_>>()?;
        }

        let temperature = self.get("decoding.temperature")?;
        let max_len = self.get("decoding.max_len")?;
        let mode = self.get::<CalibrationMode>("decoding.calibration_mode")?;
        let n_decoders = self.indices("decoder", DECODER_FIELDS)?;
        if n_decoders > 0 {
            config.decoding_configs = (0..n_decoders)
                .map(|i| {
                    let key = |f: &str| format!("decoder.{i}.{f}");
                    let strategy: Strategy = self
                        .get(&key("strategy"))?
                        .ok_or_else(|| anyhow!("decoder.{i}.strategy is required"))?;
                    Ok(DecodingConfig {
                        strategy,
                        k: self.get(&key("k"))?,
                        p: self.get(&key("p"))?,
                        beam_width: self.get(&key("beam_width"))?,
                        temperature: self
                            .get(&key("temperature"))?
                            .or(temperature)
                            .unwrap_or(DEFAULT_TEMPERATURE),
                        max_len: self.get(&key("max_len"))?.or(max_len).unwrap_or(DEFAULT_MAX_LEN),
                        calibration_mode: self.get(&key("calibration_mode"))?.or(mode).unwrap_or_default(),
                    })
                })
                .collect::<Result<_>>()?;
        } else {
            for d in &mut config.decoding_configs {
                if let Some(t) = temperature {
                    d.temperature = t;
                }
                if let Some(m) = max_len {
                    d.max_len = m;
                }
                if let Some(m) = mode {
                    d.calibration_mode = m;
                }
            }
        }
        Ok(())
    }
}

/// Seed from the environment fallback, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| anyhow!("{SEED_ENV}=`{v}` is not a valid seed: {e}")),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(anyhow!("{SEED_ENV}: {e}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_changes_nothing() {
        let mut c = PipelineConfig::default();
        ConfigFile::parse("# only a comment\n\n")
            .unwrap()
            .apply(&mut c)
            .unwrap();
        assert_eq!(c, PipelineConfig::default());
    }

    #[test]
    fn plain_keys() {
        let mut c = PipelineConfig::default();
        ConfigFile::parse("seed = 9\nfilter.metric = uos\nfilter.tau = 2.5  # stricter\ndecoding.temperature = 0.5\n")
            .unwrap()
            .apply(&mut c)
            .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.filter.metric, Metric::Uniqueness);
        assert_eq!(c.filter.tau, 2.5);
        assert_eq!(c.decoding_configs.len(), 11);
        assert!(c.decoding_configs.iter().all(|d| d.temperature == 0.5));
    }

    #[test]
    fn indexed_lists_replace_defaults() {
        let text = "decoder.0.strategy = beam\ndecoder.0.beam_width = 3\n\
                    decoder.1.strategy = topk_distinctive\ndecoder.1.k = 4\n\
                    decoding.temperature = 0.1\n\
                    crop.0.margin = 0.25\ncrop.1.margin = 0\ncrop.1.masked = true\n";
        let mut c = PipelineConfig::default();
        ConfigFile::parse(text).unwrap().apply(&mut c).unwrap();
        assert_eq!(
            c.decoding_configs,
            vec![
                DecodingConfig::beam(3).with_temperature(0.1),
                DecodingConfig::top_k(4, true).with_temperature(0.1),
            ]
        );
        assert_eq!(c.crop_specs, vec![CropSpec::new(0.25, false), CropSpec::new(0.0, true)]);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "seed 4",
            "colour = red",
            "seed = 1\nseed = 2",
            "seed = -3",
            "filter.metric = novelty",
            "decoder.1.strategy = beam",
            "decoder.0.k = 5",
            "crop.0.masked = true",
        ] {
            let r = ConfigFile::parse(text).and_then(|f| f.apply(&mut PipelineConfig::default()));
            assert!(r.is_err(), "accepted `{text}`");
        }
    }
}
