//! Caption decoding: standard strategies plus distractor-calibrated sampling.

mod calibrate;
mod generate;
mod rng;
mod sampling;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use calibrate::{calibrate, calibration_weights, similarity, softmax_with_temperature};
pub use generate::{beam_search, decode_candidate, generate, CalibrationContext};
pub use rng::{candidate_rng, CandidateKey, CandidateRng};
pub use sampling::{restrict_vocab, sample_next, Restriction};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_MAX_LEN: usize = 32;
pub const DEFAULT_BEAM_WIDTH: usize = 5;
pub const GRID_TOP_K: [usize; 5] = [5, 7, 9, 11, 13];
pub const GRID_TOP_P: [f64; 5] = [0.4, 0.5, 0.6, 0.7, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    /// Pure sampling from the full distribution.
    Sample,
    Beam,
    TopkNaive,
    ToppNaive,
    TopkDistinctive,
    ToppDistinctive,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Sample => "sample",
            Strategy::Beam => "beam",
            Strategy::TopkNaive => "topk_naive",
            Strategy::ToppNaive => "topp_naive",
            Strategy::TopkDistinctive => "topk_distinctive",
            Strategy::ToppDistinctive => "topp_distinctive",
        }
    }

    pub fn is_distinctive(&self) -> bool {
        matches!(self, Strategy::TopkDistinctive | Strategy::ToppDistinctive)
    }

    pub fn uses_k(&self) -> bool {
        matches!(self, Strategy::TopkNaive | Strategy::TopkDistinctive)
    }

    pub fn uses_p(&self) -> bool {
        matches!(self, Strategy::ToppNaive | Strategy::ToppDistinctive)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "greedy" => Strategy::Greedy,
            "sample" => Strategy::Sample,
            "beam" => Strategy::Beam,
            "topk_naive" => Strategy::TopkNaive,
            "topp_naive" => Strategy::ToppNaive,
            "topk_distinctive" => Strategy::TopkDistinctive,
            "topp_distinctive" => Strategy::ToppDistinctive,
            other => return Err(Error::Config(format!("unknown decoding strategy `{other}`"))),
        })
    }
}

/// How distractor distributions are aggregated before subtraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Similarity-scaled mean over the other patches.
    #[default]
    Average,
    /// Weights normalized to sum to one over the other patches.
    Weighted,
}

impl CalibrationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CalibrationMode::Average => "average",
            CalibrationMode::Weighted => "weighted",
        }
    }
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(CalibrationMode::Average),
            "weighted" => Ok(CalibrationMode::Weighted),
            other => Err(Error::Config(format!("unknown calibration mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub strategy: Strategy,
    pub k: Option<usize>,
    pub p: Option<f64>,
    pub beam_width: Option<usize>,
    pub temperature: f64,
    pub max_len: usize,
    pub calibration_mode: CalibrationMode,
}

impl DecodingConfig {
    fn base(strategy: Strategy) -> Self {
        Self {
            strategy,
            k: None,
            p: None,
            beam_width: None,
            temperature: DEFAULT_TEMPERATURE,
            max_len: DEFAULT_MAX_LEN,
            calibration_mode: CalibrationMode::Average,
        }
    }

    pub fn greedy() -> Self {
        Self::base(Strategy::Greedy)
    }

    pub fn sample() -> Self {
        Self::base(Strategy::Sample)
    }

    pub fn beam(width: usize) -> Self {
        Self {
            beam_width: Some(width),
            ..Self::base(Strategy::Beam)
        }
    }

    pub fn top_k(k: usize, distinctive: bool) -> Self {
        let strategy = if distinctive {
            Strategy::TopkDistinctive
        } else {
            Strategy::TopkNaive
        };
        Self {
            k: Some(k),
            ..Self::base(strategy)
        }
    }

    pub fn top_p(p: f64, distinctive: bool) -> Self {
        let strategy = if distinctive {
            Strategy::ToppDistinctive
        } else {
            Strategy::ToppNaive
        };
        Self {
            p: Some(p),
            ..Self::base(strategy)
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }

    pub fn with_calibration_mode(mut self, mode: CalibrationMode) -> Self {
        self.calibration_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.strategy;
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        match (s.uses_k(), self.k) {
            (true, None) => return Err(Error::Config(format!("{s} requires k"))),
            (true, Some(0)) => return Err(Error::Config("k must be positive".into())),
            (false, Some(_)) => return Err(Error::Config(format!("{s} does not take k"))),
            _ => {}
        }
        match (s.uses_p(), self.p) {
            (true, None) => return Err(Error::Config(format!("{s} requires p"))),
            (true, Some(p)) if !(p > 0.0 && p <= 1.0) => {
                return Err(Error::Config(format!("p must be in (0, 1], got {p}")))
            }
            (false, Some(_)) => return Err(Error::Config(format!("{s} does not take p"))),
            _ => {}
        }
        match (s == Strategy::Beam, self.beam_width) {
            (true, None) => return Err(Error::Config("beam requires beam_width".into())),
            (true, Some(0)) => return Err(Error::Config("beam_width must be positive".into())),
            (false, Some(_)) => return Err(Error::Config(format!("{s} does not take beam_width"))),
            _ => {}
        }
        Ok(())
    }

    /// Short label such as `topk_distinctive(k=5)`.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Beam => format!("beam(width={})", self.beam_width.unwrap_or_default()),
            s if s.uses_k() => format!("{s}(k={})", self.k.unwrap_or_default()),
            s if s.uses_p() => format!("{s}(p={})", self.p.unwrap_or_default()),
            s => s.to_string(),
        }
    }
}

/// Beam plus distinctive top-k and top-p over the standard values: 11 configs.
pub fn default_grid() -> Vec<DecodingConfig> {
    grid(true)
}

/// Same shape as [`default_grid`] with uncalibrated sampling.
pub fn naive_grid() -> Vec<DecodingConfig> {
    grid(false)
}

fn grid(distinctive: bool) -> Vec<DecodingConfig> {
    std::iter::once(DecodingConfig::beam(DEFAULT_BEAM_WIDTH))
        .chain(GRID_TOP_K.iter().map(|&k| DecodingConfig::top_k(k, distinctive)))
        .chain(GRID_TOP_P.iter().map(|&p| DecodingConfig::top_p(p, distinctive)))
        .collect()
}
