//! Ablation over distinctive sampling and distinctiveness filtering on a
//! seeded synthetic corpus.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::backends::BackendRegistry;
use crate::decoding::{default_grid, naive_grid, CalibrationMode};
use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, BackendSelection, Backends, ImageRecord, PipelineConfig, PseudoAnnotation};
use crate::scoring::{FilterConfig, Metric};

use super::{make_scene, render, uniqueness_rate, Scene, SynthWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_scenes: usize,
    pub n_objects: usize,
    pub overlap: f64,
    pub seed: u64,
    pub tau: f64,
    /// Calibration temperature of the distinctive decoders.
    pub temperature: f64,
    pub calibration_mode: CalibrationMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_scenes: 200,
            n_objects: 4,
            overlap: 1.0,
            seed: 0,
            tau: crate::scoring::DEFAULT_TAU,
            temperature: 0.05,
            calibration_mode: CalibrationMode::Average,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Naive,
    NaiveFiltered,
    Distinctive,
    DistinctiveFiltered,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Naive,
        Variant::NaiveFiltered,
        Variant::Distinctive,
        Variant::DistinctiveFiltered,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::NaiveFiltered => "naive+filter",
            Variant::Distinctive => "distinctive",
            Variant::DistinctiveFiltered => "distinctive+filter",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: Variant,
    pub uniqueness_rate: f64,
    /// Mean over finite distinctiveness values of kept captions.
    pub mean_dos: f64,
    /// Median over finite distinctiveness values; less sensitive to floored
    /// denominators than the mean.
    pub median_dos: f64,
    /// Kept captions with infinite distinctiveness.
    pub n_infinite: usize,
    pub n_kept: usize,
    pub n_candidates: usize,
    pub kept_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, variant: Variant) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Fixed-width text table, one line per variant.
    pub fn to_table(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scenes={} objects={} overlap={:.2} seed={} tau={:.2} temperature={:.3} mode={}",
            c.n_scenes, c.n_objects, c.overlap, c.seed, c.tau, c.temperature, c.calibration_mode
        );
        let _ = writeln!(
            s,
            "{:<20} {:>8} {:>16} {:>10} {:>6} {:>8} {:>8}",
            "variant", "unique", "mean_dos", "median_dos", "inf", "kept", "kept%"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>8.4} {:>16.4} {:>10.4} {:>6} {:>8} {:>8.2}",
                r.variant.as_str(),
                r.uniqueness_rate,
                r.mean_dos,
                r.median_dos,
                r.n_infinite,
                r.n_kept,
                100.0 * r.kept_fraction
            );
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn row(world: &SynthWorld, variant: Variant, anns: &[PseudoAnnotation], scenes: &BTreeMap<String, Scene>) -> BenchRow {
    let dos: Vec<f64> = anns.iter().flat_map(|a| a.captions.iter().map(|c| c.dos)).collect();
    let finite: Vec<f64> = dos.iter().copied().filter(|d| d.is_finite()).collect();
    let n_candidates: usize = anns.iter().map(|a| a.n_candidates).sum();
    BenchRow {
        variant,
        uniqueness_rate: uniqueness_rate(world.space(), anns, scenes),
        mean_dos: if finite.is_empty() {
            0.0
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        },
        median_dos: median(finite.clone()),
        n_infinite: dos.len() - finite.len(),
        n_kept: dos.len(),
        n_candidates,
        kept_fraction: if n_candidates == 0 {
            0.0
        } else {
            dos.len() as f64 / n_candidates as f64
        },
    }
}

/// Generate the corpus and evaluate all four variants on it.
pub fn benchmark(world: &SynthWorld, config: &BenchConfig) -> Result<BenchReport> {
    if config.n_scenes == 0 {
        return Err(Error::Usage("benchmark needs at least one scene".into()));
    }
    let scenes: BTreeMap<String, Scene> = (0..config.n_scenes)
        .map(|i| {
            let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            make_scene(world, seed, config.n_objects, config.overlap).map(|s| (format!("scene-{i:05}"), s))
        })
        .collect::<Result<_>>()?;
    let records = || {
        scenes.iter().map(|(id, scene)| {
            let mut r = ImageRecord::new(render(world, scene, id));
            r.file_name = format!("{id}.png");
            r.masks = Some(scene.masks());
            Ok(r)
        })
    };
    let backends = Backends::resolve(&BackendRegistry::with_builtin(), &BackendSelection::default())?;
    let filter = FilterConfig {
        metric: Metric::Distinctiveness,
        tau: config.tau,
    };
    let distinctive: Vec<_> = default_grid()
        .into_iter()
        .map(|d| {
            if d.strategy.is_distinctive() {
                d.with_temperature(config.temperature)
                    .with_calibration_mode(config.calibration_mode)
            } else {
                d
            }
        })
        .collect();

    let mut rows = Vec::with_capacity(4);
    for (grid, plain, filtered) in [
        (naive_grid(), Variant::Naive, Variant::NaiveFiltered),
        (distinctive, Variant::Distinctive, Variant::DistinctiveFiltered),
    ] {
        let pc = PipelineConfig {
            decoding_configs: grid,
            filter,
            seed: config.seed,
            ..PipelineConfig::default()
        };
        let out = run_pipeline(records(), &backends, &pc)?;
        if let Some(f) = out.image_failures.first() {
            return Err(Error::State(format!(
                "benchmark image `{}` failed: {}",
                f.image_id, f.message
            )));
        }
        rows.push(row(world, plain, &out.candidates, &scenes));
        rows.push(row(world, filtered, &out.annotations, &scenes));
    }
    rows.sort_by_key(|r| r.variant);
    Ok(BenchReport {
        config: config.clone(),
        rows,
    })
}
