use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, Context};
use pseudoris::backends::BackendRegistry;
use pseudoris::decoding::CalibrationMode;
use pseudoris::export::{
    canonical_value, config_digest, parse_annotation_file, render, write_annotation_file, write_mask_file, write_stats,
    AnnotationFile, FORMAT_VERSION,
};
use pseudoris::maskops::{rle_decode, rle_encode};
use pseudoris::pipeline::{refilter, run_pipeline, Backends, CorpusStats, PipelineConfig};
use pseudoris::scoring::{FilterConfig, Metric};
use pseudoris::synthworld::{benchmark, make_scene, render as render_scene, BenchConfig, SynthWorld};

use crate::config::{env_seed, ConfigFile};
use crate::files::{encode_png, load_inputs, sha256_hex, sibling, unix_now, write_atomic, Manifest};
use crate::{FilterArgs, GenerateArgs, InspectArgs, StatsArgs, SynthBenchArgs, SynthRenderArgs};

pub const EXIT_OK: u8 = 0;
pub const EXIT_PARTIAL: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

type CmdResult = Result<u8, Failure>;

trait OrExit<T> {
    fn or_exit(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn config_error(msg: String) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error: anyhow!(msg),
    }
}

/// Defaults, then the config file, then flags; the seed falls back to the
/// environment when neither flag nor file sets it.
fn effective_config(args: &GenerateArgs) -> anyhow::Result<PipelineConfig> {
    let mut config = PipelineConfig::default();
    let file = match &args.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    file.apply(&mut config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    } else if !file.contains("seed") {
        if let Some(seed) = env_seed()? {
            config.seed = seed;
        }
    }
    if let Some(v) = &args.backend_captioner {
        config.backends.captioner = v.clone();
    }
    if let Some(v) = &args.backend_scorer {
        config.backends.scorer = v.clone();
    }
    if let Some(v) = &args.mask_source {
        config.backends.mask_source = v.clone();
    }
    if let Some(m) = &args.metric {
        config.filter.metric = m.parse::<Metric>()?;
    }
    if let Some(t) = args.tau {
        config.filter.tau = t;
    }
    config.validate()?;
    Ok(config)
}

fn require_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(config_error(format!(
            "{what} directory {} does not exist",
            path.display()
        )))
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn generate(args: &GenerateArgs) -> CmdResult {
    let started_at = unix_now();
    require_dir(&args.images, "image")?;
    for (dir, what) in [(&args.masks, "mask"), (&args.coarse_masks, "coarse mask")] {
        if let Some(d) = dir {
            require_dir(d, what)?;
        }
    }
    let config = effective_config(args).or_exit(EXIT_CONFIG)?;
    let mut selection = config.backends.clone();
    if args.masks.is_some() {
        selection.mask_source = "none".into();
    }
    let backends = Backends::resolve(&BackendRegistry::with_builtin(), &selection).or_exit(EXIT_CONFIG)?;
    let inputs = load_inputs(&args.images, args.masks.as_deref(), args.coarse_masks.as_deref()).or_exit(EXIT_CONFIG)?;
    let output = run_pipeline(inputs.records, &backends, &config).or_exit(EXIT_CONFIG)?;

    let digest = config_digest(&config).or_exit(EXIT_CONFIG)?;
    let annotations = write_annotation_file(&AnnotationFile {
        version: FORMAT_VERSION,
        config_digest: digest.clone(),
        annotations: output.annotations,
    })
    .or_exit(EXIT_PARTIAL)?;
    let candidates = write_annotation_file(&AnnotationFile {
        version: FORMAT_VERSION,
        config_digest: digest,
        annotations: output.candidates,
    })
    .or_exit(EXIT_PARTIAL)?;
    let stats = write_stats(&output.stats);

    let mut written = BTreeMap::new();
    for (path, text) in [
        (args.out.clone(), &annotations),
        (sibling(&args.out, "candidates"), &candidates),
        (sibling(&args.out, "stats"), &stats),
    ] {
        write_atomic(&path, text).or_exit(EXIT_PARTIAL)?;
        written.insert(file_name(&path), sha256_hex(text.as_bytes()));
    }
    let manifest = Manifest {
        config: &config,
        input_checksums: &inputs.checksums,
        output_checksums: &written,
        started_at,
        finished_at: unix_now(),
    };
    write_atomic(
        &sibling(&args.out, "manifest"),
        &manifest.to_json().or_exit(EXIT_PARTIAL)?,
    )
    .or_exit(EXIT_PARTIAL)?;

    for f in &output.image_failures {
        eprintln!("skipped image {}: {}", f.image_id, f.message);
    }
    for f in &output.candidate_failures {
        eprintln!(
            "skipped candidate {} mask {} crop {} decoder {}: {}",
            f.image_id, f.mask_index, f.crop_index, f.config_index, f.message
        );
    }
    let s = output.stats;
    eprintln!(
        "{} images, {} masks, {} candidates, {} kept",
        s.n_images, s.n_masks, s.n_candidates, s.n_kept
    );
    if s.n_failed_images > 0 || s.n_failed_candidates > 0 {
        Ok(EXIT_PARTIAL)
    } else {
        Ok(EXIT_OK)
    }
}

fn read_annotations(path: &Path) -> Result<AnnotationFile, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .or_exit(EXIT_CONFIG)?;
    parse_annotation_file(&text)
        .with_context(|| format!("in {}", path.display()))
        .or_exit(EXIT_CONFIG)
}

pub fn filter(args: &FilterArgs) -> CmdResult {
    let filter = FilterConfig {
        metric: args.metric.parse().or_exit(EXIT_CONFIG)?,
        tau: args.tau,
    };
    filter.validate().or_exit(EXIT_CONFIG)?;
    let dump = read_annotations(&args.input)?;
    let annotations = refilter(&dump.annotations, &filter).or_exit(EXIT_CONFIG)?;
    let digest = sha256_hex(
        format!(
            "{}|filter.metric={}|filter.tau={:.6}",
            dump.config_digest, filter.metric, filter.tau
        )
        .as_bytes(),
    );
    let kept: usize = annotations.iter().map(|a| a.captions.len()).sum();
    let text = write_annotation_file(&AnnotationFile {
        version: FORMAT_VERSION,
        config_digest: digest,
        annotations,
    })
    .or_exit(EXIT_PARTIAL)?;
    write_atomic(&args.out, &text).or_exit(EXIT_PARTIAL)?;
    eprintln!("kept {kept} captions at {} >= {}", filter.metric, filter.tau);
    Ok(EXIT_OK)
}

pub fn stats(args: &StatsArgs) -> CmdResult {
    let file = read_annotations(&args.input)?;
    let text = write_stats(&CorpusStats::from_annotations(&file.annotations));
    print!("{text}");
    if let Some(out) = &args.out {
        write_atomic(out, &text).or_exit(EXIT_PARTIAL)?;
    }
    Ok(EXIT_OK)
}

fn fmt_score(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x:.6}")
    }
}

pub fn inspect(args: &InspectArgs) -> CmdResult {
    let file = read_annotations(&args.input)?;
    let anns: Vec<_> = file
        .annotations
        .iter()
        .filter(|a| a.image_id == args.image_id)
        .collect();
    if anns.is_empty() {
        return Err(config_error(format!(
            "image `{}` is not in {}",
            args.image_id,
            args.input.display()
        )));
    }
    let mut s = String::new();
    let _ = writeln!(s, "image {} ({})", args.image_id, anns[0].file_name);
    for a in anns {
        let mask = rle_decode(&a.mask).or_exit(EXIT_CONFIG)?;
        let bbox = mask.bbox().map_or("empty".to_string(), |b| {
            format!("({}, {})-({}, {})", b.x0, b.y0, b.x1, b.y1)
        });
        let _ = writeln!(
            s,
            "mask {}: {}x{} area {} bbox {} candidates {} kept {}{}",
            a.mask_index,
            mask.height(),
            mask.width(),
            mask.area(),
            bbox,
            a.n_candidates,
            a.captions.len(),
            if a.flagged() { " [flagged]" } else { "" }
        );
        for c in &a.captions {
            let _ = writeln!(
                s,
                "  dos {:>10} uos {:>10} cos {:>8}  crop {:.2}{}  decoder {:>2}  {:?}",
                fmt_score(c.dos),
                fmt_score(c.uos),
                fmt_score(c.cos),
                c.crop_spec.margin,
                if c.crop_spec.masked { " masked" } else { "" },
                c.decoder,
                c.text
            );
        }
    }
    print!("{s}");
    Ok(EXIT_OK)
}

fn seed_or_env(seed: Option<u64>) -> Result<u64, Failure> {
    match seed {
        Some(s) => Ok(s),
        None => Ok(env_seed().or_exit(EXIT_CONFIG)?.unwrap_or(0)),
    }
}

pub fn synth_bench(args: &SynthBenchArgs) -> CmdResult {
    let defaults = BenchConfig::default();
    let config = BenchConfig {
        n_scenes: args.scenes,
        n_objects: args.objects,
        overlap: args.overlap,
        seed: seed_or_env(args.seed)?,
        tau: args.tau.unwrap_or(defaults.tau),
        temperature: args.temperature.unwrap_or(defaults.temperature),
        calibration_mode: match &args.mode {
            Some(m) => m.parse::<CalibrationMode>().or_exit(EXIT_CONFIG)?,
            None => defaults.calibration_mode,
        },
    };
    if !(config.temperature.is_finite() && config.temperature > 0.0) {
        return Err(config_error(format!(
            "temperature must be > 0, got {}",
            config.temperature
        )));
    }
    let report = benchmark(&SynthWorld::default(), &config).or_exit(EXIT_CONFIG)?;
    print!("{}", report.to_table());
    if let Some(out) = &args.out {
        let text = render(&canonical_value(&report).or_exit(EXIT_PARTIAL)?);
        write_atomic(out, &text).or_exit(EXIT_PARTIAL)?;
    }
    Ok(EXIT_OK)
}

pub fn synth_render(args: &SynthRenderArgs) -> CmdResult {
    let world = SynthWorld::default();
    let seed = seed_or_env(args.seed)?;
    let (images, masks) = (args.out_dir.join("images"), args.out_dir.join("masks"));
    for d in [&images, &masks] {
        std::fs::create_dir_all(d)
            .with_context(|| format!("creating {}", d.display()))
            .or_exit(EXIT_CONFIG)?;
    }
    let mut scenes = BTreeMap::new();
    for i in 0..args.scenes {
        let id = format!("scene-{i:05}");
        let scene = make_scene(&world, seed.wrapping_add(i as u64), args.objects, args.overlap).or_exit(EXIT_CONFIG)?;
        let png = encode_png(&render_scene(&world, &scene, &id)).or_exit(EXIT_PARTIAL)?;
        std::fs::write(images.join(format!("{id}.png")), png)
            .context("writing image")
            .or_exit(EXIT_PARTIAL)?;
        let rles: Vec<_> = scene.masks().iter().map(rle_encode).collect();
        write_atomic(&masks.join(format!("{id}.json")), &write_mask_file(&rles)).or_exit(EXIT_PARTIAL)?;
        scenes.insert(id, scene);
    }
    let text = render(&canonical_value(&scenes).or_exit(EXIT_PARTIAL)?);
    write_atomic(&args.out_dir.join("scenes.json"), &text).or_exit(EXIT_PARTIAL)?;
    eprintln!("wrote {} scenes to {}", args.scenes, args.out_dir.display());
    Ok(EXIT_OK)
}
