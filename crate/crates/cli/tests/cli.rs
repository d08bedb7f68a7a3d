use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pseudoris::export::parse_annotation_file;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pseudoris"));
    c.env_remove("PSEUDORIS_SEED");
    c
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

struct Corpus {
    dir: tempfile::TempDir,
}

impl Corpus {
    fn new(scenes: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let out = bin()
            .args([
                "synth-render",
                "--scenes",
                scenes,
                "--objects",
                "3",
                "--seed",
                "2",
                "--out-dir",
            ])
            .arg(dir.path().join("corpus"))
            .output()
            .unwrap();
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn generate(&self, out: &str, extra: &[&str]) -> Output {
        bin()
            .arg("generate")
            .arg("--images")
            .arg(self.path("corpus/images"))
            .arg("--masks")
            .arg(self.path("corpus/masks"))
            .arg("--out")
            .arg(self.path(out))
            .args(extra)
            .output()
            .unwrap()
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn kept(p: &Path) -> Vec<String> {
    parse_annotation_file(&read(p))
        .unwrap()
        .annotations
        .iter()
        .flat_map(|a| {
            a.captions
                .iter()
                .map(move |c| format!("{}/{}/{}", a.image_id, a.mask_index, c.text))
        })
        .collect()
}

#[test]
fn generate_writes_all_outputs_with_trailing_newlines() {
    let c = Corpus::new("2");
    let out = c.generate("a.json", &["--seed", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["a.json", "a.candidates.json", "a.stats.json", "a.manifest.json"] {
        assert!(read(&c.path(name)).ends_with('\n'), "{name}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(&c.path("a.manifest.json"))).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 4);
    assert!(manifest["config"]["filter"]["tau"].is_number());
}

#[test]
fn explicit_default_tau_changes_nothing() {
    let c = Corpus::new("2");
    assert_eq!(code(&c.generate("a.json", &[])), 0);
    assert_eq!(code(&c.generate("b.json", &["--tau", "1.3"])), 0);
    assert_eq!(read(&c.path("a.json")), read(&c.path("b.json")));
}

#[test]
fn missing_image_dir_is_a_config_error() {
    let out = bin()
        .args(["generate", "--images", "/nonexistent/dir", "--out", "x.json"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn bad_values_are_config_errors() {
    let c = Corpus::new("1");
    assert_eq!(code(&c.generate("a.json", &["--tau", "-1"])), 2);
    assert_eq!(code(&c.generate("a.json", &["--metric", "novelty"])), 2);
    assert_eq!(code(&c.generate("a.json", &["--backend-captioner", "clip"])), 2);
}

#[test]
fn unreadable_image_is_a_partial_failure() {
    let c = Corpus::new("2");
    std::fs::write(c.path("corpus/images/broken.png"), b"not a png").unwrap();
    let out = c.generate("a.json", &[]);
    assert_eq!(code(&out), 1);
    let stats: serde_json::Value = serde_json::from_str(&read(&c.path("a.stats.json"))).unwrap();
    assert_eq!(stats["n_failed_images"], 1);
    assert_eq!(stats["n_images"], 2);
}

#[test]
fn flags_override_file_override_env() {
    let c = Corpus::new("2");
    let cfg = c.path("run.cfg");
    std::fs::write(&cfg, "seed = 7\nfilter.tau = 1.6\n").unwrap();
    let cfg_s = cfg.to_str().unwrap();
    let seed_of = |name: &str| -> serde_json::Value {
        let m: serde_json::Value = serde_json::from_str(&read(&c.path(&format!("{name}.manifest.json")))).unwrap();
        m["seed"].clone()
    };

    assert_eq!(code(&c.generate("file.json", &["--config", cfg_s])), 0);
    assert_eq!(seed_of("file"), 7);
    assert_eq!(code(&c.generate("flag.json", &["--config", cfg_s, "--seed", "8"])), 0);
    assert_eq!(seed_of("flag"), 8);

    let env_run = |name: &str, extra: &[&str]| {
        let mut cmd = bin();
        cmd.env("PSEUDORIS_SEED", "9")
            .arg("generate")
            .arg("--images")
            .arg(c.path("corpus/images"))
            .arg("--masks")
            .arg(c.path("corpus/masks"))
            .arg("--out")
            .arg(c.path(name))
            .args(extra);
        assert_eq!(code(&cmd.output().unwrap()), 0);
    };
    env_run("env.json", &[]);
    assert_eq!(seed_of("env"), 9);
    env_run("envfile.json", &["--config", cfg_s]);
    assert_eq!(seed_of("envfile"), 7);

    let m: serde_json::Value = serde_json::from_str(&read(&c.path("flag.manifest.json"))).unwrap();
    assert_eq!(m["config"]["filter"]["tau"].to_string(), "1.600000");
}

#[test]
fn filter_at_generation_threshold_reproduces_annotations() {
    let c = Corpus::new("2");
    assert_eq!(code(&c.generate("a.json", &[])), 0);
    let out = bin()
        .arg("filter")
        .arg("--input")
        .arg(c.path("a.candidates.json"))
        .arg("--out")
        .arg(c.path("f.json"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(kept(&c.path("a.json")), kept(&c.path("f.json")));
}

#[test]
fn filter_sweeps_and_metrics() {
    let c = Corpus::new("3");
    assert_eq!(code(&c.generate("a.json", &[])), 0);
    let run = |metric: &str, tau: &str| -> Vec<String> {
        let out_path = c.path(&format!("{metric}-{tau}.json"));
        let out = bin()
            .arg("filter")
            .arg("--input")
            .arg(c.path("a.candidates.json"))
            .args(["--metric", metric, "--tau", tau, "--out"])
            .arg(&out_path)
            .output()
            .unwrap();
        assert_eq!(code(&out), 0);
        kept(&out_path)
    };
    let all = run("distinctiveness", "0");
    let n_candidates: usize = parse_annotation_file(&read(&c.path("a.candidates.json")))
        .unwrap()
        .annotations
        .iter()
        .map(|a| a.n_candidates)
        .sum();
    assert_eq!(all.len(), n_candidates);
    let sweep: Vec<usize> = ["1.0", "1.3", "1.6"]
        .iter()
        .map(|t| run("distinctiveness", t).len())
        .collect();
    assert!(sweep.windows(2).all(|w| w[1] <= w[0]), "{sweep:?}");
    assert_ne!(run("uniqueness", "1.3"), run("distinctiveness", "1.3"));
}

#[test]
fn filter_rejects_dump_without_scores() {
    let c = Corpus::new("1");
    assert_eq!(code(&c.generate("a.json", &[])), 0);
    let stripped = read(&c.path("a.candidates.json"))
        .lines()
        .filter(|l| !l.trim_start().starts_with("\"dos\""))
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(c.path("stripped.json"), stripped).unwrap();
    let out = bin()
        .arg("filter")
        .arg("--input")
        .arg(c.path("stripped.json"))
        .arg("--out")
        .arg(c.path("f.json"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn stats_of_empty_annotations_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.json");
    std::fs::write(&p, "{\"annotations\": [], \"config_digest\": \"\", \"version\": 1}\n").unwrap();
    let out = bin().arg("stats").arg("--input").arg(&p).output().unwrap();
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v.as_object().unwrap().values().all(|x| x == 0));
}

#[test]
fn inspect_known_and_unknown_images() {
    let c = Corpus::new("1");
    assert_eq!(code(&c.generate("a.json", &[])), 0);
    let out = bin()
        .arg("inspect")
        .arg("--input")
        .arg(c.path("a.candidates.json"))
        .args(["--image-id", "scene-00000"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("image scene-00000"));
    assert_eq!(text.lines().filter(|l| l.starts_with("mask ")).count(), 3);
    let out = bin()
        .arg("inspect")
        .arg("--input")
        .arg(c.path("a.json"))
        .args(["--image-id", "scene-99999"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn synth_bench_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let p = dir.path().join(name);
        let out = bin()
            .args(["synth-bench", "--scenes", "6", "--objects", "3", "--seed", "4", "--out"])
            .arg(&p)
            .output()
            .unwrap();
        assert_eq!(code(&out), 0);
        (out.stdout, read(&p))
    };
    let (table_a, record_a) = run("a.json");
    let (table_b, record_b) = run("b.json");
    assert_eq!(table_a, table_b);
    assert_eq!(record_a, record_b);
    assert_eq!(String::from_utf8(table_a).unwrap().lines().count(), 6);
    assert_eq!(
        code(&bin().args(["synth-bench", "--mode", "median"]).output().unwrap()),
        2
    );
}
