//! Model contracts and the named backend registry.
//!
//! Three roles: a captioner that exposes next-word probabilities and patch
//! embeddings, an image-text scorer, and a mask extractor. Implementations
//! are registered by name and resolved from the CLI or config.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{BackendError, Error, Result};
use crate::maskops::{BinaryMask, Image, Patch};

pub type TokenId = u32;

/// Tolerance on the sum of a [`WordDistribution`].
pub const DIST_SUM_TOLERANCE: f64 = 1e-6;
/// Tolerance on the norm of a [`VisualEmbedding`].
pub const EMBED_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    bos_id: TokenId,
    eos_id: TokenId,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, bos_id: TokenId, eos_id: TokenId) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let n = tokens.len() as TokenId;
        if bos_id >= n || eos_id >= n {
            return Err(Error::Config(format!(
                "bos/eos ids ({bos_id}, {eos_id}) out of range for {n} tokens"
            )));
        }
        if bos_id == eos_id {
            return Err(Error::Config("bos and eos must differ".into()));
        }
        Ok(Self {
            tokens,
            index,
            bos_id,
            eos_id,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos_id(&self) -> TokenId {
        self.bos_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Space-joined text of a sequence, without bos/eos.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != self.bos_id && id != self.eos_id)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Next-word probabilities over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct WordDistribution {
    probs: Vec<f64>,
}

impl WordDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::check(&probs)?;
        Ok(Self { probs })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Contract("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Contract("weights sum to zero".into()));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn one_hot(len: usize, id: TokenId) -> Self {
        let mut probs = vec![0.0; len];
        probs[id as usize] = 1.0;
        Self { probs }
    }

    pub fn uniform(len: usize) -> Self {
        Self {
            probs: vec![1.0 / len as f64; len],
        }
    }

    pub fn check(probs: &[f64]) -> Result<()> {
        if probs.is_empty() {
            return Err(Error::Contract("empty distribution".into()));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::Contract(format!("probability {p} at token {i} is invalid")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DIST_SUM_TOLERANCE {
            return Err(Error::Contract(format!("probabilities sum to {sum}")));
        }
        Ok(())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Highest-probability token, lowest index on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    /// Terminated by eos rather than truncated at the length limit.
    pub complete: bool,
}

/// Unit-norm visual feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbedding {
    vec: Vec<f64>,
}

impl VisualEmbedding {
    /// Normalizes `raw` to unit length.
    pub fn normalized(raw: Vec<f64>) -> Result<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Contract(
                "cannot normalize a zero or non-finite embedding".into(),
            ));
        }
        Ok(Self {
            vec: raw.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn new(vec: Vec<f64>) -> Result<Self> {
        let norm = vec.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > EMBED_NORM_TOLERANCE {
            return Err(Error::Contract(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self { vec })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vec
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }
}

/// A frozen autoregressive image captioner.
///
/// `next_word_dist` must be deterministic for identical inputs.
pub trait CaptionerBackend: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    fn embed(&self, patch: &Patch) -> Result<VisualEmbedding, BackendError>;

    /// `P(y_t | prefix, patch)`; `prefix` excludes bos.
    fn next_word_dist(&self, patch: &Patch, prefix: &[TokenId]) -> Result<WordDistribution, BackendError>;
}

/// Image-text similarity. Outputs are nonnegative; adapters over raw
/// cosine scores clamp to [`crate::SCORE_FLOOR`].
pub trait ScorerBackend: Send + Sync {
    fn score(&self, patch: &Patch, text: &str) -> Result<f64, BackendError>;
}

pub trait MaskExtractorBackend: Send + Sync {
    fn extract(&self, image: &Image) -> Result<Vec<BinaryMask>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BackendKind {
    Captioner,
    Scorer,
    MaskExtractor,
}

impl BackendKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackendKind::Captioner => "captioner",
            BackendKind::Scorer => "scorer",
            BackendKind::MaskExtractor => "mask_extractor",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "captioner" => Ok(BackendKind::Captioner),
            "scorer" => Ok(BackendKind::Scorer),
            "mask_extractor" | "mask-extractor" | "masks" => Ok(BackendKind::MaskExtractor),
            other => Err(Error::Usage(format!(
                "unknown backend kind `{other}` (expected captioner, scorer or mask_extractor)"
            ))),
        }
    }
}

#[derive(Clone)]
pub enum BackendInstance {
    Captioner(Arc<dyn CaptionerBackend>),
    Scorer(Arc<dyn ScorerBackend>),
    MaskExtractor(Arc<dyn MaskExtractorBackend>),
}

impl BackendInstance {
    pub fn kind(&self) -> BackendKind {
        match self {
            BackendInstance::Captioner(_) => BackendKind::Captioner,
            BackendInstance::Scorer(_) => BackendKind::Scorer,
            BackendInstance::MaskExtractor(_) => BackendKind::MaskExtractor,
        }
    }
}

impl fmt::Debug for BackendInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BackendInstance({})", self.kind())
    }
}

pub type BackendFactory = Arc<dyn Fn() -> Result<BackendInstance> + Send + Sync>;

#[derive(Clone)]
struct Registration {
    factory: BackendFactory,
    exclusive: bool,
}

/// Handle returned by [`BackendRegistry::register`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registered {
    pub kind: BackendKind,
    pub name: String,
}

/// A resolved backend plus its thread-safety declaration.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub instance: BackendInstance,
    /// Calls must be serialized by the caller.
    pub exclusive: bool,
}

#[derive(Clone, Default)]
pub struct BackendRegistry {
    entries: BTreeMap<(BackendKind, String), Registration>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the synthetic reference backends under the name `synth`.
    pub fn with_builtin() -> Self {
        let mut reg = Self::new();
        crate::synthworld::register_builtin(&mut reg).expect("builtin names are unique");
        reg
    }

    pub fn register<F>(&mut self, name: &str, kind: BackendKind, factory: F) -> Result<Registered>
    where
        F: Fn() -> Result<BackendInstance> + Send + Sync + 'static,
    {
        self.register_with(name, kind, false, factory)
    }

    /// Like [`register`](Self::register), declaring whether the backend needs
    /// serialized access.
    pub fn register_with<F>(&mut self, name: &str, kind: BackendKind, exclusive: bool, factory: F) -> Result<Registered>
    where
        F: Fn() -> Result<BackendInstance> + Send + Sync + 'static,
    {
        if name.is_empty() {
            return Err(Error::Usage("backend name must be nonempty".into()));
        }
        let key = (kind, name.to_string());
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateBackend {
                kind: kind.to_string(),
                name: name.to_string(),
            });
        }
        self.entries.insert(
            key,
            Registration {
                factory: Arc::new(factory),
                exclusive,
            },
        );
        Ok(Registered {
            kind,
            name: name.to_string(),
        })
    }

    /// Registered names for `kind`, sorted.
    pub fn names(&self, kind: BackendKind) -> Vec<String> {
        self.entries
            .keys()
            .filter(|(k, _)| *k == kind)
            .map(|(_, n)| n.clone())
            .collect()
    }

    pub fn resolve(&self, kind: BackendKind, name: &str) -> Result<Resolved> {
        let reg = self
            .entries
            .get(&(kind, name.to_string()))
            .ok_or_else(|| Error::BackendNotFound {
                kind: kind.to_string(),
                name: name.to_string(),
                available: self.names(kind),
            })?;
        let instance = (reg.factory)()?;
        if instance.kind() != kind {
            return Err(Error::Contract(format!(
                "factory for {kind} `{name}` produced a {} backend",
                instance.kind()
            )));
        }
        Ok(Resolved {
            instance,
            exclusive: reg.exclusive,
        })
    }

    pub fn captioner(&self, name: &str) -> Result<(Arc<dyn CaptionerBackend>, bool)> {
        let r = self.resolve(BackendKind::Captioner, name)?;
        match r.instance {
            BackendInstance::Captioner(c) => Ok((c, r.exclusive)),
            _ => unreachable!("kind checked in resolve"),
        }
    }

    pub fn scorer(&self, name: &str) -> Result<(Arc<dyn ScorerBackend>, bool)> {
        let r = self.resolve(BackendKind::Scorer, name)?;
        match r.instance {
            BackendInstance::Scorer(s) => Ok((s, r.exclusive)),
            _ => unreachable!("kind checked in resolve"),
        }
    }

    pub fn mask_extractor(&self, name: &str) -> Result<(Arc<dyn MaskExtractorBackend>, bool)> {
        let r = self.resolve(BackendKind::MaskExtractor, name)?;
        match r.instance {
            BackendInstance::MaskExtractor(m) => Ok((m, r.exclusive)),
            _ => unreachable!("kind checked in resolve"),
        }
    }
}

impl fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{SynthCaptioner, SynthScorer, SynthWorld};

    fn synth_captioner() -> Result<BackendInstance> {
        Ok(BackendInstance::Captioner(Arc::new(SynthCaptioner::new(
            SynthWorld::default(),
        ))))
    }

    #[test]
    fn register_and_resolve() {
        let mut reg = BackendRegistry::new();
        let handle = reg.register("synth", BackendKind::Captioner, synth_captioner).unwrap();
        assert_eq!(handle.name, "synth");
        let r = reg.resolve(BackendKind::Captioner, "synth").unwrap();
        assert_eq!(r.instance.kind(), BackendKind::Captioner);
        assert!(!r.exclusive);
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut reg = BackendRegistry::new();
        reg.register("synth", BackendKind::Captioner, synth_captioner).unwrap();
        let err = reg
            .register("synth", BackendKind::Captioner, synth_captioner)
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateBackend { .. }));
        // same name under another kind is fine
        reg.register("synth", BackendKind::Scorer, || {
            Ok(BackendInstance::Scorer(Arc::new(SynthScorer::new(
                SynthWorld::default(),
            ))))
        })
        .unwrap();
    }

    #[test]
    fn missing_backend_lists_available() {
        let reg = BackendRegistry::with_builtin();
        match reg.resolve(BackendKind::Captioner, "missing").unwrap_err() {
            Error::BackendNotFound { available, .. } => assert_eq!(available, vec!["synth".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_name_and_unknown_kind_are_usage_errors() {
        let mut reg = BackendRegistry::new();
        assert!(matches!(
            reg.register("", BackendKind::Scorer, synth_captioner),
            Err(Error::Usage(_))
        ));
        assert!(matches!("decoder".parse::<BackendKind>(), Err(Error::Usage(_))));
    }

    #[test]
    fn factory_kind_mismatch_is_caught() {
        let mut reg = BackendRegistry::new();
        reg.register("wrong", BackendKind::Scorer, synth_captioner).unwrap();
        assert!(matches!(reg.scorer("wrong"), Err(Error::Contract(_))));
    }

    #[test]
    fn enumeration_is_sorted() {
        let mut reg = BackendRegistry::new();
        for name in ["zeta", "alpha", "mid"] {
            reg.register(name, BackendKind::Captioner, synth_captioner).unwrap();
        }
        assert_eq!(reg.names(BackendKind::Captioner), vec!["alpha", "mid", "zeta"]);
        assert!(reg.names(BackendKind::Scorer).is_empty());
    }

    #[test]
    fn repeated_resolution_behaves_identically() {
        let reg = BackendRegistry::with_builtin();
        let (a, _) = reg.scorer("synth").unwrap();
        let (b, _) = reg.scorer("synth").unwrap();
        let world = SynthWorld::default();
        let scene = crate::synthworld::make_scene(&world, 3, 2, 0.5).unwrap();
        let image = crate::synthworld::render(&world, &scene, "s");
        let mask = BinaryMask::from_rect(image.width, image.height, scene.objects[0].rect).unwrap();
        let patch = crate::maskops::crop(&image, &mask, 0, crate::maskops::CropSpec::new(0.1, false)).unwrap();
        let text = format!("a {}", scene.objects[0].category);
        assert_eq!(a.score(&patch, &text).unwrap(), b.score(&patch, &text).unwrap());
    }

    #[test]
    fn vocabulary_validation() {
        let toks = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(Vocabulary::new(toks(&["<bos>", "<eos>", "a"]), 0, 1).is_ok());
        assert!(Vocabulary::new(toks(&["<bos>", "<eos>", "a", "a"]), 0, 1).is_err());
        assert!(Vocabulary::new(toks(&["<bos>", "<eos>"]), 0, 0).is_err());
        assert!(Vocabulary::new(toks(&["<bos>", "<eos>"]), 0, 5).is_err());
    }

    #[test]
    fn distribution_checks() {
        assert!(WordDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(WordDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(WordDistribution::new(vec![1.5, -0.5]).is_err());
        assert!(WordDistribution::new(vec![f64::NAN, 1.0]).is_err());
        assert_eq!(WordDistribution::new(vec![0.2, 0.4, 0.4]).unwrap().argmax(), 1);
    }

    #[test]
    fn embedding_is_unit_norm() {
        let e = VisualEmbedding::normalized(vec![3.0, 4.0]).unwrap();
        assert_eq!(e.as_slice(), &[0.6, 0.8]);
        assert!(VisualEmbedding::normalized(vec![0.0, 0.0]).is_err());
        assert!(VisualEmbedding::new(vec![1.0, 1.0]).is_err());
    }
}
