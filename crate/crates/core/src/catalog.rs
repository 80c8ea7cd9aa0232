// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept catalog: prompt generation, raw concept collection, filtering
//! and persistence.
//!
//! A catalog is the ordered list of concept strings the bottleneck is
//! trained against. Order is significant everywhere downstream (it fixes
//! the channel index of each concept map), so the catalog carries a
//! content hash that later artifacts record and check.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::similarity::encoder::{cosine, ClientError, TextEncoder};

pub const CATALOG_VERSION: u32 = 1;

/// Prompt templates, one family per class. `{class}` is substituted.
pub const PROMPT_TEMPLATES: [&str; 3] = [
    "List the most important features for recognizing something as a {class}",
    "List the things most commonly seen around a {class}",
    "Give superclasses for the word {class}",
];

pub const CLASS_TEMPLATE_PREFIX: &str = "An image of a ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogSource {
    LlmGenerated,
    UserProvided,
    ClassTemplate,
}

/// Why a raw concept was dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RemovalReason {
    Empty,
    TooLong { chars: usize, max: usize },
    ClassName { class: String },
    SimilarToClass { class: String, cosine: f64 },
    LowPresence { presence: f64, min: f64 },
    Duplicate { of: String, cosine: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub concept: String,
    #[serde(flatten)]
    pub reason: RemovalReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub max_length_chars: usize,
    pub concept_class_similarity_cutoff: f64,
    pub concept_concept_similarity_cutoff: f64,
    pub min_training_presence: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            max_length_chars: 30,
            concept_class_similarity_cutoff: 0.85,
            concept_concept_similarity_cutoff: 0.90,
            min_training_presence: 0.0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_length_chars < 1 {
            return Err(Error::Config("max_length_chars must be >= 1".into()));
        }
        for (name, v) in [
            ("concept_class_similarity_cutoff", self.concept_class_similarity_cutoff),
            ("concept_concept_similarity_cutoff", self.concept_concept_similarity_cutoff),
            ("min_training_presence", self.min_training_presence),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptCatalog {
    pub version: u32,
    pub classes: Vec<String>,
    pub concepts: Vec<String>,
    pub source: CatalogSource,
    pub filter_report: Vec<Removal>,
    pub content_hash: String,
}

/// Case-normalized form used for every uniqueness comparison.
pub fn normalize_concept(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Stable SHA-256 over the ordered concept list.
pub fn hash_concepts(concepts: &[String]) -> String {
    let mut h = Sha256::new();
    for c in concepts {
        h.update((c.len() as u64).to_le_bytes());
        h.update(c.as_bytes());
    }
    hex::encode(h.finalize())
}

impl ConceptCatalog {
    /// Builds a catalog from an already-clean list, checking the invariants.
    pub fn new(
        concepts: Vec<String>,
        classes: Vec<String>,
        source: CatalogSource,
        filter_report: Vec<Removal>,
    ) -> Result<Self> {
        if concepts.is_empty() {
            return Err(Error::EmptyCatalog { reasons: vec!["no concepts".into()] });
        }
        let class_set: HashSet<String> = classes.iter().map(|c| normalize_concept(c)).collect();
        let mut seen = HashSet::new();
        for c in &concepts {
            let n = normalize_concept(c);
            if n.is_empty() {
                return Err(Error::invalid("empty concept string"));
            }
            if !seen.insert(n.clone()) {
                return Err(Error::invalid(format!("duplicate concept {c:?}")));
            }
            if source != CatalogSource::ClassTemplate && class_set.contains(&n) {
                return Err(Error::invalid(format!("concept {c:?} equals a class name")));
            }
        }
        let content_hash = hash_concepts(&concepts);
        Ok(Self {
            version: CATALOG_VERSION,
            classes,
            concepts,
            source,
            filter_report,
            content_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        crate::fsutil::write_atomic(path, &bytes)
    }

    /// Loads a catalog and re-derives its hash; a stored hash that no
    /// longer matches the concept list is a provenance failure.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let cat: ConceptCatalog = serde_json::from_slice(&std::fs::read(path)?)?;
        let found = hash_concepts(&cat.concepts);
        if found != cat.content_hash {
            return Err(Error::Provenance {
                artifact: format!("catalog {}", path.display()),
                expected: cat.content_hash,
                found,
            });
        }
        Ok(cat)
    }
}

/// Expands the three prompt templates for every class, class-major.
pub fn build_prompts(class_names: &[String]) -> Result<Vec<String>> {
    if class_names.is_empty() {
        return Err(Error::invalid("class list is empty"));
    }
    Ok(class_names
        .iter()
        .flat_map(|c| PROMPT_TEMPLATES.iter().map(move |t| t.replace("{class}", c)))
        .collect())
}

/// A text-generation backend.
pub trait TextGenerator: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, ClientError>;
}

/// Replays recorded responses keyed by prompt text.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RecordedGenerator {
    pub responses: HashMap<String, String>,
}

impl RecordedGenerator {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

impl TextGenerator for RecordedGenerator {
    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        self.responses
            .get(prompt)
            .cloned()
            .ok_or_else(|| format!("no recorded response for prompt {prompt:?}").into())
    }
}

/// Splits a free-text response into concept lines, dropping list markers.
pub fn parse_concept_lines(response: &str) -> Vec<String> {
    response
        .lines()
        .map(|line| {
            let mut s = line.trim();
            s = s.trim_start_matches(['-', '*', '•']).trim_start();
            // "1." / "12)" enumerations
            let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
            if digits > 0 {
                let rest = &s[digits..];
                if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
                    s = r.trim_start();
                }
            }
            s.trim().to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// Queries the generator with every prompt and returns the de-duplicated
/// concept lines in generation order.
pub fn collect_raw_concepts(prompts: &[String], llm: &dyn TextGenerator) -> Result<Vec<String>> {
    if prompts.is_empty() {
        return Err(Error::invalid("no prompts"));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        let resp = llm.complete(p).map_err(|e| Error::Transport {
            context: format!("prompt {i}"),
            message: e.to_string(),
        })?;
        for c in parse_concept_lines(&resp) {
            if seen.insert(normalize_concept(&c)) {
                out.push(c);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyCatalog {
            reasons: vec!["generator returned no concept lines".into()],
        });
    }
    Ok(out)
}

/// Per-concept presence in the training data.
///
/// `global_sims` is row-major `[n_images][n_concepts]` global image-concept
/// similarity. A concept is present in an image when its similarity exceeds
/// that image's median similarity over all concepts; presence is the fraction
/// of images where this holds.
pub fn training_presence(
    global_sims: &[Vec<f32>],
    concepts: &[String],
) -> Result<HashMap<String, f64>> {
    if global_sims.is_empty() {
        return Err(Error::InsufficientData("no training images for presence".into()));
    }
    let m = concepts.len();
    let mut counts = vec![0usize; m];
    for (n, row) in global_sims.iter().enumerate() {
        if row.len() != m {
            return Err(Error::geometry(format!(
                "presence row {n} has {} entries, expected {m}",
                row.len()
            )));
        }
        let mut sorted = row.clone();
        sorted.sort_by(f32::total_cmp);
        let median = if m % 2 == 1 {
            sorted[m / 2] as f64
        } else {
            (sorted[m / 2 - 1] as f64 + sorted[m / 2] as f64) / 2.0
        };
        for (j, &v) in row.iter().enumerate() {
            if v as f64 > median {
                counts[j] += 1;
            }
        }
    }
    let n = global_sims.len() as f64;
    Ok(concepts
        .iter()
        .zip(counts)
        .map(|(c, k)| (c.clone(), k as f64 / n))
        .collect())
}

/// Applies the filter chain to a raw concept list.
///
/// Filters run in this order, each concept receiving at most one removal
/// reason: emptiness, length, exact class-name match, embedding similarity
/// to a class, training presence (only when `presence` is given), and
/// greedy near-duplicate removal against already-kept concepts (first
/// occurrence wins).
pub fn filter_concepts(
    raw: &[String],
    class_names: &[String],
    text_embedder: &dyn TextEncoder,
    presence: Option<&HashMap<String, f64>>,
    cfg: &FilterConfig,
) -> Result<ConceptCatalog> {
    cfg.validate()?;
    if raw.is_empty() {
        return Err(Error::invalid("raw concept list is empty"));
    }
    let raw: Vec<String> = raw.iter().map(|s| s.trim().to_string()).collect();
    let embed = |texts: &[String]| {
        text_embedder.encode_texts(texts).map_err(|e| Error::Transport {
            context: "text embedding".into(),
            message: e.to_string(),
        })
    };
    let concept_vecs = embed(&raw)?;
    let class_vecs = embed(class_names)?;
    if concept_vecs.len() != raw.len() || class_vecs.len() != class_names.len() {
        return Err(Error::Transport {
            context: "text embedding".into(),
            message: "embedder returned the wrong number of vectors".into(),
        });
    }
    let class_norm: Vec<String> = class_names.iter().map(|c| normalize_concept(c)).collect();

    let mut report = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut kept_norm: HashMap<String, usize> = HashMap::new();

    'outer: for (i, c) in raw.iter().enumerate() {
        let norm = normalize_concept(c);
        let remove = |reason| Removal { concept: c.clone(), reason };
        if norm.is_empty() {
            report.push(remove(RemovalReason::Empty));
            continue;
        }
        let chars = c.chars().count();
        if chars > cfg.max_length_chars {
            report.push(remove(RemovalReason::TooLong { chars, max: cfg.max_length_chars }));
            continue;
        }
        if let Some(k) = class_norm.iter().position(|cn| *cn == norm) {
            report.push(remove(RemovalReason::ClassName { class: class_names[k].clone() }));
            continue;
        }
        for (k, cv) in class_vecs.iter().enumerate() {
            let cs = cosine(&concept_vecs[i], cv);
            if cs >= cfg.concept_class_similarity_cutoff {
                report.push(remove(RemovalReason::SimilarToClass {
                    class: class_names[k].clone(),
                    cosine: cs,
                }));
                continue 'outer;
            }
        }
        if let Some(pres) = presence {
            let p = pres.get(c).copied().unwrap_or(0.0);
            if p < cfg.min_training_presence {
                report.push(remove(RemovalReason::LowPresence {
                    presence: p,
                    min: cfg.min_training_presence,
                }));
                continue;
            }
        }
        if let Some(&j) = kept_norm.get(&norm) {
            report.push(remove(RemovalReason::Duplicate { of: raw[j].clone(), cosine: 1.0 }));
            continue;
        }
        for &j in &kept {
            let cs = cosine(&concept_vecs[i], &concept_vecs[j]);
            if cs >= cfg.concept_concept_similarity_cutoff {
                report.push(remove(RemovalReason::Duplicate { of: raw[j].clone(), cosine: cs }));
                continue 'outer;
            }
        }
        kept_norm.insert(norm, i);
        kept.push(i);
    }

    if kept.is_empty() {
        let reasons = report
            .iter()
            .rev()
            .take(5)
            .map(|r| format!("{:?}: {:?}", r.concept, r.reason))
            .collect();
        return Err(Error::EmptyCatalog { reasons });
    }
    let concepts = kept.into_iter().map(|i| raw[i].clone()).collect();
    ConceptCatalog::new(concepts, class_names.to_vec(), CatalogSource::LlmGenerated, report)
}

/// One concept per class: "An image of a {class}".
pub fn class_template_catalog(class_names: &[String]) -> Result<ConceptCatalog> {
    if class_names.is_empty() {
        return Err(Error::invalid("class list is empty"));
    }
    let concepts = class_names
        .iter()
        .map(|c| format!("{CLASS_TEMPLATE_PREFIX}{c}"))
        .collect();
    ConceptCatalog::new(concepts, class_names.to_vec(), CatalogSource::ClassTemplate, vec![])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    /// Embeds via a lookup table; unknown strings get a hashed direction.
    struct TableEmbedder(HashMap<String, Vec<f32>>);

    impl TextEncoder for TableEmbedder {
        fn encode_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
            Ok(texts
                .iter()
                .map(|t| {
                    self.0.get(t).cloned().unwrap_or_else(|| {
                        let h = t.bytes().fold(7u32, |a, b| a.wrapping_mul(31).wrapping_add(b as u32));
                        (0..4).map(|k| ((h >> (k * 7)) & 0x7f) as f32 - 63.5).collect()
                    })
                })
                .collect())
        }
    }

    #[test]
    fn prompts_follow_templates() {
        let p = build_prompts(&s(&["dog"])).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0], "List the most important features for recognizing something as a dog");
        assert_eq!(p[1], "List the things most commonly seen around a dog");
        assert_eq!(p[2], "Give superclasses for the word dog");
        let p2 = build_prompts(&s(&["dog", "cat"])).unwrap();
        assert_eq!(p2.len(), 6);
        assert!(p2[..3].iter().all(|x| x.contains("dog")));
        assert!(p2[3..].iter().all(|x| x.contains("cat")));
        assert!(matches!(build_prompts(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn collect_dedups_across_prompts() {
        struct Same;
        impl TextGenerator for Same {
            fn complete(&self, _: &str) -> Result<String, ClientError> {
                Ok("a wagging tail\nfur".into())
            }
        }
        let prompts = build_prompts(&s(&["dog"])).unwrap();
        let raw = collect_raw_concepts(&prompts, &Same).unwrap();
        assert_eq!(raw, s(&["a wagging tail", "fur"]));
    }

    #[test]
    fn collect_reports_failing_prompt_index() {
        struct FailOn(usize);
        impl TextGenerator for FailOn {
            fn complete(&self, prompt: &str) -> Result<String, ClientError> {
                if prompt.ends_with(&format!("#{}", self.0)) {
                    Err("connection reset".into())
                } else {
                    Ok("x".into())
                }
            }
        }
        let prompts: Vec<String> = (0..4).map(|i| format!("p#{i}")).collect();
        let err = collect_raw_concepts(&prompts, &FailOn(2)).unwrap_err();
        match err {
            Error::Transport { context, .. } => assert_eq!(context, "prompt 2"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn collect_empty_aggregate_is_error() {
        struct Blank;
        impl TextGenerator for Blank {
            fn complete(&self, _: &str) -> Result<String, ClientError> {
                Ok("\n  \n-\n".into())
            }
        }
        let err = collect_raw_concepts(&s(&["p"]), &Blank).unwrap_err();
        assert!(matches!(err, Error::EmptyCatalog { .. }));
    }

    #[test]
    fn line_parser_strips_markers() {
        assert_eq!(
            parse_concept_lines("1. whiskers\n- fur\n* four legs\n 2) a collar \n\n• tail"),
            s(&["whiskers", "fur", "four legs", "a collar", "tail"])
        );
    }

    #[test]
    fn class_collision_empties_catalog() {
        let emb = TableEmbedder(HashMap::new());
        let err = filter_concepts(&s(&["x"]), &s(&["x"]), &emb, None, &FilterConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::EmptyCatalog { .. }));
    }

    #[test]
    fn identical_strings_keep_first() {
        let emb = TableEmbedder(HashMap::new());
        let cat = filter_concepts(
            &s(&["fur", "Fur", "tail"]),
            &s(&["dog"]),
            &emb,
            None,
            &FilterConfig::default(),
        )
        .unwrap();
        assert_eq!(cat.concepts, s(&["fur", "tail"]));
        assert_eq!(cat.filter_report.len(), 1);
        assert!(matches!(cat.filter_report[0].reason, RemovalReason::Duplicate { .. }));
    }

    #[test]
    fn length_and_presence_filters() {
        let emb = TableEmbedder(HashMap::new());
        let mut pres = HashMap::new();
        pres.insert("fur".to_string(), 0.4);
        pres.insert("tail".to_string(), 0.05);
        let cfg = FilterConfig { max_length_chars: 10, min_training_presence: 0.1, ..Default::default() };
        let cat = filter_concepts(
            &s(&["fur", "tail", "an extremely long concept"]),
            &s(&["dog"]),
            &emb,
            Some(&pres),
            &cfg,
        )
        .unwrap();
        assert_eq!(cat.concepts, s(&["fur"]));
        assert_eq!(cat.filter_report.len(), 2);
    }

    #[test]
    fn class_templates() {
        let cat = class_template_catalog(&s(&["goose"])).unwrap();
        assert_eq!(cat.concepts, s(&["An image of a goose"]));
        assert_eq!(cat.source, CatalogSource::ClassTemplate);
        let cat = class_template_catalog(&s(&["b", "a"])).unwrap();
        assert_eq!(cat.concepts, s(&["An image of a b", "An image of a a"]));
        let many: Vec<String> = (0..1000).map(|i| format!("class{i}")).collect();
        assert_eq!(class_template_catalog(&many).unwrap().len(), 1000);
        assert!(class_template_catalog(&[]).is_err());
    }

    #[test]
    fn hash_tracks_order() {
        let a = hash_concepts(&s(&["a", "b"]));
        let b = hash_concepts(&s(&["b", "a"]));
        assert_ne!(a, b);
        assert_eq!(a, hash_concepts(&s(&["a", "b"])));
        // length prefix keeps concatenation ambiguity out
        assert_ne!(hash_concepts(&s(&["ab", "c"])), hash_concepts(&s(&["a", "bc"])));
    }

    #[test]
    fn presence_uses_per_image_median() {
        let sims = vec![vec![0.1, 0.5, 0.3], vec![0.9, 0.2, 0.1]];
        let c = s(&["a", "b", "c"]);
        let p = training_presence(&sims, &c).unwrap();
        assert_eq!(p["a"], 0.5);
        assert_eq!(p["b"], 0.5);
        assert_eq!(p["c"], 0.0);
    }

    #[test]
    fn save_load_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.json");
        let cat = class_template_catalog(&s(&["dog", "cat"])).unwrap();
        cat.save(&path).unwrap();
        assert_eq!(ConceptCatalog::load(&path).unwrap(), cat);
        let text = std::fs::read_to_string(&path).unwrap().replace("of a dog", "of a wolf");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(ConceptCatalog::load(&path), Err(Error::Provenance { .. })));
    }
}
