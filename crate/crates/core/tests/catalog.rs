// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatial_cbm::catalog::{class_template_catalog, filter_concepts, FilterConfig, RemovalReason};
use spatial_cbm::similarity::encoder::{ClientError, TextEncoder};
use spatial_cbm::Error;

/// Looks up fixed vectors; unknown strings get a constant vector.
struct Table(HashMap<String, Vec<f32>>);

impl TextEncoder for Table {
    fn encode_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        Ok(texts.iter().map(|t| self.0.get(t).cloned().unwrap_or_else(|| vec![1.0, 0.0, 0.0, 0.0])).collect())
    }
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Twenty concepts in 4-d: a few near-duplicate clusters, one concept close
/// to a class, one overlong string.
fn fixture(seed: u64) -> (Vec<String>, Vec<String>, Table) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = HashMap::new();
    let classes = vec!["cat".to_string(), "truck".to_string()];
    table.insert("cat".into(), vec![1.0, 0.0, 0.0, 0.0]);
    table.insert("truck".into(), vec![0.0, 1.0, 0.0, 0.0]);
    let anchors: Vec<Vec<f32>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0f32)).collect()).collect();
    let mut raw = Vec::new();
    for i in 0..20 {
        let name = if i == 13 { "a remarkably long concept description".to_string() } else { format!("concept {i:02}") };
        let v: Vec<f32> = if i == 7 {
            vec![0.95, 0.1, 0.05, 0.0]
        } else {
            let a = &anchors[i % 6];
            let jitter = if i < 6 { 0.0 } else { rng.random_range(0.0..0.6f32) };
            a.iter().map(|x| x + jitter * rng.random_range(-1.0..1.0f32)).collect()
        };
        table.insert(name.clone(), v);
        raw.push(name);
    }
    (raw, classes, Table(table))
}

/// Exhaustive pairwise cosines, then the keep rule applied in raw order.
fn brute_force_kept(raw: &[String], classes: &[String], t: &Table, cfg: &FilterConfig) -> Vec<String> {
    let n = raw.len();
    let v: Vec<&Vec<f32>> = raw.iter().map(|r| &t.0[r]).collect();
    let mut pair = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            pair[i][j] = cos(v[i], v[j]);
        }
    }
    let eligible: Vec<bool> = (0..n)
        .map(|i| {
            raw[i].chars().count() <= cfg.max_length_chars
                && classes.iter().all(|c| cos(v[i], &t.0[c]) < cfg.concept_class_similarity_cutoff)
        })
        .collect();
    let mut kept = vec![false; n];
    for i in 0..n {
        kept[i] = eligible[i] && (0..i).all(|j| !kept[j] || pair[i][j] < cfg.concept_concept_similarity_cutoff);
    }
    (0..n).filter(|&i| kept[i]).map(|i| raw[i].clone()).collect()
}

#[test]
fn twenty_concepts_match_pairwise_oracle() {
    for seed in 0..8 {
        let (raw, classes, table) = fixture(seed);
        let cfg = FilterConfig::default();
        let cat = filter_concepts(&raw, &classes, &table, None, &cfg).unwrap();
        assert_eq!(cat.concepts, brute_force_kept(&raw, &classes, &table, &cfg), "seed {seed}");
        assert_eq!(cat.concepts.len() + cat.filter_report.len(), raw.len());
        assert!(cat.filter_report.iter().any(|r| matches!(r.reason, RemovalReason::TooLong { .. })));
        assert!(cat.filter_report.iter().any(|r| matches!(r.reason, RemovalReason::SimilarToClass { .. })));
        let again = filter_concepts(&raw, &classes, &table, None, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&cat).unwrap(), serde_json::to_string(&again).unwrap());
    }
}

#[test]
fn small_examples() {
    let one = |s: &str| vec![s.to_string()];
    let t = Table(HashMap::new());
    let err = filter_concepts(&one("x"), &one("x"), &t, None, &FilterConfig::default()).unwrap_err();
    assert!(matches!(err, Error::EmptyCatalog { .. }));

    let t = Table([("fur".to_string(), vec![0.0, 0.0, 1.0, 0.0])].into());
    let cat = filter_concepts(&["fur".into(), "fur".into()], &one("dog"), &t, None, &FilterConfig::default()).unwrap();
    assert_eq!(cat.concepts, one("fur"));
    assert!(matches!(cat.filter_report[0].reason, RemovalReason::Duplicate { .. }));

    let tmpl = class_template_catalog(&["goose".into()]).unwrap();
    assert_eq!(tmpl.concepts, one("An image of a goose"));
    let ordered = class_template_catalog(&["b".into(), "a".into()]).unwrap();
    assert_eq!(ordered.concepts, vec!["An image of a b", "An image of a a"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filtering_is_idempotent(seed in 0u64..10_000, n in 1usize..25, concept_cut in 0.5f64..0.99, class_cut in 0.5f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = HashMap::new();
        let raw: Vec<String> = (0..n).map(|i| format!("c{}", i % (n / 2 + 1))).collect();
        for r in &raw {
            table.entry(r.clone()).or_insert_with(|| (0..3).map(|_| rng.random_range(-1.0..1.0f32)).collect::<Vec<_>>());
        }
        table.insert("k".into(), vec![0.0, 0.0, 1.0]);
        let t = Table(table);
        let cfg = FilterConfig {
            concept_concept_similarity_cutoff: concept_cut,
            concept_class_similarity_cutoff: class_cut,
            ..FilterConfig::default()
        };
        let classes = vec!["k".to_string()];
        match filter_concepts(&raw, &classes, &t, None, &cfg) {
            Ok(first) => {
                prop_assert_eq!(first.concepts.len() + first.filter_report.len(), raw.len());
                let second = filter_concepts(&first.concepts, &classes, &t, None, &cfg).unwrap();
                prop_assert_eq!(&second.concepts, &first.concepts);
                prop_assert!(second.filter_report.is_empty());
            }
            Err(e) => {
                let empty = matches!(e, Error::EmptyCatalog { .. });
                prop_assert!(empty, "unexpected error {}", e);
            }
        }
    }
}
