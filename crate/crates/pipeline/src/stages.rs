// SPDX-License-Identifier: MIT OR Apache-2.0

//! The pipeline stages. Each one takes the output-directory lock, checks
//! its upstream records, writes its artifacts, then writes its own record.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use spatial_cbm::backbone::{prepare_image, BackboneSource, FeatureBank};
use spatial_cbm::bottleneck::{project, train_bottleneck, BottleneckWeights, FinalLosses};
use spatial_cbm::bundle::{BundleManifest, ModelBundle};
use spatial_cbm::catalog::{
    build_prompts, class_template_catalog, collect_raw_concepts, filter_concepts, training_presence,
    CatalogSource, ConceptCatalog, FilterConfig, RecordedGenerator, CLASS_TEMPLATE_PREFIX,
};
use spatial_cbm::eval::{
    classification_accuracy, load_manifest, load_mask, seg_metrics, ClassificationReport, DatasetEntry,
    MetricsReport, MiouAggregation, SegSample, ThresholdPolicy,
};
use spatial_cbm::explain::{concept_heatmap, export_heatmap_png, heatmap_file, Explanation};
use spatial_cbm::fsutil::{write_atomic, DirLock};
use spatial_cbm::head::{pool, regularization_path, train_head, ElasticNet, PathEntry};
use spatial_cbm::similarity::encoder::{cosine, EmbeddingClient};
use spatial_cbm::similarity::store::compute_to_store;
use spatial_cbm::similarity::{load_matrix, SimilarityMatrix};
use spatial_cbm::{Error, Result};

use crate::config::{derive_seed, section_hash, CatalogConfig, RunConfig};
use crate::record::{digest, StageRecord};

pub const CATALOG: &str = "catalog.json";
pub const SIMILARITIES: &str = "similarities";
pub const BOTTLENECK_BLOB: &str = "bottleneck/weights.bin";
pub const BOTTLENECK_SIDECAR: &str = "bottleneck/weights.json";
pub const CBL_REPORT: &str = "bottleneck/report.json";
pub const BACKBONE_CHECKPOINT: &str = "backbone.safetensors";
pub const HEAD_DIR: &str = "head";
pub const HEAD_REPORT: &str = "head_report.json";
pub const BUNDLE: &str = "bundle.json";
pub const TRAIN_MANIFEST: &str = "train_manifest";

pub const STAGE_CONCEPTS: &str = "concepts";
pub const STAGE_SIMILARITIES: &str = "similarities";
pub const STAGE_TRAIN_CBL: &str = "train_cbl";
pub const STAGE_TRAIN_HEAD: &str = "train_head";

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::Data(format!("image {} does not exist", path.display())));
    }
    image::open(path).map(|i| i.to_rgb8()).map_err(|e| Error::Data(format!("image {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn train_entries(cfg: &RunConfig) -> Result<(Vec<DatasetEntry>, Vec<String>)> {
    let entries = load_manifest(&cfg.dataset.train)?;
    let l = cfg.dataset.classes.len();
    if let Some((i, e)) = entries.iter().enumerate().find(|(_, e)| e.label >= l) {
        return Err(Error::Data(format!("sample {}: label {} outside 0..{l}", e.id_or(i), e.label)));
    }
    let ids = entries.iter().enumerate().map(|(i, e)| e.id_or(i)).collect();
    Ok((entries, ids))
}

// ---------------------------------------------------------------------------
// concepts
// ---------------------------------------------------------------------------

fn global_presence(
    cfg: &RunConfig,
    raw: &[String],
    client: &dyn EmbeddingClient,
) -> Result<HashMap<String, f64>> {
    let (entries, _) = train_entries(cfg)?;
    let size = cfg.similarity.image_size;
    let images = entries.iter().map(|e| Ok(prepare_image(&load_rgb(&e.image)?, size))).collect::<Result<Vec<_>>>()?;
    let transport = |e: Box<dyn std::error::Error + Send + Sync>| Error::Transport {
        context: "presence embeddings".into(),
        message: e.to_string(),
    };
    let texts = client.encode_texts(raw).map_err(transport)?;
    let embs = client.encode_images(&images).map_err(transport)?;
    let sims: Vec<Vec<f32>> = embs.iter().map(|e| texts.iter().map(|t| cosine(e, t) as f32).collect()).collect();
    training_presence(&sims, raw)
}

fn filtered_catalog(cfg: &RunConfig, raw: &[String], filter: &FilterConfig, source: CatalogSource) -> Result<ConceptCatalog> {
    let client = cfg.encoder.build()?;
    let presence = if filter.min_training_presence > 0.0 {
        Some(global_presence(cfg, raw, client.as_ref())?)
    } else {
        None
    };
    let cat = filter_concepts(raw, &cfg.dataset.classes, client.as_ref(), presence.as_ref(), filter)?;
    ConceptCatalog::new(cat.concepts, cat.classes, source, cat.filter_report)
}

pub fn cmd_concepts(cfg: &RunConfig) -> Result<StageRecord> {
    let out = &cfg.output_dir;
    let _lock = DirLock::acquire(out)?;
    let seed = derive_seed(cfg.seed, STAGE_CONCEPTS);
    let mut rec = StageRecord::new(STAGE_CONCEPTS, cfg.seed, seed, section_hash(&(&cfg.dataset.classes, &cfg.catalog)));
    let catalog = match &cfg.catalog {
        CatalogConfig::ClassTemplate => class_template_catalog(&cfg.dataset.classes)?,
        CatalogConfig::UserProvided { path, filter } => {
            rec.inputs.insert("concept_list".into(), digest(path)?);
            let text = std::fs::read_to_string(path)?;
            let raw: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            filtered_catalog(cfg, &raw, filter, CatalogSource::UserProvided)?
        }
        CatalogConfig::Recorded { responses, filter } => {
            rec.inputs.insert("responses".into(), digest(responses)?);
            let generator = RecordedGenerator::load(responses)?;
            let raw = collect_raw_concepts(&build_prompts(&cfg.dataset.classes)?, &generator)?;
            filtered_catalog(cfg, &raw, filter, CatalogSource::LlmGenerated)?
        }
    };
    catalog.save(&out.join(CATALOG))?;
    rec.add_output(out, CATALOG)?;
    rec.save(out)?;
    tracing::info!(concepts = catalog.len(), "catalog written");
    Ok(rec)
}

// ---------------------------------------------------------------------------
// similarities
// ---------------------------------------------------------------------------

pub fn cmd_similarities(cfg: &RunConfig) -> Result<StageRecord> {
    cmd_similarities_with(cfg, true)
}

/// With `resume`, intact chunks of an interrupted run are reused; a store
/// that already has a record is always recomputed.
pub fn cmd_similarities_with(cfg: &RunConfig, resume: bool) -> Result<StageRecord> {
    let out = &cfg.output_dir;
    let _lock = DirLock::acquire(out)?;
    let concepts = StageRecord::load_verified(out, STAGE_CONCEPTS)?;
    let catalog = ConceptCatalog::load(&out.join(CATALOG))?;
    let (entries, ids) = train_entries(cfg)?;
    let client = cfg.encoder.build()?;
    let size = cfg.similarity.image_size;
    let load = |i: usize| Ok(prepare_image(&load_rgb(&entries[i].image)?, size));
    let dir = out.join(SIMILARITIES);
    let engine = cfg.similarity.engine();
    let chunk = cfg.similarity.images_per_chunk;
    let run = |resume| compute_to_store(&dir, &ids, (size, size), &load, &catalog, client.as_ref(), &engine, chunk, resume);
    let resume = resume && !crate::record::record_path(out, STAGE_SIMILARITIES).exists();
    let summary = match run(resume) {
        Err(Error::Integrity(msg)) => {
            tracing::info!(%msg, "starting a fresh similarity store");
            run(false)?
        }
        other => other?,
    };
    tracing::info!(written = summary.chunks_written, skipped = summary.chunks_skipped, "similarity chunks");
    let p = load_matrix(&dir, Some(&catalog.content_hash))?;

    let seed = derive_seed(cfg.seed, STAGE_SIMILARITIES);
    let conf = section_hash(&(&cfg.similarity, &cfg.encoder));
    let mut rec = StageRecord::new(STAGE_SIMILARITIES, cfg.seed, seed, conf);
    rec.inputs.insert(CATALOG.into(), concepts.output(CATALOG)?.into());
    rec.inputs.insert(TRAIN_MANIFEST.into(), digest(&cfg.dataset.train)?);
    rec.inputs.insert("encoder_id".into(), p.encoder_id.clone());
    rec.inputs.insert("similarity_content".into(), p.content_hash());
    rec.add_output(out, SIMILARITIES)?;
    rec.save(out)?;
    Ok(rec)
}

// ---------------------------------------------------------------------------
// train-cbl
// ---------------------------------------------------------------------------

fn checked_matrix(cfg: &RunConfig, catalog: &ConceptCatalog, sims: &StageRecord) -> Result<SimilarityMatrix> {
    let current = digest(&cfg.dataset.train)?;
    let recorded = sims.inputs.get(TRAIN_MANIFEST).cloned().unwrap_or_default();
    if current != recorded {
        return Err(Error::Provenance { artifact: "training manifest".into(), expected: recorded, found: current });
    }
    load_matrix(&cfg.output_dir.join(SIMILARITIES), Some(&catalog.content_hash))
}

fn feature_bank(cfg: &RunConfig, backbone: &dyn spatial_cbm::backbone::Backbone, entries: &[DatasetEntry], ids: &[String], grid: (usize, usize)) -> Result<FeatureBank> {
    let size = cfg.backbone.config.input_size;
    let load = |i: usize| Ok(prepare_image(&load_rgb(&entries[i].image)?, size));
    FeatureBank::extract(backbone, &cfg.backbone.config, ids, &load, grid.0, grid.1)
}

pub fn cmd_train_cbl(cfg: &RunConfig) -> Result<StageRecord> {
    let out = &cfg.output_dir;
    let _lock = DirLock::acquire(out)?;
    let concepts = StageRecord::load_verified(out, STAGE_CONCEPTS)?;
    let sims = StageRecord::load_verified(out, STAGE_SIMILARITIES)?;
    sims.check_input(CATALOG, &concepts)?;
    let catalog = ConceptCatalog::load(&out.join(CATALOG))?;
    let p = checked_matrix(cfg, &catalog, &sims)?;
    let (entries, ids) = train_entries(cfg)?;
    if ids != p.image_manifest {
        return Err(Error::integrity("similarity store lists different images than the training manifest"));
    }
    let backbone = cfg.backbone.source.build(Path::new("."))?;
    let bank = feature_bank(cfg, backbone.as_ref(), &entries, &ids, (p.grid.grid_h, p.grid.grid_w))?;

    let seed = derive_seed(cfg.seed, STAGE_TRAIN_CBL);
    let tc = cfg.cbl.train_config(seed);
    let (weights, report) = train_bottleneck(&bank, &p, &tc)?;
    let mut sidecar = weights.sidecar();
    sidecar.similarity_hash = Some(p.content_hash());
    sidecar.train_config = Some(tc);
    sidecar.final_losses = Some(FinalLosses { train: report.step_losses.last().copied(), validation: report.final_validation_loss });
    weights.save(&out.join(BOTTLENECK_BLOB), &out.join(BOTTLENECK_SIDECAR), &sidecar)?;
    write_json(&out.join(CBL_REPORT), &report)?;

    let mut rec = StageRecord::new(STAGE_TRAIN_CBL, cfg.seed, seed, section_hash(&(&cfg.cbl, &cfg.backbone)));
    rec.inputs.insert(CATALOG.into(), concepts.output(CATALOG)?.into());
    rec.inputs.insert(SIMILARITIES.into(), sims.output(SIMILARITIES)?.into());
    if let BackboneSource::Convnet { checkpoint } | BackboneSource::Patchnet { checkpoint } = &cfg.backbone.source {
        write_atomic(&out.join(BACKBONE_CHECKPOINT), &std::fs::read(checkpoint)?)?;
        rec.add_output(out, BACKBONE_CHECKPOINT)?;
    }
    for rel in [BOTTLENECK_BLOB, BOTTLENECK_SIDECAR, CBL_REPORT] {
        rec.add_output(out, rel)?;
    }
    rec.save(out)?;
    tracing::info!(loss = ?report.final_validation_loss, "bottleneck trained");
    Ok(rec)
}

// ---------------------------------------------------------------------------
// train-head
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadReport {
    pub lambda: f64,
    pub alpha: f64,
    pub nnz: usize,
    pub kkt_residual: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub train_images: usize,
    /// Present when a lambda grid was searched.
    pub path: Option<Vec<PathEntry>>,
}

/// Bundle-relative backbone source: checkpoints live next to the bundle.
fn bundle_backbone(source: &BackboneSource) -> BackboneSource {
    match source {
        BackboneSource::Convnet { .. } => BackboneSource::Convnet { checkpoint: BACKBONE_CHECKPOINT.into() },
        BackboneSource::Patchnet { .. } => BackboneSource::Patchnet { checkpoint: BACKBONE_CHECKPOINT.into() },
        other => other.clone(),
    }
}

/// Pooled concept activations `[N, M]` for the given images.
pub fn pooled_activations(
    backbone: &dyn spatial_cbm::backbone::Backbone,
    weights: &BottleneckWeights,
    cfg: &RunConfig,
    entries: &[DatasetEntry],
    ids: &[String],
) -> Result<Array2<f64>> {
    let bank = feature_bank(cfg, backbone, entries, ids, weights.grid)?;
    let rows: Vec<Vec<f64>> = (0..bank.len())
        .into_par_iter()
        .map(|i| Ok(pool(&project(bank.values.index_axis(Axis(0), i), weights)?, cfg.head.pool).to_vec()))
        .collect::<Result<_>>()?;
    let m = weights.num_concepts();
    Ok(Array2::from_shape_vec((rows.len(), m), rows.concat()).expect("rows have M entries"))
}

pub fn cmd_train_head(cfg: &RunConfig) -> Result<StageRecord> {
    let out = &cfg.output_dir;
    let _lock = DirLock::acquire(out)?;
    let concepts = StageRecord::load_verified(out, STAGE_CONCEPTS)?;
    let sims = StageRecord::load_verified(out, STAGE_SIMILARITIES)?;
    let cbl = StageRecord::load_verified(out, STAGE_TRAIN_CBL)?;
    sims.check_input(CATALOG, &concepts)?;
    cbl.check_input(CATALOG, &concepts)?;
    cbl.check_input(SIMILARITIES, &sims)?;
    let catalog = ConceptCatalog::load(&out.join(CATALOG))?;
    let (weights, _) = BottleneckWeights::load(&out.join(BOTTLENECK_BLOB), &out.join(BOTTLENECK_SIDECAR))?;
    if weights.catalog_hash != catalog.content_hash {
        return Err(Error::Provenance {
            artifact: "bottleneck catalog".into(),
            expected: catalog.content_hash.clone(),
            found: weights.catalog_hash.clone(),
        });
    }
    let source = bundle_backbone(&cfg.backbone.source);
    let backbone = source.build(out)?;
    let (entries, ids) = train_entries(cfg)?;
    let labels: Vec<usize> = entries.iter().map(|e| e.label).collect();
    let x = pooled_activations(backbone.as_ref(), &weights, cfg, &entries, &ids)?;

    let seed = derive_seed(cfg.seed, STAGE_TRAIN_HEAD);
    let solver = cfg.head.solver_config(seed);
    let l = catalog.num_classes();
    let h = &cfg.head;
    let (mut head, report) = match (&h.lambda, &h.lambdas) {
        (Some(lambda), _) => {
            let reg = ElasticNet { alpha: h.alpha, lambda: *lambda };
            let (head, r) = train_head(x.view(), &labels, l, reg, h.pool, &solver, &catalog.content_hash)?;
            let rep = HeadReport {
                lambda: *lambda,
                alpha: h.alpha,
                nnz: head.nnz(),
                kkt_residual: r.kkt_residual,
                objective: r.objective,
                iterations: r.iterations,
                converged: r.converged,
                train_images: labels.len(),
                path: None,
            };
            (head, rep)
        }
        (None, Some(grid)) => {
            let mut order: Vec<usize> = (0..labels.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_sel = ((labels.len() as f64 * h.selection_fraction).round() as usize).clamp(1, labels.len() - 1);
            let (sel, fit) = order.split_at(n_sel);
            let (mut sel, mut fit) = (sel.to_vec(), fit.to_vec());
            sel.sort_unstable();
            fit.sort_unstable();
            let xf = x.select(Axis(0), &fit);
            let yf: Vec<usize> = fit.iter().map(|&i| labels[i]).collect();
            let xs = x.select(Axis(0), &sel);
            let ys: Vec<usize> = sel.iter().map(|&i| labels[i]).collect();
            let (heads, table) = regularization_path(
                xf.view(),
                &yf,
                Some((xs.view(), &ys)),
                l,
                h.alpha,
                grid,
                h.pool,
                &solver,
                &catalog.content_hash,
            )?;
            // Best held-out accuracy; ties go to the larger (sparser) lambda.
            let best = (0..table.len())
                .max_by(|&a, &b| {
                    let (va, vb) = (table[a].validation_accuracy.unwrap_or(0.0), table[b].validation_accuracy.unwrap_or(0.0));
                    va.total_cmp(&vb).then(a.cmp(&b))
                })
                .expect("non-empty grid");
            let e = &table[best];
            let rep = HeadReport {
                lambda: e.lambda,
                alpha: h.alpha,
                nnz: e.nnz,
                kkt_residual: e.kkt_residual,
                objective: e.objective,
                iterations: 0,
                converged: e.kkt_residual <= h.tol,
                train_images: fit.len(),
                path: Some(table.clone()),
            };
            (heads.into_iter().nth(best).expect("head per lambda"), rep)
        }
        (None, None) => return Err(Error::Config("head needs `lambda` or `lambdas`".into())),
    };
    if !report.converged {
        tracing::warn!(kkt = report.kkt_residual, "head solver stopped before reaching the tolerance");
    }
    head.provenance.insert("run_seed".into(), cfg.seed.to_string());
    head.provenance.insert("stage_seed".into(), seed.to_string());
    head.provenance.insert("bottleneck_checksum".into(), weights.checksum());
    head.provenance.insert("similarities".into(), sims.output(SIMILARITIES)?.into());
    let head_dir = out.join(HEAD_DIR);
    if head_dir.exists() {
        std::fs::remove_dir_all(&head_dir)?;
    }
    head.save(&head_dir)?;
    write_json(&out.join(HEAD_REPORT), &report)?;

    let manifest = BundleManifest {
        version: 1,
        catalog: CATALOG.into(),
        catalog_hash: catalog.content_hash.clone(),
        backbone: source,
        backbone_config: cfg.backbone.config.clone(),
        backbone_id: backbone.backbone_id(),
        bottleneck_blob: BOTTLENECK_BLOB.into(),
        bottleneck_sidecar: BOTTLENECK_SIDECAR.into(),
        bottleneck_checksum: weights.checksum(),
        head_dir: HEAD_DIR.into(),
        head_hash: head.content_hash(),
    };
    manifest.save(out)?;
    ModelBundle::load(out)?;

    let mut rec = StageRecord::new(STAGE_TRAIN_HEAD, cfg.seed, seed, section_hash(&cfg.head));
    rec.inputs.insert(CATALOG.into(), concepts.output(CATALOG)?.into());
    for rel in [BOTTLENECK_BLOB, BOTTLENECK_SIDECAR] {
        rec.inputs.insert(rel.into(), cbl.output(rel)?.into());
    }
    for rel in [HEAD_DIR, HEAD_REPORT, BUNDLE] {
        rec.add_output(out, rel)?;
    }
    rec.save(out)?;
    tracing::info!(nnz = report.nnz, lambda = report.lambda, "head trained");
    Ok(rec)
}

// ---------------------------------------------------------------------------
// bundle consumers
// ---------------------------------------------------------------------------

/// Verifies the full record chain, then loads the bundle.
pub fn open_bundle(out: &Path) -> Result<ModelBundle> {
    let concepts = StageRecord::load_verified(out, STAGE_CONCEPTS)?;
    let sims = StageRecord::load_verified(out, STAGE_SIMILARITIES)?;
    let cbl = StageRecord::load_verified(out, STAGE_TRAIN_CBL)?;
    let head = StageRecord::load_verified(out, STAGE_TRAIN_HEAD)?;
    sims.check_input(CATALOG, &concepts)?;
    cbl.check_input(CATALOG, &concepts)?;
    cbl.check_input(SIMILARITIES, &sims)?;
    head.check_input(CATALOG, &concepts)?;
    head.check_input(BOTTLENECK_BLOB, &cbl)?;
    head.check_input(BOTTLENECK_SIDECAR, &cbl)?;
    if cbl.outputs.contains_key(BACKBONE_CHECKPOINT) {
        cbl.output(BACKBONE_CHECKPOINT)?;
    }
    ModelBundle::load(out)
}

/// Writes `explanation.json` and one heatmap PNG per listed concept.
pub fn cmd_explain(cfg: &RunConfig, image: &Path, k: Option<usize>) -> Result<(PathBuf, Explanation)> {
    let out = &cfg.output_dir;
    let _lock = DirLock::acquire(out)?;
    let bundle = open_bundle(out)?;
    let img = load_rgb(image)?;
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let dir = out.join("explanations").join(&stem);
    let (explanation, pass) = bundle.explain(&img, &stem, k.unwrap_or(cfg.explain.k))?;
    let (w, h) = img.dimensions();
    for t in &explanation.top_k {
        let hm = concept_heatmap(&pass.maps, t.m, h as usize, w as usize)?;
        export_heatmap_png(&dir.join(heatmap_file(t.m)), &hm)?;
    }
    write_json(&dir.join("explanation.json"), &explanation)?;
    Ok((dir, explanation))
}

fn eval_manifest(cfg: &RunConfig, manifest: Option<&Path>) -> Result<Vec<DatasetEntry>> {
    let path = manifest
        .map(Path::to_path_buf)
        .or_else(|| cfg.dataset.val.clone())
        .ok_or_else(|| Error::Config("no evaluation manifest: pass one or set dataset.val".into()))?;
    load_manifest(&path)
}

pub fn cmd_eval_classify(cfg: &RunConfig, manifest: Option<&Path>) -> Result<ClassificationReport> {
    let out = &cfg.output_dir;
    let _lock = DirLock::acquire(out)?;
    let bundle = open_bundle(out)?;
    let entries = eval_manifest(cfg, manifest)?;
    let report = classification_accuracy(&bundle, &entries)?;
    write_json(&out.join("eval/classify.json"), &report)?;
    write_atomic(&out.join("eval/classify.txt"), report.to_table().as_bytes())?;
    Ok(report)
}

/// Concept index of each class's "An image of a {class}" entry.
pub fn class_template_indices(catalog: &ConceptCatalog) -> Result<Vec<usize>> {
    catalog
        .classes
        .iter()
        .map(|c| {
            let want = format!("{CLASS_TEMPLATE_PREFIX}{c}");
            catalog.concepts.iter().position(|k| *k == want).ok_or_else(|| {
                Error::Config(format!("segmentation needs the concept {want:?}; use a class-template catalog"))
            })
        })
        .collect()
}

pub fn cmd_eval_segment(
    cfg: &RunConfig,
    manifest: Option<&Path>,
    policy: ThresholdPolicy,
    aggregation: MiouAggregation,
) -> Result<MetricsReport> {
    let out = &cfg.output_dir;
    let _lock = DirLock::acquire(out)?;
    let bundle = open_bundle(out)?;
    let templates = class_template_indices(&bundle.catalog)?;
    let entries = eval_manifest(cfg, manifest)?;
    let l = templates.len();
    let samples: Vec<SegSample> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let id = e.id_or(i);
            if e.label >= l {
                return Err(Error::Data(format!("sample {id}: label {} outside 0..{l}", e.label)));
            }
            let mask_path = e.mask.as_ref().ok_or_else(|| Error::Data(format!("sample {id} has no mask")))?;
            let gt = load_mask(mask_path)?;
            let maps = bundle.concept_maps(&load_rgb(&e.image)?)?;
            let (h, w) = gt.dim();
            let heatmap = concept_heatmap(&maps, templates[e.label], h, w)?.mapv(f64::from);
            Ok(SegSample { image_id: id, heatmap, gt })
        })
        .collect::<Result<_>>()?;
    let report = seg_metrics(&samples, policy, aggregation)?;
    write_json(&out.join("eval/segment.json"), &report)?;
    write_atomic(&out.join("eval/segment.txt"), report.to_table().as_bytes())?;
    Ok(report)
}

/// Every training stage in order, then the evaluations the config allows.
pub fn run_all(cfg: &RunConfig) -> Result<Option<ClassificationReport>> {
    cmd_concepts(cfg)?;
    cmd_similarities(cfg)?;
    cmd_train_cbl(cfg)?;
    cmd_train_head(cfg)?;
    cfg.dataset.val.as_ref().map(|_| cmd_eval_classify(cfg, None)).transpose()
}
