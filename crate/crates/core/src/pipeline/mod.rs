//! End-to-end orchestration: run configuration, the resize rule, the
//! segment pipeline (invert, cluster, modulate, label, resize back), the
//! three evaluation protocols, caching and artifact output.

pub mod archive;
pub mod render;

use crate::backend::synthetic::{SyntheticBackend, SyntheticScene};
use crate::backend::{
    CrossAttentionSite, DenoiseInfo, DiffusionBackend, ModulationPersistence, OffsetPlacement,
    TimestepSchedule, UNetPath,
};
use crate::correspondence::{
    assign_labels, difference_map_for_mask, naive_upsample, CorrespondenceConfig, DifferenceMap,
    SegmentationMap,
};
use crate::embeddings::{
    classify_pixels, concept_embeddings_modified, concept_embeddings_unsupervised, mask_embeddings,
    ExternalEmbeddingField, PixelEmbeddingField,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    classify_masks_openvocab, classify_pixels_openvocab, confusion, hungarian_match, miou,
    per_class_iou, Assignment, ConfusionMatrix, LabelGrid,
};
use crate::lowres::kmeans_cluster_restarts;
pub use archive::{ArchiveEntry, CacheDir};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Target pixel count of the working image before rounding dimensions up.
const TARGET_PIXELS: f64 = 512.0 * 512.0;

/// All pipeline knobs. Every swept hyperparameter is a first-class key so
/// ablations can be scripted from config files alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Backend selected by name; "synthetic" is built in.
    pub backend: String,
    pub seed: u64,
    /// Number of low-resolution masks per image (K).
    pub mask_count: usize,
    /// Timestep for the clustering features (minimum noise by default).
    pub feature_timestep: u32,
    /// Timestep at which modulation is applied.
    pub modulation_timestep: u32,
    /// Modulation strength: the pair runs with offsets -strength/+strength.
    pub strength: f32,
    pub site_path: UNetPath,
    pub site_resolution: u32,
    /// Cross-attention layer the clustering features come from.
    pub feature_layer: u8,
    /// Cross-attention layer that gets modulated.
    pub modulation_layer: u8,
    pub placement: OffsetPlacement,
    pub inject_attention: bool,
    pub modulation_persistence: ModulationPersistence,
    pub smoothing_sigma: f64,
    /// Timestep for the mask-embedding features.
    pub embedding_timestep: u32,
    pub schedule_steps: usize,
    pub schedule_max_timestep: u32,
    pub kmeans_restarts: usize,
    /// Text conditioning passed to the backend.
    pub caption: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backend: "synthetic".into(),
            seed: 0,
            mask_count: 30,
            feature_timestep: 1,
            modulation_timestep: 281,
            strength: 10.0,
            site_path: UNetPath::Upward,
            site_resolution: 16,
            feature_layer: 1,
            modulation_layer: 3,
            placement: OffsetPlacement::PostProjection,
            inject_attention: true,
            modulation_persistence: ModulationPersistence::FromTimestepDown,
            smoothing_sigma: 3.0,
            embedding_timestep: 200,
            schedule_steps: 50,
            schedule_max_timestep: 1000,
            kmeans_restarts: 1,
            caption: String::new(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mask_count == 0 || self.mask_count > 255 {
            return Err(Error::InvalidConfig(format!(
                "mask count {} outside [1, 255]",
                self.mask_count
            )));
        }
        if !(self.strength.is_finite() && self.strength >= 0.0) {
            return Err(Error::InvalidConfig("strength must be finite and >= 0".into()));
        }
        if !(self.smoothing_sigma > 0.0) {
            return Err(Error::InvalidConfig("smoothing sigma must be positive".into()));
        }
        self.feature_site().validate()?;
        self.modulation_site().validate()?;
        let schedule = self.schedule()?;
        schedule.validate_timestep(self.feature_timestep)?;
        schedule.validate_timestep(self.modulation_timestep)?;
        schedule.validate_timestep(self.embedding_timestep)?;
        if self.kmeans_restarts == 0 {
            return Err(Error::InvalidConfig("kmeans restarts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<TimestepSchedule> {
        TimestepSchedule::uniform(self.schedule_steps, self.schedule_max_timestep)
    }

    pub fn feature_site(&self) -> CrossAttentionSite {
        CrossAttentionSite {
            path: self.site_path,
            resolution: self.site_resolution,
            layer_index: self.feature_layer,
        }
    }

    pub fn modulation_site(&self) -> CrossAttentionSite {
        CrossAttentionSite {
            path: self.site_path,
            resolution: self.site_resolution,
            layer_index: self.modulation_layer,
        }
    }

    /// Mask embeddings always come from the first cross-attention layer of
    /// the upward 16x16 block; only the timestep is configurable.
    pub fn embedding_site(&self) -> CrossAttentionSite {
        CrossAttentionSite::upward_16(1)
    }

    pub fn correspondence_config(&self) -> CorrespondenceConfig {
        CorrespondenceConfig {
            site: self.modulation_site(),
            timestep: self.modulation_timestep,
            strength: self.strength,
            placement: self.placement,
            inject_attention: self.inject_attention,
            persistence: self.modulation_persistence,
            smoothing_sigma: self.smoothing_sigma,
        }
    }

    /// Content hash over the semantic fields; keys every cache entry and
    /// archive.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        archive::sha256_hex(&canonical)[..16].to_string()
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Working size of an image: scale to roughly 512^2 pixels preserving the
/// aspect ratio, then round each dimension up to the next multiple of 64.
pub fn resize_rule(original_height: usize, original_width: usize) -> (usize, usize) {
    let scale = (TARGET_PIXELS / (original_height as f64 * original_width as f64)).sqrt();
    let round_up = |v: f64| -> usize { 64 * (v / 64.0).ceil().max(1.0) as usize };
    (
        round_up(original_height as f64 * scale),
        round_up(original_width as f64 * scale),
    )
}

/// Builds the backend named in the config. Only the synthetic backend ships
/// with the crate; it needs the scene the image came from.
pub fn build_backend(config: &RunConfig, scene: &SyntheticScene) -> Result<Box<dyn DiffusionBackend>> {
    match config.backend.as_str() {
        "synthetic" => Ok(Box::new(SyntheticBackend::new(scene.clone())?)),
        other => Err(Error::UnknownBackend(other.to_string())),
    }
}

/// Snap metadata for the configured modulation timestep, derivable from the
/// schedule alone.
pub fn snap_info(config: &RunConfig) -> Result<DenoiseInfo> {
    let schedule = config.schedule()?;
    let executed = schedule.nearest(config.modulation_timestep);
    let denoise_steps = schedule.steps_from(executed);
    Ok(DenoiseInfo {
        requested_timestep: config.modulation_timestep,
        executed_timestep: executed,
        snapped: executed != config.modulation_timestep,
        denoise_steps,
        modulated_steps: match config.modulation_persistence {
            ModulationPersistence::FromTimestepDown => denoise_steps,
            ModulationPersistence::SingleStep => 1,
        },
    })
}

/// Runs the full segmentation pipeline on one synthetic scene:
/// resize, invert, extract features, cluster, modulate per mask, assign
/// labels, embed masks, resize the map back to the original size.
pub fn segment_scene(
    scene: &SyntheticScene,
    config: &RunConfig,
    cache: Option<&CacheDir>,
    input_path: &str,
) -> Result<ArchiveEntry> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    scene.validate().map_err(|e| e.in_stage("load"))?;

    let image_content_hash = archive::scene_content_hash(scene)?;
    let config_hash = config.content_hash();

    let (original_height, original_width) = (scene.height, scene.width);
    let (working_height, working_width) = resize_rule(original_height, original_width);
    let image = scene.render();
    let working_image = if (working_height, working_width) == (original_height, original_width) {
        image
    } else {
        image.resize_bilinear(working_height, working_width)
    };

    let backend = build_backend(config, scene).map_err(|e| e.in_stage("backend"))?;
    let schedule = config.schedule()?;
    let trajectory = backend
        .invert(&working_image, &schedule, &config.caption)
        .map_err(|e| e.in_stage("invert"))?;

    let features = backend
        .extract_features(&trajectory, config.feature_site(), config.feature_timestep)
        .map_err(|e| e.in_stage("features"))?;

    let k = config.mask_count.min(features.cells());
    let lowres = kmeans_cluster_restarts(&features, k, config.seed, config.kmeans_restarts)
        .map_err(|e| e.in_stage("cluster"))?;

    // per-mask modulation fan-out, with the difference-map cache consulted
    // per (image, mask, config) key
    let corr_config = config.correspondence_config();
    let maps: Vec<DifferenceMap> = lowres
        .masks()
        .par_iter()
        .enumerate()
        .map(|(index, mask)| {
            if let Some(cache) = cache {
                if let Some(found) = cache.load(&image_content_hash, &config_hash, index) {
                    return Ok(found);
                }
            }
            let map = difference_map_for_mask(backend.as_ref(), &trajectory, mask, &corr_config)
                .map_err(|e| e.for_mask(index))?;
            if let Some(cache) = cache {
                cache.store(&image_content_hash, &config_hash, index, &map)?;
            }
            Ok(map)
        })
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("correspondence"))?;

    let working_map = assign_labels(&maps).map_err(|e| e.in_stage("assign"))?;

    let embedding_features = backend
        .extract_features(&trajectory, config.embedding_site(), config.embedding_timestep)
        .map_err(|e| e.in_stage("embeddings"))?;
    let embeddings = mask_embeddings(&embedding_features, lowres.masks())
        .map_err(|e| e.in_stage("embeddings"))?;

    let final_map = working_map.resize_nearest(original_height, original_width);

    Ok(ArchiveEntry {
        image_id: archive::image_id(input_path, &image_content_hash),
        input_path: input_path.to_string(),
        original_height,
        original_width,
        working_height,
        working_width,
        image_content_hash,
        config_hash,
        denoise: snap_info(config)?,
        inertia: lowres.inertia(),
        lowres,
        final_map,
        mask_embeddings: embeddings,
    })
}

/// Loads a scene file, segments it, and writes the entry into the archive.
pub fn segment_file(
    input: &Path,
    config: &RunConfig,
    cache: Option<&CacheDir>,
    archive_dir: &Path,
) -> Result<ArchiveEntry> {
    let scene = SyntheticScene::load(input).map_err(|e| e.in_stage("load"))?;
    let entry = segment_scene(&scene, config, cache, &input.display().to_string())?;
    archive::write_entry(archive_dir, &entry).map_err(|e| e.in_stage("archive"))?;
    Ok(entry)
}

/// Ground truth carried by a synthetic scene file.
pub fn scene_ground_truth(scene: &SyntheticScene) -> Result<LabelGrid> {
    LabelGrid::new(
        scene.height,
        scene.width,
        scene.labels.iter().map(|&l| l as u32).collect(),
        scene.num_labels() as u32,
        None,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Traditional,
    Modified,
    Openvocab,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::Traditional => write!(f, "traditional"),
            Protocol::Modified => write!(f, "modified"),
            Protocol::Openvocab => write!(f, "openvocab"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: u32,
    pub iou: Option<f64>,
}

/// Metrics of one protocol run: per-class IoU table, mean IoU, and the
/// configuration echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub miou: f64,
    pub per_class: Vec<ClassIou>,
    pub images: usize,
    pub config_hash: String,
    /// Prediction label -> ground-truth class matching (traditional only).
    pub assignment: Option<Assignment>,
}

impl ProtocolReport {
    /// Fixed-format text table for the report file.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("protocol: {}\n", self.protocol));
        out.push_str(&format!("images:   {}\n", self.images));
        out.push_str(&format!("config:   {}\n", self.config_hash));
        out.push_str(&format!("mIoU:     {:.6}\n", self.miou));
        out.push_str("class  IoU\n");
        for c in &self.per_class {
            match c.iou {
                Some(v) => out.push_str(&format!("{:>5}  {:.6}\n", c.class, v)),
                None => out.push_str(&format!("{:>5}  absent\n", c.class)),
            }
        }
        out
    }
}

fn pixel_fields_ours(entries: &[ArchiveEntry]) -> Result<Vec<PixelEmbeddingField>> {
    entries
        .iter()
        .map(|e| PixelEmbeddingField::new(e.final_map.clone(), e.mask_embeddings.clone()))
        .collect()
}

/// Pixel fields for the bilinear-upsampling baseline: same mask embeddings,
/// mask shapes from naive upsampling instead of the modulated pipeline.
fn pixel_fields_naive(entries: &[ArchiveEntry]) -> Result<Vec<PixelEmbeddingField>> {
    entries
        .iter()
        .map(|e| {
            let up = naive_upsample(&e.lowres, e.working_height, e.working_width)?
                .resize_nearest(e.original_height, e.original_width);
            PixelEmbeddingField::new(up, e.mask_embeddings.clone())
        })
        .collect()
}

fn report_from_confusions(
    protocol: Protocol,
    confusions: Vec<ConfusionMatrix>,
    assignment: &Assignment,
    keep_assignment: bool,
    config_hash: String,
) -> Result<ProtocolReport> {
    let mut total = confusions
        .first()
        .cloned()
        .ok_or(Error::EmptyInput("archive entries"))?;
    for c in confusions.iter().skip(1) {
        total.merge(c)?;
    }
    let per_class = per_class_iou(&total, assignment)?
        .into_iter()
        .enumerate()
        .map(|(class, iou)| ClassIou {
            class: class as u32,
            iou,
        })
        .collect();
    Ok(ProtocolReport {
        protocol,
        miou: miou(&total, assignment)?,
        per_class,
        images: confusions.len(),
        config_hash,
        assignment: keep_assignment.then(|| assignment.clone()),
    })
}

/// Modified protocol: concept embeddings are ground-truth class means;
/// pixels classify to the nearest concept; mIoU against the annotations.
pub fn evaluate_modified(entries: &[ArchiveEntry], gts: &[LabelGrid]) -> Result<ProtocolReport> {
    evaluate_modified_fields(entries, pixel_fields_ours(entries)?, gts, Protocol::Modified)
}

/// Modified protocol over the naive bilinear-upsampling baseline.
pub fn evaluate_modified_naive(entries: &[ArchiveEntry], gts: &[LabelGrid]) -> Result<ProtocolReport> {
    evaluate_modified_fields(entries, pixel_fields_naive(entries)?, gts, Protocol::Modified)
}

fn evaluate_modified_fields(
    entries: &[ArchiveEntry],
    fields: Vec<PixelEmbeddingField>,
    gts: &[LabelGrid],
    protocol: Protocol,
) -> Result<ProtocolReport> {
    check_gt(entries, gts)?;
    let (concepts, concept_classes) = concept_embeddings_modified(&fields, gts)?;
    let num_classes = gts.iter().map(LabelGrid::num_classes).max().unwrap();
    let confusions: Vec<ConfusionMatrix> = fields
        .iter()
        .zip(gts)
        .map(|(field, gt)| {
            let by_concept = classify_pixels(field, &concepts)?;
            // relabel concept indices to their ground-truth classes
            let labels: Vec<u32> = by_concept
                .labels()
                .iter()
                .map(|&c| concept_classes[c as usize].expect("modified concepts map to classes"))
                .collect();
            let pred = SegmentationMap::new(
                by_concept.height(),
                by_concept.width(),
                labels,
                num_classes,
                (0..num_classes).collect(),
            )?;
            confusion(&pred, gt)
        })
        .collect::<Result<_>>()?;
    let config_hash = entries[0].config_hash.clone();
    report_from_confusions(
        protocol,
        confusions,
        &Assignment::identity(num_classes as usize),
        false,
        config_hash,
    )
}

/// Traditional protocol: concepts are dataset-level k-means centroids over
/// pixel embeddings, matched to classes by Hungarian matching that
/// maximizes mIoU.
pub fn evaluate_traditional(
    entries: &[ArchiveEntry],
    gts: &[LabelGrid],
    seed: u64,
) -> Result<ProtocolReport> {
    check_gt(entries, gts)?;
    let fields = pixel_fields_ours(entries)?;
    let num_classes = gts.iter().map(LabelGrid::num_classes).max().unwrap() as usize;
    let concepts = concept_embeddings_unsupervised(&fields, num_classes, seed)?;
    let confusions: Vec<ConfusionMatrix> = fields
        .iter()
        .zip(gts)
        .map(|(field, gt)| confusion(&classify_pixels(field, &concepts)?, gt))
        .collect::<Result<_>>()?;
    let mut total = confusions[0].clone();
    for c in confusions.iter().skip(1) {
        total.merge(c)?;
    }
    let assignment = hungarian_match(&total)?;
    let config_hash = entries[0].config_hash.clone();
    report_from_confusions(Protocol::Traditional, confusions, &assignment, true, config_hash)
}

/// Open-vocabulary protocol: each produced mask takes the mean of an
/// externally supplied pixel-embedding field and classifies to the closest
/// class vector by cosine similarity.
pub fn evaluate_openvocab(
    entries: &[ArchiveEntry],
    gts: &[LabelGrid],
    fields: &[ExternalEmbeddingField],
    class_vectors: &[Vec<f64>],
) -> Result<ProtocolReport> {
    check_gt(entries, gts)?;
    if fields.len() != entries.len() {
        return Err(Error::InvalidConfig(format!(
            "{} embedding fields for {} archive entries",
            fields.len(),
            entries.len()
        )));
    }
    let confusions: Vec<ConfusionMatrix> = entries
        .iter()
        .zip(gts)
        .zip(fields)
        .map(|((entry, gt), field)| {
            let pred = classify_masks_openvocab(&entry.final_map, field, class_vectors)?;
            confusion(&pred, gt)
        })
        .collect::<Result<_>>()?;
    let num_classes = class_vectors.len();
    let config_hash = entries[0].config_hash.clone();
    report_from_confusions(
        Protocol::Openvocab,
        confusions,
        &Assignment::identity(num_classes),
        false,
        config_hash,
    )
}

/// Per-pixel open-vocabulary baseline over the same inputs, for measuring
/// what mask-level aggregation buys.
pub fn evaluate_openvocab_per_pixel(
    gts: &[LabelGrid],
    fields: &[ExternalEmbeddingField],
    class_vectors: &[Vec<f64>],
) -> Result<f64> {
    let mut total: Option<ConfusionMatrix> = None;
    for (gt, field) in gts.iter().zip(fields) {
        let pred = classify_pixels_openvocab(field, class_vectors)?;
        let c = confusion(&pred, gt)?;
        match &mut total {
            None => total = Some(c),
            Some(t) => t.merge(&c)?,
        }
    }
    let total = total.ok_or(Error::EmptyInput("embedding fields"))?;
    miou(&total, &Assignment::identity(class_vectors.len()))
}

fn check_gt(entries: &[ArchiveEntry], gts: &[LabelGrid]) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::EmptyInput("archive entries"));
    }
    if entries.len() != gts.len() {
        return Err(Error::InvalidConfig(format!(
            "{} ground-truth grids for {} archive entries",
            gts.len(),
            entries.len()
        )));
    }
    for (e, gt) in entries.iter().zip(gts) {
        if e.final_map.height() != gt.height() || e.final_map.width() != gt.width() {
            return Err(Error::DimensionMismatch {
                what: "ground truth over final map",
                want_h: e.final_map.height(),
                want_w: e.final_map.width(),
                got_h: gt.height(),
                got_w: gt.width(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_rule_paper_examples() {
        assert_eq!(resize_rule(512, 512), (512, 512));
        assert_eq!(resize_rule(1024, 1024), (512, 512));
        assert_eq!(resize_rule(480, 640), (448, 640));
    }

    #[test]
    fn resize_rule_outputs_multiples_of_64() {
        let mut state = 42u64;
        for _ in 0..200 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            let h = 1 + (state >> 33) as usize % 3000;
            let w = 1 + (state >> 13) as usize % 3000;
            let (rh, rw) = resize_rule(h, w);
            assert_eq!(rh % 64, 0, "{h}x{w} -> {rh}x{rw}");
            assert_eq!(rw % 64, 0, "{h}x{w} -> {rh}x{rw}");
            assert!(rh > 0 && rw > 0);
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config = RunConfig::default();
        let text = config.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(config, back);
        assert_eq!(config.content_hash(), back.content_hash());
    }

    #[test]
    fn config_hash_changes_with_fields() {
        let a = RunConfig::default();
        let b = RunConfig {
            strength: 11.0,
            ..RunConfig::default()
        };
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn default_config_is_paper_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.mask_count, 30);
        assert_eq!(c.feature_timestep, 1);
        assert_eq!(c.modulation_timestep, 281);
        assert_eq!(c.strength, 10.0);
        assert_eq!(c.feature_layer, 1);
        assert_eq!(c.modulation_layer, 3);
        assert!(c.inject_attention);
        assert_eq!(c.embedding_timestep, 200);
        assert_eq!(c.schedule_steps, 50);
        assert_eq!(c.schedule_max_timestep, 1000);
        assert!(c.validate().is_ok());
        // embeddings always come from the first upward 16x16 layer
        assert_eq!(c.embedding_site(), CrossAttentionSite::upward_16(1));
        // the default modulation timestep sits on the schedule: 15 steps
        let info = snap_info(&c).unwrap();
        assert!(!info.snapped);
        assert_eq!(info.denoise_steps, 15);
    }

    #[test]
    fn rejects_unknown_config_keys() {
        let text = "backend = \"synthetic\"\nnot_a_key = 3\n";
        assert!(RunConfig::from_toml(text).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn resize_rule_emits_valid_working_sizes(h in 1usize..5000, w in 1usize..5000) {
                let (rh, rw) = resize_rule(h, w);
                prop_assert_eq!(rh % 64, 0);
                prop_assert_eq!(rw % 64, 0);
                prop_assert!(rh >= 64 && rw >= 64);
                // pre-rounding target is 512^2; rounding up adds at most
                // 63 to each dimension
                let scale = (TARGET_PIXELS / (h as f64 * w as f64)).sqrt();
                prop_assert!(rh as f64 >= h as f64 * scale - 1e-9);
                prop_assert!((rh as f64) < h as f64 * scale + 64.0);
                prop_assert!(rw as f64 >= w as f64 * scale - 1e-9);
                prop_assert!((rw as f64) < w as f64 * scale + 64.0);
            }
        }
    }
}
