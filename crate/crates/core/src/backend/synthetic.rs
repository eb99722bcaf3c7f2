//! Deterministic synthetic diffusion backend.
//!
//! A [`SyntheticScene`] hides a high-resolution label field behind a rendered
//! image. The backend honors the full [`DiffusionBackend`](super::DiffusionBackend)
//! contract against that hidden field:
//!
//! * inversion reconstructs the input bit-exactly,
//! * query features at a cell equal the prototype of the cell's
//!   block-majority label plus bounded seeded noise,
//! * modulating a masked sub-region shifts exactly the pixels whose hidden
//!   label owns a cell intersecting the mask, by a fixed strictly
//!   increasing odd response of the offset.
//!
//! Every quantity is a pure function of the scene and its seed, which makes
//! the backend usable as a ground-truth oracle in tests.

use super::{
    CrossAttentionSite, DenoiseInfo, DiffusionBackend, LatentTrajectory, ModulationPersistence,
    ModulationSpec, TimestepSchedule,
};
use crate::error::{Error, Result};
use crate::image::{nearest_tap, ImageBuf};
use crate::lowres::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::sync::Arc;

/// Scale of the color shift a saturating offset produces. Kept well inside
/// [0, 1] so scenes with margin colors never clamp.
const RESPONSE_SCALE: f64 = 0.2;
/// Offset magnitude at which the response reaches tanh(1) of its scale.
const RESPONSE_SOFTNESS: f64 = 10.0;

/// The synthetic backend's modulation response: strictly increasing, odd,
/// saturating, with g(0) = 0. Applied per RGB channel to every pixel whose
/// hidden region intersects the modulation mask.
pub fn modulation_response(offset: f32) -> f32 {
    (RESPONSE_SCALE * (offset as f64 / RESPONSE_SOFTNESS).tanh()) as f32
}

/// A hidden scene: a high-resolution label field, one feature prototype and
/// one base color per label, and a seeded bounded noise model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub height: usize,
    pub width: usize,
    /// Ratio between image resolution and the feature grid (H/h).
    pub downsample_factor: usize,
    /// Hidden label per pixel, row-major, values in [0, num_labels).
    pub labels: Vec<u16>,
    /// One d-dimensional feature prototype per label.
    pub prototypes: Vec<Vec<f32>>,
    /// One base RGB color per label, channels in [0, 1].
    pub colors: Vec<[f32; 3]>,
    pub seed: u64,
    /// Bound on the norm of the per-cell feature noise at timestep 1.
    pub noise_amplitude: f32,
}

/// How scene regions are laid out by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneGeometry {
    /// Parallel axis-aligned stripes; boundary-free of corners, so the
    /// pipeline can recover the field pixel-exactly.
    AxisStripes,
    /// Voronoi cells of random sites: straight but non-axis-aligned
    /// boundaries meeting at vertices.
    Voronoi,
    /// Voronoi layout with several sites per label, producing fragmented
    /// regions with much more boundary.
    FragmentedVoronoi { sites_per_label: usize },
}

#[derive(Debug, Clone)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub num_labels: usize,
    pub feature_dim: usize,
    pub downsample_factor: usize,
    pub noise_amplitude: f32,
    pub geometry: SceneGeometry,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 512,
            width: 512,
            num_labels: 6,
            feature_dim: 8,
            downsample_factor: 32,
            noise_amplitude: 0.0,
            geometry: SceneGeometry::Voronoi,
        }
    }
}

impl SyntheticScene {
    pub fn num_labels(&self) -> usize {
        self.prototypes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn grid_height(&self) -> usize {
        self.height / self.downsample_factor
    }

    pub fn grid_width(&self) -> usize {
        self.width / self.downsample_factor
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor == 0 {
            return Err(Error::InvalidScene("downsample factor must be positive".into()));
        }
        if self.height == 0
            || self.width == 0
            || self.height % self.downsample_factor != 0
            || self.width % self.downsample_factor != 0
        {
            return Err(Error::InvalidScene(format!(
                "scene {}x{} not divisible by downsample factor {}",
                self.height, self.width, self.downsample_factor
            )));
        }
        if self.labels.len() != self.height * self.width {
            return Err(Error::InvalidScene(format!(
                "label grid has {} entries, expected {}",
                self.labels.len(),
                self.height * self.width
            )));
        }
        let s = self.prototypes.len();
        if s == 0 {
            return Err(Error::InvalidScene("scene has no labels".into()));
        }
        if self.colors.len() != s {
            return Err(Error::InvalidScene(format!(
                "{} colors for {} labels",
                self.colors.len(),
                s
            )));
        }
        let d = self.feature_dim();
        if d == 0 {
            return Err(Error::InvalidScene("feature prototypes are empty".into()));
        }
        for p in &self.prototypes {
            if p.len() != d {
                return Err(Error::InvalidScene("prototype dimensions differ".into()));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "prototype" });
            }
        }
        for c in &self.colors {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidScene("colors must lie in [0, 1]".into()));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| (l as usize) >= s) {
            return Err(Error::InvalidScene(format!(
                "label {bad} out of range [0, {s})"
            )));
        }
        if !self.noise_amplitude.is_finite() || self.noise_amplitude < 0.0 {
            return Err(Error::InvalidScene("noise amplitude must be finite and >= 0".into()));
        }
        if self.noise_amplitude > 0.0 && self.min_prototype_gap() <= 4.0 * self.noise_amplitude as f64 {
            return Err(Error::InvalidScene(format!(
                "prototype gap {:.6} must exceed 4x noise amplitude {:.6}",
                self.min_prototype_gap(),
                self.noise_amplitude
            )));
        }
        Ok(())
    }

    /// Minimum pairwise Euclidean distance between prototypes.
    pub fn min_prototype_gap(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.prototypes.len() {
            for j in (i + 1)..self.prototypes.len() {
                let d2: f64 = self.prototypes[i]
                    .iter()
                    .zip(&self.prototypes[j])
                    .map(|(a, b)| {
                        let d = *a as f64 - *b as f64;
                        d * d
                    })
                    .sum();
                min = min.min(d2.sqrt());
            }
        }
        min
    }

    /// Same scene with a different noise amplitude, re-validated.
    pub fn with_noise_amplitude(mut self, amplitude: f32) -> Result<Self> {
        self.noise_amplitude = amplitude;
        self.validate()?;
        Ok(self)
    }

    /// Renders the scene's base image: each pixel takes its label's color.
    pub fn render(&self) -> ImageBuf {
        ImageBuf::from_fn(self.height, self.width, |y, x| {
            self.colors[self.labels[y * self.width + x] as usize]
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let scene: SyntheticScene = serde_json::from_reader(std::io::BufReader::new(file))?;
        scene.validate()?;
        Ok(scene)
    }

    /// Generates a valid random scene. Retries geometry draws until every
    /// label both occupies pixels and majority-owns at least one feature
    /// cell, so the scene is recoverable in principle.
    pub fn generate(params: &SceneParams, seed: u64) -> Result<Self> {
        if params.num_labels == 0 || params.num_labels > u16::MAX as usize {
            return Err(Error::InvalidScene(format!(
                "cannot generate {} labels",
                params.num_labels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5ce9e]));
        let prototypes = sample_prototypes(&mut rng, params.num_labels, params.feature_dim);
        let colors = sample_colors(&mut rng, params.num_labels);

        for _attempt in 0..256 {
            let labels = match params.geometry {
                SceneGeometry::AxisStripes => {
                    sample_stripes(&mut rng, params.height, params.width, params.num_labels, params.downsample_factor)
                }
                SceneGeometry::Voronoi => {
                    sample_voronoi(&mut rng, params.height, params.width, params.num_labels, 1)
                }
                SceneGeometry::FragmentedVoronoi { sites_per_label } => sample_voronoi(
                    &mut rng,
                    params.height,
                    params.width,
                    params.num_labels,
                    sites_per_label.max(1),
                ),
            };
            let Some(labels) = labels else { continue };
            let scene = SyntheticScene {
                height: params.height,
                width: params.width,
                downsample_factor: params.downsample_factor,
                labels,
                prototypes: prototypes.clone(),
                colors: colors.clone(),
                seed,
                noise_amplitude: params.noise_amplitude,
            };
            if scene_is_recoverable(&scene) {
                scene.validate()?;
                return Ok(scene);
            }
        }
        Err(Error::InvalidScene(format!(
            "no recoverable {}-label layout found for {}x{}",
            params.num_labels, params.height, params.width
        )))
    }

    /// Generates `count` scenes that share one prototype/color vocabulary
    /// but have independent layouts, so a label means the same thing in
    /// every scene. Dataset-level protocols (class means, dataset k-means)
    /// only make sense over such a shared feature space.
    pub fn generate_dataset(params: &SceneParams, seed: u64, count: usize) -> Result<Vec<Self>> {
        let first = Self::generate(params, mix_seed(&[seed, 1, 0xda7a]))?;
        let mut scenes = Vec::with_capacity(count);
        for index in 1..count {
            let scene = Self::generate(params, mix_seed(&[seed, 1 + index as u64, 0xda7a]))?;
            scenes.push(SyntheticScene {
                prototypes: first.prototypes.clone(),
                colors: first.colors.clone(),
                ..scene
            });
        }
        let mut all = vec![first];
        all.append(&mut scenes);
        for s in &all {
            s.validate()?;
        }
        Ok(all)
    }
}

fn sample_prototypes(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f32>> {
    // Uniform draws in [-1, 1]^d, redrawn until the pairwise gap is healthy
    // enough that callers can dial noise up to a quarter of it.
    loop {
        let protos: Vec<Vec<f32>> = (0..count)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let probe = SyntheticScene {
            height: 1,
            width: 1,
            downsample_factor: 1,
            labels: vec![0],
            prototypes: protos.clone(),
            colors: vec![[0.5; 3]; count],
            seed: 0,
            noise_amplitude: 0.0,
        };
        if count == 1 || probe.min_prototype_gap() > 0.35 {
            return protos;
        }
    }
}

fn sample_colors(rng: &mut ChaCha8Rng, count: usize) -> Vec<[f32; 3]> {
    // Margin keeps base +/- response inside [0, 1], so modulation never clamps.
    (0..count)
        .map(|_| {
            [
                rng.random_range(0.25f32..0.75),
                rng.random_range(0.25f32..0.75),
                rng.random_range(0.25f32..0.75),
            ]
        })
        .collect()
}

/// Parallel stripes, each at least two blocks thick so it strictly
/// majority-owns at least one full row/column of feature cells.
fn sample_stripes(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    num_labels: usize,
    factor: usize,
) -> Option<Vec<u16>> {
    let horizontal = rng.random_bool(0.5);
    let extent = if horizontal { height } else { width };
    let min_thickness = 2 * factor;
    if num_labels * min_thickness > extent {
        return None;
    }
    // distribute the slack over stripes (stars and bars)
    let slack = extent - num_labels * min_thickness;
    let mut cuts: Vec<usize> = (0..num_labels - 1).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut thickness = Vec::with_capacity(num_labels);
    let mut prev = 0;
    for &c in &cuts {
        thickness.push(min_thickness + c - prev);
        prev = c;
    }
    thickness.push(min_thickness + slack - prev);

    let mut order: Vec<u16> = (0..num_labels as u16).collect();
    shuffle(rng, &mut order);

    let mut by_coord = vec![0u16; extent];
    let mut pos = 0;
    for (stripe, &t) in thickness.iter().enumerate() {
        for v in &mut by_coord[pos..pos + t] {
            *v = order[stripe];
        }
        pos += t;
    }
    let mut labels = vec![0u16; height * width];
    for y in 0..height {
        for x in 0..width {
            labels[y * width + x] = if horizontal { by_coord[y] } else { by_coord[x] };
        }
    }
    Some(labels)
}

/// Voronoi regions of random well-separated sites, `sites_per_label` sites
/// per label round-robin; ties go to the lowest site index.
fn sample_voronoi(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    num_labels: usize,
    sites_per_label: usize,
) -> Option<Vec<u16>> {
    let num_sites = num_labels * sites_per_label;
    let min_sep = ((height.min(width) as f64) / (2.0 * (num_sites as f64).sqrt())).max(8.0);
    let mut sites: Vec<(f64, f64)> = Vec::with_capacity(num_sites);
    let mut tries = 0;
    while sites.len() < num_sites {
        tries += 1;
        if tries > 10_000 {
            return None;
        }
        let y = rng.random_range(0.0..height as f64);
        let x = rng.random_range(0.0..width as f64);
        if sites
            .iter()
            .all(|&(sy, sx)| ((sy - y).powi(2) + (sx - x).powi(2)).sqrt() >= min_sep)
        {
            sites.push((y, x));
        }
    }
    let mut labels = vec![0u16; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, &(sy, sx)) in sites.iter().enumerate() {
                let d = (sy - y as f64).powi(2) + (sx - x as f64).powi(2);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            labels[y * width + x] = (best % num_labels) as u16;
        }
    }
    Some(labels)
}

fn shuffle(rng: &mut ChaCha8Rng, values: &mut [u16]) {
    for i in (1..values.len()).rev() {
        let j = rng.random_range(0..=i);
        values.swap(i, j);
    }
}

/// Every label must occupy pixels and strictly majority-own at least one
/// feature cell, otherwise no mask can ever represent it.
fn scene_is_recoverable(scene: &SyntheticScene) -> bool {
    let majority = block_majority(
        &scene.labels,
        scene.height,
        scene.width,
        scene.downsample_factor,
    );
    let mut owns_cell = vec![false; scene.num_labels()];
    for &l in &majority {
        owns_cell[l as usize] = true;
    }
    let mut has_pixels = vec![false; scene.num_labels()];
    for &l in &scene.labels {
        has_pixels[l as usize] = true;
    }
    owns_cell.iter().all(|&b| b) && has_pixels.iter().all(|&b| b)
}

/// Majority label of each `factor` x `factor` block, row-major over the
/// feature grid; count ties resolve to the lowest label.
pub(crate) fn block_majority(labels: &[u16], height: usize, width: usize, factor: usize) -> Vec<u16> {
    let gh = height / factor;
    let gw = width / factor;
    let num_labels = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut out = vec![0u16; gh * gw];
    let mut counts = vec![0u32; num_labels];
    for gy in 0..gh {
        for gx in 0..gw {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in gy * factor..(gy + 1) * factor {
                for x in gx * factor..(gx + 1) * factor {
                    counts[labels[y * width + x] as usize] += 1;
                }
            }
            let mut best = 0usize;
            for (l, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = l;
                }
            }
            out[gy * gw + gx] = best as u16;
        }
    }
    out
}

/// Backend-private latent payload: the hidden field resampled to the
/// trajectory's working size plus the per-cell majority labels.
struct SyntheticLatents {
    labels: Vec<u16>,
    grid_height: usize,
    grid_width: usize,
    cell_majority: Vec<u16>,
    seed: u64,
}

/// Deterministic backend over one [`SyntheticScene`].
pub struct SyntheticBackend {
    scene: Arc<SyntheticScene>,
}

impl SyntheticBackend {
    pub fn new(scene: SyntheticScene) -> Result<Self> {
        scene.validate()?;
        Ok(Self {
            scene: Arc::new(scene),
        })
    }

    pub fn scene(&self) -> &SyntheticScene {
        &self.scene
    }

    fn latents<'t>(&self, trajectory: &'t LatentTrajectory) -> Result<&'t SyntheticLatents> {
        trajectory
            .payload()
            .downcast_ref::<SyntheticLatents>()
            .ok_or_else(|| Error::InvalidConfig("trajectory was not produced by the synthetic backend".into()))
    }

    fn site_supported(&self, site: CrossAttentionSite) -> bool {
        self.sites().contains(&site)
    }

    /// Noise bound at a given timestep: the scene amplitude at t = 1,
    /// growing linearly to twice that at t = T. Stays below half the
    /// prototype gap for any valid scene.
    fn noise_bound(&self, timestep: u32, max_timestep: u32) -> f64 {
        let amp = self.scene.noise_amplitude as f64;
        if max_timestep <= 1 {
            return amp;
        }
        amp * (1.0 + (timestep - 1) as f64 / (max_timestep - 1) as f64)
    }
}

impl DiffusionBackend for SyntheticBackend {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn sites(&self) -> Vec<CrossAttentionSite> {
        vec![
            CrossAttentionSite::upward_16(1),
            CrossAttentionSite::upward_16(2),
            CrossAttentionSite::upward_16(3),
        ]
    }

    fn invert(
        &self,
        image: &ImageBuf,
        schedule: &TimestepSchedule,
        caption: &str,
    ) -> Result<LatentTrajectory> {
        if image.height() % 64 != 0 {
            return Err(Error::ImageSize {
                dimension: "height",
                value: image.height(),
                multiple: 64,
            });
        }
        if image.width() % 64 != 0 {
            return Err(Error::ImageSize {
                dimension: "width",
                value: image.width(),
                multiple: 64,
            });
        }
        let factor = self.scene.downsample_factor;
        if image.height() % factor != 0 || image.width() % factor != 0 {
            return Err(Error::ImageSize {
                dimension: "height/width",
                value: image.height(),
                multiple: factor,
            });
        }

        // hidden field at the trajectory's working size
        let (h, w) = (image.height(), image.width());
        let labels = if h == self.scene.height && w == self.scene.width {
            self.scene.labels.clone()
        } else {
            let mut out = vec![0u16; h * w];
            for y in 0..h {
                let sy = nearest_tap(y, h, self.scene.height);
                for x in 0..w {
                    let sx = nearest_tap(x, w, self.scene.width);
                    out[y * w + x] = self.scene.labels[sy * self.scene.width + sx];
                }
            }
            out
        };
        let cell_majority = block_majority(&labels, h, w, factor);
        Ok(LatentTrajectory::new(
            image.clone(),
            schedule.clone(),
            caption.to_string(),
            Box::new(SyntheticLatents {
                labels,
                grid_height: h / factor,
                grid_width: w / factor,
                cell_majority,
                seed: self.scene.seed,
            }),
        ))
    }

    fn extract_features(
        &self,
        trajectory: &LatentTrajectory,
        site: CrossAttentionSite,
        timestep: u32,
    ) -> Result<FeatureMap> {
        if !self.site_supported(site) {
            return Err(Error::UnsupportedSite {
                site: site.to_string(),
            });
        }
        trajectory.schedule().validate_timestep(timestep)?;
        let latents = self.latents(trajectory)?;
        let (gh, gw) = (latents.grid_height, latents.grid_width);
        let dim = self.scene.feature_dim();
        let bound = self.noise_bound(timestep, trajectory.schedule().max_timestep());

        let mut values = vec![0.0f32; gh * gw * dim];
        for cell in 0..gh * gw {
            let proto = &self.scene.prototypes[latents.cell_majority[cell] as usize];
            let dst = &mut values[cell * dim..(cell + 1) * dim];
            dst.copy_from_slice(proto);
            if bound > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                    latents.seed,
                    site.layer_index as u64,
                    timestep as u64,
                    cell as u64,
                ]));
                for (v, n) in dst.iter_mut().zip(sample_in_ball(&mut rng, dim)) {
                    *v += (n * bound) as f32;
                }
            }
        }
        FeatureMap::new(gh, gw, dim, values)
    }

    fn modulated_denoise(
        &self,
        trajectory: &LatentTrajectory,
        spec: &ModulationSpec,
    ) -> Result<(ImageBuf, DenoiseInfo)> {
        if !self.site_supported(spec.site) {
            return Err(Error::UnsupportedSite {
                site: spec.site.to_string(),
            });
        }
        let schedule = trajectory.schedule();
        spec.validate(schedule)?;
        let latents = self.latents(trajectory)?;
        if spec.mask.height() != latents.grid_height || spec.mask.width() != latents.grid_width {
            return Err(Error::MaskShape {
                want_h: latents.grid_height,
                want_w: latents.grid_width,
                got_h: spec.mask.height(),
                got_w: spec.mask.width(),
            });
        }

        let executed = schedule.nearest(spec.timestep);
        let denoise_steps = schedule.steps_from(executed);
        let modulated_steps = match spec.persistence {
            ModulationPersistence::FromTimestepDown => denoise_steps,
            ModulationPersistence::SingleStep => 1,
        };
        let info = DenoiseInfo {
            requested_timestep: spec.timestep,
            executed_timestep: executed,
            snapped: executed != spec.timestep,
            denoise_steps,
            modulated_steps,
        };

        let response = modulation_response(spec.offset);
        if response == 0.0 {
            // exact reconstruction: replaying the recorded trajectory
            return Ok((trajectory.reconstruction_target().clone(), info));
        }

        // a label responds iff one of its majority cells is masked
        let mut label_hit = vec![false; self.scene.num_labels()];
        for cell in spec.mask.set_cells() {
            label_hit[latents.cell_majority[cell] as usize] = true;
        }

        let (h, w) = (trajectory.height(), trajectory.width());
        let mut out = trajectory.reconstruction_target().clone();
        for y in 0..h {
            for x in 0..w {
                if label_hit[latents.labels[y * w + x] as usize] {
                    let mut rgb = out.get(y, x);
                    for c in &mut rgb {
                        *c = (*c + response).clamp(0.0, 1.0);
                    }
                    out.set(y, x, rgb);
                }
            }
        }
        Ok((out, info))
    }
}

/// Uniform sample from the closed unit ball in `dim` dimensions.
fn sample_in_ball(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; dim];
    }
    let radius: f64 = rng.random::<f64>().powf(1.0 / dim as f64);
    dir.iter().map(|v| v / norm * radius).collect()
}

/// Splitmix-style mixer for deriving independent seeds from components.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}
