//! Contract that any diffusion runtime must satisfy: DDPM-style inversion
//! with exact reconstruction, query-vector feature extraction at named
//! cross-attention sites, and a modulated denoising process that perturbs a
//! masked sub-region of one cross-attention layer's output.
//!
//! The crate ships a deterministic synthetic backend ([`synthetic`]) that
//! doubles as the ground-truth oracle for tests. A real latent-diffusion
//! adapter can implement [`DiffusionBackend`] out of tree and prove itself
//! with [`conformance`].

pub mod conformance;
pub mod synthetic;

use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::lowres::FeatureMap;
use crate::mask::BinaryMask;
use serde::{Deserialize, Serialize};
use std::any::Any;
use std::fmt;

/// Which U-Net path a modular block sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UNetPath {
    Upward,
    Downward,
}

/// Identifies one cross-attention layer by path, block resolution and
/// position within the block stack at that resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CrossAttentionSite {
    pub path: UNetPath,
    pub resolution: u32,
    pub layer_index: u8,
}

impl CrossAttentionSite {
    pub const fn upward_16(layer_index: u8) -> Self {
        Self {
            path: UNetPath::Upward,
            resolution: 16,
            layer_index,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![8, 16, 32, 64].contains(&self.resolution) {
            return Err(Error::InvalidConfig(format!(
                "cross-attention resolution {} not in {{8, 16, 32, 64}}",
                self.resolution
            )));
        }
        if !(1..=3).contains(&self.layer_index) {
            return Err(Error::InvalidConfig(format!(
                "cross-attention layer index {} not in {{1, 2, 3}}",
                self.layer_index
            )));
        }
        Ok(())
    }
}

impl fmt::Display for CrossAttentionSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = match self.path {
            UNetPath::Upward => "upward",
            UNetPath::Downward => "downward",
        };
        write!(f, "{path}/{}x{0}/layer{}", self.resolution, self.layer_index)
    }
}

/// The discrete denoising schedule: which of the `1..=max_timestep`
/// training timesteps the sampler actually visits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepSchedule {
    total_steps: usize,
    max_timestep: u32,
    step_timesteps: Vec<u32>,
}

impl TimestepSchedule {
    /// Uniformly spaced schedule `t_k = 1 + k * (T / steps)`, the spacing
    /// used by standard DDPM samplers. With 50 steps out of T = 1000 this
    /// yields 1, 21, ..., 981, which contains the default modulation
    /// timestep 281 with 15 scheduled steps at or below it.
    pub fn uniform(total_steps: usize, max_timestep: u32) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidSchedule("schedule needs at least one step".into()));
        }
        let ratio = max_timestep / total_steps as u32;
        if ratio == 0 {
            return Err(Error::InvalidSchedule(format!(
                "cannot spread {total_steps} steps over T = {max_timestep}"
            )));
        }
        let step_timesteps: Vec<u32> = (0..total_steps as u32).map(|k| 1 + k * ratio).collect();
        Self::new(step_timesteps, max_timestep)
    }

    pub fn new(step_timesteps: Vec<u32>, max_timestep: u32) -> Result<Self> {
        if step_timesteps.is_empty() {
            return Err(Error::InvalidSchedule("empty schedule".into()));
        }
        for pair in step_timesteps.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::InvalidSchedule(format!(
                    "timesteps not strictly increasing at {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        let first = step_timesteps[0];
        let last = *step_timesteps.last().unwrap();
        if first < 1 || last > max_timestep {
            return Err(Error::InvalidSchedule(format!(
                "timesteps must lie in [1, {max_timestep}], got [{first}, {last}]"
            )));
        }
        Ok(Self {
            total_steps: step_timesteps.len(),
            max_timestep,
            step_timesteps,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn max_timestep(&self) -> u32 {
        self.max_timestep
    }

    pub fn step_timesteps(&self) -> &[u32] {
        &self.step_timesteps
    }

    pub fn contains(&self, timestep: u32) -> bool {
        self.step_timesteps.binary_search(&timestep).is_ok()
    }

    /// Nearest scheduled timestep; equidistant ties resolve to the lower one.
    pub fn nearest(&self, timestep: u32) -> u32 {
        match self.step_timesteps.binary_search(&timestep) {
            Ok(i) => self.step_timesteps[i],
            Err(i) => {
                if i == 0 {
                    self.step_timesteps[0]
                } else if i == self.step_timesteps.len() {
                    *self.step_timesteps.last().unwrap()
                } else {
                    let lo = self.step_timesteps[i - 1];
                    let hi = self.step_timesteps[i];
                    if timestep - lo <= hi - timestep {
                        lo
                    } else {
                        hi
                    }
                }
            }
        }
    }

    /// Number of scheduled steps at or below `timestep` — the steps a
    /// denoising run started there must execute.
    pub fn steps_from(&self, timestep: u32) -> usize {
        self.step_timesteps.iter().filter(|&&t| t <= timestep).count()
    }

    pub fn validate_timestep(&self, timestep: u32) -> Result<()> {
        if timestep < 1 || timestep > self.max_timestep {
            return Err(Error::TimestepOutOfRange {
                timestep,
                max: self.max_timestep,
            });
        }
        Ok(())
    }
}

impl Default for TimestepSchedule {
    /// 50-step DDPM schedule out of T = 1000.
    fn default() -> Self {
        Self::uniform(50, 1000).expect("default schedule is valid")
    }
}

/// Where the constant offset enters the cross-attention computation:
/// after the output projection (the main formula) or before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OffsetPlacement {
    #[default]
    PostProjection,
    PreProjection,
}

/// Whether the modulation is applied at every denoising step from
/// `timestep` down to 1, or at the single scheduled step only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModulationPersistence {
    #[default]
    FromTimestepDown,
    SingleStep,
}

/// Where/when/how to perturb one cross-attention layer during denoising.
#[derive(Debug, Clone)]
pub struct ModulationSpec {
    pub site: CrossAttentionSite,
    pub timestep: u32,
    pub offset: f32,
    pub mask: BinaryMask,
    pub placement: OffsetPlacement,
    pub inject_attention: bool,
    pub persistence: ModulationPersistence,
}

impl ModulationSpec {
    pub fn validate(&self, schedule: &TimestepSchedule) -> Result<()> {
        self.site.validate()?;
        schedule.validate_timestep(self.timestep)?;
        if !self.offset.is_finite() {
            return Err(Error::NonFinite {
                what: "modulation offset",
            });
        }
        Ok(())
    }
}

/// Bookkeeping returned alongside every modulated denoise: how the
/// requested timestep snapped onto the schedule and how much work ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiseInfo {
    pub requested_timestep: u32,
    pub executed_timestep: u32,
    pub snapped: bool,
    pub denoise_steps: usize,
    pub modulated_steps: usize,
}

/// Per-timestep latent states produced by inversion together with the
/// scheduled noise needed for exact re-denoising. The concrete latent
/// representation is backend-specific; the common fields carry what the
/// rest of the pipeline needs.
pub struct LatentTrajectory {
    image: ImageBuf,
    schedule: TimestepSchedule,
    caption: String,
    payload: Box<dyn Any + Send + Sync>,
}

impl fmt::Debug for LatentTrajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LatentTrajectory")
            .field("height", &self.image.height())
            .field("width", &self.image.width())
            .field("steps", &self.schedule.total_steps())
            .field("caption", &self.caption)
            .finish_non_exhaustive()
    }
}

impl LatentTrajectory {
    pub fn new(
        image: ImageBuf,
        schedule: TimestepSchedule,
        caption: String,
        payload: Box<dyn Any + Send + Sync>,
    ) -> Self {
        Self {
            image,
            schedule,
            caption,
            payload,
        }
    }

    /// The image this trajectory reconstructs when re-denoised unmodulated.
    pub fn reconstruction_target(&self) -> &ImageBuf {
        &self.image
    }

    pub fn schedule(&self) -> &TimestepSchedule {
        &self.schedule
    }

    pub fn caption(&self) -> &str {
        &self.caption
    }

    pub fn payload(&self) -> &(dyn Any + Send + Sync) {
        self.payload.as_ref()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// The diffusion runtime contract. Implementations must be deterministic
/// (pure functions of inputs and their construction seed) and safe to call
/// concurrently on a shared trajectory.
pub trait DiffusionBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Cross-attention sites this backend exposes. At minimum the three
    /// upward 16x16 layers must be present.
    fn sites(&self) -> Vec<CrossAttentionSite>;

    /// Inverts a real image into the denoising trajectory whose replay
    /// reconstructs it exactly. `caption` is the text conditioning, empty
    /// by default.
    fn invert(
        &self,
        image: &ImageBuf,
        schedule: &TimestepSchedule,
        caption: &str,
    ) -> Result<LatentTrajectory>;

    /// Query vectors of the first attention input at `site` and `timestep`,
    /// as an h x w x d feature grid.
    fn extract_features(
        &self,
        trajectory: &LatentTrajectory,
        site: CrossAttentionSite,
        timestep: u32,
    ) -> Result<FeatureMap>;

    /// Re-runs the denoising process from `spec.timestep` downward with the
    /// masked offset applied, returning the decoded image and run metadata.
    fn modulated_denoise(
        &self,
        trajectory: &LatentTrajectory,
        spec: &ModulationSpec,
    ) -> Result<(ImageBuf, DenoiseInfo)>;
}

/// The two modulated denoising runs for offsets -strength and +strength,
/// sharing trajectory noise (and injected attention, when enabled).
#[derive(Debug, Clone)]
pub struct ModulationPair {
    pub negative: ImageBuf,
    pub positive: ImageBuf,
    pub info: DenoiseInfo,
}

/// Runs the modulated denoising process twice with offsets `-strength` and
/// `+strength`. Both runs share the identical trajectory, hence identical
/// scheduled noise.
pub fn pair_modulate(
    backend: &dyn DiffusionBackend,
    trajectory: &LatentTrajectory,
    spec: &ModulationSpec,
    strength: f32,
) -> Result<ModulationPair> {
    if !strength.is_finite() || strength < 0.0 {
        return Err(Error::NonFinite {
            what: "modulation strength",
        });
    }
    let mut neg_spec = spec.clone();
    neg_spec.offset = -strength;
    let mut pos_spec = spec.clone();
    pos_spec.offset = strength;
    let (negative, info) = backend.modulated_denoise(trajectory, &neg_spec)?;
    let (positive, info_pos) = backend.modulated_denoise(trajectory, &pos_spec)?;
    debug_assert_eq!(info, info_pos);
    Ok(ModulationPair {
        negative,
        positive,
        info,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_has_fifty_steps_and_contains_281() {
        let s = TimestepSchedule::default();
        assert_eq!(s.total_steps(), 50);
        assert_eq!(s.max_timestep(), 1000);
        assert_eq!(s.step_timesteps()[0], 1);
        assert_eq!(*s.step_timesteps().last().unwrap(), 981);
        assert!(s.contains(281));
        // the default modulation timestep leaves 15 denoising steps
        assert_eq!(s.steps_from(281), 15);
    }

    #[test]
    fn snapping_picks_nearest_and_breaks_ties_low() {
        let s = TimestepSchedule::default();
        assert_eq!(s.nearest(281), 281);
        assert_eq!(s.nearest(285), 281);
        assert_eq!(s.nearest(295), 301);
        // 291 is equidistant between 281 and 301
        assert_eq!(s.nearest(291), 281);
        assert_eq!(s.nearest(1000), 981);
    }

    #[test]
    fn schedule_rejects_non_increasing() {
        assert!(TimestepSchedule::new(vec![1, 1, 5], 10).is_err());
        assert!(TimestepSchedule::new(vec![5, 3], 10).is_err());
        assert!(TimestepSchedule::new(vec![0, 4], 10).is_err());
        assert!(TimestepSchedule::new(vec![2, 11], 10).is_err());
    }

    #[test]
    fn site_display_and_validation() {
        let site = CrossAttentionSite::upward_16(3);
        assert_eq!(site.to_string(), "upward/16x16/layer3");
        assert!(site.validate().is_ok());
        assert!(CrossAttentionSite {
            path: UNetPath::Upward,
            resolution: 17,
            layer_index: 1
        }
        .validate()
        .is_err());
    }
}
