//! Conformance checklist for backend adapters.
//!
//! A real latent-diffusion adapter does not ship with this crate; anyone
//! wiring one up can prove it honors the contract by running this checklist
//! against a sample image. The synthetic backend passes it exactly.

use super::{
    pair_modulate, CrossAttentionSite, DiffusionBackend, ModulationPersistence, ModulationSpec,
    OffsetPlacement, TimestepSchedule,
};
use crate::error::Result;
use crate::image::ImageBuf;
use crate::mask::BinaryMask;

/// Per-channel tolerance a decoder round trip is allowed: a zero-offset
/// modulated denoise must reproduce the input within this much.
pub const DECODER_TOLERANCE: f32 = 1e-2;

#[derive(Debug, Clone)]
pub struct ConformanceReport {
    /// Largest per-channel deviation of the zero-offset denoise from the input.
    pub reconstruction_error: f32,
    /// Whether the backend exposes the three upward 16x16 sites.
    pub exposes_required_sites: bool,
    /// Whether two identical inversions and denoises agree bit-for-bit.
    pub deterministic: bool,
    /// Whether the default configuration (upward 16x16 layer 3, t_m = 281,
    /// strength 10, attention injection on) was accepted verbatim.
    pub accepts_default_config: bool,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.reconstruction_error <= DECODER_TOLERANCE
            && self.exposes_required_sites
            && self.deterministic
            && self.accepts_default_config
    }
}

/// Runs the adapter checklist: required sites exposed, zero-offset denoise
/// within decoder tolerance of the input, determinism across repeated runs,
/// and the default modulation configuration accepted.
pub fn check(backend: &dyn DiffusionBackend, image: &ImageBuf) -> Result<ConformanceReport> {
    let schedule = TimestepSchedule::default();
    let required = [
        CrossAttentionSite::upward_16(1),
        CrossAttentionSite::upward_16(2),
        CrossAttentionSite::upward_16(3),
    ];
    let sites = backend.sites();
    let exposes_required_sites = required.iter().all(|s| sites.contains(s));

    let trajectory = backend.invert(image, &schedule, "")?;
    let grid_h = trajectory.height() / 32;
    let grid_w = trajectory.width() / 32;
    let full_mask = BinaryMask::from_fn(grid_h, grid_w, |_, _| true);

    let zero_spec = ModulationSpec {
        site: CrossAttentionSite::upward_16(3),
        timestep: 281,
        offset: 0.0,
        mask: full_mask.clone(),
        placement: OffsetPlacement::PostProjection,
        inject_attention: true,
        persistence: ModulationPersistence::FromTimestepDown,
    };
    let (recon, _) = backend.modulated_denoise(&trajectory, &zero_spec)?;
    let reconstruction_error = image
        .as_slice()
        .iter()
        .zip(recon.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);

    // determinism: repeat the inversion and a default-config pair
    let trajectory2 = backend.invert(image, &schedule, "")?;
    let default_pair = pair_modulate(backend, &trajectory, &zero_spec, 10.0);
    let default_pair2 = pair_modulate(backend, &trajectory2, &zero_spec, 10.0);
    let (deterministic, accepts_default_config) = match (default_pair, default_pair2) {
        (Ok(a), Ok(b)) => (
            a.negative == b.negative && a.positive == b.positive && a.info == b.info,
            true,
        ),
        _ => (false, false),
    };

    Ok(ConformanceReport {
        reconstruction_error,
        exposes_required_sites,
        deterministic,
        accepts_default_config,
    })
}
