//! Lifting low-resolution masks to image resolution: run the +/- modulated
//! denoising pair per mask, measure per-pixel response, smooth it, and label
//! each pixel with the mask it responds to most.

use crate::backend::{
    pair_modulate, CrossAttentionSite, DiffusionBackend, LatentTrajectory, ModulationPersistence,
    ModulationSpec, OffsetPlacement,
};
use crate::error::{Error, Result};
use crate::image::{bilinear_taps, nearest_tap, ImageBuf};
use crate::lowres::LowResSegmentation;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// An H x W field of nonnegative per-pixel response strengths.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl DifferenceMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::InvalidConfig(format!(
                "difference map has {} values, expected {}",
                values.len(),
                height * width
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite {
                what: "difference map",
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// An H x W integer label field plus the provenance of each label (which
/// low-resolution mask, or class, it came from).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    num_labels: u32,
    provenance: Vec<u32>,
}

impl SegmentationMap {
    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<u32>,
        num_labels: u32,
        provenance: Vec<u32>,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidConfig(format!(
                "label field has {} entries, expected {}",
                labels.len(),
                height * width
            )));
        }
        if labels.iter().any(|&l| l >= num_labels) {
            return Err(Error::InvalidConfig("label out of range".into()));
        }
        if provenance.len() != num_labels as usize {
            return Err(Error::InvalidConfig("provenance must cover every label".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if !provenance.iter().all(|p| seen.insert(*p)) {
            return Err(Error::InvalidConfig("provenance must be injective".into()));
        }
        Ok(Self {
            height,
            width,
            labels,
            num_labels,
            provenance,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_labels(&self) -> u32 {
        self.num_labels
    }

    /// Low-resolution mask index (or class id) each label maps back to.
    pub fn provenance(&self) -> &[u32] {
        &self.provenance
    }

    /// Nearest-neighbor resize of the label field, used to return maps to
    /// the original image size.
    pub fn resize_nearest(&self, new_height: usize, new_width: usize) -> SegmentationMap {
        let mut labels = vec![0u32; new_height * new_width];
        for y in 0..new_height {
            let sy = nearest_tap(y, new_height, self.height);
            for x in 0..new_width {
                let sx = nearest_tap(x, new_width, self.width);
                labels[y * new_width + x] = self.labels[sy * self.width + sx];
            }
        }
        SegmentationMap {
            height: new_height,
            width: new_width,
            labels,
            num_labels: self.num_labels,
            provenance: self.provenance.clone(),
        }
    }

    /// Pixel counts per label.
    pub fn label_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_labels as usize];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

/// Per-pixel Euclidean distance over the RGB channels of the two modulated
/// outputs.
pub fn difference_map(negative: &ImageBuf, positive: &ImageBuf) -> Result<DifferenceMap> {
    if negative.height() != positive.height() || negative.width() != positive.width() {
        return Err(Error::DimensionMismatch {
            what: "modulated image pair",
            want_h: negative.height(),
            want_w: negative.width(),
            got_h: positive.height(),
            got_w: positive.width(),
        });
    }
    let values = negative
        .as_slice()
        .chunks_exact(3)
        .zip(positive.as_slice().chunks_exact(3))
        .map(|(a, b)| {
            let mut acc = 0.0f64;
            for c in 0..3 {
                let d = a[c] as f64 - b[c] as f64;
                acc += d * d;
            }
            acc.sqrt() as f32
        })
        .collect();
    DifferenceMap::new(negative.height(), negative.width(), values)
}

/// Gaussian filtering with a normalized kernel truncated at radius
/// ceil(4 sigma). Near borders the kernel is renormalized over the
/// in-bounds support, so constant maps are fixed points. The separable
/// passes with per-axis renormalization equal the dense renormalized
/// convolution because the in-bounds support is a product set.
pub fn gaussian_smooth(map: &DifferenceMap, sigma: f64) -> Result<DifferenceMap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "smoothing sigma must be positive, got {sigma}"
        )));
    }
    let radius = (4.0 * sigma).ceil() as usize;
    let kernel: Vec<f64> = (0..=radius)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();

    let (h, w) = (map.height, map.width);
    let horizontal = convolve_axis(&map.values, h, w, &kernel, radius, true);
    let smoothed = convolve_axis(&horizontal, h, w, &kernel, radius, false);
    DifferenceMap::new(h, w, smoothed.iter().map(|&v| v.max(0.0) as f32).collect())
}

fn convolve_axis(
    values: &[impl Into<f64> + Copy],
    height: usize,
    width: usize,
    kernel: &[f64],
    radius: usize,
    along_x: bool,
) -> Vec<f64> {
    let mut out = vec![0.0f64; height * width];
    for y in 0..height {
        for x in 0..width {
            let (pos, len) = if along_x { (x, width) } else { (y, height) };
            let lo = pos.saturating_sub(radius);
            let hi = (pos + radius).min(len - 1);
            let mut acc = 0.0;
            let mut norm = 0.0;
            for q in lo..=hi {
                let wgt = kernel[pos.abs_diff(q)];
                let idx = if along_x { y * width + q } else { q * width + x };
                acc += wgt * values[idx].into();
                norm += wgt;
            }
            out[y * width + x] = acc / norm;
        }
    }
    out
}

/// Labels each pixel with the index of the map holding its largest value;
/// ties break toward the lowest index. Provenance records the identity
/// mapping.
pub fn assign_labels(maps: &[DifferenceMap]) -> Result<SegmentationMap> {
    let first = maps.first().ok_or(Error::EmptyInput("difference map list"))?;
    let (h, w) = (first.height, first.width);
    for m in maps {
        if m.height != h || m.width != w {
            return Err(Error::DimensionMismatch {
                what: "difference map stack",
                want_h: h,
                want_w: w,
                got_h: m.height,
                got_w: m.width,
            });
        }
    }
    let mut labels = vec![0u32; h * w];
    let mut best = first.values.clone();
    for (k, m) in maps.iter().enumerate().skip(1) {
        for (i, &v) in m.values.iter().enumerate() {
            if v > best[i] {
                best[i] = v;
                labels[i] = k as u32;
            }
        }
    }
    SegmentationMap::new(
        h,
        w,
        labels,
        maps.len() as u32,
        (0..maps.len() as u32).collect(),
    )
}

/// Configuration for the per-mask modulation runs.
#[derive(Debug, Clone)]
pub struct CorrespondenceConfig {
    pub site: CrossAttentionSite,
    pub timestep: u32,
    pub strength: f32,
    pub placement: OffsetPlacement,
    pub inject_attention: bool,
    pub persistence: ModulationPersistence,
    pub smoothing_sigma: f64,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        Self {
            site: CrossAttentionSite::upward_16(3),
            timestep: 281,
            strength: 10.0,
            placement: OffsetPlacement::PostProjection,
            inject_attention: true,
            persistence: ModulationPersistence::FromTimestepDown,
            smoothing_sigma: 3.0,
        }
    }
}

/// The smoothed difference map of a single low-resolution mask: run the
/// +/- modulation pair, take the per-pixel RGB distance, smooth it.
pub fn difference_map_for_mask(
    backend: &dyn DiffusionBackend,
    trajectory: &LatentTrajectory,
    mask: &crate::mask::BinaryMask,
    config: &CorrespondenceConfig,
) -> Result<DifferenceMap> {
    let spec = ModulationSpec {
        site: config.site,
        timestep: config.timestep,
        offset: config.strength,
        mask: mask.clone(),
        placement: config.placement,
        inject_attention: config.inject_attention,
        persistence: config.persistence,
    };
    let pair = pair_modulate(backend, trajectory, &spec, config.strength)?;
    let raw = difference_map(&pair.negative, &pair.positive)?;
    gaussian_smooth(&raw, config.smoothing_sigma)
}

/// One smoothed difference map per low-resolution mask. Masks are processed
/// independently (in parallel); any failure aborts the run tagged with the
/// failing mask index.
pub fn extract_correspondences(
    backend: &dyn DiffusionBackend,
    trajectory: &LatentTrajectory,
    segmentation: &LowResSegmentation,
    config: &CorrespondenceConfig,
) -> Result<Vec<DifferenceMap>> {
    segmentation
        .masks()
        .par_iter()
        .enumerate()
        .map(|(index, mask)| {
            difference_map_for_mask(backend, trajectory, mask, config).map_err(|e| e.for_mask(index))
        })
        .collect()
}

/// Bilinear upsampling baseline: each mask's one-hot channel is
/// interpolated to H x W and pixels take the argmax (ties to the lowest
/// index).
pub fn naive_upsample(
    segmentation: &LowResSegmentation,
    height: usize,
    width: usize,
) -> Result<SegmentationMap> {
    let (gh, gw) = (segmentation.grid_height(), segmentation.grid_width());
    if height < gh || width < gw {
        return Err(Error::InvalidConfig(format!(
            "cannot upsample {gh}x{gw} to smaller {height}x{width}"
        )));
    }
    let k = segmentation.num_masks();
    let mut labels = vec![0u32; height * width];
    let mut best = vec![f64::NEG_INFINITY; height * width];
    for (idx, mask) in segmentation.masks().iter().enumerate() {
        for y in 0..height {
            let (y0, y1, wy) = bilinear_taps(y, height, gh);
            for x in 0..width {
                let (x0, x1, wx) = bilinear_taps(x, width, gw);
                let m = |yy: usize, xx: usize| -> f64 {
                    if mask.get(yy, xx) {
                        1.0
                    } else {
                        0.0
                    }
                };
                let top = m(y0, x0) * (1.0 - wx) + m(y0, x1) * wx;
                let bot = m(y1, x0) * (1.0 - wx) + m(y1, x1) * wx;
                let v = top * (1.0 - wy) + bot * wy;
                let i = y * width + x;
                if v > best[i] {
                    best[i] = v;
                    labels[i] = idx as u32;
                }
            }
        }
    }
    SegmentationMap::new(height, width, labels, k as u32, (0..k as u32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_of(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> DifferenceMap {
        let mut values = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                values.push(f(y, x));
            }
        }
        DifferenceMap::new(h, w, values).unwrap()
    }

    #[test]
    fn identical_images_give_zero_map() {
        let img = ImageBuf::from_fn(3, 4, |y, x| [y as f32 * 0.1, x as f32 * 0.1, 0.5]);
        let d = difference_map(&img, &img).unwrap();
        assert!(d.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_four_five_pixel() {
        let a = ImageBuf::from_fn(2, 2, |_, _| [0.1, 0.1, 0.1]);
        let mut b = a.clone();
        b.set(1, 0, [0.4, 0.5, 0.1]);
        let d = difference_map(&a, &b).unwrap();
        assert!((d.get(1, 0) - 0.5).abs() < 1e-7);
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(0, 1), 0.0);
        assert_eq!(d.get(1, 1), 0.0);
    }

    #[test]
    fn difference_map_rejects_mismatched_dims() {
        let a = ImageBuf::new(2, 2);
        let b = ImageBuf::new(2, 3);
        assert!(difference_map(&a, &b).is_err());
    }

    #[test]
    fn smoothing_keeps_constants_fixed() {
        let m = map_of(9, 11, |_, _| 0.37);
        let s = gaussian_smooth(&m, 2.5).unwrap();
        for &v in s.values() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn impulse_smooths_to_symmetric_bump() {
        let m = map_of(11, 11, |y, x| if y == 5 && x == 5 { 1.0 } else { 0.0 });
        let s = gaussian_smooth(&m, 1.0).unwrap();
        // peak stays at the impulse
        let peak = s.get(5, 5);
        for y in 0..11 {
            for x in 0..11 {
                assert!(s.get(y, x) <= peak);
                // symmetry about the center
                assert!((s.get(y, x) - s.get(10 - y, 10 - x)).abs() < 1e-12);
                assert!((s.get(y, x) - s.get(x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smoothing_matches_dense_convolution_oracle() {
        let mut state = 77u64;
        let m = map_of(12, 9, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 40) as f32) / ((1u64 << 24) as f32)
        });
        let sigma = 1.7;
        let s = gaussian_smooth(&m, sigma).unwrap();

        // dense O(HWk^2) renormalized convolution
        let radius = (4.0 * sigma).ceil() as i64;
        for y in 0..12i64 {
            for x in 0..9i64 {
                let mut acc = 0.0f64;
                let mut norm = 0.0f64;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let (qy, qx) = (y + dy, x + dx);
                        if qy < 0 || qy >= 12 || qx < 0 || qx >= 9 {
                            continue;
                        }
                        let wgt = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
                        acc += wgt * m.get(qy as usize, qx as usize) as f64;
                        norm += wgt;
                    }
                }
                let expected = acc / norm;
                assert!(
                    (s.get(y as usize, x as usize) as f64 - expected).abs() < 1e-6,
                    "mismatch at ({y},{x})"
                );
            }
        }
    }

    #[test]
    fn smoothing_rejects_bad_sigma() {
        let m = map_of(2, 2, |_, _| 1.0);
        assert!(gaussian_smooth(&m, 0.0).is_err());
        assert!(gaussian_smooth(&m, -1.0).is_err());
        assert!(gaussian_smooth(&m, f64::NAN).is_err());
    }

    #[test]
    fn assign_labels_trivial_cases() {
        let single = vec![map_of(2, 3, |_, _| 0.5)];
        let m = assign_labels(&single).unwrap();
        assert!(m.labels().iter().all(|&l| l == 0));

        let two = vec![map_of(2, 2, |_, _| 1.0), map_of(2, 2, |_, _| 2.0)];
        let m = assign_labels(&two).unwrap();
        assert!(m.labels().iter().all(|&l| l == 1));

        let tied = vec![map_of(2, 2, |_, _| 1.5), map_of(2, 2, |_, _| 1.5)];
        let m = assign_labels(&tied).unwrap();
        assert!(m.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn assign_labels_rejects_empty_and_mismatched() {
        assert!(assign_labels(&[]).is_err());
        let maps = vec![map_of(2, 2, |_, _| 0.0), map_of(2, 3, |_, _| 0.0)];
        assert!(assign_labels(&maps).is_err());
    }

    #[test]
    fn argmax_invariant_under_increasing_transform() {
        let mut state = 3u64;
        let mut rand = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 40) as f32) / ((1u64 << 24) as f32)
        };
        let maps: Vec<DifferenceMap> = (0..4).map(|_| map_of(6, 7, |_, _| rand())).collect();
        let base = assign_labels(&maps).unwrap();
        let transformed: Vec<DifferenceMap> = maps
            .iter()
            .map(|m| {
                let vals = m.values().iter().map(|&v| 2.0 * v + 0.125).collect();
                DifferenceMap::new(6, 7, vals).unwrap()
            })
            .collect();
        let after = assign_labels(&transformed).unwrap();
        assert_eq!(base.labels(), after.labels());
    }

    #[test]
    fn permutation_equivariance_off_tie_cells() {
        let mut state = 99u64;
        let mut rand = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(7);
            ((state >> 40) as f32) / ((1u64 << 24) as f32)
        };
        let maps: Vec<DifferenceMap> = (0..5).map(|_| map_of(20, 20, |_, _| rand())).collect();
        let base = assign_labels(&maps).unwrap();
        // rotate the list by two
        let perm = [2usize, 3, 4, 0, 1];
        let permuted: Vec<DifferenceMap> = perm.iter().map(|&i| maps[i].clone()).collect();
        let after = assign_labels(&permuted).unwrap();
        let mut mismatches = 0usize;
        for (i, &l) in base.labels().iter().enumerate() {
            // label l in the base should become the position of l in perm
            let expected = perm.iter().position(|&p| p == l as usize).unwrap() as u32;
            if after.labels()[i] != expected {
                mismatches += 1;
            }
        }
        assert!(
            (mismatches as f64) < 0.001 * 400.0,
            "{mismatches} mismatched pixels"
        );
    }

    #[test]
    fn naive_upsample_identity_scale() {
        let masks = vec![
            crate::mask::BinaryMask::from_fn(2, 2, |y, _| y == 0),
            crate::mask::BinaryMask::from_fn(2, 2, |y, _| y == 1),
        ];
        let seg = LowResSegmentation::from_masks(masks, vec![vec![0.0], vec![1.0]], 0.0).unwrap();
        let up = naive_upsample(&seg, 2, 2).unwrap();
        assert_eq!(up.labels(), &[0, 0, 1, 1]);
    }

    #[test]
    fn naive_upsample_single_mask_is_all_zero() {
        let masks = vec![crate::mask::BinaryMask::from_fn(2, 3, |_, _| true)];
        let seg = LowResSegmentation::from_masks(masks, vec![vec![0.0]], 0.0).unwrap();
        let up = naive_upsample(&seg, 10, 12).unwrap();
        assert!(up.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn naive_upsample_checkerboard_matches_bilinear_oracle() {
        let m0 = crate::mask::BinaryMask::from_fn(2, 2, |y, x| (y + x) % 2 == 0);
        let m1 = crate::mask::BinaryMask::from_fn(2, 2, |y, x| (y + x) % 2 == 1);
        let seg = LowResSegmentation::from_masks(vec![m0.clone(), m1.clone()], vec![vec![0.0], vec![1.0]], 0.0).unwrap();
        let up = naive_upsample(&seg, 4, 4).unwrap();

        // closed-form bilinear weights with half-pixel centers
        for y in 0..4 {
            let (y0, y1, wy) = bilinear_taps(y, 4, 2);
            for x in 0..4 {
                let (x0, x1, wx) = bilinear_taps(x, 4, 2);
                let chan = |m: &crate::mask::BinaryMask| {
                    let v = |yy: usize, xx: usize| if m.get(yy, xx) { 1.0 } else { 0.0 };
                    (v(y0, x0) * (1.0 - wx) + v(y0, x1) * wx) * (1.0 - wy)
                        + (v(y1, x0) * (1.0 - wx) + v(y1, x1) * wx) * wy
                };
                let expected = if chan(&m1) > chan(&m0) { 1 } else { 0 };
                assert_eq!(up.label(y, x), expected, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn resize_nearest_identity() {
        let m = SegmentationMap::new(2, 2, vec![0, 1, 2, 3], 4, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(m.resize_nearest(2, 2), m);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            // scaling all maps by the same power of two (exact in floats)
            // never changes the argmax labeling
            #[test]
            fn argmax_invariant_under_exact_scaling(
                k in 2usize..5,
                exponent in -2i32..3,
                seed in any::<u64>(),
            ) {
                let mut state = seed | 1;
                let maps: Vec<DifferenceMap> = (0..k)
                    .map(|_| {
                        map_of(5, 6, |_, _| {
                            state = state.wrapping_mul(6364136223846793005).wrapping_add(7);
                            ((state >> 40) as f32) / ((1u64 << 24) as f32)
                        })
                    })
                    .collect();
                let base = assign_labels(&maps).unwrap();
                let factor = 2.0f32.powi(exponent);
                let scaled: Vec<DifferenceMap> = maps
                    .iter()
                    .map(|m| {
                        let values = m.values().iter().map(|&v| v * factor).collect();
                        DifferenceMap::new(m.height(), m.width(), values).unwrap()
                    })
                    .collect();
                let after = assign_labels(&scaled).unwrap();
                prop_assert_eq!(base.labels(), after.labels());
            }

            // every smoothed map stays nonnegative and finite
            #[test]
            fn smoothing_preserves_map_invariants(seed in any::<u64>(), sigma in 0.3f64..4.0) {
                let mut state = seed | 5;
                let m = map_of(7, 9, |_, _| {
                    state = state.wrapping_mul(2862933555777941757).wrapping_add(3);
                    ((state >> 40) as f32) / ((1u64 << 24) as f32)
                });
                let s = gaussian_smooth(&m, sigma).unwrap();
                prop_assert!(s.values().iter().all(|v| v.is_finite() && *v >= 0.0));
            }
        }
    }
}
