//! Label overlays and the ours-vs-naive comparison panel.

use super::archive::ArchiveEntry;
use crate::backend::synthetic::SyntheticScene;
use crate::correspondence::{naive_upsample, SegmentationMap};
use crate::error::Result;
use crate::image::ImageBuf;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Seeded label palette: saturated colors, stable across reruns of the same
/// seed.
pub fn palette(seed: u64, count: usize) -> Vec<[f32; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70a1);
    (0..count)
        .map(|_| {
            let hue: f32 = rng.random_range(0.0..360.0);
            let value: f32 = rng.random_range(0.7..1.0);
            hsv_to_rgb(hue, 0.85, value)
        })
        .collect()
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Color-coded overlay: the label color blended over the image.
pub fn overlay(image: &ImageBuf, map: &SegmentationMap, colors: &[[f32; 3]]) -> ImageBuf {
    ImageBuf::from_fn(image.height(), image.width(), |y, x| {
        let base = image.get(y, x);
        let color = colors[map.label(y, x) as usize % colors.len()];
        [
            0.45 * base[0] + 0.55 * color[0],
            0.45 * base[1] + 0.55 * color[1],
            0.45 * base[2] + 0.55 * color[2],
        ]
    })
}

/// Two images side by side with a thin white separator.
pub fn side_by_side(left: &ImageBuf, right: &ImageBuf) -> ImageBuf {
    let sep = 4usize;
    let height = left.height().max(right.height());
    let width = left.width() + sep + right.width();
    ImageBuf::from_fn(height, width, |y, x| {
        if x < left.width() {
            if y < left.height() {
                left.get(y, x)
            } else {
                [1.0; 3]
            }
        } else if x < left.width() + sep {
            [1.0; 3]
        } else if y < right.height() {
            right.get(y, x - left.width() - sep)
        } else {
            [1.0; 3]
        }
    })
}

/// Writes `<id>_overlay.png`, `<id>_naive.png` and `<id>_comparison.png`
/// (ours | naive) for one archive entry.
pub fn render_entry(
    entry: &ArchiveEntry,
    scene: &SyntheticScene,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let image = scene.render();
    let colors = palette(seed, entry.lowres.num_masks().max(entry.final_map.num_labels() as usize));

    let ours = overlay(&image, &entry.final_map, &colors);
    let naive_map = naive_upsample(&entry.lowres, entry.working_height, entry.working_width)?
        .resize_nearest(entry.original_height, entry.original_width);
    let naive = overlay(&image, &naive_map, &colors);

    ours.save_png(&out_dir.join(format!("{}_overlay.png", entry.image_id)))?;
    naive.save_png(&out_dir.join(format!("{}_naive.png", entry.image_id)))?;
    side_by_side(&ours, &naive)
        .save_png(&out_dir.join(format!("{}_comparison.png", entry.image_id)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_seed_stable() {
        assert_eq!(palette(7, 12), palette(7, 12));
        assert_ne!(palette(7, 12), palette(8, 12));
    }

    #[test]
    fn hsv_primaries() {
        let red = hsv_to_rgb(0.0, 1.0, 1.0);
        assert!((red[0] - 1.0).abs() < 1e-6 && red[1].abs() < 1e-6);
        let green = hsv_to_rgb(120.0, 1.0, 1.0);
        assert!((green[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn side_by_side_dimensions() {
        let a = ImageBuf::new(4, 6);
        let b = ImageBuf::new(3, 5);
        let panel = side_by_side(&a, &b);
        assert_eq!(panel.height(), 4);
        assert_eq!(panel.width(), 6 + 4 + 5);
    }
}
