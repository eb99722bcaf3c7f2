//! Shared oracle helpers for integration tests. Everything here recomputes
//! ground truth independently of the library's internals.

use modseg::backend::synthetic::SyntheticScene;
use modseg::correspondence::SegmentationMap;
use modseg::evaluation::max_weight_assignment;
use modseg::mask::BinaryMask;

/// Independent majority oracle: counts labels per block with a map and
/// resolves ties by scanning labels upward.
pub fn majority_oracle(labels: &[u16], height: usize, width: usize, factor: usize) -> Vec<u16> {
    let gh = height / factor;
    let gw = width / factor;
    let mut out = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut counts: std::collections::BTreeMap<u16, u32> = std::collections::BTreeMap::new();
            for y in gy * factor..(gy + 1) * factor {
                for x in gx * factor..(gx + 1) * factor {
                    *counts.entry(labels[y * width + x]).or_insert(0) += 1;
                }
            }
            let best_count = counts.values().copied().max().unwrap();
            let winner = counts
                .iter()
                .find(|(_, &c)| c == best_count)
                .map(|(&l, _)| l)
                .unwrap();
            out.push(winner);
        }
    }
    out
}

/// Mask selecting exactly the feature cells whose majority is `label`.
pub fn cells_of_label(scene: &SyntheticScene, label: u16) -> BinaryMask {
    let majority = majority_oracle(
        &scene.labels,
        scene.height,
        scene.width,
        scene.downsample_factor,
    );
    let gw = scene.grid_width();
    BinaryMask::from_fn(scene.grid_height(), gw, |y, x| majority[y * gw + x] == label)
}

/// All files under a directory keyed by relative path, minus the
/// wall-clock record. Used to compare archives byte-for-byte.
#[allow(dead_code)]
pub fn tree_digest(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(
        root: &std::path::Path,
        dir: &std::path::Path,
        out: &mut std::collections::BTreeMap<String, Vec<u8>>,
    ) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let entry = entry.unwrap();
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                if rel != "timing.json" {
                    out.insert(rel, std::fs::read(&path).unwrap());
                }
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Pixel accuracy of a predicted map against hidden labels, maximized over
/// injective prediction-label -> hidden-label matchings.
#[allow(dead_code)]
pub fn accuracy_up_to_permutation(pred: &SegmentationMap, hidden: &[u16], num_hidden: usize) -> f64 {
    let k = pred.num_labels() as usize;
    let mut counts = vec![vec![0.0f64; num_hidden]; k];
    for (i, &p) in pred.labels().iter().enumerate() {
        counts[p as usize][hidden[i] as usize] += 1.0;
    }
    let assignment = max_weight_assignment(&counts).expect("nonempty weight matrix");
    let matched: f64 = (0..k)
        .map(|p| match assignment.gt_for_pred(p) {
            Some(g) => counts[p][g as usize],
            None => 0.0,
        })
        .sum();
    matched / hidden.len() as f64
}
