//! Quantitative protocols: confusion accumulation, mIoU, Hungarian matching
//! that maximizes mIoU, prompt-template text embeddings, and open-vocabulary
//! mask classification.

use crate::correspondence::SegmentationMap;
use crate::embeddings::ExternalEmbeddingField;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// A ground-truth label grid with an optional ignore label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    num_classes: u32,
    ignore_label: Option<u32>,
}

impl LabelGrid {
    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<u32>,
        num_classes: u32,
        ignore_label: Option<u32>,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidConfig(format!(
                "label grid has {} entries, expected {}",
                labels.len(),
                height * width
            )));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l >= num_classes && Some(l) != ignore_label)
        {
            return Err(Error::InvalidConfig(format!(
                "ground-truth label {bad} outside [0, {num_classes}) and not the ignore label"
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            num_classes,
            ignore_label,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    /// Class of the pixel at row-major index `i`, or None when ignored.
    #[inline]
    pub fn class_at_index(&self, i: usize) -> Option<u32> {
        let l = self.labels[i];
        if Some(l) == self.ignore_label {
            None
        } else {
            Some(l)
        }
    }
}

/// Pred x gt pixel counts over the non-ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_pred: usize,
    num_gt: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn zeros(num_pred: usize, num_gt: usize) -> Self {
        Self {
            num_pred,
            num_gt,
            counts: vec![0; num_pred * num_gt],
            ignored: 0,
        }
    }

    pub fn from_counts(num_pred: usize, num_gt: usize, counts: Vec<u64>, ignored: u64) -> Result<Self> {
        if counts.len() != num_pred * num_gt {
            return Err(Error::InvalidConfig(format!(
                "confusion has {} entries, expected {}",
                counts.len(),
                num_pred * num_gt
            )));
        }
        Ok(Self {
            num_pred,
            num_gt,
            counts,
            ignored,
        })
    }

    pub fn num_pred(&self) -> usize {
        self.num_pred
    }

    pub fn num_gt(&self) -> usize {
        self.num_gt
    }

    #[inline]
    pub fn get(&self, pred: usize, gt: usize) -> u64 {
        self.counts[pred * self.num_gt + gt]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, pred: usize) -> u64 {
        (0..self.num_gt).map(|g| self.get(pred, g)).sum()
    }

    pub fn col_sum(&self, gt: usize) -> u64 {
        (0..self.num_pred).map(|p| self.get(p, gt)).sum()
    }

    /// Associative, order-independent merge for dataset accumulation.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_pred != other.num_pred || self.num_gt != other.num_gt {
            return Err(Error::DimensionMismatch {
                what: "confusion matrices",
                want_h: self.num_pred,
                want_w: self.num_gt,
                got_h: other.num_pred,
                got_w: other.num_gt,
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }
}

/// Counts prediction/ground-truth co-occurrences over non-ignored pixels.
pub fn confusion(pred: &SegmentationMap, gt: &LabelGrid) -> Result<ConfusionMatrix> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::DimensionMismatch {
            what: "prediction over ground truth",
            want_h: gt.height(),
            want_w: gt.width(),
            got_h: pred.height(),
            got_w: pred.width(),
        });
    }
    let mut conf = ConfusionMatrix::zeros(pred.num_labels() as usize, gt.num_classes as usize);
    for (i, &p) in pred.labels().iter().enumerate() {
        match gt.class_at_index(i) {
            Some(c) => conf.counts[p as usize * conf.num_gt + c as usize] += 1,
            None => conf.ignored += 1,
        }
    }
    if conf.total() == 0 {
        log::warn!("confusion: every pixel is ignored, matrix is all zeros");
    }
    Ok(conf)
}

/// An injective map from prediction labels to ground-truth classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pred_to_gt: Vec<Option<u32>>,
}

impl Assignment {
    pub fn identity(n: usize) -> Self {
        Self {
            pred_to_gt: (0..n as u32).map(Some).collect(),
        }
    }

    pub fn new(pred_to_gt: Vec<Option<u32>>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for gt in pred_to_gt.iter().flatten() {
            if !seen.insert(*gt) {
                return Err(Error::InvalidAssignment(format!(
                    "ground-truth class {gt} assigned twice"
                )));
            }
        }
        Ok(Self { pred_to_gt })
    }

    pub fn pred_to_gt(&self) -> &[Option<u32>] {
        &self.pred_to_gt
    }

    pub fn gt_for_pred(&self, pred: usize) -> Option<u32> {
        self.pred_to_gt.get(pred).copied().flatten()
    }

    fn gt_to_pred(&self, num_gt: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_gt];
        for (p, gt) in self.pred_to_gt.iter().enumerate() {
            if let Some(g) = gt {
                if (*g as usize) < num_gt {
                    out[*g as usize] = Some(p);
                }
            }
        }
        out
    }
}

/// Intersection-over-union of each ground-truth class under an assignment;
/// None for classes with zero union (absent on both sides).
pub fn per_class_iou(conf: &ConfusionMatrix, assignment: &Assignment) -> Result<Vec<Option<f64>>> {
    if assignment.pred_to_gt.len() > conf.num_pred
        && assignment.pred_to_gt[conf.num_pred..].iter().any(Option::is_some)
    {
        return Err(Error::InvalidAssignment(format!(
            "assignment covers {} predictions, confusion has {}",
            assignment.pred_to_gt.len(),
            conf.num_pred
        )));
    }
    let gt_to_pred = assignment.gt_to_pred(conf.num_gt);
    Ok((0..conf.num_gt)
        .map(|g| {
            let col = conf.col_sum(g);
            match gt_to_pred[g] {
                Some(p) => {
                    let inter = conf.get(p, g);
                    let union = conf.row_sum(p) + col - inter;
                    if union == 0 {
                        None
                    } else {
                        Some(inter as f64 / union as f64)
                    }
                }
                None => {
                    if col == 0 {
                        None
                    } else {
                        Some(0.0)
                    }
                }
            }
        })
        .collect())
}

/// Mean IoU over ground-truth classes under the given assignment; classes
/// with zero union are excluded from the mean.
pub fn miou(conf: &ConfusionMatrix, assignment: &Assignment) -> Result<f64> {
    let ious = per_class_iou(conf, assignment)?;
    let present: Vec<f64> = ious.into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::UndefinedMetric("all class unions are zero"));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Minimum-cost assignment on a square matrix via shortest augmenting paths
/// with potentials (O(n^3) Hungarian). Returns the column picked per row.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_row = vec![0usize; n + 1]; // row matched to column j, 1-based; 0 = free
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_col = vec![0usize; n];
    for j in 1..=n {
        if col_row[j] > 0 {
            row_col[col_row[j] - 1] = j - 1;
        }
    }
    row_col
}

/// Maximum-total-weight injective assignment of rows to columns.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Result<Assignment> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyInput("weight matrix"));
    }
    let n = rows.max(cols);
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i < rows && j < cols {
                        -weights[i][j]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let row_col = min_cost_assignment(&cost);
    Assignment::new(
        (0..rows)
            .map(|i| {
                let j = row_col[i];
                (j < cols).then_some(j as u32)
            })
            .collect(),
    )
}

/// Pairwise IoU of pairing prediction `p` with ground-truth class `g`,
/// computed from the confusion row/column sums.
fn pair_iou(conf: &ConfusionMatrix, p: usize, g: usize) -> f64 {
    let inter = conf.get(p, g);
    let union = conf.row_sum(p) + conf.col_sum(g) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// The injective prediction-to-class assignment maximizing mIoU.
///
/// Solved as a maximum-weight linear assignment on pairwise IoUs, followed
/// by a sum-preserving repair that pairs empty predictions with empty
/// classes. Empty classes paired with empty predictions drop out of the
/// mIoU mean, and the repair swaps are provably neutral for the IoU total,
/// so the result maximizes the mean itself (validated against exhaustive
/// permutation search in tests).
pub fn hungarian_match(conf: &ConfusionMatrix) -> Result<Assignment> {
    let weights: Vec<Vec<f64>> = (0..conf.num_pred)
        .map(|p| (0..conf.num_gt).map(|g| pair_iou(conf, p, g)).collect())
        .collect();
    let assignment = max_weight_assignment(&weights)?;
    let mut pred_to_gt = assignment.pred_to_gt;

    // repair: move zero predictions onto zero classes when a non-zero
    // prediction is parked on a zero class
    loop {
        let stuck = pred_to_gt.iter().enumerate().find(|(p, gt)| {
            gt.map_or(false, |g| conf.row_sum(*p) > 0 && conf.col_sum(g as usize) == 0)
        });
        let donor = pred_to_gt.iter().enumerate().find(|(p, gt)| {
            conf.row_sum(*p) == 0 && gt.map_or(true, |g| conf.col_sum(g as usize) > 0)
        });
        match (stuck, donor) {
            (Some((p1, _)), Some((p2, _))) => pred_to_gt.swap(p1, p2),
            _ => break,
        }
    }
    Assignment::new(pred_to_gt)
}

/// The seven prompt templates used to build text embeddings.
pub const DEFAULT_PROMPT_TEMPLATES: [&str; 7] = [
    "itap of a {}.",
    "a bad photo of a {}.",
    "a origami {}.",
    "a photo of the large {}.",
    "a {} in a video game.",
    "art of the {}.",
    "a photo of the small {}.",
];

/// Class names plus the prompt templates used to embed them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextClassSpec {
    pub class_names: Vec<String>,
    pub templates: Vec<String>,
}

impl TextClassSpec {
    pub fn with_default_templates(class_names: Vec<String>) -> Self {
        Self {
            class_names,
            templates: DEFAULT_PROMPT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::EmptyInput("class names"));
        }
        if self.templates.is_empty() {
            return Err(Error::EmptyInput("prompt templates"));
        }
        for t in &self.templates {
            if t.matches("{}").count() != 1 {
                return Err(Error::InvalidConfig(format!(
                    "template '{t}' must contain exactly one {{}} slot"
                )));
            }
        }
        Ok(())
    }
}

/// External text encoder boundary.
pub trait TextEmbeddingProvider {
    fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String>;
}

/// Per class: embed every filled template, average, renormalize to unit
/// length. Provider failures surface with the class name attached.
pub fn text_embeddings(
    spec: &TextClassSpec,
    provider: &dyn TextEmbeddingProvider,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.class_names.len());
    for name in &spec.class_names {
        let mut mean: Option<Vec<f64>> = None;
        for template in &spec.templates {
            let prompt = template.replace("{}", name);
            let v = provider.embed(&prompt).map_err(|message| Error::Provider {
                class: name.clone(),
                message,
            })?;
            match &mut mean {
                None => mean = Some(v),
                Some(m) => {
                    if m.len() != v.len() {
                        return Err(Error::Provider {
                            class: name.clone(),
                            message: "provider returned inconsistent dimensions".into(),
                        });
                    }
                    for (a, b) in m.iter_mut().zip(v) {
                        *a += b;
                    }
                }
            }
        }
        let mut mean = mean.expect("templates validated nonempty");
        let k = spec.templates.len() as f64;
        for v in &mut mean {
            *v /= k;
        }
        let norm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Provider {
                class: name.clone(),
                message: "mean embedding is not unit-normalizable".into(),
            });
        }
        for v in &mut mean {
            *v /= norm;
        }
        out.push(mean);
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        f64::NEG_INFINITY
    } else {
        dot / (na * nb)
    }
}

fn nearest_by_cosine(v: &[f64], candidates: &[Vec<f64>]) -> usize {
    let mut best = 0usize;
    let mut best_s = f64::NEG_INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let s = cosine(v, c);
        if s > best_s {
            best_s = s;
            best = i;
        }
    }
    best
}

/// Open-vocabulary mask classification: each mask takes the mean of the
/// external pixel embeddings it covers and is classified by the closest
/// class vector under cosine similarity. All pixels of a mask share its
/// class.
pub fn classify_masks_openvocab(
    masks: &SegmentationMap,
    field: &ExternalEmbeddingField,
    class_vectors: &[Vec<f64>],
) -> Result<SegmentationMap> {
    if class_vectors.is_empty() {
        return Err(Error::EmptyInput("class vectors"));
    }
    if masks.height() != field.height || masks.width() != field.width {
        return Err(Error::DimensionMismatch {
            what: "masks over embedding field",
            want_h: field.height,
            want_w: field.width,
            got_h: masks.height(),
            got_w: masks.width(),
        });
    }
    let k = masks.num_labels() as usize;
    let mut sums = vec![vec![0.0f64; field.dim]; k];
    let mut counts = vec![0u64; k];
    for (i, &l) in masks.labels().iter().enumerate() {
        let v = &field.data[i * field.dim..(i + 1) * field.dim];
        counts[l as usize] += 1;
        for (s, &x) in sums[l as usize].iter_mut().zip(v) {
            *s += x as f64;
        }
    }
    let class_of_label: Vec<u32> = (0..k)
        .map(|l| {
            if counts[l] == 0 {
                return 0;
            }
            let mean: Vec<f64> = sums[l].iter().map(|s| s / counts[l] as f64).collect();
            nearest_by_cosine(&mean, class_vectors) as u32
        })
        .collect();
    let labels: Vec<u32> = masks
        .labels()
        .iter()
        .map(|&l| class_of_label[l as usize])
        .collect();
    let c = class_vectors.len() as u32;
    SegmentationMap::new(masks.height(), masks.width(), labels, c, (0..c).collect())
}

/// Per-pixel open-vocabulary baseline: classify each pixel of the raw
/// embedding field independently.
pub fn classify_pixels_openvocab(
    field: &ExternalEmbeddingField,
    class_vectors: &[Vec<f64>],
) -> Result<SegmentationMap> {
    if class_vectors.is_empty() {
        return Err(Error::EmptyInput("class vectors"));
    }
    let labels: Vec<u32> = (0..field.height * field.width)
        .map(|i| {
            let v: Vec<f64> = field.data[i * field.dim..(i + 1) * field.dim]
                .iter()
                .map(|&x| x as f64)
                .collect();
            nearest_by_cosine(&v, class_vectors) as u32
        })
        .collect();
    let c = class_vectors.len() as u32;
    SegmentationMap::new(field.height, field.width, labels, c, (0..c).collect())
}

/// Per-class vectors with names, the file boundary for precomputed text
/// embeddings. Binary layout: magic, u32 count, u32 dim, per class a
/// u16-length-prefixed UTF-8 name, then count*dim f32 little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVectors {
    pub names: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

const CLASS_VECTORS_MAGIC: &[u8; 4] = b"CLSV";

impl ClassVectors {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CLASS_VECTORS_MAGIC)?;
        let dim = self.vectors.first().map_or(0, Vec::len);
        out.write_all(&(self.names.len() as u32).to_le_bytes())?;
        out.write_all(&(dim as u32).to_le_bytes())?;
        for name in &self.names {
            let bytes = name.as_bytes();
            out.write_all(&(bytes.len() as u16).to_le_bytes())?;
            out.write_all(bytes)?;
        }
        for v in &self.vectors {
            for x in v {
                out.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let bad = |message: &str| Error::FileFormat {
            path: path.display().to_string(),
            message: message.to_string(),
        };
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CLASS_VECTORS_MAGIC {
            return Err(bad("not a class vectors file"));
        }
        let mut u32buf = [0u8; 4];
        file.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
        let count = u32::from_le_bytes(u32buf) as usize;
        file.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        let mut names = Vec::with_capacity(count);
        for _ in 0..count {
            let mut u16buf = [0u8; 2];
            file.read_exact(&mut u16buf).map_err(|_| bad("truncated name"))?;
            let len = u16::from_le_bytes(u16buf) as usize;
            let mut buf = vec![0u8; len];
            file.read_exact(&mut buf).map_err(|_| bad("truncated name"))?;
            names.push(String::from_utf8(buf).map_err(|_| bad("name is not UTF-8"))?);
        }
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                file.read_exact(&mut u32buf).map_err(|_| bad("truncated data"))?;
                v.push(f32::from_le_bytes(u32buf) as f64);
            }
            vectors.push(v);
        }
        Ok(Self { names, vectors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(h: usize, w: usize, labels: Vec<u32>, k: u32) -> SegmentationMap {
        SegmentationMap::new(h, w, labels, k, (0..k).collect()).unwrap()
    }

    #[test]
    fn perfect_prediction_diagonal_confusion() {
        let pred = seg(2, 2, vec![0, 0, 1, 1], 2);
        let gt = LabelGrid::new(2, 2, vec![0, 0, 1, 1], 2, None).unwrap();
        let conf = confusion(&pred, &gt).unwrap();
        assert_eq!(conf.get(0, 0), 2);
        assert_eq!(conf.get(1, 1), 2);
        assert_eq!(conf.get(0, 1), 0);
        assert_eq!(conf.get(1, 0), 0);
        assert_eq!(miou(&conf, &Assignment::identity(2)).unwrap(), 1.0);
    }

    #[test]
    fn all_ignored_gives_zero_matrix() {
        let pred = seg(2, 2, vec![0, 0, 1, 1], 2);
        let gt = LabelGrid::new(2, 2, vec![9, 9, 9, 9], 2, Some(9)).unwrap();
        let conf = confusion(&pred, &gt).unwrap();
        assert_eq!(conf.total(), 0);
        assert_eq!(conf.ignored(), 4);
        assert!(matches!(
            miou(&conf, &Assignment::identity(2)),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn confusion_matches_pixel_loop_oracle() {
        let mut state = 31u64;
        let mut rand = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(5);
            (state >> 48) as u32
        };
        let labels_pred: Vec<u32> = (0..64).map(|_| rand() % 3).collect();
        let labels_gt: Vec<u32> = (0..64).map(|_| if rand() % 7 == 0 { 255 } else { rand() % 4 }).collect();
        let pred = seg(8, 8, labels_pred.clone(), 3);
        let gt = LabelGrid::new(8, 8, labels_gt.clone(), 4, Some(255)).unwrap();
        let conf = confusion(&pred, &gt).unwrap();

        let mut expect = [0u64; 12];
        let mut ignored = 0u64;
        for i in 0..64 {
            if labels_gt[i] == 255 {
                ignored += 1;
            } else {
                expect[labels_pred[i] as usize * 4 + labels_gt[i] as usize] += 1;
            }
        }
        for p in 0..3 {
            for g in 0..4 {
                assert_eq!(conf.get(p, g), expect[p * 4 + g]);
            }
        }
        assert_eq!(conf.ignored(), ignored);
    }

    #[test]
    fn miou_hand_example() {
        // gt [[0,0],[1,1]], pred [[0,1],[1,1]], identity assignment
        let pred = seg(2, 2, vec![0, 1, 1, 1], 2);
        let gt = LabelGrid::new(2, 2, vec![0, 0, 1, 1], 2, None).unwrap();
        let conf = confusion(&pred, &gt).unwrap();
        let v = miou(&conf, &Assignment::identity(2)).unwrap();
        assert!((v - 7.0 / 12.0).abs() < 1e-9);
    }

    #[test]
    fn diagonal_confusion_matches_identity() {
        let conf = ConfusionMatrix::from_counts(3, 3, vec![5, 0, 0, 0, 7, 0, 0, 0, 2], 0).unwrap();
        let a = hungarian_match(&conf).unwrap();
        assert_eq!(a, Assignment::identity(3));
        assert_eq!(miou(&conf, &a).unwrap(), 1.0);
    }

    #[test]
    fn anti_diagonal_confusion_reverses() {
        let conf = ConfusionMatrix::from_counts(3, 3, vec![0, 0, 4, 0, 6, 0, 3, 0, 0], 0).unwrap();
        let a = hungarian_match(&conf).unwrap();
        assert_eq!(a.gt_for_pred(0), Some(2));
        assert_eq!(a.gt_for_pred(1), Some(1));
        assert_eq!(a.gt_for_pred(2), Some(0));
    }

    fn exhaustive_best_miou(conf: &ConfusionMatrix) -> f64 {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 1 {
                return vec![vec![0]];
            }
            let smaller = permutations(n - 1);
            let mut out = Vec::new();
            for p in smaller {
                for i in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(i, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let n = conf.num_pred().max(conf.num_gt());
        let mut best = f64::NEG_INFINITY;
        for perm in permutations(n) {
            let pred_to_gt: Vec<Option<u32>> = (0..conf.num_pred())
                .map(|p| {
                    let g = perm[p];
                    (g < conf.num_gt()).then_some(g as u32)
                })
                .collect();
            let a = Assignment::new(pred_to_gt).unwrap();
            if let Ok(v) = miou(conf, &a) {
                best = best.max(v);
            }
        }
        best
    }

    #[test]
    fn hungarian_matches_exhaustive_on_random_instances() {
        let mut state = 1234u64;
        let mut rand = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            state >> 48
        };
        for trial in 0..60 {
            let c = 2 + (rand() % 5) as usize;
            let counts: Vec<u64> = (0..c * c)
                .map(|_| {
                    // sprinkle zero rows/cols occasionally
                    if rand() % 5 == 0 {
                        0
                    } else {
                        rand() % 25
                    }
                })
                .collect();
            let conf = ConfusionMatrix::from_counts(c, c, counts, 0).unwrap();
            if conf.total() == 0 {
                continue;
            }
            let a = hungarian_match(&conf).unwrap();
            let got = miou(&conf, &a).unwrap();
            let best = exhaustive_best_miou(&conf);
            assert_eq!(got, best, "trial {trial}");
        }
    }

    #[test]
    fn hungarian_handles_rectangular_confusions() {
        // more predictions than classes: the extra prediction goes unmatched
        let conf = ConfusionMatrix::from_counts(3, 2, vec![8, 0, 0, 9, 1, 1], 0).unwrap();
        let a = hungarian_match(&conf).unwrap();
        assert_eq!(a.gt_for_pred(0), Some(0));
        assert_eq!(a.gt_for_pred(1), Some(1));
        assert_eq!(a.gt_for_pred(2), None);

        // fewer predictions than classes: one class stays unmatched with IoU 0
        let conf = ConfusionMatrix::from_counts(2, 3, vec![5, 0, 0, 0, 5, 0], 0).unwrap();
        let a = hungarian_match(&conf).unwrap();
        let v = miou(&conf, &a).unwrap();
        // classes 0 and 1 perfect, class 2 has zero union and is excluded
        assert_eq!(v, 1.0);

        let conf = ConfusionMatrix::from_counts(2, 3, vec![5, 0, 1, 0, 5, 1], 0).unwrap();
        let a = hungarian_match(&conf).unwrap();
        let v = miou(&conf, &a).unwrap();
        // class 2 present in gt but unmatchable: contributes 0 to the mean
        assert!((v - (5.0 / 6.0 + 5.0 / 6.0 + 0.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn miou_stays_in_unit_interval_and_hits_one_only_when_diagonal() {
        let mut state = 59u64;
        let mut rand = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(29);
            state >> 48
        };
        for _ in 0..40 {
            let c = 2 + (rand() % 4) as usize;
            let counts: Vec<u64> = (0..c * c).map(|_| rand() % 15).collect();
            let conf = ConfusionMatrix::from_counts(c, c, counts.clone(), 0).unwrap();
            if conf.total() == 0 {
                continue;
            }
            let a = hungarian_match(&conf).unwrap();
            let v = miou(&conf, &a).unwrap();
            assert!((0.0..=1.0).contains(&v));
            let off_diagonal_mass: u64 = (0..c)
                .flat_map(|p| (0..c).map(move |g| (p, g)))
                .filter(|&(p, g)| a.gt_for_pred(p) != Some(g as u32))
                .map(|(p, g)| conf.get(p, g))
                .sum();
            assert_eq!(v == 1.0, off_diagonal_mass == 0);
        }
    }

    #[test]
    fn label_permutation_invariance() {
        let mut state = 777u64;
        let mut rand = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(3);
            state >> 48
        };
        let c = 4usize;
        let counts: Vec<u64> = (0..c * c).map(|_| rand() % 20).collect();
        let conf = ConfusionMatrix::from_counts(c, c, counts.clone(), 0).unwrap();
        let base = miou(&conf, &hungarian_match(&conf).unwrap()).unwrap();

        // permute prediction labels: rows reordered
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<u64> = (0..c * c)
            .map(|i| counts[perm[i / c] * c + i % c])
            .collect();
        let conf_p = ConfusionMatrix::from_counts(c, c, permuted, 0).unwrap();
        let after = miou(&conf_p, &hungarian_match(&conf_p).unwrap()).unwrap();
        assert_eq!(base, after);
    }

    struct HashProvider;
    impl TextEmbeddingProvider for HashProvider {
        fn embed(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
            let mut h = 0xcbf29ce484222325u64;
            for b in text.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            Ok((0..4)
                .map(|i| {
                    let x = h.rotate_left(i * 16) as u16;
                    x as f64 / u16::MAX as f64 - 0.5
                })
                .collect())
        }
    }

    #[test]
    fn single_template_single_class_is_that_embedding_normalized() {
        let spec = TextClassSpec {
            class_names: vec!["cat".into()],
            templates: vec!["a photo of a {}.".into()],
        };
        let out = text_embeddings(&spec, &HashProvider).unwrap();
        let raw = HashProvider.embed("a photo of a cat.").unwrap();
        let norm: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in out[0].iter().zip(&raw) {
            assert!((a - b / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_templates_match_single_template() {
        let one = TextClassSpec {
            class_names: vec!["tree".into()],
            templates: vec!["itap of a {}.".into()],
        };
        let two = TextClassSpec {
            class_names: vec!["tree".into()],
            templates: vec!["itap of a {}.".into(), "itap of a {}.".into()],
        };
        assert_eq!(
            text_embeddings(&one, &HashProvider).unwrap(),
            text_embeddings(&two, &HashProvider).unwrap()
        );
    }

    #[test]
    fn default_templates_are_wired() {
        assert_eq!(DEFAULT_PROMPT_TEMPLATES.len(), 7);
        let spec = TextClassSpec::with_default_templates(vec!["dog".into()]);
        assert!(spec.validate().is_ok());
        assert!(spec.templates.contains(&"a bad photo of a {}.".to_string()));
    }

    struct FailingProvider;
    impl TextEmbeddingProvider for FailingProvider {
        fn embed(&self, _text: &str) -> std::result::Result<Vec<f64>, String> {
            Err("encoder offline".into())
        }
    }

    #[test]
    fn provider_failures_surface_the_class_name() {
        let spec = TextClassSpec::with_default_templates(vec!["bicycle".into()]);
        match text_embeddings(&spec, &FailingProvider) {
            Err(Error::Provider { class, message }) => {
                assert_eq!(class, "bicycle");
                assert!(message.contains("encoder offline"));
            }
            other => panic!("expected a provider error, got {other:?}"),
        }
    }

    #[test]
    fn template_without_slot_rejected() {
        let spec = TextClassSpec {
            class_names: vec!["x".into()],
            templates: vec!["no slot here".into()],
        };
        assert!(spec.validate().is_err());
        let spec = TextClassSpec {
            class_names: vec!["x".into()],
            templates: vec!["{} and {}".into()],
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn openvocab_mask_classification_trivials() {
        // two masks left/right; embeddings exactly equal to class vectors
        let masks = seg(2, 2, vec![0, 1, 0, 1], 2);
        let mut data = vec![0.0f32; 2 * 2 * 2];
        for (i, &l) in masks.labels().iter().enumerate() {
            data[i * 2 + l as usize] = 1.0;
        }
        let field = ExternalEmbeddingField::new(2, 2, 2, data).unwrap();
        let class_vectors = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = classify_masks_openvocab(&masks, &field, &class_vectors).unwrap();
        assert_eq!(out.labels(), &[0, 1, 0, 1]);
    }

    #[test]
    fn openvocab_output_constant_per_mask() {
        let masks = seg(2, 3, vec![0, 0, 1, 1, 2, 2], 3);
        let mut state = 9u64;
        let data: Vec<f32> = (0..18)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                ((state >> 40) as f32) / ((1u64 << 24) as f32) - 0.5
            })
            .collect();
        let field = ExternalEmbeddingField::new(2, 3, 3, data).unwrap();
        let class_vectors = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let out = classify_masks_openvocab(&masks, &field, &class_vectors).unwrap();
        for (i, &l) in masks.labels().iter().enumerate() {
            let first = masks.labels().iter().position(|&x| x == l).unwrap();
            assert_eq!(out.labels()[i], out.labels()[first]);
        }
    }

    #[test]
    fn class_vectors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("classes.clsv");
        let cv = ClassVectors {
            names: vec!["sky".into(), "road".into()],
            vectors: vec![vec![0.5, -0.25], vec![0.125, 1.0]],
        };
        cv.save(&path).unwrap();
        let back = ClassVectors::load(&path).unwrap();
        assert_eq!(back.names, cv.names);
        for (a, b) in back.vectors.iter().flatten().zip(cv.vectors.iter().flatten()) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
