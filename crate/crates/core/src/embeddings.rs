//! Mask, pixel and concept embeddings for the unsupervised-segmentation
//! protocols. A mask embedding averages the backend's feature vectors over
//! the masked cells; every pixel adopts the embedding of the mask it belongs
//! to, so a pixel-embedding field is carried as (segmentation map, mask
//! embeddings) instead of an H*W*d tensor.

use crate::correspondence::SegmentationMap;
use crate::error::{Error, Result};
use crate::evaluation::LabelGrid;
use crate::lowres::{weighted_kmeans, FeatureMap};
use crate::mask::BinaryMask;
use std::io::{Read, Write};
use std::path::Path;

/// Mean feature vector of one low-resolution mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskEmbedding {
    pub vector: Vec<f64>,
    pub mask_index: usize,
}

/// Arithmetic mean of the feature vectors inside the masked cells.
pub fn mask_embedding(features: &FeatureMap, mask: &BinaryMask) -> Result<Vec<f64>> {
    if mask.height() != features.height() || mask.width() != features.width() {
        return Err(Error::DimensionMismatch {
            what: "mask over feature map",
            want_h: features.height(),
            want_w: features.width(),
            got_h: mask.height(),
            got_w: mask.width(),
        });
    }
    let mut sum = vec![0.0f64; features.dim()];
    let mut count = 0usize;
    for cell in mask.set_cells() {
        for (s, &v) in sum.iter_mut().zip(features.cell_vector(cell)) {
            *s += v as f64;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    for s in &mut sum {
        *s /= count as f64;
    }
    Ok(sum)
}

/// One embedding per mask of a low-resolution segmentation, in mask order.
pub fn mask_embeddings(
    features: &FeatureMap,
    masks: &[BinaryMask],
) -> Result<Vec<MaskEmbedding>> {
    masks
        .iter()
        .enumerate()
        .map(|(mask_index, m)| {
            Ok(MaskEmbedding {
                vector: mask_embedding(features, m)?,
                mask_index,
            })
        })
        .collect()
}

/// A dense pixel-embedding field realized as a segmentation map plus one
/// embedding per mask: pixel embedding = embedding of the pixel's mask.
#[derive(Debug, Clone)]
pub struct PixelEmbeddingField {
    map: SegmentationMap,
    embeddings: Vec<MaskEmbedding>,
}

impl PixelEmbeddingField {
    pub fn new(map: SegmentationMap, embeddings: Vec<MaskEmbedding>) -> Result<Self> {
        // every label's provenance must point at an available embedding
        let by_mask: std::collections::BTreeMap<usize, usize> = embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| (e.mask_index, i))
            .collect();
        for &label_prov in map.provenance() {
            if !by_mask.contains_key(&(label_prov as usize)) {
                return Err(Error::InvalidConfig(format!(
                    "no embedding for mask {label_prov}"
                )));
            }
        }
        Ok(Self { map, embeddings })
    }

    pub fn map(&self) -> &SegmentationMap {
        &self.map
    }

    pub fn embeddings(&self) -> &[MaskEmbedding] {
        &self.embeddings
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, |e| e.vector.len())
    }

    /// Embedding vector of each label, indexed by label id.
    pub fn label_vectors(&self) -> Vec<&[f64]> {
        let by_mask: std::collections::BTreeMap<usize, &[f64]> = self
            .embeddings
            .iter()
            .map(|e| (e.mask_index, e.vector.as_slice()))
            .collect();
        self.map
            .provenance()
            .iter()
            .map(|&p| by_mask[&(p as usize)])
            .collect()
    }

    pub fn pixel_embedding(&self, y: usize, x: usize) -> &[f64] {
        let label = self.map.label(y, x) as usize;
        let mask = self.map.provenance()[label] as usize;
        &self
            .embeddings
            .iter()
            .find(|e| e.mask_index == mask)
            .expect("validated at construction")
            .vector
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConceptSource {
    KmeansDataset,
    ClassMean,
}

/// C concept vectors pixels are classified against.
#[derive(Debug, Clone)]
pub struct ConceptEmbeddings {
    pub vectors: Vec<Vec<f64>>,
    pub source: ConceptSource,
}

impl ConceptEmbeddings {
    pub fn count(&self) -> usize {
        self.vectors.len()
    }
}

/// Concept embeddings for the traditional protocol: k-means over the pixel
/// embeddings of the whole dataset. Pixel multiplicity is carried as
/// weights (pixel count per mask), which optimizes the identical objective
/// without materializing per-pixel vectors.
pub fn concept_embeddings_unsupervised(
    fields: &[PixelEmbeddingField],
    concept_count: usize,
    seed: u64,
) -> Result<ConceptEmbeddings> {
    if fields.is_empty() {
        return Err(Error::EmptyInput("pixel embedding dataset"));
    }
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for field in fields {
        let counts = field.map().label_counts();
        let vectors = field.label_vectors();
        for (label, &count) in counts.iter().enumerate() {
            if count > 0 {
                points.push(vectors[label].to_vec());
                weights.push(count as f64);
            }
        }
    }
    let mut distinct = points.clone();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if concept_count > distinct.len() {
        return Err(Error::InvalidClusterCount {
            requested: concept_count,
            available: distinct.len(),
        });
    }
    let outcome = weighted_kmeans(&points, &weights, concept_count, seed, 1)?;
    Ok(ConceptEmbeddings {
        vectors: outcome.centroids,
        source: ConceptSource::KmeansDataset,
    })
}

/// Concept embeddings for the modified protocol: the mean pixel embedding of
/// each ground-truth class over the dataset. Returns the per-class vectors
/// (None for classes with no labeled pixels, which evaluation excludes).
pub fn concept_embeddings_modified(
    fields: &[PixelEmbeddingField],
    ground_truth: &[LabelGrid],
) -> Result<(ConceptEmbeddings, Vec<Option<u32>>)> {
    if fields.is_empty() || fields.len() != ground_truth.len() {
        return Err(Error::InvalidConfig(format!(
            "{} pixel fields vs {} ground-truth grids",
            fields.len(),
            ground_truth.len()
        )));
    }
    let num_classes = ground_truth
        .iter()
        .map(LabelGrid::num_classes)
        .max()
        .unwrap() as usize;
    let dim = fields[0].dim();
    let mut sums = vec![vec![0.0f64; dim]; num_classes];
    let mut counts = vec![0u64; num_classes];

    for (field, gt) in fields.iter().zip(ground_truth) {
        let map = field.map();
        if map.height() != gt.height() || map.width() != gt.width() {
            return Err(Error::DimensionMismatch {
                what: "pixel field over ground truth",
                want_h: gt.height(),
                want_w: gt.width(),
                got_h: map.height(),
                got_w: map.width(),
            });
        }
        // accumulate pixel counts per (label, class), then fold embeddings in
        let vectors = field.label_vectors();
        let k = map.num_labels() as usize;
        let mut joint = vec![0u64; k * num_classes];
        for (i, &label) in map.labels().iter().enumerate() {
            if let Some(class) = gt.class_at_index(i) {
                joint[label as usize * num_classes + class as usize] += 1;
            }
        }
        for label in 0..k {
            for class in 0..num_classes {
                let c = joint[label * num_classes + class];
                if c > 0 {
                    counts[class] += c;
                    for (s, &v) in sums[class].iter_mut().zip(vectors[label]) {
                        *s += c as f64 * v;
                    }
                }
            }
        }
    }

    if counts.iter().all(|&c| c == 0) {
        return Err(Error::EmptyInput("labeled pixels"));
    }

    let mut vectors = Vec::new();
    let mut class_of_concept = Vec::new();
    for class in 0..num_classes {
        if counts[class] > 0 {
            let mut mean = std::mem::take(&mut sums[class]);
            for s in &mut mean {
                *s /= counts[class] as f64;
            }
            vectors.push(mean);
            class_of_concept.push(Some(class as u32));
        }
    }
    let mut concept_classes = vec![None; vectors.len()];
    concept_classes.copy_from_slice(&class_of_concept);
    Ok((
        ConceptEmbeddings {
            vectors,
            source: ConceptSource::ClassMean,
        },
        concept_classes,
    ))
}

/// Classifies each pixel into the concept with the closest embedding
/// (Euclidean; ties to the lowest concept index). Since pixels of a mask
/// share an embedding, classification happens per mask.
pub fn classify_pixels(
    field: &PixelEmbeddingField,
    concepts: &ConceptEmbeddings,
) -> Result<SegmentationMap> {
    if concepts.vectors.is_empty() {
        return Err(Error::EmptyInput("concept embeddings"));
    }
    if concepts.vectors[0].len() != field.dim() {
        return Err(Error::InvalidConfig(format!(
            "concept dim {} vs pixel embedding dim {}",
            concepts.vectors[0].len(),
            field.dim()
        )));
    }
    let vectors = field.label_vectors();
    let class_of_label: Vec<u32> = vectors
        .iter()
        .map(|v| nearest_euclidean(v, &concepts.vectors) as u32)
        .collect();
    let map = field.map();
    let labels: Vec<u32> = map
        .labels()
        .iter()
        .map(|&l| class_of_label[l as usize])
        .collect();
    let c = concepts.vectors.len() as u32;
    SegmentationMap::new(
        map.height(),
        map.width(),
        labels,
        c,
        (0..c).collect(),
    )
}

pub(crate) fn nearest_euclidean(v: &[f64], candidates: &[Vec<f64>]) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let d: f64 = v
            .iter()
            .zip(c)
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// A dense H x W x d float32 embedding field, the boundary format for
/// externally produced pixel embeddings (open-vocabulary combiner).
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEmbeddingField {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

const EMBEDDING_FIELD_MAGIC: &[u8; 4] = b"EMBF";

impl ExternalEmbeddingField {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if height * width * dim == 0 {
            return Err(Error::EmptyInput("embedding field"));
        }
        if data.len() != height * width * dim {
            return Err(Error::InvalidConfig(format!(
                "embedding field has {} floats, expected {}",
                data.len(),
                height * width * dim
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    #[inline]
    pub fn vector(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    /// Binary layout: magic, then (H, W, d) as u32 little-endian, then
    /// H*W*d f32 little-endian values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(EMBEDDING_FIELD_MAGIC)?;
        for v in [self.height as u32, self.width as u32, self.dim as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
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
        if &magic != EMBEDDING_FIELD_MAGIC {
            return Err(bad("not an embedding field file"));
        }
        let mut u32buf = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            file.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
            *d = u32::from_le_bytes(u32buf) as usize;
        }
        let [height, width, dim] = dims;
        let mut data = vec![0f32; height * width * dim];
        for v in &mut data {
            file.read_exact(&mut u32buf).map_err(|_| bad("truncated data"))?;
            *v = f32::from_le_bytes(u32buf);
        }
        Self::new(height, width, dim, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(h: usize, w: usize, dim: usize, mut f: impl FnMut(usize, usize) -> Vec<f32>) -> FeatureMap {
        FeatureMap::from_fn(h, w, dim, &mut f).unwrap()
    }

    #[test]
    fn constant_field_any_mask_gives_constant() {
        let fm = features(3, 3, 2, |_, _| vec![0.7, -0.2]);
        let mask = BinaryMask::from_fn(3, 3, |y, x| (y + x) % 2 == 0);
        let e = mask_embedding(&fm, &mask).unwrap();
        assert!((e[0] - 0.7f32 as f64).abs() < 1e-12);
        assert!((e[1] + 0.2f32 as f64).abs() < 1e-12);
    }

    #[test]
    fn two_cell_mean() {
        let fm = features(1, 2, 2, |_, x| if x == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] });
        let mask = BinaryMask::from_fn(1, 2, |_, _| true);
        let e = mask_embedding(&fm, &mask).unwrap();
        assert_eq!(e, vec![0.5, 0.5]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let fm = features(2, 2, 1, |_, _| vec![1.0]);
        let mask = BinaryMask::new(2, 2);
        assert!(matches!(mask_embedding(&fm, &mask), Err(Error::EmptyMask)));
    }

    #[test]
    fn mean_matches_loop_oracle() {
        let mut state = 17u64;
        let fm = features(5, 4, 3, |_, _| {
            (0..3)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(11);
                    ((state >> 40) as f32) / ((1u64 << 24) as f32) - 0.5
                })
                .collect()
        });
        let mask = BinaryMask::from_fn(5, 4, |y, x| (y * x) % 3 != 1);
        let e = mask_embedding(&fm, &mask).unwrap();

        let mut sum = [0.0f64; 3];
        let mut n = 0usize;
        for y in 0..5 {
            for x in 0..4 {
                if mask.get(y, x) {
                    for c in 0..3 {
                        sum[c] += fm.vector(y, x)[c] as f64;
                    }
                    n += 1;
                }
            }
        }
        for c in 0..3 {
            assert!((e[c] - sum[c] / n as f64).abs() < 1e-7);
        }
    }

    fn uniform_field(h: usize, w: usize, vector: Vec<f64>) -> PixelEmbeddingField {
        let map = SegmentationMap::new(h, w, vec![0; h * w], 1, vec![0]).unwrap();
        PixelEmbeddingField::new(
            map,
            vec![MaskEmbedding {
                vector,
                mask_index: 0,
            }],
        )
        .unwrap()
    }

    #[test]
    fn single_concept_is_weighted_global_mean() {
        // 4 pixels at (0, 0), 12 pixels at (1, 1): mean = 0.75
        let a = uniform_field(2, 2, vec![0.0, 0.0]);
        let b = uniform_field(3, 4, vec![1.0, 1.0]);
        let concepts = concept_embeddings_unsupervised(&[a, b], 1, 0).unwrap();
        assert!((concepts.vectors[0][0] - 0.75).abs() < 1e-12);
        assert!((concepts.vectors[0][1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn two_uniform_images_recover_both_embeddings() {
        let a = uniform_field(2, 2, vec![0.0, 1.0]);
        let b = uniform_field(2, 2, vec![1.0, 0.0]);
        let concepts = concept_embeddings_unsupervised(&[a, b], 2, 5).unwrap();
        let mut got = concepts.vectors.clone();
        got.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(got, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn too_many_concepts_for_distinct_embeddings() {
        let a = uniform_field(2, 2, vec![0.5]);
        let b = uniform_field(2, 2, vec![0.5]);
        assert!(matches!(
            concept_embeddings_unsupervised(&[a, b], 2, 0),
            Err(Error::InvalidClusterCount { requested: 2, available: 1 })
        ));
    }

    #[test]
    fn modified_concepts_class_means() {
        // one image, two masks split left/right, gt classes split the same way
        let map = SegmentationMap::new(2, 2, vec![0, 1, 0, 1], 2, vec![0, 1]).unwrap();
        let field = PixelEmbeddingField::new(
            map,
            vec![
                MaskEmbedding {
                    vector: vec![2.0, 0.0],
                    mask_index: 0,
                },
                MaskEmbedding {
                    vector: vec![0.0, 4.0],
                    mask_index: 1,
                },
            ],
        )
        .unwrap();
        let gt = LabelGrid::new(2, 2, vec![0, 1, 0, 1], 2, None).unwrap();
        let (concepts, classes) = concept_embeddings_modified(&[field], &[gt]).unwrap();
        assert_eq!(concepts.vectors, vec![vec![2.0, 0.0], vec![0.0, 4.0]]);
        assert_eq!(classes, vec![Some(0), Some(1)]);
    }

    #[test]
    fn modified_concepts_match_accumulation_oracle() {
        let mut state = 23u64;
        let mut rand = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(13);
            ((state >> 40) as f64) / ((1u64 << 24) as f64)
        };
        let (h, w, k, classes, dim) = (6, 5, 4, 3, 2);
        let labels: Vec<u32> = (0..h * w).map(|_| (rand() * k as f64) as u32).collect();
        let map = SegmentationMap::new(h, w, labels.clone(), k, (0..k).collect()).unwrap();
        let embeddings: Vec<MaskEmbedding> = (0..k as usize)
            .map(|mask_index| MaskEmbedding {
                vector: (0..dim).map(|_| rand()).collect(),
                mask_index,
            })
            .collect();
        let field = PixelEmbeddingField::new(map, embeddings.clone()).unwrap();
        let gt_labels: Vec<u32> = (0..h * w).map(|_| (rand() * classes as f64) as u32).collect();
        let gt = LabelGrid::new(h, w, gt_labels.clone(), classes, None).unwrap();

        let (concepts, concept_classes) = concept_embeddings_modified(&[field], &[gt]).unwrap();

        // oracle: accumulate per class over raw pixels
        for (ci, class) in concept_classes.iter().enumerate() {
            let class = class.unwrap() as usize;
            let mut sum = vec![0.0f64; dim];
            let mut n = 0u64;
            for i in 0..h * w {
                if gt_labels[i] as usize == class {
                    for (s, &v) in sum.iter_mut().zip(&embeddings[labels[i] as usize].vector) {
                        *s += v;
                    }
                    n += 1;
                }
            }
            for c in 0..dim {
                assert!((concepts.vectors[ci][c] - sum[c] / n as f64).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn single_class_dataset_concept_is_global_mean() {
        let a = uniform_field(2, 2, vec![1.0, 3.0]);
        let b = uniform_field(2, 2, vec![3.0, 5.0]);
        let gt_a = LabelGrid::new(2, 2, vec![0; 4], 1, None).unwrap();
        let gt_b = LabelGrid::new(2, 2, vec![0; 4], 1, None).unwrap();
        let (concepts, classes) = concept_embeddings_modified(&[a, b], &[gt_a, gt_b]).unwrap();
        assert_eq!(classes, vec![Some(0)]);
        assert_eq!(concepts.vectors, vec![vec![2.0, 4.0]]);
    }

    #[test]
    fn classify_matches_exhaustive_distance_oracle() {
        let mut state = 41u64;
        let mut rand = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(17);
            ((state >> 40) as f64) / ((1u64 << 24) as f64) - 0.5
        };
        let k = 5usize;
        let map = SegmentationMap::new(1, k, (0..k as u32).collect(), k as u32, (0..k as u32).collect()).unwrap();
        let embeddings: Vec<MaskEmbedding> = (0..k)
            .map(|mask_index| MaskEmbedding {
                vector: (0..3).map(|_| rand()).collect(),
                mask_index,
            })
            .collect();
        let field = PixelEmbeddingField::new(map, embeddings.clone()).unwrap();
        let concepts = ConceptEmbeddings {
            vectors: (0..4).map(|_| (0..3).map(|_| rand()).collect()).collect(),
            source: ConceptSource::KmeansDataset,
        };
        let out = classify_pixels(&field, &concepts).unwrap();
        for (i, e) in embeddings.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, v) in concepts.vectors.iter().enumerate() {
                let d: f64 = e.vector.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assert_eq!(out.labels()[i], best as u32);
        }
    }

    #[test]
    fn classify_exact_and_tied() {
        let map = SegmentationMap::new(1, 2, vec![0, 1], 2, vec![0, 1]).unwrap();
        let field = PixelEmbeddingField::new(
            map,
            vec![
                MaskEmbedding {
                    vector: vec![0.0, 3.0],
                    mask_index: 0,
                },
                MaskEmbedding {
                    vector: vec![1.0, 1.0],
                    mask_index: 1,
                },
            ],
        )
        .unwrap();
        let concepts = ConceptEmbeddings {
            vectors: vec![vec![2.0, 1.0], vec![0.0, 1.0], vec![0.0, 3.0]],
            source: ConceptSource::KmeansDataset,
        };
        let out = classify_pixels(&field, &concepts).unwrap();
        // first pixel sits exactly on concept 2; second is equidistant from
        // concepts 0 and 1 -> lowest index wins
        assert_eq!(out.labels(), &[2, 0]);
    }

    #[test]
    fn classification_is_constant_within_masks() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        let map = SegmentationMap::new(2, 3, labels, 3, vec![0, 1, 2]).unwrap();
        let field = PixelEmbeddingField::new(
            map,
            (0..3)
                .map(|i| MaskEmbedding {
                    vector: vec![i as f64, 1.0 - i as f64],
                    mask_index: i,
                })
                .collect(),
        )
        .unwrap();
        let concepts = ConceptEmbeddings {
            vectors: vec![vec![0.0, 1.0], vec![2.0, -1.0]],
            source: ConceptSource::KmeansDataset,
        };
        let out = classify_pixels(&field, &concepts).unwrap();
        for (i, &l) in field.map().labels().iter().enumerate() {
            let first = field
                .map()
                .labels()
                .iter()
                .position(|&x| x == l)
                .unwrap();
            assert_eq!(out.labels()[i], out.labels()[first]);
        }
    }

    #[test]
    fn classification_invariant_under_signed_permutation() {
        // signed permutations are exactly orthogonal in floating point
        let map = SegmentationMap::new(1, 3, vec![0, 1, 2], 3, vec![0, 1, 2]).unwrap();
        let vecs = [vec![0.3, -0.8, 0.1], vec![1.2, 0.4, -0.5], vec![-0.7, 0.0, 0.9]];
        let field = PixelEmbeddingField::new(
            map.clone(),
            vecs.iter()
                .enumerate()
                .map(|(i, v)| MaskEmbedding {
                    vector: v.clone(),
                    mask_index: i,
                })
                .collect(),
        )
        .unwrap();
        let concepts = ConceptEmbeddings {
            vectors: vec![vec![0.3, -0.8, 0.2], vec![1.0, 0.5, -0.5]],
            source: ConceptSource::KmeansDataset,
        };
        let base = classify_pixels(&field, &concepts).unwrap();

        // transform: (x, y, z) -> (-z, x, -y)
        let t = |v: &[f64]| vec![-v[2], v[0], -v[1]];
        let field_t = PixelEmbeddingField::new(
            map,
            vecs.iter()
                .enumerate()
                .map(|(i, v)| MaskEmbedding {
                    vector: t(v),
                    mask_index: i,
                })
                .collect(),
        )
        .unwrap();
        let concepts_t = ConceptEmbeddings {
            vectors: concepts.vectors.iter().map(|v| t(v)).collect(),
            source: ConceptSource::KmeansDataset,
        };
        let after = classify_pixels(&field_t, &concepts_t).unwrap();
        assert_eq!(base.labels(), after.labels());
    }

    #[test]
    fn external_field_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.embf");
        let field = ExternalEmbeddingField::new(
            3,
            2,
            4,
            (0..24).map(|i| i as f32 * 0.5 - 3.0).collect(),
        )
        .unwrap();
        field.save(&path).unwrap();
        assert_eq!(ExternalEmbeddingField::load(&path).unwrap(), field);
    }
}
