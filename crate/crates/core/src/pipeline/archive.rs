//! Run archive: self-describing, deterministic on-disk layout of a run.
//!
//! ```text
//! <archive>/
//!   config.toml
//!   timing.json              (wall-clock; excluded from determinism)
//!   images/<image id>/
//!     meta.json              sizes, hashes, snap metadata, inertia
//!     lowres.json            packed masks + centroids
//!     labels.png             final label field, one label per gray level
//!     labels.json            provenance sidecar
//!     embeddings.bin         mask embeddings as float32
//!   metrics_<protocol>.json  (written by evaluate)
//!   report_<protocol>.txt
//! ```
//!
//! Re-running with an identical config reproduces every file byte-for-byte
//! on the synthetic backend, except `timing.json`.

use crate::backend::synthetic::SyntheticScene;
use crate::backend::DenoiseInfo;
use crate::correspondence::{DifferenceMap, SegmentationMap};
use crate::embeddings::MaskEmbedding;
use crate::error::{Error, Result};
use crate::lowres::LowResSegmentation;
use crate::mask::BinaryMask;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// One segmented image with everything evaluation and rendering need.
#[derive(Debug, Clone)]
pub struct ArchiveEntry {
    pub image_id: String,
    pub input_path: String,
    pub original_height: usize,
    pub original_width: usize,
    pub working_height: usize,
    pub working_width: usize,
    pub image_content_hash: String,
    pub config_hash: String,
    pub denoise: DenoiseInfo,
    pub inertia: f64,
    pub lowres: LowResSegmentation,
    pub final_map: SegmentationMap,
    pub mask_embeddings: Vec<MaskEmbedding>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn scene_content_hash(scene: &SyntheticScene) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(scene)?)[..16].to_string())
}

/// Stable image id: file stem plus a content-hash prefix.
pub fn image_id(input_path: &str, content_hash: &str) -> String {
    let stem = Path::new(input_path)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    format!("{stem}_{}", &content_hash[..8.min(content_hash.len())])
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    image_id: String,
    input_path: String,
    original_height: usize,
    original_width: usize,
    working_height: usize,
    working_width: usize,
    image_content_hash: String,
    config_hash: String,
    denoise: DenoiseInfo,
    inertia: f64,
}

#[derive(Serialize, Deserialize)]
struct LowresFile {
    grid_height: usize,
    grid_width: usize,
    mask_count: usize,
    /// Row-major bitfields, hex encoded, most significant bit first.
    masks: Vec<String>,
    centroids: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct LabelsFile {
    height: usize,
    width: usize,
    num_labels: u32,
    /// label -> low-resolution mask index
    provenance: Vec<u32>,
    config_hash: String,
}

fn to_hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn from_hex(text: &str) -> Result<Vec<u8>> {
    if text.len() % 2 != 0 {
        return Err(Error::InvalidConfig("odd-length hex string".into()));
    }
    (0..text.len() / 2)
        .map(|i| {
            u8::from_str_radix(&text[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::InvalidConfig("bad hex digit".into()))
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    fs::write(path, buf)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn entry_dir(archive_dir: &Path, image_id: &str) -> PathBuf {
    archive_dir.join("images").join(image_id)
}

pub fn write_entry(archive_dir: &Path, entry: &ArchiveEntry) -> Result<()> {
    let dir = entry_dir(archive_dir, &entry.image_id);
    fs::create_dir_all(&dir)?;

    write_json(
        &dir.join("meta.json"),
        &MetaFile {
            image_id: entry.image_id.clone(),
            input_path: entry.input_path.clone(),
            original_height: entry.original_height,
            original_width: entry.original_width,
            working_height: entry.working_height,
            working_width: entry.working_width,
            image_content_hash: entry.image_content_hash.clone(),
            config_hash: entry.config_hash.clone(),
            denoise: entry.denoise.clone(),
            inertia: entry.inertia,
        },
    )?;

    write_json(
        &dir.join("lowres.json"),
        &LowresFile {
            grid_height: entry.lowres.grid_height(),
            grid_width: entry.lowres.grid_width(),
            mask_count: entry.lowres.num_masks(),
            masks: entry.lowres.masks().iter().map(|m| to_hex(&m.pack())).collect(),
            centroids: entry.lowres.centroids().to_vec(),
        },
    )?;

    // final label field as an indexed-style gray PNG plus sidecar
    let map = &entry.final_map;
    let mut img = image::GrayImage::new(map.width() as u32, map.height() as u32);
    for y in 0..map.height() {
        for x in 0..map.width() {
            img.put_pixel(x as u32, y as u32, image::Luma([map.label(y, x) as u8]));
        }
    }
    img.save(dir.join("labels.png"))?;
    write_json(
        &dir.join("labels.json"),
        &LabelsFile {
            height: map.height(),
            width: map.width(),
            num_labels: map.num_labels(),
            provenance: map.provenance().to_vec(),
            config_hash: entry.config_hash.clone(),
        },
    )?;

    // mask embeddings as float32: u32 count, u32 dim, then count*dim f32le
    let mut out = std::io::BufWriter::new(fs::File::create(dir.join("embeddings.bin"))?);
    let dim = entry.mask_embeddings.first().map_or(0, |e| e.vector.len());
    out.write_all(&(entry.mask_embeddings.len() as u32).to_le_bytes())?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    for e in &entry.mask_embeddings {
        for v in &e.vector {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_entry(archive_dir: &Path, image_id: &str) -> Result<ArchiveEntry> {
    let dir = entry_dir(archive_dir, image_id);
    let meta: MetaFile = read_json(&dir.join("meta.json"))?;
    let lowres_file: LowresFile = read_json(&dir.join("lowres.json"))?;
    let labels_file: LabelsFile = read_json(&dir.join("labels.json"))?;

    let masks: Vec<BinaryMask> = lowres_file
        .masks
        .iter()
        .map(|h| BinaryMask::unpack(lowres_file.grid_height, lowres_file.grid_width, &from_hex(h)?))
        .collect::<Result<_>>()?;
    let lowres = LowResSegmentation::from_masks(masks, lowres_file.centroids, meta.inertia)?;

    let img = image::open(dir.join("labels.png"))?.to_luma8();
    if (img.height() as usize, img.width() as usize) != (labels_file.height, labels_file.width) {
        return Err(Error::FileFormat {
            path: dir.join("labels.png").display().to_string(),
            message: "label image size disagrees with sidecar".into(),
        });
    }
    let labels: Vec<u32> = img.pixels().map(|p| p[0] as u32).collect();
    let final_map = SegmentationMap::new(
        labels_file.height,
        labels_file.width,
        labels,
        labels_file.num_labels,
        labels_file.provenance,
    )?;

    let mut file = std::io::BufReader::new(fs::File::open(dir.join("embeddings.bin"))?);
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    file.read_exact(&mut u32buf)?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let mut mask_embeddings = Vec::with_capacity(count);
    for mask_index in 0..count {
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            file.read_exact(&mut u32buf)?;
            vector.push(f32::from_le_bytes(u32buf) as f64);
        }
        mask_embeddings.push(MaskEmbedding { vector, mask_index });
    }

    Ok(ArchiveEntry {
        image_id: meta.image_id,
        input_path: meta.input_path,
        original_height: meta.original_height,
        original_width: meta.original_width,
        working_height: meta.working_height,
        working_width: meta.working_width,
        image_content_hash: meta.image_content_hash,
        config_hash: meta.config_hash,
        denoise: meta.denoise,
        inertia: meta.inertia,
        lowres,
        final_map,
        mask_embeddings,
    })
}

/// Image ids present in an archive, sorted for deterministic iteration.
pub fn list_entries(archive_dir: &Path) -> Result<Vec<String>> {
    let images = archive_dir.join("images");
    let mut ids = Vec::new();
    if images.is_dir() {
        for entry in fs::read_dir(images)? {
            let entry = entry?;
            if entry.path().is_dir() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn read_all_entries(archive_dir: &Path) -> Result<Vec<ArchiveEntry>> {
    list_entries(archive_dir)?
        .iter()
        .map(|id| read_entry(archive_dir, id))
        .collect()
}

/// Difference-map cache, keyed by image content hash, config hash and mask
/// index. Modulated denoising dominates runtime, so this is the cache unit.
pub struct CacheDir {
    root: PathBuf,
}

/// Environment variable naming the cache directory.
pub const CACHE_ENV_VAR: &str = "MODSEG_CACHE_DIR";

impl CacheDir {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    /// Cache directory from the environment, if configured.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(CACHE_ENV_VAR).map(|v| Self::new(PathBuf::from(v)))
    }

    fn map_path(&self, image_hash: &str, config_hash: &str, mask_index: usize) -> PathBuf {
        self.root
            .join(image_hash)
            .join(config_hash)
            .join(format!("mask_{mask_index:04}.dmap"))
    }

    /// Binary layout: u32 height, u32 width, then height*width f32le.
    pub fn store(
        &self,
        image_hash: &str,
        config_hash: &str,
        mask_index: usize,
        map: &DifferenceMap,
    ) -> Result<()> {
        let path = self.map_path(image_hash, config_hash, mask_index);
        fs::create_dir_all(path.parent().unwrap())?;
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        out.write_all(&(map.height() as u32).to_le_bytes())?;
        out.write_all(&(map.width() as u32).to_le_bytes())?;
        for v in map.values() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(&self, image_hash: &str, config_hash: &str, mask_index: usize) -> Option<DifferenceMap> {
        let path = self.map_path(image_hash, config_hash, mask_index);
        let mut file = std::io::BufReader::new(fs::File::open(path).ok()?);
        let mut u32buf = [0u8; 4];
        file.read_exact(&mut u32buf).ok()?;
        let height = u32::from_le_bytes(u32buf) as usize;
        file.read_exact(&mut u32buf).ok()?;
        let width = u32::from_le_bytes(u32buf) as usize;
        let mut values = vec![0f32; height * width];
        for v in &mut values {
            file.read_exact(&mut u32buf).ok()?;
            *v = f32::from_le_bytes(u32buf);
        }
        DifferenceMap::new(height, width, values).ok()
    }
}

#[derive(Serialize, Deserialize)]
pub struct TimingFile {
    pub total_ms: u128,
    pub per_image_ms: Vec<(String, u128)>,
}

/// Wall-clock record; the one archive file excluded from byte determinism.
pub fn write_timing(archive_dir: &Path, timing: &TimingFile) -> Result<()> {
    write_json(&archive_dir.join("timing.json"), timing)
}

pub fn write_config(archive_dir: &Path, config_toml: &str) -> Result<()> {
    fs::create_dir_all(archive_dir)?;
    fs::write(archive_dir.join("config.toml"), config_toml)?;
    Ok(())
}

pub fn write_report(archive_dir: &Path, report: &super::ProtocolReport) -> Result<()> {
    fs::create_dir_all(archive_dir)?;
    write_json(
        &archive_dir.join(format!("metrics_{}.json", report.protocol)),
        report,
    )?;
    fs::write(
        archive_dir.join(format!("report_{}.txt", report.protocol)),
        report.to_text(),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_round_trip() {
        let bytes = vec![0x00, 0xff, 0x1a, 0x80];
        assert_eq!(from_hex(&to_hex(&bytes)).unwrap(), bytes);
    }

    #[test]
    fn sha256_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn image_id_uses_stem_and_hash() {
        assert_eq!(image_id("/tmp/scenes/foo.json", "0123456789abcdef"), "foo_01234567");
    }
}
