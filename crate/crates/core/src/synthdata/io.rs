//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json            classes, config, seed, split names
//! <dir>/<split>/manifest.json    role, class ids, image size, seed, image count
//! <dir>/<split>/rasters.bin      per image: u32 c, u32 h, u32 w, then c·h·w f32 (all LE)
//! <dir>/<split>/annotations.json [{image_id, annotations: [{category_id, bbox, ...}]}]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::catalog::ClassSpec;
use super::dataset::{Benchmark, BenchmarkConfig, DatasetSplit, SceneImage, SplitRole};
use super::render::{Raster, SceneInstance};
use super::SynthError;

#[derive(Serialize, Deserialize)]
struct SplitManifest {
    role: SplitRole,
    class_ids: Vec<usize>,
    image_size: usize,
    seed: u64,
    num_images: usize,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    category_id: usize,
    bbox: [f64; 4],
    rotation: f64,
    intensity: f64,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    image_id: usize,
    annotations: Vec<AnnotationRecord>,
}

#[derive(Serialize, Deserialize)]
struct BenchmarkManifest {
    format: String,
    version: u32,
    seed: u64,
    config: BenchmarkConfig,
    classes: Vec<ClassSpec>,
    splits: Vec<String>,
    fingerprint: String,
}

pub fn save_split(split: &DatasetSplit, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    let manifest = SplitManifest {
        role: split.role,
        class_ids: split.class_ids.clone(),
        image_size: split.image_size,
        seed: split.seed,
        num_images: split.images.len(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let mut blob = std::io::BufWriter::new(std::fs::File::create(dir.join("rasters.bin"))?);
    for img in &split.images {
        let r = &img.raster;
        for d in [r.channels, r.height, r.width] {
            blob.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &r.data {
            blob.write_all(&v.to_le_bytes())?;
        }
    }
    blob.flush()?;
    let records: Vec<ImageRecord> = split
        .images
        .iter()
        .map(|img| ImageRecord {
            image_id: img.image_id,
            annotations: img
                .instances
                .iter()
                .map(|i| AnnotationRecord {
                    category_id: i.class_id,
                    bbox: i.bbox,
                    rotation: i.rotation,
                    intensity: i.intensity,
                })
                .collect(),
        })
        .collect();
    std::fs::write(dir.join("annotations.json"), serde_json::to_string(&records)?)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_split(dir: &Path) -> Result<DatasetSplit, SynthError> {
    let manifest: SplitManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let records: Vec<ImageRecord> = serde_json::from_str(&std::fs::read_to_string(dir.join("annotations.json"))?)?;
    if records.len() != manifest.num_images {
        return Err(SynthError::Corrupt(format!(
            "{}: {} annotation records for {} images",
            dir.display(),
            records.len(),
            manifest.num_images
        )));
    }
    let mut blob = std::io::BufReader::new(std::fs::File::open(dir.join("rasters.bin"))?);
    let mut images = Vec::with_capacity(records.len());
    for rec in records {
        let (c, h, w) = (read_u32(&mut blob)? as usize, read_u32(&mut blob)? as usize, read_u32(&mut blob)? as usize);
        let mut bytes = vec![0u8; c * h * w * 4];
        blob.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        images.push(SceneImage {
            image_id: rec.image_id,
            raster: Raster {
                channels: c,
                height: h,
                width: w,
                data,
            },
            instances: rec
                .annotations
                .into_iter()
                .map(|a| SceneInstance {
                    class_id: a.category_id,
                    bbox: a.bbox,
                    rotation: a.rotation,
                    intensity: a.intensity,
                })
                .collect(),
        });
    }
    Ok(DatasetSplit {
        role: manifest.role,
        class_ids: manifest.class_ids,
        image_size: manifest.image_size,
        seed: manifest.seed,
        images,
    })
}

const SPLITS: [&str; 3] = ["base", "novel_pool", "test"];

pub fn save_benchmark(b: &Benchmark, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir)?;
    for (name, split) in SPLITS.iter().zip([&b.base, &b.novel_pool, &b.test]) {
        save_split(split, &dir.join(name))?;
    }
    let manifest = BenchmarkManifest {
        format: "fsod-dataset".into(),
        version: 1,
        seed: b.seed,
        config: b.config.clone(),
        classes: b.classes.clone(),
        splits: SPLITS.iter().map(|s| s.to_string()).collect(),
        fingerprint: b.fingerprint(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_benchmark(dir: &Path) -> Result<Benchmark, SynthError> {
    let manifest: BenchmarkManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let b = Benchmark {
        config: manifest.config,
        seed: manifest.seed,
        classes: manifest.classes,
        base: load_split(&dir.join("base"))?,
        novel_pool: load_split(&dir.join("novel_pool"))?,
        test: load_split(&dir.join("test"))?,
    };
    if b.fingerprint() != manifest.fingerprint {
        return Err(SynthError::Corrupt(format!("{}: fingerprint mismatch", dir.display())));
    }
    Ok(b)
}
