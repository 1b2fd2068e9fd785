use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::catalog::{class_catalog, ClassSpec};
use super::render::{render_image, Raster, SceneInstance};
use super::SynthError;
use crate::seeds::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SplitRole {
    Base,
    NovelSupport,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneImage {
    pub image_id: usize,
    pub raster: Raster,
    pub instances: Vec<SceneInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub class_ids: Vec<usize>,
    pub image_size: usize,
    pub seed: u64,
    pub images: Vec<SceneImage>,
}

impl DatasetSplit {
    pub fn num_instances(&self) -> usize {
        self.images.iter().map(|i| i.instances.len()).sum()
    }

    /// Annotated instance count per class id (zero entries included).
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts: BTreeMap<usize, usize> = self.class_ids.iter().map(|c| (*c, 0)).collect();
        for img in &self.images {
            for inst in &img.instances {
                *counts.entry(inst.class_id).or_default() += 1;
            }
        }
        counts
    }

    /// SHA-256 over raster bits and annotations.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}{:?}{}", self.role, self.class_ids, self.image_size));
        for img in &self.images {
            h.update((img.image_id as u64).to_le_bytes());
            for v in &img.raster.data {
                h.update(v.to_bits().to_le_bytes());
            }
            for inst in &img.instances {
                h.update((inst.class_id as u64).to_le_bytes());
                for b in inst.bbox {
                    h.update(b.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub num_base_classes: usize,
    pub num_novel_classes: usize,
    pub base_images: usize,
    pub novel_pool_images: usize,
    pub test_images: usize,
    pub image_size: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            num_base_classes: 8,
            num_novel_classes: 4,
            base_images: 600,
            novel_pool_images: 200,
            test_images: 200,
            image_size: 32,
        }
    }
}

/// Base, novel-pool and test splits over disjoint class sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    pub base: DatasetSplit,
    pub novel_pool: DatasetSplit,
    pub test: DatasetSplit,
}

impl Benchmark {
    pub fn base_class_ids(&self) -> &[usize] {
        &self.base.class_ids
    }

    pub fn novel_class_ids(&self) -> &[usize] {
        &self.test.class_ids
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in [&self.base, &self.novel_pool, &self.test] {
            h.update(s.fingerprint());
        }
        hex::encode(h.finalize())
    }
}

const MAX_INSTANCES: usize = 4;
const MIN_SIDE_FRAC: f64 = 0.25;
const MAX_SIDE_FRAC: f64 = 0.44;
const MAX_ROTATION: f64 = 0.25;
const PLACEMENT_ATTEMPTS: usize = 200;

/// Samples the instance layout of one image. Boxes are pixel-aligned and
/// separated by at least one pixel, so pairwise IoU is zero.
pub fn sample_layout(class_ids: &[usize], image_size: usize, rng: &mut impl Rng) -> Vec<SceneInstance> {
    let n = image_size as f64;
    let count = rng.gen_range(1..=MAX_INSTANCES);
    let min_px = ((MIN_SIDE_FRAC * n).round() as usize).max(4);
    let max_px = ((MAX_SIDE_FRAC * n).round() as usize).max(min_px);
    let mut placed: Vec<[usize; 4]> = Vec::new();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.gen_range(min_px..=max_px);
            let h = rng.gen_range(min_px..=max_px);
            let x0 = rng.gen_range(0..=image_size - w);
            let y0 = rng.gen_range(0..=image_size - h);
            let cand = [x0, y0, x0 + w, y0 + h];
            let clear = placed
                .iter()
                .all(|p| cand[2] < p[0] || p[2] < cand[0] || cand[3] < p[1] || p[3] < cand[1]);
            if !clear {
                continue;
            }
            placed.push(cand);
            out.push(SceneInstance {
                class_id: class_ids[rng.gen_range(0..class_ids.len())],
                bbox: [
                    (x0 as f64 + w as f64 / 2.0) / n,
                    (y0 as f64 + h as f64 / 2.0) / n,
                    w as f64 / n,
                    h as f64 / n,
                ],
                rotation: rng.gen_range(-MAX_ROTATION..=MAX_ROTATION),
                intensity: rng.gen_range(0.7..=1.0),
            });
            break;
        }
    }
    out
}

pub fn generate_split(
    role: SplitRole,
    class_ids: &[usize],
    classes: &[ClassSpec],
    num_images: usize,
    image_size: usize,
    seed: u64,
    first_image_id: usize,
) -> Result<DatasetSplit, SynthError> {
    if class_ids.is_empty() {
        return Err(SynthError::InvalidInstance("split has no classes".into()));
    }
    let images = (0..num_images)
        .map(|i| {
            let image_seed = derive_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(image_seed);
            let instances = sample_layout(class_ids, image_size, &mut rng);
            let raster = render_image(&instances, classes, image_size, derive_seed(image_seed, 0x5eed))?;
            Ok(SceneImage {
                image_id: first_image_id + i,
                raster,
                instances,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(DatasetSplit {
        role,
        class_ids: class_ids.to_vec(),
        image_size,
        seed,
        images,
    })
}

/// Generates a benchmark: base classes take the first ids, novel classes the
/// next ones, so the two sets never intersect.
pub fn gen_dataset(cfg: &BenchmarkConfig, seed: u64) -> Result<Benchmark, SynthError> {
    if cfg.num_base_classes == 0 || cfg.num_novel_classes == 0 {
        return Err(SynthError::InvalidInstance("class counts must be positive".into()));
    }
    if cfg.image_size < 16 {
        return Err(SynthError::InvalidInstance("image_size must be at least 16".into()));
    }
    let total = cfg.num_base_classes + cfg.num_novel_classes;
    let classes = class_catalog(total)?;
    let base_ids: Vec<usize> = (0..cfg.num_base_classes).collect();
    let novel_ids: Vec<usize> = (cfg.num_base_classes..total).collect();
    let base = generate_split(SplitRole::Base, &base_ids, &classes, cfg.base_images, cfg.image_size, derive_seed(seed, 1), 0)?;
    let novel_pool = generate_split(
        SplitRole::NovelSupport,
        &novel_ids,
        &classes,
        cfg.novel_pool_images,
        cfg.image_size,
        derive_seed(seed, 2),
        cfg.base_images,
    )?;
    let test = generate_split(
        SplitRole::Test,
        &novel_ids,
        &classes,
        cfg.test_images,
        cfg.image_size,
        derive_seed(seed, 3),
        cfg.base_images + cfg.novel_pool_images,
    )?;
    Ok(Benchmark {
        config: cfg.clone(),
        seed,
        classes,
        base,
        novel_pool,
        test,
    })
}

/// Exactly `k` annotated instances per novel class drawn from a pool.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    pub k: usize,
    pub seed: u64,
    pub split: DatasetSplit,
    /// `(image_id, instance index in the pool image)` of every kept annotation.
    pub instance_refs: Vec<(usize, usize)>,
}

impl SupportSet {
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k as u64).to_le_bytes());
        for (img, idx) in &self.instance_refs {
            h.update((*img as u64).to_le_bytes());
            h.update((*idx as u64).to_le_bytes());
        }
        h.update(self.split.fingerprint());
        hex::encode(h.finalize())
    }
}

/// Balanced K-shot sampling. Whole images whose instances fit the remaining
/// quotas are taken first (in seeded random order); any quota still open is
/// then filled from partially annotated images.
pub fn sample_kshot(pool: &DatasetSplit, k: usize, seed: u64) -> Result<SupportSet, SynthError> {
    if k == 0 {
        return Err(SynthError::InvalidShots(k));
    }
    for (class, count) in pool.class_counts() {
        if count < k {
            return Err(SynthError::InsufficientInstances {
                class_id: class,
                available: count,
                requested: k,
            });
        }
    }
    let mut order: Vec<usize> = (0..pool.images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut remaining: BTreeMap<usize, usize> = pool.class_ids.iter().map(|c| (*c, k)).collect();
    let mut chosen: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let open = |r: &BTreeMap<usize, usize>| r.values().any(|v| *v > 0);

    for &i in &order {
        if !open(&remaining) {
            break;
        }
        let img = &pool.images[i];
        let mut need: BTreeMap<usize, usize> = BTreeMap::new();
        for inst in &img.instances {
            *need.entry(inst.class_id).or_default() += 1;
        }
        if need.iter().all(|(c, n)| remaining.get(c).is_some_and(|r| r >= n)) {
            for (c, n) in need {
                *remaining.get_mut(&c).unwrap() -= n;
            }
            chosen.insert(i, (0..img.instances.len()).collect());
        }
    }
    for &i in &order {
        if !open(&remaining) {
            break;
        }
        if chosen.contains_key(&i) {
            continue;
        }
        let mut keep = Vec::new();
        for (j, inst) in pool.images[i].instances.iter().enumerate() {
            if let Some(r) = remaining.get_mut(&inst.class_id) {
                if *r > 0 {
                    *r -= 1;
                    keep.push(j);
                }
            }
        }
        if !keep.is_empty() {
            chosen.insert(i, keep);
        }
    }
    if let Some((c, _)) = remaining.iter().find(|(_, r)| **r > 0) {
        return Err(SynthError::InsufficientInstances {
            class_id: *c,
            available: k - remaining[c],
            requested: k,
        });
    }

    let mut images = Vec::with_capacity(chosen.len());
    let mut refs = Vec::new();
    for (i, keep) in chosen {
        let src = &pool.images[i];
        for &j in &keep {
            refs.push((src.image_id, j));
        }
        images.push(SceneImage {
            image_id: src.image_id,
            raster: src.raster.clone(),
            instances: keep.iter().map(|&j| src.instances[j].clone()).collect(),
        });
    }
    Ok(SupportSet {
        k,
        seed,
        split: DatasetSplit {
            role: SplitRole::NovelSupport,
            class_ids: pool.class_ids.clone(),
            image_size: pool.image_size,
            seed,
            images,
        },
        instance_refs: refs,
    })
}

/// Classes present in any split of the benchmark.
pub fn used_classes(b: &Benchmark) -> BTreeSet<usize> {
    b.base.class_ids.iter().chain(&b.test.class_ids).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::iou;

    fn small() -> BenchmarkConfig {
        BenchmarkConfig {
            base_images: 40,
            novel_pool_images: 150,
            test_images: 20,
            ..BenchmarkConfig::default()
        }
    }

    #[test]
    fn class_sets_are_disjoint() {
        let b = gen_dataset(&small(), 3).unwrap();
        assert_eq!(b.base_class_ids(), &(0..8).collect::<Vec<_>>()[..]);
        assert_eq!(b.novel_class_ids(), &(8..12).collect::<Vec<_>>()[..]);
        for img in &b.base.images {
            assert!(img.instances.iter().all(|i| i.class_id < 8));
        }
        for img in b.novel_pool.images.iter().chain(&b.test.images) {
            assert!(img.instances.iter().all(|i| (8..12).contains(&i.class_id)));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_dataset(&small(), 11).unwrap();
        let b = gen_dataset(&small(), 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = gen_dataset(&small(), 12).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn instance_counts_cover_one_to_four_without_overlap() {
        let classes = class_catalog(4).unwrap();
        let split = generate_split(SplitRole::Base, &[0, 1, 2, 3], &classes, 500, 32, 77, 0).unwrap();
        let mut hist = [0usize; 5];
        for img in &split.images {
            let n = img.instances.len();
            assert!((1..=4).contains(&n));
            hist[n] += 1;
            for (i, a) in img.instances.iter().enumerate() {
                for b in &img.instances[i + 1..] {
                    assert!(iou(a.bbox, b.bbox) < 0.1);
                }
            }
        }
        assert!(hist[1..].iter().all(|c| *c > 0), "{hist:?}");
    }

    #[test]
    fn too_many_classes_is_an_error() {
        let cfg = BenchmarkConfig {
            num_base_classes: 140,
            num_novel_classes: 10,
            ..small()
        };
        assert!(matches!(gen_dataset(&cfg, 0), Err(SynthError::InsufficientClasses { .. })));
    }

    #[test]
    fn kshot_quota_is_exact() {
        let b = gen_dataset(&small(), 5).unwrap();
        for k in [1, 2, 3, 5, 10, 30] {
            let s = sample_kshot(&b.novel_pool, k, 9).unwrap();
            // Independent recount straight from the kept references.
            let mut counts = BTreeMap::new();
            for (img_id, j) in &s.instance_refs {
                let img = b.novel_pool.images.iter().find(|i| i.image_id == *img_id).unwrap();
                *counts.entry(img.instances[*j].class_id).or_insert(0) += 1;
            }
            assert_eq!(counts.len(), 4);
            assert!(counts.values().all(|c| *c == k), "k={k}: {counts:?}");
            assert_eq!(s.split.num_instances(), 4 * k);
            assert_eq!(s.split.class_counts().values().copied().collect::<Vec<_>>(), vec![k; 4]);
        }
        let s = sample_kshot(&b.novel_pool, 1, 9).unwrap();
        assert_eq!(s.split.num_instances(), 4);
        assert_eq!(s, sample_kshot(&b.novel_pool, 1, 9).unwrap());
    }

    #[test]
    fn kshot_boundaries() {
        let b = gen_dataset(&small(), 5).unwrap();
        assert!(matches!(sample_kshot(&b.novel_pool, 0, 1), Err(SynthError::InvalidShots(0))));
        match sample_kshot(&b.novel_pool, 10_000, 1) {
            Err(SynthError::InsufficientInstances { class_id, .. }) => assert!((8..12).contains(&class_id)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
