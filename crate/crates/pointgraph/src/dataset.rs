//! Dataset loading: a directory tree of OFF meshes (`root/<class>/{train,test}/*.off`)
//! is sampled into labeled, normalized point clouds, with a per-class slice of
//! the training files carved off for validation.
//!
//! Sampling is seeded per file from the master seed and the file's relative
//! path, so any subset of the tree loads identically. Results are cached under
//! `root/.pgcache` in a binary format that reloads bit-identically; to that
//! end all coordinates are quantized through f32 as the final build step.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::mesh;

const CACHE_MAGIC: &[u8; 4] = b"PGDS";
const CACHE_VERSION: u32 = 1;
const CACHE_DIR: &str = ".pgcache";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("no class directories under {0}")]
    NoClasses(PathBuf),
    #[error("no .off files under {0}")]
    NoFiles(PathBuf),
    #[error("{skipped} of {total} files failed to load, above the 1% tolerance")]
    TooManySkipped { skipped: usize, total: usize },
    #[error("validation fraction must be in [0, 1), got {0}")]
    BadFraction(f64),
    #[error("corrupt dataset cache: {0}")]
    CacheFormat(String),
}

fn io_err(path: &Path, source: io::Error) -> DatasetError {
    DatasetError::Io { path: path.to_path_buf(), source }
}

/// The three standard splits plus the class-name table; a cloud's label
/// indexes `class_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PointCloud>,
    pub validation: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for SplitKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitKind::Train),
            "validation" | "val" => Ok(SplitKind::Validation),
            "test" => Ok(SplitKind::Test),
            other => Err(format!("unknown split {other:?}, expected train|validation|test")),
        }
    }
}

impl DatasetSplit {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, which: SplitKind) -> &[PointCloud] {
        match which {
            SplitKind::Train => &self.train,
            SplitKind::Validation => &self.validation,
            SplitKind::Test => &self.test,
        }
    }
}

/// FNV-1a, used to derive stable per-item seeds from path-like strings.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Round every coordinate through f32. Keeps in-memory data identical to what
/// a cache round trip produces.
pub(crate) fn quantize_f32(points: &mut Array2<f64>) {
    for x in points.iter_mut() {
        *x = *x as f32 as f64;
    }
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct CacheMeta {
    version: u32,
    n_points: usize,
    val_fraction: f64,
    seed: u64,
}

/// Load (or build and cache) the dataset under `root`.
///
/// Layout: `root/<class>/train/*.off` and `root/<class>/test/*.off`. Classes
/// are labeled in lexicographic order. `val_fraction` of each class's
/// training files (rounded down) moves to the validation split. Files that
/// fail to parse or sample are skipped with a warning; more than 1% skipped
/// aborts the load.
pub fn load_dataset(
    root: &Path,
    n_points: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(DatasetError::BadFraction(val_fraction));
    }
    let meta = CacheMeta { version: CACHE_VERSION, n_points, val_fraction, seed };
    let cache_dir = root.join(CACHE_DIR);
    if let Some(split) = try_read_cache(&cache_dir, &meta) {
        return Ok(split);
    }
    let split = build_from_source(root, n_points, val_fraction, seed)?;
    if let Err(err) = write_cache(&cache_dir, &meta, &split) {
        eprintln!("warning: could not write dataset cache under {}: {err}", cache_dir.display());
    }
    Ok(split)
}

fn sorted_subdirs(root: &Path) -> Result<Vec<String>, DatasetError> {
    let mut names = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| io_err(root, e))? {
        let entry = entry.map_err(|e| io_err(root, e))?;
        let path = entry.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if path.is_dir() && !name.starts_with('.') {
            names.push(name.to_string());
        }
    }
    names.sort();
    Ok(names)
}

fn sorted_off_files(dir: &Path) -> Result<Vec<String>, DatasetError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if path.is_file() && name.to_ascii_lowercase().ends_with(".off") {
            names.push(name.to_string());
        }
    }
    names.sort();
    Ok(names)
}

fn load_one(
    path: &Path,
    rel_path: &str,
    n_points: usize,
    label: usize,
    master_seed: u64,
) -> Result<PointCloud, String> {
    let bytes = fs::read(path).map_err(|e| e.to_string())?;
    let mesh = mesh::parse_off(&bytes).map_err(|e| e.to_string())?;
    let file_seed = master_seed ^ fnv1a64(rel_path.as_bytes());
    let mut cloud = mesh::sample_surface(&mesh, n_points, file_seed).map_err(|e| e.to_string())?;
    cloud.label = Some(label);
    cloud.normalize().map_err(|e| e.to_string())?;
    quantize_f32(&mut cloud.points);
    Ok(cloud)
}

fn build_from_source(
    root: &Path,
    n_points: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    let class_names = sorted_subdirs(root)?;
    if class_names.is_empty() {
        return Err(DatasetError::NoClasses(root.to_path_buf()));
    }

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        class_names: class_names.clone(),
    };
    let mut total = 0usize;
    let mut skipped = 0usize;

    for (label, class) in class_names.iter().enumerate() {
        let train_files = sorted_off_files(&root.join(class).join("train"))?;
        let test_files = sorted_off_files(&root.join(class).join("test"))?;

        // Membership in the validation carve is decided on the file list, so
        // cloud contents never depend on the fraction chosen.
        let n_val = (train_files.len() as f64 * val_fraction + 1e-9).floor() as usize;
        let mut order: Vec<usize> = (0..train_files.len()).collect();
        let mut carve_rng =
            ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(format!("val-carve/{class}").as_bytes()));
        order.shuffle(&mut carve_rng);
        let mut is_val = vec![false; train_files.len()];
        for &idx in order.iter().take(n_val) {
            is_val[idx] = true;
        }

        for (sub, files, val_mask) in [
            ("train", &train_files, Some(&is_val)),
            ("test", &test_files, None),
        ] {
            for (idx, name) in files.iter().enumerate() {
                total += 1;
                let rel = format!("{class}/{sub}/{name}");
                let path = root.join(class).join(sub).join(name);
                match load_one(&path, &rel, n_points, label, seed) {
                    Ok(cloud) => match val_mask {
                        Some(mask) if mask[idx] => split.validation.push(cloud),
                        Some(_) => split.train.push(cloud),
                        None => split.test.push(cloud),
                    },
                    Err(msg) => {
                        skipped += 1;
                        eprintln!("warning: skipping {}: {msg}", path.display());
                    }
                }
            }
        }
    }

    if total == 0 {
        return Err(DatasetError::NoFiles(root.to_path_buf()));
    }
    if skipped as f64 > 0.01 * total as f64 {
        return Err(DatasetError::TooManySkipped { skipped, total });
    }
    Ok(split)
}

fn try_read_cache(cache_dir: &Path, want: &CacheMeta) -> Option<DatasetSplit> {
    let meta_path = cache_dir.join("meta.json");
    let data_path = cache_dir.join("data.bin");
    let meta_text = fs::read_to_string(&meta_path).ok()?;
    let found: CacheMeta = match serde_json::from_str(&meta_text) {
        Ok(m) => m,
        Err(err) => {
            eprintln!("warning: ignoring unreadable cache meta {}: {err}", meta_path.display());
            return None;
        }
    };
    if found != *want {
        return None;
    }
    let bytes = fs::read(&data_path).ok()?;
    match decode_cache(&bytes) {
        Ok(split) => Some(split),
        Err(err) => {
            eprintln!("warning: rebuilding corrupt cache {}: {err}", data_path.display());
            None
        }
    }
}

fn write_cache(cache_dir: &Path, meta: &CacheMeta, split: &DatasetSplit) -> io::Result<()> {
    fs::create_dir_all(cache_dir)?;
    let mut data = Vec::new();
    encode_cache(&mut data, split)?;
    fs::write(cache_dir.join("data.bin"), data)?;
    let meta_json = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(cache_dir.join("meta.json"), meta_json)?;
    Ok(())
}

fn encode_cache<W: Write>(out: &mut W, split: &DatasetSplit) -> io::Result<()> {
    out.write_all(CACHE_MAGIC)?;
    out.write_u32::<LittleEndian>(CACHE_VERSION)?;
    out.write_u32::<LittleEndian>(split.class_names.len() as u32)?;
    for name in &split.class_names {
        out.write_u32::<LittleEndian>(name.len() as u32)?;
        out.write_all(name.as_bytes())?;
    }
    for clouds in [&split.train, &split.validation, &split.test] {
        out.write_u32::<LittleEndian>(clouds.len() as u32)?;
        for cloud in clouds.iter() {
            let label = cloud.label.ok_or_else(|| {
                io::Error::new(io::ErrorKind::InvalidInput, "cache requires labeled clouds")
            })?;
            out.write_u32::<LittleEndian>(label as u32)?;
            out.write_u32::<LittleEndian>(cloud.n_points() as u32)?;
            let d_extra = cloud.extra_features.as_ref().map_or(0, |f| f.ncols());
            out.write_u32::<LittleEndian>(d_extra as u32)?;
            for &x in cloud.points.iter() {
                out.write_f64::<LittleEndian>(x)?;
            }
            if let Some(extra) = &cloud.extra_features {
                for &x in extra.iter() {
                    out.write_f64::<LittleEndian>(x)?;
                }
            }
        }
    }
    Ok(())
}

fn decode_cache(bytes: &[u8]) -> Result<DatasetSplit, DatasetError> {
    let bad = |msg: &str| DatasetError::CacheFormat(msg.to_string());
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != CACHE_MAGIC {
        return Err(bad("wrong magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated version"))?;
    if version != CACHE_VERSION {
        return Err(DatasetError::CacheFormat(format!("unsupported version {version}")));
    }
    let n_classes = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated class count"))? as usize;
    if n_classes == 0 || n_classes > 1 << 20 {
        return Err(bad("implausible class count"));
    }
    let mut class_names = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let len = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated name length"))? as usize;
        if len > 1 << 16 {
            return Err(bad("implausible class name length"));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(|_| bad("truncated class name"))?;
        class_names.push(String::from_utf8(buf).map_err(|_| bad("class name not UTF-8"))?);
    }

    let mut splits: Vec<Vec<PointCloud>> = Vec::with_capacity(3);
    for _ in 0..3 {
        let n_clouds = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated cloud count"))? as usize;
        if n_clouds > 1 << 24 {
            return Err(bad("implausible cloud count"));
        }
        let mut clouds = Vec::with_capacity(n_clouds);
        for _ in 0..n_clouds {
            let label = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated label"))? as usize;
            if label >= n_classes {
                return Err(bad("label out of range"));
            }
            let n = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated point count"))? as usize;
            let d_extra =
                r.read_u32::<LittleEndian>().map_err(|_| bad("truncated feature width"))? as usize;
            if n > 1 << 24 || d_extra > 1 << 16 {
                return Err(bad("implausible cloud shape"));
            }
            let mut points = Array2::zeros((n, 3));
            for x in points.iter_mut() {
                *x = r.read_f64::<LittleEndian>().map_err(|_| bad("truncated points"))?;
            }
            let extra = if d_extra > 0 {
                let mut m = Array2::zeros((n, d_extra));
                for x in m.iter_mut() {
                    *x = r.read_f64::<LittleEndian>().map_err(|_| bad("truncated features"))?;
                }
                Some(m)
            } else {
                None
            };
            clouds.push(PointCloud::new(points, extra, Some(label)));
        }
        splits.push(clouds);
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let test = splits.pop().expect("three splits");
    let validation = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(DatasetSplit { train, validation, test, class_names })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    /// Irregular tetrahedron, scaled so different files are distinguishable.
    fn tetra_off(scale: f64) -> String {
        format!(
            "OFF\n4 4 0\n0 0 0\n{s} 0 0\n0 {s} 0\n0 0 {s}\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n",
            s = scale
        )
    }

    fn write_tree(root: &Path, classes: &[(&str, usize, usize)]) {
        for (class, n_train, n_test) in classes {
            for (sub, count) in [("train", n_train), ("test", n_test)] {
                let dir = root.join(class).join(sub);
                fs::create_dir_all(&dir).unwrap();
                for i in 0..*count {
                    let scale = 1.0 + i as f64 * 0.25;
                    fs::write(dir.join(format!("{class}_{i:04}.off")), tetra_off(scale)).unwrap();
                }
            }
        }
    }

    #[test]
    fn loads_classes_in_sorted_order_with_val_carve() {
        let tmp = TempDir::new().unwrap();
        write_tree(tmp.path(), &[("zebra", 3, 1), ("apple", 3, 2)]);
        let split = load_dataset(tmp.path(), 16, 0.34, 7).unwrap();
        assert_eq!(split.class_names, vec!["apple", "zebra"]);
        // floor(3 * 0.34) = 1 validation file per class.
        assert_eq!(split.train.len(), 4);
        assert_eq!(split.validation.len(), 2);
        assert_eq!(split.test.len(), 3);
        let apple_tests = split.test.iter().filter(|c| c.label == Some(0)).count();
        assert_eq!(apple_tests, 2);
        for cloud in split.train.iter().chain(&split.validation).chain(&split.test) {
            assert_eq!(cloud.n_points(), 16);
            // Normalized then quantized: max norm within f32 rounding of 1.
            let max_norm = cloud
                .points
                .rows()
                .into_iter()
                .map(|r| r.dot(&r).sqrt())
                .fold(0.0f64, f64::max);
            assert!((max_norm - 1.0).abs() < 1e-6, "max norm {max_norm}");
            for &x in cloud.points.iter() {
                assert_eq!(x, x as f32 as f64);
            }
        }
    }

    #[test]
    fn cache_round_trip_is_bit_identical_and_survives_source_loss() {
        let tmp = TempDir::new().unwrap();
        write_tree(tmp.path(), &[("box", 2, 1)]);
        let first = load_dataset(tmp.path(), 8, 0.0, 11).unwrap();
        assert!(tmp.path().join(CACHE_DIR).join("data.bin").is_file());

        // Remove the meshes; a second load must come from the cache.
        fs::remove_dir_all(tmp.path().join("box").join("train")).unwrap();
        let second = load_dataset(tmp.path(), 8, 0.0, 11).unwrap();
        assert_eq!(first, second);

        // A different seed misses the cache and now fails on the gutted tree.
        assert!(load_dataset(tmp.path(), 8, 0.0, 12).is_err() || {
            // Only the train dir was removed; test remains, so the load can
            // legitimately succeed with an empty train split.
            let third = load_dataset(tmp.path(), 8, 0.0, 12).unwrap();
            third.train.is_empty()
        });
    }

    #[test]
    fn per_file_seeds_differ_and_master_seed_changes_everything() {
        let tmp = TempDir::new().unwrap();
        write_tree(tmp.path(), &[("one", 2, 0) ]);
        let split = build_from_source(tmp.path(), 8, 0.0, 5).unwrap();
        assert_ne!(split.train[0].points, split.train[1].points);
        let reseeded = build_from_source(tmp.path(), 8, 0.0, 6).unwrap();
        assert_ne!(split.train[0].points, reseeded.train[0].points);
        let same = build_from_source(tmp.path(), 8, 0.0, 5).unwrap();
        assert_eq!(split, same);
    }

    #[test]
    fn skips_bad_files_within_tolerance() {
        let tmp = TempDir::new().unwrap();
        let dir = tmp.path().join("c").join("train");
        fs::create_dir_all(&dir).unwrap();
        for i in 0..100 {
            fs::write(dir.join(format!("g{i:04}.off")), tetra_off(1.0 + i as f64 * 0.01)).unwrap();
        }
        fs::write(dir.join("bad.off"), "not a mesh").unwrap();
        fs::create_dir_all(tmp.path().join("c").join("test")).unwrap();
        fs::write(tmp.path().join("c").join("test").join("t.off"), tetra_off(2.0)).unwrap();

        // 1 of 102 files bad: 0.98% stays under the 1% tolerance.
        let split = build_from_source(tmp.path(), 8, 0.0, 1).unwrap();
        assert_eq!(split.train.len(), 100);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn too_many_bad_files_abort() {
        let tmp = TempDir::new().unwrap();
        write_tree(tmp.path(), &[("c", 3, 1)]);
        fs::write(tmp.path().join("c").join("train").join("bad.off"), "garbage").unwrap();
        match build_from_source(tmp.path(), 8, 0.0, 1) {
            Err(DatasetError::TooManySkipped { skipped: 1, total: 5 }) => {}
            other => panic!("expected TooManySkipped, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_fraction_and_empty_roots() {
        let tmp = TempDir::new().unwrap();
        assert!(matches!(
            load_dataset(tmp.path(), 8, 1.0, 0),
            Err(DatasetError::BadFraction(_))
        ));
        assert!(matches!(
            load_dataset(tmp.path(), 8, 0.1, 0),
            Err(DatasetError::NoClasses(_))
        ));
        fs::create_dir_all(tmp.path().join("empty").join("train")).unwrap();
        assert!(matches!(
            load_dataset(tmp.path(), 8, 0.1, 0),
            Err(DatasetError::NoFiles(_))
        ));
    }

    #[test]
    fn cache_decode_rejects_corruption() {
        let tmp = TempDir::new().unwrap();
        write_tree(tmp.path(), &[("c", 1, 1)]);
        let first = load_dataset(tmp.path(), 8, 0.0, 3).unwrap();
        let data_path = tmp.path().join(CACHE_DIR).join("data.bin");
        let mut bytes = fs::read(&data_path).unwrap();
        bytes[0] = b'X';
        fs::write(&data_path, &bytes).unwrap();
        // Falls back to a source rebuild and matches the original.
        let second = load_dataset(tmp.path(), 8, 0.0, 3).unwrap();
        assert_eq!(first, second);
    }
}
