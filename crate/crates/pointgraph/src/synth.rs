//! Synthetic 3-class shape dataset (cube, sphere, torus surfaces) for fast
//! end-to-end runs without any mesh corpus on disk.
//!
//! Every cloud is generated from its own seed derived from the master seed,
//! class name and index, then randomly rotated, normalized and quantized like
//! disk-loaded data. Split assignment is positional (test first, then
//! validation, then train), so changing the fractions never changes any
//! cloud's contents.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::dataset::{fnv1a64, quantize_f32, DatasetSplit};

const CLASS_NAMES: [&str; 3] = ["cube", "sphere", "torus"];
const TORUS_MAJOR: f64 = 1.0;
const TORUS_MINOR: f64 = 0.4;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least {needed} points per cloud, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("need at least 1 cloud per class, got 0")]
    NoClouds,
    #[error("test and validation fractions must be nonnegative and sum below 1, got {test} and {val}")]
    BadFractions { test: f64, val: f64 },
}

/// Generation parameters for [`generate_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub clouds_per_class: usize,
    pub n_points: usize,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    /// Rotate each cloud by its own uniform random rotation. Off, all clouds
    /// stay axis-aligned and the task is much easier.
    pub rotations: bool,
}

fn gaussian3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

/// Uniform rotation from a random unit quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let (mut q, mut norm2) = ([0.0f64; 4], 0.0);
    while norm2 < 1e-12 {
        for slot in &mut q {
            *slot = rng.sample(StandardNormal);
        }
        norm2 = q.iter().map(|x| x * x).sum();
    }
    let norm = norm2.sqrt();
    let [w, x, y, z] = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn sphere_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let g = gaussian3(rng);
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if norm > 1e-9 {
            return [g[0] / norm, g[1] / norm, g[2] / norm];
        }
    }
}

/// Uniform on the surface of the cube [-1, 1]^3 (faces have equal area).
fn cube_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let face = rng.gen_range(0..6u8);
    let a = rng.gen_range(-1.0..1.0);
    let b = rng.gen_range(-1.0..1.0);
    let fixed = if face % 2 == 0 { 1.0 } else { -1.0 };
    match face / 2 {
        0 => [fixed, a, b],
        1 => [a, fixed, b],
        _ => [a, b, fixed],
    }
}

/// Uniform on a torus surface by rejection on the tube angle: density over
/// the tube angle is proportional to the local radius.
fn torus_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let tau = std::f64::consts::TAU;
    let theta = loop {
        let candidate = rng.gen_range(0.0..tau);
        let accept = (TORUS_MAJOR + TORUS_MINOR * candidate.cos()) / (TORUS_MAJOR + TORUS_MINOR);
        if rng.gen::<f64>() < accept {
            break candidate;
        }
    };
    let phi = rng.gen_range(0.0..tau);
    let ring = TORUS_MAJOR + TORUS_MINOR * theta.cos();
    [ring * phi.cos(), ring * phi.sin(), TORUS_MINOR * theta.sin()]
}

fn generate_cloud(class: usize, index: usize, spec: &SyntheticSpec) -> PointCloud {
    let name = CLASS_NAMES[class];
    let seed = spec.seed ^ fnv1a64(format!("{name}/{index}").as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Always drawn so the per-cloud point stream is identical either way.
    let drawn = random_rotation(&mut rng);
    let rot = if spec.rotations { drawn } else { [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };
    let mut points = Array2::zeros((spec.n_points, 3));
    for i in 0..spec.n_points {
        let p = match class {
            0 => cube_point(&mut rng),
            1 => sphere_point(&mut rng),
            _ => torus_point(&mut rng),
        };
        for r in 0..3 {
            points[[i, r]] = rot[r][0] * p[0] + rot[r][1] * p[1] + rot[r][2] * p[2];
        }
    }
    let mut cloud = PointCloud::new(points, None, Some(class));
    cloud.normalize().expect("shape surfaces are never degenerate");
    quantize_f32(&mut cloud.points);
    cloud
}

/// Generate the three-shape dataset. Per class, the first
/// `floor(clouds_per_class * test_fraction)` clouds go to test, the next
/// `floor(clouds_per_class * val_fraction)` to validation, the rest to train.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetSplit, SynthError> {
    if spec.n_points < 2 {
        return Err(SynthError::TooFewPoints { needed: 2, got: spec.n_points });
    }
    if spec.clouds_per_class == 0 {
        return Err(SynthError::NoClouds);
    }
    if spec.test_fraction < 0.0
        || spec.val_fraction < 0.0
        || spec.test_fraction + spec.val_fraction >= 1.0
    {
        return Err(SynthError::BadFractions { test: spec.test_fraction, val: spec.val_fraction });
    }

    let per_class = spec.clouds_per_class;
    let n_test = (per_class as f64 * spec.test_fraction + 1e-9).floor() as usize;
    let n_val = (per_class as f64 * spec.val_fraction + 1e-9).floor() as usize;

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    for class in 0..CLASS_NAMES.len() {
        for index in 0..per_class {
            let cloud = generate_cloud(class, index, spec);
            if index < n_test {
                split.test.push(cloud);
            } else if index < n_test + n_val {
                split.validation.push(cloud);
            } else {
                split.train.push(cloud);
            }
        }
    }
    Ok(split)
}
