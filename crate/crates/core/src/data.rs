//! Synthetic labelled datasets and seeded sub-streams.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cloud::{gen_shape, CloudError, PointCloud, ShapeKind, ShapeSpec};
use crate::geometry::{fps, Point3};

/// Named sources of randomness. Every random draw in a run comes from the
/// run seed mixed with one of these tags and a position, so components can
/// be replayed independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    Noise = 4,
    Split = 5,
    Probe = 6,
}

/// Seed of sub-stream `stream` at position `(a, b)`, mixed with SplitMix64
/// finalizers so neighbouring positions are decorrelated.
pub fn substream(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut z = mix(seed);
    for v in [stream as u64, a, b] {
        z = mix(z ^ v);
    }
    z
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kinds: Vec<ShapeKind>,
    pub per_kind: usize,
    pub n_points: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Apply a uniformly random rotation to every cloud.
    #[serde(default)]
    pub random_rotation: bool,
    /// Scale each axis by a factor drawn from `[1 - s, 1 + s]` before the
    /// rotation.
    #[serde(default)]
    pub scale_jitter: f64,
}

impl DatasetSpec {
    /// Sphere, cube and torus in equal numbers.
    pub fn shape_mix(per_kind: usize, n_points: usize, seed: u64) -> Self {
        DatasetSpec {
            kinds: vec![ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Torus],
            per_kind,
            n_points,
            noise_std: 0.0,
            seed,
            random_rotation: false,
            scale_jitter: 0.0,
        }
    }

    /// Barbells only; every point carries a part label (bar or one of the
    /// two weights).
    pub fn barbell_parts(count: usize, n_points: usize, seed: u64) -> Self {
        DatasetSpec {
            kinds: vec![ShapeKind::Barbell],
            per_kind: count,
            n_points,
            noise_std: 0.0,
            seed,
            random_rotation: false,
            scale_jitter: 0.0,
        }
    }

    /// Random pose, anisotropic scale and coordinate noise on top of the
    /// canonical shapes.
    pub fn posed(self, scale_jitter: f64, noise_std: f64) -> Self {
        DatasetSpec {
            random_rotation: true,
            scale_jitter,
            noise_std,
            ..self
        }
    }

    pub fn len(&self) -> usize {
        self.kinds.len() * self.per_kind
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Clouds with a class label each. Class `c` is `class_names[c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }
}

/// Generates the clouds kind by kind. Each cloud's seed depends only on the
/// dataset seed, its kind's position and its index within the kind.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset, CloudError> {
    let mut clouds = Vec::with_capacity(spec.len());
    let mut labels = Vec::with_capacity(spec.len());
    for (c, &kind) in spec.kinds.iter().enumerate() {
        for i in 0..spec.per_kind {
            let cloud = gen_shape(&ShapeSpec {
                kind,
                n_points: spec.n_points,
                seed: substream(spec.seed, Stream::Data, c as u64, i as u64),
                noise_std: spec.noise_std,
            })?;
            let cloud = if spec.random_rotation || spec.scale_jitter > 0.0 {
                let seed = substream(spec.seed, Stream::Data, c as u64, (i as u64) | 1 << 63);
                transform(&cloud, &random_linear_map(spec, seed))?
            } else {
                cloud
            };
            clouds.push(cloud.with_id(format!("{}-{i:04}", kind.name())));
            labels.push(c);
        }
    }
    Ok(Dataset {
        clouds,
        labels,
        class_names: spec.kinds.iter().map(|k| k.name().to_string()).collect(),
    })
}

fn random_linear_map(spec: &DatasetSpec, seed: u64) -> Matrix3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.scale_jitter;
    let scale = Matrix3::from_diagonal(&Vector3::from_fn(|_, _| {
        if s > 0.0 {
            rng.gen_range(1.0 - s..=1.0 + s)
        } else {
            1.0
        }
    }));
    let rotation = if spec.random_rotation {
        // normalized Gaussian quaternions are uniform on SO(3)
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().into_inner()
    } else {
        Matrix3::identity()
    };
    rotation * scale
}

/// Applies `a` to the points and the inverse transpose to the normals, then
/// rescales the farthest point onto the unit sphere.
fn transform(cloud: &PointCloud, a: &Matrix3<f64>) -> Result<PointCloud, CloudError> {
    let apply = |m: &Matrix3<f64>, p: &Point3| {
        let v = m * Vector3::new(p[0], p[1], p[2]);
        [v.x, v.y, v.z]
    };
    let mut points: Vec<Point3> = cloud.points().iter().map(|p| apply(a, p)).collect();
    let r = points.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
    if r > 0.0 {
        points.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v /= r));
    }
    let mut out = cloud.with_points(points)?;
    if let Some(normals) = cloud.normals() {
        let inv_t = a.try_inverse().ok_or_else(|| CloudError::InvalidSpec("singular pose".into()))?.transpose();
        out = out.with_normals(normals.iter().map(|n| apply(&inv_t, n)).collect())?;
    }
    Ok(out)
}

/// Brings a cloud to exactly `n` points: farthest point sampling when it is
/// larger, cyclic repetition when it is smaller.
pub fn resample(cloud: &PointCloud, n: usize) -> Result<PointCloud, CloudError> {
    if n == 0 {
        return Err(CloudError::EmptyCloud);
    }
    match cloud.len().cmp(&n) {
        std::cmp::Ordering::Equal => Ok(cloud.clone()),
        std::cmp::Ordering::Greater => {
            let idx = fps(cloud.points(), n)?;
            cloud.select(&idx)
        }
        std::cmp::Ordering::Less => {
            let idx: Vec<usize> = (0..n).map(|i| i % cloud.len()).collect();
            cloud.select(&idx)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_labelled() {
        let spec = DatasetSpec::shape_mix(4, 32, 9);
        let a = build_dataset(&spec).unwrap();
        let b = build_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert_eq!(a.labels, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        assert_eq!(a.class_names, vec!["sphere", "cube", "torus"]);
        assert!(a.clouds.iter().all(|c| c.len() == 32 && c.normals().is_some()));
        assert_ne!(a.clouds[0].points(), a.clouds[1].points());
    }

    #[test]
    fn posed_clouds_keep_unit_radius_and_surface_normals() {
        let plain = build_dataset(&DatasetSpec::shape_mix(3, 64, 2)).unwrap();
        let posed = build_dataset(&DatasetSpec::shape_mix(3, 64, 2).posed(0.3, 0.0)).unwrap();
        for (a, b) in plain.clouds.iter().zip(&posed.clouds) {
            assert_ne!(a.points(), b.points());
            let r = b.points().iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
            assert!((r - 1.0).abs() < 1e-12);
            assert!(b.normals().unwrap().iter().all(|n| ((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-9));
            assert_eq!(a.part_labels(), b.part_labels());
        }
        // a sphere's normals stay radial under a pure rotation
        let rotated = build_dataset(&DatasetSpec {
            random_rotation: true,
            ..DatasetSpec::shape_mix(1, 64, 2)
        })
        .unwrap();
        let s = &rotated.clouds[0];
        for (p, n) in s.points().iter().zip(s.normals().unwrap()) {
            let d = p[0] * n[0] + p[1] * n[1] + p[2] * n[2];
            assert!((d.abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn substreams_differ() {
        let s: Vec<u64> = [Stream::Data, Stream::Init, Stream::Noise]
            .into_iter()
            .flat_map(|st| (0..3).map(move |i| substream(1, st, i, 0)))
            .collect();
        let mut uniq = s.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), s.len());
        assert_eq!(substream(1, Stream::Data, 2, 3), substream(1, Stream::Data, 2, 3));
    }

    #[test]
    fn resample_sizes() {
        let c = build_dataset(&DatasetSpec::barbell_parts(1, 40, 0)).unwrap().clouds.remove(0);
        let down = resample(&c, 16).unwrap();
        assert_eq!(down.len(), 16);
        assert_eq!(down.part_labels().unwrap().len(), 16);
        let up = resample(&c, 50).unwrap();
        assert_eq!(up.len(), 50);
        assert_eq!(up.points()[40], c.points()[0]);
    }
}
