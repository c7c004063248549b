//! Point-cloud data model, ASCII file formats, synthetic shapes and PCA
//! normal estimation.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{centroid, knn, GeometryError, Point3};

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("point cloud has no points")]
    EmptyCloud,
    #[error("invalid point cloud: {0}")]
    Invalid(String),
    #[error("invalid shape spec: {0}")]
    InvalidSpec(String),
    #[error("need more than {k} points, got {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CloudError> = std::result::Result<T, E>;

/// Points with optional unit normals and per-point part labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    normals: Option<Vec<Point3>>,
    part_labels: Option<Vec<u32>>,
    pub id: String,
}

fn unit(v: Point3) -> Option<Point3> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 0.0 && n.is_finite()).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(CloudError::EmptyCloud);
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CloudError::Invalid("non-finite coordinate".into()));
        }
        Ok(PointCloud {
            points,
            normals: None,
            part_labels: None,
            id: String::new(),
        })
    }

    /// Attaches normals, renormalizing any whose length is off by more than
    /// the 1e-9 that nine-digit file precision can introduce.
    pub fn with_normals(mut self, normals: Vec<Point3>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(CloudError::Invalid(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        let normals = normals
            .into_iter()
            .map(|n| {
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if (len - 1.0).abs() <= 1e-8 {
                    return Ok(n);
                }
                unit(n).ok_or_else(|| CloudError::Invalid("zero or non-finite normal".into()))
            })
            .collect::<Result<_>>()?;
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn with_part_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(CloudError::Invalid(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.part_labels = Some(labels);
        Ok(self)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Point3]> {
        self.normals.as_deref()
    }

    pub fn part_labels(&self) -> Option<&[u32]> {
        self.part_labels.as_deref()
    }

    /// Subset of the cloud (points, normals and labels) in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<PointCloud> {
        let mut c = PointCloud::new(idx.iter().map(|&i| self.points[i]).collect())?;
        c.normals = self.normals.as_ref().map(|n| idx.iter().map(|&i| n[i]).collect());
        c.part_labels = self.part_labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        c.id = self.id.clone();
        Ok(c)
    }

    /// Same cloud with the points replaced (normals and labels kept).
    pub fn with_points(&self, points: Vec<Point3>) -> Result<PointCloud> {
        if points.len() != self.points.len() {
            return Err(CloudError::Invalid("point count changed".into()));
        }
        let mut c = PointCloud::new(points)?;
        c.normals = self.normals.clone();
        c.part_labels = self.part_labels.clone();
        c.id = self.id.clone();
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CloudFormat {
    Xyz,
    Off,
    PlyAscii,
}

impl FromStr for CloudFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "xyz" => Ok(CloudFormat::Xyz),
            "off" => Ok(CloudFormat::Off),
            "ply" | "ply_ascii" => Ok(CloudFormat::PlyAscii),
            other => Err(format!("unknown cloud format `{other}`")),
        }
    }
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Option<CloudFormat> {
        path.extension()?.to_str()?.parse().ok()
    }

    pub fn extension(self) -> &'static str {
        match self {
            CloudFormat::Xyz => "xyz",
            CloudFormat::Off => "off",
            CloudFormat::PlyAscii => "ply",
        }
    }
}

fn parse_floats(line: &str, lineno: usize, want: &[usize]) -> Result<Vec<f64>> {
    let vals = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|e| CloudError::Parse {
                line: lineno,
                msg: format!("`{t}`: {e}"),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    if !want.contains(&vals.len()) {
        return Err(CloudError::Parse {
            line: lineno,
            msg: format!("expected {want:?} columns, found {}", vals.len()),
        });
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(CloudError::Parse {
            line: lineno,
            msg: "non-finite value".into(),
        });
    }
    Ok(vals)
}

fn build(points: Vec<Point3>, normals: Vec<Point3>, labels: Vec<u32>, line: usize) -> Result<PointCloud> {
    let n = points.len();
    if n == 0 {
        return Err(CloudError::EmptyCloud);
    }
    let mut c = PointCloud::new(points)?;
    if !normals.is_empty() {
        c = c.with_normals(normals).map_err(|e| CloudError::Parse {
            line,
            msg: e.to_string(),
        })?;
    }
    if !labels.is_empty() {
        c = c.with_part_labels(labels)?;
    }
    Ok(c)
}

/// Lines with their 1-based numbers, skipping blanks and `#` comments.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut columns = None;
    let mut last = 0;
    for (lineno, line) in content_lines(text) {
        let want: &[usize] = match columns {
            None => &[3, 6],
            Some(3) => &[3],
            Some(_) => &[6],
        };
        let v = parse_floats(line, lineno, want)?;
        columns = Some(v.len());
        points.push([v[0], v[1], v[2]]);
        if v.len() == 6 {
            normals.push([v[3], v[4], v[5]]);
        }
        last = lineno;
    }
    build(points, normals, Vec::new(), last)
}

fn parse_off(text: &str) -> Result<PointCloud> {
    let mut lines = content_lines(text);
    let (hline, header) = lines.next().ok_or(CloudError::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let mut tokens = header.split_whitespace();
    let with_normals = match tokens.next() {
        Some("OFF") => false,
        Some("NOFF") => true,
        _ => {
            return Err(CloudError::Parse {
                line: hline,
                msg: "missing OFF header".into(),
            })
        }
    };
    // counts may share the header line
    let rest: Vec<&str> = tokens.collect();
    let (cline, counts) = if rest.is_empty() {
        lines.next().ok_or(CloudError::Parse {
            line: hline + 1,
            msg: "missing vertex/face counts".into(),
        })?
    } else {
        (hline, &header[header.find(rest[0]).unwrap_or(0)..])
    };
    let nv = counts
        .split_whitespace()
        .next()
        .and_then(|t| t.parse::<usize>().ok())
        .ok_or(CloudError::Parse {
            line: cline,
            msg: "bad vertex count".into(),
        })?;
    let width = if with_normals { 6 } else { 3 };
    let mut points = Vec::with_capacity(nv);
    let mut normals = Vec::new();
    let mut last = cline;
    for _ in 0..nv {
        let (lineno, line) = lines.next().ok_or(CloudError::Parse {
            line: last + 1,
            msg: format!("expected {nv} vertices, found {}", points.len()),
        })?;
        let v = parse_floats(line, lineno, &[width])?;
        points.push([v[0], v[1], v[2]]);
        if with_normals {
            normals.push([v[3], v[4], v[5]]);
        }
        last = lineno;
    }
    build(points, normals, Vec::new(), last)
}

fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => {
            return Err(CloudError::Parse {
                line: 1,
                msg: "missing `ply` magic".into(),
            })
        }
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut header_end = 0;
    for (lineno, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(CloudError::Parse {
                        line: lineno,
                        msg: format!("unsupported PLY format `{fmt}`"),
                    });
                }
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(count.parse::<usize>().map_err(|e| CloudError::Parse {
                        line: lineno,
                        msg: e.to_string(),
                    })?);
                } else if vertex_count.is_none() {
                    return Err(CloudError::Parse {
                        line: lineno,
                        msg: "vertex element must come first".into(),
                    });
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(CloudError::Parse {
                    line: lineno,
                    msg: "list properties on vertices are not supported".into(),
                })
            }
            ["property", _ty, name] => {
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            ["property", ..] => {}
            ["end_header"] => {
                header_end = lineno;
                break;
            }
            _ => {
                return Err(CloudError::Parse {
                    line: lineno,
                    msg: format!("unexpected header line `{line}`"),
                })
            }
        }
    }
    if header_end == 0 {
        return Err(CloudError::Parse {
            line: text.lines().count().max(1),
            msg: "missing end_header".into(),
        });
    }
    let n = vertex_count.ok_or(CloudError::Parse {
        line: header_end,
        msg: "no vertex element".into(),
    })?;
    let pos = |name: &str| props.iter().position(|p| p == name);
    let (xi, yi, zi) = match (pos("x"), pos("y"), pos("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => {
            return Err(CloudError::Parse {
                line: header_end,
                msg: "vertex needs x, y, z properties".into(),
            })
        }
    };
    let normal_idx = match (pos("nx"), pos("ny"), pos("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let label_idx = pos("label");
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::new();
    let mut labels = Vec::new();
    let mut last = header_end;
    for _ in 0..n {
        let (lineno, line) = lines.next().ok_or(CloudError::Parse {
            line: last + 1,
            msg: format!("expected {n} vertices, found {}", points.len()),
        })?;
        let v = parse_floats(line, lineno, &[props.len()])?;
        points.push([v[xi], v[yi], v[zi]]);
        if let Some((a, b, c)) = normal_idx {
            normals.push([v[a], v[b], v[c]]);
        }
        if let Some(l) = label_idx {
            if v[l] < 0.0 || v[l].fract() != 0.0 {
                return Err(CloudError::Parse {
                    line: lineno,
                    msg: "label must be a non-negative integer".into(),
                });
            }
            labels.push(v[l] as u32);
        }
        last = lineno;
    }
    build(points, normals, labels, last)
}

pub fn parse_cloud(text: &str, fmt: CloudFormat) -> Result<PointCloud> {
    match fmt {
        CloudFormat::Xyz => parse_xyz(text),
        CloudFormat::Off => parse_off(text),
        CloudFormat::PlyAscii => parse_ply(text),
    }
}

pub fn load_cloud(path: &Path, fmt: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CloudError::FileNotFound(path.to_path_buf()),
        _ => CloudError::Io(e),
    })?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    Ok(parse_cloud(&text, fmt)?.with_id(id))
}

/// Nine significant digits.
fn num(out: &mut String, v: f64) {
    // normalise negative zero so rewrites are byte-stable
    let v = if v == 0.0 { 0.0 } else { v };
    write!(out, "{v:.8e}").unwrap();
}

fn record(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        num(out, v);
    }
}

pub fn format_cloud(cloud: &PointCloud, fmt: CloudFormat) -> String {
    let mut out = String::new();
    let n = cloud.len();
    let has_normals = cloud.normals.is_some();
    match fmt {
        CloudFormat::Xyz => {}
        CloudFormat::Off => {
            out.push_str(if has_normals { "NOFF\n" } else { "OFF\n" });
            writeln!(out, "{n} 0 0").unwrap();
        }
        CloudFormat::PlyAscii => {
            out.push_str("ply\nformat ascii 1.0\n");
            writeln!(out, "element vertex {n}").unwrap();
            out.push_str("property double x\nproperty double y\nproperty double z\n");
            if has_normals {
                out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
            }
            if cloud.part_labels.is_some() {
                out.push_str("property int label\n");
            }
            out.push_str("end_header\n");
        }
    }
    for i in 0..n {
        let p = cloud.points[i];
        let mut vals = p.to_vec();
        if let Some(ns) = &cloud.normals {
            vals.extend_from_slice(&ns[i]);
        }
        record(&mut out, vals);
        if fmt == CloudFormat::PlyAscii {
            if let Some(l) = &cloud.part_labels {
                write!(out, " {}", l[i]).unwrap();
            }
        }
        out.push('\n');
    }
    out
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, fmt: CloudFormat) -> Result<()> {
    fs::write(path, format_cloud(cloud, fmt))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    Barbell,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::Cylinder,
        ShapeKind::Barbell,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Barbell => "barbell",
        }
    }

    /// Number of distinct part labels the generator assigns.
    pub fn part_count(self) -> u32 {
        match self {
            ShapeKind::Sphere | ShapeKind::Torus | ShapeKind::Cylinder => 2,
            ShapeKind::Cube => 6,
            ShapeKind::Barbell => 3,
        }
    }
}

impl FromStr for ShapeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown shape kind `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub n_points: usize,
    pub seed: u64,
    pub noise_std: f64,
}

pub const MIN_SHAPE_POINTS: usize = 8;

fn sphere_point(rng: &mut ChaCha8Rng) -> Point3 {
    loop {
        let v: Point3 = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        if let Some(u) = unit(v) {
            return u;
        }
    }
}

const TORUS_MAJOR: f64 = 1.0;
const TORUS_MINOR: f64 = 0.4;
const CYL_RADIUS: f64 = 0.5;
const CYL_HALF_HEIGHT: f64 = 1.0;
const BELL_RADIUS: f64 = 0.5;
const BELL_OFFSET: f64 = 1.2;
const BAR_RADIUS: f64 = 0.15;

/// One surface sample: point, outward normal, part label.
fn sample_surface(kind: ShapeKind, rng: &mut ChaCha8Rng) -> (Point3, Point3, u32) {
    match kind {
        ShapeKind::Sphere => {
            let p = sphere_point(rng);
            (p, p, u32::from(p[2] < 0.0))
        }
        ShapeKind::Cube => {
            let face = rng.gen_range(0..6usize);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            p[axis] = sign;
            let mut n = [0.0; 3];
            n[axis] = sign;
            (p, n, face as u32)
        }
        ShapeKind::Torus => {
            // area element is proportional to (R + r cos theta)
            let theta = loop {
                let t = rng.gen_range(0.0..2.0 * PI);
                let accept = (TORUS_MAJOR + TORUS_MINOR * t.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                if rng.gen::<f64>() < accept {
                    break t;
                }
            };
            let phi = rng.gen_range(0.0..2.0 * PI);
            let ring = TORUS_MAJOR + TORUS_MINOR * theta.cos();
            let p = [ring * phi.cos(), ring * phi.sin(), TORUS_MINOR * theta.sin()];
            let n = [theta.cos() * phi.cos(), theta.cos() * phi.sin(), theta.sin()];
            (p, n, u32::from(theta.cos() < 0.0))
        }
        ShapeKind::Cylinder => {
            let side = 2.0 * PI * CYL_RADIUS * 2.0 * CYL_HALF_HEIGHT;
            let caps = 2.0 * PI * CYL_RADIUS * CYL_RADIUS;
            let phi = rng.gen_range(0.0..2.0 * PI);
            if rng.gen::<f64>() * (side + caps) < side {
                let z = rng.gen_range(-CYL_HALF_HEIGHT..CYL_HALF_HEIGHT);
                let p = [CYL_RADIUS * phi.cos(), CYL_RADIUS * phi.sin(), z];
                (p, [phi.cos(), phi.sin(), 0.0], 0)
            } else {
                let r = CYL_RADIUS * rng.gen::<f64>().sqrt();
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let p = [r * phi.cos(), r * phi.sin(), sign * CYL_HALF_HEIGHT];
                (p, [0.0, 0.0, sign], 1)
            }
        }
        ShapeKind::Barbell => {
            // bar spans between the two sphere surfaces along x
            let bar_end = BELL_OFFSET - (BELL_RADIUS * BELL_RADIUS - BAR_RADIUS * BAR_RADIUS).sqrt();
            let bell = 4.0 * PI * BELL_RADIUS * BELL_RADIUS;
            let bar = 2.0 * PI * BAR_RADIUS * 2.0 * bar_end;
            loop {
                let u = rng.gen::<f64>() * (2.0 * bell + bar);
                if u < 2.0 * bell {
                    let left = u < bell;
                    let c = if left { -BELL_OFFSET } else { BELL_OFFSET };
                    let d = sphere_point(rng);
                    let p = [c + BELL_RADIUS * d[0], BELL_RADIUS * d[1], BELL_RADIUS * d[2]];
                    let inside_bar = p[1] * p[1] + p[2] * p[2] < BAR_RADIUS * BAR_RADIUS && p[0].abs() < BELL_OFFSET;
                    if inside_bar {
                        continue;
                    }
                    return (p, d, if left { 0 } else { 2 });
                }
                let phi = rng.gen_range(0.0..2.0 * PI);
                let x = rng.gen_range(-bar_end..bar_end);
                let p = [x, BAR_RADIUS * phi.cos(), BAR_RADIUS * phi.sin()];
                return (p, [0.0, phi.cos(), phi.sin()], 1);
            }
        }
    }
}

/// Samples a shape uniformly over its surface.
///
/// Every shape is built around the origin; the samples (after optional
/// Gaussian jitter of the coordinates) are scaled so the farthest point sits
/// on the unit sphere. Normals are analytic and unaffected by the jitter.
pub fn gen_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    if spec.n_points < MIN_SHAPE_POINTS {
        return Err(CloudError::InvalidSpec(format!(
            "n_points = {} is below the minimum of {MIN_SHAPE_POINTS}",
            spec.n_points
        )));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(CloudError::InvalidSpec(format!("noise_std = {}", spec.noise_std)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points = Vec::with_capacity(spec.n_points);
    let mut normals = Vec::with_capacity(spec.n_points);
    let mut labels = Vec::with_capacity(spec.n_points);
    for _ in 0..spec.n_points {
        let (p, n, l) = sample_surface(spec.kind, &mut rng);
        points.push(p);
        normals.push(n);
        labels.push(l);
    }
    if spec.noise_std > 0.0 {
        for p in &mut points {
            for v in p.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += spec.noise_std * z;
            }
        }
    }
    let radius = points
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if radius > 0.0 {
        for p in &mut points {
            for v in p.iter_mut() {
                *v /= radius;
            }
        }
    }
    Ok(PointCloud::new(points)?
        .with_normals(normals)?
        .with_part_labels(labels)?
        .with_id(format!("{}-{}", spec.kind.name(), spec.seed)))
}

/// Centres the cloud on its centroid and scales the farthest point onto the
/// unit sphere. A cloud of coincident points collapses to the origin.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> PointCloud {
    let c = centroid(&cloud.points);
    let mut pts: Vec<Point3> = cloud
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let radius = pts
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if radius > 1e-300 {
        for p in &mut pts {
            for v in p.iter_mut() {
                *v /= radius;
            }
        }
    } else {
        pts.iter_mut().for_each(|p| *p = [0.0; 3]);
    }
    let mut out = cloud.clone();
    out.points = pts;
    out
}

/// Unit normals from the covariance of each point's `k` nearest neighbours
/// (least-variance eigenvector), oriented away from the centroid; a normal
/// perpendicular to that ray points toward +z (then +y, then +x).
pub fn estimate_normals_pca(cloud: &PointCloud, k: usize) -> Result<Vec<Point3>> {
    let n = cloud.len();
    if k >= n {
        return Err(CloudError::TooFewPoints { k, n });
    }
    if k < 3 {
        return Err(CloudError::InvalidSpec(format!("k = {k}, need at least 3 neighbours")));
    }
    let pts = &cloud.points;
    let nbrs = knn(pts, k)?;
    let c = centroid(pts);
    Ok((0..n)
        .map(|i| {
            let row = nbrs.row(i);
            let mean = centroid(&row.iter().map(|&j| pts[j]).collect::<Vec<_>>());
            let mut cov = Matrix3::<f64>::zeros();
            for &j in row {
                let d = nalgebra::Vector3::new(pts[j][0] - mean[0], pts[j][1] - mean[1], pts[j][2] - mean[2]);
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov / k as f64);
            let (min_idx, _) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            let v = eig.eigenvectors.column(min_idx);
            let mut nrm = unit([v[0], v[1], v[2]]).unwrap_or([0.0, 0.0, 1.0]);
            let ray = [pts[i][0] - c[0], pts[i][1] - c[1], pts[i][2] - c[2]];
            let dot = nrm[0] * ray[0] + nrm[1] * ray[1] + nrm[2] * ray[2];
            let flip = if dot.abs() > 1e-12 {
                dot < 0.0
            } else if nrm[2] != 0.0 {
                nrm[2] < 0.0
            } else if nrm[1] != 0.0 {
                nrm[1] < 0.0
            } else {
                nrm[0] < 0.0
            };
            if flip {
                nrm = nrm.map(|x| -x);
            }
            nrm
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::unit_cube_corners;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn xyz_three_columns() {
        let c = parse_cloud("0 0 0\n1 0 0\n0 1 0\n", CloudFormat::Xyz).unwrap();
        assert_eq!(c.len(), 3);
        assert!(c.normals().is_none());
    }

    #[test]
    fn xyz_six_columns_renormalizes() {
        let c = parse_cloud("0 0 0 0 0 2\n1 0 0 3 0 0\n", CloudFormat::Xyz).unwrap();
        assert_eq!(c.normals().unwrap(), &[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn xyz_errors() {
        assert!(matches!(
            parse_cloud("0 0 0\n1 x 0\n", CloudFormat::Xyz),
            Err(CloudError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_cloud("0 0 0\n1 0 0 1 0 0\n", CloudFormat::Xyz),
            Err(CloudError::Parse { line: 2, .. })
        ));
        assert!(matches!(parse_cloud("# nothing\n", CloudFormat::Xyz), Err(CloudError::EmptyCloud)));
    }

    #[test]
    fn off_without_header_fails_on_line_one() {
        assert!(matches!(
            parse_cloud("3 0 0\n0 0 0\n1 0 0\n0 1 0\n", CloudFormat::Off),
            Err(CloudError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn off_reads_vertices_and_ignores_faces() {
        let text = "OFF\n# comment\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        let c = parse_cloud(text, CloudFormat::Off).unwrap();
        assert_eq!(c.points(), &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
    }

    #[test]
    fn ply_with_extra_elements() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255\n1 2 3 0\n";
        let c = parse_cloud(text, CloudFormat::PlyAscii).unwrap();
        assert_eq!(c.points(), &[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
    }

    #[test]
    fn missing_file() {
        let err = load_cloud(Path::new("/definitely/not/here.xyz"), CloudFormat::Xyz).unwrap_err();
        assert!(matches!(err, CloudError::FileNotFound(_)));
    }

    #[test]
    fn cube_corners_round_trip_every_format() {
        let dir = tmp();
        let cube = PointCloud::new(unit_cube_corners()).unwrap();
        for fmt in [CloudFormat::Xyz, CloudFormat::Off, CloudFormat::PlyAscii] {
            let path = dir.path().join(format!("cube.{}", fmt.extension()));
            save_cloud(&cube, &path, fmt).unwrap();
            let back = load_cloud(&path, fmt).unwrap();
            for (a, b) in back.points().iter().zip(cube.points()) {
                for ax in 0..3 {
                    assert!((a[ax] - b[ax]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn normals_make_six_columns() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0]])
            .unwrap()
            .with_normals(vec![[0.0, 0.0, 1.0]])
            .unwrap();
        let text = format_cloud(&c, CloudFormat::Xyz);
        assert_eq!(text.lines().count(), 1);
        assert_eq!(text.split_whitespace().count(), 6);
    }

    #[test]
    fn single_point_file() {
        let c = PointCloud::new(vec![[0.5, -0.25, 1.0]]).unwrap();
        for fmt in [CloudFormat::Xyz, CloudFormat::Off, CloudFormat::PlyAscii] {
            let back = parse_cloud(&format_cloud(&c, fmt), fmt).unwrap();
            assert_eq!(back.points(), c.points());
        }
    }

    proptest! {
        #[test]
        fn save_load_save_is_byte_identical(seed in 0u64..500, kind in 0usize..5) {
            let spec = ShapeSpec { kind: ShapeKind::ALL[kind], n_points: 16, seed, noise_std: 0.01 };
            let c = gen_shape(&spec).unwrap();
            for fmt in [CloudFormat::Xyz, CloudFormat::Off, CloudFormat::PlyAscii] {
                let first = format_cloud(&c, fmt);
                let back = parse_cloud(&first, fmt).unwrap();
                for (a, b) in back.points().iter().zip(c.points()) {
                    for ax in 0..3 {
                        prop_assert!((a[ax] - b[ax]).abs() < 1e-8);
                    }
                }
                prop_assert_eq!(format_cloud(&back, fmt), first);
            }
        }

        #[test]
        fn normalize_is_translation_scale_covariant(
            seed in 0u64..300, a in 0.1f64..20.0, tx in -5.0f64..5.0, ty in -5.0f64..5.0,
        ) {
            let c = gen_shape(&ShapeSpec { kind: ShapeKind::Torus, n_points: 32, seed, noise_std: 0.0 }).unwrap();
            let moved = c.with_points(c.points().iter().map(|p| [a * p[0] + tx, a * p[1] + ty, a * p[2] - tx]).collect()).unwrap();
            let x = normalize_unit_sphere(&c);
            let y = normalize_unit_sphere(&moved);
            for (p, q) in x.points().iter().zip(y.points()) {
                for ax in 0..3 {
                    prop_assert!((p[ax] - q[ax]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gen_is_deterministic() {
        let spec = ShapeSpec {
            kind: ShapeKind::Sphere,
            n_points: 256,
            seed: 7,
            noise_std: 0.0,
        };
        assert_eq!(gen_shape(&spec).unwrap(), gen_shape(&spec).unwrap());
    }

    #[test]
    fn sphere_normals_are_radial() {
        let c = gen_shape(&ShapeSpec {
            kind: ShapeKind::Sphere,
            n_points: 256,
            seed: 7,
            noise_std: 0.0,
        })
        .unwrap();
        for (p, n) in c.points().iter().zip(c.normals().unwrap()) {
            let d = unit(*p).unwrap();
            for ax in 0..3 {
                assert!((d[ax] - n[ax]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn barbell_has_three_parts() {
        let c = gen_shape(&ShapeSpec {
            kind: ShapeKind::Barbell,
            n_points: 512,
            seed: 1,
            noise_std: 0.0,
        })
        .unwrap();
        let labels: BTreeSet<u32> = c.part_labels().unwrap().iter().copied().collect();
        assert_eq!(labels.len(), 3);
    }

    #[test]
    fn every_shape_fits_the_unit_sphere_with_unit_normals() {
        for kind in ShapeKind::ALL {
            let c = gen_shape(&ShapeSpec {
                kind,
                n_points: 300,
                seed: 3,
                noise_std: 0.01,
            })
            .unwrap();
            let r = c
                .points()
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .fold(0.0, f64::max);
            assert!((r - 1.0).abs() < 1e-12);
            for n in c.normals().unwrap() {
                assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-6);
            }
            let parts: BTreeSet<u32> = c.part_labels().unwrap().iter().copied().collect();
            assert_eq!(parts.len() as u32, kind.part_count());
        }
    }

    #[test]
    fn invalid_specs() {
        let mut spec = ShapeSpec {
            kind: ShapeKind::Cube,
            n_points: 4,
            seed: 0,
            noise_std: 0.0,
        };
        assert!(matches!(gen_shape(&spec), Err(CloudError::InvalidSpec(_))));
        spec.n_points = 8;
        spec.noise_std = -1.0;
        assert!(matches!(gen_shape(&spec), Err(CloudError::InvalidSpec(_))));
    }

    #[test]
    fn normalize_cases() {
        let two = PointCloud::new(vec![[10.0, 0.0, 0.0], [12.0, 0.0, 0.0]]).unwrap();
        assert_eq!(normalize_unit_sphere(&two).points(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);

        let once = normalize_unit_sphere(
            &gen_shape(&ShapeSpec {
                kind: ShapeKind::Cube,
                n_points: 64,
                seed: 2,
                noise_std: 0.0,
            })
            .unwrap(),
        );
        let twice = normalize_unit_sphere(&once);
        for (p, q) in once.points().iter().zip(twice.points()) {
            for ax in 0..3 {
                assert!((p[ax] - q[ax]).abs() < 1e-9);
            }
        }
        let c = centroid(once.points());
        assert!(c.iter().all(|v| v.abs() < 1e-9));

        let same = PointCloud::new(vec![[3.0, 3.0, 3.0]; 5]).unwrap();
        assert!(normalize_unit_sphere(&same).points().iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn planar_grid_normals() {
        let mut pts = Vec::new();
        for y in 0..7 {
            for x in 0..7 {
                pts.push([x as f64 * 0.1, y as f64 * 0.1, 0.0]);
            }
        }
        let c = PointCloud::new(pts).unwrap();
        let normals = estimate_normals_pca(&c, 8).unwrap();
        let interior = 3 * 7 + 3;
        let n = normals[interior];
        assert!(n[0].abs() < 1e-6 && n[1].abs() < 1e-6 && (n[2].abs() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sphere_pca_normals_are_accurate() {
        let c = gen_shape(&ShapeSpec {
            kind: ShapeKind::Sphere,
            n_points: 512,
            seed: 11,
            noise_std: 0.0,
        })
        .unwrap();
        let est = estimate_normals_pca(&c, 16).unwrap();
        let mean_angle = est
            .iter()
            .zip(c.normals().unwrap())
            .map(|(a, b)| (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0).acos().to_degrees())
            .sum::<f64>()
            / 512.0;
        assert!(mean_angle < 15.0, "mean angular error {mean_angle}");
    }

    #[test]
    fn pca_needs_enough_points() {
        let c = PointCloud::new(unit_cube_corners()).unwrap();
        assert!(matches!(estimate_normals_pca(&c, 8), Err(CloudError::TooFewPoints { .. })));
    }
}
