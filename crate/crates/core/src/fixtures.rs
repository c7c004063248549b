//! Small hand-built clouds with known answers, shared by unit tests,
//! integration tests and the guide.

use crate::geometry::Point3;

/// A flat 9 x 7 grid (63 points, unit spacing, z = 0) plus one point raised
/// four units above the middle of the grid. Returns the points and the index
/// of the spike.
pub fn plane_with_spike() -> (Vec<Point3>, usize) {
    let mut pts = Vec::with_capacity(64);
    for y in 0..7 {
        for x in 0..9 {
            pts.push([x as f64, y as f64, 0.0]);
        }
    }
    pts.push([4.0, 3.0, 4.0]);
    (pts, 63)
}

/// Vertices of a regular tetrahedron centred at the origin.
pub fn regular_tetrahedron() -> Vec<Point3> {
    vec![[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
}

/// The eight corners of the unit cube.
pub fn unit_cube_corners() -> Vec<Point3> {
    let mut pts = Vec::with_capacity(8);
    for i in 0..8u8 {
        pts.push([(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]);
    }
    pts
}
