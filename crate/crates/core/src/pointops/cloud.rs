use std::fmt::Write as _;
use std::path::Path;

use crate::error::{arg_err, Error, Result};
use crate::numerics::Tensor;

pub type Point = [f64; 3];

/// Raw point coordinates in model space.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(arg_err!("point cloud needs at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(arg_err!("point {i} has a non-finite coordinate"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        points_to_tensor(&self.points)
    }

    pub fn translated(&self, by: Point) -> Self {
        let points = self.points.iter().map(|p| [p[0] + by[0], p[1] + by[1], p[2] + by[2]]).collect();
        Self { points }
    }

    /// Parses the text format: one point per line, three whitespace-separated
    /// numbers, blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::Format(format!("line {}: expected 3 coordinates, found {}", lineno + 1, fields.len())));
            }
            let mut p = [0.0; 3];
            for (slot, f) in p.iter_mut().zip(&fields) {
                *slot = f.parse().map_err(|_| Error::Format(format!("line {}: bad number '{f}'", lineno + 1)))?;
            }
            points.push(p);
        }
        Self::new(points)
    }

    /// Serializes in the text format; values use the shortest exact decimal form.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.points.len() * 48);
        for p in &self.points {
            let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

pub fn points_to_tensor(points: &[Point]) -> Tensor {
    let data = points.iter().flat_map(|p| p.iter().copied()).collect();
    Tensor::new(&[points.len(), 3], data).expect("n x 3")
}

pub fn tensor_to_points(t: &Tensor) -> Vec<Point> {
    assert_eq!(t.last_dim(), 3, "expected trailing extent 3, got {:?}", t.shape());
    t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_blank_lines() {
        let c = PointCloud::parse("# header\n1 2 3\n\n  -0.5\t0 1e-3  \n").unwrap();
        assert_eq!(c.points(), &[[1.0, 2.0, 3.0], [-0.5, 0.0, 1e-3]]);
    }

    #[test]
    fn parse_rejects_bad_lines() {
        assert!(matches!(PointCloud::parse("1 2\n"), Err(Error::Format(_))));
        assert!(matches!(PointCloud::parse("1 2 x\n"), Err(Error::Format(_))));
        assert!(PointCloud::parse("# nothing\n").is_err());
    }

    #[test]
    fn text_round_trip_is_exact() {
        let c = PointCloud::new(vec![[0.1, 1.0 / 3.0, -2e-300], [1e10, -0.0, 7.25]]).unwrap();
        assert_eq!(PointCloud::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
    }
}
