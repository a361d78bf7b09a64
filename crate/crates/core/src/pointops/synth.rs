use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use super::cloud::{Point, PointCloud};
use crate::error::{arg_err, Error, Result};
use crate::numerics::rng::seeded;

/// Torus radii; the outer radius is 1 like the sphere.
const TORUS_MAJOR: f64 = 0.7;
const TORUS_MINOR: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    /// Unit sphere.
    Sphere,
    /// Surface of the axis-aligned cube with side 1.
    Cube,
    /// Torus in the xy-plane with outer radius 1.
    Torus,
    /// The square `[-1, 1]^2` at `z = 0`.
    Plane,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Torus, ShapeKind::Plane];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::Plane => "plane",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| arg_err!("unknown shape kind '{s}' (expected sphere, cube, torus or plane)"))
    }
}

/// Samples `n` points uniformly (by area) on the surface of `kind`.
pub fn synth_shape(kind: ShapeKind, n: usize, seed: u64) -> Result<PointCloud> {
    if n < 8 {
        return Err(arg_err!("synth_shape: need at least 8 points, got {n}"));
    }
    let mut rng = seeded(seed);
    let mut points: Vec<Point> = Vec::with_capacity(n);
    while points.len() < n {
        let p = match kind {
            ShapeKind::Sphere => {
                let z: f64 = rng.gen_range(-1.0..=1.0);
                let phi = rng.gen_range(0.0..TAU);
                let r = (1.0 - z * z).sqrt();
                let p = [r * phi.cos(), r * phi.sin(), z];
                let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                [p[0] / norm, p[1] / norm, p[2] / norm]
            }
            ShapeKind::Cube => {
                let face = rng.gen_range(0..6usize);
                let mut p = [rng.gen_range(-0.5..=0.5), rng.gen_range(-0.5..=0.5), rng.gen_range(-0.5..=0.5)];
                p[face / 2] = if face % 2 == 0 { -0.5 } else { 0.5 };
                p
            }
            ShapeKind::Torus => {
                let u = rng.gen_range(0.0..TAU);
                let v = rng.gen_range(0.0..TAU);
                // area element is proportional to (R + r cos v)
                let accept: f64 = rng.gen_range(0.0..1.0);
                if accept * (TORUS_MAJOR + TORUS_MINOR) > TORUS_MAJOR + TORUS_MINOR * v.cos() {
                    continue;
                }
                let ring = TORUS_MAJOR + TORUS_MINOR * v.cos();
                [ring * u.cos(), ring * u.sin(), TORUS_MINOR * v.sin()]
            }
            ShapeKind::Plane => [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), 0.0],
        };
        points.push(p);
    }
    PointCloud::new(points)
}
