use std::f64::consts::TAU;

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Surface color as a function of the in-patch coordinates `(s, t)` in
/// meters along the two edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Albedo {
    Constant { rgb: [f64; 3] },
    /// `base + per_s·s + per_t·t`.
    Gradient {
        base: [f64; 3],
        per_s: [f64; 3],
        per_t: [f64; 3],
    },
    /// `base + amplitude·(sin(2πs/λ + φ) + sin(2πt/λ + ψ))/2`, channel-wise
    /// phases so the three channels are not collinear.
    Waves {
        base: [f64; 3],
        amplitude: [f64; 3],
        wavelength: f64,
        phase_s: [f64; 3],
        phase_t: [f64; 3],
    },
}

impl Albedo {
    pub fn eval(&self, s: f64, t: f64) -> [f64; 3] {
        match self {
            Albedo::Constant { rgb } => *rgb,
            Albedo::Gradient { base, per_s, per_t } => {
                std::array::from_fn(|c| (base[c] + per_s[c] * s + per_t[c] * t).clamp(0.0, 1.0))
            }
            Albedo::Waves {
                base,
                amplitude,
                wavelength,
                phase_s,
                phase_t,
            } => std::array::from_fn(|c| {
                let k = TAU / wavelength;
                base[c] + amplitude[c] * 0.5 * ((k * s + phase_s[c]).sin() + (k * t + phase_t[c]).sin())
            }),
        }
    }

    fn validate(&self, extent: (f64, f64)) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = match self {
            Albedo::Constant { rgb } => rgb.iter().all(|&v| in_unit(v)),
            Albedo::Gradient { base, per_s, per_t } => (0..3).all(|c| {
                [0.0, extent.0].iter().all(|&s| {
                    [0.0, extent.1]
                        .iter()
                        .all(|&t| in_unit(base[c] + per_s[c] * s + per_t[c] * t))
                })
            }),
            Albedo::Waves {
                base,
                amplitude,
                wavelength,
                ..
            } => {
                *wavelength > 0.0
                    && (0..3).all(|c| in_unit(base[c] - amplitude[c].abs()) && in_unit(base[c] + amplitude[c].abs()))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("albedo leaves [0, 1]".into()))
        }
    }
}

/// A parallelogram `corner + α·edge_s + β·edge_t`, α, β ∈ [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub corner: Vector3<f64>,
    pub edge_s: Vector3<f64>,
    pub edge_t: Vector3<f64>,
    pub albedo: Albedo,
}

impl Patch {
    pub fn new(corner: Vector3<f64>, edge_s: Vector3<f64>, edge_t: Vector3<f64>, albedo: Albedo) -> Self {
        Self {
            corner,
            edge_s,
            edge_t,
            albedo,
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.edge_s.cross(&self.edge_t).normalize()
    }

    /// Plane as `(n, d)` with `n·x + d = 0`.
    pub fn plane(&self) -> (Vector3<f64>, f64) {
        let n = self.normal();
        (n, -n.dot(&self.corner))
    }

    pub fn area(&self) -> f64 {
        self.edge_s.cross(&self.edge_t).norm()
    }
}

/// Ray hit on the nearest patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub range: f64,
    pub point: Vector3<f64>,
    pub patch: usize,
    /// In-patch coordinates, meters along each edge.
    pub st: (f64, f64),
}

/// Patch with precomputed intersection data.
#[derive(Debug, Clone)]
struct PreparedPatch {
    normal: Vector3<f64>,
    offset: f64,
    gram_inv: Matrix2<f64>,
    len_s: f64,
    len_t: f64,
}

/// Ground-truth geometry: colored planar patches plus gravity.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "WorldDef", into = "WorldDef")]
pub struct SimWorld {
    pub patches: Vec<Patch>,
    pub gravity: Vector3<f64>,
    /// Color returned by camera rays that miss every patch.
    pub background: [f64; 3],
    prepared: Vec<PreparedPatch>,
}

#[derive(Serialize, Deserialize)]
struct WorldDef {
    patches: Vec<Patch>,
    gravity: Vector3<f64>,
    background: [f64; 3],
}

impl From<WorldDef> for SimWorld {
    fn from(d: WorldDef) -> Self {
        SimWorld::new(d.patches, d.gravity, d.background)
    }
}

impl From<SimWorld> for WorldDef {
    fn from(w: SimWorld) -> Self {
        WorldDef {
            patches: w.patches,
            gravity: w.gravity,
            background: w.background,
        }
    }
}

impl SimWorld {
    pub fn new(patches: Vec<Patch>, gravity: Vector3<f64>, background: [f64; 3]) -> Self {
        let prepared = patches
            .iter()
            .map(|p| {
                let normal = p.edge_s.cross(&p.edge_t);
                let normal = if normal.norm() > 0.0 { normal.normalize() } else { normal };
                let g = Matrix2::new(
                    p.edge_s.dot(&p.edge_s),
                    p.edge_s.dot(&p.edge_t),
                    p.edge_s.dot(&p.edge_t),
                    p.edge_t.dot(&p.edge_t),
                );
                PreparedPatch {
                    normal,
                    offset: -normal.dot(&p.corner),
                    gram_inv: g.try_inverse().unwrap_or_else(Matrix2::zeros),
                    len_s: p.edge_s.norm(),
                    len_t: p.edge_t.norm(),
                }
            })
            .collect();
        Self {
            patches,
            gravity,
            background,
            prepared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.patches.iter().enumerate() {
            if !(p.area() > 1e-12) {
                return Err(Error::Config(format!("patch {i} is degenerate")));
            }
            p.albedo
                .validate((p.edge_s.norm(), p.edge_t.norm()))
                .map_err(|_| Error::Config(format!("patch {i} albedo leaves [0, 1]")))?;
        }
        Ok(())
    }

    /// Nearest patch along `origin + r·dir` with `r ∈ (min_range, max_range]`.
    /// `dir` must be unit length for `range` to be metric.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, min_range: f64, max_range: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, (patch, prep)) in self.patches.iter().zip(&self.prepared).enumerate() {
            let denom = prep.normal.dot(dir);
            if denom.abs() < 1e-12 {
                continue;
            }
            let r = -(prep.normal.dot(origin) + prep.offset) / denom;
            if !(r > min_range && r <= max_range) || best.is_some_and(|b| r >= b.range) {
                continue;
            }
            let point = origin + dir * r;
            let w = point - patch.corner;
            let ab = prep.gram_inv * Vector2::new(patch.edge_s.dot(&w), patch.edge_t.dot(&w));
            if ab[0] < 0.0 || ab[0] > 1.0 || ab[1] < 0.0 || ab[1] > 1.0 {
                continue;
            }
            best = Some(Hit {
                range: r,
                point,
                patch: i,
                st: (ab[0] * prep.len_s, ab[1] * prep.len_t),
            });
        }
        best
    }

    pub fn albedo_at(&self, hit: &Hit) -> [f64; 3] {
        self.patches[hit.patch].albedo.eval(hit.st.0, hit.st.1)
    }

    /// Axis-aligned box as five patches (four sides and the top), outward
    /// normals, every face with the given albedo.
    pub fn push_box(&mut self, min: Vector3<f64>, max: Vector3<f64>, albedo: impl Fn(usize) -> Albedo) {
        let d = max - min;
        let (ex, ey, ez) = (
            Vector3::new(d.x, 0.0, 0.0),
            Vector3::new(0.0, d.y, 0.0),
            Vector3::new(0.0, 0.0, d.z),
        );
        let faces = [
            (min, ex, ez),      // y = min, normal −y
            (min + ey, ez, ex), // y = max, normal +y
            (min, ez, ey),      // x = min, normal −x
            (min + ex, ey, ez), // x = max, normal +x
            (min + ez, ex, ey), // top, normal +z
        ];
        for (k, (c, s, t)) in faces.into_iter().enumerate() {
            self.patches.push(Patch::new(c, s, t, albedo(k)));
        }
        *self = SimWorld::new(std::mem::take(&mut self.patches), self.gravity, self.background);
    }
}
