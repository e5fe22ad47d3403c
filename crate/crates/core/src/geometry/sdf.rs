//! Signed distance queries over primitive obstacle worlds.
//!
//! Distances are in meters and negative inside an obstacle. A world may also
//! carry a sampled voxel grid; when present, cost evaluation reads the grid
//! (trilinear interpolation) and falls back to the exact primitives outside it.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance reported for an empty world.
pub const EMPTY_WORLD_DISTANCE: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    Box {
        center: Vector3<f64>,
        half_extents: Vector3<f64>,
    },
    Capsule {
        p0: Vector3<f64>,
        p1: Vector3<f64>,
        radius: f64,
    },
}

impl Primitive {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Primitive::Sphere { radius, .. } | Primitive::Capsule { radius, .. } => *radius > 0.0,
            Primitive::Box { half_extents, .. } => half_extents.iter().all(|h| *h > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("non-positive obstacle size: {self:?}")))
        }
    }

    /// Exact signed distance and its gradient.
    pub fn distance_and_gradient(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        match self {
            Primitive::Sphere { center, radius } => {
                let v = p - center;
                let n = v.norm();
                let g = if n > 1e-12 { v / n } else { Vector3::x() };
                (n - radius, g)
            }
            Primitive::Capsule { p0, p1, radius } => {
                let c = closest_on_segment(p0, p1, p);
                let v = p - c;
                let n = v.norm();
                let g = if n > 1e-12 { v / n } else { Vector3::x() };
                (n - radius, g)
            }
            Primitive::Box { center, half_extents } => {
                let local = p - center;
                let q = local.abs() - half_extents;
                let outside = q.map(|c| c.max(0.0));
                let out_norm = outside.norm();
                if out_norm > 0.0 {
                    let g = outside.component_mul(&local.map(signum)) / out_norm;
                    (out_norm, g)
                } else {
                    let axis = q.imax();
                    let mut g = Vector3::zeros();
                    g[axis] = signum(local[axis]);
                    (q[axis], g)
                }
            }
        }
    }

    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.distance_and_gradient(p).0
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            Primitive::Sphere { center, radius } => {
                let r = Vector3::repeat(*radius);
                (center - r, center + r)
            }
            Primitive::Box { center, half_extents } => (center - half_extents, center + half_extents),
            Primitive::Capsule { p0, p1, radius } => {
                let r = Vector3::repeat(*radius);
                (p0.inf(p1) - r, p0.sup(p1) + r)
            }
        }
    }
}

fn signum(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn closest_on_segment(a: &Vector3<f64>, b: &Vector3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 < 1e-24 {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// A regular grid of sampled signed distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdfGrid {
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    /// x-fastest layout, `dims[0] * dims[1] * dims[2]` entries.
    pub values: Vec<f64>,
}

impl SdfGrid {
    fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::Invalid("grid voxel size must be positive".into()));
        }
        if self.dims.iter().any(|d| *d < 2) {
            return Err(Error::Invalid("grid needs at least 2 samples per axis".into()));
        }
        let n = self.dims[0] * self.dims[1] * self.dims[2];
        if self.values.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: self.values.len() });
        }
        Ok(())
    }

    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[i + self.dims[0] * (j + self.dims[1] * k)]
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| {
            let u = (p[a] - self.origin[a]) / self.voxel_size;
            u >= 0.0 && u <= (self.dims[a] - 1) as f64
        })
    }

    /// Trilinear interpolation; `None` outside the sampled box.
    pub fn interpolate(&self, p: &Vector3<f64>) -> Option<f64> {
        if !self.contains(p) {
            return None;
        }
        let mut idx = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = (p[a] - self.origin[a]) / self.voxel_size;
            let i = (u.floor() as usize).min(self.dims[a] - 2);
            idx[a] = i;
            frac[a] = u - i as f64;
        }
        let [i, j, k] = idx;
        let [fx, fy, fz] = frac;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(self.at(i, j, k), self.at(i + 1, j, k), fx);
        let c10 = lerp(self.at(i, j + 1, k), self.at(i + 1, j + 1, k), fx);
        let c01 = lerp(self.at(i, j, k + 1), self.at(i + 1, j, k + 1), fx);
        let c11 = lerp(self.at(i, j + 1, k + 1), self.at(i + 1, j + 1, k + 1), fx);
        Some(lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz))
    }

    /// Interpolated distance with a central-difference gradient of the interpolant.
    pub fn distance_and_gradient(&self, p: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let d = self.interpolate(p)?;
        let h = 0.25 * self.voxel_size;
        let mut g = Vector3::zeros();
        for a in 0..3 {
            let mut pp = *p;
            let mut pm = *p;
            pp[a] += h;
            pm[a] -= h;
            let (dp, dm) = (self.interpolate(&pp), self.interpolate(&pm));
            g[a] = match (dp, dm) {
                (Some(a1), Some(b1)) => (a1 - b1) / (2.0 * h),
                (Some(a1), None) => (a1 - d) / h,
                (None, Some(b1)) => (d - b1) / h,
                (None, None) => 0.0,
            };
        }
        Some((d, g))
    }
}

/// Static obstacle set, re-snapshotted every planning cycle.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObstacleWorld {
    pub primitives: Vec<Primitive>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<SdfGrid>,
}

impl ObstacleWorld {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self> {
        let w = Self { primitives, grid: None };
        w.validate()?;
        Ok(w)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            p.validate()?;
        }
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: Self = serde_json::from_str(s)?;
        w.validate()?;
        Ok(w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    /// Exact signed distance: minimum over primitives.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.exact_distance_and_gradient(p).0
    }

    pub fn exact_distance_and_gradient(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let mut best = (EMPTY_WORLD_DISTANCE, Vector3::zeros());
        for prim in &self.primitives {
            let (d, g) = prim.distance_and_gradient(p);
            if d < best.0 {
                best = (d, g);
            }
        }
        best
    }

    /// Distance used by the obstacle costs: the grid when it covers `p`,
    /// otherwise the exact primitives.
    pub fn query(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        if let Some(grid) = &self.grid {
            if let Some(r) = grid.distance_and_gradient(p) {
                return r;
            }
        }
        self.exact_distance_and_gradient(p)
    }

    /// Samples the exact field onto a grid covering `[min, max]`.
    pub fn build_grid(&mut self, min: Vector3<f64>, max: Vector3<f64>, voxel_size: f64) -> Result<()> {
        if !(voxel_size > 0.0) {
            return Err(Error::Invalid("grid voxel size must be positive".into()));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            dims[a] = (((max[a] - min[a]) / voxel_size).ceil() as usize + 1).max(2);
        }
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = min + Vector3::new(i as f64, j as f64, k as f64) * voxel_size;
                    values.push(self.signed_distance(&p));
                }
            }
        }
        self.grid = Some(SdfGrid { origin: min, voxel_size, dims, values });
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_sphere_world() -> ObstacleWorld {
        ObstacleWorld::new(vec![Primitive::Sphere { center: Vector3::zeros(), radius: 0.5 }]).unwrap()
    }

    fn composite() -> ObstacleWorld {
        ObstacleWorld::new(vec![
            Primitive::Box { center: Vector3::new(0.8, 0.0, 0.5), half_extents: Vector3::new(0.05, 0.3, 0.25) },
            Primitive::Box { center: Vector3::new(0.8, 0.25, 0.6), half_extents: Vector3::new(0.2, 0.05, 0.15) },
            Primitive::Capsule { p0: Vector3::new(0.7, -0.3, 0.3), p1: Vector3::new(0.9, -0.3, 0.8), radius: 0.06 },
        ])
        .unwrap()
    }

    #[test]
    fn sphere_distances() {
        let w = unit_sphere_world();
        assert_relative_eq!(w.signed_distance(&Vector3::new(1.0, 0.0, 0.0)), 0.5);
        assert_relative_eq!(w.signed_distance(&Vector3::zeros()), -0.5);
    }

    #[test]
    fn box_face_distance() {
        let w = ObstacleWorld::new(vec![Primitive::Box {
            center: Vector3::zeros(),
            half_extents: Vector3::repeat(0.1),
        }])
        .unwrap();
        assert_relative_eq!(w.signed_distance(&Vector3::new(0.2, 0.0, 0.0)), 0.1, epsilon = 1e-15);
        assert_relative_eq!(w.signed_distance(&Vector3::new(0.05, 0.0, 0.0)), -0.05, epsilon = 1e-15);
        assert_relative_eq!(
            w.signed_distance(&Vector3::new(0.2, 0.2, 0.0)),
            (0.02f64).sqrt(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn capsule_distance() {
        let w = ObstacleWorld::new(vec![Primitive::Capsule {
            p0: Vector3::zeros(),
            p1: Vector3::new(0.0, 0.0, 1.0),
            radius: 0.1,
        }])
        .unwrap();
        assert_relative_eq!(w.signed_distance(&Vector3::new(0.3, 0.0, 0.5)), 0.2, epsilon = 1e-15);
        assert_relative_eq!(w.signed_distance(&Vector3::new(0.0, 0.0, 1.5)), 0.4, epsilon = 1e-15);
    }

    #[test]
    fn empty_world_sentinel() {
        let w = ObstacleWorld::empty();
        assert_eq!(w.signed_distance(&Vector3::new(1.0, 2.0, 3.0)), EMPTY_WORLD_DISTANCE);
        assert_eq!(w.query(&Vector3::zeros()).1, Vector3::zeros());
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(ObstacleWorld::new(vec![Primitive::Sphere { center: Vector3::zeros(), radius: 0.0 }]).is_err());
        assert!(ObstacleWorld::new(vec![Primitive::Box {
            center: Vector3::zeros(),
            half_extents: Vector3::new(0.1, -0.1, 0.1)
        }])
        .is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let w = composite();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 300 {
            let p = Vector3::new(rng.gen_range(0.4..1.2), rng.gen_range(-0.6..0.6), rng.gen_range(0.1..1.0));
            let (_, g) = w.exact_distance_and_gradient(&p);
            let mut fd = Vector3::zeros();
            for a in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[a] += h;
                pm[a] -= h;
                fd[a] = (w.signed_distance(&pp) - w.signed_distance(&pm)) / (2.0 * h);
            }
            // Skip points on medial surfaces where the field is not differentiable.
            if (fd.norm() - 1.0).abs() > 1e-4 {
                continue;
            }
            assert!((fd - g).norm() < 1e-5, "p={p:?} fd={fd:?} g={g:?}");
            checked += 1;
        }
    }

    #[test]
    fn distance_is_one_lipschitz() {
        let w = composite();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5000 {
            let p = Vector3::new(rng.gen_range(0.0..1.5), rng.gen_range(-0.8..0.8), rng.gen_range(0.0..1.2));
            let q = Vector3::new(rng.gen_range(0.0..1.5), rng.gen_range(-0.8..0.8), rng.gen_range(0.0..1.2));
            let dd = (w.signed_distance(&p) - w.signed_distance(&q)).abs();
            assert!(dd <= (p - q).norm() + 1e-12);
        }
    }

    #[test]
    fn grid_agrees_with_exact_field() {
        let mut w = composite();
        let voxel = 0.02;
        w.build_grid(Vector3::new(0.4, -0.6, 0.1), Vector3::new(1.2, 0.6, 1.0), voxel).unwrap();
        let grid = w.grid.clone().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10_000 {
            let p = Vector3::new(rng.gen_range(0.4..1.2), rng.gen_range(-0.6..0.6), rng.gen_range(0.1..1.0));
            let approx = grid.interpolate(&p).unwrap();
            assert!((approx - w.signed_distance(&p)).abs() <= 1.5 * voxel);
        }
        // Outside the grid the exact field answers.
        let far = Vector3::new(3.0, 0.0, 0.0);
        assert_eq!(w.query(&far).0, w.signed_distance(&far));
    }

    #[test]
    fn json_round_trip() {
        let w = composite();
        let back = ObstacleWorld::from_json(&w.to_json()).unwrap();
        assert_eq!(w, back);
        let text = r#"{"primitives":[{"type":"sphere","center":[0,0,0],"radius":0.5}]}"#;
        let parsed = ObstacleWorld::from_json(text).unwrap();
        assert_relative_eq!(parsed.signed_distance(&Vector3::new(1.0, 0.0, 0.0)), 0.5);
    }
}
