//! Scene domain model: objects, floor plans and Gaussian perturbation.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Vec2 = [f64; 2];

/// Ratio between rotation-angle and translation noise std. Pairs the
/// Table-Chair large mode: 0.25 translation with pi/4 rotation.
pub const DEFAULT_ROTATION_NOISE_RATIO: f64 = (PI / 4.0) / 0.25;

const UNIT_TOLERANCE: f64 = 1e-6;

/// One piece of furniture. Translation and half-extents are in normalized
/// room units; rotation is stored as `(cos θ, sin θ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectState {
    #[serde(rename = "class")]
    pub class_id: usize,
    #[serde(rename = "t")]
    pub translation: Vec2,
    #[serde(rename = "r")]
    pub rotation: Vec2,
    #[serde(rename = "b")]
    pub bbox: Vec2,
    #[serde(rename = "shape")]
    pub shape_id: usize,
}

impl ObjectState {
    pub fn new(class_id: usize, translation: Vec2, angle: f64, bbox: Vec2, shape_id: usize) -> Self {
        Self {
            class_id,
            translation,
            rotation: [angle.cos(), angle.sin()],
            bbox,
            shape_id,
        }
    }

    pub fn angle(&self) -> f64 {
        self.rotation[1].atan2(self.rotation[0])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.translation.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidScene("non-finite translation".into()));
        }
        let norm = self.rotation[0].hypot(self.rotation[1]);
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidScene(format!(
                "rotation {:?} is not a unit vector",
                self.rotation
            )));
        }
        if !self.bbox.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::InvalidScene(format!(
                "bounding box {:?} must be positive",
                self.bbox
            )));
        }
        Ok(())
    }
}

/// Room boundary: a simple counter-clockwise polygon.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct FloorPlan {
    vertices: Vec<Vec2>,
}

impl<'de> Deserialize<'de> for FloorPlan {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let vertices = Vec::<Vec2>::deserialize(deserializer)?;
        FloorPlan::new(vertices).map_err(serde::de::Error::custom)
    }
}

impl FloorPlan {
    pub fn new(vertices: Vec<Vec2>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidFloor(format!(
                "need at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFloor("non-finite vertex".into()));
        }
        let plan = Self { vertices };
        if plan.signed_area() <= 0.0 {
            return Err(Error::InvalidFloor(
                "polygon must be counter-clockwise with positive area".into(),
            ));
        }
        if !plan.is_simple() {
            return Err(Error::InvalidFloor("polygon self-intersects".into()));
        }
        Ok(plan)
    }

    /// The `[-1, 1]²` square.
    pub fn unit_square() -> Self {
        Self {
            vertices: vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]],
        }
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn edges(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn signed_area(&self) -> f64 {
        0.5 * self
            .edges()
            .map(|(a, b)| a[0] * b[1] - b[0] * a[1])
            .sum::<f64>()
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| dist(a, b)).sum()
    }

    pub fn centroid(&self) -> Vec2 {
        let area = self.signed_area();
        let (mut cx, mut cy) = (0.0, 0.0);
        for (a, b) in self.edges() {
            let cross = a[0] * b[1] - b[0] * a[1];
            cx += (a[0] + b[0]) * cross;
            cy += (a[1] + b[1]) * cross;
        }
        [cx / (6.0 * area), cy / (6.0 * area)]
    }

    /// Longest side of the axis-aligned bounding box.
    pub fn extent(&self) -> f64 {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for v in &self.vertices {
            for k in 0..2 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (hi[0] - lo[0]).max(hi[1] - lo[1])
    }

    fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        let edges: Vec<_> = self.edges().collect();
        for i in 0..n {
            for j in (i + 1)..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    // Adjacent edges may only share their common vertex.
                    let (a, b) = edges[i];
                    let (c, d) = edges[j];
                    let (shared, far_i, far_j) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                    if cross(sub(far_i, shared), sub(far_j, shared)).abs() < 1e-15
                        && dot(sub(far_i, shared), sub(far_j, shared)) > 0.0
                    {
                        return false;
                    }
                    continue;
                }
                if segments_intersect(edges[i].0, edges[i].1, edges[j].0, edges[j].1) {
                    return false;
                }
            }
        }
        true
    }

    /// Even-odd containment test.
    pub fn contains(&self, p: Vec2) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn boundary_distance(&self, p: Vec2) -> f64 {
        self.edges()
            .map(|(a, b)| segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Inside the polygon dilated by `margin`.
    pub fn contains_with_margin(&self, p: Vec2, margin: f64) -> bool {
        self.contains(p) || self.boundary_distance(p) <= margin
    }
}

/// A set of objects on a floor plan. Object order carries no meaning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScene")]
pub struct Scene {
    pub class_count: usize,
    pub floor: FloorPlan,
    pub objects: Vec<ObjectState>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    class_count: usize,
    floor: FloorPlan,
    objects: Vec<ObjectState>,
}

impl TryFrom<RawScene> for Scene {
    type Error = Error;

    fn try_from(raw: RawScene) -> Result<Self> {
        Scene::new(raw.class_count, raw.floor, raw.objects)
    }
}

impl Scene {
    pub fn new(class_count: usize, floor: FloorPlan, objects: Vec<ObjectState>) -> Result<Self> {
        let scene = Self {
            class_count,
            floor,
            objects,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::InvalidScene("scene has no objects".into()));
        }
        for o in &self.objects {
            if o.class_id >= self.class_count {
                return Err(Error::ClassOutOfRange {
                    class: o.class_id,
                    class_count: self.class_count,
                });
            }
            o.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Object count per class id.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for o in &self.objects {
            counts[o.class_id] += 1;
        }
        counts
    }
}

/// Standard deviations of the Gaussian perturbation kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Translation std per coordinate, normalized units.
    pub sigma_t: f64,
    /// Rotation-angle std, radians.
    pub sigma_r: f64,
}

impl NoiseSpec {
    pub fn new(sigma_t: f64, sigma_r: f64) -> Result<Self> {
        if !(sigma_t >= 0.0 && sigma_r >= 0.0 && sigma_t.is_finite() && sigma_r.is_finite()) {
            return Err(Error::Config(format!(
                "noise stds must be finite and non-negative, got ({sigma_t}, {sigma_r})"
            )));
        }
        Ok(Self { sigma_t, sigma_r })
    }

    /// Translation std `sigma_t` with the default rotation pairing.
    pub fn translation(sigma_t: f64) -> Self {
        Self {
            sigma_t,
            sigma_r: sigma_t * DEFAULT_ROTATION_NOISE_RATIO,
        }
    }

    pub fn zero() -> Self {
        Self {
            sigma_t: 0.0,
            sigma_r: 0.0,
        }
    }
}

/// Offsets every translation coordinate by `N(0, sigma_t²)` and every
/// rotation angle by `N(0, sigma_r²)`. Boundaries and collisions are ignored.
pub fn perturb(scene: &Scene, noise: NoiseSpec, seed: u64) -> Scene {
    let mut rng = rng::seeded(seed);
    let mut out = scene.clone();
    // Normal::new only fails for negative or non-finite std, which NoiseSpec rules out.
    let trans = Normal::new(0.0, noise.sigma_t.max(0.0)).expect("valid std");
    let rot = Normal::new(0.0, noise.sigma_r.max(0.0)).expect("valid std");
    for o in &mut out.objects {
        o.translation[0] += trans.sample(&mut rng);
        o.translation[1] += trans.sample(&mut rng);
        let delta: f64 = rot.sample(&mut rng);
        if delta != 0.0 {
            o.rotation = rotate_unit(o.rotation, delta);
        }
    }
    out
}

/// Rotates a unit vector by `angle` and renormalizes it.
pub fn rotate_unit(r: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    normalize([c * r[0] - s * r[1], s * r[0] + c * r[1]])
}

pub fn normalize(v: Vec2) -> Vec2 {
    let n = v[0].hypot(v[1]).max(1e-12);
    [v[0] / n, v[1] / n]
}

/// Draws `σ ~ N(0, base_std²)` and returns a kernel with `sigma_t = |σ|`
/// and `sigma_r = |σ| · DEFAULT_ROTATION_NOISE_RATIO`.
pub fn sample_noise_level(base_std: f64, seed: u64) -> NoiseSpec {
    sample_noise_level_with_ratio(base_std, DEFAULT_ROTATION_NOISE_RATIO, seed)
}

pub fn sample_noise_level_with_ratio(base_std: f64, rotation_ratio: f64, seed: u64) -> NoiseSpec {
    let mut rng = rng::seeded(seed);
    let sigma: f64 = Normal::new(0.0, base_std.max(0.0))
        .expect("valid std")
        .sample(&mut rng);
    let sigma_t = sigma.abs();
    NoiseSpec {
        sigma_t,
        sigma_r: sigma_t * rotation_ratio,
    }
}

/// Fraction of objects whose center lies inside the floor polygon dilated
/// by `margin`. A score of 1.0 means no object violates the boundary.
pub fn boundary_violation_fraction(scene: &Scene, margin: f64) -> f64 {
    let inside = scene
        .objects
        .iter()
        .filter(|o| margin == f64::INFINITY || scene.floor.contains_with_margin(o.translation, margin))
        .count();
    inside as f64 / scene.objects.len() as f64
}

pub(crate) fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub(crate) fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 {
        (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let orient = |p: Vec2, q: Vec2, r: Vec2| cross(sub(q, p), sub(r, p));
    let on_segment = |p: Vec2, q: Vec2, r: Vec2| {
        r[0] >= p[0].min(q[0]) && r[0] <= p[0].max(q[0]) && r[1] >= p[1].min(q[1]) && r[1] <= p[1].max(q[1])
    };
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}
