//! Table-Chair environments: procedural clean scenes, bimodal perturbation
//! and per-variant success criteria.
//!
//! Class 0 is a table and class 1 a chair. Every scene sits on the fixed
//! `[-1, 1]²` floor. A chair's rotation vector points in the direction it
//! faces.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assign::{emd_to_gt, hungarian};
use crate::error::{Error, Result};
use crate::rng;
use crate::scene::{dist, perturb, FloorPlan, NoiseSpec, ObjectState, Scene, Vec2};

pub const TABLE: usize = 0;
pub const CHAIR: usize = 1;
pub const CLASS_COUNT: usize = 2;
/// Shape ids: 0 table, 1 and 2 the two chair designs.
pub const SHAPE_COUNT: usize = 3;

pub const RECT_TABLE_HALF: Vec2 = [0.08, 0.20];
pub const ROUND_TABLE_HALF: Vec2 = [0.10, 0.10];
pub const CHAIR_HALF: Vec2 = [0.045, 0.045];
/// Lateral distance from a rectangular table's centre to its chair rows.
pub const ROW_OFFSET: f64 = 0.14;
/// Spacing between neighbouring chairs within a row.
pub const SEAT_SPACING: f64 = 0.13;
pub const RECT_SEPARATION: (f64, f64) = (0.4, 0.8);
pub const ROUND_SEPARATION: (f64, f64) = (0.6, 1.0);
pub const DEFAULT_CHAIR_RADIUS: f64 = 0.22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    SymmetryParallelism,
    UniformSpacing,
    GroupingByShape,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::SymmetryParallelism,
        Variant::UniformSpacing,
        Variant::GroupingByShape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SymmetryParallelism => "symmetry-parallelism",
            Variant::UniformSpacing => "uniform-spacing",
            Variant::GroupingByShape => "grouping-by-shape",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetry-parallelism" | "symmetry" => Ok(Variant::SymmetryParallelism),
            "uniform-spacing" | "uniform" => Ok(Variant::UniformSpacing),
            "grouping-by-shape" | "grouping" => Ok(Variant::GroupingByShape),
            other => Err(Error::Config(format!("unknown Table-Chair variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableChairSpec {
    pub variant: Variant,
    pub table_count: usize,
    /// Rectangular variants: chairs in each of a table's two rows.
    pub chairs_per_side: usize,
    /// Uniform spacing: inclusive chair-count range per round table.
    pub chairs_per_table_range: (usize, usize),
    pub chair_radius: f64,
    pub seed: u64,
}

impl TableChairSpec {
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            table_count: 2,
            chairs_per_side: 3,
            chairs_per_table_range: (2, 6),
            chair_radius: DEFAULT_CHAIR_RADIUS,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.variant)));
        if self.table_count != 2 {
            return bad("Table-Chair scenes have exactly 2 tables");
        }
        match self.variant {
            Variant::UniformSpacing => {
                let (lo, hi) = self.chairs_per_table_range;
                if lo < 1 || lo > hi {
                    return bad("chair range must satisfy 1 <= lo <= hi");
                }
                if !(self.chair_radius > 0.0) {
                    return bad("chair radius must be positive");
                }
            }
            _ => {
                if self.chairs_per_side != 3 {
                    return bad("rectangular tables carry 3 chairs per side");
                }
            }
        }
        Ok(())
    }
}

/// Chair slots around a rectangular table in its local frame: position and
/// facing angle, left row then right row, bottom to top.
pub fn rect_slots() -> [(Vec2, f64); 6] {
    let mut slots = [([0.0; 2], 0.0); 6];
    for (side, (x, facing)) in [(-ROW_OFFSET, 0.0), (ROW_OFFSET, PI)].into_iter().enumerate() {
        for k in 0..3 {
            slots[side * 3 + k] = ([x, (k as f64 - 1.0) * SEAT_SPACING], facing);
        }
    }
    slots
}

fn to_world(center: Vec2, angle: f64, local: Vec2) -> Vec2 {
    let (s, c) = angle.sin_cos();
    [
        center[0] + c * local[0] - s * local[1],
        center[1] + s * local[0] + c * local[1],
    ]
}

fn to_local(center: Vec2, angle: f64, world: Vec2) -> Vec2 {
    let (s, c) = angle.sin_cos();
    let d = [world[0] - center[0], world[1] - center[1]];
    [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

/// A clean scene following the variant's construction rule.
pub fn generate_clean(spec: &TableChairSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let mut objects = Vec::new();
    match spec.variant {
        Variant::SymmetryParallelism | Variant::GroupingByShape => {
            let sep = rng.random_range(RECT_SEPARATION.0..RECT_SEPARATION.1);
            for center in [[-sep / 2.0, 0.0], [sep / 2.0, 0.0]] {
                objects.push(ObjectState::new(TABLE, center, 0.0, RECT_TABLE_HALF, 0));
                let (left_shape, right_shape) = match spec.variant {
                    Variant::GroupingByShape if rng.random_bool(0.5) => (2, 1),
                    Variant::GroupingByShape => (1, 2),
                    _ => (1, 1),
                };
                for (i, (local, facing)) in rect_slots().into_iter().enumerate() {
                    let shape = if i < 3 { left_shape } else { right_shape };
                    objects.push(ObjectState::new(
                        CHAIR,
                        to_world(center, 0.0, local),
                        facing,
                        CHAIR_HALF,
                        shape,
                    ));
                }
            }
        }
        Variant::UniformSpacing => {
            let sep = rng.random_range(ROUND_SEPARATION.0..ROUND_SEPARATION.1);
            let (lo, hi) = spec.chairs_per_table_range;
            for center in [[-sep / 2.0, 0.0], [sep / 2.0, 0.0]] {
                objects.push(ObjectState::new(TABLE, center, 0.0, ROUND_TABLE_HALF, 0));
                let count = rng.random_range(lo..=hi);
                let phase = rng.random_range(0.0..TAU);
                for k in 0..count {
                    let a = phase + TAU * k as f64 / count as f64;
                    let pos = [
                        center[0] + spec.chair_radius * a.cos(),
                        center[1] + spec.chair_radius * a.sin(),
                    ];
                    objects.push(ObjectState::new(CHAIR, pos, a + PI, CHAIR_HALF, 1));
                }
            }
        }
    }
    Scene::new(CLASS_COUNT, FloorPlan::unit_square(), objects)
}

/// Two-mode perturbation: each mode draws a noise level `|z|` from a
/// standard normal and scales its translation and rotation stds by it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BimodalNoise {
    pub large_probability: f64,
    pub small: NoiseSpec,
    pub large: NoiseSpec,
}

impl Default for BimodalNoise {
    fn default() -> Self {
        Self {
            large_probability: 0.5,
            small: NoiseSpec {
                sigma_t: 0.01,
                sigma_r: PI / 90.0,
            },
            large: NoiseSpec {
                sigma_t: 0.25,
                sigma_r: PI / 4.0,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Small,
    Large,
}

impl BimodalNoise {
    /// Picks the mode and the kernel stds for one scene.
    pub fn sample(&self, seed: u64) -> (NoiseMode, NoiseSpec) {
        let mut rng = rng::seeded(seed);
        let mode = if rng.random_bool(self.large_probability.clamp(0.0, 1.0)) {
            NoiseMode::Large
        } else {
            NoiseMode::Small
        };
        let base = match mode {
            NoiseMode::Small => self.small,
            NoiseMode::Large => self.large,
        };
        let level: f64 = StandardNormal.sample(&mut rng);
        let level = level.abs();
        (
            mode,
            NoiseSpec {
                sigma_t: level * base.sigma_t,
                sigma_r: level * base.sigma_r,
            },
        )
    }
}

pub fn perturb_bimodal(scene: &Scene, seed: u64) -> Scene {
    perturb_bimodal_with(scene, &BimodalNoise::default(), seed).0
}

pub fn perturb_bimodal_with(scene: &Scene, noise: &BimodalNoise, seed: u64) -> (Scene, NoiseMode) {
    let (mode, spec) = noise.sample(rng::derive(seed, 0));
    (perturb(scene, spec, rng::derive(seed, 1)), mode)
}

/// Thresholds of the success criteria.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessCriteria {
    pub max_mean_move: f64,
    pub max_angular_offset: f64,
    /// Symmetry & parallelism: summed chair EMD over all 12 chairs.
    pub max_chair_emd: f64,
    /// Grouping by shape: summed chair EMD over one table's 6 chairs.
    pub max_group_emd: f64,
    pub max_spacing_variance: f64,
    pub max_radius_residual: f64,
    pub chair_radius: f64,
}

impl Default for SuccessCriteria {
    fn default() -> Self {
        Self {
            max_mean_move: 0.5,
            max_angular_offset: PI / 60.0,
            max_chair_emd: 0.08,
            max_group_emd: 0.05,
            max_spacing_variance: 0.009,
            max_radius_residual: 0.01,
            chair_radius: DEFAULT_CHAIR_RADIUS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuccessReport {
    pub success: bool,
    /// Mean per-object transport distance from the initial to the final scene.
    pub mean_move_distance: f64,
    /// Largest chair deviation from its table-facing orientation, radians.
    pub max_angular_offset: f64,
    /// Symmetry: summed chair EMD to the ideal slots. Grouping: the largest
    /// per-table sum. Uniform spacing: mean |chair distance − radius|.
    pub emd_residual: f64,
    /// Uniform spacing: largest per-table variance of adjacent angular gaps.
    pub spacing_variance: f64,
    /// Grouping by shape: every row holds 3 chairs of one shape.
    pub grouping_valid: bool,
}

struct Parts<'a> {
    tables: Vec<&'a ObjectState>,
    chairs: Vec<&'a ObjectState>,
}

fn split(scene: &Scene, variant: Variant) -> Result<Parts<'_>> {
    let mismatch = |reason: String| Error::VariantMismatch {
        variant: variant.to_string(),
        reason,
    };
    if scene.class_count != CLASS_COUNT {
        return Err(mismatch(format!("expected {CLASS_COUNT} classes, got {}", scene.class_count)));
    }
    let tables: Vec<_> = scene.objects.iter().filter(|o| o.class_id == TABLE).collect();
    let chairs: Vec<_> = scene.objects.iter().filter(|o| o.class_id == CHAIR).collect();
    if tables.len() != 2 {
        return Err(mismatch(format!("expected 2 tables, got {}", tables.len())));
    }
    match variant {
        Variant::SymmetryParallelism | Variant::GroupingByShape if chairs.len() != 12 => {
            return Err(mismatch(format!("expected 12 chairs, got {}", chairs.len())));
        }
        Variant::UniformSpacing if chairs.is_empty() => {
            return Err(mismatch("no chairs".into()));
        }
        Variant::GroupingByShape => {
            let ones = chairs.iter().filter(|c| c.shape_id == 1).count();
            let twos = chairs.iter().filter(|c| c.shape_id == 2).count();
            if ones != 6 || twos != 6 {
                return Err(mismatch(format!("expected 6+6 chair shapes, got {ones}+{twos}")));
            }
        }
        _ => {}
    }
    Ok(Parts { tables, chairs })
}

fn nearest_table<'a>(tables: &[&'a ObjectState], p: Vec2) -> (usize, &'a ObjectState) {
    let i = if dist(tables[0].translation, p) <= dist(tables[1].translation, p) { 0 } else { 1 };
    (i, tables[i])
}

pub fn evaluate_success(initial: &Scene, final_scene: &Scene, variant: Variant) -> Result<SuccessReport> {
    evaluate_success_with(initial, final_scene, variant, &SuccessCriteria::default())
}

pub fn evaluate_success_with(
    initial: &Scene,
    final_scene: &Scene,
    variant: Variant,
    criteria: &SuccessCriteria,
) -> Result<SuccessReport> {
    split(initial, variant)?;
    let parts = split(final_scene, variant)?;
    let mean_move_distance = emd_to_gt(initial, final_scene)?;

    let mut report = SuccessReport {
        success: false,
        mean_move_distance,
        max_angular_offset: 0.0,
        emd_residual: 0.0,
        spacing_variance: 0.0,
        grouping_valid: true,
    };

    match variant {
        Variant::SymmetryParallelism | Variant::GroupingByShape => {
            let slots: Vec<(usize, usize, Vec2)> = parts
                .tables
                .iter()
                .enumerate()
                .flat_map(|(ti, t)| {
                    let angle = t.angle();
                    rect_slots()
                        .into_iter()
                        .enumerate()
                        .map(move |(si, (local, _))| (ti, si / 3, to_world(t.translation, angle, local)))
                })
                .collect();

            for c in &parts.chairs {
                let (_, table) = nearest_table(&parts.tables, c.translation);
                let angle = table.angle();
                let local = to_local(table.translation, angle, c.translation);
                let facing = if local[0] < 0.0 { angle } else { angle + PI };
                let off = wrap_angle(c.angle() - facing).abs();
                report.max_angular_offset = report.max_angular_offset.max(off);
            }

            let cost: Vec<Vec<f64>> = parts
                .chairs
                .iter()
                .map(|c| slots.iter().map(|s| dist(c.translation, s.2)).collect())
                .collect();
            let (mapping, _) = hungarian(&cost);
            let mut per_table = [0.0; 2];
            let mut row_shapes: [Vec<usize>; 4] = Default::default();
            for (ci, &si) in mapping.iter().enumerate() {
                let (ti, row, _) = slots[si];
                per_table[ti] += cost[ci][si];
                row_shapes[ti * 2 + row].push(parts.chairs[ci].shape_id);
            }
            let angular_ok = report.max_angular_offset < criteria.max_angular_offset;
            let move_ok = mean_move_distance < criteria.max_mean_move;
            if variant == Variant::SymmetryParallelism {
                report.emd_residual = per_table[0] + per_table[1];
                report.success = move_ok && angular_ok && report.emd_residual < criteria.max_chair_emd;
            } else {
                report.emd_residual = per_table[0].max(per_table[1]);
                report.grouping_valid = row_shapes
                    .iter()
                    .all(|row| row.len() == 3 && row.iter().all(|&s| s == row[0]));
                report.success = move_ok
                    && angular_ok
                    && report.emd_residual < criteria.max_group_emd
                    && report.grouping_valid;
            }
        }
        Variant::UniformSpacing => {
            let mut angles: [Vec<f64>; 2] = Default::default();
            let mut radius_residual = 0.0;
            for c in &parts.chairs {
                let (ti, table) = nearest_table(&parts.tables, c.translation);
                let d = [
                    table.translation[0] - c.translation[0],
                    table.translation[1] - c.translation[1],
                ];
                let facing = d[1].atan2(d[0]);
                let off = wrap_angle(c.angle() - facing).abs();
                report.max_angular_offset = report.max_angular_offset.max(off);
                radius_residual += (dist(c.translation, table.translation) - criteria.chair_radius).abs();
                angles[ti].push((-d[1]).atan2(-d[0]));
            }
            report.emd_residual = radius_residual / parts.chairs.len() as f64;
            report.spacing_variance = angles
                .iter()
                .map(|a| angular_gap_variance(a))
                .fold(0.0, f64::max);
            report.success = mean_move_distance < criteria.max_mean_move
                && report.max_angular_offset < criteria.max_angular_offset
                && report.spacing_variance < criteria.max_spacing_variance
                && report.emd_residual < criteria.max_radius_residual;
        }
    }
    Ok(report)
}

/// Population variance of the cyclic gaps between sorted angles.
pub fn angular_gap_variance(angles: &[f64]) -> f64 {
    if angles.len() < 2 {
        return 0.0;
    }
    let mut a: Vec<f64> = angles.iter().map(|x| x.rem_euclid(TAU)).collect();
    a.sort_by(f64::total_cmp);
    let n = a.len();
    let gaps: Vec<f64> = (0..n)
        .map(|i| if i + 1 < n { a[i + 1] - a[i] } else { a[0] + TAU - a[n - 1] })
        .collect();
    let mean = gaps.iter().sum::<f64>() / n as f64;
    gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n as f64
}

/// Angle a chair at `pos` should face to look at `target`.
pub fn facing_angle(pos: Vec2, target: Vec2) -> f64 {
    (target[1] - pos[1]).atan2(target[0] - pos[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn uniform_spacing_has_equal_gaps() {
        let mut spec = TableChairSpec::new(Variant::UniformSpacing, 3);
        spec.chairs_per_table_range = (4, 4);
        let s = generate_clean(&spec).unwrap();
        let tables: Vec<_> = s.objects.iter().filter(|o| o.class_id == TABLE).collect();
        for t in &tables {
            let angles: Vec<f64> = s
                .objects
                .iter()
                .filter(|o| o.class_id == CHAIR && dist(o.translation, t.translation) < 0.3)
                .map(|o| facing_angle(t.translation, o.translation))
                .collect();
            assert_eq!(angles.len(), 4);
            let mut sorted: Vec<f64> = angles.iter().map(|a| a.rem_euclid(TAU)).collect();
            sorted.sort_by(f64::total_cmp);
            for w in sorted.windows(2) {
                assert!((w[1] - w[0] - FRAC_PI_2).abs() < 1e-12);
            }
            assert!(angular_gap_variance(&angles) < 1e-24);
        }
        for c in s.objects.iter().filter(|o| o.class_id == CHAIR) {
            let d = tables.iter().map(|t| dist(t.translation, c.translation)).fold(f64::INFINITY, f64::min);
            assert!((d - DEFAULT_CHAIR_RADIUS).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetry_rows_mirror_about_table_axis() {
        let s = generate_clean(&TableChairSpec::new(Variant::SymmetryParallelism, 8)).unwrap();
        assert_eq!(s.objects.len(), 14);
        for block in s.objects.chunks(7) {
            let t = block[0].translation;
            let (left, right) = block[1..].split_at(3);
            for (l, r) in left.iter().zip(right) {
                assert!(((l.translation[0] - t[0]) + (r.translation[0] - t[0])).abs() < 1e-9);
                assert!((l.translation[1] - r.translation[1]).abs() < 1e-9);
                assert!((l.rotation[0] + r.rotation[0]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn grouping_rows_share_shape() {
        let s = generate_clean(&TableChairSpec::new(Variant::GroupingByShape, 2)).unwrap();
        for block in s.objects.chunks(7) {
            assert!(block[1..4].iter().all(|o| o.shape_id == block[1].shape_id));
            assert!(block[4..7].iter().all(|o| o.shape_id == block[4].shape_id));
            assert_ne!(block[1].shape_id, block[4].shape_id);
        }
    }

    #[test]
    fn clean_scenes_pass_self_evaluation() {
        for variant in Variant::ALL {
            for seed in 0..50 {
                let s = generate_clean(&TableChairSpec::new(variant, seed)).unwrap();
                let r = evaluate_success(&s, &s, variant).unwrap();
                assert!(r.success, "{variant} seed {seed}: {r:?}");
                assert!(r.emd_residual < 1e-9 && r.spacing_variance < 1e-20 && r.mean_move_distance == 0.0);
                assert!(r.max_angular_offset < 1e-9);
            }
        }
    }

    #[test]
    fn rotated_chair_fails_angular_criterion() {
        let s = generate_clean(&TableChairSpec::new(Variant::SymmetryParallelism, 1)).unwrap();
        let mut f = s.clone();
        let a = f.objects[2].angle() + PI / 30.0;
        f.objects[2].rotation = [a.cos(), a.sin()];
        let r = evaluate_success(&s, &f, Variant::SymmetryParallelism).unwrap();
        assert!(!r.success);
        assert!((r.max_angular_offset - PI / 30.0).abs() < 1e-9);
    }

    #[test]
    fn near_miss_chair_emd_fails() {
        let s = generate_clean(&TableChairSpec::new(Variant::SymmetryParallelism, 4)).unwrap();
        // Shift 9 chairs outward along x by 0.01 each: each stays nearest to its
        // own slot, so the optimal transport sum is 9 * 0.01 = 0.09.
        let mut f = s.clone();
        let mut moved = 0;
        for block in f.objects.chunks_mut(7) {
            let tx = block[0].translation[0];
            for c in block[1..].iter_mut() {
                if moved < 9 {
                    let dir = (c.translation[0] - tx).signum();
                    c.translation[0] += 0.01 * dir;
                    moved += 1;
                }
            }
        }
        let r = evaluate_success(&s, &f, Variant::SymmetryParallelism).unwrap();
        assert!((r.emd_residual - 0.09).abs() < 1e-9, "{}", r.emd_residual);
        assert!(!r.success);
        // Seven shifted chairs sum to 0.07 and pass.
        let mut g = s.clone();
        let mut moved = 0;
        for block in g.objects.chunks_mut(7) {
            let tx = block[0].translation[0];
            for c in block[1..].iter_mut() {
                if moved < 7 {
                    c.translation[0] += 0.01 * (c.translation[0] - tx).signum();
                    moved += 1;
                }
            }
        }
        assert!(evaluate_success(&s, &g, Variant::SymmetryParallelism).unwrap().success);
    }

    #[test]
    fn structure_mismatch_is_reported() {
        let s = generate_clean(&TableChairSpec::new(Variant::UniformSpacing, 1)).unwrap();
        let r = evaluate_success(&s, &s, Variant::SymmetryParallelism);
        if s.objects.len() != 14 {
            assert!(matches!(r, Err(Error::VariantMismatch { .. })));
        }
        let sym = generate_clean(&TableChairSpec::new(Variant::SymmetryParallelism, 1)).unwrap();
        assert!(matches!(
            evaluate_success(&sym, &sym, Variant::GroupingByShape),
            Err(Error::VariantMismatch { .. })
        ));
    }

    #[test]
    fn bimodal_mode_fraction() {
        let noise = BimodalNoise::default();
        let n = 10_000;
        let large = (0..n).filter(|&i| noise.sample(i).0 == NoiseMode::Large).count();
        assert!((large as f64 / n as f64 - 0.5).abs() < 0.02);

        let s = generate_clean(&TableChairSpec::new(Variant::SymmetryParallelism, 0)).unwrap();
        let small_only = BimodalNoise {
            large_probability: 0.0,
            ..noise
        };
        for seed in 0..50 {
            let (p, mode) = perturb_bimodal_with(&s, &small_only, seed);
            assert_eq!(mode, NoiseMode::Small);
            assert_eq!(p.class_histogram(), s.class_histogram());
            for (a, b) in p.objects.iter().zip(&s.objects) {
                // 0.01 * |z| * |z'| stays far below 0.2 for any plausible draw.
                assert!(dist(a.translation, b.translation) < 0.2);
            }
        }
    }

    proptest! {
        #[test]
        fn evaluation_ignores_object_order(seed in 0u64..500, rot in 1usize..13, vi in 0usize..3) {
            let variant = Variant::ALL[vi];
            let s = generate_clean(&TableChairSpec::new(variant, seed)).unwrap();
            let p = perturb(&s, NoiseSpec::new(0.02, 0.02).unwrap(), seed);
            let mut shuffled = p.clone();
            let k = rot % shuffled.objects.len();
            shuffled.objects.rotate_left(k);
            let a = evaluate_success(&s, &p, variant).unwrap();
            let b = evaluate_success(&s, &shuffled, variant).unwrap();
            prop_assert_eq!(a.success, b.success);
            prop_assert!((a.emd_residual - b.emd_residual).abs() < 1e-12);
            prop_assert!((a.mean_move_distance - b.mean_move_distance).abs() < 1e-12);
            prop_assert!((a.max_angular_offset - b.max_angular_offset).abs() < 1e-12);
        }

        #[test]
        fn pushing_a_residual_past_threshold_fails(seed in 0u64..200, extra in 0.0f64..1.0) {
            let s = generate_clean(&TableChairSpec::new(Variant::SymmetryParallelism, seed)).unwrap();
            let mut f = s.clone();
            let a = f.objects[1].angle() + PI / 60.0 + 1e-6 + extra;
            f.objects[1].rotation = [a.cos(), a.sin()];
            prop_assert!(!evaluate_success(&s, &f, Variant::SymmetryParallelism).unwrap().success);
        }
    }
}
