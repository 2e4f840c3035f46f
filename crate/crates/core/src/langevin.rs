//! Iterative inference: annealed Langevin updates toward the network's
//! predicted clean poses.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, FloorTokenCache, TransformPrediction};
use crate::error::{Error, Result};
use crate::rng;
use crate::scene::{rotate_unit, Scene, DEFAULT_ROTATION_NOISE_RATIO};
use crate::synth::wrap_angle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinSchedule {
    pub alpha0: f64,
    pub a1: f64,
    pub beta0: f64,
    pub b1: f64,
    pub b2: usize,
    /// Translation stop threshold on the Frobenius norm of the predicted
    /// displacement.
    pub kappa_t: f64,
    /// Rotation stop threshold, radians.
    pub kappa_r: f64,
    pub k_consecutive: usize,
    pub max_iters: usize,
    /// Angle noise std per unit of translation noise std.
    pub rotation_noise_ratio: f64,
}

impl LangevinSchedule {
    pub fn living_room() -> Self {
        Self {
            alpha0: 0.1,
            a1: 0.005,
            beta0: 0.01,
            b1: 0.9,
            b2: 10,
            kappa_t: 0.01,
            kappa_r: 0.005,
            k_consecutive: 3,
            max_iters: 1500,
            rotation_noise_ratio: DEFAULT_ROTATION_NOISE_RATIO,
        }
    }

    pub fn bedroom() -> Self {
        Self {
            alpha0: 0.08,
            beta0: 0.008,
            b2: 8,
            ..Self::living_room()
        }
    }

    pub fn table_chair() -> Self {
        Self {
            alpha0: 0.12,
            beta0: 0.01,
            b2: 2,
            k_consecutive: 1,
            ..Self::living_room()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "living-room" => Ok(Self::living_room()),
            "bedroom" => Ok(Self::bedroom()),
            "table-chair" => Ok(Self::table_chair()),
            other => Err(Error::Config(format!(
                "unknown schedule preset {other:?} (living-room, bedroom, table-chair)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha0 > 0.0
            && self.alpha0.is_finite()
            && self.a1 >= 0.0
            && self.a1.is_finite()
            && self.beta0 >= 0.0
            && self.beta0.is_finite()
            && self.b1 > 0.0
            && self.b1 <= 1.0
            && self.b2 >= 1
            && self.kappa_t >= 0.0
            && self.kappa_r >= 0.0
            && self.k_consecutive >= 1
            && self.max_iters >= 1
            && self.rotation_noise_ratio >= 0.0
            && self.rotation_noise_ratio.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Langevin schedule {self:?}")))
        }
    }

    /// Step size `α₀ / (1 + a₁τ)`.
    pub fn alpha(&self, tau: usize) -> f64 {
        self.alpha0 / (1.0 + self.a1 * tau as f64)
    }

    /// Noise scale `β₀ · b₁^⌊τ/b₂⌋`.
    pub fn beta(&self, tau: usize) -> f64 {
        self.beta0 * self.b1.powf((tau / self.b2) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceVariant {
    Direct,
    #[serde(rename = "grad")]
    GradNoNoise,
    #[serde(rename = "grad-noise")]
    GradWithNoise,
}

impl InferenceVariant {
    pub const ALL: [InferenceVariant; 3] = [
        InferenceVariant::Direct,
        InferenceVariant::GradNoNoise,
        InferenceVariant::GradWithNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InferenceVariant::Direct => "direct",
            InferenceVariant::GradNoNoise => "grad",
            InferenceVariant::GradWithNoise => "grad-noise",
        }
    }
}

impl fmt::Display for InferenceVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InferenceVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown inference variant {s:?} (direct, grad, grad-noise)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
    /// The single pass of the direct variant.
    SinglePass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Frobenius norm of predicted translation displacements.
    pub translation: f64,
    /// Euclidean norm over objects of predicted angle changes, radians.
    pub rotation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseTrajectory {
    /// States from the input on. The evaluation that confirms convergence
    /// adds no state.
    pub snapshots: Vec<Scene>,
    /// Predicted displacement magnitudes at each iteration.
    pub steps: Vec<StepStats>,
    pub termination: Termination,
}

impl DenoiseTrajectory {
    pub fn initial(&self) -> &Scene {
        &self.snapshots[0]
    }

    pub fn final_scene(&self) -> &Scene {
        self.snapshots.last().expect("trajectory has snapshots")
    }

    /// Number of network evaluations.
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }
}

fn displacement(scene: &Scene, pred: &TransformPrediction) -> StepStats {
    let mut t = 0.0;
    let mut r = 0.0;
    for (i, o) in scene.objects.iter().enumerate() {
        let p = pred.translation(i);
        t += (p[0] - o.translation[0]).powi(2) + (p[1] - o.translation[1]).powi(2);
        let q = pred.rotation(i);
        let d = wrap_angle(q[1].atan2(q[0]) - o.angle());
        r += d * d;
    }
    StepStats {
        translation: t.sqrt(),
        rotation: r.sqrt(),
    }
}

fn checked(pred: TransformPrediction, scene: &Scene) -> Result<TransformPrediction> {
    if pred.len() != scene.len() {
        return Err(Error::shape("denoise", format!("{} predictions for {} objects", pred.len(), scene.len())));
    }
    Ok(pred)
}

/// Runs inference from `scene`. The trajectory's first snapshot is the input
/// and it holds at most `max_iters + 1` snapshots.
pub fn denoise(
    model: &Denoiser,
    scene: &Scene,
    schedule: &LangevinSchedule,
    variant: InferenceVariant,
    seed: u64,
) -> Result<DenoiseTrajectory> {
    let mut cache = FloorTokenCache::new();
    denoise_with(|s| model.forward_cached(s, Some(&mut cache)), scene, schedule, variant, seed)
}

/// [`denoise`] with an arbitrary pose predictor in place of the network.
pub fn denoise_with(
    mut predict: impl FnMut(&Scene) -> Result<TransformPrediction>,
    scene: &Scene,
    schedule: &LangevinSchedule,
    variant: InferenceVariant,
    seed: u64,
) -> Result<DenoiseTrajectory> {
    schedule.validate()?;
    scene.validate()?;
    let mut snapshots = vec![scene.clone()];
    let mut steps = Vec::new();

    if variant == InferenceVariant::Direct {
        let pred = checked(predict(scene)?, scene)?;
        steps.push(displacement(scene, &pred));
        snapshots.push(pred.apply(scene));
        return Ok(DenoiseTrajectory {
            snapshots,
            steps,
            termination: Termination::SinglePass,
        });
    }

    let mut r = rng::seeded(seed);
    let mut calm = 0;
    let mut current = scene.clone();
    for tau in 0..schedule.max_iters {
        let pred = checked(predict(&current)?, &current)?;
        let stats = displacement(&current, &pred);
        let small = stats.translation < schedule.kappa_t && stats.rotation < schedule.kappa_r;
        calm = if small { calm + 1 } else { 0 };
        steps.push(stats);
        if calm >= schedule.k_consecutive {
            return Ok(DenoiseTrajectory {
                snapshots,
                steps,
                termination: Termination::Converged,
            });
        }
        let alpha = schedule.alpha(tau);
        let beta = match variant {
            InferenceVariant::GradWithNoise => schedule.beta(tau),
            _ => 0.0,
        };
        let mut next = current.clone();
        for (i, o) in next.objects.iter_mut().enumerate() {
            let p = pred.translation(i);
            let q = pred.rotation(i);
            for k in 0..2 {
                o.translation[k] += alpha * (p[k] - o.translation[k]);
            }
            let blended = [
                o.rotation[0] + alpha * (q[0] - o.rotation[0]),
                o.rotation[1] + alpha * (q[1] - o.rotation[1]),
            ];
            let n = blended[0].hypot(blended[1]);
            o.rotation = if n > 1e-12 { [blended[0] / n, blended[1] / n] } else { q };
            if beta > 0.0 {
                for k in 0..2 {
                    let z: f64 = StandardNormal.sample(&mut r);
                    o.translation[k] += beta * z;
                }
                let z: f64 = StandardNormal.sample(&mut r);
                o.rotation = rotate_unit(o.rotation, beta * schedule.rotation_noise_ratio * z);
            }
        }
        if !next.objects.iter().all(|o| o.translation.iter().chain(&o.rotation).all(|v| v.is_finite())) {
            return Err(Error::NonFinite("Langevin update"));
        }
        snapshots.push(next.clone());
        current = next;
    }
    Ok(DenoiseTrajectory {
        snapshots,
        steps,
        termination: Termination::MaxIters,
    })
}

/// Mean straight-line distance between each object's initial and final
/// translation, objects keeping their indices.
pub fn distance_moved(trajectory: &DenoiseTrajectory) -> Result<f64> {
    if trajectory.snapshots.is_empty() {
        return Err(Error::InvalidScene("trajectory has no snapshots".into()));
    }
    let (a, b) = (trajectory.initial(), trajectory.final_scene());
    let total: f64 = a
        .objects
        .iter()
        .zip(&b.objects)
        .map(|(p, q)| crate::scene::dist(p.translation, q.translation))
        .sum();
    Ok(total / a.len() as f64)
}
