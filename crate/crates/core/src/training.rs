//! The denoising objective and the optimization loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::assign::match_scenes;
use crate::denoiser::{Denoiser, DenoiserConfig, TransformPrediction};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Gradients, Graph, Tensor, Var};
use crate::rng;
use crate::scene::{perturb, sample_noise_level, Scene};
use crate::synth::{self, BimodalNoise, TableChairSpec, Variant};

/// Where clean training scenes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A pool of generated Table-Chair scenes, perturbed with the two-mode
    /// kernel.
    Synthetic { variant: Variant, scene_count: usize },
    /// Scene JSON files, perturbed with half-normal noise levels.
    SceneDir { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: DenoiserConfig,
    pub source: DataSource,
    pub base_noise_std: f64,
    pub lambda1: f64,
    pub batch_size: usize,
    pub step_count: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub clip_norm: f64,
    /// Decay of an exponential moving average of the weights; the averaged
    /// weights are checkpointed and returned. 0 disables averaging.
    #[serde(default)]
    pub ema_decay: f64,
    pub seed: u64,
    /// Log a mean-loss row every this many steps.
    pub log_every: usize,
    /// Write `ckpt_{step}.json` every this many steps; 0 writes only the
    /// final checkpoint.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Desk-scale Table-Chair training.
    pub fn table_chair(variant: Variant) -> Self {
        Self {
            model: DenoiserConfig::desk(synth::CLASS_COUNT, synth::SHAPE_COUNT),
            source: DataSource::Synthetic {
                variant,
                scene_count: 2000,
            },
            base_noise_std: 0.1,
            lambda1: 0.3,
            batch_size: 16,
            step_count: 10_000,
            learning_rate: 1e-4,
            clip_norm: 0.0,
            ema_decay: 0.0,
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.base_noise_std.is_finite() && self.base_noise_std > 0.0) {
            return bad("base_noise_std must be positive");
        }
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return bad("lambda1 must be non-negative");
        }
        if self.batch_size == 0 || self.step_count == 0 || self.log_every == 0 {
            return bad("batch_size, step_count and log_every must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative");
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }
}

/// Per-object targets for one messy scene: the clean pose of each object's
/// matched partner, as rows `(tx, ty, cos, sin)`.
fn matched_targets(clean: &Scene, messy: &Scene) -> Result<Vec<[f64; 4]>> {
    let a = match_scenes(messy, clean)?;
    Ok(a.mapping
        .iter()
        .map(|&j| {
            let o = &clean.objects[j];
            [o.translation[0], o.translation[1], o.rotation[0], o.rotation[1]]
        })
        .collect())
}

/// Mean over objects of `‖Δ‖₂² + λ₁‖Δ‖₁`, with translation and rotation
/// residuals taken against the clean pose matched to each messy object.
pub fn denoising_loss(pred: &TransformPrediction, clean: &Scene, messy: &Scene, lambda1: f64) -> Result<f64> {
    if pred.len() != messy.len() {
        return Err(Error::shape(
            "denoising_loss",
            format!("{} predictions for {} objects", pred.len(), messy.len()),
        ));
    }
    let targets = matched_targets(clean, messy)?;
    let total: f64 = pred
        .rows
        .iter()
        .zip(&targets)
        .map(|(p, t)| {
            let d: Vec<f64> = p.iter().zip(t).map(|(a, b)| a - b).collect();
            d.iter().map(|v| v * v).sum::<f64>() + lambda1 * d.iter().map(|v| v.abs()).sum::<f64>()
        })
        .sum();
    Ok(total / messy.len() as f64)
}

/// Records the batch loss (mean over scenes of the per-scene loss) on `g`.
pub fn batch_loss(g: &mut Graph, output: Var, pairs: &[(&Scene, &Scene)], lambda1: f64) -> Result<Var> {
    let n: usize = pairs.iter().map(|(_, m)| m.len()).sum();
    if g.shape(output) != (n, 4) {
        return Err(Error::shape("batch_loss", format!("{:?} for {n} objects", g.shape(output))));
    }
    let mut targets = Vec::with_capacity(n * 4);
    let mut weights = Vec::with_capacity(n * 4);
    for (clean, messy) in pairs {
        for t in matched_targets(clean, messy)? {
            targets.extend_from_slice(&t);
        }
        let w = 1.0 / (messy.len() as f64 * pairs.len() as f64);
        weights.extend(std::iter::repeat_n(w, messy.len() * 4));
    }
    let target = g.input(Tensor::from_vec(n, 4, targets)?);
    let weight = g.input(Tensor::from_vec(n, 4, weights)?);
    let diff = g.sub(output, target)?;
    let sq = g.square(diff);
    let ab = g.abs(diff);
    let ab = g.scale(ab, lambda1);
    let per = g.add(sq, ab)?;
    let weighted = g.mul(per, weight)?;
    Ok(g.sum(weighted))
}

/// Loss and parameter gradients for one batch of (clean, messy) pairs.
pub fn loss_and_gradients(model: &Denoiser, pairs: &[(&Scene, &Scene)], lambda1: f64) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(model.params());
    let messy: Vec<&Scene> = pairs.iter().map(|(_, m)| *m).collect();
    let out = model.forward_batch(&mut g, &messy, None)?;
    let loss = batch_loss(&mut g, out.output, pairs, lambda1)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    Ok((value, g.backward(loss)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub mean_loss: f64,
    pub wall_secs: f64,
}

pub struct TrainOutcome {
    pub model: Denoiser,
    pub log: Vec<LogRow>,
}

/// Clean scenes for `source`, in a deterministic order.
pub fn load_dataset(source: &DataSource, seed: u64) -> Result<Vec<Scene>> {
    let scenes = match source {
        DataSource::Synthetic { variant, scene_count } => (0..*scene_count)
            .map(|i| synth::generate_clean(&TableChairSpec::new(*variant, rng::derive(seed, i as u64))))
            .collect::<Result<Vec<_>>>()?,
        DataSource::SceneDir { path } => crate::io::read_scene_dir(path)?,
    };
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(scenes)
}

/// Trains a fresh model on `config`, writing checkpoints and `train_log.csv`
/// into `out_dir` when given.
pub fn train(config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = load_dataset(&config.source, rng::derive(config.seed, 1))?;
    let model = Denoiser::new(config.model.clone(), rng::derive(config.seed, 2))?;
    train_model(config, model, &dataset, out_dir)
}

/// Continues training `model` on the clean scenes in `dataset`.
pub fn train_model(config: &TrainConfig, mut model: Denoiser, dataset: &[Scene], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if model.config() != &config.model {
        return Err(Error::UntrainedParams("model does not match the training config".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let bimodal = matches!(config.source, DataSource::Synthetic { .. });
    let noise = BimodalNoise::default();
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            clip_norm: config.clip_norm,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut shadow = (config.ema_decay > 0.0).then(|| model.params().clone());
    let start = Instant::now();
    let mut log = Vec::new();
    let mut window = 0.0;
    let mut window_len = 0;
    for step in 1..=config.step_count {
        let step_seed = rng::derive(config.seed, 1000 + step as u64);
        let mut r = rng::seeded(step_seed);
        let mut pairs = Vec::with_capacity(config.batch_size);
        for b in 0..config.batch_size {
            let clean = &dataset[r.random_range(0..dataset.len())];
            let scene_seed = rng::derive(step_seed, b as u64);
            let messy = if bimodal {
                synth::perturb_bimodal_with(clean, &noise, scene_seed).0
            } else {
                let spec = sample_noise_level(config.base_noise_std, rng::derive(scene_seed, 0));
                perturb(clean, spec, rng::derive(scene_seed, 1))
            };
            pairs.push((clean, messy));
        }
        let refs: Vec<(&Scene, &Scene)> = pairs.iter().map(|(c, m)| (*c, m)).collect();
        let (loss, grads) = loss_and_gradients(&model, &refs, config.lambda1)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite("training gradients"));
        }
        opt.step(model.params_mut(), &grads);
        if let Some(avg) = shadow.as_mut() {
            avg.ema_update(model.params(), config.ema_decay);
        }
        window += loss;
        window_len += 1;
        if step % config.log_every == 0 || step == config.step_count {
            log.push(LogRow {
                step,
                mean_loss: window / window_len as f64,
                wall_secs: start.elapsed().as_secs_f64(),
            });
            window = 0.0;
            window_len = 0;
        }
        let checkpoint_due = (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) || step == config.step_count;
        if let (Some(dir), true) = (out_dir, checkpoint_due) {
            let mut meta = serde_json::Map::new();
            meta.insert("step".into(), step.into());
            let ckpt = match &shadow {
                Some(avg) => Denoiser::from_params(model.config().clone(), avg.clone())?.checkpoint(meta),
                None => model.checkpoint(meta),
            };
            ckpt.save(&dir.join(format!("ckpt_{step}.json")))?;
        }
    }
    if let Some(avg) = shadow {
        model = Denoiser::from_params(model.config().clone(), avg)?;
    }
    if let Some(dir) = out_dir {
        write_log(&dir.join("train_log.csv"), &log)?;
    }
    Ok(TrainOutcome { model, log })
}

pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut text = String::from("step,mean_loss,wall_secs\n");
    for row in log {
        writeln!(text, "{},{},{:.3}", row.step, row.mean_loss, row.wall_secs).expect("string write");
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{FloorPlan, ObjectState};

    fn one(t: [f64; 2]) -> Scene {
        Scene::new(1, FloorPlan::unit_square(), vec![ObjectState::new(0, t, 0.0, [0.1, 0.1], 0)]).unwrap()
    }

    fn rows_of(scene: &Scene) -> TransformPrediction {
        TransformPrediction {
            rows: scene
                .objects
                .iter()
                .map(|o| [o.translation[0], o.translation[1], o.rotation[0], o.rotation[1]])
                .collect(),
        }
    }

    #[test]
    fn exact_prediction_has_zero_loss() {
        let clean = synth::generate_clean(&TableChairSpec::new(Variant::UniformSpacing, 3)).unwrap();
        let messy = synth::perturb_bimodal(&clean, 4);
        // Predicting the matched clean poses is a perfect answer.
        let targets = matched_targets(&clean, &messy).unwrap();
        let pred = TransformPrediction { rows: targets };
        assert_eq!(denoising_loss(&pred, &clean, &messy, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn single_object_squared_offset() {
        let clean = one([0.2, 0.3]);
        let pred = rows_of(&one([0.3, 0.3]));
        let loss = denoising_loss(&pred, &clean, &clean, 0.0).unwrap();
        assert!((loss - 0.01).abs() < 1e-15);
        let with_l1 = denoising_loss(&pred, &clean, &clean, 0.5).unwrap();
        assert!((with_l1 - (0.01 + 0.05)).abs() < 1e-15);
    }

    fn pair_scene(a: [f64; 2], b: [f64; 2]) -> Scene {
        Scene::new(
            1,
            FloorPlan::unit_square(),
            vec![
                ObjectState::new(0, a, 0.0, [0.1, 0.1], 0),
                ObjectState::new(0, b, 0.0, [0.1, 0.1], 0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn loss_uses_the_cheaper_pairing() {
        let clean = pair_scene([-0.5, 0.0], [0.5, 0.0]);
        // Messy object 0 sits next to clean object 1 and vice versa.
        let messy = pair_scene([0.45, 0.0], [-0.45, 0.0]);
        let pred = rows_of(&messy);
        let loss = denoising_loss(&pred, &clean, &messy, 0.3).unwrap();
        // Brute-force both pairings and keep the one the matcher would pick.
        let per = |p: [f64; 4], t: &ObjectState| {
            let d = [p[0] - t.translation[0], p[1] - t.translation[1], p[2] - t.rotation[0], p[3] - t.rotation[1]];
            d.iter().map(|v| v * v).sum::<f64>() + 0.3 * d.iter().map(|v| v.abs()).sum::<f64>()
        };
        let identity = (per(pred.rows[0], &clean.objects[0]) + per(pred.rows[1], &clean.objects[1])) / 2.0;
        let swapped = (per(pred.rows[0], &clean.objects[1]) + per(pred.rows[1], &clean.objects[0])) / 2.0;
        assert_eq!(loss, swapped);
        assert!(loss < identity);
    }

    #[test]
    fn class_mismatch_is_reported() {
        let clean = one([0.0, 0.0]);
        let mut messy = clean.clone();
        messy.class_count = 2;
        messy.objects[0].class_id = 1;
        let pred = rows_of(&messy);
        assert!(matches!(
            denoising_loss(&pred, &clean, &messy, 0.3),
            Err(Error::ClassMultisetMismatch { .. })
        ));
    }

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::table_chair(Variant::SymmetryParallelism);
        c.model.token_dim = 16;
        c.model.head_count = 2;
        c.model.layer_count = 1;
        c.model.mlp_hidden_dim = 16;
        c.model.pe_frequencies = 4;
        c.model.attribute_dim = 8;
        c.model.floor_points = 16;
        c.model.floor_hidden = [8, 8, 16];
        c.model.head_hidden_dim = 8;
        c.source = DataSource::Synthetic {
            variant: Variant::SymmetryParallelism,
            scene_count: 4,
        };
        c.batch_size = 2;
        c.step_count = 5;
        c.log_every = 1;
        c
    }

    #[test]
    fn batch_loss_matches_the_scalar_loss() {
        let c = tiny_config();
        let model = Denoiser::new(c.model.clone(), 1).unwrap();
        let clean_a = synth::generate_clean(&TableChairSpec::new(Variant::SymmetryParallelism, 1)).unwrap();
        let clean_b = synth::generate_clean(&TableChairSpec::new(Variant::UniformSpacing, 2)).unwrap();
        let messy_a = synth::perturb_bimodal(&clean_a, 3);
        let messy_b = synth::perturb_bimodal(&clean_b, 4);
        let (loss, _) = loss_and_gradients(&model, &[(&clean_a, &messy_a), (&clean_b, &messy_b)], 0.3).unwrap();
        let la = denoising_loss(&model.forward(&messy_a).unwrap(), &clean_a, &messy_a, 0.3).unwrap();
        let lb = denoising_loss(&model.forward(&messy_b).unwrap(), &clean_b, &messy_b, 0.3).unwrap();
        assert!((loss - (la + lb) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut c = tiny_config();
        c.learning_rate = 0.0;
        let dataset = load_dataset(&c.source, 0).unwrap();
        let model = Denoiser::new(c.model.clone(), 3).unwrap();
        let before = model.params().clone();
        let out = train_model(&c, model, &dataset, None).unwrap();
        assert_eq!(out.model.params(), &before);
    }

    #[test]
    fn fixed_seed_reproduces_loss_curve() {
        let c = tiny_config();
        let a = train(&c, None).unwrap();
        let b = train(&c, None).unwrap();
        let losses = |o: &TrainOutcome| o.log.iter().map(|r| r.mean_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.log.len(), 5);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let c = tiny_config();
        let model = Denoiser::new(c.model.clone(), 0).unwrap();
        assert!(matches!(train_model(&c, model, &[], None), Err(Error::EmptyDataset)));
        let mut c = tiny_config();
        c.source = DataSource::Synthetic {
            variant: Variant::UniformSpacing,
            scene_count: 0,
        };
        assert!(matches!(train(&c, None), Err(Error::EmptyDataset)));
    }

    #[test]
    fn checkpoints_and_log_are_written() {
        let mut c = tiny_config();
        c.checkpoint_every = 2;
        let dir = tempfile::tempdir().unwrap();
        train(&c, Some(dir.path())).unwrap();
        for name in ["ckpt_2.json", "ckpt_4.json", "ckpt_5.json", "train_log.csv"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let model = Denoiser::load(&dir.path().join("ckpt_5.json")).unwrap();
        assert_eq!(model.config(), &c.model);
    }

    #[test]
    fn averaged_weights_follow_the_recurrence() {
        let mut c = tiny_config();
        c.step_count = 1;
        c.learning_rate = 1e-2;
        let dataset = load_dataset(&c.source, 0).unwrap();
        let init = Denoiser::new(c.model.clone(), 3).unwrap();
        let plain = train_model(&c, init.clone(), &dataset, None).unwrap().model;
        c.ema_decay = 0.75;
        let averaged = train_model(&c, init.clone(), &dataset, None).unwrap().model;
        for ((_, a), ((_, p0), (_, p1))) in averaged.params().iter().zip(init.params().iter().zip(plain.params().iter())) {
            for (x, (y0, y1)) in a.data().iter().zip(p0.data().iter().zip(p1.data())) {
                assert!((x - (0.75 * y0 + 0.25 * y1)).abs() < 1e-15);
            }
        }
        c.ema_decay = 1.0;
        assert!(c.validate().is_err());
    }
}
