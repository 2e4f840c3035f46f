//! `rearrange`: generate, perturb, train, denoise, evaluate and draw scenes.
//!
//! Settings resolve as command-line flag, then `RR_*` environment variable,
//! then the JSON file given with `--config`, then the built-in default.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use rearrange_core::assign::emd_to_gt;
use rearrange_core::denoiser::Denoiser;
use rearrange_core::io::{self, Manifest, ManifestEntry};
use rearrange_core::langevin::{denoise, distance_moved, InferenceVariant, LangevinSchedule};
use rearrange_core::relations::{scene_relation_rates, RelationQuery};
use rearrange_core::render::{render_scene, render_trajectory, RenderOptions};
use rearrange_core::scene::{boundary_violation_fraction, perturb, NoiseSpec};
use rearrange_core::synth::{evaluate_success, generate_clean, perturb_bimodal, TableChairSpec, Variant};
use rearrange_core::training::{self, DataSource, TrainConfig};
use rearrange_core::{rng, Error, Scene};

#[derive(Parser)]
#[command(name = "rearrange", version, about = "Regular scene rearrangement by iterative denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write clean Table-Chair scenes and a manifest.
    Generate(GenerateArgs),
    /// Perturb every scene of a directory.
    Perturb(PerturbArgs),
    /// Train a denoiser; the config file is a full training config.
    Train(TrainArgs),
    /// Denoise one scene file or every scene of a directory.
    Denoise(DenoiseArgs),
    /// Score denoised scenes and write a metrics CSV.
    Eval(EvalArgs),
    /// Draw a scene or a trajectory as SVG.
    Render(RenderArgs),
    /// Integer-relation regularity rates of scenes.
    ScoreRegularity(ScoreArgs),
}

/// Fills every unset field of `$args` from `$file`.
macro_rules! merge {
    ($args:ident, $file:ident; $($field:ident),+ $(,)?) => {
        $( if $args.$field.is_none() { $args.$field = $file.$field; } )+
    };
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => Ok(io::read_json(p)?),
    }
}

fn required<T>(value: Option<T>, name: &str) -> Result<T> {
    value.with_context(|| format!("missing required setting `{name}` (flag, RR_* variable or config key)"))
}

#[derive(Args, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenerateArgs {
    #[arg(long, env = "RR_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long, env = "RR_VARIANT")]
    variant: Option<Variant>,
    #[arg(long, env = "RR_COUNT")]
    count: Option<usize>,
    #[arg(long, env = "RR_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "RR_OUT")]
    out: Option<PathBuf>,
}

fn cmd_generate(mut a: GenerateArgs) -> Result<()> {
    let f: GenerateArgs = read_config(a.config.as_deref())?;
    merge!(a, f; variant, count, seed, out);
    let variant = a.variant.unwrap_or(Variant::SymmetryParallelism);
    let count = a.count.unwrap_or(100);
    let seed = a.seed.unwrap_or(0);
    let out = required(a.out, "out")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let scene_seed = rng::derive(seed, i as u64);
        let scene = generate_clean(&TableChairSpec::new(variant, scene_seed))?;
        let file = io::scene_file_name(i);
        io::write_scene(&out.join(&file), &scene)?;
        entries.push(ManifestEntry { file, seed: scene_seed });
    }
    let manifest = Manifest {
        variant: variant.to_string(),
        master_seed: seed,
        scenes: entries,
    };
    io::write_json(&out.join("manifest.json"), &manifest)?;
    println!("wrote {count} {variant} scenes to {}", out.display());
    Ok(())
}

#[derive(Args, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PerturbArgs {
    #[arg(long, env = "RR_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Directory of clean scenes.
    #[arg(long, env = "RR_INPUT")]
    input: Option<PathBuf>,
    #[arg(long, env = "RR_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "RR_SEED")]
    seed: Option<u64>,
    /// Fixed translation noise std; without it the two-mode kernel is used.
    #[arg(long, env = "RR_SIGMA_T")]
    sigma_t: Option<f64>,
    /// Fixed angle noise std in radians; defaults to zero with `--sigma-t`.
    #[arg(long, env = "RR_SIGMA_R")]
    sigma_r: Option<f64>,
}

fn cmd_perturb(mut a: PerturbArgs) -> Result<()> {
    let f: PerturbArgs = read_config(a.config.as_deref())?;
    merge!(a, f; input, out, seed, sigma_t, sigma_r);
    let input = required(a.input, "input")?;
    let out = required(a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let noise = match (a.sigma_t, a.sigma_r) {
        (None, None) => None,
        (t, r) => Some(NoiseSpec::new(t.unwrap_or(0.0), r.unwrap_or(0.0))?),
    };
    let paths = io::scene_paths(&input)?;
    for (i, path) in &paths {
        let scene = io::read_scene(path)?;
        let s = rng::derive(seed, *i as u64);
        let messy = match noise {
            Some(n) => perturb(&scene, n, s),
            None => perturb_bimodal(&scene, s),
        };
        io::write_scene(&out.join(io::scene_file_name(*i)), &messy)?;
    }
    println!("perturbed {} scenes into {}", paths.len(), out.display());
    Ok(())
}

#[derive(Args, Default)]
struct TrainArgs {
    /// Training config JSON.
    #[arg(long, env = "RR_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "RR_OUT")]
    out: Option<PathBuf>,
    /// Synthetic source variant when no config file is given.
    #[arg(long, env = "RR_VARIANT")]
    variant: Option<Variant>,
    /// Train on the scene files of this directory.
    #[arg(long, env = "RR_SCENE_DIR")]
    scene_dir: Option<PathBuf>,
    #[arg(long, env = "RR_SCENE_COUNT")]
    scene_count: Option<usize>,
    #[arg(long, env = "RR_STEPS")]
    steps: Option<usize>,
    #[arg(long, env = "RR_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "RR_LEARNING_RATE")]
    learning_rate: Option<f64>,
    #[arg(long, env = "RR_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "RR_LOG_EVERY")]
    log_every: Option<usize>,
    #[arg(long, env = "RR_CHECKPOINT_EVERY")]
    checkpoint_every: Option<usize>,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::table_chair(a.variant.unwrap_or(Variant::SymmetryParallelism)),
    };
    if let Some(path) = a.scene_dir {
        config.source = DataSource::SceneDir { path };
    } else if a.variant.is_some() || a.scene_count.is_some() {
        let (variant, scene_count) = match &config.source {
            DataSource::Synthetic { variant, scene_count } => (*variant, *scene_count),
            DataSource::SceneDir { .. } => (Variant::SymmetryParallelism, 2000),
        };
        config.source = DataSource::Synthetic {
            variant: a.variant.unwrap_or(variant),
            scene_count: a.scene_count.unwrap_or(scene_count),
        };
    }
    config.step_count = a.steps.unwrap_or(config.step_count);
    config.batch_size = a.batch_size.unwrap_or(config.batch_size);
    config.learning_rate = a.learning_rate.unwrap_or(config.learning_rate);
    config.seed = a.seed.unwrap_or(config.seed);
    config.log_every = a.log_every.unwrap_or(config.log_every);
    config.checkpoint_every = a.checkpoint_every.unwrap_or(config.checkpoint_every);
    config.validate()?;
    let out = required(a.out, "out")?;
    io::write_json(&out.join("train_config.json"), &config)?;
    let outcome = training::train(&config, Some(&out))?;
    let last = outcome.log.last().map_or(f64::NAN, |r| r.mean_loss);
    println!(
        "trained {} steps, final mean loss {last:.6}; checkpoint {}",
        config.step_count,
        out.join(format!("ckpt_{}.json", config.step_count)).display()
    );
    Ok(())
}

#[derive(Args, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DenoiseArgs {
    #[arg(long, env = "RR_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// A scene file, or a directory of `scene_{i}.json` files.
    #[arg(long, env = "RR_INPUT")]
    input: Option<PathBuf>,
    #[arg(long, env = "RR_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// living-room, bedroom or table-chair.
    #[arg(long, env = "RR_SCHEDULE")]
    schedule: Option<String>,
    /// JSON file with a full schedule; overrides `--schedule`.
    #[arg(long, env = "RR_SCHEDULE_FILE")]
    schedule_file: Option<PathBuf>,
    /// direct, grad or grad-noise.
    #[arg(long, alias = "variant", env = "RR_INFERENCE")]
    #[serde(alias = "variant")]
    inference: Option<InferenceVariant>,
    #[arg(long, env = "RR_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "RR_OUT")]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct DenoiseSummary {
    inference: InferenceVariant,
    iterations: usize,
    distance_moved: f64,
    termination: rearrange_core::langevin::Termination,
}

fn cmd_denoise(mut a: DenoiseArgs) -> Result<()> {
    let f: DenoiseArgs = read_config(a.config.as_deref())?;
    merge!(a, f; input, checkpoint, schedule, schedule_file, inference, seed, out);
    let input = required(a.input, "input")?;
    let out = required(a.out, "out")?;
    let model = Denoiser::load(&required(a.checkpoint, "checkpoint")?)?;
    let schedule: LangevinSchedule = match &a.schedule_file {
        Some(p) => io::read_json(p)?,
        None => LangevinSchedule::preset(a.schedule.as_deref().unwrap_or("table-chair"))?,
    };
    schedule.validate()?;
    let inference = a.inference.unwrap_or(InferenceVariant::GradWithNoise);
    let seed = a.seed.unwrap_or(0);

    if input.is_dir() {
        let mut csv = String::from("scene,iterations,distance_moved,termination\n");
        let paths = io::scene_paths(&input)?;
        for (i, path) in &paths {
            let scene = io::read_scene(path)?;
            let traj = denoise(&model, &scene, &schedule, inference, rng::derive(seed, *i as u64))?;
            io::write_scene(&out.join(io::scene_file_name(*i)), traj.final_scene())?;
            let termination = serde_json::to_value(traj.termination)?;
            let _ = writeln!(
                csv,
                "{i},{},{},{}",
                traj.iterations(),
                distance_moved(&traj)?,
                termination.as_str().unwrap_or_default()
            );
        }
        fs::write(out.join("summary.csv"), csv).with_context(|| format!("writing {}", out.display()))?;
        println!("denoised {} scenes into {}", paths.len(), out.display());
    } else {
        let scene = io::read_scene(&input)?;
        let traj = denoise(&model, &scene, &schedule, inference, seed)?;
        let summary = DenoiseSummary {
            inference,
            iterations: traj.iterations(),
            distance_moved: distance_moved(&traj)?,
            termination: traj.termination,
        };
        io::write_scene(&out.join("final.json"), traj.final_scene())?;
        io::write_json(&out.join("trajectory.json"), &traj.snapshots)?;
        io::write_json(&out.join("summary.json"), &summary)?;
        println!("{}", serde_json::to_string(&summary)?);
    }
    Ok(())
}

#[derive(Args, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalArgs {
    #[arg(long, env = "RR_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Denoised scenes.
    #[arg(long, env = "RR_PRED")]
    pred: Option<PathBuf>,
    /// Scenes before denoising; needed for success and distance moved.
    #[arg(long, env = "RR_INITIAL")]
    initial: Option<PathBuf>,
    /// Ground-truth clean scenes for EMD.
    #[arg(long, env = "RR_GT")]
    gt: Option<PathBuf>,
    /// Table-Chair variant for the success test.
    #[arg(long, env = "RR_VARIANT")]
    variant: Option<Variant>,
    #[arg(long, env = "RR_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "RR_SAMPLES")]
    samples: Option<usize>,
    /// Output CSV; standard output when absent.
    #[arg(long, env = "RR_OUT")]
    out: Option<PathBuf>,
}

fn indexed_scenes(dir: &Path) -> Result<Vec<(usize, Scene)>> {
    io::scene_paths(dir)?
        .into_iter()
        .map(|(i, p)| Ok((i, io::read_scene(&p)?)))
        .collect()
}

fn check_same_indices(pred: &[(usize, Scene)], other: &[(usize, Scene)], what: &str) -> Result<()> {
    let a: Vec<usize> = pred.iter().map(|(i, _)| *i).collect();
    let b: Vec<usize> = other.iter().map(|(i, _)| *i).collect();
    if a != b {
        return Err(Error::MismatchedSets(format!(
            "{} predicted scenes but {} {what} scenes, or different indices",
            a.len(),
            b.len()
        ))
        .into());
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn cmd_eval(mut a: EvalArgs) -> Result<()> {
    let f: EvalArgs = read_config(a.config.as_deref())?;
    merge!(a, f; pred, initial, gt, variant, seed, samples, out);
    let pred = indexed_scenes(&required(a.pred, "pred")?)?;
    let initial = a.initial.as_deref().map(indexed_scenes).transpose()?;
    let gt = a.gt.as_deref().map(indexed_scenes).transpose()?;
    if let Some(s) = &initial {
        check_same_indices(&pred, s, "initial")?;
    }
    if let Some(s) = &gt {
        check_same_indices(&pred, s, "ground-truth")?;
    }
    if a.variant.is_some() && initial.is_none() {
        bail!("the success test needs --initial");
    }
    let seed = a.seed.unwrap_or(0);
    let samples = a.samples.unwrap_or(100);

    let mut csv = String::from("scene,success,distance_moved,emd_to_gt,boundary_violation,relation_rate_n2,relation_rate_n3\n");
    let mut sums = [0.0f64; 6];
    let mut counts = [0usize; 6];
    let mut add = |k: usize, v: Option<f64>| {
        if let Some(x) = v {
            sums[k] += x;
            counts[k] += 1;
        }
    };
    for (row, (i, scene)) in pred.iter().enumerate() {
        let init = initial.as_ref().map(|s| &s[row].1);
        let (success, moved) = match init {
            Some(init) => {
                let moved = emd_to_gt(scene, init)?;
                let success = match a.variant {
                    Some(v) => Some(evaluate_success(init, scene, v)?.success),
                    None => None,
                };
                (success, Some(moved))
            }
            None => (None, None),
        };
        let emd = gt.as_ref().map(|s| emd_to_gt(scene, &s[row].1)).transpose()?;
        let boundary = boundary_violation_fraction(scene, 0.0);
        let rate = |n: usize| -> Result<Option<f64>> {
            let query = RelationQuery {
                n,
                samples_per_scene: samples,
                seed: rng::derive(seed, *i as u64),
                ..RelationQuery::default()
            };
            match scene_relation_rates(scene, &query) {
                Ok(r) => Ok(Some(r.overall)),
                Err(Error::TooFewObjects { .. }) => Ok(None),
                Err(e) => Err(e.into()),
            }
        };
        let (r2, r3) = (rate(2)?, rate(3)?);
        let success_value = success.map(|s| if s { 1.0 } else { 0.0 });
        for (k, v) in [success_value, moved, emd, Some(boundary), r2, r3].into_iter().enumerate() {
            add(k, v);
        }
        let _ = writeln!(
            csv,
            "{i},{},{},{},{boundary},{},{}",
            success.map_or_else(String::new, |s| u8::from(s).to_string()),
            fmt_opt(moved),
            fmt_opt(emd),
            fmt_opt(r2),
            fmt_opt(r3)
        );
    }
    let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
    let _ = writeln!(
        csv,
        "mean,{},{},{},{},{},{}",
        fmt_opt(mean(0)),
        fmt_opt(mean(1)),
        fmt_opt(mean(2)),
        fmt_opt(mean(3)),
        fmt_opt(mean(4)),
        fmt_opt(mean(5))
    );
    match &a.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Args, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RenderArgs {
    #[arg(long, env = "RR_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// A scene file or a trajectory file (JSON array of scenes).
    #[arg(long, env = "RR_INPUT")]
    input: Option<PathBuf>,
    /// SVG path for a scene, directory for a trajectory.
    #[arg(long, env = "RR_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "RR_SIZE")]
    size: Option<f64>,
}

fn cmd_render(mut a: RenderArgs) -> Result<()> {
    let f: RenderArgs = read_config(a.config.as_deref())?;
    merge!(a, f; input, out, size);
    let input = required(a.input, "input")?;
    let out = required(a.out, "out")?;
    let options = RenderOptions {
        size: a.size.unwrap_or(RenderOptions::default().size),
    };
    let value: serde_json::Value = io::read_json(&input)?;
    if value.is_array() {
        let snapshots: Vec<Scene> = serde_json::from_value(value).with_context(|| input.display().to_string())?;
        let paths = render_trajectory(&snapshots, &out, &options)?;
        println!("wrote {} frames to {}", paths.len(), out.display());
    } else {
        let scene: Scene = serde_json::from_value(value).with_context(|| input.display().to_string())?;
        render_scene(&scene, &out, &options)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

#[derive(Args, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ScoreArgs {
    #[arg(long, env = "RR_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// A scene file or a directory of scenes.
    #[arg(long, env = "RR_INPUT")]
    input: Option<PathBuf>,
    /// Subset size, 2 or 3.
    #[arg(long, env = "RR_N")]
    n: Option<usize>,
    #[arg(long, env = "RR_ETA")]
    eta: Option<i64>,
    #[arg(long, env = "RR_EPSILON")]
    epsilon: Option<f64>,
    #[arg(long, env = "RR_SAMPLES")]
    samples: Option<usize>,
    #[arg(long, env = "RR_TRIALS")]
    trials: Option<usize>,
    #[arg(long, env = "RR_SEED")]
    seed: Option<u64>,
    /// Also write a `sigma,rate` CSV of the mean rate under translation noise.
    #[arg(long, env = "RR_CURVE")]
    curve: Option<PathBuf>,
    /// Noise levels of the curve.
    #[arg(long, env = "RR_NOISE_LEVELS", value_delimiter = ',')]
    noise_levels: Option<Vec<f64>>,
}

const CURVE_LEVELS: [f64; 6] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25];

fn mean_rate(scenes: &[(usize, Scene)], base: &RelationQuery, sigma: f64) -> Result<f64> {
    let mut total = 0.0;
    for (i, scene) in scenes {
        let seed = rng::derive(base.seed, *i as u64);
        let noisy = perturb(scene, NoiseSpec::translation(sigma), rng::derive(seed, sigma.to_bits()));
        total += scene_relation_rates(&noisy, &RelationQuery { seed, ..base.clone() })?.overall;
    }
    Ok(total / scenes.len().max(1) as f64)
}

fn cmd_score(mut a: ScoreArgs) -> Result<()> {
    let f: ScoreArgs = read_config(a.config.as_deref())?;
    merge!(a, f; input, n, eta, epsilon, samples, trials, seed, curve, noise_levels);
    let input = required(a.input, "input")?;
    let defaults = RelationQuery::default();
    let base = RelationQuery {
        n: a.n.unwrap_or(defaults.n),
        eta: a.eta.unwrap_or(defaults.eta),
        epsilon: a.epsilon.unwrap_or(defaults.epsilon),
        samples_per_scene: a.samples.unwrap_or(defaults.samples_per_scene),
        invariance_trials: a.trials.unwrap_or(defaults.invariance_trials),
        seed: a.seed.unwrap_or(defaults.seed),
    };
    base.validate()?;
    let scenes = if input.is_dir() {
        indexed_scenes(&input)?
    } else {
        vec![(0, io::read_scene(&input)?)]
    };
    println!("scene,rate_x,rate_y,rate");
    let mut total = 0.0;
    for (i, scene) in &scenes {
        let query = RelationQuery {
            seed: rng::derive(base.seed, *i as u64),
            ..base.clone()
        };
        let r = scene_relation_rates(scene, &query)?;
        total += r.overall;
        println!("{i},{},{},{}", r.x, r.y, r.overall);
    }
    if !scenes.is_empty() {
        println!("mean,,,{}", total / scenes.len() as f64);
    }
    if let Some(path) = a.curve {
        let mut csv = String::from("sigma,rate\n");
        for sigma in a.noise_levels.unwrap_or(CURVE_LEVELS.to_vec()) {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                bail!("noise level {sigma} must be finite and non-negative");
            }
            writeln!(csv, "{sigma},{}", mean_rate(&scenes, &base, sigma)?)?;
        }
        fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Perturb(a) => cmd_perturb(a),
        Command::Train(a) => cmd_train(a),
        Command::Denoise(a) => cmd_denoise(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
        Command::ScoreRegularity(a) => cmd_score(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn config_keys_are_checked() {
        let ok: GenerateArgs = serde_json::from_value(json!({"count": 3, "variant": "uniform-spacing"})).unwrap();
        assert_eq!(ok.count, Some(3));
        assert!(serde_json::from_value::<GenerateArgs>(json!({"cuont": 3})).is_err());
        assert!(serde_json::from_value::<GenerateArgs>(json!({"config": "x"})).is_err());
    }

    #[test]
    fn flags_win_over_file() {
        let mut a = GenerateArgs {
            count: Some(5),
            ..Default::default()
        };
        let f = GenerateArgs {
            count: Some(9),
            seed: Some(4),
            ..Default::default()
        };
        merge!(a, f; count, seed);
        assert_eq!((a.count, a.seed), (Some(5), Some(4)));
    }
}
