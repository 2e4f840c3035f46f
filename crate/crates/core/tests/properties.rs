use std::f64::consts::PI;

use proptest::prelude::*;

use rearrange_core::denoiser::{Denoiser, DenoiserConfig, TransformPrediction};
use rearrange_core::langevin::{denoise_with, InferenceVariant, LangevinSchedule};
use rearrange_core::relations::{pslq, relation_exists, scene_relation_rates, PslqOptions, RelationQuery};
use rearrange_core::scene::{perturb, NoiseSpec};
use rearrange_core::training::denoising_loss;
use rearrange_core::{FloorPlan, ObjectState, Scene};

fn object() -> impl Strategy<Value = ObjectState> {
    (0usize..2, -1.0..1.0f64, -1.0..1.0f64, -PI..PI, 0.02..0.3f64, 0.02..0.3f64, 0usize..3)
        .prop_map(|(c, x, y, a, bx, by, s)| ObjectState::new(c, [x, y], a, [bx, by], s))
}

fn scene(min: usize, max: usize) -> impl Strategy<Value = Scene> {
    prop::collection::vec(object(), min..=max)
        .prop_map(|objects| Scene::new(2, FloorPlan::unit_square(), objects).unwrap())
}

fn prediction() -> impl Strategy<Value = Vec<[f64; 4]>> {
    prop::collection::vec(
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(a, b, c, d)| [a, b, c, d]),
        8,
    )
}

fn tiny_model(seed: u64) -> Denoiser {
    let mut c = DenoiserConfig::desk(2, 3);
    c.token_dim = 16;
    c.head_count = 2;
    c.layer_count = 1;
    c.mlp_hidden_dim = 16;
    c.pe_frequencies = 4;
    c.attribute_dim = 8;
    c.floor_points = 16;
    c.floor_hidden = [8, 8, 16];
    c.head_hidden_dim = 8;
    Denoiser::new(c, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_ignores_clean_object_order(clean in scene(1, 8), rows in prediction(), seed in any::<u64>(), rot in 0usize..8) {
        let messy = perturb(&clean, NoiseSpec::new(0.1, 0.2).unwrap(), seed);
        let pred = TransformPrediction { rows: rows[..clean.len()].to_vec() };
        let mut shuffled = clean.clone();
        let k = rot % clean.len();
        shuffled.objects.rotate_left(k);
        let a = denoising_loss(&pred, &clean, &messy, 0.3).unwrap();
        let b = denoising_loss(&pred, &shuffled, &messy, 0.3).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn loss_vanishes_on_matched_poses(clean in scene(1, 8), seed in any::<u64>()) {
        let messy = perturb(&clean, NoiseSpec::new(0.1, 0.2).unwrap(), seed);
        let m = rearrange_core::assign::match_scenes(&messy, &clean).unwrap();
        let rows = m.mapping.iter().map(|&j| {
            let o = &clean.objects[j];
            [o.translation[0], o.translation[1], o.rotation[0], o.rotation[1]]
        }).collect();
        prop_assert_eq!(denoising_loss(&TransformPrediction { rows }, &clean, &messy, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn emd_pairing_beats_perturbation_correspondence(clean in scene(1, 8), seed in any::<u64>()) {
        let messy = perturb(&clean, NoiseSpec::new(0.3, 0.5).unwrap(), seed);
        let matched = rearrange_core::assign::match_scenes(&messy, &clean).unwrap().total_cost;
        let identity: f64 = messy.objects.iter().zip(&clean.objects)
            .map(|(m, c)| rearrange_core::scene::dist(m.translation, c.translation))
            .sum();
        prop_assert!(matched <= identity + 1e-12);
    }

    #[test]
    fn schedules_never_increase(alpha0 in 0.01..1.0f64, a1 in 0.0..0.1f64, beta0 in 0.0..0.1f64, b1 in 0.1..1.0f64, b2 in 1usize..20, tau in 0usize..2000) {
        let s = LangevinSchedule { alpha0, a1, beta0, b1, b2, ..LangevinSchedule::table_chair() };
        prop_assert!(s.alpha(tau + 1) <= s.alpha(tau));
        prop_assert!(s.beta(tau + 1) <= s.beta(tau));
    }

    #[test]
    fn trajectories_end_and_stay_unit(start in scene(1, 6), rows in prediction(), seed in any::<u64>(), max_iters in 1usize..60) {
        let schedule = LangevinSchedule { max_iters, ..LangevinSchedule::table_chair() };
        let n = start.len();
        let predict = |_: &Scene| Ok(TransformPrediction { rows: rows[..n].to_vec() });
        for v in InferenceVariant::ALL {
            let traj = denoise_with(predict, &start, &schedule, v, seed).unwrap();
            prop_assert!(traj.snapshots.len() <= max_iters + 1);
            for s in &traj.snapshots {
                for o in &s.objects {
                    prop_assert!((o.rotation[0].hypot(o.rotation[1]) - 1.0).abs() < 1e-9);
                }
            }
        }
        let a = denoise_with(predict, &start, &schedule, InferenceVariant::GradNoNoise, seed).unwrap();
        let b = denoise_with(predict, &start, &schedule, InferenceVariant::GradNoNoise, seed ^ 1).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn returned_relations_meet_the_bound(values in prop::collection::vec(-2.0..2.0f64, 2..=3), eps in 1e-4..0.05f64) {
        let options = PslqOptions { epsilon: eps, ..PslqOptions::default() };
        if let Some(a) = pslq(&values, &options).unwrap() {
            let r: f64 = values.iter().zip(&a).map(|(v, &c)| v * c as f64).sum();
            prop_assert!(r.abs() < eps);
            prop_assert!(a.iter().any(|&c| c != 0));
        }
    }

    #[test]
    fn planted_relations_survive_translation(v1 in -1.0..1.0f64, v2 in -1.0..1.0f64, a1 in 1i64..4, a2 in 1i64..4, shift in -3.0..3.0f64) {
        // a1·v1 + a2·v2 − (a1 + a2)·v3 = 0 with v3 their weighted mean.
        prop_assume!(a1 + a2 < 5);
        let v3 = (a1 as f64 * v1 + a2 as f64 * v2) / (a1 + a2) as f64;
        let query = RelationQuery { n: 3, eta: 5, ..RelationQuery::default() };
        prop_assert!(relation_exists(&[v1, v2, v3], &query).unwrap());
        prop_assert!(relation_exists(&[v1 + shift, v2 + shift, v3 + shift], &query).unwrap());
    }

    #[test]
    fn relation_rates_depend_only_on_seed(s in scene(3, 8), seed in any::<u64>()) {
        let query = RelationQuery { n: 3, samples_per_scene: 20, seed, ..RelationQuery::default() };
        prop_assert_eq!(scene_relation_rates(&s, &query).unwrap(), scene_relation_rates(&s, &query).unwrap());
    }

    #[test]
    fn scene_json_round_trip(s in scene(1, 8)) {
        let text = serde_json::to_string(&s).unwrap();
        let back: Scene = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn denoiser_is_permutation_equivariant(s in scene(2, 6), model_seed in 0u64..4, k in 1usize..6) {
        let model = tiny_model(model_seed);
        let mut permuted = s.clone();
        let k = k % s.len();
        permuted.objects.rotate_left(k);
        let a = model.forward(&s).unwrap();
        let b = model.forward(&permuted).unwrap();
        for i in 0..s.len() {
            prop_assert_eq!(a.rows[(i + k) % s.len()], b.rows[i]);
        }
    }
}
