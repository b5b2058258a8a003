use mtal_core::adversary::{assemble_combo, split_combo, LabelSubset};
use mtal_core::diffcore::{sgd_step, Tape, Tensor};
use mtal_core::losses::{self, bundle, LossWeights};
use mtal_core::metrics::{js_divergence, js_divergence_probs, EvalOptions};
use mtal_core::pipeline::{evaluate, predict_dataset};
use mtal_core::synthgen::{generate, AttributeWorld, LandmarkWorld, WorldSpec};
use mtal_core::synthgen::{read_dataset, write_dataset};
use mtal_core::{
    BundleBatch, DiscriminatorModel, LabelBundle, LabelLayout, MetricsReport, Pose, PoseMode, RecognizerModel, TaskMode,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn layouts() -> impl Strategy<Value = LabelLayout> {
    prop_oneof![
        (1usize..6).prop_map(|m| LabelLayout::landmark(m, PoseMode::Continuous)),
        (1usize..6, 2usize..14).prop_map(|(m, k)| LabelLayout::landmark(m, PoseMode::Discrete { bins: k })),
        (1usize..8).prop_map(LabelLayout::attribute),
    ]
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn outputs(m: &RecognizerModel, x: &Tensor) -> Vec<Tensor> {
    let b = m.predict(x).unwrap();
    [b.landmarks, b.visibility, b.pose, b.gender, b.attributes]
        .into_iter()
        .flatten()
        .collect()
}

/// A truth bundle for `layout` drawn from `seed`.
fn truth_bundle(layout: &LabelLayout, seed: u64) -> LabelBundle {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match layout.mode {
        TaskMode::Attribute => LabelBundle::attribute(
            (0..layout.attributes)
                .map(|_| f64::from(rng.random_range(0..2u8)))
                .collect(),
        ),
        TaskMode::Landmark => {
            let pose = match layout.pose {
                PoseMode::Continuous => Pose::Continuous([0.0, 0.0, rng.random_range(-90.0..90.0)]),
                PoseMode::Discrete { bins } => {
                    let mut p = vec![0.0; bins];
                    p[rng.random_range(0..bins)] = 1.0;
                    Pose::Discrete(p)
                }
            };
            LabelBundle::landmark(
                (0..layout.landmarks)
                    .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
                    .collect(),
                (0..layout.landmarks)
                    .map(|_| f64::from(rng.random_range(0..2u8)))
                    .collect(),
                pose,
                f64::from(rng.random_range(0..2u8)),
            )
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn recognizer_output_width_matches_layout(layout in layouts(), batch in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = RecognizerModel::new(4, &[6, 5], layout, &mut rng).unwrap();
        let x = Tensor::zeros([batch, 4]);
        let outs = outputs(&m, &x);
        let width: usize = outs.iter().map(|t| t.cols()).sum();
        let expected = match layout.mode {
            TaskMode::Landmark => 3 * layout.landmarks + layout.pose_width() + 1,
            TaskMode::Attribute => layout.attributes,
        };
        prop_assert_eq!(width, expected);
        prop_assert!(outs.iter().all(|t| t.rows() == batch));
    }

    #[test]
    fn batch_permutation_permutes_outputs(layout in layouts(), x in matrix(5, 4), seed in any::<u64>(), rot in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = RecognizerModel::new(4, &[7], layout, &mut rng).unwrap();
        let perm: Vec<usize> = (0..5).map(|i| (i + rot) % 5).collect();
        let a = outputs(&m, &x);
        let b = outputs(&m, &x.select_rows(&perm));
        for (ta, tb) in a.iter().zip(&b) {
            prop_assert_eq!(bits(&ta.select_rows(&perm)), bits(tb));
        }
    }

    #[test]
    fn probability_heads_stay_in_range(layout in layouts(), x in matrix(3, 4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = RecognizerModel::new(4, &[6], layout, &mut rng).unwrap();
        let b = m.predict(&x.into_param().clone()).unwrap();
        for t in [&b.visibility, &b.gender, &b.attributes].into_iter().flatten() {
            prop_assert!(t.data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
        if let (Some(p), PoseMode::Discrete { .. }) = (&b.pose, layout.pose) {
            for r in 0..p.rows() {
                prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.row(r).iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn discriminator_output_in_open_unit_interval(x in matrix(4, 6), seed in any::<u64>(), scale in 1.0f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = DiscriminatorModel::new(6, [5, 3], &mut rng).unwrap();
        let big = Tensor::matrix(4, 6, x.data().iter().map(|v| v * scale).collect()).unwrap();
        for p in d.score(&big).unwrap() {
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn forward_is_bit_identical_across_runs(layout in layouts(), x in matrix(3, 4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = RecognizerModel::new(4, &[8, 4], layout, &mut rng).unwrap();
        let a: Vec<Vec<u64>> = outputs(&m, &x).iter().map(bits).collect();
        let b: Vec<Vec<u64>> = outputs(&m, &x).iter().map(bits).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn losses_nonnegative_and_zero_at_truth(layout in layouts(), s1 in any::<u64>(), s2 in any::<u64>()) {
        let t = truth_bundle(&layout, s1);
        let p = truth_bundle(&layout, s2);
        let w = LossWeights::default();
        prop_assert!(bundle::supervised(&p, &t, &w, layout.mode).unwrap() >= 0.0);
        prop_assert!(bundle::supervised(&t, &t, &w, layout.mode).unwrap() < 1e-10);
    }

    #[test]
    fn supervised_loss_is_linear_in_each_weight(s1 in any::<u64>(), s2 in any::<u64>(), a in 0.0f64..3.0, b in 0.0f64..3.0) {
        let layout = LabelLayout::landmark(3, PoseMode::Continuous);
        let (t, p) = (truth_bundle(&layout, s1), truth_bundle(&layout, s2));
        let f = |w: LossWeights| bundle::supervised(&p, &t, &w, layout.mode).unwrap();
        let base = LossWeights::default();
        for set in [
            |w: &mut LossWeights, v: f64| w.landmark = v,
            |w: &mut LossWeights, v: f64| w.visibility = v,
            |w: &mut LossWeights, v: f64| w.pose = v,
            |w: &mut LossWeights, v: f64| w.gender = v,
        ] {
            let (mut wa, mut wb, mut w0) = (base, base, base);
            set(&mut wa, a);
            set(&mut wb, b);
            set(&mut w0, 0.0);
            let slope = if (a - b).abs() > 1e-6 { (f(wa) - f(wb)) / (a - b) } else { continue };
            prop_assert!((f(wa) - (f(w0) + a * slope)).abs() < 1e-9);
        }
    }

    #[test]
    fn invisible_landmarks_get_zero_gradient(x in matrix(2, 6), seed in any::<u64>()) {
        let layout = LabelLayout::landmark(3, PoseMode::Continuous);
        let t1 = truth_bundle(&layout, seed);
        let t2 = truth_bundle(&layout, seed.wrapping_add(1));
        let batch = BundleBatch::from_bundles(&layout, &[&t1, &t2]).unwrap();
        let mut tape = Tape::new();
        let mut xp = x.clone();
        xp.set_requires_grad(true);
        let pv = tape.leaf(&xp);
        let l = losses::landmark(&mut tape, pv, batch.landmarks.as_ref().unwrap(), batch.visibility.as_ref().unwrap()).unwrap();
        let g = tape.backward(l).unwrap().wrt(pv);
        let vis = batch.visibility.as_ref().unwrap();
        for r in 0..2 {
            for j in 0..3 {
                if vis.row(r)[j] == 0.0 {
                    prop_assert_eq!(g[r * 6 + 2 * j], 0.0);
                    prop_assert_eq!(g[r * 6 + 2 * j + 1], 0.0);
                }
            }
        }
    }

    #[test]
    fn backward_is_additive(x in matrix(2, 3)) {
        let grad = |which: u8| {
            let mut tape = Tape::new();
            let mut p = x.clone();
            p.set_requires_grad(true);
            let v = tape.leaf(&p);
            let sq = tape.square(v);
            let l1 = tape.sum(sq);
            let sg = tape.sigmoid(v).unwrap();
            let l2 = tape.mean(sg);
            let out = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            tape.backward(out).unwrap().wrt(v)
        };
        let (g1, g2, g12) = (grad(0), grad(1), grad(2));
        for i in 0..g12.len() {
            prop_assert!((g12[i] - g1[i] - g2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_with_zero_rate_is_identity(x in matrix(3, 3), g in prop::collection::vec(-5.0f64..5.0, 9)) {
        let mut p = x.clone().into_param();
        p.accumulate_grad(&g).unwrap();
        let before = bits(&p);
        sgd_step(&mut [&mut p], 0.0).unwrap();
        prop_assert_eq!(bits(&p), before);
    }

    #[test]
    fn combo_round_trips_through_split(layout in layouts(), seed in any::<u64>()) {
        let b = truth_bundle(&layout, seed);
        let subset = LabelSubset::All.for_mode(layout.mode);
        let combo = assemble_combo(&b, subset, &layout).unwrap();
        let back = split_combo(&combo, subset, &layout).unwrap();
        prop_assert_eq!(assemble_combo(&back, subset, &layout).unwrap(), combo);
    }

    #[test]
    fn js_is_symmetric_and_bounded(a in prop::collection::vec(0u8..4, 1..40), b in prop::collection::vec(0u8..4, 1..40)) {
        let ab = js_divergence(&a, &b).unwrap();
        let ba = js_divergence(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&ab));
    }

    #[test]
    fn js_probs_symmetric_and_bounded(p in prop::collection::vec(0.0f64..1.0, 4), q in prop::collection::vec(0.0f64..1.0, 4)) {
        let norm = |v: Vec<f64>| { let s: f64 = v.iter().sum::<f64>() + 1e-9; v.iter().map(|x| (x + 1e-9 / 4.0) / s).collect::<Vec<_>>() };
        let (p, q) = (norm(p), norm(q));
        let pq = js_divergence_probs(&p, &q).unwrap();
        prop_assert!((pq - js_divergence_probs(&q, &p).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&pq));
    }
}

fn small_report(seed: u64) -> MetricsReport {
    let world = WorldSpec::Landmark(LandmarkWorld::default());
    let data = generate(&world, 300, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = RecognizerModel::new(data.feature_width, &[8], data.layout, &mut rng).unwrap();
    m.set_standardizer(mtal_core::models::Standardizer::fit(&data.all_features().unwrap()))
        .unwrap();
    evaluate(&m, &data, &EvalOptions::default(), "h").unwrap()
}

#[test]
fn pose_bins_aggregate_to_global_nme() {
    for seed in [1, 2, 3] {
        let r = small_report(seed);
        let total: usize = r.per_pose_bin.iter().map(|b| b.nme_count).sum();
        let weighted: f64 = r
            .per_pose_bin
            .iter()
            .filter_map(|b| b.nme_percent.map(|v| v * b.nme_count as f64))
            .sum::<f64>()
            / total as f64;
        assert!((weighted - r.nme_percent.unwrap()).abs() < 1e-10);
        assert_eq!(r.per_pose_bin.iter().map(|b| b.count).sum::<usize>(), r.samples);
    }
}

#[test]
fn labels_rederive_from_latents() {
    for world in [
        WorldSpec::Landmark(LandmarkWorld::default()),
        WorldSpec::Landmark(LandmarkWorld {
            pose: PoseMode::Discrete { bins: 13 },
            ..LandmarkWorld::default()
        }),
        WorldSpec::Attribute(AttributeWorld::default()),
    ] {
        let data = generate(&world, 200, 4).unwrap();
        for s in &data.samples {
            assert_eq!(world.labels_from_latent(&s.latent).unwrap(), s.labels);
        }
    }
}

#[test]
fn generation_is_reproducible_and_file_round_trips() {
    let world = WorldSpec::default();
    let a = generate(&world, 150, 9).unwrap();
    assert_eq!(a, generate(&world, 150, 9).unwrap());
    let mut buf = Vec::new();
    write_dataset(&a, &mut buf).unwrap();
    let back = read_dataset(buf.as_slice()).unwrap();
    let mut stripped = a.clone();
    stripped.samples.iter_mut().for_each(|s| s.latent.clear());
    assert_eq!(back, stripped);
}

#[test]
fn visibility_is_a_function_of_pose() {
    let data = generate(&WorldSpec::default(), 2000, 5).unwrap();
    let world = LandmarkWorld::default();
    for s in &data.samples {
        let gender = s.labels.gender.unwrap();
        let [roll, pitch, yaw] = match &s.labels.pose {
            Some(Pose::Continuous(p)) => *p,
            _ => unreachable!(),
        };
        let (_, vis) = world.project(gender, yaw, pitch, roll);
        assert_eq!(&vis, s.labels.visibility.as_ref().unwrap());
    }
}

#[test]
fn predictions_are_deterministic() {
    let data = generate(&WorldSpec::default(), 50, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = RecognizerModel::new(data.feature_width, &[8], data.layout, &mut rng).unwrap();
    assert_eq!(predict_dataset(&m, &data).unwrap(), predict_dataset(&m, &data).unwrap());
}
