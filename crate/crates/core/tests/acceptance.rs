//! Acceptance suite: one test per exit criterion, each printing a single
//! PASS/FAIL line (visible with `--nocapture`).
//!
//! Criteria 5-7 share one benchmark matrix (the default synthetic world, six
//! pipeline variants plus the day-night image-only variant, five seeds); it
//! is computed once behind a lock and reused.
//!
//! Run with:
//! `cargo test -p picnet-core --test acceptance -- --nocapture --test-threads=1`
//! (any thread count works; single-threaded keeps the line order tidy).

mod common;

use std::sync::LazyLock;
use std::time::Instant;

use picnet_core::backbone::FeatureMap;
use picnet_core::certify::certify_gradients;
use picnet_core::experiment::{
    cmd_eval, cmd_generate, cmd_train, generate_dataset_in_memory, run_variant, EvalReport,
    ExperimentConfig, PipelineSection, QuerySource,
};
use picnet_core::fusion::{
    forward_pipeline, Model, ModelDims, ModelParams, PipelineConfig, Variant,
};
use picnet_core::linalg::{l2_norm, Matrix};
use picnet_core::retrieval::{evaluate, k_one_percent, query_topk, DescriptorDatabase};
use picnet_core::rng::{stream_rng, uniform, Stream};
use picnet_core::scene::{pair_by_timestamp, GeoCoordinate, PointCloud, Timestamp};
use picnet_core::train::{lazy_quadruplet_loss, TrainHyper};
use picnet_core::vlad::{att_vlad, net_vlad, soft_assign, spatial_attention, GlobalDescriptor};
use picnet_core::world::WorldSpec;

use common::*;

fn pass(criterion: usize, name: &str, detail: String) {
    println!("[acceptance] criterion {criterion} ({name}): PASS — {detail}");
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_1_gradient_certification() {
    let started = Instant::now();
    let report = certify_gradients(&ModelDims::tiny(), 5, 1e-5, 1e-4).unwrap();
    let elapsed = started.elapsed();
    assert_eq!(report.ops.len(), 9, "every differentiable operation listed");
    for op in &report.ops {
        assert!(
            op.passed,
            "criterion 1 FAIL: {} at {:.3e} > 1e-4",
            op.op, op.max_rel_err
        );
    }
    assert!(
        elapsed.as_secs() < 120,
        "criterion 1 FAIL: suite took {elapsed:?} (limit 2 minutes)"
    );
    let worst = report
        .ops
        .iter()
        .map(|o| o.max_rel_err)
        .fold(0.0f64, f64::max);
    pass(
        1,
        "gradient certification",
        format!("9 ops x 5 seeds, worst rel err {worst:.2e}, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_oracle_equivalence() {
    // att_vlad vs triple loop on 100 tiny instances.
    let mut rng = stream_rng(900, Stream::Test, 0);
    let mut checked = 0;
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let t = 1 + (trial % 8) as usize;
        let d = 1 + (trial % 4) as usize;
        let k = 1 + (trial % 3) as usize;
        let intra = trial % 2 == 0;
        let mut params = picnet_core::vlad::VladParams::init(k, d, &mut rng);
        params.attention_weights = (0..d).map(|_| uniform(&mut rng, -0.8, 0.8)).collect();
        params.attention_bias = uniform(&mut rng, -0.3, 0.3);
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..d).map(|_| uniform(&mut rng, -1.5, 1.5)).collect())
            .collect();
        let fmap = FeatureMap(Matrix::from_rows(&rows).unwrap());
        let assign = soft_assign(&fmap, &params).unwrap();
        let att = spatial_attention(&fmap, &params).unwrap();
        let Ok(desc) = att_vlad(&fmap, &att, &assign, &params, intra) else {
            continue;
        };
        let centers: Vec<Vec<f64>> = (0..k).map(|i| params.centers.row(i).to_vec()).collect();
        let want = att_vlad_oracle(
            &rows,
            &attention_values(&att),
            &assignment_rows(&assign),
            &centers,
            intra,
        );
        for (a, b) in desc.values().iter().zip(&want) {
            let err = (a - b).abs();
            worst = worst.max(err);
            assert!(err <= 1e-12, "criterion 2 FAIL: att_vlad off oracle by {err:.2e}");
        }
        checked += 1;
    }
    assert!(checked >= 90, "too few valid aggregation instances: {checked}");

    // Loss vs exhaustive loop.
    let mut loss_worst = 0.0f64;
    for trial in 0..100 {
        let dim = 1 + trial % 8;
        let draw = |rng: &mut rand_chacha::ChaCha20Rng| -> Vec<f64> {
            (0..dim).map(|_| uniform(rng, -1.0, 1.0)).collect()
        };
        let anchor = draw(&mut rng);
        let decoy = draw(&mut rng);
        let positives: Vec<Vec<f64>> = (0..4).map(|_| draw(&mut rng)).collect();
        let negatives: Vec<Vec<f64>> = (0..6).map(|_| draw(&mut rng)).collect();
        let pos_refs: Vec<&[f64]> = positives.iter().map(|p| p.as_slice()).collect();
        let neg_refs: Vec<&[f64]> = negatives.iter().map(|n| n.as_slice()).collect();
        let got = lazy_quadruplet_loss(&anchor, &pos_refs, &neg_refs, &decoy, 0.5, 0.2).unwrap();
        let want = quadruplet_loss_oracle(&anchor, &positives, &negatives, &decoy, 0.5, 0.2);
        let err = (got - want).abs();
        loss_worst = loss_worst.max(err);
        assert!(err <= 1e-12, "criterion 2 FAIL: loss off oracle by {err:.2e}");
    }

    // query_topk vs full sort, exact.
    let descriptors: Vec<Vec<f64>> = (0..300)
        .map(|_| {
            let mut v: Vec<f64> = (0..12).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            let n = l2_norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            v
        })
        .collect();
    let coords: Vec<GeoCoordinate> = (0..300)
        .map(|_| {
            GeoCoordinate::new(uniform(&mut rng, 0.0, 900.0), uniform(&mut rng, 0.0, 900.0))
                .unwrap()
        })
        .collect();
    let db =
        DescriptorDatabase::new(descriptors.clone(), coords, (0..300u64).collect()).unwrap();
    for q in descriptors.iter().take(30) {
        for k in [1usize, 3, 25, 300] {
            assert_eq!(
                query_topk(q, &db, k).unwrap(),
                topk_oracle(q, &db, k),
                "criterion 2 FAIL: top-k disagrees with full sort"
            );
        }
    }

    // Recall vs independent recount, exact.
    let queries: Vec<(Vec<f64>, GeoCoordinate)> = (0..60)
        .map(|i| (descriptors[i * 3].clone(), db.coord((i * 5) % 300)))
        .collect();
    let typed: Vec<(GlobalDescriptor, GeoCoordinate)> = queries
        .iter()
        .map(|(d, c)| (GlobalDescriptor::from_unit(d.clone()).unwrap(), *c))
        .collect();
    let report = evaluate(&typed, &db, 25.0).unwrap();
    for rank in [1usize, 5, 25] {
        assert_eq!(
            report.recall_at(rank),
            recall_recount_oracle(&queries, &db, 25.0, rank),
            "criterion 2 FAIL: recall recount disagrees at rank {rank}"
        );
    }
    assert_eq!(
        report.recall_at_1pct,
        recall_recount_oracle(&queries, &db, 25.0, report.k_1pct)
    );
    pass(
        2,
        "oracle equivalence",
        format!(
            "att_vlad worst {worst:.1e}, loss worst {loss_worst:.1e}, top-k and recall exact"
        ),
    );
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_structural_invariants() {
    let dims = ModelDims::default();
    let spec = WorldSpec {
        n_places: 100,
        area_m: 800.0,
        seed: 901,
        ..WorldSpec::default()
    };
    let dataset = generate_dataset_in_memory(&spec).unwrap();
    let config = PipelineConfig::for_variant(Variant::Pic04, dims);
    let model = Model::new(ModelParams::init(&config, 902).unwrap());

    // Unit norm over 100 random scenes.
    let mut worst_norm = 0.0f64;
    for scene in dataset.database.scenes() {
        let desc = forward_pipeline(scene, &model, &config).unwrap();
        worst_norm = worst_norm.max((l2_norm(desc.values()) - 1.0).abs());
    }
    assert!(
        worst_norm <= 1e-9,
        "criterion 3 FAIL: descriptor norm off by {worst_norm:.2e}"
    );

    // Point-permutation invariance of the point branch.
    let point_config = PipelineConfig::for_variant(Variant::PointOnly, dims);
    let point_model = Model::new(ModelParams::init(&point_config, 903).unwrap());
    let mut worst_perm = 0.0f64;
    for (i, scene) in dataset.database.scenes().iter().take(10).enumerate() {
        let base = forward_pipeline(scene, &point_model, &point_config).unwrap();
        let mut permuted = scene.clone();
        let mut points = scene.cloud.points().to_vec();
        let mut rng = stream_rng(904 + i as u64, Stream::Test, 0);
        for j in (1..points.len()).rev() {
            let k = rng.random_range(0..=j);
            points.swap(j, k);
        }
        permuted.cloud = PointCloud::new(points).unwrap();
        let shuffled = forward_pipeline(&permuted, &point_model, &point_config).unwrap();
        for (a, b) in base.values().iter().zip(shuffled.values()) {
            worst_perm = worst_perm.max((a - b).abs());
        }
    }
    assert!(
        worst_perm <= 1e-9,
        "criterion 3 FAIL: permutation moved descriptor by {worst_perm:.2e}"
    );

    // att_vlad with unit attention equals net_vlad within 1e-15.
    let mut rng = stream_rng(905, Stream::Test, 0);
    let mut worst_eq = 0.0f64;
    for _ in 0..20 {
        let (t, d, k) = (8, 4, 3);
        let params = picnet_core::vlad::VladParams::init(k, d, &mut rng);
        let fmap = FeatureMap(Matrix::from_fn(t, d, |_, _| uniform(&mut rng, -1.0, 1.0)));
        let assign = soft_assign(&fmap, &params).unwrap();
        let att = picnet_core::vlad::AttentionMap::uniform(t, 1.0);
        let a = att_vlad(&fmap, &att, &assign, &params, true).unwrap();
        let b = net_vlad(&fmap, &assign, &params, true).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            worst_eq = worst_eq.max((x - y).abs());
        }
    }
    assert!(worst_eq <= 1e-15, "criterion 3 FAIL: unit-attention gap {worst_eq:.2e}");

    // Recall curves monotone on an actual evaluation.
    let db = picnet_core::retrieval::build_database(dataset.database.scenes(), &model, &config)
        .unwrap();
    let queries: Vec<(GlobalDescriptor, GeoCoordinate)> = dataset
        .queries
        .scenes()
        .iter()
        .map(|s| {
            (
                forward_pipeline(s, &model, &config).unwrap(),
                s.coord,
            )
        })
        .collect();
    let report = evaluate(&queries, &db, 25.0).unwrap();
    assert!(
        report.recall_at_rank.windows(2).all(|w| w[1] >= w[0]),
        "criterion 3 FAIL: recall curve not monotone"
    );
    pass(
        3,
        "structural invariants",
        format!(
            "norm gap {worst_norm:.1e}, permutation gap {worst_perm:.1e}, attention-1 gap {worst_eq:.1e}, curve monotone"
        ),
    );
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_pairing_and_one_percent() {
    let mut rng = stream_rng(906, Stream::Test, 0);
    for trial in 0..1000 {
        let n_img = 1 + (trial % 37);
        let n_cld = 1 + ((trial * 11) % 37);
        let images: Vec<(Timestamp, ())> = (0..n_img)
            .map(|_| (Timestamp::new(uniform(&mut rng, 0.0, 50.0)).unwrap(), ()))
            .collect();
        let clouds: Vec<(Timestamp, ())> = (0..n_cld)
            .map(|_| (Timestamp::new(uniform(&mut rng, 0.0, 50.0)).unwrap(), ()))
            .collect();
        let got = pair_by_timestamp(&images, &clouds).unwrap();
        let img_ts: Vec<Timestamp> = images.iter().map(|(t, _)| *t).collect();
        let cld_ts: Vec<Timestamp> = clouds.iter().map(|(t, _)| *t).collect();
        assert_eq!(
            got,
            pairing_oracle(&img_ts, &cld_ts),
            "criterion 4 FAIL: pairing disagrees with brute force on trial {trial}"
        );
    }
    assert_eq!(k_one_percent(3030), 30, "criterion 4 FAIL: k_1pct(3030) != 30");
    pass(
        4,
        "timestamp pairing and top-1% rule",
        "1000 random sets match brute force; k_1pct(3030) = 30".into(),
    );
}

// ------------------------------------------------------- shared benchmark

struct SeedOutcome {
    image_only: EvalReport,
    image_only_daynight: EvalReport,
    point_only: EvalReport,
    fused: [EvalReport; 4],
}

struct Benchmark {
    seeds: Vec<SeedOutcome>,
    elapsed_secs: f64,
}

static BENCHMARK: LazyLock<Benchmark> = LazyLock::new(|| {
    let started = Instant::now();
    let world = WorldSpec::default();
    let dims = ModelDims::default();
    let hyper = TrainHyper::default();
    let dataset = generate_dataset_in_memory(&world).expect("default world generates");
    let radius = 25.0;

    let section = |variant: Variant, daynight: bool| {
        let mut s = PipelineSection::default();
        s.variant = variant;
        s.daynight = daynight;
        s.dims = dims;
        s.to_config()
    };

    let mut seeds = Vec::new();
    for seed in 0..5u64 {
        let run = |variant: Variant, daynight: bool| -> EvalReport {
            run_variant(&dataset, &section(variant, daynight), &hyper, seed, radius)
                .unwrap_or_else(|e| panic!("benchmark run {variant:?} seed {seed} failed: {e}"))
        };
        seeds.push(SeedOutcome {
            image_only: run(Variant::ImageOnly, false),
            image_only_daynight: run(Variant::ImageOnly, true),
            point_only: run(Variant::PointOnly, false),
            fused: [
                run(Variant::Pic01, false),
                run(Variant::Pic02, false),
                run(Variant::Pic03, false),
                run(Variant::Pic04, false),
            ],
        });
    }
    Benchmark {
        seeds,
        elapsed_secs: started.elapsed().as_secs_f64(),
    }
});

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_fusion_trend() {
    let bench = &*BENCHMARK;
    let fused = mean(bench.seeds.iter().map(|s| s.fused[0].overall.recall_at_1pct));
    let image = mean(bench.seeds.iter().map(|s| s.image_only.overall.recall_at_1pct));
    let point = mean(bench.seeds.iter().map(|s| s.point_only.overall.recall_at_1pct));
    let threshold = image.max(point) + 0.03;
    assert!(
        fused >= threshold,
        "criterion 5 FAIL: fused {fused:.4} < max(image {image:.4}, point {point:.4}) + 3pp"
    );
    assert!(
        bench.elapsed_secs < 1800.0,
        "criterion 5 FAIL: benchmark took {:.0}s (limit 30 minutes)",
        bench.elapsed_secs
    );
    pass(
        5,
        "fusion trend",
        format!(
            "fused {fused:.4} vs image {image:.4} / point {point:.4} (threshold {threshold:.4}); matrix in {:.0}s",
            bench.elapsed_secs
        ),
    );
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_6_attention_trends() {
    let bench = &*BENCHMARK;
    let m: Vec<f64> = (0..4)
        .map(|i| mean(bench.seeds.iter().map(move |s| s.fused[i].overall.recall_at_1pct)))
        .collect();
    assert!(
        m[1] >= m[0],
        "criterion 6 FAIL: attention aggregation lost ({:.4} < {:.4})",
        m[1],
        m[0]
    );
    assert!(
        m[3] >= m[1],
        "criterion 6 FAIL: global gate lost ({:.4} < {:.4})",
        m[3],
        m[1]
    );
    // "Best" admits ties: no other variant strictly better on that seed.
    let wins = bench
        .seeds
        .iter()
        .filter(|s| {
            let v: Vec<f64> = s.fused.iter().map(|r| r.overall.recall_at_1pct).collect();
            v[3] >= v[0].max(v[1]).max(v[2])
        })
        .count();
    assert!(
        wins >= 3,
        "criterion 6 FAIL: full variant best in only {wins}/5 seeds"
    );
    pass(
        6,
        "attention trends",
        format!(
            "means {:.4} / {:.4} / {:.4} / {:.4}; full variant best in {wins}/5 seeds",
            m[0], m[1], m[2], m[3]
        ),
    );
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn criterion_7_day_night_trend() {
    let bench = &*BENCHMARK;
    let night_off = mean(bench.seeds.iter().map(|s| {
        s.image_only
            .night
            .as_ref()
            .expect("night queries exist")
            .recall_at_1pct
    }));
    let night_on = mean(bench.seeds.iter().map(|s| {
        s.image_only_daynight
            .night
            .as_ref()
            .expect("night queries exist")
            .recall_at_1pct
    }));
    assert!(
        night_on > night_off,
        "criterion 7 FAIL: normalization did not improve night recall ({night_on:.4} vs {night_off:.4})"
    );
    pass(
        7,
        "day-night trend",
        format!("image-branch night recall {night_off:.4} -> {night_on:.4}"),
    );
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_8_overfit_sanity() {
    let world = WorldSpec {
        n_places: 10,
        area_m: 400.0,
        seed: 907,
        ..WorldSpec::default()
    };
    let dataset = generate_dataset_in_memory(&world).unwrap();
    let mut section = PipelineSection::default();
    section.variant = Variant::Pic01;
    let config = section.to_config();
    let hyper = TrainHyper {
        steps: 500,
        ..TrainHyper::default()
    };
    let report = run_variant(&dataset, &config, &hyper, 0, 25.0).unwrap();
    assert_eq!(
        report.overall.recall_at(1),
        1.0,
        "criterion 8 FAIL: recall@1 = {:.4} after 500 steps",
        report.overall.recall_at(1)
    );
    pass(8, "overfit sanity", "10-scene world reaches recall@1 = 100%".into());
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_9_determinism() {
    let make_config = |dir: &std::path::Path| -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        config.world = WorldSpec {
            n_places: 14,
            area_m: 400.0,
            seed: 908,
            cloud_points: 32,
            image_height: 16,
            image_width: 16,
            ..WorldSpec::default()
        };
        config.pipeline.dims = ModelDims {
            clusters: 4,
            point_feature_dim: 8,
            image_feature_dim: 8,
            hidden: 16,
            cloud_points: 32,
            image_height: 16,
            image_width: 16,
            image_channels: 3,
            patch: 8,
        };
        config.pipeline.variant = Variant::Pic04;
        config.training.hyper.steps = 15;
        config.output.dir = dir.to_path_buf();
        config
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (config_a, config_b) = (make_config(dir_a.path()), make_config(dir_b.path()));

    for config in [&config_a, &config_b] {
        cmd_generate(config).unwrap();
        cmd_train(config).unwrap();
        cmd_eval(config, None, QuerySource::Queries).unwrap();
    }
    let read = |dir: &std::path::Path, rel: &str| std::fs::read(dir.join(rel)).unwrap();
    for rel in [
        "dataset/manifest.json",
        "run/loss.csv",
        "run/checkpoint.bin",
        "run/report.json",
        "run/rank_recall.csv",
    ] {
        assert_eq!(
            read(dir_a.path(), rel),
            read(dir_b.path(), rel),
            "criterion 9 FAIL: {rel} differs between identical runs"
        );
    }
    pass(
        9,
        "determinism",
        "manifest, loss CSV, checkpoint and reports byte-identical across reruns".into(),
    );
}
