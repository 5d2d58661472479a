use cats_core::align::{build_reweight, random_spd, GaussianSpec};
use cats_core::array::NdArray;
use cats_core::backbone::AdapterKind;
use cats_core::data::{generate_domain, random_templates, read_dataset, write_dataset, SyntheticDomainSpec};
use cats_core::train::{adapt, evaluate, pretrain, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn domain(theta: f64, seed: u64) -> cats_core::data::MtsDataset {
    let spec = SyntheticDomainSpec {
        domain_id: format!("d{seed}"),
        templates: random_templates(3, 2, 1, 0.3, 5).unwrap(),
        theta,
        noise_scale: 1.0,
        n_steps: 40,
        seed,
        rotation_seed: 9,
    };
    generate_domain(&spec, 6).unwrap()
}

fn tiny() -> TrainConfig {
    TrainConfig {
        window_len: 12,
        vote_count: 3,
        kernel: 3,
        pretrain_epochs: 1,
        adapt_steps: 4,
        batch_size: 4,
        stride: 4,
        d_model: 8,
        d_ff: 16,
        n_blocks: 2,
        n_heads: 2,
        adapter_rank: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn dataset_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = domain(0.4, 3);
    let path = dir.path().join("d3.mts");
    write_dataset(&ds, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);
}

#[test]
fn pipeline_runs_end_to_end_and_repeats_exactly() {
    let (src, tgt) = (domain(0.0, 1), domain(1.0, 2));
    let run = |kind| {
        let cfg = TrainConfig { adapter: kind, ..tiny() };
        let (model, curve) = pretrain(&src, &cfg).unwrap();
        let adapted = adapt(&model, &src, &tgt.series(), &cfg).unwrap();
        let acc = evaluate(&adapted.model, &tgt, cfg.vote_count, cfg.window_len, cfg.seed).unwrap();
        (curve, adapted.losses, acc)
    };
    for kind in [AdapterKind::Linear, AdapterKind::Cats] {
        let (curve, losses, acc) = run(kind);
        assert_eq!(losses.len(), 4);
        assert!(curve.iter().chain(losses.iter().map(|l| &l.total)).all(|v| v.is_finite()));
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!((curve, losses, acc), run(kind));
    }
}

#[test]
fn reweighting_works_in_single_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let src = GaussianSpec::<f32>::centered(random_spd(3, &mut rng), 2).unwrap();
    let tgt = GaussianSpec::<f32>::centered(random_spd(3, &mut rng), 2).unwrap();
    let a = build_reweight(&src, &tgt).unwrap().matrix;
    let mapped = a.matmul(&tgt.covariance).unwrap().matmul(&a.transpose().unwrap()).unwrap();
    let scale = src.covariance.max_abs();
    assert!(mapped.max_abs_diff(&src.covariance) / scale < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reweighting_matches_source_covariance(d in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = GaussianSpec::centered(random_spd::<f64>(d, &mut rng), 3).unwrap();
        let tgt = GaussianSpec::centered(random_spd::<f64>(d, &mut rng), 3).unwrap();
        let map = build_reweight(&src, &tgt).unwrap();
        let a: &NdArray<f64> = &map.matrix;
        let mapped = a.matmul(&tgt.covariance).unwrap().matmul(&a.transpose().unwrap()).unwrap();
        prop_assert!(mapped.max_abs_diff(&src.covariance) <= 1e-8 * src.covariance.max_abs().max(1.0));
    }
}
