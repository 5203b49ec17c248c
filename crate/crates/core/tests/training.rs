//! End-to-end training behaviour on small synthetic sets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sclnet_core::data::{generate_synthetic, Dataset, ImageSample, SynthConfig};
use sclnet_core::detector::{forward_losses, LossBreakdown, ModelConfig, SamplePlan, TrainConfig, Trainer};
use sclnet_core::params::Ctx;

fn small_set(n: usize, seed: u64) -> Dataset {
    let cfg = SynthConfig {
        num_images: n,
        width: 64,
        height: 64,
        num_categories: 3,
        objects_min: 1,
        objects_max: 4,
        scale_min: 6.0,
        scale_max: 28.0,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, seed).unwrap()
}

fn small_model(full: bool) -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        head_hidden: 64,
        anchor_scale: 2.0,
        enable_cscl: full,
        enable_iccl: full,
        ..ModelConfig::default()
    }
}

/// Objective over the whole set with a fixed sampling stream.
fn full_set_loss(tr: &Trainer, data: &Dataset) -> LossBreakdown {
    let batch: Vec<&ImageSample> = data.samples.iter().collect();
    let mut ctx = Ctx::new(&tr.params, true);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let vars = forward_losses(&mut ctx, &tr.model, &tr.train, &batch, &mut SamplePlan::default(), &mut rng).unwrap();
    vars.breakdown(&ctx, &tr.train).unwrap()
}

fn assert_identities(b: &LossBreakdown, cfg: &TrainConfig) {
    let detect = b.l_cls + b.l_reg + b.l_contra_feat + b.l_contra_label;
    assert!((b.l_detect - detect).abs() <= 1e-9, "{b:?}");
    let total = cfg.lambda_comple * b.l_comple + cfg.lambda_detect * b.l_detect;
    assert!((b.l_total - total).abs() <= 1e-9, "{b:?}");
}

#[test]
fn objective_drops_within_two_hundred_steps() {
    let data = small_set(8, 5);
    let mut wins = 0;
    let mut report = Vec::new();
    for seed in 0..3 {
        let train = TrainConfig { steps: 200, seed, rois_per_image: 32, ..TrainConfig::default() };
        let mut tr = Trainer::new(small_model(true), train.clone()).unwrap();
        let before = full_set_loss(&tr, &data).l_total;
        tr.fit(&data, |_, b| assert_identities(b, &train)).unwrap();
        let after = full_set_loss(&tr, &data).l_total;
        report.push((before, after));
        if after <= 0.7 * before {
            wins += 1;
        }
    }
    assert!(wins >= 2, "initial/final l_total per seed: {report:?}");
}

#[test]
fn same_seed_gives_identical_parameters() {
    let data = small_set(4, 11);
    let run = || {
        let mut tr = Trainer::new(small_model(true), TrainConfig { steps: 10, seed: 3, ..TrainConfig::default() }).unwrap();
        tr.fit(&data, |_, _| {}).unwrap();
        tr.params
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.entries().iter().zip(b.entries()) {
        assert_eq!(x.name, y.name);
        let same = x.value.data().iter().zip(y.value.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        assert!(same, "{} differs", x.name);
    }
}

#[test]
fn baseline_reports_no_complement_terms() {
    let data = small_set(4, 12);
    let train = TrainConfig { steps: 6, ..TrainConfig::default() };
    let mut tr = Trainer::new(small_model(false), train.clone()).unwrap();
    tr.fit(&data, |_, b| {
        assert_eq!(b.l_comple, 0.0);
        assert_eq!(b.l_contra_feat, 0.0);
        assert_eq!(b.l_contra_label, 0.0);
        assert_identities(b, &train);
        assert!(b.l_cls > 0.0 && b.l_reg >= 0.0);
    })
    .unwrap();
}

#[test]
fn images_without_objects_train() {
    let cfg = SynthConfig {
        num_images: 2,
        width: 64,
        height: 64,
        num_categories: 3,
        objects_min: 0,
        objects_max: 0,
        scale_max: 28.0,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg, 1).unwrap();
    assert!(data.samples.iter().all(|s| s.annotations.is_empty()));
    let train = TrainConfig { steps: 2, ..TrainConfig::default() };
    let mut tr = Trainer::new(small_model(true), train.clone()).unwrap();
    tr.fit(&data, |_, b| {
        assert!(b.is_finite());
        assert!(b.l_comple >= 0.0);
        assert_identities(b, &train);
    })
    .unwrap();
}
