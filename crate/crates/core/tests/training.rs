use s2tdpt::data::gen_synthetic_split;
use s2tdpt::model::SpsStage;
use s2tdpt::train::{train_epoch, train_step, Optimizer, OptimizerKind, TrainConfig};
use s2tdpt::{Model32, Model64, ModelConfig};

fn small() -> ModelConfig {
    let mut c = ModelConfig::toy();
    c.depth = 1;
    c.embed_dim = 16;
    c.stem_channels = 8;
    c.sps_stages = vec![SpsStage::spe(8), SpsStage::sped(16), SpsStage::sped(16)];
    c.attention.heads = 2;
    c
}

fn params(m: &Model32) -> Vec<(String, Vec<f32>)> {
    m.store.params().map(|(n, t)| (n.to_string(), t.data().to_vec())).collect()
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let (train, _) = gen_synthetic_split(1, 8, 0);
    for optimizer in [OptimizerKind::AdamW, OptimizerKind::SgdMomentum] {
        let cfg = TrainConfig { epochs: 1, batch_size: 8, learning_rate: 0.0, optimizer, ..TrainConfig::default() };
        let mut model = Model32::new(small(), 4).unwrap();
        let before = params(&model);
        let mut opt = Optimizer::new(&model, &cfg);
        train_epoch(&mut model, &mut opt, &train, &cfg, 0).unwrap();
        assert_eq!(opt.steps(), 4);
        assert_eq!(params(&model), before, "{optimizer:?}");
    }
}

#[test]
fn single_batch_overfits_with_falling_loss() {
    let (train, _) = gen_synthetic_split(2, 2, 0);
    let (x, labels) = train.batch::<f64>(&(0..8).collect::<Vec<_>>()).unwrap();
    let cfg = TrainConfig { learning_rate: 1e-3, weight_decay: 0.0, ..TrainConfig::default() };
    let mut model = Model64::new(small(), 11).unwrap();
    let mut opt = Optimizer::new(&model, &cfg);
    let mut losses = Vec::new();
    for _ in 0..51 {
        losses.push(train_step(&mut model, &mut opt, &x, &labels, cfg.learning_rate).unwrap().0);
    }
    // Spikes flipping at threshold make single steps jumpy, so the trend is
    // checked on means of ten-step windows.
    let means: Vec<f64> = losses[1..].chunks(10).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for w in means.windows(2) {
        assert!(w[1] < w[0], "{means:?}");
    }
    assert!(means[0] < losses[0], "{means:?} {losses:?}");
    assert!(losses[50] < 0.5 * losses[0], "{losses:?}");
}

#[test]
fn same_seed_gives_identical_trajectories() {
    let (train, _) = gen_synthetic_split(3, 12, 0);
    let cfg = TrainConfig { epochs: 3, batch_size: 16, flip: true, crop_padding: 2, seed: 21, ..TrainConfig::default() };
    let run = || {
        let mut model = Model32::new(small(), cfg.seed).unwrap();
        let mut opt = Optimizer::new(&model, &cfg);
        let mut trace = Vec::new();
        for epoch in 0..cfg.epochs {
            let m = train_epoch(&mut model, &mut opt, &train, &cfg, epoch).unwrap();
            trace.push((m, params(&model)));
        }
        trace
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_ne!(a[0].1, a[1].1);
}

#[test]
fn gradients_are_finite_on_random_batches() {
    let (train, _) = gen_synthetic_split(5, 4, 0);
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
    for seed in 0..3 {
        let mut model = Model32::new(small(), seed).unwrap();
        let mut opt = Optimizer::new(&model, &cfg);
        let m = train_epoch(&mut model, &mut opt, &train, &cfg, 0).unwrap();
        assert!(m.train_loss.is_finite());
        assert!(model.store.params().all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
    }
}
