use hbfp::checkpoint::Checkpoint;
use hbfp::config::RunConfig;
use hbfp::data::Dataset;
use hbfp::model::{final_descriptor, train_step, Adam, AdamConfig, LossConfig, Model, ModelConfig};
use hbfp::nn::{Ctx, Mode};
use hbfp::pipeline::Trainer;
use hbfp::rng::{substream, Stream};
use hbfp::{par, Tensor};

fn micro() -> ModelConfig {
    ModelConfig {
        image_hw: (8, 8),
        stem_channels: 2,
        channels: [2, 2, 3],
        rank: 2,
        pool_dim: 3,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

fn small_run() -> RunConfig {
    let mut c = RunConfig::default();
    c.image_height = 16;
    c.image_width = 8;
    c.stem_channels = 4;
    c.channels = [4, 4, 8];
    c.rank = 4;
    c.pool_dim = 8;
    c.train_ids = 4;
    c.test_ids = 2;
    c.per_id = 4;
    c.p = 2;
    c.k = 2;
    c.epochs = 1;
    c
}

fn descriptors(model: &Model, images: &Tensor, mode: Mode) -> Vec<Tensor> {
    let mut ctx = Ctx::new(&model.params, mode);
    let x = ctx.g.constant(images.clone());
    let out = model.forward(&mut ctx, x).unwrap();
    out.descriptors.iter().map(|&d| ctx.g.value(d).clone()).collect()
}

#[test]
fn zero_projections_annihilate_augmented_paths() {
    let mut rng = substream(1, Stream::Init);
    let mut model = Model::new(micro(), &mut rng).unwrap();
    for name in model.bfp_projection_names().unwrap() {
        model.params.get_mut(&name).unwrap().data_mut().fill(0.0);
    }
    let images = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng);
    for mode in [Mode::Train, Mode::Eval] {
        let d = descriptors(&model, &images, mode);
        assert!(d[0].data().iter().all(|&v| v == 0.0), "{mode:?}");
        assert!(d[1].data().iter().all(|&v| v == 0.0), "{mode:?}");
    }
}

#[test]
fn batch_doubling_only_changes_leading_dim() {
    let mut rng = substream(2, Stream::Init);
    let model = Model::new(micro(), &mut rng).unwrap();
    let one = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
    let two = Tensor::from_fn(&[4, 3, 8, 8], |i| one.data()[i % one.numel()]);
    let (a, b) = (descriptors(&model, &one, Mode::Eval), descriptors(&model, &two, Mode::Eval));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(y.dims()[0], 2 * x.dims()[0]);
        assert_eq!(y.dims()[1..], x.dims()[1..]);
        // Eval mode treats samples independently, so the repeated half matches.
        assert_eq!(&y.data()[x.numel()..], x.data());
    }
}

#[test]
fn final_descriptor_concatenates_verbatim() {
    let mut rng = substream(3, Stream::Init);
    let model = Model::new(micro(), &mut rng).unwrap();
    let images = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
    let mut ctx = Ctx::new(&model.params, Mode::Eval);
    let x = ctx.g.constant(images);
    let out = model.forward(&mut ctx, x).unwrap();
    let fin = final_descriptor(&mut ctx, &out.descriptors).unwrap();
    let parts: f64 = out.descriptors.iter().map(|&d| ctx.g.value(d).norm_sq()).sum();
    assert_eq!(ctx.g.dims(fin), &[2, 7]);
    assert!((ctx.g.value(fin).norm_sq() - parts).abs() < 1e-12 * parts.max(1.0));
    assert_eq!(ctx.g.value(fin).get(&[1, 0]), ctx.g.value(out.descriptors[0]).get(&[1, 0]));
    assert_eq!(ctx.g.value(fin).get(&[1, 6]), ctx.g.value(out.descriptors[2]).get(&[1, 2]));
}

#[test]
fn forward_replays_bitwise() {
    let images = Tensor::randn(&[3, 3, 8, 8], 1.0, &mut substream(4, Stream::Data));
    let a = Model::new(micro(), &mut substream(4, Stream::Init)).unwrap();
    let b = Model::new(micro(), &mut substream(4, Stream::Init)).unwrap();
    assert_eq!(descriptors(&a, &images, Mode::Train), descriptors(&b, &images, Mode::Train));
}

fn fixed_batch() -> (Tensor, Vec<usize>, LossConfig) {
    let images = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut substream(5, Stream::Data));
    let mut cfg = LossConfig::default();
    cfg.triplet.p_ids = 2;
    cfg.triplet.k_per_id = 2;
    (images, vec![0, 0, 2, 2], cfg)
}

#[test]
fn overfits_a_fixed_batch() {
    let (images, labels, cfg) = fixed_batch();
    let mut model = Model::new(micro(), &mut substream(5, Stream::Init)).unwrap();
    let mut opt = Adam::new(AdamConfig::default(), &model.params);
    let losses: Vec<f64> = (0..50)
        .map(|_| train_step(&mut model, &mut opt, &images, &labels, &cfg).unwrap().total)
        .collect();
    assert!(losses[0].is_finite() && losses[0] > 0.0);
    // Hard-example switches make single Adam steps non-monotone, so the
    // decrease is checked on 10-step means.
    let means: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    for w in means.windows(2) {
        assert!(w[1] < w[0], "loss did not decrease: {losses:?}");
    }
    assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let (images, labels, cfg) = fixed_batch();
    let mut model = Model::new(micro(), &mut substream(6, Stream::Init)).unwrap();
    let before = model.params.clone();
    let mut opt = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &model.params);
    for _ in 0..3 {
        train_step(&mut model, &mut opt, &images, &labels, &cfg).unwrap();
    }
    for (a, b) in before.entries().iter().zip(model.params.entries()) {
        if a.trainable {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
}

#[test]
fn checkpoint_reproduces_forward_bitwise() {
    let cfg = small_run();
    let ds = Dataset::synthetic(&cfg.synthetic_spec(), 1).unwrap();
    let mut trainer = Trainer::new(&cfg, &ds).unwrap();
    trainer.run(3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ck");
    Checkpoint::from_model(&cfg, &trainer.model).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.config, cfg);
    let model = loaded.into_model().unwrap();
    let images = Tensor::randn(&[2, 3, 16, 8], 1.0, &mut substream(9, Stream::Data));
    for mode in [Mode::Train, Mode::Eval] {
        assert_eq!(descriptors(&model, &images, mode), descriptors(&trainer.model, &images, mode));
    }
}

#[test]
fn training_replays_bitwise_across_thread_modes() {
    let cfg = small_run();
    let ds = Dataset::synthetic(&cfg.synthetic_spec(), 2).unwrap();
    let run = || {
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        let log = t.run(4).unwrap();
        (log, t.model.params)
    };
    par::set_enabled(false);
    let first = run();
    let second = run();
    par::set_enabled(true);
    let parallel = run();
    assert_eq!(first, second);
    assert_eq!(first, parallel);
}
