use super::*;
use crate::autodiff::NormMode;
use crate::data::{generate_shapes, generate_textured_mnist, DigitSource};
use crate::rng::seeded;

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.layers = vec![24, 12];
    c.batch = 20;
    c.epochs = 2;
    c.supervised_epochs = 1;
    c.validation_limit = 40;
    c
}

fn toy_digits() -> DigitSource {
    let images = Tensor::from_fn(&[20, 28, 28], |i| {
        let (k, j) = (i / 784, i % 784);
        let (r, c) = (j / 28, j % 28);
        let class = k % 10;
        f64::from(u8::from((6..22).contains(&r) && (c == 3 + 2 * class || r == 6 + class)))
    });
    DigitSource::new(images, (0..20).map(|k| (k % 10) as u8).collect()).unwrap()
}

#[test]
fn gradients_reach_every_part_of_the_mapping() {
    let data = generate_shapes(40, 1).unwrap();
    let x = data.batch(&(0..20).collect::<Vec<_>>());
    let mut t = Trainer::new(small_config(), DatasetKind::Shapes, 400).unwrap();
    let nonzero = |g: &Tensor| g.data().iter().any(|&v| v != 0.0);
    // The identity-like combinator start (a1 = a4 = a6 = a9 = 0) passes only
    // the lateral signal, so the decoder is cut off until the first step.
    let (_, fresh) = t.gradients(&x, None).unwrap();
    let fresh = named_params(&fresh);
    assert!(!nonzero(&fresh["decoder.0.weight"]));
    t.step(&x, None).unwrap();
    let (_, grads) = t.gradients(&x, None).unwrap();
    let grads = named_params(&grads);
    for name in ["input.weight", "output.weight", "decoder.0.weight", "encoder.1.weight"] {
        assert!(nonzero(&grads[name]), "{name}");
    }
    for level in 0..2 {
        assert!(
            (1..=10).any(|j| nonzero(&grads[&format!("combinator.{level}.a{j}")])),
            "combinator {level}"
        );
    }
    // Nested sigmoid branches open one level per step.
    for _ in 0..3 {
        t.step(&x, None).unwrap();
    }
    let (_, grads) = t.gradients(&x, None).unwrap();
    for (name, g) in named_params(&grads) {
        assert!(g.all_finite());
        // Binary inputs have no group variance.
        if name == "log_v" {
            assert!(!nonzero(&g));
            continue;
        }
        assert!(nonzero(&g), "{name} has a zero gradient");
    }
}

#[test]
fn same_seed_same_parameters() {
    let data = generate_shapes(60, 2).unwrap();
    let run = || {
        let mut t = Trainer::new(small_config(), DatasetKind::Shapes, 400).unwrap();
        t.train(&data, None, None, |_, _| Ok(())).unwrap();
        t.model
    };
    assert_eq!(run(), run());
}

#[test]
fn validation_cost_drops_on_shapes() {
    let data = generate_shapes(600, 3).unwrap();
    let val = generate_shapes(100, 4).unwrap();
    let mut c = small_config();
    c.layers = vec![64, 32];
    c.epochs = 4;
    let mut t = Trainer::new(c, DatasetKind::Shapes, 400).unwrap();
    let initial = t.validate(&val).unwrap();
    let records = t.train(&data, Some(&val), None, |_, _| Ok(())).unwrap();
    assert_eq!(records.len(), 4);
    let last = &records.last().unwrap().val_costs;
    assert!(last[0] < initial[0], "{last:?} vs {initial:?}");
    assert!(records.iter().all(|r| r.phase == Phase::Unsupervised && r.train_ce.is_none()));
}

#[test]
fn checkpoint_round_trip_preserves_evaluation_bitwise() {
    let data = generate_shapes(60, 5).unwrap();
    let mut t = Trainer::new(small_config(), DatasetKind::Shapes, 400).unwrap();
    t.train(&data, None, None, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.tagd");
    let ckpt = t.checkpoint();
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let opts = EvalOptions {
        groups: 4,
        iterations: 5,
        batch: 25,
        seed: 3,
        eval_noise: EvalNoise::Keep,
    };
    let a = eval::evaluate(&t.model, &data, &opts).unwrap();
    let b = eval::evaluate(&back.model, &data, &opts).unwrap();
    let bits = |r: &eval::EvalReport| r.denoising_costs.iter().map(|c| c.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a, b);
}

#[test]
fn resume_continues_the_step_counter_and_rejects_conflicts() {
    let data = generate_shapes(60, 6).unwrap();
    let mut c = small_config();
    c.epochs = 1;
    let mut t = Trainer::new(c.clone(), DatasetKind::Shapes, 400).unwrap();
    t.train(&data, None, None, |_, _| Ok(())).unwrap();
    let steps = t.adam.step;
    let mut c2 = c.clone();
    c2.epochs = 2;
    let mut resumed = Trainer::resume(c2.clone(), t.checkpoint()).unwrap();
    let records = resumed.train(&data, None, None, |_, _| Ok(())).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(resumed.adam.step, 2 * steps);

    // Resuming matches an uninterrupted run.
    let mut straight = Trainer::new(c2, DatasetKind::Shapes, 400).unwrap();
    straight.train(&data, None, None, |_, _| Ok(())).unwrap();
    assert_eq!(straight.model, resumed.model);

    let mut bad = c.clone();
    bad.groups = 3;
    assert!(matches!(Trainer::resume(bad, t.checkpoint()), Err(Error::Config(_))));
}

#[test]
fn divergence_rolls_back_and_reports() {
    let data = generate_shapes(60, 7).unwrap();
    let mut t = Trainer::new(small_config(), DatasetKind::Shapes, 400).unwrap();
    let mut saved = 0;
    t.train(&data, None, None, |_, _| {
        saved += 1;
        Ok(())
    })
    .unwrap();
    let mut c = t.config.clone();
    c.epochs = 3;
    t.config = c;
    t.model.params.output_bias.data_mut()[0] = f64::NAN;
    // NaN != NaN, so compare printed state.
    let before = format!("{:?}", (&t.model, &t.adam, t.epoch));
    match t.train(&data, None, None, |_, _| Ok(())) {
        Err(Error::Diverged { epoch, .. }) => assert_eq!(epoch, 3),
        other => panic!("{other:?}"),
    }
    assert_eq!(format!("{:?}", (&t.model, &t.adam, t.epoch)), before);
    assert_eq!(saved, 2);
}

#[test]
fn semi_supervised_phase_adds_the_head() {
    let src = toy_digits();
    let data = generate_textured_mnist(80, 2, &src, 1).unwrap();
    let mut c = small_config();
    c.norm = NormMode::Layer;
    let mut t = Trainer::new(c, DatasetKind::TexturedMnist2, 784).unwrap();
    let labeled = label_budget_indices(80, 30, 0);
    let records = t.train(&data, None, Some(&labeled), |_, _| Ok(())).unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(records[2].phase, Phase::Supervised);
    assert!(records[2].train_ce.unwrap().is_finite());
    assert!(t.model.params.class_head.is_some());
    let run = t.model.run(&data.batch(&[0, 1, 2]), &mut seeded(0), &t.model.eval_options(4, 3)).unwrap();
    for row in run.class_probs.unwrap().data().chunks(10) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zero_class_weight_never_trains_the_head() {
    let src = toy_digits();
    let data = generate_textured_mnist(40, 1, &src, 2).unwrap();
    let mut c = small_config();
    c.class_weight = 0.0;
    c.epochs = 0;
    let mut t = Trainer::new(c, DatasetKind::TexturedMnist1, 784).unwrap();
    t.enable_class_head();
    let head = t.model.params.class_head.clone();
    t.phase = Phase::Unsupervised;
    t.train(&data, None, Some(&[0, 1, 2, 3]), |_, _| Ok(())).unwrap();
    assert_eq!(t.model.params.class_head, head);
}

#[test]
fn labeled_set_errors() {
    let data = generate_shapes(20, 1).unwrap();
    let mut t = Trainer::new(small_config(), DatasetKind::Shapes, 400).unwrap();
    assert!(matches!(t.train(&data, None, Some(&[]), |_, _| Ok(())), Err(Error::Data(_))));
    assert!(matches!(t.train(&data, None, Some(&[1]), |_, _| Ok(())), Err(Error::Data(_))));
    let src = toy_digits();
    let mut digits = generate_textured_mnist(20, 1, &src, 2).unwrap();
    digits.classes.as_mut().unwrap()[3] = vec![12];
    let mut t = Trainer::new(small_config(), DatasetKind::TexturedMnist1, 784).unwrap();
    assert!(matches!(t.train(&digits, None, Some(&[3]), |_, _| Ok(())), Err(Error::Data(_))));
}

#[test]
fn label_helpers() {
    let a = label_budget_indices(100, 10, 4);
    assert_eq!(a.len(), 10);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(a, label_budget_indices(100, 10, 4));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("labels.txt");
    std::fs::write(&p, "# labeled\n3\n 7 \n\n11 # last\n").unwrap();
    assert_eq!(read_label_indices(&p).unwrap(), vec![3, 7, 11]);
    std::fs::write(&p, "x\n").unwrap();
    assert!(read_label_indices(&p).is_err());
}

#[test]
fn metrics_rows_are_tab_separated() {
    let r = EpochRecord {
        epoch: 2,
        phase: Phase::Supervised,
        steps: 40,
        train_cost: 0.5,
        train_ce: None,
        val_costs: vec![0.25, 0.125],
    };
    assert_eq!(
        EpochRecord::tsv_header(2),
        "epoch\tphase\tsteps\ttrain_cost\ttrain_class_ce\tval_cost_1\tval_cost_2\n"
    );
    assert_eq!(r.tsv_row(), "2\tsupervised\t40\t0.500000000\t-\t0.250000000\t0.125000000\n");
}
