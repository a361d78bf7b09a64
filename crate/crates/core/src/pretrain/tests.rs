use super::*;
use crate::blocks::{Config, ModelConfig};
use crate::error::Error;
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::pointops::ShapeKind;

fn tiny_data(n: usize, points: usize) -> (Config, Vec<Sample>) {
    let mut cfg = Config::tiny();
    cfg.train.points = points;
    let data = toy_dataset(&ShapeKind::ALL, n.div_ceil(4), points, 7)
        .unwrap()
        .into_iter()
        .take(n)
        .map(|(c, _)| Sample::new(&c, &cfg.model).unwrap())
        .collect();
    (cfg, data)
}

#[test]
fn mask_examples() {
    let all = make_mask(10, 0.0, 3).unwrap();
    assert_eq!(all.visible_idx, (0..10).collect::<Vec<_>>());
    assert!(all.masked_idx.is_empty());

    let m = make_mask(64, 0.6, 5).unwrap();
    assert_eq!((m.masked_idx.len(), m.visible_idx.len()), (38, 26));
    let mut union: Vec<usize> = m.masked_idx.iter().chain(&m.visible_idx).copied().collect();
    union.sort_unstable();
    assert_eq!(union, (0..64).collect::<Vec<_>>());
    assert_eq!(m, make_mask(64, 0.6, 5).unwrap());
    assert_ne!(m.masked_idx, make_mask(64, 0.6, 6).unwrap().masked_idx);

    assert!(matches!(make_mask(8, 1.0, 0), Err(Error::Argument(_))));
    // 0.95 * 8 rounds to 8: nothing would stay visible
    assert!(matches!(make_mask(8, 0.95, 0), Err(Error::Argument(_))));
}

#[test]
fn ssc_and_total_examples() {
    let eval = |d: f64| {
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::full(&[4, 3], 1.0 + d));
        let l = ssc_loss(&mut tape, s, &Tensor::full(&[4, 3], 1.0), 1.0).unwrap();
        tape.value(l).item()
    };
    assert_eq!(eval(0.0), 0.0);
    assert!((eval(0.5) - 0.125).abs() < 1e-15);
    assert!((eval(2.0) - 1.5).abs() < 1e-15);
    assert!((eval(-2.0) - 1.5).abs() < 1e-15);

    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::zeros(&[2, 2]));
    assert!(matches!(ssc_loss(&mut tape, s, &Tensor::zeros(&[2, 3]), 1.0), Err(Error::Dimension(_))));

    let mut tape = Tape::new();
    let (a, b) = (tape.constant(Tensor::scalar(1.0)), tape.constant(Tensor::scalar(0.5)));
    let t = total_loss(&mut tape, a, b, 2.0).unwrap();
    assert_eq!(tape.value(t).item(), 2.0);
    let z = tape.constant(Tensor::scalar(0.0));
    let t = total_loss(&mut tape, z, z, 2.0).unwrap();
    assert_eq!(tape.value(t).item(), 0.0);
    assert!(total_loss(&mut tape, a, b, -1.0).is_err());
}

#[test]
fn ssc_gradient_matches_finite_differences() {
    use crate::numerics::{grad_check, GradCheckOptions};
    let target = Tensor::new(&[2, 3], vec![0.1, -0.4, 2.0, 0.0, 1.5, -3.0]).unwrap();
    let mut ps = ParamStore::new();
    ps.insert("s", Tensor::new(&[2, 3], vec![0.3, 0.2, -0.7, 0.05, 1.1, -0.2]).unwrap());
    let report = grad_check(
        |tape, ps| {
            let s = tape.param(ps, "s")?;
            ssc_loss(tape, s, &target, 1.0)
        },
        &ps,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn ema_examples_and_errors() {
    let store = |v: f64| {
        let mut ps = ParamStore::new();
        ps.insert("encoder.w", Tensor::full(&[2], v));
        ps
    };
    let mut t = TeacherState::new(&store(0.0), 0.5);
    ema_update(&mut t, &store(2.0)).unwrap();
    assert_eq!(t.params.get("encoder.w").unwrap().data(), &[1.0, 1.0]);

    let mut t = TeacherState::new(&store(3.0), 1.0);
    ema_update(&mut t, &store(2.0)).unwrap();
    assert_eq!(t.params.get("encoder.w").unwrap().data(), &[3.0, 3.0]);

    let mut t = TeacherState::new(&store(3.0), 0.0);
    ema_update(&mut t, &store(2.0)).unwrap();
    assert_eq!(t.params.get("encoder.w").unwrap().data(), &[2.0, 2.0]);

    let mut other = ParamStore::new();
    other.insert("encoder.v", Tensor::full(&[2], 1.0));
    assert!(matches!(ema_update(&mut t, &other), Err(Error::Contract(_))));
    let mut wrong = ParamStore::new();
    wrong.insert("encoder.w", Tensor::full(&[3], 1.0));
    assert!(matches!(ema_update(&mut t, &wrong), Err(Error::Contract(_))));
}

#[test]
fn cosine_schedule_shape() {
    assert!((cosine_lr(1.0, 0, 10, 100) - 0.1).abs() < 1e-15);
    assert!((cosine_lr(1.0, 9, 10, 100) - 1.0).abs() < 1e-15);
    assert!((cosine_lr(1.0, 10, 10, 100) - 1.0).abs() < 1e-15);
    assert!((cosine_lr(1.0, 55, 10, 100) - 0.5).abs() < 1e-12);
    assert!(cosine_lr(1.0, 100, 10, 100).abs() < 1e-15);
    let lrs: Vec<f64> = (10..100).map(|s| cosine_lr(1.0, s, 10, 100)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(cosine_lr(2.0, 0, 0, 10), 2.0);
}

#[test]
fn adamw_first_step_and_decay_scope() {
    let mut params = ParamStore::new();
    params.insert("a.weight", Tensor::full(&[2], 1.0));
    params.insert("a.bias", Tensor::full(&[2], 1.0));
    let mut grads = ParamStore::new();
    grads.insert("a.weight", Tensor::new(&[2], vec![0.5, -2.0]).unwrap());
    grads.insert("a.bias", Tensor::new(&[2], vec![0.5, -2.0]).unwrap());
    let cfg = AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 0.0, weight_decay: 0.5 };
    let mut opt = AdamW::new(cfg, &params);
    opt.update(&mut params, &grads, 0.1).unwrap();
    // bias-corrected first step moves by lr * sign(g)
    assert_eq!(params.get("a.bias").unwrap().data(), &[0.9, 1.1]);
    let w = params.get("a.weight").unwrap().data();
    assert!((w[0] - (1.0 - 0.1 - 0.05)).abs() < 1e-15 && (w[1] - (1.0 + 0.1 - 0.05)).abs() < 1e-15);
    assert_eq!(opt.step, 1);
}

#[test]
fn ssc_is_exactly_zero_without_masking() {
    let (mut cfg, data) = tiny_data(4, 96);
    cfg.model.mask_ratio = 0.0;
    let mut tr = Trainer::new(cfg).unwrap();
    let m = tr.train_step(&data, &[0, 1, 2, 3], 1e-3).unwrap();
    assert_eq!(m.l_ssc, 0.0);
    assert_eq!(m.l_cd, 0.0);
    assert!(m.grad_norm == 0.0);
}

#[test]
fn step_metrics_consistent_and_teacher_isolated() {
    let (cfg, data) = tiny_data(4, 96);
    let mut tr = Trainer::new(cfg).unwrap();
    let before = tr.teacher.params.clone();
    let enc = tr.student.subset("encoder.");
    assert!(before.same_paths(&enc));
    let m = tr.train_step(&data, &[0, 1], tr.lr_at(0, 4)).unwrap();
    assert!(m.l_cd.is_finite() && m.l_ssc.is_finite() && m.grad_norm > 0.0);
    assert!((m.l_total - (m.l_cd + 2.0 * m.l_ssc)).abs() <= 1e-12);
    // Only the EMA moved the teacher, by exactly (1 - decay) of the student's change.
    let d = tr.teacher.decay;
    for (p, t) in tr.teacher.params.iter() {
        let s = tr.student.get(p).unwrap();
        let b = before.get(p).unwrap();
        for ((tv, bv), sv) in t.data().iter().zip(b.data()).zip(s.data()) {
            assert_eq!(*tv, d * bv + (1.0 - d) * sv);
        }
    }
}

#[test]
fn every_student_parameter_receives_gradient() {
    let (cfg, data) = tiny_data(4, 96);
    let tr = Trainer::new(cfg.clone()).unwrap();
    let mut tape = Tape::new();
    let mut acc = None;
    for (i, s) in data.iter().enumerate() {
        let target = teacher_states(&tr.teacher.params, &cfg.model, s).unwrap();
        let mask = tr.mask_for(0, i).unwrap();
        // perturb the pseudo-labels so the consistency term is active from the start
        let target = target.map(|v| v + 0.1);
        let l = sample_loss(&mut tape, &tr.student, &cfg.model, s, &mask, &target).unwrap();
        acc = Some(match acc {
            None => l.total,
            Some(a) => tape.add(a, l.total).unwrap(),
        });
    }
    tape.backward(acc.unwrap()).unwrap();
    let grads = tape.param_grads();
    assert!(grads.same_paths(&tr.student), "some parameters never reached the tape");
    let dead: Vec<&str> = grads.iter().filter(|(_, g)| g.data().iter().all(|&v| v == 0.0)).map(|(p, _)| p.as_str()).collect();
    assert!(dead.is_empty(), "zero gradient for {dead:?}");
    for key in ["ssm_f.tau", "ssm_b.a", "ssm_f.mlp_b.0.weight", "ssm_b.mlp_c.1.bias"] {
        assert!(grads.paths().any(|p| p.ends_with(key)), "{key}");
    }
}

#[test]
fn training_is_deterministic_and_resume_is_exact() {
    let (mut cfg, data) = tiny_data(6, 96);
    cfg.train.epochs = 3;
    cfg.train.warmup_epochs = 1;
    let mut a = Trainer::new(cfg.clone()).unwrap();
    let mut curve_a = Vec::new();
    for _ in 0..3 {
        curve_a.extend(a.train_epoch(&data, |_| Ok(())).unwrap());
    }

    let mut b = Trainer::new(cfg.clone()).unwrap();
    let mut curve_b = b.train_epoch(&data, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.smb3");
    b.save(&path).unwrap();
    drop(b);
    let mut b = Trainer::load(cfg.clone(), &path).unwrap();
    assert_eq!((b.epoch, b.step()), (1, 2));
    for _ in 0..2 {
        curve_b.extend(b.train_epoch(&data, |_| Ok(())).unwrap());
    }
    assert_eq!(curve_a, curve_b);
    assert_eq!(a.student.checksum(), b.student.checksum());
    assert_eq!(a.teacher.params.checksum(), b.teacher.params.checksum());
    assert_eq!(a.to_store().checksum(), b.to_store().checksum());
}

#[test]
fn run_writes_metrics_and_resumes_in_place() {
    let (mut cfg, data) = tiny_data(4, 96);
    cfg.train.epochs = 2;
    cfg.train.checkpoint_every = 1;
    let dir = tempfile::tempdir().unwrap();
    let paths = RunPaths::in_dir(dir.path());

    let mut full = Trainer::new(cfg.clone()).unwrap();
    run(&mut full, &data, &paths, |_, _| {}).unwrap();
    let csv_full = std::fs::read_to_string(&paths.metrics).unwrap();
    assert!(csv_full.starts_with(METRICS_HEADER));
    assert_eq!(csv_full.lines().count(), 1 + 2);

    // Interrupt after one epoch, then resume from that checkpoint.
    let mut first = cfg.clone();
    first.train.epochs = 1;
    let mut part = Trainer::new(first).unwrap();
    run(&mut part, &data, &paths, |_, _| {}).unwrap();
    let mut resumed = Trainer::load(cfg.clone(), &paths.checkpoint).unwrap();
    run(&mut resumed, &data, &paths, |_, _| {}).unwrap();
    assert_eq!(std::fs::read_to_string(&paths.metrics).unwrap(), csv_full);
    assert_eq!(resumed.to_store().checksum(), full.to_store().checksum());
}

#[test]
fn checkpoint_layout_mismatch_is_reported() {
    let cfg = Config::tiny();
    let tr = Trainer::new(cfg.clone()).unwrap();
    let store = tr.to_store();
    let mut other = cfg.clone();
    other.model.width = 8;
    match Trainer::from_store(other, &store) {
        Err(Error::Argument(msg)) => assert!(msg.contains("expected"), "{msg}"),
        r => panic!("unexpected {r:?}"),
    }
    let mut missing = store.clone();
    missing.remove("meta.step");
    assert!(matches!(Trainer::from_store(cfg.clone(), &missing), Err(Error::Format(_))));
    let enc = encoder_params(&store);
    assert!(enc.same_paths(&tr.student.subset("encoder.")));
    assert!(encoder_params(&tr.student).same_paths(&enc));
}

#[test]
fn default_config_pretrain_shapes() {
    let cfg = ModelConfig::default();
    let m = make_mask(cfg.groups, cfg.mask_ratio, 0).unwrap();
    assert_eq!((m.visible_idx.len(), m.masked_idx.len(), cfg.states), (26, 38, 16));
}

#[test]
fn head_learns_separable_tokens() {
    let tokens: Vec<Tensor> = (0..6).map(|i| Tensor::full(&[4, 3], if i % 2 == 0 { 1.0 } else { -1.0 })).collect();
    let labels: Vec<usize> = (0..6).map(|i| i % 2).collect();
    let r = finetune_head(&tokens, &labels, 2, &FinetuneConfig { epochs: 50, batch_size: 3, lr: 1e-2, seed: 1 }).unwrap();
    assert!(r.epochs_to_perfect().is_some(), "{:?}", r.accuracy);
    assert!(r.head.paths().all(|p| p.starts_with("cls.")));
    assert!(finetune_head(&tokens, &labels, 1, &FinetuneConfig::default()).is_err());
}
