use proptest::prelude::*;

use super::*;
use crate::data::{simulate_missing, split, synth_generate, MaskSpec, SynthConfig, TimeSeriesWindow, SPLIT_FRACTIONS};
use crate::diffusion::build_schedule;
use crate::graph::build_laplacian;
use crate::model::{randomize_zero_params, HeadMode, LatentGaussian};
use crate::numerics::{grad_fd, max_rel_error, Tape};

fn tiny() -> ArchConfig {
    ArchConfig {
        n_sensors: 4,
        n_steps: 8,
        latent_dim: 4,
        hidden_dim: 6,
        head_mode: HeadMode::LinearHeads,
        decoder_heads: 2,
        decoder_ff_mult: 2,
        noise_channels: 4,
        noise_blocks: 1,
        noise_heads: 2,
        step_embed_dim: 8,
        time_embed_dim: 4,
        ..ArchConfig::default()
    }
}

fn ring_lap(n: usize) -> Array {
    let adj = Array::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        if (i + 1) % n == j || (j + 1) % n == i {
            1.0
        } else {
            0.0
        }
    });
    build_laplacian(&adj).unwrap().laplacian
}

fn window(seed: u64, missing_every: usize) -> TimeSeriesWindow {
    let mut rng = RngStream::new(seed);
    let v = Array::from_fn(&[4, 8], |_| rng.uniform());
    let m = Array::from_fn(&[4, 8], |k| {
        if missing_every > 0 && k % missing_every == 0 {
            0.0
        } else {
            1.0
        }
    });
    TimeSeriesWindow::new(v.mul(&m).unwrap(), m, "g").unwrap()
}

fn random_params(arch: &ArchConfig, seed: u64) -> ParamSet {
    let mut rng = RngStream::new(seed);
    let mut ps = init_params(arch, &mut rng).unwrap();
    randomize_zero_params(&mut ps, arch, &mut rng).unwrap();
    ps
}

fn assert_fd<F>(ps: &ParamSet, f: F)
where
    F: for<'t> Fn(&'t Tape, &crate::numerics::Bindings<'t>) -> Result<crate::numerics::Var<'t>> + Copy,
{
    let (_, g) = grad_backprop(ps, f).unwrap();
    let n = grad_fd(ps, 1e-5, f).unwrap();
    let err = max_rel_error(&g, &n);
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn kl_closed_form_cases() {
    let zero = LatentGaussian {
        mean: Array::zeros(&[3, 2]),
        log_var: Array::zeros(&[3, 2]),
    };
    assert_eq!(kl_diag_gauss(&zero).unwrap(), 0.0);
    for k in [1usize, 5, 64] {
        let unit = LatentGaussian {
            mean: Array::ones(&[k]),
            log_var: Array::zeros(&[k]),
        };
        assert!((kl_diag_gauss(&unit).unwrap() - k as f64 / 2.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn kl_nonnegative(ms in prop::collection::vec(-5.0f64..5.0, 1..12), seed in 0u64..1000) {
        let mut rng = RngStream::new(seed);
        let lv: Vec<f64> = ms.iter().map(|_| 6.0 * rng.uniform() - 3.0).collect();
        let lat = LatentGaussian {
            mean: Array::new(&[ms.len()], ms.clone()).unwrap(),
            log_var: Array::new(&[lv.len()], lv).unwrap(),
        };
        prop_assert!(kl_diag_gauss(&lat).unwrap() >= 0.0);
    }
}

#[test]
fn kl_var_matches_array_form() {
    let mean = Array::new(&[3], vec![0.3, -1.0, 2.0]).unwrap();
    let log_var = Array::new(&[3], vec![0.1, -0.5, 1.2]).unwrap();
    let tape = Tape::new();
    let v = kl_var(tape.constant(mean.clone()), tape.constant(log_var.clone())).unwrap();
    let want = kl_diag_gauss(&LatentGaussian { mean, log_var }).unwrap();
    assert!((v.value().item().unwrap() - want).abs() < 1e-14);
}

/// Encoder weights zero (latent `N(0, I)`), decoder output fixed by its
/// bias, window equal to that bias on every sensor.
#[test]
fn perfect_reconstruction_at_prior_gives_zero_l1() {
    let arch = tiny();
    let mut ps = init_params(&arch, &mut RngStream::new(1)).unwrap();
    for p in ["enc.w1", "enc.w2_u", "enc.w2_sigma"] {
        let shape = ps.get(p).unwrap().shape().to_vec();
        *ps.get_mut(p).unwrap() = Array::zeros(&shape);
    }
    let row: Vec<f64> = (0..8).map(|t| 0.1 * t as f64).collect();
    *ps.get_mut("dec.out.b").unwrap() = Array::new(&[8], row.clone()).unwrap();
    let v = Array::from_fn(&[4, 8], |k| row[k % 8]);
    let w = TimeSeriesWindow::new(v, Array::ones(&[4, 8]), "g").unwrap();
    let (l1, x_bar) = loss_vae(&w, &ring_lap(4), &ps, &arch, 1.0, &mut RngStream::new(2))
        .unwrap()
        .unwrap();
    assert!(l1.abs() < 1e-20, "{l1}");
    assert_eq!(x_bar.shape(), &[4, 8]);
}

#[test]
fn l1_ignores_unobserved_values() {
    let arch = tiny();
    let ps = random_params(&arch, 3);
    let w = window(4, 3);
    let mut poisoned = w.clone();
    for k in 0..32 {
        if w.observed_mask.data()[k] == 0.0 {
            poisoned.values.data_mut()[k] = 1e30;
        }
    }
    let lap = ring_lap(4);
    let a = loss_vae(&w, &lap, &ps, &arch, 1.0, &mut RngStream::new(5))
        .unwrap()
        .unwrap();
    let b = loss_vae(&poisoned, &lap, &ps, &arch, 1.0, &mut RngStream::new(5))
        .unwrap()
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn window_without_observations_is_skipped() {
    let arch = tiny();
    let ps = random_params(&arch, 3);
    let w = TimeSeriesWindow::new(Array::zeros(&[4, 8]), Array::zeros(&[4, 8]), "g").unwrap();
    assert!(loss_vae(&w, &ring_lap(4), &ps, &arch, 1.0, &mut RngStream::new(1))
        .unwrap()
        .is_none());
}

#[test]
fn l1_gradient_matches_fd() {
    let arch = tiny();
    let ps = random_params(&arch, 6);
    let mut vae = ps.subset(ENCODER_PREFIX);
    vae.merge(ps.subset(DECODER_PREFIX)).unwrap();
    let batch = Batch::new(&[&window(7, 3), &window(8, 5)]).unwrap().unwrap();
    let eps = gauss_sample(&mut RngStream::new(9), &[2, 4, 4]).unwrap();
    let lap = ring_lap(4);
    assert_fd(&vae, |_, b| Ok(vae_terms(b, &arch, &lap, &batch, &eps, 0.7)?.l1));
}

#[test]
fn l2_gradient_matches_fd_and_masks_observed() {
    let arch = tiny();
    let theta = random_params(&arch, 10).subset(DENOISER_PREFIX);
    let batch = Batch::new(&[&window(11, 3), &window(12, 4)]).unwrap().unwrap();
    let s = build_schedule(5, 1e-3, 0.3, crate::diffusion::ScheduleKind::Quadratic).unwrap();
    let x_bar = gauss_sample(&mut RngStream::new(13), &[2, 4, 8]).unwrap();
    let eps = gauss_sample(&mut RngStream::new(14), &[2, 4, 8]).unwrap();
    let t = [2usize, 5];
    let run = |eps: &Array| {
        crate::numerics::eval_loss(&theta, |tape, b| {
            diffusion_term(b, &arch, &batch, tape.constant(x_bar.clone()), &t, eps, &s)
        })
        .unwrap()
    };
    assert_fd(&theta, |tape, b| {
        diffusion_term(b, &arch, &batch, tape.constant(x_bar.clone()), &t, &eps, &s)
    });

    let bumped = Array::from_fn(eps.shape(), |k| eps.data()[k] + 3.0 * batch.mask.data()[k]);
    assert_eq!(run(&eps), run(&bumped));
}

#[test]
fn l2_zero_for_perfect_denoiser_and_full_windows() {
    let arch = tiny();
    let s = build_schedule(5, 1e-3, 0.3, crate::diffusion::ScheduleKind::Quadratic).unwrap();
    // Zero-initialized output layer predicts zero noise; zero noise is then
    // predicted perfectly.
    let ps = init_params(&arch, &mut RngStream::new(2)).unwrap();
    let batch = Batch::new(&[&window(1, 3)]).unwrap().unwrap();
    let x_bar = Array::full(&[1, 4, 8], 0.4);
    let l2 = crate::numerics::eval_loss(&ps, |tape, b| {
        diffusion_term(
            b,
            &arch,
            &batch,
            tape.constant(x_bar.clone()),
            &[3],
            &Array::zeros(&[1, 4, 8]),
            &s,
        )
    })
    .unwrap();
    assert_eq!(l2, 0.0);
    let full = window(2, 0);
    let rp = random_params(&arch, 3);
    let l2 = loss_diffusion(
        &full,
        &Array::full(&[4, 8], 0.3),
        &rp,
        &arch,
        &s,
        &mut RngStream::new(4),
    )
    .unwrap();
    assert_eq!(l2, 0.0);
    let part = window(2, 3);
    let l2 = loss_diffusion(
        &part,
        &Array::full(&[4, 8], 0.3),
        &rp,
        &arch,
        &s,
        &mut RngStream::new(4),
    )
    .unwrap();
    assert!(l2 > 0.0);
}

fn touched(before: &ParamSet, after: &ParamSet) -> Vec<String> {
    before
        .iter()
        .filter(|(p, v)| after.get(p).unwrap() != &v.value)
        .map(|(p, _)| p.clone())
        .collect()
}

#[test]
fn alternating_steps_update_disjoint_groups() {
    let arch = tiny();
    let s = build_schedule(5, 1e-3, 0.3, crate::diffusion::ScheduleKind::Quadratic).unwrap();
    let lap = ring_lap(4);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(&arch, &s, &lap, &cfg, random_params(&arch, 20)).unwrap();
    let batch = Batch::new(&[&window(1, 3), &window(2, 4)]).unwrap().unwrap();
    let noise = BatchNoise::draw(batch.shape(), arch.latent_dim, &s, &mut RngStream::new(3)).unwrap();

    let p0 = tr.params.clone();
    let (_, x_bar) = tr.vae_step(&batch, &noise).unwrap();
    let moved = touched(&p0, &tr.params);
    assert!(!moved.is_empty());
    assert!(moved.iter().all(|p| !p.starts_with(DENOISER_PREFIX)));

    let p1 = tr.params.clone();
    tr.denoiser_step(&batch, &x_bar, &noise).unwrap();
    let moved = touched(&p1, &tr.params);
    assert!(!moved.is_empty());
    assert!(moved.iter().all(|p| p.starts_with(DENOISER_PREFIX)));
}

#[test]
fn joint_step_updates_everything() {
    let arch = tiny();
    let s = build_schedule(5, 1e-3, 0.3, crate::diffusion::ScheduleKind::Quadratic).unwrap();
    let lap = ring_lap(4);
    let cfg = TrainConfig {
        joint_step: true,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(&arch, &s, &lap, &cfg, random_params(&arch, 21)).unwrap();
    let batch = Batch::new(&[&window(1, 3)]).unwrap().unwrap();
    let noise = BatchNoise::draw(batch.shape(), arch.latent_dim, &s, &mut RngStream::new(3)).unwrap();
    let p0 = tr.params.clone();
    let out = tr.step(&batch, &noise).unwrap();
    assert!(out.l2 > 0.0);
    let moved = touched(&p0, &tr.params);
    assert!(moved.iter().any(|p| p.starts_with(ENCODER_PREFIX)));
    assert!(moved.iter().any(|p| p.starts_with(DENOISER_PREFIX)));
}

struct Toy {
    train: Dataset,
    valid: Dataset,
    held_valid: HeldOut,
    lap: Array,
}

fn toy_data() -> Toy {
    let cfg = SynthConfig {
        n_sensors: 4,
        n_steps: 8,
        n_windows: 20,
        ..SynthConfig::default()
    };
    let (ds, g) = synth_generate(&cfg, &mut RngStream::new(1)).unwrap();
    let (tr, va, _) = split(&ds, SPLIT_FRACTIONS).unwrap();
    let (train, _) = simulate_missing(&tr, &MaskSpec::point(0.25, 2)).unwrap();
    let (valid, held_valid) = simulate_missing(&va, &MaskSpec::point(0.25, 3)).unwrap();
    Toy {
        train,
        valid,
        held_valid,
        lap: g.laplacian,
    }
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        learning_rate: 1e-3,
        valid_samples: 2,
        record_timing: false,
        ..TrainConfig::default()
    }
}

fn sched() -> ScheduleConfig {
    ScheduleConfig {
        steps: 5,
        ..ScheduleConfig::default()
    }
}

#[test]
fn zero_epochs_returns_initialization() {
    let toy = toy_data();
    let arch = tiny();
    let cfg = quick_cfg(0);
    let out = train(
        &toy.train,
        &toy.valid,
        &toy.held_valid,
        &toy.lap,
        &arch,
        &sched(),
        &cfg,
        |_| Ok(()),
    )
    .unwrap();
    let init = init_params(&arch, &mut RngStream::new(cfg.seed).split(STREAM_INIT)).unwrap();
    assert_eq!(out.params, init);
    assert!(out.log.is_empty());
}

#[test]
fn short_run_is_finite_and_deterministic() {
    let toy = toy_data();
    let arch = tiny();
    let cfg = quick_cfg(3);
    let mut lines = Vec::new();
    let a = train(
        &toy.train,
        &toy.valid,
        &toy.held_valid,
        &toy.lap,
        &arch,
        &sched(),
        &cfg,
        |r| {
            lines.push(log_line(r)?);
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(a.log.len(), 3);
    assert_eq!(lines.len(), 3);
    assert!(lines[0].contains("\"seconds\":null"));
    for r in &a.log {
        assert!(r.l1.is_finite() && r.l2.is_finite() && r.kl.is_finite());
        assert!(r.valid_mae.unwrap().is_finite());
    }
    let b = train(
        &toy.train,
        &toy.valid,
        &toy.held_valid,
        &toy.lap,
        &arch,
        &sched(),
        &cfg,
        |_| Ok(()),
    )
    .unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    assert!(a.best_epoch.is_some());
}

#[test]
fn divergence_reports_coordinates() {
    let toy = toy_data();
    let arch = tiny();
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..quick_cfg(3)
    };
    match train(
        &toy.train,
        &toy.valid,
        &toy.held_valid,
        &toy.lap,
        &arch,
        &sched(),
        &cfg,
        |_| Ok(()),
    ) {
        Err(Error::Diverged { epoch, .. }) => assert!(epoch < 3),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let arch = tiny();
    let ps = random_params(&arch, 2);
    let meta = CheckpointMeta {
        version: VERSION.into(),
        arch: arch.clone(),
        schedule: sched(),
        train: quick_cfg(1),
        best_epoch: Some(0),
        best_valid_mae: Some(0.5),
        extra: serde_json::Value::Null,
    };
    save_checkpoint(dir.path(), &ps, &meta).unwrap();
    let (back, m) = load_checkpoint(dir.path(), Some(&arch)).unwrap();
    assert_eq!(back, ps);
    assert_eq!(m, meta);
    let other = ArchConfig { hidden_dim: 7, ..arch };
    match load_checkpoint(dir.path(), Some(&other)) {
        Err(Error::ManifestMismatch { field, .. }) => assert_eq!(field, "arch.hidden_dim"),
        other => panic!("{:?}", other.map(|x| x.1)),
    }
}
