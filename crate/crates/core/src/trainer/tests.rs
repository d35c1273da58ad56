use super::*;
use crate::distortion::{phantom_brain, phantom_fieldmap, simulate_distortion, vdm_from_fieldmap, PhantomOptions};

fn tiny(mode: Mode) -> TrainConfig {
    let mut c = TrainConfig::new(mode, 2);
    c.unet = UNetConfig::reduced(2, &[4, 4], &[4, 4, 4]);
    c.loss.cc_window = vec![5, 5];
    c.learning_rate = 1e-3;
    c.epochs = 4;
    c
}

/// Seeded 16x16 phantoms distorted by up to ~1.5 voxels.
fn corpus(n: u64, distort: bool) -> Vec<Sample> {
    (0..n)
        .map(|seed| {
            let p = phantom_brain(seed, &[16, 16], &PhantomOptions::default()).unwrap();
            let scale = if distort { 1.5 } else { 0.0 };
            let d = vdm_from_fieldmap(&phantom_fieldmap(seed, &[16, 16], scale, 2.0).unwrap(), 1.0).unwrap();
            let epi = simulate_distortion(&p.epi_truth, &d, false).unwrap();
            let input = if distort { epi } else { p.t1w.clone() };
            samples_from_volumes(&p.t1w, &input, Some(&d), 2).unwrap().remove(0)
        })
        .collect()
}

#[test]
fn adam_matches_high_precision_recurrence() {
    // x^2 from x = 1 with lr 0.1, reference values from 30-digit arithmetic
    let want = [
        0.9000000004999999975,
        0.80041222869179214524,
        0.70158627294602954516,
        0.6039390605737448393,
        0.50796365926434067674,
        0.41423645599366060874,
        0.3234207049391005065,
        0.23626372452104057979,
        0.15358456007036253631,
        0.076249155606911102582,
    ];
    let mut x = vec![vec![1.0]];
    let mut st = AdamState::new(&[1]);
    for w in want {
        let g = [2.0 * x[0][0]];
        adam_step(&mut x, &[&g], &mut st, 0.1).unwrap();
        assert!((x[0][0] - w).abs() < 1e-10, "{} vs {w}", x[0][0]);
    }
    assert_eq!(st.t, 10);
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let mut p = vec![vec![0.5, -2.0, 3.0]];
    let g = [1e-3, -40.0, 7.0];
    let mut st = AdamState::new(&[3]);
    adam_step(&mut p, &[&g], &mut st, 0.01).unwrap();
    for (v, (orig, gi)) in p[0].iter().zip([0.5, -2.0, 3.0].iter().zip(g)) {
        // |g| / (|g| + eps) differs from 1 by about eps / |g|
        let tol = 0.01 * 1e-8 / gi.abs() + 1e-15;
        assert!((v - (orig - 0.01 * gi.signum())).abs() <= tol);
    }
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = vec![vec![1.0, 2.0], vec![3.0]];
    let mut st = AdamState::new(&[2, 1]);
    for _ in 0..5 {
        adam_step(&mut p, &[&[0.0, 0.0], &[0.0]], &mut st, 0.1).unwrap();
    }
    assert_eq!(p, vec![vec![1.0, 2.0], vec![3.0]]);
}

#[test]
fn adam_rejects_mismatched_shapes() {
    let mut p = vec![vec![1.0, 2.0]];
    let mut st = AdamState::new(&[2]);
    assert!(matches!(adam_step(&mut p, &[&[1.0]], &mut st, 0.1), Err(Error::Contract(_))));
    assert!(matches!(adam_step(&mut p, &[], &mut st, 0.1), Err(Error::Contract(_))));
}

#[test]
fn training_is_deterministic() {
    let data = corpus(3, true);
    for mode in Mode::ALL {
        let cfg = tiny(mode);
        let (w1, h1) = train(&data, &cfg).unwrap();
        let (w2, h2) = train(&data, &cfg).unwrap();
        assert_eq!(w1, w2);
        let totals = |h: &TrainHistory| h.epochs.iter().map(|r| r.total).collect::<Vec<_>>();
        assert_eq!(totals(&h1), totals(&h2));
        assert_eq!(h1.epochs.len(), cfg.epochs);
        assert_eq!(w1.info.mode, Some(mode));
    }
}

#[test]
fn supervised_loss_falls() {
    let data = corpus(4, true);
    let mut cfg = tiny(Mode::Supervised);
    cfg.epochs = 30;
    let (_, h) = train(&data, &cfg).unwrap();
    let s = h.smoothed_totals(5);
    assert!(s.last().unwrap() < s.first().unwrap(), "{s:?}");
}

#[test]
fn self_mode_on_undistorted_pairs_keeps_map_small() {
    let data = corpus(4, false);
    let mut cfg = tiny(Mode::SelfSupervised);
    cfg.epochs = 20;
    let (w, _) = train(&data, &cfg).unwrap();
    for s in &data {
        let (gdm, _) = estimate(&w, s, 0).unwrap();
        assert!(gdm.max_abs() < 0.5, "{}", gdm.max_abs());
    }
}

#[test]
fn reference_required_for_supervised_modes() {
    let mut data = corpus(2, true);
    data[1].vdm = None;
    assert!(matches!(train(&data, &tiny(Mode::Supervised)), Err(Error::Parameter(_))));
    assert!(matches!(train(&data, &tiny(Mode::SemiSupervised)), Err(Error::Parameter(_))));
    assert!(train(&data, &tiny(Mode::SelfSupervised)).is_ok());
}

#[test]
fn non_finite_input_aborts_with_diagnostic() {
    let mut data = corpus(2, true);
    data[0].epi.data_mut()[5] = f64::NAN;
    let err = train(&data, &tiny(Mode::SelfSupervised)).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(msg.contains("epoch 1") && msg.contains("step") && msg.contains("cc="), "{msg}");
}

#[test]
fn config_validation() {
    let mut c = tiny(Mode::Supervised);
    c.batch_size = 2;
    assert!(c.validate().is_err());
    let mut c = tiny(Mode::Supervised);
    c.learning_rate = 0.0;
    assert!(c.validate().is_err());
    let mut c = tiny(Mode::Supervised);
    c.loss.mode = Mode::SelfSupervised;
    assert!(c.validate().is_err());
    assert!(matches!(train(&[], &tiny(Mode::Supervised)), Err(Error::Parameter(_))));
}

#[test]
fn checkpoints_record_validation_nmi_and_weights() {
    let data = corpus(2, true);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Mode::SelfSupervised);
    cfg.checkpoint_every = 2;
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    let (w, h) = train_validated(&data, &data[..1], &cfg).unwrap();
    assert_eq!(h.checkpoints.len(), 2);
    let last = h.checkpoints.last().unwrap();
    assert!(last.validation_nmi.unwrap() > 0.0);
    let loaded = crate::unet::weights_load(last.path.as_ref().unwrap(), &cfg.unet).unwrap();
    assert_eq!(loaded.params, w.params);
    let lines = h.to_lines();
    assert_eq!(lines.lines().filter(|l| l.starts_with("epoch=")).count(), 4);
    assert!(lines.contains("checkpoint epoch=4 val_nmi="));
}

#[test]
fn sweep_requires_self_mode() {
    let data = corpus(1, true);
    assert!(matches!(
        lambda_sweep(&data, &DEFAULT_LAMBDAS, 1, &tiny(Mode::Supervised)),
        Err(Error::Config(_))
    ));
    let r = lambda_sweep(&data, &[0.0, 1.0], 1, &tiny(Mode::SelfSupervised)).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert_eq!(r.to_tsv().lines().count(), 3);
}

#[test]
fn smoothness_value_matches_definition() {
    let t = Tensor::new(vec![1, 2, 3], vec![0.0, 1.0, 3.0, 1.0, 1.0, 1.0]).unwrap();
    // axis 0 diffs: 1, 0, -2 -> 5/3; axis 1 diffs: 1, 2, 0, 0 -> 5/4
    assert!((smoothness_value(&t) - (5.0 / 3.0 + 5.0 / 4.0) / 2.0).abs() < 1e-15);
}

#[test]
fn static_series_gives_identical_maps() {
    let p = phantom_brain(0, &[16, 16, 4], &PhantomOptions::default()).unwrap();
    let series = Volume::stack(&vec![p.epi_truth.clone(); 3]).unwrap();
    let w = unet_init(&UNetConfig::reduced(2, &[2, 2], &[2, 2])).unwrap();
    let out = infer_correct(&w, &series, &p.t1w).unwrap();
    assert_eq!(out.gdms.len(), 3);
    assert_eq!(out.gdms[0], out.gdms[1]);
    assert_eq!(out.gdms[1], out.gdms[2]);
    assert_eq!(out.corrected.frames(), 3);
    assert_eq!(out.estimate_seconds.len(), 3);

    let w3 = unet_init(&UNetConfig::reduced(3, &[2, 2], &[2, 2])).unwrap();
    let out3 = infer_correct(&w3, &series, &p.t1w).unwrap();
    assert_eq!(out3.gdms[0].spatial, vec![16, 16, 4]);
}

#[test]
fn samples_split_slices_for_2d_models() {
    let p = phantom_brain(0, &[16, 16, 4], &PhantomOptions::default()).unwrap();
    let s2 = samples_from_volumes(&p.t1w, &p.epi_truth, None, 2).unwrap();
    assert_eq!(s2.len(), 4);
    assert_eq!(s2[0].epi.shape(), &[1, 16, 16]);
    let s3 = samples_from_volumes(&p.t1w, &p.epi_truth, None, 3).unwrap();
    assert_eq!(s3.len(), 1);
    assert_eq!(s3[0].epi.shape(), &[1, 16, 16, 4]);
}
