use super::*;
use crate::augment::procedural_library;
use crate::voxgrid::{read_voxb, LabelGrid};

fn tiny(steps: u64) -> TrainConfig {
    TrainConfig {
        k: 2,
        big_k: 4,
        steps,
        backbone_width: 4,
        generator_widths: vec![4, 4],
        discriminator_width: 4,
        log_every: 0,
        ..TrainConfig::default()
    }
}

fn lib() -> StyleLibrary {
    procedural_library("toy2@K4").unwrap()
}

#[test]
fn defaults_follow_the_full_method() {
    let c = TrainConfig::default();
    assert_eq!((c.k, c.big_k), (3, 5));
    assert_eq!(c.weights, LossWeights { alpha1: 0.1, alpha2: 0.5, gamma1: 1.0, gamma2: 1.0 });
    assert_eq!(c.flags, AblationFlags::default());
    assert!(c.flags.use_part_labels);
    assert_eq!(c.effective_weights(), c.weights);
    c.validate().unwrap();
}

#[test]
fn config_validation_and_serde() {
    assert!(TrainConfig { steps: 0, ..tiny(1) }.validate().is_err());
    assert!(TrainConfig { generator_widths: vec![4], ..tiny(1) }.validate().is_err());
    assert!(TrainConfig { big_k: 2, ..tiny(1) }.validate().is_err());
    let mut w = tiny(1);
    w.weights.gamma1 = -1.0;
    assert!(w.validate().is_err());

    let c = tiny(7);
    let json = serde_json::to_string(&c).unwrap();
    assert!(json.contains("\"K\":4"));
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), c);
    let partial: TrainConfig = serde_json::from_str(r#"{"steps": 3, "flags": {"disable_up": true}}"#).unwrap();
    assert_eq!(partial.steps, 3);
    assert!(partial.flags.disable_up && partial.flags.use_part_labels);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 3}"#).is_err());
}

#[test]
fn flags_map_to_weights() {
    let mut c = tiny(1);
    c.flags.disable_down = true;
    c.flags.disable_adaptive_alpha = true;
    let w = c.effective_weights();
    assert_eq!((w.gamma1, w.gamma2), (0.0, 1.0));
    assert_eq!((w.alpha1, w.alpha2), (0.5, 0.5));
}

#[test]
fn config_hash_ignores_budget_only() {
    let info = lib().info();
    let a = tiny(5);
    let b = TrainConfig { steps: 50, checkpoint_every: 3, log_every: 9, ..tiny(5) };
    assert_eq!(a.config_hash(&info), b.config_hash(&info));
    assert_ne!(a.config_hash(&info), TrainConfig { seed: 1, ..tiny(5) }.config_hash(&info));
}

#[test]
fn stream_mix_alternates() {
    let m = StreamMix::default();
    let pattern: Vec<bool> = (1..=4).map(|t| m.is_recon(t)).collect();
    assert_eq!(pattern, [true, false, true, false]);
    let m = StreamMix { recon: 1, gan: 2 };
    let pattern: Vec<bool> = (1..=6).map(|t| m.is_recon(t)).collect();
    assert_eq!(pattern, [true, false, false, true, false, false]);
}

#[test]
fn loss_rows_round_trip_through_csv() {
    let r = LossRow { step: 3, level: 4, recon: None, gan_g: Some(0.25), gan_d: Some(1.5e-7), down: None, up: Some(0.1), total: 1.25 };
    let line = r.to_csv();
    assert_eq!(line.matches(',').count(), 7);
    assert_eq!(LossRow::from_csv(&line).unwrap(), r);
    assert!(LossRow::from_csv("1,2,3").is_err());
}

#[test]
fn rows_cover_every_level_and_stream() {
    let cfg = tiny(2);
    let w = cfg.weights;
    let mut t = Trainer::new(cfg, lib()).unwrap();
    let recon = t.step().unwrap();
    let gan = t.step().unwrap();
    assert_eq!(recon.iter().map(|r| r.level).collect::<Vec<_>>(), [3, 4]);
    assert!(recon.iter().all(|r| r.recon.is_some() && r.gan_g.is_none() && r.down.is_none() && r.gan_d.is_some()));
    assert!(gan.iter().all(|r| r.recon.is_none() && r.gan_g.is_some() && r.down.is_some() && r.up.is_some()));
    for r in &gan {
        let expect = r.gan_g.unwrap() + w.gamma1 as f32 * r.down.unwrap() + w.gamma2 as f32 * r.up.unwrap();
        assert!((r.total - expect).abs() <= 1e-5 * expect.abs().max(1.0));
    }
}

#[test]
fn both_phases_update_their_own_parameters() {
    let mut t = Trainer::new(tiny(1), lib()).unwrap();
    let (g0, d0) = (param_digest(&t.model().gen), param_digest(&t.model().disc));
    t.step().unwrap();
    assert_ne!(param_digest(&t.model().gen), g0);
    assert_ne!(param_digest(&t.model().disc), d0);
}

#[test]
fn equal_seeds_give_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(4);
    train(&cfg, &lib(), Some(&dir.path().join("a"))).unwrap();
    train(&cfg, &lib(), Some(&dir.path().join("b"))).unwrap();
    let a = fs::read(dir.path().join("a/losses.csv")).unwrap();
    let b = fs::read(dir.path().join("b/losses.csv")).unwrap();
    assert_eq!(a, b);
    let rows = read_loss_csv(dir.path().join("a/losses.csv")).unwrap();
    assert_eq!(rows.len(), 8);
    train(&TrainConfig { seed: 1, ..cfg }, &lib(), Some(&dir.path().join("c"))).unwrap();
    assert_ne!(a, fs::read(dir.path().join("c/losses.csv")).unwrap());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = tiny(12);
    let (full_ckpt, full_rows) = train(&full, &lib(), None).unwrap();

    let half = tiny(2);
    let part = dir.path().join("part");
    train(&half, &lib(), Some(&part)).unwrap();
    let mut resumed = Trainer::resume(part.join("checkpoint"), full.clone()).unwrap();
    assert_eq!(resumed.step_count(), 2);
    let rest = resumed.run(Some(&part)).unwrap();
    assert_eq!(rest.len(), full_rows.len() - 4);
    for (a, b) in rest.iter().zip(&full_rows[4..]) {
        assert_eq!(a.to_csv(), b.to_csv());
    }
    assert_eq!(param_digest(&resumed.model().gen), param_digest(&full_ckpt.model.gen));
    assert_eq!(param_digest(&resumed.model().disc), param_digest(&full_ckpt.model.disc));
    let csv = read_loss_csv(part.join("losses.csv")).unwrap();
    assert_eq!(csv, full_rows);
}

#[test]
fn resume_rejects_other_configs() {
    let dir = tempfile::tempdir().unwrap();
    train(&tiny(1), &lib(), Some(dir.path())).unwrap();
    let other = TrainConfig { seed: 9, ..tiny(3) };
    assert!(matches!(Trainer::resume(dir.path().join("checkpoint"), other), Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = train(&tiny(2), &lib(), Some(dir.path())).unwrap();
    let loaded = Checkpoint::load(dir.path().join("checkpoint")).unwrap();
    assert_eq!(loaded.step, 2);
    assert_eq!(loaded.id(), ckpt.id());
    assert_eq!(loaded.library, ckpt.library);
    let c = style_as_coarse(&ckpt.library, 2, 2).unwrap();
    assert_eq!(loaded.detailize(&c, 4).unwrap(), ckpt.detailize(&c, 4).unwrap());
    let f = read_voxb(dir.path().join("checkpoint/styles/01.voxb")).unwrap();
    assert_eq!(f.occ, ckpt.library.shapes()[0].occ);
}

#[test]
fn disabled_structure_losses_carry_no_gradient() {
    let mut a = tiny(2);
    a.flags.disable_down = true;
    a.flags.disable_up = true;
    let mut b = a.clone();
    b.weights.gamma1 = 1e6;
    b.weights.gamma2 = 1e6;
    let (ca, ra) = train(&a, &lib(), None).unwrap();
    let (cb, _) = train(&b, &lib(), None).unwrap();
    assert_eq!(param_digest(&ca.model.gen), param_digest(&cb.model.gen));
    assert!(ra.iter().all(|r| r.down.is_none() && r.up.is_none()));
}

#[test]
fn detailize_contract() {
    let (ckpt, _) = train(&tiny(1), &lib(), None).unwrap();
    let c = style_as_coarse(&ckpt.library, 1, 2).unwrap();
    for level in 3..=4 {
        assert_eq!(ckpt.detailize(&c, level).unwrap().side(), 1 << level);
    }
    assert!(ckpt.detailize(&CoarseInput::empty(3).unwrap(), 4).is_err());
    assert!(ckpt.detailize(&c, 5).is_err());
    let mut labels = c.labels().clone();
    for (s, &o) in labels.style_mut().iter_mut().zip(c.occ().values()) {
        if o > 0.0 {
            *s = 7;
        }
    }
    let foreign = CoarseInput::new(c.occ().clone(), labels).unwrap();
    assert!(ckpt.detailize(&foreign, 4).is_err());
}

#[test]
fn mask_baseline_clears_outside_the_valid_region() {
    let mut cfg = tiny(1);
    cfg.flags.vanilla_mask_baseline = true;
    let (ckpt, _) = train(&cfg, &lib(), None).unwrap();
    let occ = OccupancyGrid::from_fn(2, |x, y, z| x + y + z == 0).unwrap();
    let mut labels = LabelGrid::empty(2).unwrap();
    labels.style_mut()[0] = 1;
    labels.part_mut()[0] = 1;
    let c = CoarseInput::new(occ, labels).unwrap();
    let out = ckpt.detailize(&c, 4).unwrap();
    let mask = validity_mask_values(&c, 4).unwrap();
    assert!(mask.iter().any(|&m| m == 0.0));
    for (v, m) in out.values().iter().zip(&mask) {
        if *m == 0.0 {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn non_finite_training_aborts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(5);
    cfg.adam.lr = 1e30;
    let err = train(&cfg, &lib(), Some(dir.path())).unwrap_err();
    let Error::Training { step, .. } = err else { panic!("unexpected error {err}") };
    let dump = dir.path().join(format!("failed_step_{step}"));
    assert!(dump.join("input.voxb").exists());
    let info: serde_json::Value = serde_json::from_slice(&fs::read(dump.join("info.json")).unwrap()).unwrap();
    assert_eq!(info["step"], step);
}

#[test]
fn level_schedules() {
    let mut cfg = tiny(10);
    let t = Trainer::new(cfg.clone(), lib()).unwrap();
    assert_eq!(t.active_levels(1), [3, 4]);
    cfg.flags.single_level = true;
    assert_eq!(Trainer::new(cfg.clone(), lib()).unwrap().active_levels(1), [4]);
    cfg.flags.single_level = false;
    cfg.flags.progressive = true;
    let t = Trainer::new(cfg, lib()).unwrap();
    assert_eq!(t.active_levels(1), [3]);
    assert_eq!(t.active_levels(5), [3]);
    assert_eq!(t.active_levels(6), [3, 4]);
}

#[test]
fn optional_flags_train() {
    for flags in [
        AblationFlags { detach_lower_levels: true, ..Default::default() },
        AblationFlags { gan_occupied_only: true, ..Default::default() },
        AblationFlags { use_part_labels: false, ..Default::default() },
        AblationFlags { progressive: true, single_level: false, ..Default::default() },
    ] {
        let cfg = TrainConfig { flags, ..tiny(2) };
        let (_, rows) = train(&cfg, &lib(), None).unwrap();
        assert!(rows.iter().all(|r| r.total.is_finite()));
    }
}

#[test]
fn table3_rows_carry_their_flags() {
    let v = table3_variants(&AblationFlags::default());
    let labels: Vec<&str> = v.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["a", "b", "c", "d", "e", "f", "g", "h", "i"]);
    let bits = |f: &AblationFlags| (!f.single_level, !f.disable_down, !f.disable_up, !f.disable_adaptive_alpha, f.vanilla_mask_baseline);
    let expect = [
        (false, false, false, false, true),
        (true, false, false, false, true),
        (true, true, false, false, false),
        (true, false, true, false, false),
        (true, false, false, true, true),
        (true, true, true, false, false),
        (true, true, false, true, false),
        (true, false, true, true, false),
        (true, true, true, true, false),
    ];
    for (row, e) in v.iter().zip(expect) {
        assert_eq!(bits(&row.flags), e, "row {}", row.label);
    }
    assert_eq!(v[8].flags, AblationFlags::default());
}

#[test]
fn ablation_grid_of_one_is_plain_training() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(2);
    let eval = EvalConfig {
        samples: 2,
        patch: crate::metrics::PatchSampleSpec { patch_side: 6, samples_per_shape: 20, ..Default::default() },
        ..EvalConfig::default()
    };
    let variant = AblationVariant { label: "full".into(), flags: base.flags };
    let rows = run_ablation_grid(&base, &lib(), &[variant], &eval, Some(dir.path())).unwrap();
    let (ckpt, _) = train(&base, &lib(), None).unwrap();
    let inputs = heldout_inputs(&lib(), &eval.augment, base.k, eval.samples, eval.seed).unwrap();
    let direct = MetricSummary::mean(&evaluate_checkpoint(&ckpt, &inputs, &eval.patch).unwrap());
    assert_eq!(rows[0].metrics, direct);
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with(ablation::ABLATION_CSV_HEADER));
}

#[test]
fn unlabelled_shapes_get_one_style() {
    let occ = OccupancyGrid::from_fn(2, |x, _, _| x < 2).unwrap();
    let mut labels = LabelGrid::empty(2).unwrap();
    for (s, &o) in labels.style_mut().iter_mut().zip(occ.values()) {
        if o > 0.0 {
            *s = 1;
        }
    }
    let c = CoarseInput::new(occ, labels).unwrap();
    let styled = random_styles(&c, 4, 3).unwrap();
    let mut seen: Vec<u16> = (0..64).filter(|&i| styled.is_occupied(i)).map(|i| styled.labels().style()[i]).collect();
    seen.dedup();
    assert_eq!(seen.len(), 1);
}
