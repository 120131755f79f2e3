use super::*;
use crate::voxgrid::LabelGrid;

fn names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("s{i}")).collect()
}

fn small_config(k: u32, big_k: u32, n: usize, width: usize) -> ModelConfig {
    let mut c = ModelConfig::new(k, big_k, names(n), vec!["lower".into(), "upper".into()]);
    c.backbone_width = width;
    c.generator_widths = vec![width; (big_k - k) as usize];
    c.discriminator_width = width;
    c.seed = 7;
    c
}

fn blob_input(log2: u32, style: u16) -> CoarseInput {
    let side = 1usize << log2;
    let occ = OccupancyGrid::from_fn(log2, |x, y, z| {
        x > 0 && y > 0 && z > 0 && x < side - 1 && y < side - 1 && z < side - 1
    })
    .unwrap();
    let mut labels = LabelGrid::empty(log2).unwrap();
    for (i, &o) in occ.values().iter().enumerate() {
        if o > 0.0 {
            labels.style_mut()[i] = style;
            labels.part_mut()[i] = 1 + (i / (side * side) >= side / 2) as u16;
        }
    }
    CoarseInput::new(occ, labels).unwrap()
}

#[test]
fn output_side_and_range() {
    let m = PyramidModel::new(small_config(3, 5, 4, 4)).unwrap();
    let c = blob_input(3, 2);
    let out = m.generate(&c, 5).unwrap();
    assert_eq!(out.side(), 32);
    assert!(out.values().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(m.generate(&c, 4).unwrap().side(), 16);
    assert!(m.generate(&c, 3).is_err());
    assert!(m.generate(&c, 6).is_err());
}

#[test]
fn paper_resolution_config_builds() {
    let mut cfg = small_config(4, 8, 2, 2);
    cfg.use_part_labels = false;
    let m = PyramidModel::new(cfg).unwrap();
    let rfs: Vec<usize> = (5..=8).map(|l| m.analytic_receptive_field(l).unwrap()).collect();
    assert_eq!(rfs, vec![7, 9, 18, 18]);
    let c = blob_input(4, 1);
    assert_eq!(m.generate(&c, 6).unwrap().side(), 64);
    assert_eq!(1usize << m.big_k(), 256);
}

#[test]
fn receptive_field_schedule() {
    assert_eq!(receptive_field(3, 4).unwrap(), 7);
    assert_eq!(receptive_field(3, 5).unwrap(), 9);
    assert_eq!(receptive_field(3, 6).unwrap(), 18);
    assert_eq!(receptive_field(3, 9).unwrap(), 18);
    assert!(receptive_field(3, 3).is_err());
}

#[test]
fn assemble_input_layout() {
    let m = PyramidModel::new(small_config(2, 3, 3, 2)).unwrap();
    let empty = CoarseInput::empty(2).unwrap();
    let t = m.input_tensor(&m.assemble_input(&empty).unwrap()).unwrap();
    assert_eq!(t.shape(), &[1 + 2 + 8, 4, 4, 4]);
    assert!(t.data().iter().all(|&v| v == 0.0));

    let mut occ = OccupancyGrid::zeros(2).unwrap();
    occ.set(1, 2, 3, 1.0).unwrap();
    let mut labels = LabelGrid::empty(2).unwrap();
    let i = 1 + 4 * (2 + 4 * 3);
    labels.style_mut()[i] = 3;
    labels.part_mut()[i] = 2;
    let c = CoarseInput::new(occ, labels).unwrap();
    let t = m.input_tensor(&m.assemble_input(&c).unwrap()).unwrap();
    let codes = m.gen.tensor(m.codes_id()).data();
    for d in 0..CODE_DIM {
        assert_eq!(t.data()[(3 + d) * 64 + i], codes[2 * CODE_DIM + d]);
    }
    assert_eq!(t.data()[i], 1.0);
    assert_eq!(t.data()[64 + i], 0.0);
    assert_eq!(t.data()[2 * 64 + i], 1.0);

    let mut cfg = small_config(2, 3, 3, 2);
    cfg.use_part_labels = false;
    let m2 = PyramidModel::new(cfg).unwrap();
    let t2 = m2.input_tensor(&m2.assemble_input(&c).unwrap()).unwrap();
    assert_eq!(t.shape()[0] - t2.shape()[0], 2);
}

#[test]
fn unknown_style_is_rejected() {
    let m = PyramidModel::new(small_config(2, 3, 2, 2)).unwrap();
    assert!(m.assemble_input(&blob_input(2, 3)).is_err());
    assert!(m.assemble_input(&blob_input(3, 1)).is_err());
}

#[test]
fn discriminator_output_shape() {
    let m = PyramidModel::new(small_config(2, 5, 3, 2)).unwrap();
    for level in 3..=5 {
        let g = OccupancyGrid::filled(level, 0.5).unwrap();
        let s = 1usize << level;
        assert_eq!(m.discriminate(&g, level).unwrap().shape(), &[4, s, s, s]);
    }
    let g = OccupancyGrid::filled(4, 0.5).unwrap();
    assert!(m.discriminate(&g, 3).is_err());
}

/// Input positions whose perturbation reaches output voxel `v` of channel 0,
/// as a per-axis inclusive bounding box.
fn influence_box(m: &PyramidModel, level: u32, input: &[f64], v: (usize, usize, usize)) -> [(usize, usize); 3] {
    let s = 1usize << level;
    let mut tape = Tape::<f64>::new();
    let d = m.disc.cast::<f64>().bind(&mut tape, false).unwrap();
    let x = tape.param(Tensor::new(vec![1, s, s, s], input.to_vec()).unwrap()).unwrap();
    let y = m.discriminate_on(&mut tape, &d, x, level).unwrap();
    let mut mask = vec![0.0; tape.value(y).numel()];
    mask[v.0 + s * (v.1 + s * v.2)] = 1.0;
    let score = tape.masked_mean(y, &mask).unwrap();
    let g = tape.backward(score).unwrap();
    let g = g.get(x).unwrap();
    let mut bb = [(usize::MAX, 0usize); 3];
    for (i, &gv) in g.iter().enumerate() {
        if gv != 0.0 {
            let c = [i % s, (i / s) % s, i / (s * s)];
            for a in 0..3 {
                bb[a].0 = bb[a].0.min(c[a]);
                bb[a].1 = bb[a].1.max(c[a]);
            }
        }
    }
    bb
}

fn score_at(m: &PyramidModel, level: u32, input: &[f64], v: usize) -> Vec<f64> {
    let s = 1usize << level;
    let mut tape = Tape::<f64>::new();
    let d = m.disc.cast::<f64>().bind(&mut tape, false).unwrap();
    let x = tape.constant(Tensor::new(vec![1, s, s, s], input.to_vec()).unwrap()).unwrap();
    let y = m.discriminate_on(&mut tape, &d, x, level).unwrap();
    let n = s * s * s;
    (0..tape.shape(y)[0]).map(|c| tape.value(y).data()[c * n + v]).collect()
}

#[test]
fn probed_receptive_field_matches_analytic() {
    use rand::Rng;
    let m = PyramidModel::new(small_config(2, 5, 2, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for level in 3..=5u32 {
        let s = 1usize << level;
        let input: Vec<f64> = (0..s * s * s).map(|_| rng.random_range(0.0..1.0)).collect();
        let rf = m.analytic_receptive_field(level).unwrap();
        assert_eq!(rf, receptive_field(2, level).unwrap());
        for v in [(s / 2, s / 2, s / 2), (s / 2 - 1, s / 2, s / 2 - 1)] {
            let bb = influence_box(&m, level, &input, v);
            for (lo, hi) in bb {
                assert_eq!(hi - lo + 1, rf, "level {level} voxel {v:?}");
            }
            // zeroing everything outside the field leaves the score intact
            let idx = v.0 + s * (v.1 + s * v.2);
            let mut masked = input.clone();
            for (i, val) in masked.iter_mut().enumerate() {
                let c = [i % s, (i / s) % s, i / (s * s)];
                if (0..3).any(|a| c[a] < bb[a].0 || c[a] > bb[a].1) {
                    *val = 0.0;
                }
            }
            assert_eq!(score_at(&m, level, &input, idx), score_at(&m, level, &masked, idx));
        }
    }
}

#[test]
fn discriminator_is_translation_equivariant_in_the_interior() {
    let m = PyramidModel::new(small_config(2, 5, 2, 3)).unwrap();
    for level in [3u32, 4, 5] {
        let s = 1usize << level;
        let base = OccupancyGrid::from_fn(level, |x, y, z| (x * 7 + y * 3 + z * 5) % 11 < 5 && x < s - 2).unwrap();
        let shifted = OccupancyGrid::from_fn(level, |x, y, z| x >= 2 && base.get(x - 2, y, z) > 0.0).unwrap();
        let a = m.discriminate(&base, level).unwrap();
        let b = m.discriminate(&shifted, level).unwrap();
        let rf = m.analytic_receptive_field(level).unwrap();
        let n = s * s * s;
        for c in 0..3 {
            for z in rf..s.saturating_sub(rf) {
                for y in rf..s - rf {
                    for x in rf..s - rf - 2 {
                        let ia = c * n + x + s * (y + s * z);
                        assert!((a.data()[ia] - b.data()[ia + 2]).abs() < 1e-5);
                    }
                }
            }
        }
    }
}

#[test]
fn initialization_is_deterministic() {
    let a = PyramidModel::new(small_config(3, 5, 4, 4)).unwrap();
    let b = PyramidModel::new(small_config(3, 5, 4, 4)).unwrap();
    assert_eq!(a.gen, b.gen);
    assert_eq!(a.disc, b.disc);
    let mut cfg = small_config(3, 5, 4, 4);
    cfg.seed = 8;
    assert_ne!(PyramidModel::new(cfg).unwrap().gen, a.gen);
}

#[test]
fn codes_of_absent_styles_get_no_gradient() {
    let m = PyramidModel::new(small_config(2, 3, 3, 2)).unwrap();
    let input = m.assemble_input(&blob_input(2, 2)).unwrap();
    let mut tape = Tape::<f32>::new();
    let g = m.gen.bind(&mut tape, true).unwrap();
    let outs = m.generate_on(&mut tape, &g, &input, 3).unwrap();
    let l = tape.mean(outs[0]).unwrap();
    let grads = tape.backward(l).unwrap();
    let gc = grads.get(g[m.codes_id()]).unwrap();
    assert!(gc[..CODE_DIM].iter().all(|&v| v == 0.0));
    assert!(gc[CODE_DIM..2 * CODE_DIM].iter().any(|&v| v != 0.0));
    assert!(gc[2 * CODE_DIM..].iter().all(|&v| v == 0.0));
}

#[test]
fn merged_params_round_trip() {
    let a = PyramidModel::new(small_config(2, 4, 2, 2)).unwrap();
    let mut cfg = small_config(2, 4, 2, 2);
    cfg.seed = 99;
    let mut b = PyramidModel::new(cfg).unwrap();
    b.load_merged(&a.merged_params().unwrap()).unwrap();
    assert_eq!(a.gen, b.gen);
    assert_eq!(a.disc, b.disc);
}

#[test]
fn parity_layout() {
    let p = parity_channels(2);
    assert_eq!(&p.data()[..8], &[-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0]);
    assert_eq!(&p.data()[8..16], &[-1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0]);
    assert_eq!(&p.data()[16..24], &[-1.0, -1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0]);
}
