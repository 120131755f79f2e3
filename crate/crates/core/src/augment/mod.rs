//! Synthetic training inputs: each sample takes a style shape, rescales,
//! rotates and optionally unites it with a second one, then downsamples it
//! to the coarse resolution with majority-vote labels.

mod procedural;

pub use procedural::{
    make_procedural_style, part_vocab, procedural_library, ProceduralKind, FIVE_PART_VOCAB,
    TWO_PART_VOCAB,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};
use crate::model::StyleLibrary;
use crate::voxgrid::{
    coords, downsample_labels_majority, downsample_max, linear_index, CoarseInput, LabelGrid,
    OccupancyGrid,
};

const MAX_RETRIES: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Per-axis scale factor range.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Random multiples of 90° about the vertical (y) axis.
    pub rotate: bool,
    /// Probability of uniting two augmented shapes.
    pub combine_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.6,
            scale_max: 1.4,
            rotate: true,
            combine_prob: 0.3,
        }
    }
}

impl AugmentConfig {
    /// No scaling, rotation or combination.
    pub fn identity() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.0,
            rotate: false,
            combine_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.scale_max.is_finite()
            && (0.0..=1.0).contains(&self.combine_prob);
        if !ok {
            return Err(Error::Config(format!("invalid augmentation config {self:?}")));
        }
        Ok(())
    }
}

/// A detailed augmented shape and its coarse counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub occ: OccupancyGrid,
    /// Part labels and the source style id of every occupied voxel.
    pub labels: LabelGrid,
    pub coarse: CoarseInput,
}

/// Resamples `occ`/`labels` about the grid center with per-axis `scale`
/// (nearest neighbour).
pub fn scale_shape(occ: &OccupancyGrid, labels: &LabelGrid, scale: [f64; 3]) -> Result<(OccupancyGrid, LabelGrid)> {
    if scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        bail_arg!("scale factors must be positive, got {scale:?}");
    }
    let side = occ.side();
    let c = side as f64 / 2.0;
    let src = |o: usize, s: f64| -> Option<usize> {
        let p = ((o as f64 + 0.5 - c) / s + c - 0.5).round();
        (p >= 0.0 && p < side as f64).then_some(p as usize)
    };
    let maps: Vec<Vec<Option<usize>>> = scale.iter().map(|&s| (0..side).map(|o| src(o, s)).collect()).collect();
    let mut values = vec![0.0f32; occ.len()];
    let mut out = LabelGrid::empty(occ.log2())?;
    for (i, v) in values.iter_mut().enumerate() {
        let (x, y, z) = coords(side, i);
        if let (Some(sx), Some(sy), Some(sz)) = (maps[0][x], maps[1][y], maps[2][z]) {
            let j = linear_index(side, sx, sy, sz);
            *v = occ.values()[j];
            out.part_mut()[i] = labels.part()[j];
            out.style_mut()[i] = labels.style()[j];
        }
    }
    Ok((OccupancyGrid::from_values(occ.log2(), values)?, out))
}

/// Rotates by `quarter_turns · 90°` about the y axis.
pub fn rotate_y(occ: &OccupancyGrid, labels: &LabelGrid, quarter_turns: u32) -> Result<(OccupancyGrid, LabelGrid)> {
    let side = occ.side();
    let mut values = vec![0.0f32; occ.len()];
    let mut out = LabelGrid::empty(occ.log2())?;
    for i in 0..occ.len() {
        let (mut x, y, mut z) = coords(side, i);
        for _ in 0..quarter_turns % 4 {
            (x, z) = (z, side - 1 - x);
        }
        let j = linear_index(side, x, y, z);
        values[j] = occ.values()[i];
        out.part_mut()[j] = labels.part()[i];
        out.style_mut()[j] = labels.style()[i];
    }
    Ok((OccupancyGrid::from_values(occ.log2(), values)?, out))
}

/// Union of two shapes with `b` shifted by `offset` voxels; on overlap the
/// labels of `a` win.
pub fn combine(
    a: (&OccupancyGrid, &LabelGrid),
    b: (&OccupancyGrid, &LabelGrid),
    offset: [i64; 3],
) -> Result<(OccupancyGrid, LabelGrid)> {
    let side = a.0.side();
    let mut values = a.0.values().to_vec();
    let mut labels = a.1.clone();
    for j in 0..b.0.len() {
        if b.0.values()[j] <= 0.0 {
            continue;
        }
        let (x, y, z) = coords(side, j);
        let t = [x as i64 + offset[0], y as i64 + offset[1], z as i64 + offset[2]];
        if t.iter().any(|&c| c < 0 || c >= side as i64) {
            continue;
        }
        let i = linear_index(side, t[0] as usize, t[1] as usize, t[2] as usize);
        if values[i] <= 0.0 {
            values[i] = b.0.values()[j];
            labels.part_mut()[i] = b.1.part()[j];
            labels.style_mut()[i] = b.1.style()[j];
        }
    }
    Ok((OccupancyGrid::from_values(a.0.log2(), values)?, labels))
}

fn one_shape(lib: &StyleLibrary, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<(OccupancyGrid, LabelGrid)> {
    let shape = &lib.shapes()[rng.random_range(0..lib.len())];
    let mut scale = [1.0; 3];
    for s in &mut scale {
        *s = if cfg.scale_max > cfg.scale_min {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
    }
    let (mut occ, mut labels) = if scale == [1.0; 3] {
        (shape.occ.clone(), shape.labels.clone())
    } else {
        scale_shape(&shape.occ, &shape.labels, scale)?
    };
    if cfg.rotate {
        let turns = rng.random_range(0..4);
        if turns > 0 {
            (occ, labels) = rotate_y(&occ, &labels, turns)?;
        }
    }
    Ok((occ, labels))
}

/// Deterministic augmented sample for `seed`, downsampled to `2^k`.
/// Samples that collapse to nothing are redrawn from derived seeds.
pub fn augment_shape(lib: &StyleLibrary, cfg: &AugmentConfig, k: u32, seed: u64) -> Result<AugmentedSample> {
    cfg.validate()?;
    if lib.is_empty() {
        bail_arg!("empty style library");
    }
    if k > lib.log2() {
        bail_arg!("coarse level 2^{k} above the style resolution 2^{}", lib.log2());
    }
    let factor = 1usize << (lib.log2() - k);
    for attempt in 0..MAX_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (mut occ, mut labels) = one_shape(lib, cfg, &mut rng)?;
        if cfg.combine_prob > 0.0 && rng.random_bool(cfg.combine_prob) {
            let other = one_shape(lib, cfg, &mut rng)?;
            let blocks = (1i64 << k) / 2;
            let mut offset = [0i64; 3];
            for o in &mut offset {
                *o = rng.random_range(-blocks..=blocks) * factor as i64;
            }
            (occ, labels) = combine((&occ, &labels), (&other.0, &other.1), offset)?;
        }
        if occ.count_above(0.0) == 0 {
            continue;
        }
        let coarse_occ = downsample_max(&occ, factor)?;
        let coarse_labels = downsample_labels_majority(&occ, &labels, factor)?;
        let coarse = CoarseInput::new(coarse_occ, coarse_labels)?;
        return Ok(AugmentedSample { occ, labels, coarse });
    }
    Err(Error::InvalidArgument(format!(
        "augmentation produced empty shapes {MAX_RETRIES} times for seed {seed}"
    )))
}

/// Maps every part id to a style drawn uniformly from `1..=n_styles`.
/// Part ids are visited in increasing order, so the map depends only on
/// the seed and the set of parts present.
pub fn assign_random_styles(coarse: &CoarseInput, n_styles: usize, seed: u64) -> Result<CoarseInput> {
    if n_styles == 0 || n_styles > u16::MAX as usize {
        bail_arg!("style count {n_styles} out of range");
    }
    let part = coarse.labels().part();
    let mut parts: Vec<u16> = Vec::new();
    for (i, &p) in part.iter().enumerate() {
        if coarse.is_occupied(i) {
            if p == 0 {
                bail_arg!("occupied voxel {i} carries no part label");
            }
            parts.push(p);
        }
    }
    parts.sort_unstable();
    parts.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map: Vec<(u16, u16)> = parts.iter().map(|&p| (p, rng.random_range(1..=n_styles as u16))).collect();
    let mut labels = coarse.labels().clone();
    for i in 0..part.len() {
        if coarse.is_occupied(i) {
            let s = map.iter().find(|(p, _)| *p == part[i]).expect("collected above").1;
            labels.style_mut()[i] = s;
        }
    }
    CoarseInput::new(coarse.occ().clone(), labels)
}
