//! Training objectives recorded on an autonet tape.
//!
//! Discriminator tensors are `[N + 1, s, s, s]` with style `i` at channel
//! `i - 1` and the global head at channel `N`. Per-voxel style maps are
//! 1-based style ids.

use serde::{Deserialize, Serialize};

use crate::autonet::{Real, Tape, Tensor, Var};
use crate::error::{bail_arg, bail_shape, Result};
use crate::voxgrid::{transition_boundary_mask, upsample_labels_nearest, CoarseInput};

/// Radius, in coarse voxels, of the style-transition band.
pub const BOUNDARY_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// α on voxels near a style transition.
    pub alpha1: f64,
    /// α elsewhere.
    pub alpha2: f64,
    /// Weight of the downsampling loss.
    pub gamma1: f64,
    /// Weight of the upsampling loss.
    pub gamma2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 0.1,
            alpha2: 0.5,
            gamma1: 10.0,
            gamma2: 10.0,
        }
    }
}

/// Reduction applied to the squared residuals of the structure losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureNorm {
    /// Plain sum of squares.
    Sum,
    /// Mean of the squared residuals.
    #[default]
    Mean,
}

/// Per-voxel α weights at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMap {
    pub log2: u32,
    pub values: Vec<f32>,
}

/// α1 on the coarse transition band (radius 2), α2 elsewhere, replicated
/// to `2^level`.
pub fn build_alpha_map(c: &CoarseInput, level: u32, alpha1: f32, alpha2: f32) -> Result<AlphaMap> {
    let factor = level_factor(c, level)?;
    let mask = transition_boundary_mask(c.labels(), BOUNDARY_RADIUS);
    let coarse: Vec<u16> = mask.bits().iter().map(|&b| b as u16).collect();
    let up = upsample_labels_nearest(&coarse, c.log2(), factor)?;
    Ok(AlphaMap {
        log2: level,
        values: up.into_iter().map(|b| if b == 1 { alpha1 } else { alpha2 }).collect(),
    })
}

/// Style id for every voxel at `2^level`: the covering coarse voxel's style,
/// or for empty coarse voxels that of the nearest occupied one.
pub fn style_map_at(c: &CoarseInput, level: u32) -> Result<Vec<u16>> {
    let factor = level_factor(c, level)?;
    upsample_labels_nearest(&c.filled_style_map()?, c.log2(), factor)
}

/// Coarse occupancy replicated to `2^level`, as a 0/1 mask.
pub fn occupied_mask_at(c: &CoarseInput, level: u32) -> Result<Vec<f32>> {
    let factor = level_factor(c, level)?;
    Ok(crate::voxgrid::upsample_nearest(c.occ(), factor)?.into_values())
}

fn level_factor(c: &CoarseInput, level: u32) -> Result<usize> {
    if level < c.log2() {
        bail_arg!("level {level} is below the coarse resolution 2^{}", c.log2());
    }
    Ok(1usize << (level - c.log2()))
}

fn style_channels(style_map: &[u16], n_styles: usize) -> Result<Vec<u32>> {
    style_map
        .iter()
        .map(|&s| {
            if s == 0 || s as usize > n_styles {
                bail_arg!("style id {s} is not in 1..={n_styles}");
            }
            Ok(s as u32 - 1)
        })
        .collect()
}

fn d_layout<T: Real>(tape: &Tape<T>, d: Var) -> Result<(usize, usize)> {
    match tape.shape(d) {
        [c, rest @ ..] if *c >= 2 && !rest.is_empty() => Ok((*c - 1, rest.iter().product())),
        s => bail_shape!("discriminator output {s:?} lacks a style and a global channel"),
    }
}

fn constant_like<T: Real>(tape: &mut Tape<T>, like: Var, values: &[f32]) -> Result<Var> {
    let shape = tape.shape(like).to_vec();
    let t = Tensor::new(shape, values.iter().map(|&v| T::from_f64(v as f64)).collect())?;
    tape.constant(t)
}

/// `(x - c)²` elementwise.
fn sq_offset<T: Real>(tape: &mut Tape<T>, x: Var, c: f64) -> Result<Var> {
    let d = if c == 0.0 { x } else { tape.add_scalar(x, -c)? };
    tape.square(d)
}

/// Mean squared difference.
pub fn recon_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let d = tape.square(d)?;
    tape.mean(d)
}

/// Generator side of the masked LSGAN:
/// `E_v[(D*(v) − 1)² + α(v)·(D_S(v)(v) − 1)²]`, the expectation taken over
/// all voxels or, with `region`, a 0/1 weighted subset.
pub fn gan_loss_generator<T: Real>(
    tape: &mut Tape<T>,
    d_out: Var,
    style_map: &[u16],
    alpha: &AlphaMap,
    region: Option<&[f32]>,
) -> Result<Var> {
    let (n, v) = d_layout(tape, d_out)?;
    if style_map.len() != v || alpha.values.len() != v {
        bail_shape!("style map {} / alpha {} for {v} voxels", style_map.len(), alpha.values.len());
    }
    let global = tape.channel(d_out, n)?;
    let global = sq_offset(tape, global, 1.0)?;
    let styled = tape.select_per_voxel(d_out, style_channels(style_map, n)?)?;
    let styled = sq_offset(tape, styled, 1.0)?;
    let a = constant_like(tape, styled, &alpha.values)?;
    let styled = tape.mul(styled, a)?;
    let per_voxel = tape.add(global, styled)?;
    reduce(tape, per_voxel, region)
}

fn reduce<T: Real>(tape: &mut Tape<T>, x: Var, region: Option<&[f32]>) -> Result<Var> {
    match region {
        None => tape.mean(x),
        Some(m) => {
            let m: Vec<T> = m.iter().map(|&v| T::from_f64(v as f64)).collect();
            tape.masked_mean(x, &m)
        }
    }
}

/// Discriminator objective on one real style shape (style `real_style`)
/// and one generated shape with per-voxel styles `fake_style_map`:
/// `E[(D*(s) − 1)² + D*(G)²] + E[(D_i(s) − 1)² + D_S(G)²]`.
pub fn disc_loss<T: Real>(
    tape: &mut Tape<T>,
    d_real: Var,
    real_style: u16,
    d_fake: Var,
    fake_style_map: &[u16],
) -> Result<Var> {
    let (n, v) = d_layout(tape, d_real)?;
    if tape.shape(d_fake) != tape.shape(d_real) {
        bail_shape!("real {:?} and fake {:?} scores differ", tape.shape(d_real), tape.shape(d_fake));
    }
    if fake_style_map.len() != v {
        bail_shape!("style map of {} for {v} voxels", fake_style_map.len());
    }
    let real_ch = style_channels(&[real_style], n)?[0];
    let rg = tape.channel(d_real, n)?;
    let rg = sq_offset(tape, rg, 1.0)?;
    let fg = tape.channel(d_fake, n)?;
    let fg = tape.square(fg)?;
    let rs = tape.channel(d_real, real_ch as usize)?;
    let rs = sq_offset(tape, rs, 1.0)?;
    let fs = tape.select_per_voxel(d_fake, style_channels(fake_style_map, n)?)?;
    let fs = tape.square(fs)?;
    let global = tape.add(rg, fg)?;
    let style = tape.add(rs, fs)?;
    let global = tape.mean(global)?;
    let style = tape.mean(style)?;
    tape.add(global, style)
}

fn structure_reduce<T: Real>(tape: &mut Tape<T>, residual: Var, norm: StructureNorm) -> Result<Var> {
    let sq = tape.square(residual)?;
    match norm {
        StructureNorm::Sum => tape.sum(sq),
        StructureNorm::Mean => tape.mean(sq),
    }
}

fn check_pair<T: Real>(tape: &Tape<T>, hi: Var, lo: Var) -> Result<()> {
    let (h, l) = (tape.shape(hi), tape.shape(lo));
    let ok = h.len() == 4 && l.len() == 4 && h[0] == l[0] && (1..4).all(|a| h[a] == 2 * l[a]);
    if !ok {
        bail_shape!("structure loss needs a grid pair one level apart, got {h:?} and {l:?}");
    }
    Ok(())
}

/// `‖maxpool₂(g_hi) − sg(g_lo)‖²`; no gradient reaches `g_lo`.
pub fn down_loss<T: Real>(tape: &mut Tape<T>, g_hi: Var, g_lo: Var, norm: StructureNorm) -> Result<Var> {
    check_pair(tape, g_hi, g_lo)?;
    let pooled = tape.max_pool(g_hi, 2)?;
    let lo = tape.stop_gradient(g_lo)?;
    let r = tape.sub(pooled, lo)?;
    structure_reduce(tape, r, norm)
}

/// `‖g_hi − sg(up₂(g_lo))‖²`; no gradient reaches `g_lo`.
pub fn up_loss<T: Real>(tape: &mut Tape<T>, g_hi: Var, g_lo: Var, norm: StructureNorm) -> Result<Var> {
    check_pair(tape, g_hi, g_lo)?;
    let up = tape.nearest_upsample2(g_lo)?;
    let up = tape.stop_gradient(up)?;
    let r = tape.sub(g_hi, up)?;
    structure_reduce(tape, r, norm)
}

/// Loss terms of one pyramid level.
#[derive(Debug, Clone, Copy)]
pub struct LevelTerms<V> {
    pub recon: V,
    pub gan: V,
    pub down: V,
    pub up: V,
}

/// `Σ_j [recon_j + gan_j + γ1·down_j + γ2·up_j]` on the tape.
pub fn total_loss_on<T: Real>(tape: &mut Tape<T>, levels: &[LevelTerms<Var>], w: &LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for l in levels {
        let down = tape.scale(l.down, w.gamma1)?;
        let up = tape.scale(l.up, w.gamma2)?;
        for term in [l.recon, l.gan, down, up] {
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
    }
    match acc {
        Some(a) => Ok(a),
        None => tape.constant(Tensor::scalar(T::zero())),
    }
}

/// Scalar form of [`total_loss_on`].
pub fn total_loss(levels: &[LevelTerms<f64>], w: &LossWeights) -> f64 {
    levels
        .iter()
        .map(|l| l.recon + l.gan + w.gamma1 * l.down + w.gamma2 * l.up)
        .sum()
}
