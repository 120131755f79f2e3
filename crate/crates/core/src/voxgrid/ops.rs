use super::{linear_index, CoarseInput, LabelGrid, OccupancyGrid, VoxelMask};
use crate::error::{bail_arg, bail_shape, Result};

/// log2 of a power-of-two resampling factor.
fn factor_log2(factor: usize) -> Result<u32> {
    if factor == 0 || !factor.is_power_of_two() {
        bail_arg!("resampling factor {factor} is not a positive power of two");
    }
    Ok(factor.trailing_zeros())
}

/// Max-pools non-overlapping `factor³` blocks.
pub fn downsample_max(g: &OccupancyGrid, factor: usize) -> Result<OccupancyGrid> {
    let flog = factor_log2(factor)?;
    if flog > g.log2() {
        bail_arg!("downsampling factor {factor} exceeds grid side {}", g.side());
    }
    let out_log2 = g.log2() - flog;
    let side = g.side();
    let out_side = 1usize << out_log2;
    let src = g.values();
    let mut out = vec![0.0f32; out_side * out_side * out_side];
    for z in 0..side {
        let oz = z >> flog;
        for y in 0..side {
            let oy = y >> flog;
            let row = &src[linear_index(side, 0, y, z)..][..side];
            let orow = linear_index(out_side, 0, oy, oz);
            for (x, &v) in row.iter().enumerate() {
                let o = &mut out[orow + (x >> flog)];
                if v > *o {
                    *o = v;
                }
            }
        }
    }
    Ok(OccupancyGrid::from_values_unchecked(out_log2, out))
}

/// Replicates every voxel into a `factor³` block.
pub fn upsample_nearest(g: &OccupancyGrid, factor: usize) -> Result<OccupancyGrid> {
    let flog = factor_log2(factor)?;
    let out_log2 = g.log2() + flog;
    if out_log2 > super::MAX_LOG2 {
        bail_arg!("upsampling to 2^{out_log2} exceeds the supported resolution");
    }
    Ok(OccupancyGrid::from_values_unchecked(
        out_log2,
        upsample_slice(g.values(), g.side(), flog),
    ))
}

fn upsample_slice<T: Copy>(src: &[T], side: usize, flog: u32) -> Vec<T> {
    let out_side = side << flog;
    let mut out = Vec::with_capacity(out_side * out_side * out_side);
    for z in 0..out_side {
        for y in 0..out_side {
            let row = linear_index(side, 0, y >> flog, z >> flog);
            out.extend((0..out_side).map(|x| src[row + (x >> flog)]));
        }
    }
    out
}

/// Nearest-neighbour upsampling of a per-voxel label array.
pub fn upsample_labels_nearest(labels: &[u16], log2: u32, factor: usize) -> Result<Vec<u16>> {
    let flog = factor_log2(factor)?;
    let side = 1usize << log2;
    if labels.len() != side * side * side {
        bail_shape!("{} labels for a {side}^3 grid", labels.len());
    }
    Ok(upsample_slice(labels, side, flog))
}

/// Downsamples part and style labels by majority vote over the occupied
/// voxels of each block; ties go to the lowest id, blocks without any
/// occupied voxel get 0.
pub fn downsample_labels_majority(
    occ: &OccupancyGrid,
    labels: &LabelGrid,
    factor: usize,
) -> Result<LabelGrid> {
    if occ.log2() != labels.log2() {
        bail_shape!("occupancy at 2^{} but labels at 2^{}", occ.log2(), labels.log2());
    }
    let flog = factor_log2(factor)?;
    if flog > occ.log2() {
        bail_arg!("downsampling factor {factor} exceeds grid side {}", occ.side());
    }
    let out_log2 = occ.log2() - flog;
    let side = occ.side();
    let out_side = 1usize << out_log2;
    let mut part = vec![0u16; out_side * out_side * out_side];
    let mut style = part.clone();
    let mut part_votes: Vec<(u16, u32)> = Vec::new();
    let mut style_votes: Vec<(u16, u32)> = Vec::new();
    for oz in 0..out_side {
        for oy in 0..out_side {
            for ox in 0..out_side {
                part_votes.clear();
                style_votes.clear();
                for dz in 0..factor {
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let i = linear_index(
                                side,
                                (ox << flog) + dx,
                                (oy << flog) + dy,
                                (oz << flog) + dz,
                            );
                            if occ.values()[i] > 0.0 {
                                vote(&mut part_votes, labels.part()[i]);
                                vote(&mut style_votes, labels.style()[i]);
                            }
                        }
                    }
                }
                let o = linear_index(out_side, ox, oy, oz);
                part[o] = winner(&part_votes);
                style[o] = winner(&style_votes);
            }
        }
    }
    LabelGrid::from_parts(out_log2, part, style)
}

fn vote(votes: &mut Vec<(u16, u32)>, id: u16) {
    match votes.iter_mut().find(|(v, _)| *v == id) {
        Some((_, n)) => *n += 1,
        None => votes.push((id, 1)),
    }
}

fn winner(votes: &[(u16, u32)]) -> u16 {
    votes
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|&(id, _)| id)
        .unwrap_or(0)
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        bail_arg!("gaussian sigma must be positive, got {sigma}");
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable Gaussian blur with zero-padded borders, clamped to `[0, 1]`.
pub fn gaussian_smooth(g: &OccupancyGrid, sigma: f32) -> Result<OccupancyGrid> {
    let taps = gaussian_kernel_1d(sigma as f64)?;
    let radius = (taps.len() / 2) as isize;
    let side = g.side();
    let mut a: Vec<f64> = g.values().iter().map(|&v| v as f64).collect();
    let mut b = vec![0.0f64; a.len()];
    let strides = [1usize, side, side * side];
    for &stride in &strides {
        for (i, out) in b.iter_mut().enumerate() {
            let pos = ((i / stride) % side) as isize;
            let mut acc = 0.0;
            for (t, &w) in taps.iter().enumerate() {
                let p = pos + t as isize - radius;
                if p >= 0 && (p as usize) < side {
                    acc += w * a[(i as isize + (t as isize - radius) * stride as isize) as usize];
                }
            }
            *out = acc;
        }
        std::mem::swap(&mut a, &mut b);
    }
    let values = a.into_iter().map(|v| (v as f32).clamp(0.0, 1.0)).collect();
    Ok(OccupancyGrid::from_values_unchecked(g.log2(), values))
}

/// Chebyshev dilation of a boolean grid by `radius` voxels.
pub(crate) fn dilate(bits: &[bool], side: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return bits.to_vec();
    }
    let mut a = bits.to_vec();
    let mut b = vec![false; a.len()];
    for stride in [1usize, side, side * side] {
        for (i, out) in b.iter_mut().enumerate() {
            let pos = (i / stride) % side;
            let lo = pos.saturating_sub(radius);
            let hi = (pos + radius).min(side - 1);
            let base = i - pos * stride;
            *out = (lo..=hi).any(|p| a[base + p * stride]);
        }
        std::mem::swap(&mut a, &mut b);
    }
    a
}

/// Marks labelled voxels that have a differently-styled labelled voxel
/// within Chebyshev distance `radius`.
pub fn transition_boundary_mask(labels: &LabelGrid, radius: usize) -> VoxelMask {
    let side = labels.side();
    let style = labels.style();
    let mut present: Vec<u16> = style.iter().copied().filter(|&s| s > 0).collect();
    present.sort_unstable();
    present.dedup();
    let mut mask = vec![false; style.len()];
    if present.len() > 1 {
        for &s in &present {
            let grown = dilate(
                &style.iter().map(|&t| t == s).collect::<Vec<_>>(),
                side,
                radius,
            );
            for ((m, &g), &t) in mask.iter_mut().zip(&grown).zip(style) {
                if g && t > 0 && t != s {
                    *m = true;
                }
            }
        }
    }
    VoxelMask::new(labels.log2(), mask).expect("mask matches label resolution")
}

/// Zeroes every voxel of `g` whose covering coarse voxel lies outside the
/// occupied coarse region grown by one coarse voxel.
pub fn apply_validity_mask(g: &OccupancyGrid, coarse: &CoarseInput) -> Result<OccupancyGrid> {
    if g.log2() < coarse.log2() {
        bail_shape!(
            "grid at 2^{} is coarser than the input at 2^{}",
            g.log2(),
            coarse.log2()
        );
    }
    let flog = g.log2() - coarse.log2();
    let occupied: Vec<bool> = coarse.occ().values().iter().map(|&v| v > 0.0).collect();
    let valid = upsample_slice(&dilate(&occupied, coarse.side(), 1), coarse.side(), flog);
    let values = g
        .values()
        .iter()
        .zip(&valid)
        .map(|(&v, &ok)| if ok { v } else { 0.0 })
        .collect();
    Ok(OccupancyGrid::from_values_unchecked(g.log2(), values))
}
