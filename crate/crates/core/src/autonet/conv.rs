//! im2col / col2im lowering for 3-D cross-correlation.

use std::ops::Range;

use super::Real;
use crate::error::{bail_shape, Result};

/// Stride and per-side zero padding, identical on all three axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad_lo: pad,
            pad_hi: pad,
        }
    }

    pub fn asymmetric(stride: usize, pad_lo: usize, pad_hi: usize) -> Self {
        Self {
            stride,
            pad_lo,
            pad_hi,
        }
    }

    /// Output extent along one axis; errors unless it is integral and positive.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            bail_shape!("convolution stride must be at least 1");
        }
        let padded = input + self.pad_lo + self.pad_hi;
        if kernel == 0 || kernel > padded {
            bail_shape!("kernel {kernel} does not fit padded extent {padded}");
        }
        if (padded - kernel) % self.stride != 0 {
            bail_shape!(
                "non-integral output extent: ({padded} - {kernel}) / {} ",
                self.stride
            );
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

/// Spatial bookkeeping for one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub geom: ConvGeom,
}

impl ConvDims {
    pub fn kdim(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    /// A 1×1×1, stride-1, unpadded convolution needs no lowering.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1]
            && self.geom.stride == 1
            && self.geom.pad_lo == 0
            && self.geom.pad_hi == 0
    }
}

/// Range of output positions `o` for which `o*stride + k - pad_lo` lands in
/// `[0, input)`.
fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad_lo: usize) -> (usize, usize) {
    let lo = if pad_lo > k {
        (pad_lo - k).div_ceil(stride)
    } else {
        0
    };
    // o*stride + k - pad_lo <= input - 1
    let hi = if input + pad_lo >= k + 1 {
        ((input + pad_lo - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Output depth planes per lowering chunk, keeping the column buffer near
/// `CHUNK_ELEMS` elements.
const CHUNK_ELEMS: usize = 1 << 21;

pub(crate) fn slab_planes(d: &ConvDims) -> usize {
    let per_plane = d.kdim() * d.output[1] * d.output[2];
    (CHUNK_ELEMS / per_plane.max(1)).clamp(1, d.output[0].max(1))
}

/// Lowers output planes `zs` into `col: [kdim, |zs|·oh·ow]`.
pub(crate) fn im2col<T: Real>(x: &[T], d: &ConvDims, zs: Range<usize>, col: &mut [T]) {
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [_, oh, ow] = d.output;
    let s = d.geom.stride;
    let p = d.geom.pad_lo;
    let plen = zs.len() * oh * ow;
    let z0 = zs.start;
    debug_assert_eq!(col.len(), d.kdim() * plen);
    let (xr_lo, xr_hi): (Vec<usize>, Vec<usize>) =
        (0..kw).map(|kx| valid_range(ow, iw, kx, s, p)).unzip();
    for c in 0..d.cin {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let dst = &mut col[row * plen..(row + 1) * plen];
                    let (xlo, xhi) = (xr_lo[kx], xr_hi[kx]);
                    for oz in zs.clone() {
                        let iz = (oz * s + kz) as isize - p as isize;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let out_row = &mut dst[((oz - z0) * oh + oy) * ow..][..ow];
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                out_row.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(iz as usize * ih + iy as usize) * iw..][..iw];
                            out_row[..xlo].fill(T::zero());
                            out_row[xhi..].fill(T::zero());
                            if xlo == xhi {
                                continue;
                            }
                            if s == 1 {
                                let start = xlo + kx - p;
                                out_row[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                            } else {
                                for (ox, o) in out_row[xlo..xhi].iter_mut().enumerate() {
                                    *o = src[(ox + xlo) * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds the columns of output planes `zs` back onto `dx`.
pub(crate) fn col2im<T: Real>(col: &[T], d: &ConvDims, zs: Range<usize>, dx: &mut [T]) {
    let [id, ih, iw] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [_, oh, ow] = d.output;
    let s = d.geom.stride;
    let p = d.geom.pad_lo;
    let plen = zs.len() * oh * ow;
    let z0 = zs.start;
    for c in 0..d.cin {
        let xc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let src = &col[row * plen..(row + 1) * plen];
                    let (xlo, xhi) = valid_range(ow, iw, kx, s, p);
                    for oz in zs.clone() {
                        let iz = (oz * s + kz) as isize - p as isize;
                        if iz < 0 || iz >= id as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let dst = &mut xc[(iz as usize * ih + iy as usize) * iw..][..iw];
                            let g = &src[((oz - z0) * oh + oy) * ow..][..ow];
                            for ox in xlo..xhi {
                                dst[ox * s + kx - p] += g[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_rules() {
        let g = ConvGeom::new(1, 1);
        assert_eq!(g.out_extent(8, 3).unwrap(), 8);
        assert_eq!(ConvGeom::new(2, 1).out_extent(32, 4).unwrap(), 16);
        assert!(ConvGeom::new(2, 1).out_extent(32, 3).is_err());
        assert!(ConvGeom::new(1, 0).out_extent(2, 3).is_err());
        assert!(ConvGeom::new(0, 0).out_extent(2, 1).is_err());
        assert_eq!(ConvGeom::asymmetric(1, 0, 1).out_extent(16, 2).unwrap(), 16);
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for input in 1..7 {
            for k in 0..4 {
                for s in 1..3 {
                    for p in 0..3 {
                        let out = 9;
                        let (lo, hi) = valid_range(out, input, k, s, p);
                        for o in 0..out {
                            let i = (o * s + k) as isize - p as isize;
                            let ok = i >= 0 && i < input as isize;
                            assert_eq!(ok, o >= lo && o < hi, "in={input} k={k} s={s} p={p} o={o}");
                        }
                    }
                }
            }
        }
    }
}
