//! Dense cubic voxel grids and the deterministic kernels built on them.
//!
//! Every grid in this crate is cubic with a power-of-two side and stores
//! its voxels in x-fastest linear order: `index = x + side * (y + side * z)`.
//! The same order is used by the VOXB interchange format and by the
//! channels-first tensors of [`crate::autonet`] (`[C, z, y, x]`).

mod ops;
mod voxb;

pub use ops::{
    apply_validity_mask, downsample_labels_majority, downsample_max, gaussian_kernel_1d,
    gaussian_smooth, transition_boundary_mask, upsample_labels_nearest, upsample_nearest,
};
pub use voxb::{read_voxb, voxb_from_bytes, voxb_to_bytes, write_voxb, VoxbFile};

use crate::error::{bail_arg, bail_shape, Result};

/// Largest supported resolution exponent (1024³ voxels).
pub const MAX_LOG2: u32 = 10;

#[inline]
pub fn linear_index(side: usize, x: usize, y: usize, z: usize) -> usize {
    x + side * (y + side * z)
}

#[inline]
pub fn coords(side: usize, i: usize) -> (usize, usize, usize) {
    (i % side, (i / side) % side, i / (side * side))
}

fn check_log2(log2: u32) -> Result<()> {
    if log2 > MAX_LOG2 {
        bail_arg!("resolution 2^{log2} exceeds the supported maximum 2^{MAX_LOG2}");
    }
    Ok(())
}

/// Scalar occupancy per voxel, each value finite and in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    log2: u32,
    values: Vec<f32>,
}

impl OccupancyGrid {
    pub fn zeros(log2: u32) -> Result<Self> {
        Self::filled(log2, 0.0)
    }

    pub fn filled(log2: u32, value: f32) -> Result<Self> {
        check_log2(log2)?;
        if !(0.0..=1.0).contains(&value) {
            bail_arg!("occupancy {value} outside [0, 1]");
        }
        let side = 1usize << log2;
        Ok(Self {
            log2,
            values: vec![value; side * side * side],
        })
    }

    /// Wraps existing values, validating length and range.
    pub fn from_values(log2: u32, values: Vec<f32>) -> Result<Self> {
        check_log2(log2)?;
        let side = 1usize << log2;
        if values.len() != side * side * side {
            bail_shape!(
                "{} values for a {side}^3 grid (expected {})",
                values.len(),
                side * side * side
            );
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail_arg!("occupancy {bad} is not finite or outside [0, 1]");
        }
        Ok(Self { log2, values })
    }

    /// Builds a binary grid from an indicator function over voxel coordinates.
    pub fn from_fn(log2: u32, mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        check_log2(log2)?;
        let side = 1usize << log2;
        let mut values = Vec::with_capacity(side * side * side);
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    values.push(if f(x, y, z) { 1.0 } else { 0.0 });
                }
            }
        }
        Ok(Self { log2, values })
    }

    pub(crate) fn from_values_unchecked(log2: u32, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), 1usize << (3 * log2));
        debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { log2, values }
    }

    pub fn log2(&self) -> u32 {
        self.log2
    }

    pub fn side(&self) -> usize {
        1 << self.log2
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[linear_index(self.side(), x, y, z)]
    }

    /// Sets one voxel. Values outside `[0, 1]` are rejected.
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            bail_arg!("occupancy {value} outside [0, 1]");
        }
        let side = self.side();
        if x >= side || y >= side || z >= side {
            bail_arg!("voxel ({x}, {y}, {z}) outside a {side}^3 grid");
        }
        self.values[linear_index(side, x, y, z)] = value;
        Ok(())
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Maps every voxel to 1 if strictly above `threshold`, else 0.
    pub fn binarize(&self, threshold: f32) -> OccupancyGrid {
        OccupancyGrid {
            log2: self.log2,
            values: self
                .values
                .iter()
                .map(|&v| if v > threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Number of voxels strictly above `threshold`.
    pub fn count_above(&self, threshold: f32) -> usize {
        self.values.iter().filter(|&&v| v > threshold).count()
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }
}

/// Part labels `P(v)` and style ids `S(v)` per voxel; 0 means none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    log2: u32,
    part: Vec<u16>,
    style: Vec<u16>,
}

impl LabelGrid {
    pub fn empty(log2: u32) -> Result<Self> {
        check_log2(log2)?;
        let n = 1usize << (3 * log2);
        Ok(Self {
            log2,
            part: vec![0; n],
            style: vec![0; n],
        })
    }

    pub fn from_parts(log2: u32, part: Vec<u16>, style: Vec<u16>) -> Result<Self> {
        check_log2(log2)?;
        let n = 1usize << (3 * log2);
        if part.len() != n || style.len() != n {
            bail_shape!(
                "label arrays of length {}/{} for a grid of {n} voxels",
                part.len(),
                style.len()
            );
        }
        Ok(Self { log2, part, style })
    }

    pub fn log2(&self) -> u32 {
        self.log2
    }

    pub fn side(&self) -> usize {
        1 << self.log2
    }

    pub fn len(&self) -> usize {
        self.part.len()
    }

    pub fn is_empty(&self) -> bool {
        self.part.is_empty()
    }

    pub fn part(&self) -> &[u16] {
        &self.part
    }

    pub fn style(&self) -> &[u16] {
        &self.style
    }

    pub fn part_mut(&mut self) -> &mut [u16] {
        &mut self.part
    }

    pub fn style_mut(&mut self) -> &mut [u16] {
        &mut self.style
    }

    pub fn into_parts(self) -> (Vec<u16>, Vec<u16>) {
        (self.part, self.style)
    }
}

/// Boolean per-voxel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelMask {
    log2: u32,
    bits: Vec<bool>,
}

impl VoxelMask {
    pub fn new(log2: u32, bits: Vec<bool>) -> Result<Self> {
        check_log2(log2)?;
        if bits.len() != 1usize << (3 * log2) {
            bail_shape!("mask of length {} for resolution 2^{log2}", bits.len());
        }
        Ok(Self { log2, bits })
    }

    pub fn log2(&self) -> u32 {
        self.log2
    }

    pub fn side(&self) -> usize {
        1 << self.log2
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[linear_index(self.side(), x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Coarse shape handed to the generator: binary occupancy plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseInput {
    occ: OccupancyGrid,
    labels: LabelGrid,
}

impl CoarseInput {
    /// Validates that occupancy is binary, resolutions agree and every
    /// occupied voxel carries a style id (empty voxels carry none).
    pub fn new(occ: OccupancyGrid, labels: LabelGrid) -> Result<Self> {
        if occ.log2() != labels.log2() {
            bail_shape!(
                "occupancy at 2^{} but labels at 2^{}",
                occ.log2(),
                labels.log2()
            );
        }
        if !occ.is_binary() {
            bail_arg!("coarse occupancy must be binary");
        }
        for (i, (&o, &s)) in occ.values().iter().zip(labels.style()).enumerate() {
            if o > 0.0 && s == 0 {
                bail_arg!("occupied voxel {i} has no style id");
            }
        }
        let mut labels = labels;
        for (i, &o) in occ.values().iter().enumerate() {
            if o == 0.0 {
                labels.part[i] = 0;
                labels.style[i] = 0;
            }
        }
        Ok(Self { occ, labels })
    }

    /// An all-empty input at the given resolution.
    pub fn empty(log2: u32) -> Result<Self> {
        Ok(Self {
            occ: OccupancyGrid::zeros(log2)?,
            labels: LabelGrid::empty(log2)?,
        })
    }

    pub fn occ(&self) -> &OccupancyGrid {
        &self.occ
    }

    pub fn labels(&self) -> &LabelGrid {
        &self.labels
    }

    pub fn log2(&self) -> u32 {
        self.occ.log2()
    }

    pub fn side(&self) -> usize {
        self.occ.side()
    }

    pub fn is_occupied(&self, i: usize) -> bool {
        self.occ.values()[i] > 0.0
    }

    pub fn occupied_count(&self) -> usize {
        self.occ.count_above(0.0)
    }

    /// Largest style id referenced by the input (0 when empty).
    pub fn max_style(&self) -> u16 {
        self.labels.style().iter().copied().max().unwrap_or(0)
    }

    pub fn into_parts(self) -> (OccupancyGrid, LabelGrid) {
        (self.occ, self.labels)
    }

    /// Per-voxel style ids with empty voxels filled from the nearest
    /// occupied voxel (squared Euclidean distance between voxel centers,
    /// ties to the lowest linear index). Errors on an all-empty input.
    pub fn filled_style_map(&self) -> Result<Vec<u16>> {
        let side = self.side();
        let occupied: Vec<usize> = (0..self.occ.len())
            .filter(|&i| self.is_occupied(i))
            .collect();
        if occupied.is_empty() {
            bail_arg!("cannot assign styles: coarse input has no occupied voxel");
        }
        let style = self.labels.style();
        let mut out = style.to_vec();
        for (i, slot) in out.iter_mut().enumerate() {
            if self.is_occupied(i) {
                continue;
            }
            let (x, y, z) = coords(side, i);
            let mut best = (u64::MAX, usize::MAX);
            for &j in &occupied {
                let (a, b, c) = coords(side, j);
                let d = sq(x, a) + sq(y, b) + sq(z, c);
                if d < best.0 {
                    best = (d, j);
                }
            }
            *slot = style[best.1];
        }
        Ok(out)
    }
}

fn sq(a: usize, b: usize) -> u64 {
    let d = a.abs_diff(b) as u64;
    d * d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coarse_input_requires_styles_on_occupied_voxels() {
        let mut occ = OccupancyGrid::zeros(1).unwrap();
        occ.set(0, 0, 0, 1.0).unwrap();
        let labels = LabelGrid::empty(1).unwrap();
        assert!(CoarseInput::new(occ.clone(), labels.clone()).is_err());

        let mut labels = labels;
        labels.style_mut()[0] = 2;
        let c = CoarseInput::new(occ, labels).unwrap();
        assert_eq!(c.max_style(), 2);
    }

    #[test]
    fn coarse_input_rejects_soft_occupancy() {
        let occ = OccupancyGrid::filled(1, 0.5).unwrap();
        let mut labels = LabelGrid::empty(1).unwrap();
        labels.style_mut().fill(1);
        assert!(CoarseInput::new(occ, labels).is_err());
    }

    #[test]
    fn from_values_rejects_out_of_range() {
        assert!(OccupancyGrid::from_values(0, vec![1.5]).is_err());
        assert!(OccupancyGrid::from_values(0, vec![f32::NAN]).is_err());
        assert!(OccupancyGrid::from_values(1, vec![0.0; 7]).is_err());
    }

    #[test]
    fn filled_style_map_uses_nearest_occupied_voxel() {
        // 4-voxel strip along x at y = z = 0 with styles 1 at x=0 and 2 at x=3.
        let mut occ = OccupancyGrid::zeros(2).unwrap();
        let mut labels = LabelGrid::empty(2).unwrap();
        occ.set(0, 0, 0, 1.0).unwrap();
        occ.set(3, 0, 0, 1.0).unwrap();
        labels.style_mut()[0] = 1;
        labels.style_mut()[3] = 2;
        let c = CoarseInput::new(occ, labels).unwrap();
        let map = c.filled_style_map().unwrap();
        assert_eq!(&map[..4], &[1, 1, 2, 2]);
        assert!(map.iter().all(|&s| s == 1 || s == 2));
        // (1,1,0) is equidistant? no: to x=0 -> 1+1, to x=3 -> 4+1
        assert_eq!(map[linear_index(4, 1, 1, 0)], 1);
    }

    #[test]
    fn filled_style_map_breaks_ties_by_lowest_index() {
        let mut occ = OccupancyGrid::zeros(2).unwrap();
        let mut labels = LabelGrid::empty(2).unwrap();
        occ.set(0, 0, 0, 1.0).unwrap();
        occ.set(2, 0, 0, 1.0).unwrap();
        labels.style_mut()[0] = 3;
        labels.style_mut()[2] = 4;
        let c = CoarseInput::new(occ, labels).unwrap();
        let map = c.filled_style_map().unwrap();
        assert_eq!(map[1], 3);
    }

    #[test]
    fn empty_input_has_no_style_map() {
        let c = CoarseInput::empty(2).unwrap();
        assert!(c.filled_style_map().is_err());
    }
}
