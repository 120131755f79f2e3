//! Structure and local-plausibility metrics.
//!
//! Generated grids are binarized at 0.5 (strictly above counts as
//! occupied) before any metric.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, bail_shape, Error, Result};
use crate::voxgrid::{downsample_max, CoarseInput, OccupancyGrid};

pub const BINARIZE_THRESHOLD: f32 = 0.5;

/// Downsampled binarized output next to the coarse input it came from.
fn down_pair(output: &OccupancyGrid, input: &CoarseInput) -> Result<(Vec<bool>, Vec<bool>)> {
    if output.log2() < input.log2() {
        bail_shape!("output at 2^{} is coarser than the input at 2^{}", output.log2(), input.log2());
    }
    let factor = 1usize << (output.log2() - input.log2());
    let down = downsample_max(&output.binarize(BINARIZE_THRESHOLD), factor)?;
    Ok((
        down.values().iter().map(|&v| v > 0.0).collect(),
        input.occ().values().iter().map(|&v| v > 0.0).collect(),
    ))
}

/// IOU between the downsampled binarized output and the input occupancy;
/// 1 when both are empty.
pub fn strict_iou(output: &OccupancyGrid, input: &CoarseInput) -> Result<f64> {
    let (a, b) = down_pair(output, input)?;
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of occupied input voxels that are also occupied in the
/// downsampled binarized output.
pub fn loose_iou(output: &OccupancyGrid, input: &CoarseInput) -> Result<f64> {
    let (a, b) = down_pair(output, input)?;
    let total = b.iter().filter(|&&y| y).count();
    if total == 0 {
        bail_arg!("loose IOU is undefined for an empty input");
    }
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    Ok(inter as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSampleSpec {
    pub patch_side: usize,
    pub probe_side: usize,
    pub samples_per_shape: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for PatchSampleSpec {
    fn default() -> Self {
        Self {
            patch_side: 12,
            probe_side: 2,
            samples_per_shape: 1000,
            threshold: 0.95,
            seed: 0,
        }
    }
}

impl PatchSampleSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.probe_side >= 1
            && self.probe_side <= self.patch_side
            && (self.patch_side - self.probe_side) % 2 == 0
            && self.threshold > 0.0
            && self.threshold <= 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid patch spec {self:?}")));
        }
        Ok(())
    }

    /// Offset of the probe inside its patch.
    pub fn probe_offset(&self) -> usize {
        (self.patch_side - self.probe_side) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Iou,
    FScore,
}

/// Patch origins whose central probe holds both occupied and empty voxels,
/// in x-fastest order of the origin. With `region`, every probe voxel must
/// also lie in the region.
pub fn qualifying_positions(
    g: &OccupancyGrid,
    spec: &PatchSampleSpec,
    region: Option<&[bool]>,
) -> Result<Vec<[usize; 3]>> {
    spec.validate()?;
    let side = g.side();
    if side < spec.patch_side {
        bail_arg!("grid side {side} is smaller than the patch side {}", spec.patch_side);
    }
    if let Some(r) = region {
        if r.len() != g.len() {
            bail_shape!("region of {} voxels for a grid of {}", r.len(), g.len());
        }
    }
    let bin = g.binarize(BINARIZE_THRESHOLD);
    let occ = bin.values();
    let n = side - spec.patch_side + 1;
    let off = spec.probe_offset();
    let ps = spec.probe_side;
    let mut out = Vec::new();
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let (mut full, mut empty, mut inside) = (false, false, true);
                for dz in 0..ps {
                    for dy in 0..ps {
                        for dx in 0..ps {
                            let i = (x + off + dx) + side * ((y + off + dy) + side * (z + off + dz));
                            if occ[i] > 0.0 {
                                full = true;
                            } else {
                                empty = true;
                            }
                            if let Some(r) = region {
                                inside &= r[i];
                            }
                        }
                    }
                }
                if full && empty && inside {
                    out.push([x, y, z]);
                }
            }
        }
    }
    Ok(out)
}

/// Up to `samples_per_shape` qualifying origins drawn uniformly without
/// replacement; all of them when there are fewer.
pub fn sample_surface_patches(
    g: &OccupancyGrid,
    spec: &PatchSampleSpec,
    region: Option<&[bool]>,
) -> Result<Vec<[usize; 3]>> {
    let all = qualifying_positions(g, spec, region)?;
    if all.is_empty() {
        log::warn!("no qualifying surface patches in a {}^3 grid", g.side());
    }
    if all.len() <= spec.samples_per_shape {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked = sample(&mut rng, all.len(), spec.samples_per_shape).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| all[i]).collect())
}

/// Binarized patch as packed bits, plus its popcount.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchBits {
    words: Vec<u64>,
    count: u32,
}

impl PatchBits {
    pub fn extract(g: &OccupancyGrid, origin: [usize; 3], patch_side: usize) -> Self {
        let side = g.side();
        let vals = g.values();
        let n = patch_side * patch_side * patch_side;
        let mut words = vec![0u64; n.div_ceil(64)];
        let mut bit = 0;
        for z in 0..patch_side {
            for y in 0..patch_side {
                let row = origin[0] + side * ((origin[1] + y) + side * (origin[2] + z));
                for &v in &vals[row..row + patch_side] {
                    if v > BINARIZE_THRESHOLD {
                        words[bit / 64] |= 1 << (bit % 64);
                    }
                    bit += 1;
                }
            }
        }
        let count = words.iter().map(|w| w.count_ones()).sum();
        Self { words, count }
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    fn intersection(&self, other: &Self) -> u32 {
        self.words.iter().zip(&other.words).map(|(a, b)| (a & b).count_ones()).sum()
    }

    pub fn similarity(&self, other: &Self, mode: Similarity) -> f64 {
        let inter = self.intersection(other) as f64;
        let (a, b) = (self.count as f64, other.count as f64);
        match mode {
            Similarity::Iou => {
                let union = a + b - inter;
                if union == 0.0 { 1.0 } else { inter / union }
            }
            Similarity::FScore => {
                if a + b == 0.0 { 1.0 } else { 2.0 * inter / (a + b) }
            }
        }
    }

    /// Largest similarity any patch with `other_count` set bits could reach.
    fn bound(count: u32, other_count: u32, mode: Similarity) -> f64 {
        let (lo, hi) = (count.min(other_count) as f64, count.max(other_count) as f64);
        match mode {
            Similarity::Iou => if hi == 0.0 { 1.0 } else { lo / hi },
            Similarity::FScore => if hi == 0.0 { 1.0 } else { 2.0 * lo / (lo + hi) },
        }
    }
}

/// Every patch (stride 1) of a set of style shapes, sorted by popcount so
/// candidates that cannot reach the threshold are skipped in bulk.
#[derive(Debug, Clone)]
pub struct StylePatchBank {
    patch_side: usize,
    patches: Vec<PatchBits>,
}

impl StylePatchBank {
    pub fn new(styles: &[&OccupancyGrid], patch_side: usize) -> Result<Self> {
        if styles.is_empty() {
            bail_arg!("at least one style shape is required");
        }
        let mut patches = Vec::new();
        for g in styles {
            let side = g.side();
            if side < patch_side {
                bail_arg!("style side {side} is smaller than the patch side {patch_side}");
            }
            let n = side - patch_side + 1;
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        patches.push(PatchBits::extract(g, [x, y, z], patch_side));
                    }
                }
            }
        }
        patches.sort_by_key(|p| p.count);
        Ok(Self { patch_side, patches })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Whether some bank patch is at least `threshold`-similar to `p`.
    pub fn matches(&self, p: &PatchBits, threshold: f64, mode: Similarity) -> bool {
        // popcounts reachable at the threshold form one contiguous window
        let start = self.patches.partition_point(|q| {
            q.count < p.count && PatchBits::bound(p.count, q.count, mode) < threshold
        });
        for q in &self.patches[start..] {
            if PatchBits::bound(p.count, q.count, mode) < threshold {
                if q.count > p.count {
                    break;
                }
                continue;
            }
            if p.similarity(q, mode) >= threshold {
                return true;
            }
        }
        false
    }
}

/// Fraction of sampled surface patches of `gen` that match some patch of
/// the bank's shapes at the spec's threshold.
pub fn lp_score_with_bank(
    gen: &OccupancyGrid,
    bank: &StylePatchBank,
    spec: &PatchSampleSpec,
    mode: Similarity,
    region: Option<&[bool]>,
) -> Result<f64> {
    if bank.patch_side != spec.patch_side {
        bail_arg!("bank built for {}³ patches, spec asks for {}³", bank.patch_side, spec.patch_side);
    }
    let origins = sample_surface_patches(gen, spec, region)?;
    if origins.is_empty() {
        bail_arg!("no surface patches to score");
    }
    let hits: usize = origins
        .par_iter()
        .map(|&o| bank.matches(&PatchBits::extract(gen, o, spec.patch_side), spec.threshold, mode) as usize)
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    Ok(hits as f64 / origins.len() as f64)
}

/// LP-IOU / LP-F-score of `gen` against `styles`.
pub fn lp_score(gen: &OccupancyGrid, styles: &[&OccupancyGrid], spec: &PatchSampleSpec, mode: Similarity) -> Result<f64> {
    let bank = StylePatchBank::new(styles, spec.patch_side)?;
    lp_score_with_bank(gen, &bank, spec, mode, None)
}

/// [`lp_score`] restricted to patches whose probe lies inside `region`.
pub fn lp_score_in_region(
    gen: &OccupancyGrid,
    styles: &[&OccupancyGrid],
    spec: &PatchSampleSpec,
    mode: Similarity,
    region: &[bool],
) -> Result<f64> {
    let bank = StylePatchBank::new(styles, spec.patch_side)?;
    lp_score_with_bank(gen, &bank, spec, mode, Some(region))
}

/// Metric summary of one generated shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeMetrics {
    pub strict_iou: f64,
    pub loose_iou: f64,
    pub lp_iou: f64,
    pub lp_fscore: f64,
}

pub const METRIC_CSV_HEADER: &str = "name,strict_iou,loose_iou,lp_iou,lp_fscore";

/// One row of a metric CSV. IOU columns stay empty when no coarse input
/// was supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub name: String,
    pub strict_iou: Option<f64>,
    pub loose_iou: Option<f64>,
    pub lp_iou: f64,
    pub lp_fscore: f64,
}

impl MetricRecord {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{:.6},{:.6}",
            self.name,
            opt(self.strict_iou),
            opt(self.loose_iou),
            self.lp_iou,
            self.lp_fscore
        )
    }
}

/// Metrics of a generated shape, with IOUs only when `input` is given.
pub fn evaluate_generated(
    name: &str,
    output: &OccupancyGrid,
    input: Option<&CoarseInput>,
    bank: &StylePatchBank,
    spec: &PatchSampleSpec,
) -> Result<MetricRecord> {
    let lp = |mode| match lp_score_with_bank(output, bank, spec, mode, None) {
        Ok(v) => Ok(v),
        Err(Error::InvalidArgument(_)) if sample_surface_patches(output, spec, None)?.is_empty() => Ok(0.0),
        Err(e) => Err(e),
    };
    Ok(MetricRecord {
        name: name.to_string(),
        strict_iou: input.map(|c| strict_iou(output, c)).transpose()?,
        loose_iou: input.map(|c| loose_iou(output, c)).transpose()?,
        lp_iou: lp(Similarity::Iou)?,
        lp_fscore: lp(Similarity::FScore)?,
    })
}

/// Header, one line per record and a final `mean` row. A mean IOU column
/// is empty unless every record has that column.
pub fn metric_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from(METRIC_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    let n = records.len().max(1) as f64;
    let mean_opt = |f: fn(&MetricRecord) -> Option<f64>| {
        records.iter().map(f).collect::<Option<Vec<_>>>().filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / n)
    };
    let mean = MetricRecord {
        name: "mean".into(),
        strict_iou: mean_opt(|r| r.strict_iou),
        loose_iou: mean_opt(|r| r.loose_iou),
        lp_iou: records.iter().map(|r| r.lp_iou).sum::<f64>() / n,
        lp_fscore: records.iter().map(|r| r.lp_fscore).sum::<f64>() / n,
    };
    out.push_str(&mean.to_csv());
    out.push('\n');
    out
}

/// All four metrics; LP scores are 0 when the output has no surface
/// patches.
pub fn evaluate_shape(
    output: &OccupancyGrid,
    input: &CoarseInput,
    bank: &StylePatchBank,
    spec: &PatchSampleSpec,
) -> Result<ShapeMetrics> {
    let r = evaluate_generated("", output, Some(input), bank, spec)?;
    Ok(ShapeMetrics {
        strict_iou: r.strict_iou.expect("input given"),
        loose_iou: r.loose_iou.expect("input given"),
        lp_iou: r.lp_iou,
        lp_fscore: r.lp_fscore,
    })
}
