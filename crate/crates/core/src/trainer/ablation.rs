//! Ablation grid and held-out evaluation.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{random_styles, train, AblationFlags, Checkpoint, TrainConfig};
use crate::augment::{augment_shape, AugmentConfig};
use crate::error::{bail_arg, Error, Result};
use crate::metrics::{evaluate_shape, PatchSampleSpec, ShapeMetrics, StylePatchBank};
use crate::model::StyleLibrary;
use crate::voxgrid::CoarseInput;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub label: String,
    pub flags: AblationFlags,
}

/// The nine pyramid / structure-loss / adaptive-α combinations, labelled
/// `a` to `i`. Rows without either structure loss fall back to the
/// validity mask; row `a` also drops the intermediate levels.
pub fn table3_variants(base: &AblationFlags) -> Vec<AblationVariant> {
    // (label, pyramid, down, up, adaptive α)
    let rows = [
        ("a", false, false, false, false),
        ("b", true, false, false, false),
        ("c", true, true, false, false),
        ("d", true, false, true, false),
        ("e", true, false, false, true),
        ("f", true, true, true, false),
        ("g", true, true, false, true),
        ("h", true, false, true, true),
        ("i", true, true, true, true),
    ];
    rows.iter()
        .map(|&(label, pyramid, down, up, adaptive)| AblationVariant {
            label: label.to_string(),
            flags: AblationFlags {
                single_level: !pyramid,
                disable_down: !down,
                disable_up: !up,
                disable_adaptive_alpha: !adaptive,
                vanilla_mask_baseline: !down && !up,
                ..*base
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of held-out inputs.
    pub samples: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub patch: PatchSampleSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            seed: 0x5eed_e7a1,
            augment: AugmentConfig::default(),
            patch: PatchSampleSpec {
                samples_per_shape: 200,
                ..PatchSampleSpec::default()
            },
        }
    }
}

/// Mean metrics over a set of generated shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub strict_iou: f64,
    pub loose_iou: f64,
    pub lp_iou: f64,
    pub lp_fscore: f64,
}

impl MetricSummary {
    pub fn mean(rows: &[ShapeMetrics]) -> Self {
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&ShapeMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            count: rows.len(),
            strict_iou: avg(|m| m.strict_iou),
            loose_iou: avg(|m| m.loose_iou),
            lp_iou: avg(|m| m.lp_iou),
            lp_fscore: avg(|m| m.lp_fscore),
        }
    }
}

/// Augmented coarse shapes with random per-part styles, drawn from a seed
/// stream separate from any training run.
pub fn heldout_inputs(lib: &StyleLibrary, augment: &AugmentConfig, k: u32, count: usize, seed: u64) -> Result<Vec<CoarseInput>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let aug = augment_shape(lib, augment, k, rng.random())?;
            random_styles(&aug.coarse, lib.len(), rng.random())
        })
        .collect()
}

/// Detailizes every input at the finest level and scores it against the
/// checkpoint's style shapes.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, inputs: &[CoarseInput], patch: &PatchSampleSpec) -> Result<Vec<ShapeMetrics>> {
    let styles: Vec<_> = ckpt.library.shapes().iter().map(|s| &s.occ).collect();
    let bank = StylePatchBank::new(&styles, patch.patch_side)?;
    inputs
        .iter()
        .map(|c| {
            let out = ckpt.detailize(c, ckpt.model.big_k())?;
            evaluate_shape(&out, c, &bank, patch)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub flags: AblationFlags,
    pub metrics: MetricSummary,
}

pub const ABLATION_CSV_HEADER: &str =
    "label,single_level,disable_down,disable_up,disable_adaptive_alpha,vanilla_mask_baseline,strict_iou,loose_iou,lp_iou,lp_fscore";

impl AblationRow {
    pub fn to_csv(&self) -> String {
        let f = &self.flags;
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.label,
            f.single_level,
            f.disable_down,
            f.disable_up,
            f.disable_adaptive_alpha,
            f.vanilla_mask_baseline,
            m.strict_iou,
            m.loose_iou,
            m.lp_iou,
            m.lp_fscore
        )
    }
}

/// Trains `base` once per variant (same seed, flags replaced) and scores
/// each run on one shared held-out set. With `out`, each run lives in
/// `out/<label>/` and the table goes to `out/ablation.csv`.
pub fn run_ablation_grid(
    base: &TrainConfig,
    lib: &StyleLibrary,
    variants: &[AblationVariant],
    eval: &EvalConfig,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        bail_arg!("empty ablation grid");
    }
    let inputs = heldout_inputs(lib, &eval.augment, base.k, eval.samples, eval.seed)?;
    let mut rows = Vec::new();
    for v in variants {
        let cfg = TrainConfig { flags: v.flags, ..base.clone() };
        log::info!("ablation variant {}: {:?}", v.label, v.flags);
        let dir = out.map(|d| d.join(&v.label));
        let (ckpt, _) = train(&cfg, lib, dir.as_deref())?;
        let metrics = MetricSummary::mean(&evaluate_checkpoint(&ckpt, &inputs, &eval.patch)?);
        rows.push(AblationRow { label: v.label.clone(), flags: v.flags, metrics });
    }
    if let Some(dir) = out {
        let mut text = format!("{ABLATION_CSV_HEADER}\n");
        for r in &rows {
            text.push_str(&r.to_csv());
            text.push('\n');
        }
        let path = dir.join("ablation.csv");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}
