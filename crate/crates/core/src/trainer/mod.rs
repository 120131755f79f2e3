//! Joint training of the generator pyramid and its discriminators.
//!
//! Every step draws its sample from an RNG keyed by `(seed, step)`, so a run
//! restarted from a checkpoint replays exactly what the uninterrupted run
//! would have done.

mod ablation;
mod checkpoint;

pub use ablation::{
    evaluate_checkpoint, heldout_inputs, run_ablation_grid, table3_variants, AblationRow,
    AblationVariant, EvalConfig, MetricSummary,
};
pub use checkpoint::{Checkpoint, Manifest};

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{assign_random_styles, augment_shape, AugmentConfig};
use crate::autonet::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::error::{bail_arg, Error, Result};
use crate::losses::{
    build_alpha_map, disc_loss, down_loss, gan_loss_generator, occupied_mask_at, recon_loss,
    style_map_at, up_loss, LossWeights, StructureNorm,
};
use crate::model::{GeneratorInput, LibraryInfo, ModelConfig, PyramidModel, StyleLibrary};
use crate::voxgrid::{
    apply_validity_mask, downsample_labels_majority, downsample_max, gaussian_smooth, write_voxb,
    CoarseInput, OccupancyGrid, VoxbFile,
};

pub const LOSS_CSV_HEADER: &str = "step,level,recon,gan_g,gan_d,down,up,total";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub disable_down: bool,
    pub disable_up: bool,
    /// Use α2 everywhere.
    pub disable_adaptive_alpha: bool,
    /// Multiply generator outputs by the dilated coarse occupancy, in
    /// training and at inference.
    pub vanilla_mask_baseline: bool,
    pub use_part_labels: bool,
    /// Average the generator GAN loss over occupied coarse blocks only.
    pub gan_occupied_only: bool,
    /// Stop gradients between generator levels.
    pub detach_lower_levels: bool,
    /// Unlock finer levels one at a time over the run.
    pub progressive: bool,
    /// Supervise the finest level only.
    pub single_level: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            disable_down: false,
            disable_up: false,
            disable_adaptive_alpha: false,
            vanilla_mask_baseline: false,
            use_part_labels: true,
            gan_occupied_only: false,
            detach_lower_levels: false,
            progressive: false,
            single_level: false,
        }
    }
}

/// Interleaving of reconstruction and adversarial steps: each cycle runs
/// `recon` reconstruction steps followed by `gan` adversarial ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamMix {
    pub recon: u32,
    pub gan: u32,
}

impl Default for StreamMix {
    fn default() -> Self {
        Self { recon: 1, gan: 1 }
    }
}

impl StreamMix {
    /// Whether 1-based `step` is a reconstruction step.
    pub fn is_recon(&self, step: u64) -> bool {
        let cycle = (self.recon + self.gan) as u64;
        (step.max(1) - 1) % cycle < self.recon as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: u32,
    #[serde(rename = "K")]
    pub big_k: u32,
    pub steps: u64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub structure_norm: StructureNorm,
    pub mix: StreamMix,
    pub augment: AugmentConfig,
    pub backbone_width: usize,
    pub generator_widths: Vec<usize>,
    pub discriminator_width: usize,
    /// Gaussian σ (in voxels) applied to real shapes before they reach a
    /// discriminator or serve as reconstruction targets; 0 disables it.
    /// Above ~0.6 the 2-voxel features of the procedural sets wash out.
    pub target_sigma: f32,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Progress log cadence in steps (0: silent).
    pub log_every: u64,
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 3,
            big_k: 5,
            steps: 1500,
            seed: 0,
            adam: AdamConfig {
                lr: 5e-4,
                ..AdamConfig::default()
            },
            // At 10 the mean-reduced structure losses outweigh the
            // adversarial term and every coarse block comes out solid.
            weights: LossWeights {
                gamma1: 1.0,
                gamma2: 1.0,
                ..LossWeights::default()
            },
            structure_norm: StructureNorm::default(),
            mix: StreamMix::default(),
            augment: AugmentConfig::default(),
            backbone_width: 32,
            generator_widths: vec![32, 16],
            discriminator_width: 16,
            target_sigma: 0.5,
            checkpoint_every: 0,
            log_every: 50,
            flags: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if self.big_k <= self.k {
            return bad("K must exceed k");
        }
        if self.generator_widths.len() != (self.big_k - self.k) as usize {
            return bad("generator_widths needs one entry per level");
        }
        if self.mix.recon + self.mix.gan == 0 {
            return bad("stream mix must contain at least one step");
        }
        let w = &self.weights;
        if [w.alpha1, w.alpha2, w.gamma1, w.gamma2].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss weights must be finite and non-negative");
        }
        if !(self.target_sigma.is_finite() && self.target_sigma >= 0.0) {
            return bad("target_sigma must be finite and non-negative");
        }
        if !(self.adam.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        self.augment.validate()
    }

    /// Loss weights after the ablation flags.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.flags.disable_down {
            w.gamma1 = 0.0;
        }
        if self.flags.disable_up {
            w.gamma2 = 0.0;
        }
        if self.flags.disable_adaptive_alpha {
            w.alpha1 = w.alpha2;
        }
        w
    }

    pub fn model_config(&self, info: &LibraryInfo) -> ModelConfig {
        let mut m = ModelConfig::new(self.k, self.big_k, info.style_names.clone(), info.part_vocab.clone());
        m.use_part_labels = self.flags.use_part_labels;
        m.backbone_width = self.backbone_width;
        m.generator_widths = self.generator_widths.clone();
        m.discriminator_width = self.discriminator_width;
        m.seed = self.seed;
        m
    }

    /// Digest of everything that shapes the trajectory; the step budget and
    /// the logging and checkpoint cadences are left out so a run can be
    /// extended.
    pub fn config_hash(&self, info: &LibraryInfo) -> String {
        let mut c = self.clone();
        c.steps = 0;
        c.checkpoint_every = 0;
        c.log_every = 0;
        let bytes = serde_json::to_vec(&(c, info)).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    fn levels(&self) -> std::ops::RangeInclusive<u32> {
        self.k + 1..=self.big_k
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 over a parameter store's values.
pub fn param_digest(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, t) in store.iter() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// One CSV line: a level's losses at a step. Terms not evaluated at that
/// step are `None` and print as empty fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub level: u32,
    pub recon: Option<f32>,
    pub gan_g: Option<f32>,
    pub gan_d: Option<f32>,
    pub down: Option<f32>,
    pub up: Option<f32>,
    pub total: f32,
}

impl LossRow {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f32>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.level,
            f(self.recon),
            f(self.gan_g),
            f(self.gan_d),
            f(self.down),
            f(self.up),
            self.total
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("loss CSV line {line:?}"));
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 8 {
            return Err(bad());
        }
        let opt = |s: &str| -> Result<Option<f32>> {
            if s.is_empty() { Ok(None) } else { s.parse().map(Some).map_err(|_| bad()) }
        };
        Ok(Self {
            step: fields[0].parse().map_err(|_| bad())?,
            level: fields[1].parse().map_err(|_| bad())?,
            recon: opt(fields[2])?,
            gan_g: opt(fields[3])?,
            gan_d: opt(fields[4])?,
            down: opt(fields[5])?,
            up: opt(fields[6])?,
            total: fields[7].parse().map_err(|_| bad())?,
        })
    }
}

/// Reads a loss CSV written by [`Trainer::run`].
pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<LossRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err(Error::Format(format!("{}: missing loss CSV header", path.display())));
    }
    lines.map(LossRow::from_csv).collect()
}

/// Per-style data that never changes during a run.
#[derive(Debug, Clone)]
struct StyleData {
    coarse: CoarseInput,
    input: GeneratorInput,
    /// Smoothed downsampled shape per level, `[1, s, s, s]`.
    targets: Vec<Tensor>,
}

/// The style shape itself at the coarse resolution, labelled with its own
/// style everywhere.
pub fn style_as_coarse(lib: &StyleLibrary, style: u16, k: u32) -> Result<CoarseInput> {
    let Some(shape) = lib.shape(style) else {
        bail_arg!("style {style} not in the library");
    };
    let factor = 1usize << (lib.log2() - k);
    let occ = downsample_max(&shape.occ, factor)?;
    let mut labels = downsample_labels_majority(&shape.occ, &shape.labels, factor)?;
    for (s, &o) in labels.style_mut().iter_mut().zip(occ.values()) {
        *s = if o > 0.0 { style } else { 0 };
    }
    CoarseInput::new(occ, labels)
}

fn build_style_data(model: &PyramidModel, lib: &StyleLibrary, cfg: &TrainConfig) -> Result<Vec<StyleData>> {
    (1..=lib.len() as u16)
        .map(|style| {
            let coarse = style_as_coarse(lib, style, cfg.k)?;
            let input = model.assemble_input(&coarse)?;
            let shape = lib.shape(style).expect("style in range");
            let targets = cfg
                .levels()
                .map(|j| {
                    let g = downsample_max(&shape.occ, 1 << (cfg.big_k - j))?;
                    let s = g.side();
                    let g = if cfg.target_sigma > 0.0 { gaussian_smooth(&g, cfg.target_sigma)? } else { g };
                    Tensor::new(vec![1, s, s, s], g.into_values())
                })
                .collect::<Result<_>>()?;
            Ok(StyleData { coarse, input, targets })
        })
        .collect()
}

/// Random per-part styles, or one random style for the whole shape when
/// it carries no part labels.
fn random_styles(coarse: &CoarseInput, n: usize, seed: u64) -> Result<CoarseInput> {
    let labelled = (0..coarse.occ().len()).all(|i| !coarse.is_occupied(i) || coarse.labels().part()[i] > 0);
    if labelled {
        return assign_random_styles(coarse, n, seed);
    }
    let style = ChaCha8Rng::seed_from_u64(seed).random_range(1..=n as u16);
    let mut labels = coarse.labels().clone();
    for (i, s) in labels.style_mut().iter_mut().enumerate() {
        if coarse.is_occupied(i) {
            *s = style;
        }
    }
    CoarseInput::new(coarse.occ().clone(), labels)
}

/// Multiplicative validity mask at `level`: 1 inside the coarse shape grown
/// by one coarse voxel, 0 elsewhere.
pub fn validity_mask_values(c: &CoarseInput, level: u32) -> Result<Vec<f32>> {
    Ok(apply_validity_mask(&OccupancyGrid::filled(level, 1.0)?, c)?.into_values())
}

/// What a step trains on.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub recon: bool,
    /// 1-based style of the real shape shown to the discriminators.
    pub style: u16,
    pub coarse: CoarseInput,
}

pub struct Trainer {
    cfg: TrainConfig,
    lib: StyleLibrary,
    model: PyramidModel,
    adam_g: Adam,
    adam_d: Adam,
    step: u64,
    styles: Vec<StyleData>,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, lib: StyleLibrary) -> Result<Self> {
        cfg.validate()?;
        if lib.log2() != cfg.big_k {
            bail_arg!("style shapes at 2^{}, config asks for K = {}", lib.log2(), cfg.big_k);
        }
        let model = PyramidModel::new(cfg.model_config(&lib.info()))?;
        let adam_g = Adam::new(cfg.adam, &model.gen);
        let adam_d = Adam::new(cfg.adam, &model.disc);
        let styles = build_style_data(&model, &lib, &cfg)?;
        Ok(Self {
            cfg,
            lib,
            model,
            adam_g,
            adam_d,
            step: 0,
            styles,
            dump_dir: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn library(&self) -> &StyleLibrary {
        &self.lib
    }

    pub fn model(&self) -> &PyramidModel {
        &self.model
    }

    /// Completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Raises the step budget, e.g. to continue a finished run.
    pub fn set_total_steps(&mut self, steps: u64) {
        self.cfg.steps = steps;
    }

    /// Where a failing step writes its inputs.
    pub fn set_dump_dir(&mut self, dir: Option<PathBuf>) {
        self.dump_dir = dir;
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.cfg.clone(),
            library: self.lib.clone(),
            step: self.step,
            config_hash: self.cfg.config_hash(&self.lib.info()),
        }
    }

    /// Levels that receive losses at 1-based step `t`.
    pub fn active_levels(&self, t: u64) -> Vec<u32> {
        let c = &self.cfg;
        if c.flags.single_level {
            return vec![c.big_k];
        }
        let n = (c.big_k - c.k) as u64;
        c.levels()
            .filter(|&j| !c.flags.progressive || ((j - c.k - 1) as u64) * c.steps / n < t)
            .collect()
    }

    /// The deterministic sample of 1-based step `t`.
    pub fn sample(&self, t: u64) -> Result<StepSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(t);
        let style = rng.random_range(1..=self.lib.len() as u16);
        if self.cfg.mix.is_recon(t) {
            return Ok(StepSample {
                recon: true,
                style,
                coarse: self.styles[style as usize - 1].coarse.clone(),
            });
        }
        let aug = augment_shape(&self.lib, &self.cfg.augment, self.cfg.k, rng.random())?;
        let coarse = random_styles(&aug.coarse, self.lib.len(), rng.random())?;
        Ok(StepSample { recon: false, style, coarse })
    }

    /// Runs one discriminator update and one generator update.
    pub fn step(&mut self) -> Result<Vec<LossRow>> {
        let t = self.step + 1;
        match self.step_inner(t) {
            Ok(rows) => {
                self.step = t;
                Ok(rows)
            }
            Err(Error::NonFinite { op }) => {
                let reason = format!("non-finite value produced by {op}");
                if let Err(e) = self.dump(t, &reason) {
                    log::error!("could not write the step {t} dump: {e}");
                }
                Err(Error::Training { step: t, reason })
            }
            Err(e) => Err(e),
        }
    }

    fn dump(&self, t: u64, reason: &str) -> Result<()> {
        let Some(dir) = &self.dump_dir else { return Ok(()) };
        let dir = dir.join(format!("failed_step_{t}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let s = self.sample(t)?;
        write_voxb(dir.join("input.voxb"), &VoxbFile::from_coarse(&s.coarse))?;
        let info = serde_json::json!({
            "step": t,
            "reason": reason,
            "recon_stream": s.recon,
            "real_style": s.style,
            "config": self.cfg,
        });
        let path = dir.join("info.json");
        fs::write(&path, serde_json::to_vec_pretty(&info)?).map_err(|e| Error::io(&path, e))?;
        log::error!("step {t} failed ({reason}); inputs written to {}", dir.display());
        Ok(())
    }

    fn step_inner(&mut self, t: u64) -> Result<Vec<LossRow>> {
        let s = self.sample(t)?;
        let levels = self.active_levels(t);
        let flags = self.cfg.flags;
        let w = self.cfg.effective_weights();
        let (k, big_k) = (self.cfg.k, self.cfg.big_k);
        let at = |j: u32| (j - k - 1) as usize;

        let input = if s.recon {
            self.styles[s.style as usize - 1].input.clone()
        } else {
            self.model.assemble_input(&s.coarse)?
        };
        let mut gt = Tape::<f32>::new();
        let gv = self.model.gen.bind(&mut gt, true)?;
        let mut outs = self.model.generate_taps(&mut gt, &gv, &input, big_k, flags.detach_lower_levels)?;
        if flags.vanilla_mask_baseline {
            for (j, o) in self.cfg.levels().zip(outs.iter_mut()) {
                let side = 1usize << j;
                let m = Tensor::new(vec![1, side, side, side], validity_mask_values(&s.coarse, j)?)?;
                let m = gt.constant(m)?;
                *o = gt.mul(*o, m)?;
            }
        }
        let style_maps: Vec<Vec<u16>> = levels.iter().map(|&j| style_map_at(&s.coarse, j)).collect::<Result<_>>()?;

        let gen_digest = param_digest(&self.model.gen);
        let gan_d = self.disc_step(&gt, &outs, &s, &levels, &style_maps)?;
        if param_digest(&self.model.gen) != gen_digest {
            return Err(Error::Training { step: t, reason: "discriminator phase touched generator parameters".into() });
        }
        let disc_digest = param_digest(&self.model.disc);

        let dv = self.model.disc.bind(&mut gt, false)?;
        let mut rows = Vec::new();
        let mut total: Option<Var> = None;
        for (li, &j) in levels.iter().enumerate() {
            let o = outs[at(j)];
            let mut row = LossRow {
                step: t,
                level: j,
                recon: None,
                gan_g: None,
                gan_d: Some(gan_d[li]),
                down: None,
                up: None,
                total: 0.0,
            };
            let mut terms: Vec<Var> = Vec::new();
            if s.recon {
                let target = gt.constant(self.styles[s.style as usize - 1].targets[at(j)].clone())?;
                let r = recon_loss(&mut gt, o, target)?;
                row.recon = Some(scalar(&gt, r));
                terms.push(r);
            } else {
                let d_out = self.model.discriminate_on(&mut gt, &dv, o, j)?;
                let alpha = build_alpha_map(&s.coarse, j, w.alpha1 as f32, w.alpha2 as f32)?;
                let region = if flags.gan_occupied_only { Some(occupied_mask_at(&s.coarse, j)?) } else { None };
                let g = gan_loss_generator(&mut gt, d_out, &style_maps[li], &alpha, region.as_deref())?;
                row.gan_g = Some(scalar(&gt, g));
                terms.push(g);
                let lower = if j == k + 1 {
                    let side = s.coarse.side();
                    gt.constant(Tensor::new(vec![1, side, side, side], s.coarse.occ().values().to_vec())?)?
                } else {
                    outs[at(j) - 1]
                };
                if !flags.disable_down {
                    let d = down_loss(&mut gt, o, lower, self.cfg.structure_norm)?;
                    row.down = Some(scalar(&gt, d));
                    terms.push(gt.scale(d, w.gamma1)?);
                }
                if !flags.disable_up {
                    let u = up_loss(&mut gt, o, lower, self.cfg.structure_norm)?;
                    row.up = Some(scalar(&gt, u));
                    terms.push(gt.scale(u, w.gamma2)?);
                }
            }
            let level_total = sum_vars(&mut gt, &terms)?;
            row.total = scalar(&gt, level_total);
            total = Some(match total {
                None => level_total,
                Some(a) => gt.add(a, level_total)?,
            });
            rows.push(row);
        }
        let total = total.expect("at least one active level");
        let grads = gt.backward(total)?;
        let g: Vec<Option<&[f32]>> = gv.iter().map(|&v| grads.get(v)).collect();
        self.adam_g.step(&mut self.model.gen, &g)?;
        if param_digest(&self.model.disc) != disc_digest {
            return Err(Error::Training { step: t, reason: "generator phase touched discriminator parameters".into() });
        }
        Ok(rows)
    }

    fn disc_step(
        &mut self,
        gt: &Tape<f32>,
        outs: &[Var],
        s: &StepSample,
        levels: &[u32],
        style_maps: &[Vec<u16>],
    ) -> Result<Vec<f32>> {
        let k = self.cfg.k;
        let mut dt = Tape::<f32>::new();
        let dv = self.model.disc.bind(&mut dt, true)?;
        let real = &self.styles[s.style as usize - 1];
        let mut values = Vec::new();
        let mut terms = Vec::new();
        for (li, &j) in levels.iter().enumerate() {
            let i = (j - k - 1) as usize;
            let x_real = dt.constant(real.targets[i].clone())?;
            let x_fake = dt.constant(gt.value(outs[i]).clone())?;
            let d_real = self.model.discriminate_on(&mut dt, &dv, x_real, j)?;
            let d_fake = self.model.discriminate_on(&mut dt, &dv, x_fake, j)?;
            let l = disc_loss(&mut dt, d_real, s.style, d_fake, &style_maps[li])?;
            values.push(scalar(&dt, l));
            terms.push(l);
        }
        let total = sum_vars(&mut dt, &terms)?;
        let grads = dt.backward(total)?;
        let g: Vec<Option<&[f32]>> = dv.iter().map(|&v| grads.get(v)).collect();
        self.adam_d.step(&mut self.model.disc, &g)?;
        Ok(values)
    }

    /// Steps until the budget is spent. With `out`, appends to
    /// `out/losses.csv` and saves `out/checkpoint` at the configured cadence
    /// and at the end.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<LossRow>> {
        let mut csv = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                if self.dump_dir.is_none() {
                    self.dump_dir = Some(dir.to_path_buf());
                }
                Some(open_loss_csv(&dir.join("losses.csv"), self.step == 0)?)
            }
            None => None,
        };
        let started = Instant::now();
        let first = self.step;
        let mut all = Vec::new();
        while self.step < self.cfg.steps {
            let rows = self.step()?;
            if let Some(w) = csv.as_mut() {
                for r in &rows {
                    writeln!(w, "{}", r.to_csv()).map_err(|e| Error::io("losses.csv", e))?;
                }
            }
            if self.cfg.log_every > 0 && self.step % self.cfg.log_every == 0 {
                let done = self.step - first;
                let per = started.elapsed().as_secs_f64() / done as f64;
                let total: f32 = rows.iter().map(|r| r.total).sum();
                log::info!(
                    "step {}/{} loss {total:.4} ({per:.2}s/step, ~{:.0}s left)",
                    self.step,
                    self.cfg.steps,
                    per * (self.cfg.steps - self.step) as f64
                );
            }
            all.extend(rows);
            if let Some(dir) = out {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.step % every == 0 && self.step < self.cfg.steps {
                    if let Some(w) = csv.as_mut() {
                        w.flush().map_err(|e| Error::io("losses.csv", e))?;
                    }
                    self.save(dir.join("checkpoint"))?;
                }
            }
        }
        if let Some(mut w) = csv {
            w.flush().map_err(|e| Error::io("losses.csv", e))?;
        }
        if let Some(dir) = out {
            self.save(dir.join("checkpoint"))?;
        }
        Ok(all)
    }

    /// Writes a resumable checkpoint directory, replacing any previous one.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        checkpoint::save_trainer(self, dir.as_ref())
    }

    /// Continues a run from a checkpoint written by [`Trainer::save`].
    /// `cfg` must hash like the saved one; its step budget may differ.
    pub fn resume(dir: impl AsRef<Path>, cfg: TrainConfig) -> Result<Self> {
        checkpoint::resume_trainer(dir.as_ref(), cfg)
    }
}

fn open_loss_csv(path: &Path, fresh: bool) -> Result<BufWriter<File>> {
    let exists = path.exists();
    let file = if fresh {
        File::create(path)
    } else {
        OpenOptions::new().append(true).create(true).open(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if fresh || !exists {
        writeln!(w, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

fn scalar(tape: &Tape<f32>, v: Var) -> f32 {
    tape.value(v).data()[0]
}

fn sum_vars(tape: &mut Tape<f32>, vars: &[Var]) -> Result<Var> {
    let (first, rest) = vars.split_first().expect("at least one term");
    let mut acc = *first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Trains from scratch; see [`Trainer::run`].
pub fn train(cfg: &TrainConfig, lib: &StyleLibrary, out: Option<&Path>) -> Result<(Checkpoint, Vec<LossRow>)> {
    let mut t = Trainer::new(cfg.clone(), lib.clone())?;
    let rows = t.run(out)?;
    Ok((t.checkpoint(), rows))
}

/// Detailized occupancy of `c` at `level` from a trained checkpoint.
pub fn detailize(ckpt: &Checkpoint, c: &CoarseInput, level: u32) -> Result<OccupancyGrid> {
    ckpt.detailize(c, level)
}

#[cfg(test)]
mod tests;
