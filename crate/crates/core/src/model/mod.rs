//! The pyramid generator and the per-level patch discriminators.
//!
//! The generator runs a backbone at the coarse resolution `2^k`, then one
//! block per level `j = k+1..=K`, each doubling the feature grid and
//! emitting an occupancy tap through a sigmoid head. Level blocks see the
//! previous level's features plus three constant channels holding the
//! parity of each voxel coordinate; without them a nearest-upsampled
//! feature grid gives a convolution no way to tell the eight children of a
//! coarse voxel apart, and uniform regions could not grow periodic detail.
//!
//! Discriminators map a `[1, s, s, s]` occupancy grid to `[N + 1, s, s, s]`
//! raw scores: channels `0..N` are the style-specific heads (style `i` at
//! channel `i - 1`), channel `N` is the global head.

mod library;

pub use library::{LibraryInfo, StyleLibrary, StyleShape};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autonet::{kaiming_uniform, ConvGeom, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{bail_arg, bail_shape, Error, Result};
use crate::voxgrid::{CoarseInput, OccupancyGrid};

pub const CODE_DIM: usize = 8;
pub const LEAKY_SLOPE: f64 = 0.02;
const CODE_STD: f64 = 0.125;
const PARITY_CHANNELS: usize = 3;

/// Architecture description; serialized as the model manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: u32,
    #[serde(rename = "K")]
    pub big_k: u32,
    pub style_names: Vec<String>,
    pub part_vocab: Vec<String>,
    pub use_part_labels: bool,
    pub backbone_width: usize,
    /// One width per generator level `k+1..=K`.
    pub generator_widths: Vec<usize>,
    pub discriminator_width: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults: 32 channels everywhere, part labels on.
    pub fn new(k: u32, big_k: u32, style_names: Vec<String>, part_vocab: Vec<String>) -> Self {
        Self {
            k,
            big_k,
            style_names,
            part_vocab,
            use_part_labels: true,
            backbone_width: 32,
            generator_widths: vec![32; big_k.saturating_sub(k) as usize],
            discriminator_width: 32,
            seed: 0,
        }
    }

    pub fn n_styles(&self) -> usize {
        self.style_names.len()
    }

    pub fn n_parts(&self) -> usize {
        self.part_vocab.len()
    }

    pub fn input_channels(&self) -> usize {
        1 + if self.use_part_labels { self.n_parts() } else { 0 } + CODE_DIM
    }

    pub fn levels(&self) -> std::ops::RangeInclusive<u32> {
        self.k + 1..=self.big_k
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k >= self.big_k {
            return bad(format!("need k < K, got k={} K={}", self.k, self.big_k));
        }
        if self.big_k > crate::voxgrid::MAX_LOG2 {
            return bad(format!("K={} exceeds the supported resolution", self.big_k));
        }
        if self.style_names.is_empty() {
            return bad("at least one style is required".into());
        }
        if self.generator_widths.len() != (self.big_k - self.k) as usize {
            return bad(format!(
                "{} generator widths for {} levels",
                self.generator_widths.len(),
                self.big_k - self.k
            ));
        }
        let widths = self.generator_widths.iter().chain([&self.backbone_width, &self.discriminator_width]);
        if widths.into_iter().any(|&w| w == 0) {
            return bad("channel widths must be positive".into());
        }
        Ok(())
    }
}

/// Receptive-field side of the discriminator at `level`: 7 for the first
/// generated level, 9 for the second, 18 beyond.
pub fn receptive_field(k: u32, level: u32) -> Result<usize> {
    match level.checked_sub(k) {
        Some(1) => Ok(7),
        Some(2) => Ok(9),
        Some(d) if d >= 3 => Ok(18),
        _ => bail_arg!("level {level} is not above the input level {k}"),
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    w: usize,
    b: usize,
    geom: ConvGeom,
    kernel: usize,
}

#[derive(Debug, Clone)]
struct GenLevel {
    conv0: ConvSlot,
    conv1: ConvSlot,
    head: ConvSlot,
}

#[derive(Debug, Clone)]
struct DiscLevel {
    layers: Vec<ConvSlot>,
    upsample: bool,
}

/// Generator and discriminator parameters plus the fixed layer layout.
#[derive(Debug, Clone)]
pub struct PyramidModel {
    config: ModelConfig,
    pub gen: ParamStore,
    pub disc: ParamStore,
    codes: usize,
    backbone: Vec<ConvSlot>,
    gen_levels: Vec<GenLevel>,
    disc_levels: Vec<DiscLevel>,
}

/// Per-voxel generator input channels that do not depend on parameters.
/// Style codes are gathered from the parameter table at forward time so
/// that they receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorInput {
    pub log2: u32,
    /// `[1 + P, s, s, s]`: occupancy, then the part one-hot (when enabled).
    pub fixed: Tensor,
    /// Row of the style-code table per voxel; `None` on empty voxels.
    pub code_rows: Vec<Option<u32>>,
}

fn init_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    geom: ConvGeom,
) -> Result<ConvSlot> {
    let fan_in = cin * kernel * kernel * kernel;
    let w = store.insert(
        format!("{name}.weight"),
        kaiming_uniform(rng, vec![cout, cin, kernel, kernel, kernel], fan_in, LEAKY_SLOPE),
    )?;
    let b = store.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]))?;
    Ok(ConvSlot { w, b, geom, kernel })
}

/// Layer recipe `(kernel, stride, pad_lo, pad_hi)` and trailing upsample
/// for a discriminator with the given receptive field.
fn disc_recipe(rf: usize) -> (Vec<(usize, usize, usize, usize)>, bool) {
    match rf {
        7 => (vec![(3, 1, 1, 1), (3, 1, 1, 1), (3, 1, 1, 1)], false),
        9 => (vec![(2, 1, 0, 1), (4, 2, 1, 1), (3, 1, 1, 1)], true),
        _ => (
            vec![(4, 2, 1, 1), (3, 1, 1, 1), (3, 1, 1, 1), (3, 1, 1, 1), (2, 1, 0, 1)],
            true,
        ),
    }
}

impl PyramidModel {
    /// Freshly initialized model; bit-identical for equal configs.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gen = ParamStore::new();
        let n = config.n_styles();
        let normal = Normal::new(0.0f32, CODE_STD as f32).expect("valid std");
        let codes = gen.insert(
            "style_codes",
            Tensor::new(vec![n, CODE_DIM], (0..n * CODE_DIM).map(|_| normal.sample(&mut rng)).collect())?,
        )?;
        let same = ConvGeom::new(1, 1);
        let bw = config.backbone_width;
        let mut backbone = Vec::new();
        let mut cin = config.input_channels();
        for i in 0..3 {
            backbone.push(init_conv(&mut gen, &mut rng, &format!("backbone.{i}"), cin, bw, 3, same)?);
            cin = bw;
        }
        let mut gen_levels = Vec::new();
        for (level, &w) in config.levels().zip(&config.generator_widths) {
            let p = format!("gen.{level}");
            let conv0 = init_conv(&mut gen, &mut rng, &format!("{p}.conv0"), cin + PARITY_CHANNELS, w, 3, same)?;
            let conv1 = init_conv(&mut gen, &mut rng, &format!("{p}.conv1"), w, w, 3, same)?;
            let head = init_conv(&mut gen, &mut rng, &format!("{p}.head"), w, 1, 3, same)?;
            gen_levels.push(GenLevel { conv0, conv1, head });
            cin = w;
        }

        let mut disc = ParamStore::new();
        let dw = config.discriminator_width;
        let mut disc_levels = Vec::new();
        for level in config.levels() {
            let (recipe, upsample) = disc_recipe(receptive_field(config.k, level)?);
            let mut layers = Vec::new();
            let mut cin = 1;
            for (i, &(kernel, stride, lo, hi)) in recipe.iter().enumerate() {
                let geom = ConvGeom::asymmetric(stride, lo, hi);
                layers.push(init_conv(&mut disc, &mut rng, &format!("disc.{level}.{i}"), cin, dw, kernel, geom)?);
                cin = dw;
            }
            let out = init_conv(&mut disc, &mut rng, &format!("disc.{level}.out"), cin, n + 1, 1, ConvGeom::new(1, 0))?;
            layers.push(out);
            disc_levels.push(DiscLevel { layers, upsample });
        }

        Ok(Self {
            config,
            gen,
            disc,
            codes,
            backbone,
            gen_levels,
            disc_levels,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn k(&self) -> u32 {
        self.config.k
    }

    pub fn big_k(&self) -> u32 {
        self.config.big_k
    }

    pub fn n_styles(&self) -> usize {
        self.config.n_styles()
    }

    /// Index of the style-code table inside [`PyramidModel::gen`].
    pub fn codes_id(&self) -> usize {
        self.codes
    }

    fn check_level(&self, level: u32) -> Result<usize> {
        if !self.config.levels().contains(&level) {
            bail_arg!(
                "level {level} outside {}..={}",
                self.config.k + 1,
                self.config.big_k
            );
        }
        Ok((level - self.config.k - 1) as usize)
    }

    /// Receptive field of the discriminator at `level`, derived from its
    /// actual layer stack.
    pub fn analytic_receptive_field(&self, level: u32) -> Result<usize> {
        let d = &self.disc_levels[self.check_level(level)?];
        let (mut rf, mut jump) = (1usize, 1usize);
        for l in &d.layers {
            rf += (l.kernel - 1) * jump;
            jump *= l.geom.stride;
        }
        Ok(rf)
    }

    /// Builds the parameter-free input channels for `c`.
    pub fn assemble_input(&self, c: &CoarseInput) -> Result<GeneratorInput> {
        if c.log2() != self.config.k {
            bail_shape!("coarse input at 2^{}, model expects 2^{}", c.log2(), self.config.k);
        }
        let n = self.n_styles();
        let v = c.occ().len();
        let side = c.side();
        let parts = if self.config.use_part_labels { self.config.n_parts() } else { 0 };
        let mut fixed = vec![0.0f32; (1 + parts) * v];
        let mut code_rows = vec![None; v];
        for i in 0..v {
            if !c.is_occupied(i) {
                continue;
            }
            fixed[i] = 1.0;
            let s = c.labels().style()[i] as usize;
            if s == 0 || s > n {
                bail_arg!("style id {s} at voxel {i} is not in 1..={n}");
            }
            code_rows[i] = Some((s - 1) as u32);
            let p = c.labels().part()[i] as usize;
            if parts > 0 && p > 0 {
                if p > parts {
                    bail_arg!("part id {p} at voxel {i} is not in 1..={parts}");
                }
                fixed[p * v + i] = 1.0;
            }
        }
        Ok(GeneratorInput {
            log2: c.log2(),
            fixed: Tensor::new(vec![1 + parts, side, side, side], fixed)?,
            code_rows,
        })
    }

    /// Full input tensor `[1 + P + 8, s, s, s]` with the current codes.
    pub fn input_tensor(&self, input: &GeneratorInput) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let g = self.gen.bind(&mut tape, false)?;
        let x = self.input_on(&mut tape, &g, input)?;
        Ok(tape.value(x).clone())
    }

    fn input_on<T: Real>(&self, tape: &mut Tape<T>, g: &[Var], input: &GeneratorInput) -> Result<Var> {
        let side = 1usize << input.log2;
        let fixed = tape.constant(input.fixed.cast())?;
        let codes = tape.gather_rows(g[self.codes], input.code_rows.clone(), &[side, side, side])?;
        tape.concat(&[fixed, codes])
    }

    fn conv<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var, s: &ConvSlot) -> Result<Var> {
        tape.conv3d_geom(x, p[s.w], Some(p[s.b]), s.geom)
    }

    /// Records the generator up to `level` on `tape`, with `g` the bound
    /// generator parameters. Returns the occupancy taps `[1, 2^j, 2^j, 2^j]`
    /// for `j = k+1..=level`.
    pub fn generate_on<T: Real>(
        &self,
        tape: &mut Tape<T>,
        g: &[Var],
        input: &GeneratorInput,
        level: u32,
    ) -> Result<Vec<Var>> {
        self.generate_taps(tape, g, input, level, false)
    }

    /// [`PyramidModel::generate_on`], optionally cutting the gradient
    /// between consecutive levels so each level trains on a frozen view of
    /// the features below it.
    pub fn generate_taps<T: Real>(
        &self,
        tape: &mut Tape<T>,
        g: &[Var],
        input: &GeneratorInput,
        level: u32,
        detach_levels: bool,
    ) -> Result<Vec<Var>> {
        let last = self.check_level(level)?;
        if g.len() != self.gen.len() {
            bail_shape!("{} generator vars bound, model has {}", g.len(), self.gen.len());
        }
        let mut h = self.input_on(tape, g, input)?;
        for slot in &self.backbone {
            h = self.conv(tape, g, h, slot)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let mut outs = Vec::new();
        let mut side = 1usize << input.log2;
        for (i, lvl) in self.gen_levels[..=last].iter().enumerate() {
            side *= 2;
            if detach_levels && i > 0 {
                h = tape.stop_gradient(h)?;
            }
            let up = tape.nearest_upsample2(h)?;
            let parity = tape.constant(parity_channels(side).cast())?;
            h = tape.concat(&[up, parity])?;
            h = self.conv(tape, g, h, &lvl.conv0)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            h = self.conv(tape, g, h, &lvl.conv1)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            let o = self.conv(tape, g, h, &lvl.head)?;
            outs.push(tape.sigmoid(o)?);
        }
        Ok(outs)
    }

    /// Records the level-`level` discriminator on `x: [1, s, s, s]`.
    pub fn discriminate_on<T: Real>(&self, tape: &mut Tape<T>, d: &[Var], x: Var, level: u32) -> Result<Var> {
        let li = self.check_level(level)?;
        let side = 1usize << level;
        if tape.shape(x) != [1, side, side, side] {
            bail_shape!("discriminator {level} expects [1, {side}, {side}, {side}], got {:?}", tape.shape(x));
        }
        if d.len() != self.disc.len() {
            bail_shape!("{} discriminator vars bound, model has {}", d.len(), self.disc.len());
        }
        let dl = &self.disc_levels[li];
        let mut h = x;
        let (out, hidden) = dl.layers.split_last().expect("output layer");
        for slot in hidden {
            h = self.conv(tape, d, h, slot)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        h = self.conv(tape, d, h, out)?;
        if dl.upsample {
            h = tape.nearest_upsample2(h)?;
        }
        Ok(h)
    }

    /// Inference: detailized occupancy of `c` at `level`.
    pub fn generate(&self, c: &CoarseInput, level: u32) -> Result<OccupancyGrid> {
        let input = self.assemble_input(c)?;
        let mut tape = Tape::<f32>::new();
        let g = self.gen.bind(&mut tape, false)?;
        let outs = self.generate_on(&mut tape, &g, &input, level)?;
        let top = *outs.last().expect("at least one level");
        OccupancyGrid::from_values(level, tape.value(top).data().to_vec())
    }

    /// Inference: raw discriminator scores `[N + 1, s, s, s]`.
    pub fn discriminate(&self, grid: &OccupancyGrid, level: u32) -> Result<Tensor> {
        if grid.log2() != level {
            bail_shape!("grid at 2^{} for level {level}", grid.log2());
        }
        let s = grid.side();
        let mut tape = Tape::<f32>::new();
        let d = self.disc.bind(&mut tape, false)?;
        let x = tape.constant(Tensor::new(vec![1, s, s, s], grid.values().to_vec())?)?;
        let y = self.discriminate_on(&mut tape, &d, x, level)?;
        Ok(tape.value(y).clone())
    }

    /// Generator and discriminator parameters in one store, for checkpoints.
    pub fn merged_params(&self) -> Result<ParamStore> {
        let mut all = ParamStore::new();
        for (name, t) in self.gen.iter().chain(self.disc.iter()) {
            all.insert(name, t.clone())?;
        }
        Ok(all)
    }

    /// Replaces parameters from a merged store written by
    /// [`PyramidModel::merged_params`].
    pub fn load_merged(&mut self, all: &ParamStore) -> Result<()> {
        let mut gen = ParamStore::new();
        let mut disc = ParamStore::new();
        for (name, t) in all.iter() {
            let dst = if name.starts_with("disc.") { &mut disc } else { &mut gen };
            dst.insert(name, t.clone())?;
        }
        self.gen.load_from(&gen)?;
        self.disc.load_from(&disc)
    }
}

/// `[3, s, s, s]` constant channels: ±1 by parity of x, y and z.
pub fn parity_channels(side: usize) -> Tensor {
    let v = side * side * side;
    let mut data = vec![0.0f32; 3 * v];
    for i in 0..v {
        let (x, y, z) = (i % side, (i / side) % side, i / (side * side));
        for (c, a) in [x, y, z].into_iter().enumerate() {
            data[c * v + i] = if a % 2 == 0 { -1.0 } else { 1.0 };
        }
    }
    Tensor::new(vec![3, side, side, side], data).expect("sized")
}

#[cfg(test)]
mod tests;
