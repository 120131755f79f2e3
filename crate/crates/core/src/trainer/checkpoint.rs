//! Checkpoint directories:
//!
//! ```text
//! manifest.json      model layout, training config, library names, step, config hash
//! params.dckpt       generator and discriminator parameters
//! adam_gen.dckpt     generator optimizer moments ("m/<name>", "v/<name>")
//! adam_disc.dckpt    discriminator optimizer moments
//! styles/NN.voxb     the style shapes, in style order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validity_mask_values, TrainConfig, Trainer};
use crate::autonet::{read_dckpt, write_dckpt, Adam};
use crate::error::{bail_arg, bail_shape, Error, Result};
use crate::model::{LibraryInfo, ModelConfig, PyramidModel, StyleLibrary, StyleShape};
use crate::voxgrid::{read_voxb, write_voxb, CoarseInput, OccupancyGrid, VoxbFile};

const FORMAT: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.dckpt";
const ADAM_GEN: &str = "adam_gen.dckpt";
const ADAM_DISC: &str = "adam_disc.dckpt";
const STYLES: &str = "styles";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub library: LibraryInfo,
    pub step: u64,
    pub config_hash: String,
    pub adam_gen_t: u64,
    pub adam_disc_t: u64,
}

/// A trained model with everything needed to run or describe it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: PyramidModel,
    pub train: TrainConfig,
    pub library: StyleLibrary,
    pub step: u64,
    pub config_hash: String,
}

impl Checkpoint {
    /// Short identifier: config hash prefix and step.
    pub fn id(&self) -> String {
        format!("{}@{}", &self.config_hash[..12.min(self.config_hash.len())], self.step)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m = read_manifest(dir)?;
        let mut model = PyramidModel::new(m.model.clone())?;
        model.load_merged(&read_dckpt(dir.join(PARAMS))?)?;
        let library = read_styles(dir, &m.library)?;
        if m.train.config_hash(&library.info()) != m.config_hash {
            return Err(Error::Format(format!("{}: config hash does not match the manifest", dir.display())));
        }
        Ok(Self {
            model,
            train: m.train,
            library,
            step: m.step,
            config_hash: m.config_hash,
        })
    }

    /// Generator output at `level`, masked like in training when the run
    /// used the validity-mask baseline.
    pub fn detailize(&self, c: &CoarseInput, level: u32) -> Result<OccupancyGrid> {
        if c.log2() != self.model.k() {
            bail_shape!("input at 2^{}, checkpoint expects 2^{}", c.log2(), self.model.k());
        }
        if c.max_style() as usize > self.model.n_styles() {
            bail_arg!("style {} requested, checkpoint has {}", c.max_style(), self.model.n_styles());
        }
        let out = self.model.generate(c, level)?;
        if !self.train.flags.vanilla_mask_baseline {
            return Ok(out);
        }
        let mask = validity_mask_values(c, level)?;
        let values = out.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
        OccupancyGrid::from_values(level, values)
    }
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes)?;
    if m.format != FORMAT {
        return Err(Error::Format(format!("{}: unsupported checkpoint format {}", path.display(), m.format)));
    }
    Ok(m)
}

fn read_styles(dir: &Path, info: &LibraryInfo) -> Result<StyleLibrary> {
    let shapes = info
        .style_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let f = read_voxb(dir.join(STYLES).join(format!("{:02}.voxb", i + 1)))?;
            let labels = f.labels()?;
            Ok(StyleShape { name: name.clone(), occ: f.occ, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    StyleLibrary::new(shapes, info.part_vocab.clone())
}

pub(super) fn save_trainer(t: &Trainer, dir: &Path) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let styles = tmp.join(STYLES);
    fs::create_dir_all(&styles).map_err(|e| Error::io(&styles, e))?;
    let info = t.lib.info();
    let manifest = Manifest {
        format: FORMAT,
        model: t.model.config().clone(),
        train: t.cfg.clone(),
        library: info.clone(),
        step: t.step,
        config_hash: t.cfg.config_hash(&info),
        adam_gen_t: t.adam_g.state.t,
        adam_disc_t: t.adam_d.state.t,
    };
    let path = tmp.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    write_dckpt(tmp.join(PARAMS), &t.model.merged_params()?)?;
    write_dckpt(tmp.join(ADAM_GEN), &t.adam_g.moments_store(&t.model.gen)?)?;
    write_dckpt(tmp.join(ADAM_DISC), &t.adam_d.moments_store(&t.model.disc)?)?;
    for (i, s) in t.lib.shapes().iter().enumerate() {
        write_voxb(styles.join(format!("{:02}.voxb", i + 1)), &VoxbFile::with_labels(s.occ.clone(), &s.labels))?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub(super) fn resume_trainer(dir: &Path, cfg: TrainConfig) -> Result<Trainer> {
    let m = read_manifest(dir)?;
    let lib = read_styles(dir, &m.library)?;
    let hash = cfg.config_hash(&lib.info());
    if hash != m.config_hash {
        return Err(Error::Config(format!(
            "{}: checkpoint was written by a different configuration",
            dir.display()
        )));
    }
    let mut t = Trainer::new(cfg, lib)?;
    t.model.load_merged(&read_dckpt(dir.join(PARAMS))?)?;
    t.adam_g = Adam::from_moments(t.cfg.adam, m.adam_gen_t, &t.model.gen, &read_dckpt(dir.join(ADAM_GEN))?)?;
    t.adam_d = Adam::from_moments(t.cfg.adam, m.adam_disc_t, &t.model.disc, &read_dckpt(dir.join(ADAM_DISC))?)?;
    t.step = m.step;
    Ok(t)
}
