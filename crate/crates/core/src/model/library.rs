use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, bail_shape, Error, Result};
use crate::voxgrid::{read_voxb, LabelGrid, OccupancyGrid};

/// Optional part vocabulary file inside a style directory.
pub const PARTS_FILE: &str = "parts.txt";

/// One segmented high-resolution exemplar.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleShape {
    pub name: String,
    pub occ: OccupancyGrid,
    pub labels: LabelGrid,
}

/// The exemplar set a model is trained on. Style `i` (1-based) is
/// `shapes[i - 1]`; its latent code lives in the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleLibrary {
    shapes: Vec<StyleShape>,
    part_vocab: Vec<String>,
}

/// Names needed to reconstruct a library's layout without its voxels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryInfo {
    pub style_names: Vec<String>,
    pub part_vocab: Vec<String>,
}

impl StyleLibrary {
    /// Checks that all shapes share a resolution, are binary and only use
    /// part ids from the vocabulary (id `p` names `part_vocab[p - 1]`).
    pub fn new(shapes: Vec<StyleShape>, part_vocab: Vec<String>) -> Result<Self> {
        let Some(first) = shapes.first() else {
            bail_arg!("a style library needs at least one shape");
        };
        let log2 = first.occ.log2();
        for s in &shapes {
            if s.occ.log2() != log2 || s.labels.log2() != log2 {
                bail_shape!("style {:?} is not at resolution 2^{log2}", s.name);
            }
            if !s.occ.is_binary() {
                bail_arg!("style {:?} is not binary", s.name);
            }
            if let Some(&p) = s.labels.part().iter().find(|&&p| p as usize > part_vocab.len()) {
                bail_arg!("style {:?} uses part id {p} outside the vocabulary", s.name);
            }
            if s.occ.count_above(0.0) == 0 {
                bail_arg!("style {:?} is empty", s.name);
            }
        }
        if shapes.len() > u16::MAX as usize {
            bail_arg!("too many styles");
        }
        Ok(Self { shapes, part_vocab })
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn log2(&self) -> u32 {
        self.shapes[0].occ.log2()
    }

    pub fn shapes(&self) -> &[StyleShape] {
        &self.shapes
    }

    /// Shape of 1-based style id `style`.
    pub fn shape(&self, style: u16) -> Option<&StyleShape> {
        (style as usize).checked_sub(1).and_then(|i| self.shapes.get(i))
    }

    pub fn part_vocab(&self) -> &[String] {
        &self.part_vocab
    }

    pub fn info(&self) -> LibraryInfo {
        LibraryInfo {
            style_names: self.shapes.iter().map(|s| s.name.clone()).collect(),
            part_vocab: self.part_vocab.clone(),
        }
    }

    /// Reads every `*.voxb` in `dir`, in file-name order, as one style
    /// named after the file stem. Part names come from `parts.txt` (one per
    /// line) when present, otherwise `part1..partP`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "voxb"))
            .collect();
        paths.sort();
        let shapes = paths
            .iter()
            .map(|p| {
                let file = read_voxb(p)?;
                let labels = file.labels()?;
                let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                Ok(StyleShape { name, occ: file.occ, labels })
            })
            .collect::<Result<Vec<_>>>()?;
        let parts_path = dir.join(PARTS_FILE);
        let part_vocab = if parts_path.exists() {
            fs::read_to_string(&parts_path)
                .map_err(|e| Error::io(&parts_path, e))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect()
        } else {
            let max = shapes.iter().flat_map(|s| s.labels.part().iter().copied()).max().unwrap_or(0);
            (1..=max).map(|p| format!("part{p}")).collect()
        };
        Self::new(shapes, part_vocab)
    }
}
