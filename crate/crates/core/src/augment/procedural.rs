//! Parametric exemplars for self-contained experiments.
//!
//! Every kind fills a segmented silhouette with a period-4 pattern. At
//! `K = 5` the silhouettes are laid out on multiples of 4, so each pattern
//! tiles them exactly and every 4³ block holds matter: the kinds differ
//! only in local detail, never in coarse structure.

use serde::{Deserialize, Serialize};

use crate::error::{bail_arg, Error, Result};
use crate::model::{StyleLibrary, StyleShape};
use crate::voxgrid::{linear_index, LabelGrid, OccupancyGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProceduralKind {
    /// Rods along all three axes.
    Lattice,
    /// Horizontal plates joined by vertical posts.
    Slats,
    Solid,
    /// Solid pierced by vertical square channels.
    Perforated,
}

impl ProceduralKind {
    pub const ALL: [ProceduralKind; 4] = [Self::Lattice, Self::Slats, Self::Solid, Self::Perforated];

    pub fn name(self) -> &'static str {
        match self {
            Self::Lattice => "lattice",
            Self::Slats => "slats",
            Self::Solid => "solid",
            Self::Perforated => "perforated",
        }
    }

    /// Pattern occupancy at lattice coordinates.
    pub fn pattern(self, x: usize, y: usize, z: usize) -> bool {
        let low = |a: usize| a % 4 < 2;
        match self {
            Self::Lattice => (low(x) as u8 + low(y) as u8 + low(z) as u8) >= 2,
            Self::Slats => low(y) || (low(x) && low(z)),
            Self::Solid => true,
            Self::Perforated => low(x) || low(z),
        }
    }
}

impl std::str::FromStr for ProceduralKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown procedural kind {s:?}")))
    }
}

pub const TWO_PART_VOCAB: [&str; 2] = ["lower", "upper"];
pub const FIVE_PART_VOCAB: [&str; 5] = ["legs", "seat", "back", "arm_left", "arm_right"];

type Box3 = ([usize; 2], [usize; 2], [usize; 2]);

/// Part boxes in 32-voxel units, `(x, y, z)` half-open ranges.
fn silhouette(parts: usize) -> Result<Vec<(u16, Box3)>> {
    match parts {
        2 => Ok(vec![
            (1, ([8, 24], [4, 16], [8, 24])),
            (2, ([4, 28], [16, 28], [4, 28])),
        ]),
        5 => {
            let mut v = Vec::new();
            for x in [[4, 8], [24, 28]] {
                for z in [[4, 8], [24, 28]] {
                    v.push((1, (x, [0, 16], z)));
                }
            }
            v.push((2, ([4, 28], [16, 20], [4, 28])));
            v.push((3, ([4, 28], [20, 32], [24, 28])));
            v.push((4, ([4, 8], [20, 24], [4, 24])));
            v.push((5, ([24, 28], [20, 24], [4, 24])));
            Ok(v)
        }
        _ => bail_arg!("procedural shapes have 2 or 5 parts, not {parts}"),
    }
}

/// Part vocabulary of the `parts`-part silhouette.
pub fn part_vocab(parts: usize) -> Result<Vec<String>> {
    match parts {
        2 => Ok(TWO_PART_VOCAB.iter().map(|s| s.to_string()).collect()),
        5 => Ok(FIVE_PART_VOCAB.iter().map(|s| s.to_string()).collect()),
        _ => bail_arg!("procedural shapes have 2 or 5 parts, not {parts}"),
    }
}

/// A `kind`-patterned silhouette at `2^big_k` with part labels and style
/// id `style` on every occupied voxel.
pub fn make_procedural_style(kind: ProceduralKind, big_k: u32, parts: usize, style: u16) -> Result<StyleShape> {
    if !(3..=6).contains(&big_k) {
        bail_arg!("procedural shapes support 2^3..2^6 resolutions, got 2^{big_k}");
    }
    let side = 1usize << big_k;
    let scale = |a: usize| a * side / 32;
    let boxes = silhouette(parts)?;
    let mut occ = OccupancyGrid::zeros(big_k)?;
    let mut labels = LabelGrid::empty(big_k)?;
    let mut values = occ.values().to_vec();
    for (part, (bx, by, bz)) in boxes {
        for z in scale(bz[0])..scale(bz[1]) {
            for y in scale(by[0])..scale(by[1]) {
                for x in scale(bx[0])..scale(bx[1]) {
                    let i = linear_index(side, x, y, z);
                    if kind.pattern(x, y, z) && values[i] == 0.0 {
                        values[i] = 1.0;
                        labels.part_mut()[i] = part;
                        labels.style_mut()[i] = style;
                    }
                }
            }
        }
    }
    occ = OccupancyGrid::from_values(big_k, values)?;
    Ok(StyleShape {
        name: kind.name().to_string(),
        occ,
        labels,
    })
}

/// Named procedural libraries: `toy<N>@K<K>` (2-part silhouettes) and
/// `chair<N>@K<K>` (5-part), with `N ≤ 4` kinds taken in the order
/// lattice, slats, solid, perforated.
pub fn procedural_library(name: &str) -> Result<StyleLibrary> {
    let bad = || Error::InvalidArgument(format!("unknown procedural set {name:?}"));
    let (head, k) = name.split_once("@K").ok_or_else(bad)?;
    let big_k: u32 = k.parse().map_err(|_| bad())?;
    let (parts, count) = if let Some(n) = head.strip_prefix("toy") {
        (2, n)
    } else if let Some(n) = head.strip_prefix("chair") {
        (5, n)
    } else {
        return Err(bad());
    };
    let n: usize = count.parse().map_err(|_| bad())?;
    if n == 0 || n > ProceduralKind::ALL.len() {
        return Err(bad());
    }
    let shapes = ProceduralKind::ALL[..n]
        .iter()
        .enumerate()
        .map(|(i, &kind)| make_procedural_style(kind, big_k, parts, i as u16 + 1))
        .collect::<Result<Vec<_>>>()?;
    StyleLibrary::new(shapes, part_vocab(parts)?)
}
