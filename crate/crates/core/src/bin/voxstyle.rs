use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use voxstyle::augment::procedural_library;
use voxstyle::error::{Error, Result};
use voxstyle::mesh::{export_obj, marching_cubes, DEFAULT_ISO};
use voxstyle::metrics::{evaluate_generated, metric_csv, PatchSampleSpec, StylePatchBank};
use voxstyle::model::StyleLibrary;
use voxstyle::server::{serve, AppState};
use voxstyle::trainer::{
    run_ablation_grid, table3_variants, train, AblationVariant, Checkpoint, EvalConfig, TrainConfig, Trainer,
};
use voxstyle::voxgrid::{read_voxb, upsample_labels_nearest, write_voxb, VoxbFile};

#[derive(Parser)]
#[command(name = "voxstyle", version, about = "Exemplar-based voxel detailization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write losses.csv and checkpoint/ under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Procedural set name (e.g. toy4@K5) or a directory of VOXB styles.
        #[arg(long, default_value = "toy4@K5")]
        styles: String,
        /// Continue from --out/checkpoint (styles come from the checkpoint).
        #[arg(long)]
        resume: bool,
    },
    /// Detailize a coarse VOXB and write a VOXB or OBJ (by extension).
    Detailize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        level: Option<u32>,
        #[arg(long)]
        out: PathBuf,
        /// Style for inputs that carry no style labels.
        #[arg(long)]
        style: Option<u16>,
    },
    /// Train and evaluate a grid of ablation variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        #[arg(long, default_value = "toy4@K5")]
        styles: String,
    },
    /// Score generated VOXB shapes and write a metric CSV.
    Evaluate {
        /// Generated VOXB files or directories of them.
        #[arg(long, required = true, num_args = 1..)]
        generated: Vec<PathBuf>,
        /// Procedural set name or a directory of VOXB styles.
        #[arg(long)]
        styles: String,
        /// Patch sampling spec as JSON; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Directory of coarse inputs with the same file names; enables
        /// the IOU columns.
        #[arg(long)]
        inputs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|x| x == "toml") {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn load_styles(src: &str) -> Result<StyleLibrary> {
    if Path::new(src).is_dir() {
        StyleLibrary::load_dir(src)
    } else {
        procedural_library(src)
    }
}

fn voxb_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<_> = fs::read_dir(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "voxb"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Which variants to run. `rows` picks labelled rows `a`..`i` built from
/// the base flags; `variants` adds explicit flag sets.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GridFile {
    rows: Vec<String>,
    variants: Vec<AblationVariant>,
    eval: EvalConfig,
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, out, styles, resume } => {
            let cfg: TrainConfig = read_config(&config)?;
            if resume {
                let mut t = Trainer::resume(out.join("checkpoint"), cfg)?;
                t.run(Some(&out))?;
            } else {
                train(&cfg, &load_styles(&styles)?, Some(&out))?;
            }
            println!("{}", out.join("checkpoint").display());
        }
        Cmd::Detailize { ckpt, input, level, out, style } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let c = read_voxb(&input)?.into_coarse(style)?;
            let level = level.unwrap_or(ckpt.model.big_k());
            let g = ckpt.detailize(&c, level)?;
            if out.extension().is_some_and(|x| x == "obj") {
                export_obj(&marching_cubes(&g, DEFAULT_ISO)?, &out)?;
            } else {
                let factor = 1usize << (level - ckpt.model.k());
                let file = VoxbFile {
                    part: Some(upsample_labels_nearest(c.labels().part(), c.log2(), factor)?),
                    style: Some(upsample_labels_nearest(c.labels().style(), c.log2(), factor)?),
                    occ: g,
                };
                write_voxb(&out, &file)?;
            }
        }
        Cmd::Ablate { config, grid, out, styles } => {
            let cfg: TrainConfig = read_config(&config)?;
            let grid: GridFile = read_config(&grid)?;
            let lib = load_styles(&styles)?;
            let table = table3_variants(&cfg.flags);
            let mut variants = Vec::new();
            for label in &grid.rows {
                let v = table
                    .iter()
                    .find(|v| &v.label == label)
                    .ok_or_else(|| Error::Config(format!("unknown ablation row {label:?}")))?;
                variants.push(v.clone());
            }
            variants.extend(grid.variants);
            if variants.is_empty() {
                variants = table;
            }
            let rows = run_ablation_grid(&cfg, &lib, &variants, &grid.eval, Some(&out))?;
            for r in rows {
                println!("{}", r.to_csv());
            }
        }
        Cmd::Evaluate { generated, styles, spec, inputs, out } => {
            let spec: PatchSampleSpec = match spec {
                Some(p) => read_config(&p)?,
                None => PatchSampleSpec::default(),
            };
            spec.validate()?;
            let lib = load_styles(&styles)?;
            let grids: Vec<_> = lib.shapes().iter().map(|s| &s.occ).collect();
            let bank = StylePatchBank::new(&grids, spec.patch_side)?;
            let mut records = Vec::new();
            for path in voxb_files(&generated)? {
                let gen = read_voxb(&path)?.occ;
                let input = match &inputs {
                    Some(dir) => {
                        let p = dir.join(path.file_name().unwrap_or_default());
                        Some(read_voxb(&p)?.into_coarse(Some(1))?)
                    }
                    None => None,
                };
                let name = path.file_stem().unwrap_or_default().to_string_lossy();
                records.push(evaluate_generated(&name, &gen, input.as_ref(), &bank, &spec)?);
            }
            let csv = metric_csv(&records);
            match out {
                Some(p) => fs::write(&p, csv).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => print!("{csv}"),
            }
        }
        Cmd::Serve { ckpt, port, static_dir } => {
            let ckpt = ckpt.map(Checkpoint::load).transpose()?;
            if ckpt.is_none() {
                log::warn!("no checkpoint given; model endpoints will answer 503");
            }
            let state = AppState::new(ckpt)?;
            let addr = SocketAddr::from(([127, 0, 0, 1], port));
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| Error::Config(format!("tokio runtime: {e}")))?;
            rt.block_on(serve(state, addr, static_dir))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(n) = std::env::var("VOXSTYLE_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("VOXSTYLE_THREADS ignored: {e}");
                }
            }
            _ => log::warn!("VOXSTYLE_THREADS={n:?} is not a positive integer"),
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
