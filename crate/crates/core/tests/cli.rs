use std::path::Path;
use std::process::{Command, Output};

use voxstyle::mesh::parse_obj;
use voxstyle::trainer::{read_loss_csv, Checkpoint};
use voxstyle::voxgrid::{read_voxb, write_voxb, CoarseInput, LabelGrid, OccupancyGrid, VoxbFile};

fn voxstyle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxstyle"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY: &str = r#"
k = 2
K = 4
steps = 3
backbone_width = 4
generator_widths = [4, 4]
discriminator_width = 4
log_every = 0
"#;

fn coarse_block() -> CoarseInput {
    let occ = OccupancyGrid::from_fn(2, |x, y, z| x >= 1 && y <= 2 && z < 3).unwrap();
    let mut labels = LabelGrid::empty(2).unwrap();
    for i in 0..occ.len() {
        if occ.values()[i] > 0.0 {
            labels.style_mut()[i] = 1 + (i % 4 >= 2) as u16;
            labels.part_mut()[i] = 1;
        }
    }
    CoarseInput::new(occ, labels).unwrap()
}

#[test]
fn train_resume_detailize_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");

    assert_ok(&voxstyle(&["train", "--config", path(&cfg), "--out", path(&run), "--styles", "toy2@K4"]));
    assert_eq!(read_loss_csv(run.join("losses.csv")).unwrap().last().unwrap().step, 3);

    std::fs::write(&cfg, TINY.replace("steps = 3", "steps = 5")).unwrap();
    assert_ok(&voxstyle(&["train", "--config", path(&cfg), "--out", path(&run), "--resume"]));
    assert_eq!(Checkpoint::load(run.join("checkpoint")).unwrap().step, 5);

    let input = dir.path().join("in.voxb");
    write_voxb(&input, &VoxbFile::from_coarse(&coarse_block())).unwrap();
    let ckpt = run.join("checkpoint");
    let out_voxb = dir.path().join("gen").join("block.voxb");
    std::fs::create_dir_all(out_voxb.parent().unwrap()).unwrap();
    assert_ok(&voxstyle(&["detailize", "--ckpt", path(&ckpt), "--in", path(&input), "--out", path(&out_voxb)]));
    let file = read_voxb(&out_voxb).unwrap();
    assert_eq!(file.occ.side(), 16);
    assert_eq!(file.style.as_ref().map(Vec::len), Some(16 * 16 * 16));

    let out_obj = dir.path().join("block.obj");
    assert_ok(&voxstyle(&[
        "detailize", "--ckpt", path(&ckpt), "--in", path(&input), "--level", "3", "--out", path(&out_obj),
    ]));
    parse_obj(&std::fs::read_to_string(&out_obj).unwrap()).unwrap();

    let inputs = dir.path().join("inputs");
    std::fs::create_dir_all(&inputs).unwrap();
    std::fs::copy(&input, inputs.join("block.voxb")).unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"patch_side": 4, "probe_side": 2, "samples_per_shape": 50, "threshold": 0.8, "seed": 1}"#)
        .unwrap();
    let out = voxstyle(&[
        "evaluate",
        "--generated",
        path(out_voxb.parent().unwrap()),
        "--styles",
        "toy2@K4",
        "--spec",
        path(&spec),
        "--inputs",
        path(&inputs),
    ]);
    assert_ok(&out);
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "name,strict_iou,loose_iou,lp_iou,lp_fscore");
    assert!(lines[1].starts_with("block,"));
    assert!(lines[2].starts_with("mean,"));
    assert_eq!(lines.len(), 3);
}

#[test]
fn ablate_runs_selected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY.replace("steps = 3", "steps = 2")).unwrap();
    let grid = dir.path().join("grid.json");
    std::fs::write(
        &grid,
        r#"{"rows": ["a", "i"], "eval": {"samples": 2, "seed": 5, "patch": {"patch_side": 4, "probe_side": 2, "samples_per_shape": 20, "threshold": 0.8, "seed": 0}}}"#,
    )
    .unwrap();
    let out = voxstyle(&[
        "ablate",
        "--config",
        path(&cfg),
        "--grid",
        path(&grid),
        "--out",
        path(&dir.path().join("abl")),
        "--styles",
        "toy2@K4",
    ]);
    assert_ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("a,") && rows[1].starts_with("i,"), "{text}");
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "steps = \"many\"").unwrap();
    let out = voxstyle(&["train", "--config", path(&cfg), "--out", path(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let out = voxstyle(&["detailize", "--ckpt", path(&dir.path().join("missing")), "--in", "nope.voxb", "--out", "o.voxb"]);
    assert!(!out.status.success());
}
