use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(log2: u32, occupied: &[[usize; 3]]) -> OccupancyGrid {
    OccupancyGrid::from_fn(log2, |x, y, z| occupied.contains(&[x, y, z])).unwrap()
}

/// Connected components of the triangle adjacency graph.
fn components(m: &TriMesh) -> usize {
    let mut parent: Vec<usize> = (0..m.vertices.len()).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for t in &m.triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2])] {
            let (ra, rb) = (find(&mut parent, a as usize), find(&mut parent, b as usize));
            parent[ra] = rb;
        }
    }
    let mut roots: Vec<usize> = m.triangles.iter().map(|t| find(&mut parent, t[0] as usize)).collect();
    roots.sort_unstable();
    roots.dedup();
    roots.len()
}

#[test]
fn empty_grid_gives_empty_mesh() {
    let m = marching_cubes(&OccupancyGrid::zeros(3).unwrap(), 0.5).unwrap();
    assert!(m.is_empty() && m.vertices.is_empty());
    assert_eq!(obj_string(&m), "# voxstyle mesh\n");
}

#[test]
fn single_voxel_is_a_closed_sphere() {
    let values: Vec<f32> = (0..27).map(|i| if i == 13 { 1.0 } else { 0.0 }).collect();
    let m = marching_cubes_field([3, 3, 3], &values, 0.5).unwrap();
    assert_eq!(m.vertices.len(), 6);
    assert_eq!(m.triangles.len(), 8);
    assert!(m.is_watertight());
    assert_eq!(m.euler_characteristic(), 2);
    assert!(m.signed_volume() > 0.0);
}

#[test]
fn two_adjacent_voxels_form_one_component() {
    let m = marching_cubes(&grid(2, &[[1, 1, 1], [2, 1, 1]]), 0.5).unwrap();
    assert!(m.is_watertight());
    assert_eq!(m.euler_characteristic(), 2);
    assert_eq!(components(&m), 1);
}

#[test]
fn boundary_voxels_close_through_padding() {
    let full = OccupancyGrid::filled(2, 1.0).unwrap();
    let m = marching_cubes(&full, 0.5).unwrap();
    assert!(m.is_watertight());
    assert_eq!(m.euler_characteristic(), 2);
    let lo = m.vertices.iter().flatten().fold(f64::MAX, |a, &b| a.min(b));
    let hi = m.vertices.iter().flatten().fold(f64::MIN, |a, &b| a.max(b));
    assert_eq!((lo, hi), (-0.5, 3.5));
}

#[test]
fn vertices_sit_on_lattice_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = OccupancyGrid::from_fn(3, |_, _, _| rng.random_bool(0.4)).unwrap();
    let m = marching_cubes(&g, 0.5).unwrap();
    for v in &m.vertices {
        let integral = v.iter().filter(|c| (*c - c.round()).abs() < 1e-9).count();
        assert_eq!(integral, 2, "{v:?}");
    }
}

#[test]
fn interpolation_is_linear() {
    let mut values = vec![0.0f32; 8];
    values[0] = 0.8;
    let m = marching_cubes_field([2, 2, 2], &values, 0.6).unwrap();
    // along +x from voxel 0 (0.8) to voxel 1 (0.0): t = 0.2 / 0.8
    assert!(m.vertices.iter().any(|v| (v[0] - 0.25).abs() < 1e-6 && v[1] == 0.0 && v[2] == 0.0));
    assert!(m.is_watertight());
}

#[test]
fn random_grids_are_watertight_and_outward() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..20 {
        let p = rng.random_range(0.1..0.9);
        let g = OccupancyGrid::from_fn(3, |_, _, _| rng.random_bool(p)).unwrap();
        let m = marching_cubes(&g, 0.5).unwrap();
        assert!(m.is_watertight());
        assert!(m.signed_volume() > 0.0);
        assert!(m.triangles.iter().all(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2]));
    }
}

#[test]
fn output_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = OccupancyGrid::from_fn(4, |_, _, _| rng.random_bool(0.5)).unwrap();
    assert_eq!(marching_cubes(&g, 0.5).unwrap(), marching_cubes(&g, 0.5).unwrap());
}

#[test]
fn rejects_bad_iso_and_shapes() {
    let g = OccupancyGrid::zeros(1).unwrap();
    assert!(marching_cubes(&g, 0.0).is_err());
    assert!(marching_cubes(&g, 1.0).is_err());
    assert!(marching_cubes_field([2, 2, 2], &[0.0; 7], 0.5).is_err());
}

#[test]
fn obj_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = OccupancyGrid::from_fn(3, |_, _, _| rng.random_bool(0.5)).unwrap();
    let values: Vec<f32> = g.values().iter().map(|&v| if v > 0.0 { 0.9 } else { 0.13 }).collect();
    let m = marching_cubes_field([8, 8, 8], &values, 0.37).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.obj");
    export_obj(&m, &path).unwrap();
    let back = parse_obj(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back.triangles, m.triangles);
    assert_eq!(back.vertices.len(), m.vertices.len());
    for (a, b) in back.vertices.iter().zip(&m.vertices) {
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-5);
        }
    }
    assert!(obj_string(&m).lines().nth(1).unwrap().split(' ').skip(1).all(|c| c.split('.').nth(1).unwrap().len() == 6));
}

#[test]
fn parse_obj_rejects_bad_faces() {
    assert!(parse_obj("v 0 0 0\nf 1 2 3\n").is_err());
    assert!(parse_obj("f 0 1 1\n").is_err());
    let m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/1 2/2 3/3\n").unwrap();
    assert_eq!(m.triangles, [[0, 1, 2]]);
}

#[test]
fn regions_follow_the_coarse_styles() {
    use crate::voxgrid::{upsample_nearest, LabelGrid};
    let occ = OccupancyGrid::from_fn(2, |_, y, z| (1..3).contains(&y) && (1..3).contains(&z)).unwrap();
    let mut labels = LabelGrid::empty(2).unwrap();
    for i in 0..64 {
        if occ.values()[i] > 0.0 {
            labels.style_mut()[i] = if i % 4 < 2 { 1 } else { 2 };
        }
    }
    let c = CoarseInput::new(occ.clone(), labels).unwrap();
    let fine = upsample_nearest(&occ, 4).unwrap();
    let mut m = marching_cubes(&fine, 0.5).unwrap();
    m.assign_regions(&c, 4).unwrap();
    let r = m.regions.as_ref().unwrap();
    assert_eq!(r.len(), m.vertices.len());
    for (v, &s) in m.vertices.iter().zip(r) {
        if v[0] < 7.0 {
            assert_eq!(s, 1);
        } else if v[0] > 8.0 {
            assert_eq!(s, 2);
        }
    }
    let p = m.payload();
    assert_eq!(p.vertices.len(), 3 * m.vertices.len());
    assert_eq!(p.triangles.len(), 3 * m.triangles.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn binary_meshes_are_closed(bits in proptest::collection::vec(any::<bool>(), 64)) {
        let g = OccupancyGrid::from_values(2, bits.iter().map(|&b| b as u8 as f32).collect()).unwrap();
        let m = marching_cubes(&g, 0.5).unwrap();
        prop_assert!(m.is_watertight());
        prop_assert!(m.is_empty() || m.signed_volume() > 0.0);
    }
}
