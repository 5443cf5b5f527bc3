use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore};

use super::*;

fn rand_map(b: usize, side: usize, c: usize, seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(&[b, side, side, c]), || rng.random_range(-1.0..1.0))
}

fn identity_params(store: &mut ParamStore, name: &str, dim: usize) -> SchemeParams {
    let mut eye = Array2::<f64>::zeros((dim, dim));
    for i in 0..dim {
        eye[(i, i)] = 1.0;
    }
    SchemeParams {
        proj: store.add(format!("{name}.proj"), eye.into_dyn(), true),
        pos: None,
    }
}

#[test]
fn patch_token_counts_match_stage_geometry() {
    // stage-1 and stage-4 geometries
    for (side, c, d, expect) in [(64usize, 4usize, 16usize, 1024usize), (8, 32, 128, 16)] {
        let geom = TokenGeometry { side, channels: c, p: 2, hv: 2 };
        let mut store = ParamStore::new();
        let params = init_scheme(&mut store, 1, "pe", geom.patch_dim(), d, geom.grid().pow(2), true);
        let mut g = Graph::new();
        let map = g.constant(rand_map(1, side, c, 3));
        let tokens = patch_embed(&mut g, &store, map, &geom, &params).unwrap();
        assert_eq!(g.shape(tokens.id), &[1, expect, d]);
        assert_eq!(tokens.descriptor.token_count(), expect);
    }
}

#[test]
fn identity_patch_embedding_yields_raw_tiles() {
    let geom = TokenGeometry { side: 4, channels: 2, p: 2, hv: 2 };
    let mut store = ParamStore::new();
    let params = identity_params(&mut store, "pe", geom.patch_dim());
    let map = rand_map(1, 4, 2, 5);
    let mut g = Graph::new();
    let m = g.constant(map.clone());
    let tokens = patch_embed(&mut g, &store, m, &geom, &params).unwrap();
    // token (r, c) equals the flattened tile at (r, c), order (dy, dx, ch)
    for r in 0..2 {
        for c in 0..2 {
            let token = r * 2 + c;
            for dy in 0..2 {
                for dx in 0..2 {
                    for ch in 0..2 {
                        let idx = (dy * 2 + dx) * 2 + ch;
                        assert_eq!(
                            g.value(tokens.id)[[0, token, idx]],
                            map[[0, 2 * r + dy, 2 * c + dx, ch]]
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn strip_counts_match_stage_geometry() {
    for (side, c, expect) in [(64usize, 4usize, 32usize), (8, 32, 4), (16, 16, 8)] {
        let geom = TokenGeometry { side, channels: c, p: 2, hv: 2 };
        let mut store = ParamStore::new();
        let h = init_scheme(&mut store, 1, "h", geom.strip_dim(), 16, geom.strips(), true);
        let v = init_scheme(&mut store, 1, "v", geom.strip_dim(), 16, geom.strips(), true);
        let mut g = Graph::new();
        let map = g.constant(rand_map(1, side, c, 7));
        let ht = hstrip_embed(&mut g, &store, map, &geom, &h).unwrap();
        let vt = vstrip_embed(&mut g, &store, map, &geom, &v).unwrap();
        assert_eq!(g.shape(ht.id), &[1, expect, 16]);
        assert_eq!(g.shape(vt.id), &[1, expect, 16]);
        assert_eq!(ht.descriptor, TokenDescriptor::HStrips { count: expect });
        assert_eq!(vt.descriptor, TokenDescriptor::VStrips { count: expect });
    }
}

#[test]
fn zero_map_yields_exactly_the_positional_table() {
    let geom = TokenGeometry { side: 8, channels: 2, p: 2, hv: 2 };
    let mut store = ParamStore::new();
    let params = init_scheme(&mut store, 9, "h", geom.strip_dim(), 6, geom.strips(), true);
    let table = store.get(params.pos.unwrap()).value.clone();
    let mut g = Graph::new();
    let map = g.constant(ArrayD::zeros(IxDyn(&[2, 8, 8, 2])));
    let tokens = hstrip_embed(&mut g, &store, map, &geom, &params).unwrap();
    for b in 0..2 {
        for t in 0..4 {
            for d in 0..6 {
                assert_eq!(g.value(tokens.id)[[b, t, d]], table[[t, d]]);
            }
        }
    }
}

#[test]
fn transposed_map_swaps_strip_schemes() {
    let geom = TokenGeometry { side: 6, channels: 2, p: 1, hv: 2 };
    let mut store = ParamStore::new();
    let shared = init_scheme(&mut store, 11, "s", geom.strip_dim(), 5, geom.strips(), false);
    // symmetric map: x[y][x] == x[x][y]
    let mut map = rand_map(1, 6, 2, 13);
    for y in 0..6 {
        for x in 0..y {
            for ch in 0..2 {
                let v = map[[0, y, x, ch]];
                map[[0, x, y, ch]] = v;
            }
        }
    }
    let mut g = Graph::new();
    let m = g.constant(map);
    let h = hstrip_embed(&mut g, &store, m, &geom, &shared).unwrap();
    let v = vstrip_embed(&mut g, &store, m, &geom, &shared).unwrap();
    for (a, b) in g.value(h.id).iter().zip(g.value(v.id).iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn broadcast_one_to_one_rows() {
    // 32 h-strips onto a 32x32 grid (p = hv): cell (r, c) holds strip r.
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data = ArrayD::from_shape_simple_fn(IxDyn(&[1, 32, 3]), || rng.random_range(-1.0..1.0));
    let strips = TokenSequence {
        id: g.constant(data.clone()),
        descriptor: TokenDescriptor::HStrips { count: 32 },
    };
    let grid = broadcast_strips(&mut g, &strips, 32, 32).unwrap();
    assert_eq!(g.shape(grid.id), &[1, 1024, 3]);
    for r in 0..32 {
        for c in 0..32 {
            for d in 0..3 {
                assert_eq!(g.value(grid.id)[[0, r * 32 + c, d]], data[[0, r, d]]);
            }
        }
    }
}

#[test]
fn broadcast_floor_maps_vertical_strips() {
    // 4 v-strips onto an 8x8 grid (p=1, hv=2): cell (r, c) holds strip c/2.
    let mut g = Graph::new();
    let data = ArrayD::from_shape_fn(IxDyn(&[1, 4, 1]), |ix| ix[1] as f64);
    let strips = TokenSequence {
        id: g.constant(data),
        descriptor: TokenDescriptor::VStrips { count: 4 },
    };
    let grid = broadcast_strips(&mut g, &strips, 8, 8).unwrap();
    for r in 0..8 {
        for c in 0..8 {
            assert_eq!(g.value(grid.id)[[0, r * 8 + c, 0]], (c / 2) as f64);
        }
    }
}

#[test]
fn broadcast_counting_identity_and_order() {
    // sum over the broadcast grid = cols * (sum over strips), per feature
    for (strips_n, rows) in [(8usize, 8usize), (4, 8), (8, 16), (2, 8)] {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let data =
            ArrayD::from_shape_simple_fn(IxDyn(&[1, strips_n, 2]), || rng.random_range(-1.0..1.0));
        let strips = TokenSequence {
            id: g.constant(data.clone()),
            descriptor: TokenDescriptor::HStrips { count: strips_n },
        };
        let cols = rows;
        let grid = broadcast_strips(&mut g, &strips, rows, cols).unwrap();
        for d in 0..2 {
            let strip_sum: f64 = (0..strips_n).map(|m| data[[0, m, d]]).sum();
            let grid_sum: f64 = (0..rows * cols)
                .map(|t| g.value(grid.id)[[0, t, d]])
                .sum();
            // every strip appears in rows/strips_n grid rows of `cols` cells
            let expect = strip_sum * (rows / strips_n) as f64 * cols as f64;
            assert!((grid_sum - expect).abs() < 1e-9);
        }
        // order preserved along the axis: strip indices are non-decreasing
        let mut last = 0.0;
        for r in 0..rows {
            let v = g.value(grid.id)[[0, r * cols, 0]];
            let idx = data
                .view()
                .into_shape_with_order((strips_n, 2))
                .unwrap()
                .rows()
                .into_iter()
                .position(|row| row[0] == v)
                .unwrap();
            assert!(idx as f64 >= last);
            last = idx as f64;
        }
    }
}

#[test]
fn broadcast_rejects_misalignment_and_wrong_descriptor() {
    let mut g = Graph::new();
    let strips = TokenSequence {
        id: g.constant(ArrayD::zeros(IxDyn(&[1, 3, 2]))),
        descriptor: TokenDescriptor::HStrips { count: 3 },
    };
    assert!(broadcast_strips(&mut g, &strips, 8, 8).is_err());
    let grid_seq = TokenSequence {
        id: g.constant(ArrayD::zeros(IxDyn(&[1, 4, 2]))),
        descriptor: TokenDescriptor::PatchGrid { rows: 2, cols: 2 },
    };
    assert!(broadcast_strips(&mut g, &grid_seq, 2, 2).is_err());
}

#[test]
fn patch_roundtrip_is_bit_exact_with_identity_projection() {
    let geom = TokenGeometry { side: 8, channels: 3, p: 2, hv: 2 };
    let mut store = ParamStore::new();
    let params = identity_params(&mut store, "pe", geom.patch_dim());
    let map = rand_map(2, 8, 3, 23);
    let mut g = Graph::new();
    let m = g.constant(map.clone());
    let tokens = patch_embed(&mut g, &store, m, &geom, &params).unwrap();
    let back = tokens_to_map(&mut g, &tokens, &geom).unwrap();
    assert_eq!(g.value(back), &map);
}

#[test]
fn tokens_to_map_shapes_and_unflatten() {
    // 1024 tokens, p=2, C=4 -> 64x64x4
    let geom = TokenGeometry { side: 64, channels: 4, p: 2, hv: 2 };
    let mut g = Graph::new();
    let tokens = TokenSequence {
        id: g.constant(ArrayD::zeros(IxDyn(&[1, 1024, 16]))),
        descriptor: TokenDescriptor::PatchGrid { rows: 32, cols: 32 },
    };
    let map = tokens_to_map(&mut g, &tokens, &geom).unwrap();
    assert_eq!(g.shape(map), &[1, 64, 64, 4]);

    // single token [1,2,3,4], p=2, C=1 -> [[1,2],[3,4]]
    let geom = TokenGeometry { side: 2, channels: 1, p: 2, hv: 1 };
    let mut g = Graph::new();
    let tokens = TokenSequence {
        id: g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 4]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        ),
        descriptor: TokenDescriptor::PatchGrid { rows: 1, cols: 1 },
    };
    let map = tokens_to_map(&mut g, &tokens, &geom).unwrap();
    assert_eq!(g.value(map)[[0, 0, 0, 0]], 1.0);
    assert_eq!(g.value(map)[[0, 0, 1, 0]], 2.0);
    assert_eq!(g.value(map)[[0, 1, 0, 0]], 3.0);
    assert_eq!(g.value(map)[[0, 1, 1, 0]], 4.0);

    // dim mismatch is a configuration error
    let geom = TokenGeometry { side: 2, channels: 2, p: 2, hv: 1 };
    let mut g = Graph::new();
    let tokens = TokenSequence {
        id: g.constant(ArrayD::zeros(IxDyn(&[1, 1, 4]))),
        descriptor: TokenDescriptor::PatchGrid { rows: 1, cols: 1 },
    };
    assert!(matches!(
        tokens_to_map(&mut g, &tokens, &geom),
        Err(Error::Config(_))
    ));
}

#[test]
fn embedding_is_linear_without_positional() {
    let geom = TokenGeometry { side: 8, channels: 2, p: 2, hv: 2 };
    let mut store = ParamStore::new();
    let params = init_scheme(&mut store, 29, "pe", geom.patch_dim(), 6, geom.grid().pow(2), false);
    let map = rand_map(1, 8, 2, 31);
    let run = |m: ArrayD<f64>| {
        let mut g = Graph::new();
        let node = g.constant(m);
        let tokens = patch_embed(&mut g, &store, node, &geom, &params).unwrap();
        g.value(tokens.id).clone()
    };
    let base = run(map.clone());
    let scaled = run(&map * 3.5);
    for (a, b) in scaled.iter().zip(base.iter()) {
        assert!((a - 3.5 * b).abs() < 1e-9);
    }
}

#[test]
fn geometry_validation_catches_misalignment() {
    assert!(TokenGeometry { side: 64, channels: 4, p: 2, hv: 2 }.validate().is_ok());
    assert!(TokenGeometry { side: 64, channels: 4, p: 3, hv: 2 }.validate().is_err());
    assert!(TokenGeometry { side: 64, channels: 4, p: 2, hv: 5 }.validate().is_err());
    // p and hv both divide the side but are not multiples of each other
    assert!(TokenGeometry { side: 24, channels: 4, p: 8, hv: 6 }.validate().is_err());
    // every pair from the sweep {2,4,8} x {1,2,4} aligns
    for p in [2usize, 4, 8] {
        for hv in [1usize, 2, 4] {
            assert!(
                TokenGeometry { side: 64, channels: 4, p, hv }.validate().is_ok(),
                "p={p} hv={hv}"
            );
        }
    }
}
