mod common;

use bgfd::dfc::{dem, dfc, gem, gem_single};
use bgfd::nn::Session;
use common::{naive_gem_single, random_dfc, random_tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn gem_single_matches_naive_loop() {
    for seed in 0..3 {
        for (h, w, c) in [(1, 1, 1), (1, 4, 2), (3, 1, 3), (4, 5, 4), (5, 5, 2)] {
            let (store, p) = random_dfc(seed, c, 0.8);
            let f = random_tensor(&mut ChaCha8Rng::seed_from_u64(seed + 100), [2, c, h, w], 1.0);
            let mut s = Session::new(&store, false);
            let fv = s.graph.constant(f.clone());
            let y = gem_single(&mut s, fv, &p).unwrap();
            let diff = s.graph.value(y).max_abs_diff(&naive_gem_single(&store, &p, &f)).unwrap();
            assert!(diff < 1e-9, "h={h} w={w} c={c}: {diff}");
        }
    }
}

#[test]
fn zero_kernels_reduce_to_identity_and_zero() {
    let (mut store, p) = random_dfc(7, 3, 0.5);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let f = random_tensor(&mut ChaCha8Rng::seed_from_u64(1), [2, 3, 4, 3], 2.0);
    let mut s = Session::new(&store, false);
    let fv = s.graph.constant(f.clone());
    let g = gem(&mut s, fv, &p).unwrap();
    let d = dem(&mut s, fv, &p).unwrap();
    let both = dfc(&mut s, fv, &p).unwrap();
    assert_eq!(s.graph.value(g), &f);
    assert!(s.graph.value(d).data().iter().all(|&v| v == 0.0));
    assert!(s.graph.value(both).data().iter().all(|&v| v == 0.0));
}

#[test]
fn shapes_are_preserved() {
    let (store, p) = random_dfc(3, 4, 0.3);
    for dims in [[1, 4, 1, 1], [2, 4, 3, 5], [3, 4, 6, 2]] {
        let f = random_tensor(&mut ChaCha8Rng::seed_from_u64(9), dims, 1.0);
        let mut s = Session::new(&store, false);
        let fv = s.graph.constant(f.clone());
        for v in [
            dem(&mut s, fv, &p).unwrap(),
            gem(&mut s, fv, &p).unwrap(),
            dfc(&mut s, fv, &p).unwrap(),
        ] {
            assert_eq!(s.graph.value(v).dims(), f.dims());
        }
    }
}

#[test]
fn channel_mismatch_is_rejected() {
    let (store, p) = random_dfc(0, 4, 0.3);
    let mut s = Session::new(&store, false);
    let fv = s.graph.constant(bgfd::Tensor::zeros([1, 3, 2, 2]));
    assert!(gem(&mut s, fv, &p).is_err());
    assert!(dem(&mut s, fv, &p).is_err());
}
