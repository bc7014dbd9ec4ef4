#![allow(dead_code)]

use bgfd::dfc::DfcParams;
use bgfd::nn::{Conv2d, ParamStore};
use bgfd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4], scale: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Fresh DFC parameters with every weight and bias drawn uniformly from `±scale`.
pub fn random_dfc(seed: u64, channels: usize, scale: f64) -> (ParamStore, DfcParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = DfcParams::new(&mut store, &mut rng, "dfc", channels).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
    (store, p)
}

/// Per-pixel `W x + b` of a 1x1 convolution, evaluated directly.
pub fn pointwise(store: &ParamStore, conv: &Conv2d, f: &Tensor, n: usize, y: usize, x: usize) -> Vec<f64> {
    let w = store.get(conv.weight);
    let c_in = f.dims().c;
    (0..conv.out_channels)
        .map(|o| {
            let b = conv.bias.map_or(0.0, |b| store.get(b).data()[o]);
            b + (0..c_in).map(|i| w.data()[o * c_in + i] * f.at(n, i, y, x)).sum::<f64>()
        })
        .collect()
}

/// One residual criss-cross attention pass computed position by position:
/// the query at `(y, x)` attends over its whole row plus the rest of its column.
pub fn naive_gem_single(store: &ParamStore, p: &DfcParams, f: &Tensor) -> Tensor {
    let d = f.dims();
    let mut out = f.clone();
    for n in 0..d.n {
        for y in 0..d.h {
            for x in 0..d.w {
                let q = pointwise(store, &p.gem_q, f, n, y, x);
                let mut cross: Vec<(usize, usize)> = (0..d.w).map(|xx| (y, xx)).collect();
                cross.extend((0..d.h).filter(|&yy| yy != y).map(|yy| (yy, x)));
                let logits: Vec<f64> = cross
                    .iter()
                    .map(|&(yy, xx)| {
                        let k = pointwise(store, &p.gem_k, f, n, yy, xx);
                        k.iter().zip(&q).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (&(yy, xx), ei) in cross.iter().zip(&e) {
                    let v = pointwise(store, &p.gem_v, f, n, yy, xx);
                    for (c, vc) in v.iter().enumerate() {
                        let o = out.offset(n, c, y, x);
                        out.data_mut()[o] += ei / z * vc;
                    }
                }
            }
        }
    }
    out
}

/// A configuration small enough for every subcommand to finish in seconds.
pub const TINY_CONFIG: &str = r#"
seed = 4

[model]
channels = [4, 8, 8, 8]
stem_channels = 4
fpn_width = 8
decoder_width = 4

[optim]
iterations = 3
batch_size = 2

[synth]
count = 3
image_size = 32
object_size = [4, 12]

[ablation]
seeds = [0, 1]

[ablation.train]
count = 2
image_size = 32
object_size = [4, 12]
seed = 10

[ablation.test]
count = 2
image_size = 32
object_size = [4, 12]
gain = [1.3, 1.45]
bias = [20.0, 35.0]
seed = 20
"#;

/// Runs the command-line binary, panicking with its stderr on failure.
pub fn bgfd(args: &[&std::ffi::OsStr]) -> std::process::Output {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_bgfd"))
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    out
}

/// Every file under `dir` with its contents, keyed by relative path.
pub fn tree(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut files = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    files
}
