//! Value oracles and finite-difference gradient checks for every tape op.
//!
//! Value tests compare fused implementations against straightforward loop
//! re-computations or hand-derived numbers. Gradient tests use
//! `gradcheck::check_op`, which scalarizes the op output with random weights
//! and compares the reverse pass against central differences, so no analytic
//! code is trusted to check itself.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgm_core::gradcheck::check_op;
use sgm_core::tensor::{BnMode, BnStats, Tape, Tensor, Var};

const GRAD_SEEDS: [u64; 3] = [11, 23, 47];
/// Linear ops have no curvature, so a larger step just averages away
/// float noise; curved ops need a smaller one.
const H_LINEAR: f32 = 1e-2;
const H_CURVED: f32 = 1e-3;
/// Batch statistics couple every element; a mid-sized step keeps
/// cancellation noise well below tolerance without meaningful truncation.
const H_STAT: f32 = 4e-3;
const GRAD_TOL: f32 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn assert_close(got: &[f32], want: &[f32], tol: f32, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= tol,
            "{what}: element {i}: got {g}, want {w}"
        );
    }
}

/// Runs a gradient check over the standard seed set and asserts the error.
fn grad_ok<F>(mut builder: F, make_inputs: impl Fn(u64) -> Vec<Tensor>, h: f32, what: &str)
where
    F: FnMut(&mut Tape, &[Var]) -> sgm_core::Result<Var>,
{
    for seed in GRAD_SEEDS {
        let inputs = make_inputs(seed);
        let err = check_op(&mut builder, &inputs, seed, h).expect(what);
        assert!(err < GRAD_TOL, "{what}: rel err {err} at seed {seed}");
    }
}

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------

#[test]
fn matmul_by_identity_is_identity() {
    let mut t = Tape::new();
    let a = t.leaf(randn(&[4, 4], 1));
    let i = t.leaf(Tensor::eye(4));
    let y = t.matmul(a, i).unwrap();
    assert_eq!(t.value(y).data(), t.value(a).data());
}

#[test]
fn matmul_matches_hand_computed_product() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let b = t.leaf(Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap());
    let y = t.matmul(a, b).unwrap();
    assert_eq!(t.value(y).data(), &[58.0, 64.0, 139.0, 154.0]);
}

fn loop_matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Vec<f32> {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let av = |i: usize, l: usize| {
        if ta {
            a.data()[l * ac + i]
        } else {
            a.data()[i * ac + l]
        }
    };
    let bv = |l: usize, j: usize| {
        if tb {
            b.data()[j * bc + l]
        } else {
            b.data()[l * bc + j]
        }
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += (av(i, l) as f64) * (bv(l, j) as f64);
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

#[test]
fn matmul_variants_match_loop_oracle() {
    let a = randn(&[3, 5], 2);
    let b = randn(&[5, 4], 3);
    let bt = randn(&[4, 5], 4);
    let at = randn(&[5, 3], 5);

    let mut t = Tape::new();
    let (va, vb, vbt, vat) = (
        t.leaf(a.clone()),
        t.leaf(b.clone()),
        t.leaf(bt.clone()),
        t.leaf(at.clone()),
    );
    let nn = t.matmul(va, vb).unwrap();
    let nt = t.matmul_nt(va, vbt).unwrap();
    let tn = t.matmul_tn(vat, vb).unwrap();
    assert_close(t.value(nn).data(), &loop_matmul(&a, &b, false, false), 1e-5, "nn");
    assert_close(t.value(nt).data(), &loop_matmul(&a, &bt, false, true), 1e-5, "nt");
    assert_close(t.value(tn).data(), &loop_matmul(&at, &b, true, false), 1e-5, "tn");
}

#[test]
fn linear_matches_loop_oracle() {
    let x = randn(&[4, 3], 6);
    let w = randn(&[2, 3], 7);
    let b = randn(&[2], 8);
    let mut t = Tape::new();
    let (vx, vw, vb) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
    let y = t.linear(vx, vw, vb).unwrap();
    let mut want = loop_matmul(&x, &w, false, true);
    for row in want.chunks_exact_mut(2) {
        for (o, bias) in row.iter_mut().zip(b.data()) {
            *o += bias;
        }
    }
    assert_close(t.value(y).data(), &want, 1e-5, "linear");
}

#[test]
fn transpose_swaps_coordinates() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let y = t.transpose(x).unwrap();
    assert_eq!(t.value(y).shape(), [3, 2]);
    assert_eq!(t.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
}

#[test]
fn matmul_rejects_inner_dim_mismatch() {
    let mut t = Tape::new();
    let a = t.leaf(randn(&[2, 3], 1));
    let b = t.leaf(randn(&[4, 2], 1));
    assert!(t.matmul(a, b).is_err());
}

#[test]
fn gradients_add_scale_linear_matmuls() {
    grad_ok(
        |t, v| {
            let s = t.add(v[0], v[1])?;
            Ok(t.scale(s, -1.7))
        },
        |s| vec![randn(&[3, 4], s), randn(&[3, 4], s + 100)],
        H_LINEAR,
        "add+scale",
    );
    grad_ok(
        |t, v| t.linear(v[0], v[1], v[2]),
        |s| vec![randn(&[4, 3], s), randn(&[2, 3], s + 1), randn(&[2], s + 2)],
        H_LINEAR,
        "linear",
    );
    grad_ok(
        |t, v| t.matmul(v[0], v[1]),
        |s| vec![randn(&[3, 4], s), randn(&[4, 2], s + 1)],
        H_LINEAR,
        "matmul",
    );
    grad_ok(
        |t, v| t.matmul_nt(v[0], v[1]),
        |s| vec![randn(&[3, 4], s), randn(&[2, 4], s + 1)],
        H_LINEAR,
        "matmul_nt",
    );
    grad_ok(
        |t, v| t.matmul_tn(v[0], v[1]),
        |s| vec![randn(&[4, 3], s), randn(&[4, 2], s + 1)],
        H_LINEAR,
        "matmul_tn",
    );
    grad_ok(
        |t, v| t.transpose(v[0]),
        |s| vec![randn(&[3, 5], s)],
        H_LINEAR,
        "transpose",
    );
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Direct 3x3 same-padding convolution, no reuse of the im2col machinery.
fn loop_conv(x: &Tensor, w: &Tensor) -> Vec<f32> {
    let (b, c, h, wd) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    let o = w.shape()[0];
    let mut out = vec![0.0f32; b * o * h * wd];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = 0.0f64;
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((bi * c + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oi * c + ci) * 3 + ky) * 3 + kx];
                                acc += (xv as f64) * (wv as f64);
                            }
                        }
                    }
                    out[((bi * o + oi) * h + y) * wd + xx] = acc as f32;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_zero_input_gives_zero_output() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[1, 2, 4, 4]));
    let w = t.leaf(randn(&[3, 2, 3, 3], 9));
    let y = t.conv2d(x, w).unwrap();
    assert_eq!(t.value(y).shape(), [1, 3, 4, 4]);
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_center_tap_kernel_is_identity() {
    let mut t = Tape::new();
    let x = t.leaf(randn(&[1, 1, 5, 5], 10));
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0; // center tap
    let w = t.leaf(k);
    let y = t.conv2d(x, w).unwrap();
    assert_close(t.value(y).data(), t.value(x).data(), 1e-6, "center tap");
}

#[test]
fn conv2d_matches_direct_convolution() {
    let x = randn(&[2, 3, 5, 4], 11);
    let w = randn(&[4, 3, 3, 3], 12);
    let mut t = Tape::new();
    let (vx, vw) = (t.leaf(x.clone()), t.leaf(w.clone()));
    let y = t.conv2d(vx, vw).unwrap();
    assert_close(t.value(y).data(), &loop_conv(&x, &w), 1e-4, "conv");
}

#[test]
fn conv2d_accepts_single_image_rank3() {
    let x3 = randn(&[2, 4, 4], 13);
    let w = randn(&[3, 2, 3, 3], 14);
    let mut t = Tape::new();
    let (vx, vw) = (t.leaf(x3.clone()), t.leaf(w.clone()));
    let y = t.conv2d(vx, vw).unwrap();
    assert_eq!(t.value(y).shape(), [3, 4, 4]);
    let x4 = x3.reshaped(&[1, 2, 4, 4]).unwrap();
    assert_close(t.value(y).data(), &loop_conv(&x4, &w), 1e-4, "rank3 conv");
}

#[test]
fn gradients_conv2d() {
    grad_ok(
        |t, v| t.conv2d(v[0], v[1]),
        |s| vec![randn(&[2, 2, 4, 3], s), randn(&[3, 2, 3, 3], s + 1)],
        H_LINEAR,
        "conv2d",
    );
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[test]
fn batchnorm_train_constant_input_maps_to_shift() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(&[4, 2, 2, 2], 3.5));
    let g = t.leaf(Tensor::ones(&[2]));
    let b = t.leaf(Tensor::full(&[2], 0.25));
    let mut stats = BnStats::new(2);
    let y = t.batchnorm2d(x, g, b, &mut stats, BnMode::Train).unwrap();
    // Zero variance: every normalized value is 0, so the output is beta.
    assert_close(t.value(y).data(), &vec![0.25; 32], 1e-5, "const bn");
}

#[test]
fn batchnorm_train_normalizes_per_channel() {
    let x = randn(&[8, 3, 4, 4], 15);
    let mut t = Tape::new();
    let vx = t.leaf(x);
    let g = t.leaf(Tensor::ones(&[3]));
    let b = t.leaf(Tensor::zeros(&[3]));
    let mut stats = BnStats::new(3);
    let y = t.batchnorm2d(vx, g, b, &mut stats, BnMode::Train).unwrap();
    let out = t.value(y).data();
    let n = 8 * 16;
    for ch in 0..3 {
        let mut vals = Vec::with_capacity(n);
        for bi in 0..8 {
            let base = (bi * 3 + ch) * 16;
            vals.extend_from_slice(&out[base..base + 16]);
        }
        let mean: f64 = vals.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var: f64 =
            vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-3, "channel {ch} mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
    }
}

#[test]
fn batchnorm_eval_uses_running_stats() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![1, 1, 1, 2], vec![1.0, -2.0]).unwrap());
    let g = t.leaf(Tensor::full(&[1], 2.0));
    let b = t.leaf(Tensor::full(&[1], 0.5));
    let mut stats = BnStats::new(1);
    stats.mean[0] = 0.5;
    stats.var[0] = 4.0;
    let y = t.batchnorm2d(x, g, b, &mut stats, BnMode::Eval).unwrap();
    let inv = 1.0 / (4.0f32 + 1e-5).sqrt();
    let want = [(1.0 - 0.5) * inv * 2.0 + 0.5, (-2.0 - 0.5) * inv * 2.0 + 0.5];
    assert_close(t.value(y).data(), &want, 1e-6, "bn eval");
}

#[test]
fn batchnorm_fresh_stats_eval_divides_by_sqrt_one_plus_eps() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![1, 1, 1, 2], vec![3.0, -1.0]).unwrap());
    let g = t.leaf(Tensor::ones(&[1]));
    let b = t.leaf(Tensor::zeros(&[1]));
    let mut stats = BnStats::new(1);
    let y = t.batchnorm2d(x, g, b, &mut stats, BnMode::Eval).unwrap();
    let inv = 1.0 / (1.0f32 + 1e-5).sqrt();
    assert_close(t.value(y).data(), &[3.0 * inv, -inv], 1e-6, "fresh eval");
}

#[test]
fn batchnorm_train_updates_running_stats_unbiased() {
    let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
    let mut t = Tape::new();
    let vx = t.leaf(x);
    let g = t.leaf(Tensor::ones(&[1]));
    let b = t.leaf(Tensor::zeros(&[1]));
    let mut stats = BnStats::new(1);
    t.batchnorm2d(vx, g, b, &mut stats, BnMode::Train).unwrap();
    // Batch mean 2, biased var 1, unbiased var 2; momentum 0.1.
    assert!((stats.mean[0] - 0.2).abs() < 1e-6, "mean {}", stats.mean[0]);
    assert!((stats.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-6, "var {}", stats.var[0]);
}

#[test]
fn batchnorm_train_rejects_single_sample() {
    let mut t = Tape::new();
    let x = t.leaf(randn(&[1, 2, 1, 1], 16));
    let g = t.leaf(Tensor::ones(&[2]));
    let b = t.leaf(Tensor::zeros(&[2]));
    let mut stats = BnStats::new(2);
    assert!(t.batchnorm2d(x, g, b, &mut stats, BnMode::Train).is_err());
}

#[test]
fn gradients_batchnorm_train_and_eval() {
    grad_ok(
        |t, v| {
            let mut stats = BnStats::new(2);
            t.batchnorm2d(v[0], v[1], v[2], &mut stats, BnMode::Train)
        },
        |s| {
            vec![
                randn(&[3, 2, 2, 2], s),
                randn(&[2], s + 1),
                randn(&[2], s + 2),
            ]
        },
        H_STAT,
        "batchnorm train",
    );
    grad_ok(
        |t, v| {
            let mut stats = BnStats::new(2);
            stats.mean.copy_from_slice(&[0.3, -0.1]);
            stats.var.copy_from_slice(&[1.2, 0.8]);
            t.batchnorm2d(v[0], v[1], v[2], &mut stats, BnMode::Eval)
        },
        |s| {
            vec![
                randn(&[3, 2, 2, 2], s),
                randn(&[2], s + 1),
                randn(&[2], s + 2),
            ]
        },
        H_LINEAR,
        "batchnorm eval",
    );
}

// ---------------------------------------------------------------------------
// Pooling and pointwise ops
// ---------------------------------------------------------------------------

#[test]
fn maxpool_takes_window_maximum() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.maxpool2(x).unwrap();
    assert_eq!(t.value(y).shape(), [1, 1, 1]);
    assert_eq!(t.value(y).data(), &[4.0]);
}

#[test]
fn maxpool_tie_routes_gradient_to_first_element() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(&[1, 2, 2], 7.0).requires_grad());
    let y = t.maxpool2(x).unwrap();
    let s = t.reshape(y, &[1, 1]).unwrap();
    let z = t.leaf(Tensor::zeros(&[1, 1]));
    let loss = t.mse_loss(s, z).unwrap();
    t.backward(loss).unwrap();
    let g = t.grad(x).unwrap();
    assert!(g[0] != 0.0, "first element carries the gradient");
    assert_eq!(&g[1..], &[0.0, 0.0, 0.0], "ties resolve to the first index");
}

#[test]
fn maxpool_rejects_odd_extent() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[1, 3, 4]));
    assert!(t.maxpool2(x).is_err());
}

#[test]
fn relu_and_sigmoid_values() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![1, 3], vec![-2.0, 0.0, 3.0]).unwrap());
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 0.0, 3.0]);
    let s = t.sigmoid(x);
    let want = [1.0 / (1.0 + 2.0f32.exp()), 0.5, 1.0 / (1.0 + (-3.0f32).exp())];
    assert_close(t.value(s).data(), &want, 1e-6, "sigmoid");
}

/// Pool input with all window values separated enough that a finite
/// difference step cannot flip the argmax.
fn pool_safe_input(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let mut t = Tensor::zeros(shape);
    let n = t.numel();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let data = t.data_mut();
    for base in (0..n).step_by(h * w) {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut offsets = [0.0f32, 0.3, 0.6, 0.9];
                for i in (1..4).rev() {
                    offsets.swap(i, r.gen_range(0..=i));
                }
                let mut k = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        data[base + (2 * oy + dy) * w + 2 * ox + dx] =
                            offsets[k] + r.gen_range(0.0..0.1);
                        k += 1;
                    }
                }
            }
        }
    }
    t
}

#[test]
fn gradients_pool_relu_sigmoid() {
    grad_ok(
        |t, v| t.maxpool2(v[0]),
        |s| vec![pool_safe_input(&[1, 2, 4, 4], s)],
        H_LINEAR,
        "maxpool2",
    );
    grad_ok(
        |t, v| Ok(t.relu(v[0])),
        |s| {
            let mut x = randn(&[3, 4], s);
            for v in x.data_mut() {
                *v += 0.1 * v.signum(); // keep clear of the kink at 0
            }
            vec![x]
        },
        H_LINEAR,
        "relu",
    );
    grad_ok(
        |t, v| Ok(t.sigmoid(v[0])),
        |s| vec![randn(&[3, 4], s)],
        H_CURVED,
        "sigmoid",
    );
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

#[test]
fn softmax_uniform_logits_give_uniform_probabilities() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[1, 3]));
    let y = t.softmax(x, 1).unwrap();
    assert_close(t.value(y).data(), &[1.0 / 3.0; 3], 1e-7, "uniform softmax");
}

#[test]
fn softmax_survives_huge_logits() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![1, 3], vec![1000.0, 0.0, 0.0]).unwrap());
    let y = t.softmax(x, 1).unwrap();
    let out = t.value(y).data();
    assert!(out.iter().all(|v| v.is_finite()));
    assert_close(out, &[1.0, 0.0, 0.0], 1e-7, "saturated softmax");
}

#[test]
fn softmax_axis_zero_normalizes_columns() {
    let x = randn(&[4, 3], 17);
    let mut t = Tape::new();
    let vx = t.leaf(x);
    let y = t.softmax(vx, 0).unwrap();
    let out = t.value(y).data();
    for col in 0..3 {
        let sum: f32 = (0..4).map(|r| out[r * 3 + col]).sum();
        assert!((sum - 1.0).abs() < 1e-5, "column {col} sums to {sum}");
    }
}

#[test]
fn gradients_softmax_both_axes() {
    grad_ok(
        |t, v| t.softmax(v[0], 1),
        |s| vec![randn(&[3, 4], s)],
        H_CURVED,
        "softmax axis 1",
    );
    grad_ok(
        |t, v| t.softmax(v[0], 0),
        |s| vec![randn(&[3, 4], s)],
        H_CURVED,
        "softmax axis 0",
    );
}

proptest! {
    #[test]
    fn softmax_rows_are_probability_vectors(
        rows in 1usize..5,
        cols in 1usize..6,
        seed in 0u64..1000,
        scale in 0.1f32..100.0,
    ) {
        let mut r = rng(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| r.gen_range(-scale..scale)).collect();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![rows, cols], data).unwrap());
        let y = t.softmax(x, 1).unwrap();
        let out = t.value(y).data();
        for row in out.chunks_exact(cols) {
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn maxpool_matches_window_maxima(
        c in 1usize..3,
        oh in 1usize..4,
        ow in 1usize..4,
        seed in 0u64..1000,
    ) {
        let x = randn(&[c, oh * 2, ow * 2], seed);
        let mut t = Tape::new();
        let vx = t.leaf(x.clone());
        let y = t.maxpool2(vx).unwrap();
        let out = t.value(y).data();
        let (h, w) = (oh * 2, ow * 2);
        for ci in 0..c {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut want = f32::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            want = want.max(x.data()[ci * h * w + (2 * yy + dy) * w + 2 * xx + dx]);
                        }
                    }
                    prop_assert_eq!(out[ci * oh * ow + yy * ow + xx], want);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

#[test]
fn structural_ops_match_loop_oracles() {
    let x = randn(&[4, 3], 18);
    let mut t = Tape::new();
    let vx = t.leaf(x.clone());

    let gap_in = randn(&[2, 3, 2, 2], 19);
    let vg = t.leaf(gap_in.clone());
    let gap = t.global_avg_pool(vg).unwrap();
    let mut want = vec![0.0f32; 6];
    for bc in 0..6 {
        want[bc] = gap_in.data()[bc * 4..(bc + 1) * 4].iter().sum::<f32>() / 4.0;
    }
    assert_close(t.value(gap).data(), &want, 1e-6, "global_avg_pool");

    let idx = Arc::new(vec![2u32, 0, 2]);
    let gr = t.gather_rows(vx, idx).unwrap();
    let mut want = Vec::new();
    for &i in &[2usize, 0, 2] {
        want.extend_from_slice(&x.data()[i * 3..(i + 1) * 3]);
    }
    assert_eq!(t.value(gr).data(), &want[..]);

    let a = randn(&[2, 2], 20);
    let b = randn(&[2, 3], 21);
    let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
    let cc = t.concat_cols(&[va, vb]).unwrap();
    let mut want = Vec::new();
    for i in 0..2 {
        want.extend_from_slice(&a.data()[i * 2..(i + 1) * 2]);
        want.extend_from_slice(&b.data()[i * 3..(i + 1) * 3]);
    }
    assert_eq!(t.value(cc).data(), &want[..]);

    let scr = t.sum_chunk_rows(vx, 2).unwrap();
    let mut want = vec![0.0f32; 6];
    for g in 0..2 {
        for j in 0..3 {
            want[g * 3 + j] = x.data()[(2 * g) * 3 + j] + x.data()[(2 * g + 1) * 3 + j];
        }
    }
    assert_close(t.value(scr).data(), &want, 1e-6, "sum_chunk_rows");

    let row = randn(&[1, 3], 22);
    let vr = t.leaf(row.clone());
    let rep = t.repeat_row(vr, 3).unwrap();
    assert_eq!(t.value(rep).shape(), [3, 3]);
    assert_eq!(&t.value(rep).data()[3..6], row.data());

    let wcol = randn(&[4, 1], 23);
    let vw = t.leaf(wcol.clone());
    let rs = t.row_scale(vx, vw).unwrap();
    let mut want = vec![0.0f32; 12];
    for i in 0..4 {
        for j in 0..3 {
            want[i * 3 + j] = x.data()[i * 3 + j] * wcol.data()[i];
        }
    }
    assert_close(t.value(rs).data(), &want, 1e-6, "row_scale");
}

#[test]
fn gather_rows_rejects_out_of_range_index() {
    let mut t = Tape::new();
    let x = t.leaf(randn(&[3, 2], 24));
    assert!(t.gather_rows(x, Arc::new(vec![3])).is_err());
}

#[test]
fn reshape_preserves_data_and_checks_count() {
    let x = randn(&[2, 6], 25);
    let mut t = Tape::new();
    let vx = t.leaf(x.clone());
    let y = t.reshape(vx, &[3, 4]).unwrap();
    assert_eq!(t.value(y).shape(), [3, 4]);
    assert_eq!(t.value(y).data(), x.data());
    assert!(t.reshape(vx, &[5, 2]).is_err());
}

#[test]
fn gradients_structural_ops() {
    grad_ok(
        |t, v| t.global_avg_pool(v[0]),
        |s| vec![randn(&[2, 3, 2, 2], s)],
        H_LINEAR,
        "global_avg_pool",
    );
    grad_ok(
        |t, v| t.gather_rows(v[0], Arc::new(vec![2, 0, 2])),
        |s| vec![randn(&[3, 4], s)],
        H_LINEAR,
        "gather_rows with duplicates",
    );
    grad_ok(
        |t, v| t.concat_cols(&[v[0], v[1], v[2]]),
        |s| vec![randn(&[3, 2], s), randn(&[3, 3], s + 1), randn(&[3, 1], s + 2)],
        H_LINEAR,
        "concat_cols",
    );
    grad_ok(
        |t, v| t.sum_chunk_rows(v[0], 2),
        |s| vec![randn(&[6, 3], s)],
        H_LINEAR,
        "sum_chunk_rows",
    );
    grad_ok(
        |t, v| t.repeat_row(v[0], 4),
        |s| vec![randn(&[1, 5], s)],
        H_LINEAR,
        "repeat_row",
    );
    grad_ok(
        |t, v| t.reshape(v[0], &[6, 2]),
        |s| vec![randn(&[3, 4], s)],
        H_LINEAR,
        "reshape",
    );
    grad_ok(
        |t, v| t.row_scale(v[0], v[1]),
        |s| vec![randn(&[4, 3], s), randn(&[4, 1], s + 1)],
        H_LINEAR,
        "row_scale",
    );
}

// ---------------------------------------------------------------------------
// Losses and similarity
// ---------------------------------------------------------------------------

#[test]
fn cross_entropy_uniform_logits_equals_log_class_count() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[4, 6]));
    let loss = t.cross_entropy(x, Arc::new(vec![0, 1, 2, 3])).unwrap();
    assert!((t.value(loss).item() - (6.0f32).ln()).abs() < 1e-6);
}

#[test]
fn cross_entropy_confident_correct_prediction_is_near_zero() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![1, 3], vec![50.0, 0.0, 0.0]).unwrap());
    let loss = t.cross_entropy(x, Arc::new(vec![0])).unwrap();
    assert!(t.value(loss).item() < 1e-6);
}

#[test]
fn cross_entropy_reports_bad_label_with_sample_index() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2, 3]));
    let err = t.cross_entropy(x, Arc::new(vec![0, 7])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("7") && msg.contains("sample 1"), "{msg}");
}

#[test]
fn mse_matches_hand_computed_mean() {
    let mut t = Tape::new();
    let p = t.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let q = t.leaf(Tensor::new(vec![1, 3], vec![0.0, 2.0, 5.0]).unwrap());
    let loss = t.mse_loss(p, q).unwrap();
    assert!((t.value(loss).item() - (1.0 + 0.0 + 4.0) / 3.0).abs() < 1e-6);
}

#[test]
fn cosine_similarity_reference_points() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    let b = t.leaf(Tensor::new(vec![2], vec![3.0, 0.0]).unwrap());
    let c = t.leaf(Tensor::new(vec![2], vec![0.0, 2.0]).unwrap());
    let d = t.leaf(Tensor::new(vec![2], vec![-5.0, 0.0]).unwrap());
    let par = t.cosine_sim(a, b).unwrap();
    let orth = t.cosine_sim(a, c).unwrap();
    let anti = t.cosine_sim(a, d).unwrap();
    assert!((t.value(par).item() - 1.0).abs() < 1e-6);
    assert!(t.value(orth).item().abs() < 1e-7);
    assert!((t.value(anti).item() + 1.0).abs() < 1e-6);
}

#[test]
fn cosine_similarity_zero_vector_gives_zero_with_zero_gradient() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[3]).requires_grad());
    let b = t.leaf(randn(&[3], 26).requires_grad());
    let s = t.cosine_sim(a, b).unwrap();
    assert_eq!(t.value(s).item(), 0.0);
    t.backward(s).unwrap();
    assert!(t.grad(a).unwrap().iter().all(|&g| g == 0.0));
    assert!(t.grad(b).unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn gradients_losses_and_similarity() {
    grad_ok(
        |t, v| t.cross_entropy(v[0], Arc::new(vec![1, 0, 2, 2, 1])),
        |s| vec![randn(&[5, 3], s)],
        H_CURVED,
        "cross_entropy",
    );
    grad_ok(
        |t, v| t.mse_loss(v[0], v[1]),
        |s| vec![randn(&[3, 4], s), randn(&[3, 4], s + 1)],
        H_CURVED,
        "mse_loss",
    );
    grad_ok(
        |t, v| t.cosine_sim(v[0], v[1]),
        |s| {
            // Keep norms away from zero so the similarity stays smooth.
            let mut a = randn(&[7], s);
            let mut b = randn(&[7], s + 1);
            a.data_mut()[0] += 2.0;
            b.data_mut()[0] += 2.0;
            vec![a, b]
        },
        H_CURVED,
        "cosine_sim",
    );
}

// ---------------------------------------------------------------------------
// Composite behavior
// ---------------------------------------------------------------------------

/// A small network exercising most ops in one graph.
fn composite_graph(t: &mut Tape, v: &[Var]) -> sgm_core::Result<Var> {
    let conv = t.conv2d(v[0], v[1])?;
    let mut stats = BnStats::new(2);
    let bn = t.batchnorm2d(conv, v[2], v[3], &mut stats, BnMode::Train)?;
    let act = t.relu(bn);
    let pooled = t.maxpool2(act)?;
    let flat = t.reshape(pooled, &[2, 8])?;
    let lin = t.linear(flat, v[4], v[5])?;
    let sm = t.softmax(lin, 1)?;
    let target = t.constant(Tensor::full(&[2, 3], 1.0 / 3.0));
    t.mse_loss(sm, target)
}

fn composite_inputs(seed: u64) -> Vec<Tensor> {
    vec![
        randn(&[2, 1, 4, 4], seed),
        randn(&[2, 1, 3, 3], seed + 1),
        randn(&[2], seed + 2),
        randn(&[2], seed + 3),
        randn(&[3, 8], seed + 4),
        randn(&[3], seed + 5),
    ]
}

#[test]
fn gradients_flow_through_composite_network() {
    grad_ok(composite_graph, composite_inputs, H_CURVED, "composite");
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let inputs = composite_inputs(99);
        let vars: Vec<Var> = inputs.iter().map(|x| t.param(x)).collect();
        let loss = composite_graph(&mut t, &vars).unwrap();
        t.backward(loss).unwrap();
        let grads: Vec<Vec<u32>> = vars
            .iter()
            .map(|&v| t.grad(v).unwrap().iter().map(|g| g.to_bits()).collect())
            .collect();
        (t.value(loss).item().to_bits(), grads)
    };
    assert_eq!(run(), run(), "identical tapes must replay bit-identically");
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut t = Tape::new();
    let x = t.leaf(randn(&[2, 2], 27).requires_grad());
    let y = t.relu(x);
    assert!(t.backward(y).is_err());
}

#[test]
fn gradients_accumulate_across_shared_subexpressions() {
    // loss = mean((x + x)^2 approximated by mse against 0) -> grad = 8x/n.
    let x = Tensor::new(vec![1, 2], vec![1.5, -0.5]).unwrap();
    let mut t = Tape::new();
    let vx = t.param(&x);
    let s = t.add(vx, vx).unwrap();
    let zero = t.leaf(Tensor::zeros(&[1, 2]));
    let loss = t.mse_loss(s, zero).unwrap();
    t.backward(loss).unwrap();
    let g = t.grad(vx).unwrap();
    for (gi, xi) in g.iter().zip(x.data()) {
        assert!((gi - 4.0 * xi).abs() < 1e-6, "{gi} vs {}", 4.0 * xi);
    }
}
