//! Independent reference implementations shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamGroup, Scalar, Tensor};
use crate::mixup::{make_mix_batch, MixBatch};
use crate::network::{Activation, NetConfig, Network, StageSpec};

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct nested-loop cross-correlation; independent of the im2col kernel.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * co * ho * wo];
    for s in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for a in 0..kh {
                            for bb in 0..kw {
                                let ii = (i * stride + a) as i64 - pad as i64;
                                let jj = (j * stride + bb) as i64 - pad as i64;
                                if ii < 0 || jj < 0 || ii >= h as i64 || jj >= wd as i64 {
                                    continue;
                                }
                                acc += xd[((s * ci + c) * h + ii as usize) * wd + jj as usize]
                                    * wdat[((o * ci + c) * kh + a) * kw + bb];
                            }
                        }
                    }
                    out[((s * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out).unwrap()
}

pub fn matmul_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[0];
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for o in 0..m {
            let mut acc = 0.0;
            for j in 0..k {
                acc += x.data()[i * k + j] * w.data()[o * k + j];
            }
            out[i * m + o] = acc + b.data()[o];
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}


/// Mean-over-plane of `[N,C,H,W]`.
pub fn gap_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, plane) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    Tensor::from_fn(&[n, c], |i| x.data()[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64)
}

pub fn relu_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}

/// Two-stage net small enough for exhaustive finite differences.
pub fn toy_net_config() -> NetConfig {
    NetConfig {
        in_channels: 3,
        input_height: 6,
        input_width: 6,
        stages: vec![StageSpec::new(3, 1, false), StageSpec::new(4, 1, true)],
        num_classes: 3,
        disc_hidden: 4,
        residual: false,
        activation: Activation::Relu,
    }
}

/// Random pair batch in `[0,1]` with `xj` a row permutation of `xi`.
pub fn toy_mix(cfg: &NetConfig, n: usize, lambda: f64, seed: u64) -> MixBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = Tensor::from_fn(&[n, cfg.in_channels, cfg.input_height, cfg.input_width], |_| rng.random_range(0.0..1.0));
    let yi: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    let perm: Vec<usize> = (0..n).map(|r| (r + 1) % n).collect();
    let xj = xi.select_rows(&perm).unwrap();
    let yj = perm.iter().map(|&p| yi[p]).collect();
    let mut mix = make_mix_batch(xi, xj, yi, yj, lambda, cfg.num_classes).unwrap();
    mix.perm = Some(perm);
    mix
}

pub fn zero_group<T: Scalar>(net: &mut Network<T>, group: ParamGroup) {
    for id in net.params.ids_in(group) {
        net.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
}

pub fn log_softmax_oracle(row: &[f64], t: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / t;
    let lse = row.iter().map(|v| (v / t - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|v| v / t - lse).collect()
}

/// Batch-mean soft-target cross-entropy.
pub fn ce_oracle(logits: &Tensor<f64>, target: &Tensor<f64>) -> f64 {
    let n = logits.batch();
    (0..n)
        .map(|i| {
            let ls = log_softmax_oracle(logits.row(i), 1.0);
            -ls.iter().zip(target.row(i)).map(|(l, t)| l * t).sum::<f64>()
        })
        .sum::<f64>()
        / n as f64
}

/// Batch-mean `KL(softmax(teacher/T) ‖ softmax(student/T))`, unscaled.
pub fn kl_oracle(student: &Tensor<f64>, teacher: &Tensor<f64>, t: f64) -> f64 {
    let n = student.batch();
    (0..n)
        .map(|i| {
            let ls = log_softmax_oracle(student.row(i), t);
            let lt = log_softmax_oracle(teacher.row(i), t);
            lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum::<f64>()
        })
        .sum::<f64>()
        / n as f64
}
