//! Mixup draws and linear interpolation of images, labels, features and logits.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{config_err, shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MixupConfig {
    /// Beta(α, α) concentration.
    pub alpha: f64,
    /// Draw one λ per sample instead of one per batch.
    pub per_sample_lambda: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            alpha: 0.4,
            per_sample_lambda: false,
        }
    }
}

/// λ ~ Beta(α, α) as `X / (X + Y)` with `X, Y ~ Gamma(α, 1)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(config_err!("mixup alpha must be positive and finite, got {alpha}"));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| config_err!("gamma({alpha}): {e}"))?;
    loop {
        let x = gamma.sample(rng);
        let y = gamma.sample(rng);
        let s = x + y;
        if s > 0.0 {
            return Ok((x / s).clamp(0.0, 1.0));
        }
    }
}

/// Draws the λ weights for a batch of `n` rows.
pub fn sample_lambdas<R: Rng + ?Sized>(cfg: &MixupConfig, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if cfg.per_sample_lambda {
        (0..n).map(|_| sample_lambda(cfg.alpha, rng)).collect()
    } else {
        Ok(vec![sample_lambda(cfg.alpha, rng)?; n])
    }
}

/// A paired batch and its Mixup image and soft label.
#[derive(Clone, Debug, PartialEq)]
pub struct MixBatch<T> {
    pub xi: Tensor<T>,
    pub xj: Tensor<T>,
    pub yi: Vec<usize>,
    pub yj: Vec<usize>,
    /// One weight per row; all equal when λ is drawn per batch.
    pub lambdas: Vec<f64>,
    pub x_tilde: Tensor<T>,
    /// `[N, C]` soft label `λ·onehot(yi) + (1−λ)·onehot(yj)`.
    pub y_tilde: Tensor<T>,
    /// Set when `xj` is `xi` with rows permuted: `xj[r] = xi[perm[r]]`.
    pub perm: Option<Vec<usize>>,
}

impl<T: Scalar> MixBatch<T> {
    /// The batch λ (mean of the row weights).
    pub fn lambda(&self) -> f64 {
        self.lambdas.iter().sum::<f64>() / self.lambdas.len().max(1) as f64
    }

    pub fn row_weights(&self) -> Vec<T> {
        self.lambdas.iter().map(|&l| T::of_f64(l)).collect()
    }

    pub fn len(&self) -> usize {
        self.yi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.yi.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.y_tilde.shape()[1]
    }
}

/// One-hot `[N, C]` targets.
pub fn one_hot<T: Scalar>(labels: &[usize], num_classes: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(config_err!("label {bad} out of range for {num_classes} classes"));
    }
    Ok(Tensor::from_fn(&[labels.len(), num_classes], |i| {
        if labels[i / num_classes] == i % num_classes {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Row-wise `w·a + (1−w)·b`, copying rows bitwise at `w ∈ {0, 1}`.
pub fn lerp_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, weights: &[f64]) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err!("lerp: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if weights.len() != a.batch() {
        return Err(shape_err!("lerp: {} weights for batch {}", weights.len(), a.batch()));
    }
    let r = a.row_len();
    let mut out = Vec::with_capacity(a.numel());
    for (i, &w) in weights.iter().enumerate() {
        let (ra, rb) = (a.row(i), b.row(i));
        if w == 1.0 {
            out.extend_from_slice(ra);
        } else if w == 0.0 {
            out.extend_from_slice(rb);
        } else {
            let wt = T::of_f64(w);
            let wc = T::one() - wt;
            out.extend(ra.iter().zip(rb).map(|(&x, &y)| wt * x + wc * y));
        }
        debug_assert_eq!(out.len(), (i + 1) * r);
    }
    Tensor::new(a.shape().to_vec(), out)
}

fn check_lambda(lambdas: &[f64]) -> Result<()> {
    match lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        Some(l) => Err(config_err!("mixup lambda {l} outside [0, 1]")),
        None => Ok(()),
    }
}

/// Mixup with one λ for the whole batch.
pub fn make_mix_batch<T: Scalar>(
    xi: Tensor<T>,
    xj: Tensor<T>,
    yi: Vec<usize>,
    yj: Vec<usize>,
    lambda: f64,
    num_classes: usize,
) -> Result<MixBatch<T>> {
    let n = yi.len();
    make_mix_batch_rows(xi, xj, yi, yj, vec![lambda; n], num_classes)
}

/// Mixup with one λ per row.
pub fn make_mix_batch_rows<T: Scalar>(
    xi: Tensor<T>,
    xj: Tensor<T>,
    yi: Vec<usize>,
    yj: Vec<usize>,
    lambdas: Vec<f64>,
    num_classes: usize,
) -> Result<MixBatch<T>> {
    check_lambda(&lambdas)?;
    if xi.shape() != xj.shape() {
        return Err(shape_err!("xi {:?} vs xj {:?}", xi.shape(), xj.shape()));
    }
    if yi.len() != xi.batch() || yj.len() != xi.batch() || lambdas.len() != xi.batch() {
        return Err(shape_err!(
            "batch of {} images with {}/{} labels and {} weights",
            xi.batch(),
            yi.len(),
            yj.len(),
            lambdas.len()
        ));
    }
    let x_tilde = lerp_rows(&xi, &xj, &lambdas)?;
    let y_tilde = lerp_rows(&one_hot(&yi, num_classes)?, &one_hot(&yj, num_classes)?, &lambdas)?;
    Ok(MixBatch {
        xi,
        xj,
        yi,
        yj,
        lambdas,
        x_tilde,
        y_tilde,
        perm: None,
    })
}

/// `λ·F_k(xi) + (1−λ)·F_k(xj)` for every stage.
pub fn interpolate_features<T: Scalar>(tape: &mut Tape<T>, fi: &[Var], fj: &[Var], weights: &[T]) -> Result<Vec<Var>> {
    if fi.len() != fj.len() {
        return Err(shape_err!("{} vs {} feature maps", fi.len(), fj.len()));
    }
    fi.iter()
        .zip(fj)
        .map(|(&a, &b)| tape.lerp_rows(a, b, weights))
        .collect()
}

/// `λ·li + (1−λ)·lj` for one set of logits.
pub fn interpolate_logits<T: Scalar>(tape: &mut Tape<T>, li: Var, lj: Var, weights: &[T]) -> Result<Var> {
    tape.lerp_rows(li, lj, weights)
}
