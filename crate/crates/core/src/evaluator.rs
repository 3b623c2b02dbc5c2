//! Analysis protocols over the pruned inference network: top-1 accuracy,
//! miss rate on in-between (Mixup) samples, FGSM robustness and
//! log-probability histograms of misclassified samples.
//!
//! Batches are evaluated in parallel; results are concatenated in batch
//! order, so every report is independent of the thread count.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::Dataset;
use crate::error::{config_err, Error, Result};
use crate::losses::cross_entropy;
use crate::mixup::{lerp_rows, one_hot};
use crate::network::InferenceNet;
use crate::parallel::map_indexed;

pub const EVAL_BATCH: usize = 128;

/// Default miss-rate grid `0.0, 0.1, …, 1.0`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub const DEFAULT_PAIRS: usize = 2000;

/// The ε set of the robustness table.
pub const DEFAULT_EPSILONS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

pub const FGSM_NORMALIZATION: &str = "epsilon in [0,1] pixel units; adversarial images clamped to [0,1]";

fn check_compatible(net: &InferenceNet<f32>, ds: &Dataset) -> Result<()> {
    if net.params.len() != net.expected_tensor_count() {
        return Err(config_err!(
            "evaluation needs the pruned network ({} tensors, expected {})",
            net.params.len(),
            net.expected_tensor_count()
        ));
    }
    if ds.is_empty() {
        return Err(config_err!("cannot evaluate on an empty dataset"));
    }
    if ds.num_classes != net.num_classes() {
        return Err(config_err!(
            "dataset has {} classes, network {}",
            ds.num_classes,
            net.num_classes()
        ));
    }
    let (c, h, w) = ds.image_shape();
    let cfg = &net.config;
    if (c, h, w) != (cfg.in_channels, cfg.input_height, cfg.input_width) {
        return Err(config_err!(
            "dataset images are {c}x{h}x{w}, network expects {}x{}x{}",
            cfg.in_channels,
            cfg.input_height,
            cfg.input_width
        ));
    }
    Ok(())
}

fn batch_ranges(m: usize) -> Vec<std::ops::Range<usize>> {
    (0..m.div_ceil(EVAL_BATCH))
        .map(|b| b * EVAL_BATCH..((b + 1) * EVAL_BATCH).min(m))
        .collect()
}

fn concat_rows(parts: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.batch()).sum();
    Tensor::new(shape, parts.into_iter().flat_map(|p| p.into_data()).collect())
}

fn rows(images: &Tensor<f32>, r: std::ops::Range<usize>) -> Result<Tensor<f32>> {
    images.select_rows(&r.collect::<Vec<_>>())
}

/// Logits `[M, C]` for a stack of images.
pub fn predict_logits(net: &InferenceNet<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let ranges = batch_ranges(images.batch());
    let parts = map_indexed(ranges.len(), |b| net.infer(&rows(images, ranges[b].clone())?));
    concat_rows(parts.into_iter().collect::<Result<Vec<_>>>()?)
}

pub fn predict(net: &InferenceNet<f32>, images: &Tensor<f32>) -> Result<Vec<usize>> {
    Ok(predict_logits(net, images)?.argmax_rows())
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

pub fn top1_accuracy(net: &InferenceNet<f32>, ds: &Dataset) -> Result<f64> {
    check_compatible(net, ds)?;
    Ok(accuracy(&predict(net, &ds.images)?, &ds.labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissRateCurve {
    pub lambdas: Vec<f64>,
    pub miss_rate: Vec<f64>,
    pub pairs: usize,
}

impl MissRateCurve {
    pub fn at(&self, lambda: f64) -> Option<f64> {
        self.lambdas
            .iter()
            .position(|&l| (l - lambda).abs() < 1e-12)
            .map(|i| self.miss_rate[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,miss_rate\n");
        for (l, m) in self.lambdas.iter().zip(&self.miss_rate) {
            s.push_str(&format!("{l},{m}\n"));
        }
        s
    }
}

/// Random cross-class pairs `(i, j)` with `labels[i] != labels[j]`.
pub fn sample_cross_class_pairs<R: Rng + ?Sized>(labels: &[usize], n: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        if by_class.len() <= y {
            by_class.resize(y + 1, Vec::new());
        }
        by_class[y].push(i);
    }
    if by_class.iter().filter(|c| !c.is_empty()).count() < 2 {
        return Err(config_err!("cross-class pairs need at least two populated classes"));
    }
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let i = rng.random_range(0..labels.len());
        let j = rng.random_range(0..labels.len());
        if labels[i] != labels[j] {
            pairs.push((i, j));
        }
    }
    Ok(pairs)
}

/// Fraction of Mixup-image predictions outside `{yi, yj}` per λ. One set
/// of cross-class pairs is drawn and reused at every grid point.
pub fn miss_rate_curve<R: Rng + ?Sized>(
    net: &InferenceNet<f32>,
    ds: &Dataset,
    grid: &[f64],
    pairs_per_point: usize,
    rng: &mut R,
) -> Result<MissRateCurve> {
    check_compatible(net, ds)?;
    if grid.is_empty() || grid.iter().any(|l| !(0.0..=1.0).contains(l)) || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(config_err!("lambda grid must be sorted and inside [0, 1]: {grid:?}"));
    }
    if pairs_per_point == 0 {
        return Err(config_err!("need at least one pair per grid point"));
    }
    let pairs = sample_cross_class_pairs(&ds.labels, pairs_per_point, rng)?;
    let (ii, jj): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let xi = ds.images.select_rows(&ii)?;
    let xj = ds.images.select_rows(&jj)?;
    let miss_rate = grid
        .iter()
        .map(|&l| {
            let mixed = lerp_rows(&xi, &xj, &vec![l; ii.len()])?;
            let pred = predict(net, &mixed)?;
            let misses = pred
                .iter()
                .zip(&pairs)
                .filter(|(&p, &(i, j))| p != ds.labels[i] && p != ds.labels[j])
                .count();
            Ok(misses as f64 / pairs.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MissRateCurve {
        lambdas: grid.to_vec(),
        miss_rate,
        pairs: pairs.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub epsilons: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub clean_accuracy: f64,
    pub normalization: String,
}

impl AttackReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# {}\nepsilon,accuracy\n", self.normalization);
        for (e, a) in self.epsilons.iter().zip(&self.accuracy) {
            s.push_str(&format!("{e},{a}\n"));
        }
        s
    }
}

/// `sign(∂CE/∂x)` for every image, with `sign(0) = 0`.
pub fn input_gradient_sign(net: &InferenceNet<f32>, ds: &Dataset) -> Result<Tensor<f32>> {
    let ranges = batch_ranges(ds.len());
    let parts = map_indexed(ranges.len(), |b| -> Result<Tensor<f32>> {
        let r = ranges[b].clone();
        let x = rows(&ds.images, r.clone())?;
        let target = one_hot::<f32>(&ds.labels[r], ds.num_classes)?;
        let mut tape = Tape::new();
        let xv = tape.input(x, true);
        let z = net.forward(&mut tape, xv)?;
        let l = cross_entropy(&mut tape, z, &target)?;
        tape.backward(l)?;
        let g = tape
            .grad(xv)
            .ok_or_else(|| Error::Evaluation("no input gradient".into()))?;
        Ok(g.map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }))
    });
    concat_rows(parts.into_iter().collect::<Result<Vec<_>>>()?)
}

/// `clamp(x + ε·s, 0, 1)`; `ε = 0` returns `x` unchanged.
pub fn fgsm_perturb(x: &Tensor<f32>, sign: &Tensor<f32>, eps: f64) -> Result<Tensor<f32>> {
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let e = eps as f32;
    Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(sign.data())
            .map(|(&v, &s)| (v + e * s).clamp(0.0, 1.0))
            .collect(),
    )
}

/// White-box FGSM accuracy per ε.
pub fn fgsm_attack(net: &InferenceNet<f32>, ds: &Dataset, epsilons: &[f64]) -> Result<AttackReport> {
    check_compatible(net, ds)?;
    if let Some(e) = epsilons.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
        return Err(config_err!("epsilon must be finite and >= 0, got {e}"));
    }
    let clean_accuracy = top1_accuracy(net, ds)?;
    let sign = input_gradient_sign(net, ds)?;
    let accuracy = epsilons
        .iter()
        .map(|&e| {
            let adv = fgsm_perturb(&ds.images, &sign, e)?;
            Ok(accuracy(&predict(net, &adv)?, &ds.labels))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackReport {
        epsilons: epsilons.to_vec(),
        accuracy,
        clean_accuracy,
        normalization: FGSM_NORMALIZATION.into(),
    })
}

/// Lower edge of the histogram range; smaller log-probabilities land in
/// the first bin.
pub const DEFAULT_HIST_MIN: f64 = -10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogprobHistogram {
    /// `bins + 1` edges from `min` to 0.
    pub edges: Vec<f64>,
    /// Counts of `log p(predicted label)`.
    pub predicted: Vec<usize>,
    /// Counts of `log p(true label)`.
    pub truth: Vec<usize>,
    pub misclassified: usize,
    /// Set when there were no misclassified samples to histogram.
    pub empty: bool,
}

impl LogprobHistogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,predicted,truth\n");
        for b in 0..self.predicted.len() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                self.edges[b],
                self.edges[b + 1],
                self.predicted[b],
                self.truth[b]
            ));
        }
        s
    }
}

/// Per-sample `(index, log p(pred), log p(true))` for misclassified samples.
pub fn misclassified_logprobs(net: &InferenceNet<f32>, ds: &Dataset) -> Result<Vec<(usize, f64, f64)>> {
    check_compatible(net, ds)?;
    let logits = predict_logits(net, &ds.images)?;
    let pred = logits.argmax_rows();
    let mut out = Vec::new();
    for (i, (&p, &y)) in pred.iter().zip(&ds.labels).enumerate() {
        if p != y {
            let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            out.push((i, row[p] - lse, row[y] - lse));
        }
    }
    Ok(out)
}

/// Histograms over misclassified samples; `subset` restricts to the given
/// sample indices (e.g. those misclassified by two models).
pub fn logprob_histogram(
    net: &InferenceNet<f32>,
    ds: &Dataset,
    bins: usize,
    min: f64,
    subset: Option<&[usize]>,
) -> Result<LogprobHistogram> {
    if bins == 0 {
        return Err(config_err!("histogram needs at least one bin"));
    }
    if !(min < 0.0) {
        return Err(config_err!("histogram lower edge must be negative, got {min}"));
    }
    let mut samples = misclassified_logprobs(net, ds)?;
    if let Some(keep) = subset {
        samples.retain(|(i, _, _)| keep.contains(i));
    }
    let edges: Vec<f64> = (0..=bins).map(|b| min - min * b as f64 / bins as f64).collect();
    let bin_of = |v: f64| (((v - min) / -min * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    let mut predicted = vec![0; bins];
    let mut truth = vec![0; bins];
    for &(_, lp, lt) in &samples {
        predicted[bin_of(lp)] += 1;
        truth[bin_of(lt)] += 1;
    }
    Ok(LogprobHistogram {
        edges,
        predicted,
        truth,
        misclassified: samples.len(),
        empty: samples.is_empty(),
    })
}

/// Indices misclassified by the net.
pub fn misclassified_indices(net: &InferenceNet<f32>, ds: &Dataset) -> Result<Vec<usize>> {
    check_compatible(net, ds)?;
    let pred = predict(net, &ds.images)?;
    Ok((0..ds.len()).filter(|&i| pred[i] != ds.labels[i]).collect())
}

/// Picks `n` distinct sample indices (for subsampled evaluations).
pub fn sample_indices<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let all: Vec<usize> = (0..m).collect();
    all.choose_multiple(rng, n.min(m)).copied().collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{gen_synthetic, Split, SyntheticSpec};
    use crate::network::{NetConfig, Network, StageSpec};

    fn cfg(classes: usize) -> NetConfig {
        NetConfig {
            input_height: 8,
            input_width: 8,
            stages: vec![StageSpec::new(4, 1, false), StageSpec::new(6, 1, true)],
            num_classes: classes,
            disc_hidden: 4,
            ..NetConfig::default()
        }
    }

    fn data(classes: usize, per_class: usize) -> Dataset {
        gen_synthetic(
            &SyntheticSpec {
                num_classes: classes,
                per_class,
                height: 8,
                width: 8,
                noise_sigma: 0.1,
                seed: 3,
            },
            Split::Test,
        )
        .unwrap()
    }

    fn net(classes: usize, seed: u64) -> InferenceNet<f32> {
        Network::<f32>::build(cfg(classes), seed).unwrap().prune_for_inference()
    }

    /// Classifier that outputs fixed logits regardless of input.
    fn constant_net(classes: usize, bias: &[f32]) -> InferenceNet<f32> {
        let mut n = net(classes, 0);
        let (w, b) = (n.backbone.classifier.weight, n.backbone.classifier.bias);
        n.params.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        n.params.get_mut(b).data_mut().copy_from_slice(bias);
        n
    }

    #[test]
    fn top1_examples() {
        let ds = data(4, 25);
        let n = constant_net(4, &[0.0, 1.0, 0.0, 0.0]);
        assert!((top1_accuracy(&n, &ds).unwrap() - 0.25).abs() < 1e-12);

        let one = ds.head(1).unwrap();
        let n = constant_net(4, &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(one.labels, vec![0]);
        assert_eq!(top1_accuracy(&n, &one).unwrap(), 1.0);

        // Against a per-sample loop.
        let n = net(4, 9);
        let sub = ds.head(50).unwrap();
        let mut hits = 0;
        for i in 0..50 {
            let (x, y) = sub.gather(&[i]).unwrap();
            hits += (n.infer(&x).unwrap().argmax_rows()[0] == y[0]) as usize;
        }
        assert!((top1_accuracy(&n, &sub).unwrap() - hits as f64 / 50.0).abs() < 1e-12);

        assert!(top1_accuracy(&net(3, 0), &ds).is_err());
        let full = Network::<f32>::build(cfg(4), 0).unwrap();
        let unpruned = InferenceNet {
            params: full.params.clone(),
            config: full.config.clone(),
            backbone: full.backbone.clone(),
        };
        assert!(top1_accuracy(&unpruned, &ds).is_err());
    }

    #[test]
    fn miss_rate_endpoint_bounds() {
        let ds = data(4, 20);
        let n = net(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let curve = miss_rate_curve(&n, &ds, &[0.0, 0.5, 1.0], 300, &mut rng).unwrap();
        assert_eq!(curve.miss_rate.len(), 3);
        assert!(curve.miss_rate.iter().all(|m| (0.0..=1.0).contains(m)));

        // Recreate the pairs to bound the endpoints by endpoint errors.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = sample_cross_class_pairs(&ds.labels, 300, &mut rng).unwrap();
        let pred = predict(&n, &ds.images).unwrap();
        let err = |side: fn(&(usize, usize)) -> usize| {
            pairs.iter().filter(|p| pred[side(p)] != ds.labels[side(p)]).count() as f64 / 300.0
        };
        assert!(curve.at(0.0).unwrap() <= err(|p| p.1));
        assert!(curve.at(1.0).unwrap() <= err(|p| p.0));

        // With two classes every prediction lies in the pair.
        let ds2 = data(2, 20);
        let c2 = miss_rate_curve(&net(2, 1), &ds2, &default_lambda_grid(), 100, &mut rng).unwrap();
        assert!(c2.miss_rate.iter().all(|&m| m == 0.0));

        assert!(miss_rate_curve(&n, &ds, &[0.5, 0.1], 10, &mut rng).is_err());
        assert!(miss_rate_curve(&n, &ds, &[1.5], 10, &mut rng).is_err());
    }

    #[test]
    fn fgsm_examples() {
        let ds = data(3, 10);
        let n = net(3, 2);
        let r = fgsm_attack(&n, &ds, &[0.0, 0.1]).unwrap();
        assert_eq!(r.accuracy[0], r.clean_accuracy);
        assert_eq!(r.clean_accuracy, top1_accuracy(&n, &ds).unwrap());

        let sign = input_gradient_sign(&n, &ds).unwrap();
        assert_eq!(fgsm_perturb(&ds.images, &sign, 0.0).unwrap(), ds.images);
        let adv = fgsm_perturb(&ds.images, &sign, 0.5).unwrap();
        assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let x = Tensor::from_f64(&[1, 3], &[0.5, 0.5, 0.99]).unwrap();
        let s = Tensor::from_f64(&[1, 3], &[0.0, -1.0, 1.0]).unwrap();
        let p = fgsm_perturb(&x, &s, 0.1).unwrap();
        assert_eq!(p.data(), &[0.5, 0.4, 1.0]);

        assert!(fgsm_attack(&n, &ds, &[-0.1]).is_err());
    }

    #[test]
    fn histogram_examples() {
        let ds = data(4, 10);
        let n = net(4, 3);
        let h = logprob_histogram(&n, &ds, 8, DEFAULT_HIST_MIN, None).unwrap();
        assert_eq!(h.predicted.iter().sum::<usize>(), h.misclassified);
        assert_eq!(h.truth.iter().sum::<usize>(), h.misclassified);
        assert_eq!(h.edges.len(), 9);
        assert_eq!(*h.edges.last().unwrap(), 0.0);
        for (_, lp, lt) in misclassified_logprobs(&n, &ds).unwrap() {
            assert!(lp <= 0.0 && lt <= 0.0 && lp >= lt);
        }

        // A net that is always right has nothing to histogram.
        let one = ds.head(10).unwrap();
        let perfect = constant_net(4, &[1.0, 0.0, 0.0, 0.0]);
        let h = logprob_histogram(&perfect, &one, 4, DEFAULT_HIST_MIN, None).unwrap();
        assert!(h.empty);
        assert_eq!(h.predicted.iter().sum::<usize>(), 0);

        let wrong = misclassified_indices(&n, &ds).unwrap();
        let h = logprob_histogram(&n, &ds, 8, DEFAULT_HIST_MIN, Some(&wrong[..wrong.len() / 2])).unwrap();
        assert_eq!(h.misclassified, wrong.len() / 2);
        assert!(logprob_histogram(&n, &ds, 0, DEFAULT_HIST_MIN, None).is_err());
    }
}
