//! SGD training loop: warmup and decay schedules, the adversarial
//! discriminator update and the loss switches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Scalar, Tape, Tensor};
use crate::data::{batch_pairs, Dataset};
use crate::error::{config_err, shape_err, Error, Result};
use crate::evaluator::top1_accuracy;
use crate::losses::{
    cross_entropy, loss_dis, mixskd_objective, total_loss, DisRoute, LossOptions, LossReport, LossSwitches, LossWeights,
};
use crate::mixup::{make_mix_batch_rows, one_hot, sample_lambdas, MixBatch, MixupConfig};
use crate::network::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Step,
    Cosine,
}

/// How the discriminators are trained against the features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvMode {
    /// Discriminators step on their own loss over detached features;
    /// features get the reversed gradient in the same step.
    Separate,
    /// One backward of the full objective updates both sides.
    Joint,
    /// Even epochs train only the discriminators' side of the game, odd
    /// epochs only the features' side.
    Alternating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub schedule: ScheduleKind,
    /// Step-decay milestones, in (fractional) epochs.
    pub milestones: Vec<f64>,
    pub decay_factor: f64,
    /// Train with Mixup pairs; off gives the plain cross-entropy baseline.
    pub mixup: bool,
    pub alpha: f64,
    pub per_sample_lambda: bool,
    pub weights: LossWeights,
    #[serde(flatten)]
    pub switches: LossSwitches,
    pub seed: u64,
    pub grl_scale: f64,
    pub t2_scaling: bool,
    pub teacher_feature_grad: bool,
    pub adv_mode: AdvMode,
    pub augment: bool,
    /// Rescale each update group to at most this global L2 norm; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 2,
            schedule: ScheduleKind::Step,
            milestones: vec![18.0, 25.5],
            decay_factor: 0.1,
            mixup: true,
            alpha: 0.4,
            per_sample_lambda: false,
            weights: LossWeights::default(),
            switches: LossSwitches::all(),
            seed: 0,
            grl_scale: 1.0,
            t2_scaling: true,
            teacher_feature_grad: true,
            adv_mode: AdvMode::Separate,
            augment: false,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(config_err!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!("weight_decay must be >= 0"));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(config_err!(
                "warmup_epochs ({}) must be < epochs ({})",
                self.warmup_epochs,
                self.epochs
            ));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(config_err!("alpha must be > 0"));
        }
        if !(self.decay_factor > 0.0) {
            return Err(config_err!("decay_factor must be > 0"));
        }
        if !(self.grl_scale >= 0.0) {
            return Err(config_err!("grl_scale must be >= 0"));
        }
        if !(self.grad_clip >= 0.0) || !self.grad_clip.is_finite() {
            return Err(config_err!("grad_clip must be finite and >= 0 (0 disables)"));
        }
        self.weights.validate()
    }

    /// `mixskd`, `mixup-baseline` (no Self-KD terms) or `cross-entropy`.
    pub fn method(&self) -> &'static str {
        if !self.mixup {
            "cross-entropy"
        } else if self.switches.any() {
            "mixskd"
        } else {
            "mixup-baseline"
        }
    }

    fn loss_options(&self, route: DisRoute) -> LossOptions {
        LossOptions {
            weights: self.weights,
            switches: self.switches,
            t2_scaling: self.t2_scaling,
            teacher_feature_grad: self.teacher_feature_grad,
            dis_route: route,
        }
    }
}

/// Learning rate at `step`: linear warmup from 0, then step decay or cosine.
pub fn lr_at(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let epoch = step as f64 / steps_per_epoch.max(1) as f64;
    let warm = cfg.warmup_epochs as f64;
    if epoch < warm {
        return cfg.lr * epoch / warm;
    }
    match cfg.schedule {
        ScheduleKind::Step => {
            let passed = cfg.milestones.iter().filter(|&&m| epoch >= m).count();
            cfg.lr * cfg.decay_factor.powi(passed as i32)
        }
        ScheduleKind::Cosine => {
            let span = (cfg.epochs as f64 - warm).max(1e-12);
            let t = ((epoch - warm) / span).clamp(0.0, 1.0);
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Momentum buffers, one per parameter tensor, zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        OptimizerState {
            velocity: params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect(),
        }
    }
}

/// Gradients indexed by parameter id; `None` for parameters the loss did not reach.
pub type Grads<T> = Vec<Option<Tensor<T>>>;

pub fn collect_grads<T: Scalar>(tape: &Tape<T>, params: &ParamStore<T>, ids: &[ParamId]) -> Grads<T> {
    let mut g = vec![None; params.len()];
    for &id in ids {
        g[id.0] = tape.param_grad(id);
    }
    g
}

/// `v ← m·v + g + wd·p; p ← p − lr·v` for every id that has a gradient.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Grads<T>,
    state: &mut OptimizerState<T>,
    ids: &[ParamId],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let (lr, m, wd) = (T::of_f64(lr), T::of_f64(momentum), T::of_f64(weight_decay));
    for &id in ids {
        let Some(g) = grads.get(id.0).and_then(Option::as_ref) else {
            continue;
        };
        let p = params.get_mut(id);
        let v = &mut state.velocity[id.0];
        if g.shape() != p.shape() || v.shape() != p.shape() {
            return Err(shape_err!(
                "sgd: param {:?} vs grad {:?} vs velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            ));
        }
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = m * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// The two gradient sets of one step. Generator gradients never touch
/// discriminator parameters and vice versa.
#[derive(Clone, Debug)]
pub struct StepGrads<T> {
    pub report: LossReport,
    pub generator: Grads<T>,
    pub discriminator: Grads<T>,
}

fn split_ids<T: Scalar>(net: &Network<T>) -> (Vec<ParamId>, Vec<ParamId>) {
    net.params
        .ids()
        .partition(|&id| net.params.entry(id).group != ParamGroup::Discriminator)
}

/// Evaluates the objective on `mix` and returns both gradient sets
/// without changing the network.
pub fn step_grads<T: Scalar>(net: &Network<T>, mix: &MixBatch<T>, cfg: &TrainConfig, epoch: usize) -> Result<StepGrads<T>> {
    let (gen_ids, disc_ids) = split_ids(net);
    if !cfg.mixup {
        let mut tape = Tape::new();
        let out = net.forward_input(&mut tape, &mix.xi)?;
        let loss = cross_entropy(&mut tape, out.backbone_logits, &one_hot(&mix.yi, net.num_classes())?)?;
        let report = total_loss([tape.item(loss).as_f64(), 0.0, 0.0, 0.0, 0.0, 0.0], &cfg.weights)?;
        tape.backward(loss)?;
        return Ok(StepGrads {
            report,
            generator: collect_grads(&tape, &net.params, &gen_ids),
            discriminator: vec![None; net.params.len()],
        });
    }

    let even = epoch % 2 == 0;
    let route = match cfg.adv_mode {
        AdvMode::Alternating if even => DisRoute::Detached,
        _ => DisRoute::Reversed(cfg.grl_scale),
    };
    let mut tape = Tape::new();
    let obj = mixskd_objective(&mut tape, net, mix, &cfg.loss_options(route))?;
    tape.backward(obj.total)?;
    let generator = collect_grads(&tape, &net.params, &gen_ids);

    let train_disc = cfg.switches.dis && !(cfg.adv_mode == AdvMode::Alternating && !even);
    let discriminator = if !train_disc {
        vec![None; net.params.len()]
    } else if cfg.adv_mode == AdvMode::Joint {
        collect_grads(&tape, &net.params, &disc_ids)
    } else {
        let mut dt = Tape::new();
        let ft: Vec<_> = obj.f_tilde.iter().map(|&v| dt.constant(tape.value(v).clone())).collect();
        let fm: Vec<_> = obj
            .forward
            .mix
            .features
            .iter()
            .map(|&v| dt.constant(tape.value(v).clone()))
            .collect();
        let l = loss_dis(&mut dt, net, &ft, &fm, DisRoute::Detached)?;
        dt.backward(l)?;
        collect_grads(&dt, &net.params, &disc_ids)
    };
    // The generator update in alternating even epochs only carries the
    // non-adversarial terms; the detached route already ensures that.
    let generator = if cfg.adv_mode == AdvMode::Alternating && even && cfg.switches.dis {
        generator
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.filter(|_| net.params.entry(ParamId(i)).group != ParamGroup::Discriminator))
            .collect()
    } else {
        generator
    };
    Ok(StepGrads {
        report: obj.report,
        generator,
        discriminator,
    })
}

/// Scales `grads` down so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm<T: Scalar>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|t| t.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of_f64(max_norm / norm);
        for t in grads.iter_mut().flatten() {
            *t = t.map(|v| v * s);
        }
    }
    norm
}

/// One optimization step on a fixed Mixup batch.
pub fn train_step_on_mix<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut OptimizerState<T>,
    mix: &MixBatch<T>,
    cfg: &TrainConfig,
    lr: f64,
    epoch: usize,
) -> Result<LossReport> {
    let mut g = step_grads(net, mix, cfg, epoch)?;
    let (gen_ids, disc_ids) = split_ids(net);
    for grads in [&mut g.generator, &mut g.discriminator] {
        if grads.iter().flatten().any(|t| !t.all_finite()) {
            return Err(Error::Evaluation("non-finite gradient".into()));
        }
        if cfg.grad_clip > 0.0 {
            clip_global_norm(grads, cfg.grad_clip);
        }
    }
    sgd_step(&mut net.params, &g.discriminator, opt, &disc_ids, lr, cfg.momentum, cfg.weight_decay)?;
    sgd_step(&mut net.params, &g.generator, opt, &gen_ids, lr, cfg.momentum, cfg.weight_decay)?;
    Ok(g.report)
}

/// Draws λ, forms the Mixup batch and steps.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar, R: rand::Rng>(
    net: &mut Network<T>,
    opt: &mut OptimizerState<T>,
    xi: Tensor<T>,
    yi: Vec<usize>,
    perm: Vec<usize>,
    cfg: &TrainConfig,
    lr: f64,
    epoch: usize,
    rng: &mut R,
) -> Result<(LossReport, f64)> {
    let n = yi.len();
    let lambdas = if cfg.mixup {
        let mc = MixupConfig {
            alpha: cfg.alpha,
            per_sample_lambda: cfg.per_sample_lambda,
        };
        sample_lambdas(&mc, n, rng)?
    } else {
        vec![1.0; n]
    };
    let xj = xi.select_rows(&perm)?;
    let yj = perm.iter().map(|&p| yi[p]).collect();
    let mut mix = make_mix_batch_rows(xi, xj, yi, yj, lambdas, net.num_classes())?;
    mix.perm = Some(perm);
    let lambda = mix.lambda();
    Ok((train_step_on_mix(net, opt, &mix, cfg, lr, epoch)?, lambda))
}

/// Record handed to the metrics sink during [`fit`].
pub enum Record<'a> {
    Step(serde_json::Value),
    Epoch {
        value: serde_json::Value,
        net: &'a Network<f32>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub method: String,
    pub epochs: usize,
    pub steps: usize,
    pub final_train_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
}

const STREAM_DATA: u64 = 1;
const STREAM_LAMBDA: u64 = 2;

/// Trains for `cfg.epochs` epochs. The sink gets one record per step and
/// one per epoch (with train/test accuracy of the pruned network).
pub fn fit(
    net: &mut Network<f32>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    mut sink: impl FnMut(Record<'_>) -> Result<()>,
) -> Result<FitSummary> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    if train.num_classes != net.num_classes() {
        return Err(config_err!(
            "training set has {} classes, network {}",
            train.num_classes,
            net.num_classes()
        ));
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(STREAM_DATA);
    let mut lambda_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    lambda_rng.set_stream(STREAM_LAMBDA);
    let mut opt = OptimizerState::new(&net.params);
    let steps_per_epoch = train.len() / cfg.batch_size.min(train.len());
    let mut step = 0;
    let mut summary = FitSummary {
        method: cfg.method().into(),
        epochs: cfg.epochs,
        steps: 0,
        final_train_accuracy: None,
        final_test_accuracy: None,
        final_loss: None,
    };
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut n_steps = 0;
        for batch in batch_pairs(train, cfg.batch_size, cfg.augment, &mut data_rng)? {
            let lr = lr_at(step, steps_per_epoch, cfg);
            let (report, lambda) = train_step(net, &mut opt, batch.xi, batch.yi, batch.perm, cfg, lr, epoch, &mut lambda_rng)
                .map_err(|e| match e {
                    Error::Evaluation(m) => Error::Evaluation(format!("epoch {epoch} step {step}: {m}")),
                    other => other,
                })?;
            sink(Record::Step(report.to_json(step, lambda, lr)))?;
            loss_sum += report.total;
            n_steps += 1;
            step += 1;
        }
        let pruned = net.prune_for_inference();
        let train_acc = top1_accuracy(&pruned, train)?;
        let test_acc = test.map(|t| top1_accuracy(&pruned, t)).transpose()?;
        let mean_loss = loss_sum / n_steps.max(1) as f64;
        summary.final_train_accuracy = Some(train_acc);
        summary.final_test_accuracy = test_acc;
        summary.final_loss = Some(mean_loss);
        sink(Record::Epoch {
            value: serde_json::json!({
                "epoch": epoch,
                "mean_total": mean_loss,
                "train_accuracy": train_acc,
                "test_accuracy": test_acc,
            }),
            net,
        })?;
    }
    summary.steps = step;
    Ok(summary)
}
