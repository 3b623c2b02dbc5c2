//! Every term of the MixSKD objective, built on a tape.
//!
//! Conventions: batch means everywhere; KL is `KL(target ‖ student)` with
//! the target being whatever the caller passes as the (detached) teacher;
//! KL terms are optionally scaled by `T²`; log arguments of the
//! discriminator loss are clamped to `[1e-7, 1 − 1e-7]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gradcheck_params, GradcheckOptions, GradcheckReport, Scalar, Tape, Tensor, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::mixup::{interpolate_features, interpolate_logits, one_hot, MixBatch};
use crate::network::{BranchOutputs, Network};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    #[serde(rename = "T")]
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 1.0,
            gamma: 1.0,
            mu: 1.0,
            temperature: 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(config_err!("temperature must be > 0, got {}", self.temperature));
        }
        for (name, w) in [("beta", self.beta), ("gamma", self.gamma), ("mu", self.mu)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(config_err!("weight {name} must be finite and >= 0, got {w}"));
            }
        }
        Ok(())
    }
}

/// Which terms beyond the task loss are computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSwitches {
    #[serde(rename = "enable_feature")]
    pub feature: bool,
    #[serde(rename = "enable_dis")]
    pub dis: bool,
    #[serde(rename = "enable_b_logit")]
    pub b_logit: bool,
    #[serde(rename = "enable_h")]
    pub cls_h: bool,
    #[serde(rename = "enable_f_logit")]
    pub f_logit: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self::all()
    }
}

impl LossSwitches {
    pub fn all() -> Self {
        LossSwitches {
            feature: true,
            dis: true,
            b_logit: true,
            cls_h: true,
            f_logit: true,
        }
    }

    pub fn none() -> Self {
        LossSwitches {
            feature: false,
            dis: false,
            b_logit: false,
            cls_h: false,
            f_logit: false,
        }
    }

    pub fn any(&self) -> bool {
        self.feature || self.dis || self.b_logit || self.cls_h || self.f_logit
    }

    fn needs_teacher(&self) -> bool {
        self.cls_h || self.f_logit
    }
}

/// How the discriminator loss reaches the feature maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DisRoute {
    /// Ordinary gradient (what a finite-difference check sees).
    Plain,
    /// Through a gradient-reversal junction with this scale.
    Reversed(f64),
    /// Features detached: only the discriminators receive gradient.
    Detached,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub switches: LossSwitches,
    pub t2_scaling: bool,
    /// Let the teacher's cross-entropy flow back into the features.
    pub teacher_feature_grad: bool,
    pub dis_route: DisRoute,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            weights: LossWeights::default(),
            switches: LossSwitches::all(),
            t2_scaling: true,
            teacher_feature_grad: true,
            dis_route: DisRoute::Plain,
        }
    }
}

pub const COMPONENTS: [&str; 6] = ["cls_mixup", "feature", "dis", "b_logit", "cls_h", "f_logit"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls_mixup: f64,
    pub feature: f64,
    pub dis: f64,
    pub b_logit: f64,
    pub cls_h: f64,
    pub f_logit: f64,
    pub total: f64,
}

impl LossReport {
    /// Components in [`COMPONENTS`] order.
    pub fn components(&self) -> [f64; 6] {
        [self.cls_mixup, self.feature, self.dis, self.b_logit, self.cls_h, self.f_logit]
    }

    /// One JSON-lines record.
    pub fn to_json(&self, step: usize, lambda: f64, lr: f64) -> serde_json::Value {
        serde_json::json!({
            "step": step,
            "cls_mixup": self.cls_mixup,
            "feature": self.feature,
            "dis": self.dis,
            "b_logit": self.b_logit,
            "cls_h": self.cls_h,
            "f_logit": self.f_logit,
            "total": self.total,
            "lambda": lambda,
            "lr": lr,
        })
    }
}

/// `cls_mixup + β·feature + γ·dis + μ·(b_logit + cls_h + f_logit)`.
pub fn weighted_total(c: &[f64; 6], w: &LossWeights) -> f64 {
    c[0] + w.beta * c[1] + w.gamma * c[2] + w.mu * (c[3] + c[4] + c[5])
}

/// Builds the report; a NaN component is an error naming it.
pub fn total_loss(components: [f64; 6], weights: &LossWeights) -> Result<LossReport> {
    if let Some(i) = components.iter().position(|v| v.is_nan()) {
        return Err(Error::Evaluation(format!("loss component {} is NaN", COMPONENTS[i])));
    }
    let [cls_mixup, feature, dis, b_logit, cls_h, f_logit] = components;
    Ok(LossReport {
        cls_mixup,
        feature,
        dis,
        b_logit,
        cls_h,
        f_logit,
        total: weighted_total(&components, weights),
    })
}

fn check_finite<T: Scalar>(tape: &Tape<T>, v: Var, what: &str) -> Result<()> {
    if tape.value(v).data().iter().any(|x| x.is_nan()) {
        return Err(Error::Evaluation(format!("NaN in {what}")));
    }
    Ok(())
}

/// Mean over the batch of `−Σ_c t_c log softmax(z)_c`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    check_finite(tape, logits, "cross-entropy logits")?;
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || target.shape() != shape.as_slice() {
        return Err(shape_err!("cross-entropy: logits {:?} vs target {:?}", shape, target.shape()));
    }
    for n in 0..shape[0] {
        let s: f64 = target.row(n).iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-4 || target.row(n).iter().any(|v| v.as_f64() < 0.0) {
            return Err(config_err!("target row {n} is not a distribution (sums to {s})"));
        }
    }
    let ls = tape.log_softmax_t(logits, T::one())?;
    let s = tape.weighted_sum(ls, target)?;
    Ok(tape.scale(s, T::of_f64(-1.0 / shape[0] as f64)))
}

/// `mean_n KL(softmax(teacher/T) ‖ softmax(student/T))`, times `T²` when
/// `t2` is set. Gradient reaches `teacher` only if the caller left it
/// attached.
pub fn kl_div<T: Scalar>(tape: &mut Tape<T>, student: Var, teacher: Var, temperature: f64, t2: bool) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(config_err!("KL temperature must be > 0, got {temperature}"));
    }
    if tape.shape(student) != tape.shape(teacher) || tape.value(student).rank() != 2 {
        return Err(shape_err!(
            "kl_div: student {:?} vs teacher {:?}",
            tape.shape(student),
            tape.shape(teacher)
        ));
    }
    check_finite(tape, student, "KL student logits")?;
    check_finite(tape, teacher, "KL teacher logits")?;
    let n = tape.value(student).batch();
    let t = T::of_f64(temperature);
    let log_ps = tape.log_softmax_t(student, t)?;
    let log_pt = tape.log_softmax_t(teacher, t)?;
    let pt = tape.softmax_t(teacher, t)?;
    let diff = tape.sub(log_pt, log_ps)?;
    let prod = tape.mul(pt, diff)?;
    let s = tape.sum(prod);
    let factor = if t2 { temperature * temperature } else { 1.0 };
    Ok(tape.scale(s, T::of_f64(factor / n as f64)))
}

/// Forward outputs shared by every term of one training step.
#[derive(Clone, Debug)]
pub struct MixForward {
    pub xi: BranchOutputs,
    pub xj: BranchOutputs,
    pub mix: BranchOutputs,
    /// The `3·K` cross-entropy summands: xi classifiers, xj, then x̃.
    pub ce_terms: Vec<Var>,
}

/// Runs the three forwards (or two plus a row gather when `xj` is a
/// permutation of `xi`) and sums CE over all K classifiers and 3 inputs.
pub fn loss_cls_mixup<T: Scalar>(tape: &mut Tape<T>, net: &Network<T>, mix: &MixBatch<T>) -> Result<(Var, MixForward)> {
    let c = net.num_classes();
    if mix.num_classes() != c {
        return Err(config_err!("mix batch has {} classes, network {}", mix.num_classes(), c));
    }
    let xi = net.forward_input(tape, &mix.xi)?;
    let xj = match &mix.perm {
        Some(perm) => xi.select_rows(tape, perm)?,
        None => net.forward_input(tape, &mix.xj)?,
    };
    let out_mix = net.forward_input(tape, &mix.x_tilde)?;
    let targets = [one_hot::<T>(&mix.yi, c)?, one_hot::<T>(&mix.yj, c)?, mix.y_tilde.clone()];
    let mut ce_terms = Vec::with_capacity(3 * net.num_stages());
    for (outs, target) in [&xi, &xj, &out_mix].into_iter().zip(&targets) {
        for z in outs.all_logits() {
            ce_terms.push(cross_entropy(tape, z, target)?);
        }
    }
    let total = tape.add_all(&ce_terms)?;
    Ok((
        total,
        MixForward {
            xi,
            xj,
            mix: out_mix,
            ce_terms,
        },
    ))
}

/// `Σ_k mean((F̃_k − F_k(x̃))²)`: per-element normalization plus batch mean.
pub fn loss_feature<T: Scalar>(tape: &mut Tape<T>, f_tilde: &[Var], f_mix: &[Var]) -> Result<Var> {
    if f_tilde.len() != f_mix.len() || f_tilde.is_empty() {
        return Err(shape_err!("{} interpolated vs {} mixup feature maps", f_tilde.len(), f_mix.len()));
    }
    let terms = f_tilde
        .iter()
        .zip(f_mix)
        .map(|(&a, &b)| {
            let d = tape.sub(a, b)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.mean(sq))
        })
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&terms)
}

fn route<T: Scalar>(tape: &mut Tape<T>, v: Var, r: DisRoute) -> Var {
    match r {
        DisRoute::Plain => v,
        DisRoute::Reversed(s) => tape.grad_reverse(v, T::of_f64(s)),
        DisRoute::Detached => tape.detach(v),
    }
}

/// Binary cross-entropy of every `D_k`: interpolated features are "real",
/// Mixup-image features "fake". Mean over the batch, summed over k.
pub fn loss_dis<T: Scalar>(
    tape: &mut Tape<T>,
    net: &Network<T>,
    f_tilde: &[Var],
    f_mix: &[Var],
    r: DisRoute,
) -> Result<Var> {
    if f_tilde.len() != net.num_stages() || f_mix.len() != net.num_stages() {
        return Err(shape_err!(
            "discriminator loss needs {} feature maps per side, got {}/{}",
            net.num_stages(),
            f_tilde.len(),
            f_mix.len()
        ));
    }
    let (lo, hi) = (T::of_f64(PROB_CLAMP), T::of_f64(1.0 - PROB_CLAMP));
    let mut terms = Vec::with_capacity(2 * f_tilde.len());
    for k in 0..f_tilde.len() {
        let a = route(tape, f_tilde[k], r);
        let b = route(tape, f_mix[k], r);
        let da = net.forward_discriminator(tape, k, a)?;
        let db = net.forward_discriminator(tape, k, b)?;
        let da = tape.clamp(da, lo, hi);
        let db = tape.clamp(db, lo, hi);
        let la = tape.log(da);
        let one_minus = tape.affine(db, T::of_f64(-1.0), T::one());
        let lb = tape.log(one_minus);
        let s = tape.add(la, lb)?;
        let m = tape.mean(s);
        terms.push(tape.scale(m, T::of_f64(-1.0)));
    }
    tape.add_all(&terms)
}

/// Mutual logit distillation between interpolated and Mixup branch logits,
/// each side against a detached copy of the other.
pub fn loss_b_logit<T: Scalar>(
    tape: &mut Tape<T>,
    bi: &[Var],
    bj: &[Var],
    b_mix: &[Var],
    weights: &[T],
    temperature: f64,
    t2: bool,
) -> Result<Var> {
    if bi.len() != bj.len() || bi.len() != b_mix.len() {
        return Err(shape_err!("branch logit lists of length {}/{}/{}", bi.len(), bj.len(), b_mix.len()));
    }
    let mut terms = Vec::with_capacity(2 * bi.len());
    for k in 0..bi.len() {
        let b_tilde = interpolate_logits(tape, bi[k], bj[k], weights)?;
        let mix_det = tape.detach(b_mix[k]);
        let tilde_det = tape.detach(b_tilde);
        terms.push(kl_div(tape, b_tilde, mix_det, temperature, t2)?);
        terms.push(kl_div(tape, b_mix[k], tilde_det, temperature, t2)?);
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    tape.add_all(&terms)
}

/// Teacher cross-entropy on interpolated and Mixup features against `ỹ`.
/// Returns the loss plus the teacher logits `(h(F̃), h(F_mix))`.
pub fn loss_cls_h<T: Scalar>(
    tape: &mut Tape<T>,
    net: &Network<T>,
    f_tilde: &[Var],
    f_mix: &[Var],
    y_tilde: &Tensor<T>,
    feature_grad: bool,
) -> Result<(Var, Var, Var)> {
    let (a, b): (Vec<Var>, Vec<Var>) = if feature_grad {
        (f_tilde.to_vec(), f_mix.to_vec())
    } else {
        (
            f_tilde.iter().map(|&v| tape.detach(v)).collect(),
            f_mix.iter().map(|&v| tape.detach(v)).collect(),
        )
    };
    let h_tilde = net.forward_teacher(tape, &a)?;
    let h_mix = net.forward_teacher(tape, &b)?;
    let l1 = cross_entropy(tape, h_tilde, y_tilde)?;
    let l2 = cross_entropy(tape, h_mix, y_tilde)?;
    Ok((tape.add(l1, l2)?, h_tilde, h_mix))
}

/// Backbone distillation from the self-teacher, crossed: interpolated
/// backbone logits learn from `h(x̃)` and Mixup logits from `h(F̃)`.
/// Both teacher arguments must already be detached.
#[allow(clippy::too_many_arguments)]
pub fn loss_f_logit<T: Scalar>(
    tape: &mut Tape<T>,
    fi: Var,
    fj: Var,
    f_mix: Var,
    h_tilde_det: Var,
    h_mix_det: Var,
    weights: &[T],
    temperature: f64,
    t2: bool,
) -> Result<Var> {
    let f_tilde = interpolate_logits(tape, fi, fj, weights)?;
    let a = kl_div(tape, f_tilde, h_mix_det, temperature, t2)?;
    let b = kl_div(tape, f_mix, h_tilde_det, temperature, t2)?;
    tape.add(a, b)
}

/// The assembled objective on one tape.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    /// Per-component scalars in [`COMPONENTS`] order; `None` when switched off.
    pub parts: [Option<Var>; 6],
    pub forward: MixForward,
    /// `F̃_k` (interpolated features), empty unless needed.
    pub f_tilde: Vec<Var>,
    pub report: LossReport,
}

/// Builds every enabled term and the weighted total. Disabled terms are
/// not evaluated and report as 0.
pub fn mixskd_objective<T: Scalar>(tape: &mut Tape<T>, net: &Network<T>, mix: &MixBatch<T>, opts: &LossOptions) -> Result<Objective> {
    opts.weights.validate()?;
    let sw = opts.switches;
    let temp = opts.weights.temperature;
    let t2 = opts.t2_scaling;
    let wrow = mix.row_weights();
    let (cls, fwd) = loss_cls_mixup(tape, net, mix)?;
    let mut parts: [Option<Var>; 6] = [Some(cls), None, None, None, None, None];

    let needs_tilde = sw.feature || sw.dis || sw.needs_teacher();
    let f_tilde = if needs_tilde {
        interpolate_features(tape, &fwd.xi.features, &fwd.xj.features, &wrow)?
    } else {
        Vec::new()
    };
    if sw.feature {
        parts[1] = Some(loss_feature(tape, &f_tilde, &fwd.mix.features)?);
    }
    if sw.dis {
        parts[2] = Some(loss_dis(tape, net, &f_tilde, &fwd.mix.features, opts.dis_route)?);
    }
    if sw.b_logit {
        parts[3] = Some(loss_b_logit(
            tape,
            &fwd.xi.branch_logits,
            &fwd.xj.branch_logits,
            &fwd.mix.branch_logits,
            &wrow,
            temp,
            t2,
        )?);
    }
    if sw.needs_teacher() {
        let (lh, h_tilde, h_mix) = loss_cls_h(tape, net, &f_tilde, &fwd.mix.features, &mix.y_tilde, opts.teacher_feature_grad)?;
        if sw.cls_h {
            parts[4] = Some(lh);
        }
        if sw.f_logit {
            let ht = tape.detach(h_tilde);
            let hm = tape.detach(h_mix);
            parts[5] = Some(loss_f_logit(
                tape,
                fwd.xi.backbone_logits,
                fwd.xj.backbone_logits,
                fwd.mix.backbone_logits,
                ht,
                hm,
                &wrow,
                temp,
                t2,
            )?);
        }
    }

    let w = &opts.weights;
    let coef = [1.0, w.beta, w.gamma, w.mu, w.mu, w.mu];
    let mut values = [0.0; 6];
    let mut scaled = Vec::with_capacity(6);
    for i in 0..6 {
        if let Some(v) = parts[i] {
            values[i] = tape.item(v).as_f64();
            scaled.push(tape.scale(v, T::of_f64(coef[i])));
        }
    }
    let report = total_loss(values, w)?;
    let total = tape.add_all(&scaled)?;
    Ok(Objective {
        total,
        parts,
        forward: fwd,
        f_tilde,
        report,
    })
}

/// One row of [`gradcheck_objective`].
#[derive(Clone, Debug)]
pub struct TermCheck {
    pub term: &'static str,
    pub report: GradcheckReport,
}

/// Finite-difference check of every objective component and of the total
/// with respect to all network parameters, on a 64-bit network. `fault`
/// names a term whose analytic gradient is deliberately offset.
pub fn gradcheck_objective(
    net: &Network<f64>,
    mix: &MixBatch<f64>,
    opts: &LossOptions,
    check: &GradcheckOptions,
    fault: Option<&str>,
) -> Result<Vec<TermCheck>> {
    let opts = LossOptions {
        dis_route: DisRoute::Plain,
        switches: LossSwitches::all(),
        ..*opts
    };
    let ids: Vec<_> = net.params.ids().collect();
    let names = COMPONENTS.iter().copied().chain(std::iter::once("total"));
    names
        .enumerate()
        .map(|(i, term)| {
            let mut params = net.params.clone();
            let check = GradcheckOptions {
                fault_offset: if fault == Some(term) { 1e-2 } else { check.fault_offset },
                ..check.clone()
            };
            let report = gradcheck_params(
                &mut params,
                &ids,
                |tape, p| {
                    let n = net.with_params(p.clone());
                    let obj = mixskd_objective(tape, &n, mix, &opts)?;
                    Ok(if i < 6 { obj.parts[i].expect("all terms enabled") } else { obj.total })
                },
                &check,
            )?;
            Ok(TermCheck { term, report })
        })
        .collect()
}

#[cfg(test)]
mod tests;
