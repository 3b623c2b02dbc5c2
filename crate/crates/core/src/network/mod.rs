//! The multi-branch training graph and its pruned inference network.
//!
//! Parameters are stored backbone-first (stem, stages, classifier), followed
//! by branches, the self-teacher and the discriminators, so pruning is a
//! truncation of the store and keeps every backbone id valid.

mod checkpoint;
mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use checkpoint::{
    decode_checkpoint, encode_inference, encode_network, load_checkpoint, save_checkpoint,
    save_inference_checkpoint, Checkpoint,
};
pub use config::{Activation, NetConfig, StageSpec};

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{config_err, shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Stem, stages φ_1..φ_K and classifier g.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub stem: ConvLayer,
    pub stages: Vec<Vec<ConvLayer>>,
    pub classifier: LinearLayer,
}

/// Auxiliary branch attached after stage `k`: alignment blocks ζ_k copying
/// stages `k+1..K`, then a classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub align: Vec<Vec<ConvLayer>>,
    pub classifier: LinearLayer,
}

/// 1×1 fusion conv over the concatenated features, then a classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub fuse: ConvLayer,
    pub classifier: LinearLayer,
}

/// Two-layer MLP with sigmoid output over a flattened feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub hidden: LinearLayer,
    pub out: LinearLayer,
}

/// Per-forward handles on one tape.
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    /// `b_k(x)`, one per auxiliary branch.
    pub branch_logits: Vec<Var>,
    /// `f(x)`.
    pub backbone_logits: Var,
    /// Aligned feature maps `F_1..F_K`; the last is the backbone's own.
    pub features: Vec<Var>,
}

impl BranchOutputs {
    /// All classifier outputs, branches first.
    pub fn all_logits(&self) -> Vec<Var> {
        let mut v = self.branch_logits.clone();
        v.push(self.backbone_logits);
        v
    }

    /// Same outputs with batch rows reordered by `index`.
    pub fn select_rows<T: Scalar>(&self, tape: &mut Tape<T>, index: &[usize]) -> Result<Self> {
        let sel = |t: &mut Tape<T>, vs: &[Var]| -> Result<Vec<Var>> {
            vs.iter().map(|&v| t.select_rows(v, index)).collect()
        };
        Ok(BranchOutputs {
            branch_logits: sel(tape, &self.branch_logits)?,
            backbone_logits: tape.select_rows(self.backbone_logits, index)?,
            features: sel(tape, &self.features)?,
        })
    }
}

struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            T::of_f64(z * std)
        })
    }

    fn conv(&mut self, name: &str, group: ParamGroup, cin: usize, cout: usize, k: usize, stride: usize) -> ConvLayer {
        let w = self.he(&[cout, cin, k, k], cin * k * k);
        let weight = self.params.add(format!("{name}.weight"), group, w);
        let bias = self.params.add(format!("{name}.bias"), group, Tensor::zeros(&[cout]));
        ConvLayer {
            weight,
            bias,
            in_channels: cin,
            out_channels: cout,
            stride,
            padding: k / 2,
        }
    }

    fn linear(&mut self, name: &str, group: ParamGroup, cin: usize, cout: usize) -> LinearLayer {
        let w = self.he(&[cout, cin], cin);
        let weight = self.params.add(format!("{name}.weight"), group, w);
        let bias = self.params.add(format!("{name}.bias"), group, Tensor::zeros(&[cout]));
        LinearLayer { weight, bias }
    }

    /// Blocks for stages `from..K`, entering with `cin` channels.
    fn stages(&mut self, prefix: &str, group: ParamGroup, cfg: &NetConfig, from: usize, mut cin: usize) -> Vec<Vec<ConvLayer>> {
        let mut out = Vec::new();
        for k in from..cfg.num_stages() {
            let spec = &cfg.stages[k];
            let mut blocks = Vec::new();
            for b in 0..spec.blocks {
                let stride = if b == 0 && spec.downsample { 2 } else { 1 };
                blocks.push(self.conv(&format!("{prefix}stage{k}.block{b}"), group, cin, spec.out_channels, 3, stride));
                cin = spec.out_channels;
            }
            out.push(blocks);
        }
        out
    }
}

fn conv_forward<T: Scalar>(tape: &mut Tape<T>, p: &ParamStore<T>, l: &ConvLayer, x: Var) -> Result<Var> {
    let w = tape.param(l.weight, p.get(l.weight));
    let b = tape.param(l.bias, p.get(l.bias));
    tape.conv2d(x, w, b, l.stride, l.padding)
}

fn linear_forward<T: Scalar>(tape: &mut Tape<T>, p: &ParamStore<T>, l: &LinearLayer, x: Var) -> Result<Var> {
    let w = tape.param(l.weight, p.get(l.weight));
    let b = tape.param(l.bias, p.get(l.bias));
    tape.linear(x, w, b)
}

fn activate<T: Scalar>(tape: &mut Tape<T>, act: Activation, x: Var) -> Var {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Identity => x,
    }
}

fn block_forward<T: Scalar>(tape: &mut Tape<T>, p: &ParamStore<T>, cfg: &NetConfig, l: &ConvLayer, x: Var) -> Result<Var> {
    let y = conv_forward(tape, p, l, x)?;
    let y = activate(tape, cfg.activation, y);
    if cfg.residual && l.stride == 1 && l.in_channels == l.out_channels {
        tape.add(y, x)
    } else {
        Ok(y)
    }
}

fn stack_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamStore<T>,
    cfg: &NetConfig,
    blocks: &[ConvLayer],
    mut x: Var,
) -> Result<Var> {
    for l in blocks {
        x = block_forward(tape, p, cfg, l, x)?;
    }
    Ok(x)
}

fn check_input<T: Scalar>(cfg: &NetConfig, x: &Tensor<T>) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.input_height || s[3] != cfg.input_width {
        return Err(shape_err!(
            "expected input [N,{},{},{}], got {:?}",
            cfg.in_channels,
            cfg.input_height,
            cfg.input_width,
            s
        ));
    }
    Ok(())
}

impl Backbone {
    /// Returns each stage's output and the logits `f(x)`.
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, cfg: &NetConfig, x: Var) -> Result<(Vec<Var>, Var)> {
        let mut h = block_forward(tape, p, cfg, &self.stem, x)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            h = stack_forward(tape, p, cfg, stage, h)?;
            outs.push(h);
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits = linear_forward(tape, p, &self.classifier, pooled)?;
        Ok((outs, logits))
    }

    fn downsamples(&self) -> usize {
        std::iter::once(&self.stem)
            .chain(self.stages.iter().flatten())
            .filter(|l| l.stride == 2)
            .count()
    }
}

/// The full training graph: backbone, K−1 branches, self-teacher and K discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: NetConfig,
    pub params: ParamStore<T>,
    pub backbone: Backbone,
    pub branches: Vec<Branch>,
    pub teacher: Teacher,
    pub discriminators: Vec<Discriminator>,
    backbone_len: usize,
}

impl<T: Scalar> Network<T> {
    /// Builds all parameters deterministically from `seed` (He fan-in
    /// normal weights, zero biases).
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let k_stages = config.num_stages();
        let c0 = config.stages[0].out_channels;
        let (c_last, fh, fw) = config.feature_shape();
        let c = config.num_classes;

        let stem = b.conv("stem", ParamGroup::Backbone, config.in_channels, c0, 3, 1);
        let stages = b.stages("", ParamGroup::Backbone, &config, 0, c0);
        let classifier = b.linear("classifier", ParamGroup::Backbone, c_last, c);
        let backbone = Backbone {
            stem,
            stages,
            classifier,
        };
        let backbone_len = b.params.len();

        let branches = (0..k_stages - 1)
            .map(|k| {
                let cin = config.stages[k].out_channels;
                let align = b.stages(&format!("branch{k}."), ParamGroup::Branch, &config, k + 1, cin);
                let classifier = b.linear(&format!("branch{k}.classifier"), ParamGroup::Branch, c_last, c);
                Branch { align, classifier }
            })
            .collect();

        let teacher = Teacher {
            fuse: b.conv("teacher.fuse", ParamGroup::Teacher, k_stages * c_last, c_last, 1, 1),
            classifier: b.linear("teacher.classifier", ParamGroup::Teacher, c_last, c),
        };

        let flat = c_last * fh * fw;
        let discriminators = (0..k_stages)
            .map(|k| Discriminator {
                hidden: b.linear(&format!("disc{k}.fc1"), ParamGroup::Discriminator, flat, config.disc_hidden),
                out: b.linear(&format!("disc{k}.fc2"), ParamGroup::Discriminator, config.disc_hidden, 1),
            })
            .collect();

        Ok(Network {
            config,
            params,
            backbone,
            branches,
            teacher,
            discriminators,
            backbone_len,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.config.num_stages()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Puts `x` on the tape as a constant and runs [`Self::forward_train`].
    pub fn forward_input(&self, tape: &mut Tape<T>, x: &Tensor<T>) -> Result<BranchOutputs> {
        check_input(&self.config, x)?;
        let xv = tape.constant(x.clone());
        self.forward_train(tape, xv)
    }

    /// All branch logits, backbone logits and aligned features; each stage
    /// prefix is evaluated once and shared by the branches hanging off it.
    pub fn forward_train(&self, tape: &mut Tape<T>, x: Var) -> Result<BranchOutputs> {
        check_input(&self.config, tape.value(x))?;
        let p = &self.params;
        let cfg = &self.config;
        let (stage_outs, backbone_logits) = self.backbone.forward(tape, p, cfg, x)?;
        let mut features = Vec::with_capacity(self.num_stages());
        let mut branch_logits = Vec::with_capacity(self.branches.len());
        for (k, br) in self.branches.iter().enumerate() {
            let mut h = stage_outs[k];
            for stage in &br.align {
                h = stack_forward(tape, p, cfg, stage, h)?;
            }
            features.push(h);
            let pooled = tape.global_avg_pool(h)?;
            branch_logits.push(linear_forward(tape, p, &br.classifier, pooled)?);
        }
        features.push(*stage_outs.last().expect("at least two stages"));
        Ok(BranchOutputs {
            branch_logits,
            backbone_logits,
            features,
        })
    }

    /// Self-teacher logits over the channel concatenation of all K features.
    pub fn forward_teacher(&self, tape: &mut Tape<T>, features: &[Var]) -> Result<Var> {
        if features.len() != self.num_stages() {
            return Err(config_err!(
                "teacher needs {} feature maps, got {}",
                self.num_stages(),
                features.len()
            ));
        }
        let cat = tape.concat_channels(features)?;
        let fused = conv_forward(tape, &self.params, &self.teacher.fuse, cat)?;
        let pooled = tape.global_avg_pool(fused)?;
        linear_forward(tape, &self.params, &self.teacher.classifier, pooled)
    }

    /// `D_k(feature)` in (0, 1), shape `[N]`. `k` is 0-based.
    pub fn forward_discriminator(&self, tape: &mut Tape<T>, k: usize, feature: Var) -> Result<Var> {
        let d = self.discriminators.get(k).ok_or_else(|| {
            config_err!("discriminator index {} out of range (K = {})", k, self.num_stages())
        })?;
        let n = tape.value(feature).batch();
        let flat = tape.flatten(feature)?;
        let h = linear_forward(tape, &self.params, &d.hidden, flat)?;
        let h = tape.relu(h);
        let o = linear_forward(tape, &self.params, &d.out, h)?;
        let s = tape.sigmoid(o);
        tape.reshape(s, &[n])
    }

    /// Number of stride-2 convolutions from the input to the end of branch
    /// `k` (or of the backbone when `k == K-1`).
    pub fn path_downsamples(&self, k: usize) -> usize {
        let prefix = std::iter::once(&self.backbone.stem)
            .chain(self.backbone.stages[..=k].iter().flatten())
            .filter(|l| l.stride == 2)
            .count();
        match self.branches.get(k) {
            Some(br) => prefix + br.align.iter().flatten().filter(|l| l.stride == 2).count(),
            None => self.backbone.downsamples(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Parameter ids belonging to the discriminators.
    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.params.ids_in(ParamGroup::Discriminator)
    }

    /// Drops branches, teacher and discriminators.
    pub fn prune_for_inference(&self) -> InferenceNet<T> {
        InferenceNet {
            config: self.config.clone(),
            params: self.params.truncated(self.backbone_len),
            backbone: self.backbone.clone(),
        }
    }

    /// Same architecture with replacement parameter values.
    pub fn with_params(&self, params: ParamStore<T>) -> Self {
        Network {
            params,
            ..self.clone()
        }
    }

    /// Draws every bias from `U(−scale, scale)`. Freshly built nets have
    /// zero biases, so a ReLU fed an all-zero patch sits exactly on its kink,
    /// where finite differences and the subgradient disagree; gradient
    /// checks jitter first.
    pub fn jitter_biases(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            if self.params.entry(id).name.ends_with(".bias") {
                for v in self.params.get_mut(id).data_mut() {
                    *v = T::of_f64(rng.random_range(-scale..scale));
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            branches: self.branches.clone(),
            teacher: self.teacher.clone(),
            discriminators: self.discriminators.clone(),
            backbone_len: self.backbone_len,
        }
    }
}

/// Backbone-only network used for every evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceNet<T> {
    pub config: NetConfig,
    pub params: ParamStore<T>,
    pub backbone: Backbone,
}

impl<T: Scalar> InferenceNet<T> {
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        check_input(&self.config, tape.value(x))?;
        Ok(self.backbone.forward(tape, &self.params, &self.config, x)?.1)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Number of parameter tensors the backbone owns; equals the store size.
    pub fn expected_tensor_count(&self) -> usize {
        2 + 2 + 2 * self.backbone.stages.iter().map(Vec::len).sum::<usize>()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }
}
