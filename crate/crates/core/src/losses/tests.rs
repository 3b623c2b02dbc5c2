use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{gradcheck_params, GradcheckOptions, ParamGroup};
use crate::network::{Activation, NetConfig, StageSpec};
use crate::testutil::{ce_oracle, kl_oracle, matmul_oracle, rand_tensor, toy_mix, toy_net_config, zero_group};

const LN2: f64 = std::f64::consts::LN_2;

fn ln(x: f64) -> f64 {
    x.ln()
}

fn ce_value(logits: Tensor<f64>, target: Tensor<f64>) -> Result<f64> {
    let mut t = Tape::new();
    let z = t.constant(logits);
    let l = cross_entropy(&mut t, z, &target)?;
    Ok(t.item(l))
}

fn kl_value(s: Tensor<f64>, te: Tensor<f64>, temp: f64, t2: bool) -> Result<f64> {
    let mut t = Tape::new();
    let a = t.constant(s);
    let b = t.constant(te);
    let l = kl_div(&mut t, a, b, temp, t2)?;
    Ok(t.item(l))
}

#[test]
fn cross_entropy_examples() {
    let uniform = ce_value(Tensor::zeros(&[2, 4]), one_hot(&[1, 3], 4).unwrap()).unwrap();
    assert!((uniform - ln(4.0)).abs() < 1e-12);

    let confident = Tensor::from_f64(&[1, 4], &[20.0, 0.0, 0.0, 0.0]).unwrap();
    let l = ce_value(confident, one_hot(&[0], 4).unwrap()).unwrap();
    assert!(l < 1e-8, "{l}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let z = rand_tensor(&mut rng, &[3, 5]).map(|v| 4.0 * v);
        let raw = Tensor::<f64>::from_fn(&[3, 5], |_| rng.random_range(0.0..1.0));
        let target = Tensor::from_fn(&[3, 5], |i| raw.data()[i] / raw.row(i / 5).iter().sum::<f64>());
        let got = ce_value(z.clone(), target.clone()).unwrap();
        assert!((got - ce_oracle(&z, &target)).abs() < 1e-7);
    }

    let nan = Tensor::from_f64(&[1, 2], &[f64::NAN, 0.0]).unwrap();
    assert!(matches!(ce_value(nan, one_hot(&[0], 2).unwrap()), Err(Error::Evaluation(_))));
    let bad = Tensor::from_f64(&[1, 2], &[0.5, 0.6]).unwrap();
    assert!(matches!(ce_value(Tensor::zeros(&[1, 2]), bad), Err(Error::InvalidConfig(_))));
}

#[test]
fn kl_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = rand_tensor(&mut rng, &[4, 6]);
    assert!(kl_value(p.clone(), p, 3.0, true).unwrap().abs() < 1e-9);

    for _ in 0..1000 {
        let a = rand_tensor(&mut rng, &[2, 5]).map(|v| 5.0 * v);
        let b = rand_tensor(&mut rng, &[2, 5]).map(|v| 5.0 * v);
        let temp = rng.random_range(0.5..5.0);
        let got = kl_value(a.clone(), b.clone(), temp, false).unwrap();
        assert!(got >= 0.0);
        assert!((got - kl_oracle(&a, &b, temp)).abs() < 1e-6);
    }

    let teacher = Tensor::from_f64(&[1, 2], &[0.0, 3f64.ln()]).unwrap();
    let got = kl_value(Tensor::zeros(&[1, 2]), teacher, 1.0, true).unwrap();
    let want = 0.25 * (0.5f64).ln() + 0.75 * (1.5f64).ln();
    assert!((got - want).abs() < 1e-12);
    assert!((want - 0.13081).abs() < 1e-5);

    // T² scaling.
    let a = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[2, 3]);
    let plain = kl_value(a.clone(), b.clone(), 3.0, false).unwrap();
    let scaled = kl_value(a.clone(), b.clone(), 3.0, true).unwrap();
    assert!((scaled - 9.0 * plain).abs() < 1e-12);

    assert!(matches!(kl_value(a.clone(), b.clone(), 0.0, true), Err(Error::InvalidConfig(_))));
    assert!(matches!(kl_value(a, b, -1.0, true), Err(Error::InvalidConfig(_))));
}

fn three_stage_config() -> NetConfig {
    NetConfig {
        in_channels: 3,
        input_height: 8,
        input_width: 8,
        stages: vec![
            StageSpec::new(3, 1, false),
            StageSpec::new(4, 1, true),
            StageSpec::new(5, 1, true),
        ],
        num_classes: 4,
        disc_hidden: 4,
        residual: false,
        activation: Activation::Relu,
    }
}

fn cls_value(net: &Network<f64>, mix: &MixBatch<f64>) -> (f64, Vec<f64>) {
    let mut t = Tape::new();
    let (l, fwd) = loss_cls_mixup(&mut t, net, mix).unwrap();
    (t.item(l), fwd.ce_terms.iter().map(|&v| t.item(v)).collect())
}

#[test]
fn cls_mixup_examples() {
    let cfg = three_stage_config();
    let mut net = Network::<f64>::build(cfg.clone(), 1).unwrap();
    let mix = toy_mix(&cfg, 4, 0.3, 2);

    // Decomposition into 3·K summands.
    let (total, terms) = cls_value(&net, &mix);
    assert_eq!(terms.len(), 9);
    assert!((total - terms.iter().sum::<f64>()).abs() < 1e-6);

    // Separate xj forward gives the same value as the row gather.
    let mut unpaired = mix.clone();
    unpaired.perm = None;
    assert!((cls_value(&net, &unpaired).0 - total).abs() < 1e-12);

    // λ = 1: the Mixup input is xi with target onehot(yi).
    let mix1 = toy_mix(&cfg, 4, 1.0, 2);
    let (t1, terms1) = cls_value(&net, &mix1);
    let per_input = |r: std::ops::Range<usize>| terms1[r].iter().sum::<f64>();
    assert_eq!(mix1.x_tilde, mix1.xi);
    assert_eq!(mix1.y_tilde, one_hot(&mix1.yi, 4).unwrap());
    assert!((per_input(6..9) - per_input(0..3)).abs() < 1e-12);
    assert!((t1 - (2.0 * per_input(0..3) + per_input(3..6))).abs() < 1e-12);

    // Uniform logits: every classifier costs ln C.
    for g in [ParamGroup::Backbone, ParamGroup::Branch] {
        for id in net.params.ids_in(g) {
            if net.params.entry(id).name.contains("classifier") {
                net.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    assert!((cls_value(&net, &mix).0 - 9.0 * ln(4.0)).abs() < 1e-9);
}

fn feature_value(a: Vec<Tensor<f64>>, b: Vec<Tensor<f64>>) -> Result<f64> {
    let mut t = Tape::new();
    let av: Vec<Var> = a.into_iter().map(|x| t.constant(x)).collect();
    let bv: Vec<Var> = b.into_iter().map(|x| t.constant(x)).collect();
    let l = loss_feature(&mut t, &av, &bv)?;
    Ok(t.item(l))
}

#[test]
fn feature_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_tensor(&mut rng, &[2, 3, 2, 2]);
    assert_eq!(feature_value(vec![a.clone(), a.clone()], vec![a.clone(), a.clone()]).unwrap(), 0.0);
    let ones = Tensor::full(&[3, 4, 2, 2], 1.0);
    assert!((feature_value(vec![ones], vec![Tensor::zeros(&[3, 4, 2, 2])]).unwrap() - 1.0).abs() < 1e-15);
    assert!(feature_value(vec![a.clone()], vec![Tensor::zeros(&[2, 3, 1, 1])]).is_err());
    assert!(feature_value(vec![a.clone()], vec![]).is_err());
}

#[test]
fn feature_loss_vanishes_for_affine_extractor() {
    let cfg = NetConfig {
        activation: Activation::Identity,
        ..toy_net_config()
    };
    let net = Network::<f64>::build(cfg.clone(), 4).unwrap();
    for step in 0..=10 {
        let lambda = step as f64 / 10.0;
        let mix = toy_mix(&cfg, 3, lambda, 11);
        let mut t = Tape::new();
        let (_, fwd) = loss_cls_mixup(&mut t, &net, &mix).unwrap();
        let ft = interpolate_features(&mut t, &fwd.xi.features, &fwd.xj.features, &mix.row_weights()).unwrap();
        let l = loss_feature(&mut t, &ft, &fwd.mix.features).unwrap();
        assert!(t.item(l).abs() < 1e-8, "λ={lambda}: {}", t.item(l));
    }
}

fn dis_value(net: &Network<f64>, a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    let mut t = Tape::new();
    let av: Vec<Var> = a.iter().map(|x| t.constant(x.clone())).collect();
    let bv: Vec<Var> = b.iter().map(|x| t.constant(x.clone())).collect();
    let l = loss_dis(&mut t, net, &av, &bv, DisRoute::Plain).unwrap();
    t.item(l)
}

fn disc_reference(net: &Network<f64>, k: usize, f: &Tensor<f64>) -> Vec<f64> {
    let d = &net.discriminators[k];
    let p = &net.params;
    let flat = f.reshape(&[f.batch(), f.row_len()]).unwrap();
    let h = matmul_oracle(&flat, p.get(d.hidden.weight), p.get(d.hidden.bias)).map(|v| v.max(0.0));
    let o = matmul_oracle(&h, p.get(d.out.weight), p.get(d.out.bias));
    o.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
}

#[test]
fn dis_loss_examples() {
    let cfg = toy_net_config();
    let (c, h, w) = cfg.feature_shape();
    let shape = [3, c, h, w];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut net = Network::<f64>::build(cfg.clone(), 3).unwrap();

    // Random case against a direct evaluation.
    for _ in 0..20 {
        let a: Vec<_> = (0..2).map(|_| rand_tensor(&mut rng, &shape)).collect();
        let b: Vec<_> = (0..2).map(|_| rand_tensor(&mut rng, &shape)).collect();
        let clampp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let mut want = 0.0;
        for k in 0..2 {
            let da = disc_reference(&net, k, &a[k]);
            let db = disc_reference(&net, k, &b[k]);
            want -= da.iter().zip(&db).map(|(x, y)| clampp(*x).ln() + (1.0 - clampp(*y)).ln()).sum::<f64>() / 3.0;
        }
        assert!((dis_value(&net, &a, &b) - want).abs() < 1e-6);
    }

    // Zero discriminators output 0.5 everywhere.
    zero_group(&mut net, ParamGroup::Discriminator);
    let a: Vec<_> = (0..2).map(|_| rand_tensor(&mut rng, &shape)).collect();
    assert!((dis_value(&net, &a, &a) - 2.0 * 2.0 * LN2).abs() < 1e-12);

    // Saturated: D(F̃) → 1, D(F_mix) → 0.
    for k in 0..2 {
        let d = net.discriminators[k].clone();
        net.params.get_mut(d.hidden.weight).data_mut()[..c * h * w].iter_mut().for_each(|v| *v = 1.0);
        net.params.get_mut(d.out.weight).data_mut()[0] = 1000.0;
        net.params.get_mut(d.out.bias).data_mut()[0] = -500.0;
    }
    let ones = vec![Tensor::full(&shape, 1.0); 2];
    let zeros = vec![Tensor::zeros(&shape); 2];
    let l = dis_value(&net, &ones, &zeros);
    assert!((0.0..1e-5).contains(&l), "{l}");
}

#[test]
fn b_logit_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = [0.3, 0.7];

    // Identical logits everywhere → 0.
    let mut t = Tape::new();
    let z = rand_tensor(&mut rng, &[2, 4]);
    let v: Vec<Var> = (0..2).map(|_| t.constant(z.clone())).collect();
    let l = loss_b_logit(&mut t, &v, &v, &v, &w, 3.0, true).unwrap();
    assert!(t.item(l).abs() < 1e-12);

    // Two branches against a direct evaluation.
    let bi: Vec<_> = (0..2).map(|_| rand_tensor(&mut rng, &[2, 4])).collect();
    let bj: Vec<_> = (0..2).map(|_| rand_tensor(&mut rng, &[2, 4])).collect();
    let bm: Vec<_> = (0..2).map(|_| rand_tensor(&mut rng, &[2, 4])).collect();
    let mut want = 0.0;
    for k in 0..2 {
        let tilde = crate::mixup::lerp_rows(&bi[k], &bj[k], &w).unwrap();
        want += 9.0 * (kl_oracle(&tilde, &bm[k], 3.0) + kl_oracle(&bm[k], &tilde, 3.0));
    }
    let mut t = Tape::new();
    let mut put = |xs: &[Tensor<f64>]| xs.iter().map(|x| t.constant(x.clone())).collect::<Vec<_>>();
    let (vi, vj, vm) = (put(&bi), put(&bj), put(&bm));
    let l = loss_b_logit(&mut t, &vi, &vj, &vm, &w, 3.0, true).unwrap();
    assert!((t.item(l) - want).abs() < 1e-6);
}

#[test]
fn b_logit_detached_targets_carry_no_gradient() {
    let mut store = crate::autodiff::ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let pi = store.add("i", ParamGroup::Branch, rand_tensor(&mut rng, &[2, 3]));
    let pm = store.add("m", ParamGroup::Branch, rand_tensor(&mut rng, &[2, 3]));
    let w = [0.4, 0.9];

    // Only the first KL direction: the Mixup logits appear solely as target.
    let mut t = Tape::new();
    let (vi, vm) = (t.param(pi, store.get(pi)), t.param(pm, store.get(pm)));
    let tilde = t.lerp_rows(vi, vi, &w).unwrap();
    let det = t.detach(vm);
    let l = kl_div(&mut t, tilde, det, 3.0, true).unwrap();
    t.backward(l).unwrap();
    assert!(t.param_grad(pm).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
    assert!(t.param_grad(pi).is_some());

    // Full term: pm's gradient is exactly the second direction's.
    let grad_full = {
        let mut t = Tape::new();
        let (vi, vm) = (t.param(pi, store.get(pi)), t.param(pm, store.get(pm)));
        let l = loss_b_logit(&mut t, &[vi], &[vi], &[vm], &w, 3.0, true).unwrap();
        t.backward(l).unwrap();
        t.param_grad(pm).unwrap()
    };
    let grad_second = {
        let mut t = Tape::new();
        let (vi, vm) = (t.param(pi, store.get(pi)), t.param(pm, store.get(pm)));
        let tilde = t.lerp_rows(vi, vi, &w).unwrap();
        let det = t.detach(tilde);
        let l = kl_div(&mut t, vm, det, 3.0, true).unwrap();
        t.backward(l).unwrap();
        t.param_grad(pm).unwrap()
    };
    assert_eq!(grad_full, grad_second);
}

#[test]
fn cls_h_examples() {
    let cfg = toy_net_config();
    let mut net = Network::<f64>::build(cfg.clone(), 5).unwrap();
    let mix = toy_mix(&cfg, 3, 0.35, 6);
    let run = |net: &Network<f64>, mix: &MixBatch<f64>, target: &Tensor<f64>| {
        let mut t = Tape::new();
        let (_, fwd) = loss_cls_mixup(&mut t, net, mix).unwrap();
        let ft = interpolate_features(&mut t, &fwd.xi.features, &fwd.xj.features, &mix.row_weights()).unwrap();
        let (l, ht, hm) = loss_cls_h(&mut t, net, &ft, &fwd.mix.features, target, true).unwrap();
        (t.item(l), t.value(ht).clone(), t.value(hm).clone())
    };

    let (l, ht, hm) = run(&net, &mix, &mix.y_tilde);
    let want = ce_oracle(&ht, &mix.y_tilde) + ce_oracle(&hm, &mix.y_tilde);
    assert!((l - want).abs() < 1e-6);

    let mix1 = toy_mix(&cfg, 3, 1.0, 6);
    let hard = one_hot(&mix1.yi, 3).unwrap();
    assert_eq!(run(&net, &mix1, &mix1.y_tilde).0, run(&net, &mix1, &hard).0);

    zero_group(&mut net, ParamGroup::Teacher);
    assert!((run(&net, &mix, &mix.y_tilde).0 - 2.0 * ln(3.0)).abs() < 1e-12);
}

#[test]
fn f_logit_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w = [0.25, 0.6, 1.0];
    let fi = rand_tensor(&mut rng, &[3, 4]);
    let fj = rand_tensor(&mut rng, &[3, 4]);
    let fm = rand_tensor(&mut rng, &[3, 4]);
    let ht = rand_tensor(&mut rng, &[3, 4]);
    let hm = rand_tensor(&mut rng, &[3, 4]);
    let value = |ht: &Tensor<f64>, hm: &Tensor<f64>| {
        let mut t = Tape::new();
        let v: Vec<Var> = [&fi, &fj, &fm, ht, hm].iter().map(|x| t.constant((*x).clone())).collect();
        let l = loss_f_logit(&mut t, v[0], v[1], v[2], v[3], v[4], &w, 2.0, true).unwrap();
        t.item(l)
    };
    let tilde = crate::mixup::lerp_rows(&fi, &fj, &w).unwrap();
    let want = 4.0 * (kl_oracle(&tilde, &hm, 2.0) + kl_oracle(&fm, &ht, 2.0));
    assert!((value(&ht, &hm) - want).abs() < 1e-6);
    // Teachers equal to their students.
    assert!(value(&fm, &tilde).abs() < 1e-12);
}

#[test]
fn teacher_gets_no_gradient_from_f_logit() {
    let cfg = toy_net_config();
    let net = Network::<f64>::build(cfg.clone(), 7).unwrap();
    let mix = toy_mix(&cfg, 3, 0.45, 8);
    let opts = LossOptions {
        weights: LossWeights {
            beta: 0.0,
            gamma: 0.0,
            mu: 1.0,
            temperature: 3.0,
        },
        switches: LossSwitches {
            f_logit: true,
            ..LossSwitches::none()
        },
        ..Default::default()
    };
    let mut t = Tape::new();
    let obj = mixskd_objective(&mut t, &net, &mix, &opts).unwrap();
    let lf = obj.parts[5].unwrap();
    t.backward(lf).unwrap();
    for id in net.params.ids_in(ParamGroup::Teacher) {
        let g = t.param_grad(id);
        assert!(g.is_none_or(|g| g.data().iter().all(|&v| v == 0.0)), "{}", net.params.entry(id).name);
    }
    let bb = net.backbone.classifier.weight;
    assert!(t.param_grad(bb).unwrap().max_abs_diff(&Tensor::zeros(&[3, 4])).unwrap() > 0.0);
}

#[test]
fn total_loss_examples() {
    let d = LossWeights::default();
    let r = total_loss([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &d).unwrap();
    assert_eq!(r.total, 21.0);
    let zero = LossWeights {
        beta: 0.0,
        gamma: 0.0,
        mu: 0.0,
        ..d
    };
    assert_eq!(total_loss([1.5, 2.0, 3.0, 4.0, 5.0, 6.0], &zero).unwrap().total, 1.5);
    let w = LossWeights {
        beta: 2.0,
        gamma: 3.0,
        mu: 5.0,
        ..d
    };
    assert_eq!(total_loss([1.0; 6], &w).unwrap().total, 21.0);
    match total_loss([1.0, 1.0, f64::NAN, 1.0, 1.0, 1.0], &d) {
        Err(Error::Evaluation(m)) => assert!(m.contains("dis"), "{m}"),
        other => panic!("{other:?}"),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..100 {
        let c: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.0..5.0));
        let w = LossWeights {
            beta: rng.random_range(0.0..3.0),
            gamma: rng.random_range(0.0..3.0),
            mu: rng.random_range(0.0..3.0),
            temperature: 3.0,
        };
        let r = total_loss(c, &w).unwrap();
        let want = c[0] + w.beta * c[1] + w.gamma * c[2] + w.mu * (c[3] + c[4] + c[5]);
        assert!((r.total - want).abs() < 1e-6);
    }

    let json = r.to_json(7, 0.25, 0.01);
    for key in COMPONENTS.iter().chain(&["step", "total", "lambda", "lr"]) {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn objective_report_matches_tape_and_switches() {
    let cfg = toy_net_config();
    let net = Network::<f64>::build(cfg.clone(), 9).unwrap();
    let mix = toy_mix(&cfg, 4, 0.6, 10);
    let w = LossWeights {
        beta: 0.7,
        gamma: 1.3,
        mu: 2.1,
        temperature: 3.0,
    };
    let full = {
        let mut t = Tape::new();
        let opts = LossOptions {
            weights: w,
            ..Default::default()
        };
        let obj = mixskd_objective(&mut t, &net, &mix, &opts).unwrap();
        assert!((t.item(obj.total) - obj.report.total).abs() < 1e-9);
        obj.report
    };
    assert!(full.components().iter().all(|&v| v >= 0.0));

    // Every subset of switches reports the reduced sum of the full components.
    for mask in 0..32u32 {
        let sw = LossSwitches {
            feature: mask & 1 != 0,
            dis: mask & 2 != 0,
            b_logit: mask & 4 != 0,
            cls_h: mask & 8 != 0,
            f_logit: mask & 16 != 0,
        };
        let mut t = Tape::new();
        let opts = LossOptions {
            weights: w,
            switches: sw,
            ..Default::default()
        };
        let r = mixskd_objective(&mut t, &net, &mix, &opts).unwrap().report;
        let on = [true, sw.feature, sw.dis, sw.b_logit, sw.cls_h, sw.f_logit];
        let mut c = full.components();
        for i in 0..6 {
            if on[i] {
                assert!((r.components()[i] - c[i]).abs() < 1e-12);
            } else {
                assert_eq!(r.components()[i], 0.0);
                c[i] = 0.0;
            }
        }
        assert!((r.total - weighted_total(&c, &w)).abs() < 1e-9);
    }
}

#[test]
fn full_objective_gradcheck() {
    let cfg = toy_net_config();
    let mut net = Network::<f64>::build(cfg.clone(), 21).unwrap();
    let mix = toy_mix(&cfg, 2, 0.37, 22);
    let opts = LossOptions::default();
    let ids: Vec<_> = net.params.ids().collect();
    let skeleton = net.clone();
    let report = gradcheck_params(
        &mut net.params,
        &ids,
        |tape, params| {
            let n = skeleton.with_params(params.clone());
            Ok(mixskd_objective(tape, &n, &mix, &opts)?.total)
        },
        &GradcheckOptions {
            max_coords: Some(6),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.checked > 50);
}

#[test]
fn per_row_lambdas_are_supported() {
    let cfg = toy_net_config();
    let net = Network::<f64>::build(cfg.clone(), 23).unwrap();
    let base = toy_mix(&cfg, 3, 0.5, 24);
    let mix = crate::mixup::make_mix_batch_rows(
        base.xi.clone(),
        base.xj.clone(),
        base.yi.clone(),
        base.yj.clone(),
        vec![0.1, 0.5, 0.9],
        3,
    )
    .unwrap();
    let mut t = Tape::new();
    let obj = mixskd_objective(&mut t, &net, &mix, &LossOptions::default()).unwrap();
    assert!(obj.report.total.is_finite());
}

#[test]
fn per_term_gradcheck_and_fault_injection() {
    let cfg = toy_net_config();
    let net = Network::<f64>::build(cfg.clone(), 31).unwrap();
    let mix = toy_mix(&cfg, 2, 0.42, 32);
    let check = GradcheckOptions {
        max_coords: Some(3),
        ..Default::default()
    };
    let rows = gradcheck_objective(&net, &mix, &LossOptions::default(), &check, None).unwrap();
    let names: Vec<_> = rows.iter().map(|r| r.term).collect();
    assert_eq!(names, ["cls_mixup", "feature", "dis", "b_logit", "cls_h", "f_logit", "total"]);
    assert!(rows.iter().all(|r| r.report.passed), "{rows:?}");

    let rows = gradcheck_objective(&net, &mix, &LossOptions::default(), &check, Some("feature")).unwrap();
    let failed: Vec<_> = rows.iter().filter(|r| !r.report.passed).map(|r| r.term).collect();
    assert_eq!(failed, ["feature"]);
}
