mod common;

use artn::data::Batch;
use artn::model::{artn_loss, dann_loss, ArchSpec, ArtnHyper, ArtnModel, BoundArtn};
use artn::nn::Mode;
use artn::tape::{Gradients, Tape};
use artn::Tensor64;
use common::{arch, batches, flat, hyper, norm, random, unrolled};

/// Objective gradients of all four networks for one loss evaluation.
struct Grads {
    g: Vec<f64>,
    t: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

fn grads_of(bound: &BoundArtn, grads: &Gradients<f64>) -> Grads {
    Grads {
        g: flat(&bound.g.grads_or_zero(grads)),
        t: flat(&bound.t.grads_or_zero(grads)),
        c: flat(&bound.c.grads_or_zero(grads)),
        d: flat(&bound.d.grads_or_zero(grads)),
    }
}

fn artn_grads(model: &ArtnModel<f64>, h: &ArtnHyper, bs: &Batch<f64>, bt: &Batch<f64>) -> Grads {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = artn_loss(model, &bound, h, bs, bt, 0.5, Mode::Train, &mut tape).unwrap();
    let g = tape.backward(out.objective).unwrap();
    grads_of(&bound, &g)
}

#[test]
fn target_pass_never_reaches_transform_parameters() {
    for bn in [false, true] {
        let model = ArtnModel::<f64>::new(&arch(&[4, 4, 4], 1, bn), 3).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xt = tape.constant(random(6, 3, 9));
        let (f_t, _) = model.forward_target(&mut tape, &bound, xt, Mode::Train).unwrap();
        let logits = model.c.forward(&mut tape, &bound.c, f_t, Mode::Train).unwrap();
        let loss = tape.softmax_cross_entropy(logits.output, &[0, 1, 0, 1, 1, 0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(bound.t.grads(&grads).iter().all(Option::is_none));
        for t in bound.t.grads_or_zero(&grads) {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        assert!(norm(&flat(&bound.g.grads_or_zero(&grads))) > 0.0);
    }
}

#[test]
fn target_domain_term_of_full_loss_is_blind_to_transform() {
    // L_t alone, taken from the joint pass used in training
    let model = ArtnModel::<f64>::new(&arch(&[4, 4], 1, true), 5).unwrap();
    let (bs, bt) = batches(6, 5, 1);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = artn_loss(&model, &bound, &hyper(1.0, 0.5), &bs, &bt, 0.3, Mode::Train, &mut tape).unwrap();
    let dt = out.outputs.domain_logits_target;
    let l_t = tape.softmax_cross_entropy(dt, &[1; 5]).unwrap();
    assert!((tape.value(l_t).item() - out.parts.l_t).abs() < 1e-15);
    let grads = tape.backward(l_t).unwrap();
    for t in bound.t.grads_or_zero(&grads) {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn zero_transform_reproduces_extractor_taps() {
    let mut model = ArtnModel::<f64>::new(&arch(&[4, 4, 4, 4], 1, false), 7).unwrap();
    for p in model.t.params.tensors_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(random(5, 3, 2));
    let src = model.forward_source(&mut tape, &bound, x, Mode::Eval).unwrap();
    let n = model.depth();
    for i in 0..n - 1 {
        let (t, g) = (tape.value(src.t_layers[i]), tape.value(src.g_layers[i]));
        for (a, b) in t.data().iter().zip(g.data()) {
            assert!((a - b).abs() <= 1e-12, "tap {i}: {a} vs {b}");
        }
    }
    assert!(tape.value(src.t_out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_source_matches_unrolled_recurrence() {
    for (stride, seed) in [(1, 11), (2, 12), (1, 13)] {
        let model = ArtnModel::<f64>::new(&arch(&[5, 5, 5], stride, false), seed).unwrap();
        let x = random(7, 3, seed);
        let (g, t_out) = unrolled(&model, &x);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let xv = tape.constant(x);
        let src = model.forward_source(&mut tape, &bound, xv, Mode::Eval).unwrap();
        for (a, b) in tape.value(src.t_out).data().iter().zip(&t_out) {
            assert!((a - b).abs() <= 1e-10, "stride {stride}: {a} vs {b}");
        }
        for (a, b) in tape.value(src.f_s).data().iter().zip(g.last().unwrap()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn transform_output_feeds_both_parameter_sets() {
    let model = ArtnModel::<f64>::new(&arch(&[4, 4, 4], 1, true), 21).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(random(6, 3, 4));
    let src = model.forward_source(&mut tape, &bound, x, Mode::Train).unwrap();
    let loss = tape.sum(src.t_out);
    let grads = tape.backward(loss).unwrap();
    assert!(norm(&flat(&bound.g.grads_or_zero(&grads))) > 0.0);
    assert!(norm(&flat(&bound.t.grads_or_zero(&grads))) > 0.0);
}

#[test]
fn forward_target_is_the_extractor_alone() {
    let model = ArtnModel::<f64>::new(&arch(&[4, 4], 1, true), 8).unwrap();
    let x = random(5, 3, 6);
    for mode in [Mode::Train, Mode::Eval] {
        let mut t1 = Tape::new();
        let b1 = model.bind(&mut t1);
        let x1 = t1.constant(x.clone());
        let (f_t, _) = model.forward_target(&mut t1, &b1, x1, mode).unwrap();
        let mut t2 = Tape::new();
        let b2 = model.g.bind(&mut t2);
        let x2 = t2.constant(x.clone());
        let g = model.g.forward(&mut t2, &b2, x2, mode).unwrap();
        assert!(t1.value(f_t).bitwise_eq(t2.value(g.output)));
    }
    let a = model.predict_target(&x).unwrap();
    let b = model.predict_target(&x).unwrap();
    assert!(a.bitwise_eq(&b));
}

#[test]
fn reported_total_recomposes_parts() {
    let model = ArtnModel::<f64>::new(&arch(&[4, 4], 1, true), 2).unwrap();
    let (bs, bt) = batches(6, 4, 3);
    for (lambda, beta) in [(0.0, 0.0), (1.0, 0.2), (0.5, 0.1), (0.7, 3.0)] {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = artn_loss(
            &model,
            &bound,
            &hyper(lambda, beta),
            &bs,
            &bt,
            0.4,
            Mode::Train,
            &mut tape,
        )
        .unwrap();
        let p = out.parts;
        assert!((out.total - (p.l_c - lambda * (p.l_s + p.l_t) + beta * p.r)).abs() <= 1e-12);
        // the optimized scalar is L_c + L_s + L_t + β·r; reversal happens in the backward pass
        let objective = tape.value(out.objective).item();
        assert!((objective - (p.l_c + p.l_s + p.l_t + beta * p.r)).abs() <= 1e-12);
        assert!((-1.0..=1.0).contains(&p.r));
    }
}

#[test]
fn no_adaptation_reduces_to_supervised_loss() {
    // no batch norm, so source rows do not see target statistics
    let model = ArtnModel::<f64>::new(&arch(&[4, 4], 1, false), 4).unwrap();
    let (bs, bt) = batches(6, 4, 8);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = artn_loss(&model, &bound, &hyper(0.0, 0.0), &bs, &bt, 0.5, Mode::Train, &mut tape).unwrap();
    assert!((out.total - out.parts.l_c).abs() <= 1e-12);
    let full = grads_of(&bound, &tape.backward(out.objective).unwrap());

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(bs.x.clone());
    let src = model.forward_source(&mut tape, &bound, x, Mode::Train).unwrap();
    let logits = model.c.forward(&mut tape, &bound.c, src.t_out, Mode::Train).unwrap();
    let l_c = tape
        .softmax_cross_entropy(logits.output, bs.class_labels.as_ref().unwrap())
        .unwrap();
    let sup = grads_of(&bound, &tape.backward(l_c).unwrap());
    for (a, b) in full.g.iter().zip(&sup.g) {
        assert!((a - b).abs() <= 1e-12);
    }
    for (a, b) in full.t.iter().zip(&sup.t) {
        assert!((a - b).abs() <= 1e-12);
    }
    // D still learns to tell the domains apart
    assert!(norm(&full.d) > 0.0);
}

#[test]
fn identical_features_give_regularizer_minus_one() {
    // G layer 2 and T layer 2 are identities, T layer 1 is zero, inputs
    // positive: t_out = f_s = G_1(x)
    let mut a = arch(&[3, 3], 1, false);
    a.input_dim = 3;
    let mut model = ArtnModel::<f64>::new(&a, 1).unwrap();
    let eye = Tensor64::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    {
        let g = model.g.params.tensors_mut();
        g[0] = eye.clone();
        g[1] = Tensor64::zeros(&[3]);
        g[2] = eye.clone();
        g[3] = Tensor64::zeros(&[3]);
    }
    {
        let t = model.t.params.tensors_mut();
        t[0] = Tensor64::zeros(&[3, 3]);
        t[1] = Tensor64::zeros(&[3]);
        t[2] = eye;
        t[3] = Tensor64::zeros(&[3]);
    }
    let mut bs = batches(4, 4, 2).0;
    bs.x = bs.x.map(|v| v.abs() + 0.1);
    let bt = batches(4, 4, 2).1;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = artn_loss(&model, &bound, &hyper(1.0, 1.0), &bs, &bt, 0.5, Mode::Train, &mut tape).unwrap();
    assert!(tape.value(out.outputs.f_s).bitwise_eq(tape.value(out.outputs.t_out)));
    assert!((out.parts.r + 1.0).abs() < 1e-6, "r = {}", out.parts.r);
}

#[test]
fn reversal_scales_domain_gradient_into_extractor() {
    // ∇θg objective(λ) − ∇θg objective(0) = −λ·∇θg (L_s + L_t) computed
    // without any reversal
    let model = ArtnModel::<f64>::new(&arch(&[4, 4], 1, true), 6).unwrap();
    let (bs, bt) = batches(6, 6, 5);
    let base = artn_grads(&model, &hyper(0.0, 0.0), &bs, &bt);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xs = tape.constant(bs.x.clone());
    let xt = tape.constant(bt.x.clone());
    let (g_src, _, f_t, _) = model.forward_joint(&mut tape, &bound, xs, xt, Mode::Train).unwrap();
    let (t_out, _, _) = model.transform(&mut tape, &bound, &g_src, Mode::Train).unwrap();
    let stacked = tape.concat_rows(&[t_out, f_t]).unwrap();
    let dom = model.d.forward(&mut tape, &bound.d, stacked, Mode::Train).unwrap();
    let ds = tape.slice_rows(dom.output, 0, 6).unwrap();
    let dt = tape.slice_rows(dom.output, 6, 6).unwrap();
    let l_s = tape.softmax_cross_entropy(ds, &[0; 6]).unwrap();
    let l_t = tape.softmax_cross_entropy(dt, &[1; 6]).unwrap();
    let l = tape.add(l_s, l_t).unwrap();
    let plain = grads_of(&bound, &tape.backward(l).unwrap());

    for c in [0.5, 1.0] {
        let rev = artn_grads(&model, &hyper(c, 0.0), &bs, &bt);
        for ((r, b), p) in rev.g.iter().zip(&base.g).zip(&plain.g) {
            let want = -c * p;
            let got = r - b;
            assert!(
                (got - want).abs() <= 1e-6 * want.abs().max(1e-8),
                "c={c}: {got} vs {want}"
            );
        }
        // D itself descends the unreversed domain loss
        for ((r, b), p) in rev.d.iter().zip(&base.d).zip(&plain.d) {
            assert!((r - p).abs() <= 1e-10 && (b - p).abs() <= 1e-10);
        }
    }
}

#[test]
fn regularizer_keeps_gradients_alive_when_discriminator_saturates() {
    // separated domains and a discriminator scaled up until the reversed
    // domain gradient into G has vanished
    let a = ArchSpec {
        input_dim: 2,
        feature_widths: vec![16, 16],
        classifier_hidden: vec![],
        domain_hidden: vec![],
        classes: 2,
        batch_norm: false,
        residual_stride: 1,
    };
    let mut model = ArtnModel::<f64>::new(&a, 3).unwrap();
    let shift = |t: Tensor64, by: f64| t.map(|v| v + by);
    let bs = Batch {
        x: shift(random(8, 2, 1), 3.0),
        class_labels: Some((0..8).map(|i| i % 2).collect()),
        domain_label: 0,
    };
    let bt = Batch {
        x: shift(random(8, 2, 2), -3.0),
        class_labels: None,
        domain_label: 1,
    };
    // fit D alone on the fixed features
    let mut opt = artn::nn::SgdState::new(&model.d.params, 0.05, 0.9).unwrap();
    for _ in 0..300 {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = artn_loss(&model, &bound, &hyper(1.0, 0.0), &bs, &bt, 1.0, Mode::Train, &mut tape).unwrap();
        let grads = tape.backward(out.objective).unwrap();
        artn::nn::sgd_step(&mut model.d.params, &bound.d.grads(&grads), &mut opt).unwrap();
    }
    let domain_grad = |m: &ArtnModel<f64>| {
        let with = artn_grads(m, &hyper(1.0, 0.0), &bs, &bt);
        let without = artn_grads(m, &hyper(0.0, 0.0), &bs, &bt);
        let d: Vec<f64> = with.g.iter().zip(&without.g).map(|(a, b)| a - b).collect();
        norm(&d)
    };
    let mut tries = 0;
    while domain_grad(&model) >= 1e-6 {
        for p in model.d.params.tensors_mut() {
            *p = p.map(|v| v * 4.0);
        }
        tries += 1;
        assert!(tries < 20, "discriminator never saturated");
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = artn_loss(&model, &bound, &hyper(0.0, 1.0), &bs, &bt, 1.0, Mode::Train, &mut tape).unwrap();
    // disjoint ReLU supports would make the cosine flat, not just small
    assert!(out.parts.r.abs() > 0.05, "degenerate fixture: r = {}", out.parts.r);
    let with_r = artn_grads(&model, &hyper(0.0, 1.0), &bs, &bt);
    let without_r = artn_grads(&model, &hyper(0.0, 0.0), &bs, &bt);
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
    let mut r_grad = diff(&with_r.g, &without_r.g);
    r_grad.extend(diff(&with_r.t, &without_r.t));
    assert!(norm(&r_grad) > 1e-4, "regularizer gradient {}", norm(&r_grad));
}

#[test]
fn zero_beta_logs_regularizer_without_gradient() {
    let model = ArtnModel::<f64>::new(&arch(&[4, 4], 1, true), 9).unwrap();
    let (bs, bt) = batches(6, 4, 1);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = artn_loss(&model, &bound, &hyper(1.0, 0.0), &bs, &bt, 0.5, Mode::Train, &mut tape).unwrap();
    assert!(out.parts.r != 0.0 && out.parts.r.is_finite());
    let zero = grads_of(&bound, &tape.backward(out.objective).unwrap());
    // same gradients as a loss that never builds the regularizer into the objective
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = artn_loss(&model, &bound, &hyper(1.0, 0.0), &bs, &bt, 0.5, Mode::Train, &mut tape).unwrap();
    let p = out.parts;
    assert!((tape.value(out.objective).item() - (p.l_c + p.l_s + p.l_t)).abs() <= 1e-12);
    let again = grads_of(&bound, &tape.backward(out.objective).unwrap());
    assert_eq!(zero.g, again.g);
    assert_eq!(zero.t, again.t);
    assert_eq!(zero.c, again.c);
    assert_eq!(zero.d, again.d);
}

#[test]
fn dann_domain_loss_is_ln2_at_near_uniform_logits() {
    let ln2 = std::f64::consts::LN_2;
    for seed in 1..=5 {
        let mut model = ArtnModel::<f64>::new(&arch(&[8, 8], 1, true), seed).unwrap();
        // shrink D so its logits sit near zero
        for p in model.d.params.tensors_mut() {
            *p = p.map(|v| v * 0.1);
        }
        let (bs, bt) = batches(32, 32, seed);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = dann_loss(&model, &bound, &hyper(1.0, 0.0), &bs, &bt, 0.0, Mode::Train, &mut tape).unwrap();
        assert!((out.parts.l_s - ln2).abs() < 0.1, "seed {seed}: L_s {}", out.parts.l_s);
        assert!((out.parts.l_t - ln2).abs() < 0.1, "seed {seed}: L_t {}", out.parts.l_t);
        assert_eq!(out.parts.r, 0.0);
    }
}

#[test]
fn dann_without_lambda_is_source_only() {
    let model = ArtnModel::<f64>::new(&arch(&[4, 4], 1, true), 10).unwrap();
    let (bs, bt) = batches(6, 5, 2);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = dann_loss(&model, &bound, &hyper(0.0, 0.0), &bs, &bt, 0.5, Mode::Train, &mut tape).unwrap();
    assert!((out.total - out.parts.l_c).abs() <= 1e-12);
    let full = grads_of(&bound, &tape.backward(out.objective).unwrap());
    assert!(full.t.iter().all(|&v| v == 0.0));

    // same G gradient as supervised training on the source rows alone
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(bs.x.clone());
    let (f_s, _) = model.forward_target(&mut tape, &bound, x, Mode::Train).unwrap();
    let logits = model.c.forward(&mut tape, &bound.c, f_s, Mode::Train).unwrap();
    let l_c = tape
        .softmax_cross_entropy(logits.output, bs.class_labels.as_ref().unwrap())
        .unwrap();
    let sup = grads_of(&bound, &tape.backward(l_c).unwrap());
    for (a, b) in full.g.iter().zip(&sup.g) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn loss_is_deterministic() {
    let model = ArtnModel::<f64>::new(&arch(&[4, 4], 1, true), 12).unwrap();
    let (bs, bt) = batches(6, 4, 3);
    let run = || {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = artn_loss(&model, &bound, &hyper(1.0, 0.2), &bs, &bt, 0.2, Mode::Train, &mut tape).unwrap();
        (
            out.parts,
            flat(&bound.g.grads_or_zero(&tape.backward(out.objective).unwrap())),
        )
    };
    assert_eq!(run(), run());
}
