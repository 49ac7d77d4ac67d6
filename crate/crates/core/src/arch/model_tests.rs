use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::arch::calibrate::{calibrate_width, equivalent_spec, relative_gap, PARITY_TOLERANCE};
use crate::arch::spec::{StageSpec, Variant};
use crate::autograd::{finite_diff, relative_error};
use crate::layers::{rcl_forward, RclParams};

fn randomize<T: Element>(model: &mut Model<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in model.params_mut().iter_mut() {
        if p.role.trainable() && p.role != ParamRole::BnGamma {
            p.value = Tensor::from_fn(p.value.shape(), |_| {
                T::from_f64(rng.gen_range(-scale..scale))
            });
        }
    }
}

fn random_input<T: Element>(shape: impl Into<Shape>, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-1.0..1.0)))
}

fn zero_units<T: Element>(model: &mut Model<T>) {
    for (name, p) in model.params_mut().iter_mut() {
        if name.starts_with("block") && !name.contains(".bn.") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
}

#[test]
fn built_count_matches_analytic_count() {
    for v in Variant::ALL {
        for arch in [
            ArchSpec::cifar(v, 10),
            ArchSpec::cifar(v, 100),
            ArchSpec::miniature(v, 10),
            ArchSpec::small(v, 10),
            ArchSpec::cifar_reduced(v, 10),
        ] {
            let m = build_model::<f32>(&arch).unwrap();
            assert_eq!(param_count(&m), arch.param_count().unwrap(), "{v}");
        }
    }
}

#[test]
fn empty_store_counts_zero() {
    assert_eq!(ParamStore::<f32>::default().trainable_count(), 0);
}

#[test]
fn count_is_independent_of_k() {
    let counts: Vec<usize> = (0..=3)
        .map(|k| {
            param_count(
                &build_model::<f32>(&ArchSpec::cifar(Variant::Irrcnn, 10).with_k(k)).unwrap(),
            )
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
}

#[test]
fn cifar_logits_shape() {
    for classes in [10, 100] {
        let m = build_model::<f32>(&ArchSpec::cifar(Variant::Irrcnn, classes)).unwrap();
        let x = random_input::<f32>((1, 3, 32, 32), 1);
        let logits = m.logits(&x, Mode::Infer).unwrap();
        assert_eq!(logits.shape().dims(), [1, classes, 1, 1]);
    }
}

#[test]
fn probabilities_sum_to_one() {
    let mut m = build_model::<f64>(&ArchSpec::miniature(Variant::Eirn, 10)).unwrap();
    randomize(&mut m, 3, 0.3);
    let p = m
        .predict(&random_input((3, 3, 8, 8), 4), Mode::Infer)
        .unwrap();
    for n in 0..3 {
        let s: f64 = (0..10).map(|k| p.at(n, k, 0, 0)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn residual_identity_for_residual_variants() {
    for v in [Variant::Irrcnn, Variant::Eirn] {
        let mut m = build_model::<f32>(&ArchSpec::miniature(v, 10)).unwrap();
        randomize(&mut m, 5, 0.5);
        zero_units(&mut m);
        let x = random_input::<f32>((2, 8, 8, 8), 6);
        let out = m.block_forward(0, &x, Mode::Train).unwrap();
        assert_eq!(out.pre_bn, x, "{v}");
        assert_eq!(out.output.shape(), x.shape());
    }
}

#[test]
fn no_skip_path_for_plain_variants() {
    for v in [Variant::Ircnn, Variant::Ein] {
        let mut m = build_model::<f32>(&ArchSpec::miniature(v, 10)).unwrap();
        zero_units(&mut m);
        let x = random_input::<f32>((2, 8, 8, 8), 6);
        let out = m.block_forward(0, &x, Mode::Infer).unwrap();
        assert!(out.pre_bn.data().iter().all(|&v| v == 0.0), "{v}");
    }
}

#[test]
fn unit_preserves_shape_and_places_branches() {
    let mut m = build_model::<f64>(&ArchSpec::miniature(Variant::Irrcnn, 10)).unwrap();
    assert_eq!(m.unit_spec(0).unwrap().alloc, [2, 4, 2]);
    randomize(&mut m, 7, 0.4);
    let x = random_input::<f64>((2, 8, 8, 8), 8);
    let y = m.unit_forward(0, &x).unwrap();
    assert_eq!(y.shape(), x.shape());

    let ps = m.params();
    let branch = RclParams {
        feed_forward: ps.tensor("block1.b1x1.rcl.ff").unwrap().clone(),
        recurrent: ps.tensor("block1.b1x1.rcl.rec").unwrap().clone(),
        bias: ps.tensor("block1.b1x1.rcl.bias").unwrap().clone(),
        steps: 2,
    };
    let expect = rcl_forward(&x, &branch, Activation::Relu).unwrap();
    assert_eq!(y.slice_channels(0, 2).unwrap(), expect);
}

#[test]
fn zero_unit_gives_zero_output() {
    let m = build_model::<f32>(&ArchSpec::miniature(Variant::Irrcnn, 10)).unwrap();
    let x = random_input::<f32>((2, 8, 8, 8), 9);
    let y = m.unit_forward(0, &x).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn block_shape_preserved_over_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..12 {
        let c = rng.gen_range(3..12);
        let a = rng.gen_range(1..c - 1);
        let b = rng.gen_range(1..c - a);
        let v = Variant::ALL[rng.gen_range(0..4)];
        let mut arch = ArchSpec::miniature(v, 3).with_k(rng.gen_range(0..3));
        arch.stem = vec![c];
        arch.stages = vec![StageSpec {
            alloc: Some([a, b, c - a - b]),
            ..StageSpec::new(c, false)
        }];
        let m = build_model::<f32>(&arch).unwrap();
        let x = random_input::<f32>((2, c, 5, 5), 11);
        assert_eq!(
            m.block_forward(0, &x, Mode::Train).unwrap().output.shape(),
            x.shape()
        );
    }
}

#[test]
fn bad_alloc_is_rejected() {
    let mut arch = ArchSpec::miniature(Variant::Irrcnn, 10);
    arch.stages[0].alloc = Some([2, 2, 2]);
    assert!(matches!(build_model::<f32>(&arch), Err(Error::Config(_))));
}

#[test]
fn transition_inference_is_deterministic_without_pool() {
    let mut m = build_model::<f32>(&ArchSpec::miniature(Variant::Irrcnn, 10)).unwrap();
    randomize(&mut m, 12, 0.3);
    assert!(!m.transition_spec(2).unwrap().pool);
    let x = random_input::<f32>((2, 8, 1, 1), 13);
    let a = m.transition_forward(2, &x, Mode::Infer, 1).unwrap();
    let b = m.transition_forward(2, &x, Mode::Infer, 2).unwrap();
    assert_eq!(a, b);
    let c = m.transition_forward(2, &x, Mode::Train, 1).unwrap();
    assert_ne!(a, c);
}

#[test]
fn transition_conv_count() {
    let mut arch = ArchSpec::miniature(Variant::Irrcnn, 10);
    arch.stem = vec![16];
    arch.stages = vec![StageSpec::new(32, true)];
    let m = build_model::<f32>(&arch).unwrap();
    let layer = m.layers().iter().find(|l| l.name == "trans1.conv").unwrap();
    assert_eq!(layer.params, 4640);
}

#[test]
fn cifar_layer_list_traces_spatial_extent() {
    let m = build_model::<f32>(&ArchSpec::cifar(Variant::Irrcnn, 10)).unwrap();
    let pools: Vec<usize> = m
        .layers()
        .iter()
        .filter(|l| l.kind.starts_with("maxpool"))
        .map(|l| l.output[1])
        .collect();
    assert_eq!(pools, [15, 7]);
    assert_eq!(m.layers().last().unwrap().output, [10, 1, 1]);
    assert_eq!(
        m.layers(),
        build_model::<f32>(&ArchSpec::cifar(Variant::Irrcnn, 10))
            .unwrap()
            .layers()
    );
    let total: usize = m.layers().iter().map(|l| l.params).sum();
    assert_eq!(total, param_count(&m));
}

#[test]
fn training_pass_updates_running_stats() {
    let mut m = build_model::<f32>(&ArchSpec::miniature(Variant::Irrcnn, 10)).unwrap();
    randomize(&mut m, 14, 0.5);
    let before = m.params().tensor("stem1.bn.running_mean").unwrap().clone();
    let mut tape = Tape::new();
    let x = tape.input(random_input::<f32>((4, 3, 8, 8), 15));
    let mut ctx = ForwardCtx::new(Mode::Train, 0);
    m.forward(&mut tape, x, &mut ctx).unwrap();
    m.commit_running_stats(&mut ctx).unwrap();
    assert_ne!(m.params().tensor("stem1.bn.running_mean").unwrap(), &before);

    let before = m.params().clone();
    let mut ctx = ForwardCtx::new(Mode::Calibrate, 0);
    let mut tape = Tape::new();
    let x = tape.input(random_input::<f32>((4, 3, 8, 8), 15));
    m.forward(&mut tape, x, &mut ctx).unwrap();
    m.commit_running_stats(&mut ctx).unwrap();
    assert_eq!(m.params(), &before);
}

#[test]
fn block_gradient_matches_finite_differences() {
    let mut arch = ArchSpec::miniature(Variant::Irrcnn, 10).with_activation(Activation::Elu);
    arch.stem = vec![4];
    let mut m = build_model::<f64>(&arch).unwrap();
    randomize(&mut m, 16, 0.5);
    let x = random_input::<f64>((2, 4, 4, 4), 17);
    let weights = random_input::<f64>((2, 4, 4, 4), 18);
    let loss = |tape: &mut Tape<f64>, xv: Var, m: &Model<f64>| {
        let mut binder = Binder::new(m);
        let mut ctx = ForwardCtx::new(Mode::Train, 0);
        let (y, _) = m.block_on_tape(tape, &mut binder, 0, xv, &mut ctx).unwrap();
        let w = tape.input(weights.clone());
        let z = tape.add(y, w).unwrap();
        tape.sum_squares(z)
    };
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let l = loss(&mut tape, xv, &m);
    let grads = tape.backward_full(l).unwrap();
    let numeric = finite_diff(
        |t| {
            let mut tape = Tape::new();
            let v = tape.input(t.clone());
            let l = loss(&mut tape, v, &m);
            tape.value(l).data()[0]
        },
        &x,
        1e-5,
    );
    assert!(relative_error(grads.get(xv).unwrap(), &numeric) < 1e-4);

    let name = "block1.b3x3.rcl.rec";
    let base = m.params().tensor(name).unwrap().clone();
    let analytic = grads.into_grad_map(&tape)[name].clone();
    let numeric = finite_diff(
        |t| {
            let mut mm = m.clone();
            *mm.params_mut().tensor_mut(name).unwrap() = t.clone();
            let mut tape = Tape::new();
            let v = tape.input(x.clone());
            let l = loss(&mut tape, v, &mm);
            tape.value(l).data()[0]
        },
        &base,
        1e-5,
    );
    assert!(relative_error(&analytic, &numeric) < 1e-4);
}

#[test]
fn untied_chain_reproduces_recurrent_layer_when_unrolled() {
    use crate::layers::{rcl_on_tape, untied_chain_on_tape, ChainWiring, RclVars};
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = random_input::<f64>((2, 3, 5, 5), 20);
    let wf = Tensor::from_fn((4, 3, 3, 3), |_| rng.gen_range(-0.4..0.4));
    let wr = Tensor::from_fn((4, 4, 3, 3), |_| rng.gen_range(-0.4..0.4));
    let bias = Tensor::from_fn((1, 4, 1, 1), |_| rng.gen_range(-0.4..0.4));
    for k in 0..=3 {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let vars = RclVars {
            feed_forward: tape.input(wf.clone()),
            recurrent: tape.input(wr.clone()),
            bias: tape.input(bias.clone()),
        };
        let tied = rcl_on_tape(&mut tape, xv, &vars, k, Activation::Relu).unwrap();
        let zero = tape.input(Tensor::zeros((1, 4, 1, 1)));
        let mut convs = vec![(vars.feed_forward, vars.bias)];
        convs.extend((0..k).map(|_| (vars.recurrent, zero)));
        let untied = untied_chain_on_tape(
            &mut tape,
            xv,
            &convs,
            Activation::Relu,
            ChainWiring::Unrolled,
        )
        .unwrap();
        let diff = tape.value(tied).max_abs_diff(tape.value(untied)).unwrap();
        assert!(diff < 1e-12, "k={k}: {diff}");
    }
}

#[test]
fn shipped_cifar_variants_reach_parity() {
    let arch = ArchSpec::cifar(Variant::Irrcnn, 10);
    let counts: Vec<usize> = Variant::ALL
        .iter()
        .map(|&v| equivalent_spec(&arch, v).unwrap().param_count().unwrap())
        .collect();
    for a in &counts {
        for b in &counts {
            assert!(relative_gap(*a, *b) <= PARITY_TOLERANCE, "{counts:?}");
        }
    }
    let ein = calibrate_width(&arch, Variant::Ein).unwrap();
    assert!(ein.width.as_f64() < 1.0);
    assert!(ein.discrepancy() < 0.01);
}
