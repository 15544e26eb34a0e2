//! Finite-difference checks of every differentiable op in 64-bit precision.

use std::sync::Arc;

use dfkd::datagen::{
    in_batch_augment, prior_loss, stats_forward, AugmentSet, StatMetric, STAT_EPS,
};
use dfkd::model::{ArchSpec, BnTarget, ForwardOptions, Model};
use dfkd::quant::QuantParams;
use dfkd::tensor::gradcheck::{grad_check, relative_error, weighted_readout};
use dfkd::tensor::ops::ResampleMap;
use dfkd::tensor::{Graph, Tensor, Var};
use dfkd::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OP_TOL: f64 = 1e-4;
const COMPOSITE_TOL: f64 = 1e-3;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(
        shape.to_vec(),
        0.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

fn unit(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(
        shape.to_vec(),
        0.05,
        0.95,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

fn check<F>(name: &str, tol: f64, inputs: &[Tensor<f64>], f: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let r = grad_check(f, inputs).unwrap();
    assert!(r.passes(tol), "{name}: {r:?}");
}

#[test]
fn elementwise_ops() {
    let a = rand(&[3, 4], 1);
    let b = rand(&[3, 4], 2).map(|v| v.abs() + 0.5);
    check("add", OP_TOL, &[a.clone(), b.clone()], |_, v| {
        weighted_readout(v[0].add(v[1])?, 1)
    });
    check("sub", OP_TOL, &[a.clone(), b.clone()], |_, v| {
        weighted_readout(v[0].sub(v[1])?, 2)
    });
    check("mul", OP_TOL, &[a.clone(), b.clone()], |_, v| {
        weighted_readout(v[0].mul(v[1])?, 3)
    });
    check("div", OP_TOL, &[a.clone(), b.clone()], |_, v| {
        weighted_readout(v[0].div(v[1])?, 4)
    });
    check("exp", OP_TOL, &[a.clone()], |_, v| {
        weighted_readout(v[0].exp(), 5)
    });
    check("ln", OP_TOL, &[b.clone()], |_, v| {
        weighted_readout(v[0].ln(), 6)
    });
    check("sqrt", OP_TOL, &[b.clone()], |_, v| {
        weighted_readout(v[0].sqrt(), 7)
    });
    check("square", OP_TOL, &[a.clone()], |_, v| {
        weighted_readout(v[0].square(), 8)
    });
    check("relu", OP_TOL, &[a.clone()], |_, v| {
        weighted_readout(v[0].relu(), 9)
    });
    check("scale", OP_TOL, &[a.clone()], |_, v| {
        weighted_readout(v[0].scale(-2.5).add_scalar(1.0).neg(), 10)
    });
    check("mean", OP_TOL, &[a.clone()], |_, v| {
        Ok(v[0].square().mean())
    });
    let mask = rand(&[3, 4], 3);
    check("mul_const", OP_TOL, &[a.clone()], |_, v| {
        weighted_readout(v[0].mul_const(&mask)?, 11)
    });
    check("reshape", OP_TOL, &[a.clone()], |_, v| {
        weighted_readout(v[0].reshape([4, 3])?.square(), 12)
    });
    check("select", OP_TOL, &[a.clone()], |_, v| {
        weighted_readout(v[0].select(&[2, 0, 2])?, 13)
    });
    check("concat", OP_TOL, &[a.clone(), b.clone()], |_, v| {
        weighted_readout(Var::concat(&[v[0], v[1]])?, 14)
    });
    check("weighted_sum", OP_TOL, &[a.clone(), b.clone()], |_, v| {
        Var::weighted_sum(&[(0.3, v[0].square().mean()), (-1.7, v[1].sum())])
    });
}

#[test]
fn conv_linear_pool() {
    let x = rand(&[2, 3, 5, 5], 1);
    let w = rand(&[4, 3, 3, 3], 2);
    let bias = rand(&[4], 3);
    check(
        "conv2d s1 p1",
        OP_TOL,
        &[x.clone(), w.clone(), bias.clone()],
        |_, v| weighted_readout(v[0].conv2d(v[1], Some(v[2]), 1, 1)?, 1),
    );
    check("conv2d s2 p0", OP_TOL, &[x.clone(), w.clone()], |_, v| {
        weighted_readout(v[0].conv2d(v[1], None, 2, 0)?, 2)
    });
    let w1 = rand(&[4, 3, 1, 1], 4);
    check("conv2d 1x1 s2", OP_TOL, &[x.clone(), w1], |_, v| {
        weighted_readout(v[0].conv2d(v[1], None, 2, 0)?, 3)
    });
    let xl = rand(&[3, 6], 5);
    let wl = rand(&[4, 6], 6);
    let bl = rand(&[4], 7);
    check("linear", OP_TOL, &[xl, wl, bl], |_, v| {
        weighted_readout(v[0].linear(v[1], Some(v[2]))?, 4)
    });
    check("avg_pool2d", OP_TOL, &[rand(&[2, 2, 4, 4], 8)], |_, v| {
        weighted_readout(v[0].avg_pool2d(2, 2)?, 5)
    });
    check("global_avg_pool", OP_TOL, &[x.clone()], |_, v| {
        weighted_readout(v[0].global_avg_pool()?, 6)
    });
    check("gaussian_smooth", OP_TOL, &[x], |_, v| {
        weighted_readout(v[0].gaussian_smooth(5, 1.0)?, 7)
    });
}

#[test]
fn normalization_ops() {
    let x = rand(&[4, 3, 3, 3], 1).map(|v| 0.7 * v + 0.2);
    let gamma = rand(&[3], 2);
    let beta = rand(&[3], 3);
    check(
        "batch_norm train",
        OP_TOL,
        &[x.clone(), gamma.clone(), beta.clone()],
        |_, v| weighted_readout(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0, 1),
    );
    let rm = rand(&[3], 4);
    let rv = rand(&[3], 5).map(|v| v.abs() + 0.3);
    check(
        "batch_norm eval",
        OP_TOL,
        &[x.clone(), gamma, beta],
        |_, v| weighted_readout(v[0].batch_norm_eval(v[1], v[2], &rm, &rv, 1e-5)?, 2),
    );
    check("channel_affine", OP_TOL, &[x.clone()], |_, v| {
        weighted_readout(v[0].channel_affine(&[0.5, 2.0, -1.0], &[0.1, 0.0, 0.3])?, 3)
    });
    check("channel_mean", OP_TOL, &[x.clone()], |_, v| {
        weighted_readout(v[0].channel_mean()?, 4)
    });
    check("channel_std", OP_TOL, &[x], |_, v| {
        weighted_readout(v[0].channel_std(STAT_EPS)?, 5)
    });
}

#[test]
fn losses() {
    let s = rand(&[4, 5], 1);
    let t = rand(&[4, 5], 2);
    let labels = [0, 3, 4, 1];
    check("cross_entropy", OP_TOL, &[s.clone()], |_, v| {
        v[0].cross_entropy(&labels)
    });
    // the teacher side is detached
    check("kd_kl", OP_TOL, &[s.clone()], |g, v| {
        v[0].kd_kl(g.constant(t.clone()))
    });
    check("inception_loss", OP_TOL, &[s.clone()], |_, v| {
        v[0].inception_loss(&labels, 2.0)
    });
    check("mse", OP_TOL, &[s.clone(), t.clone()], |_, v| {
        v[0].mse(v[1])
    });
    check(
        "smooth_l1",
        OP_TOL,
        &[s.scale_by(0.4), t.scale_by(0.4)],
        |_, v| v[0].smooth_l1(v[1]),
    );
    check(
        "smooth_l1 linear region",
        OP_TOL,
        &[s.scale_by(4.0), t.scale_by(0.1)],
        |_, v| v[0].smooth_l1(v[1]),
    );
}

trait ScaleBy {
    fn scale_by(&self, c: f64) -> Self;
}

impl ScaleBy for Tensor<f64> {
    fn scale_by(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }
}

#[test]
fn stat_divergence_both_metrics() {
    let target = BnTarget {
        name: "t".into(),
        mean: vec![0.2, -0.4, 1.0],
        var: vec![1.0, 0.25, 2.25],
        std: vec![1.0, 0.5, 1.5],
    };
    let x = rand(&[5, 3, 2, 2], 3).map(|v| 0.8 * v + 0.1);
    for metric in [StatMetric::Kl, StatMetric::Mse] {
        check("stat_divergence", OP_TOL, &[x.clone()], |_, v| {
            v[0].channel_mean()?
                .stat_divergence(v[0].channel_std(STAT_EPS)?, &target, metric)
        });
    }
}

#[test]
fn resample_and_augment() {
    let x = unit(&[2, 2, 6, 6], 1);
    let entries: Vec<(u32, f64)> = (0..3 * 2 * 6 * 6)
        .flat_map(|i| [((i * 7 % 144) as u32, 0.3), ((i * 5 % 144) as u32, -1.2)])
        .collect();
    let map = Arc::new(ResampleMap::new(vec![3, 2, 6, 6], 144, 2, entries).unwrap());
    check("resample", OP_TOL, &[x.clone()], |_, v| {
        weighted_readout(v[0].resample(map.clone())?, 1)
    });
    check("in-batch augment", OP_TOL, &[x.clone()], |_, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        weighted_readout(in_batch_augment(v[0], 3, AugmentSet::all(), &mut rng)?, 2)
    });
    // the smoothed target is detached, so the gradient is that of an MSE
    // against a constant
    let g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    g.backward(prior_loss(xv, 5, 1.0).unwrap()).unwrap();
    let analytic = g.grad(xv).unwrap();
    let target = g
        .constant(x.clone())
        .gaussian_smooth(5, 1.0)
        .unwrap()
        .value();
    check("prior loss", OP_TOL, &[x.clone()], |g, v| {
        v[0].mse(g.constant((*target).clone()))
    });
    let n = x.len() as f64;
    for ((a, xi), ti) in analytic.data().iter().zip(x.data()).zip(target.data()) {
        assert!(relative_error(*a, 2.0 * (xi - ti) / n) < OP_TOL);
    }
}

#[test]
fn fake_quant_straight_through() {
    let p = QuantParams::per_tensor(0.1, 2, -8, 7).unwrap();
    // representable interval is [(qmin − z)·s, (qmax − z)·s] = [−1.0, 0.5]
    let x = rand(&[3, 7], 4).map(|v| 0.9 * v);
    let g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let y = weighted_readout(xv.fake_quant(&p, true).unwrap(), 9).unwrap();
    g.backward(y).unwrap();
    let ste = g.grad(xv).unwrap();
    // the straight-through estimate is the exact gradient of the clipped identity
    let surrogate = grad_check(
        |_, v| {
            let inside = v[0].value().map(|t| {
                if (-8.0..=7.0).contains(&((t / 0.1).round() + 2.0)) {
                    1.0
                } else {
                    0.0
                }
            });
            weighted_readout(v[0].mul_const(&inside)?, 9)
        },
        &[x.clone()],
    )
    .unwrap();
    assert!(surrogate.passes(OP_TOL));
    let gs = Graph::new();
    let xs = gs.leaf(x.clone(), true);
    let inside = x.map(|t| {
        if (-8.0..=7.0).contains(&((t / 0.1).round() + 2.0)) {
            1.0
        } else {
            0.0
        }
    });
    gs.backward(weighted_readout(xs.mul_const(&inside).unwrap(), 9).unwrap())
        .unwrap();
    let want = gs.grad(xs).unwrap();
    let worst = ste
        .data()
        .iter()
        .zip(want.data())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max);
    assert!(worst < OP_TOL, "{worst}");
    assert!(
        x.data().iter().any(|t| !(-1.05..0.55).contains(t)),
        "test needs saturated entries"
    );
}

fn tiny_arch() -> ArchSpec {
    ArchSpec {
        stages: vec![(1, 3), (1, 4)],
        num_classes: 3,
        input_chw: [2, 4, 4],
    }
}

#[test]
fn model_forward_composition() {
    let model = Model::<f64>::build(&tiny_arch(), 1).unwrap();
    let x = unit(&[3, 2, 4, 4], 2);
    let labels = [0, 2, 1];
    let mut inputs = vec![x];
    inputs.extend(model.params().iter().map(|p| (*p.value).clone()));
    for opts in [ForwardOptions::train(), ForwardOptions::eval()] {
        check("model cross-entropy", COMPOSITE_TOL, &inputs, |_, v| {
            model
                .forward(&v[1..], v[0], opts.clone())?
                .logits
                .cross_entropy(&labels)
        });
    }
}

#[test]
fn j_kl_wrt_input() {
    let mut model = Model::<f64>::build(&tiny_arch(), 3).unwrap();
    for (i, l) in model.bn_layers_mut().iter_mut().enumerate() {
        l.running_mean = l.running_mean.map(|_| 0.1 * i as f64);
        l.running_var = l.running_var.map(|_| 0.5 + 0.2 * i as f64);
    }
    let norm = dfkd::datasets::Normalization {
        mean: vec![0.4, 0.6],
        std: vec![0.2, 0.3],
    };
    let reference = model.extract_bn_reference(Some(&norm)).unwrap();
    let x = unit(&[4, 2, 4, 4], 5);
    for metric in [StatMetric::Kl, StatMetric::Mse] {
        check("j_kl wrt input", COMPOSITE_TOL, &[x.clone()], |g, v| {
            let params = model.bind(g, false);
            Ok(stats_forward(&model, &params, v[0], &reference, metric, false)?.j_kl)
        });
    }
    check("augmented j_kl wrt input", COMPOSITE_TOL, &[x], |g, v| {
        let params = model.bind(g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let aug = in_batch_augment(v[0], 2, AugmentSet::all(), &mut rng)?;
        Ok(stats_forward(&model, &params, aug, &reference, StatMetric::Kl, false)?.j_kl)
    });
}
