//! Randomized comparisons used by both the integration tests and the acceptance runner.

use rand::seq::SliceRandom;
use rand::Rng;
use rcf::datagen::{FlowField, Frame, Mask};
use rcf::model::{accumulate_gradients, grad_check, GradReport, LossWeights, FD_STEP, ModelShape, SegModel, TrainConfig, TrainItem};
use rcf::motion::{
    broadcast, guided_pool, motion_backward, motion_forward, residual_compose, softmax_backward, MaskStack, PooledFlows,
    ResidualStack, VectorMLP,
};
use rcf::refine::{
    appearance_loss, appearance_loss_grad, crf_refine, ncut_refine, ncut_value, ncut_with_grad, AffinityMatrix, CrfParams, CRF_EPS,
    NCUT_ITERATIONS, NCUT_STEP,
};

use super::*;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Max abs error of guided_pool, broadcast, residual_compose and crf_refine
/// against the brute-force oracles over `instances` random problems of at most 16x16.
pub fn oracle_errors(instances: usize, seed: u64) -> [f64; 4] {
    let mut r = rng(seed);
    let mut worst = [0.0f64; 4];
    for _ in 0..instances {
        let (h, w) = (r.random_range(1..=16), r.random_range(1..=16));
        let c = r.random_range(1..=6);
        let f = random_flow(&mut r, h, w, 10.0);
        let m = random_mask(&mut r, h, w);
        let pooled = guided_pool(&f, &m).unwrap();
        worst[0] = worst[0].max(max_abs_diff(&pooled, &pool_oracle(&f, &m)));

        let stack = random_stack(&mut r, c, h, w);
        let vecs: Vec<[f64; 2]> = (0..c).map(|_| [r.random_range(-10.0..10.0), r.random_range(-10.0..10.0)]).collect();
        let got = broadcast(&PooledFlows(vecs.clone()), &stack).unwrap();
        let want = broadcast_oracle(&vecs, &stack);
        worst[1] = worst[1].max(max_abs_diff(&got.u, &want.u)).max(max_abs_diff(&got.v, &want.v));

        let bound = r.random_range(0.5..10.0);
        let res = random_residuals(&mut r, c, h, w, bound);
        let got = residual_compose(&res, &stack).unwrap();
        let want = compose_oracle(&res, &stack);
        worst[2] = worst[2].max(max_abs_diff(&got.u, &want.u)).max(max_abs_diff(&got.v, &want.v));

        let frame = random_frame(&mut r, h, w);
        let params = CrfParams {
            w_app_kernel: r.random_range(0.0..5.0),
            theta_alpha: r.random_range(1.0..20.0),
            theta_beta: r.random_range(0.05..0.5),
            w_smooth: r.random_range(0.0..3.0),
            theta_gamma: r.random_range(0.5..4.0),
            iterations: r.random_range(1..=5),
        };
        let got = crf_refine(&m, &frame, &params).unwrap();
        let want = crf_oracle(
            &m,
            &frame,
            &CrfOracleParams {
                w1: params.w_app_kernel,
                alpha: params.theta_alpha,
                beta: params.theta_beta,
                w2: params.w_smooth,
                gamma: params.theta_gamma,
                iterations: params.iterations,
                eps: CRF_EPS,
            },
        );
        worst[3] = worst[3].max(max_abs_diff(&got.data, &want));
    }
    worst
}

/// Motion objective on an 8x8 grid w.r.t. mask logits, raw residuals and both MLPs.
pub fn motion_gradcheck(seed: u64) -> GradReport {
    let mut r = rng(seed);
    let (c, h, w, lambda, hidden) = (3, 8, 8, 2.0, 8);
    let n = h * w;
    loop {
        let target = random_flow(&mut r, h, w, 5.0);
        let phi1 = VectorMLP::random(hidden, &mut r);
        let phi2 = VectorMLP::random(hidden, &mut r);
        let n_logit = c * n;
        let n_res = c * 2 * n;
        let n_mlp = 5 * hidden + 2;
        let mut point: Vec<f64> = (0..n_logit + n_res).map(|_| r.random_range(-1.5..1.5)).collect();
        point.extend(phi1.params());
        point.extend(phi2.params());
        let unpack = |x: &[f64]| {
            let masks = MaskStack::from_logits(c, h, w, &x[..n_logit]);
            let res = ResidualStack::from_raw(c, h, w, lambda, &x[n_logit..n_logit + n_res]);
            let mut p1 = VectorMLP::identity(hidden);
            p1.set_params(&x[n_logit + n_res..n_logit + n_res + n_mlp]);
            let mut p2 = VectorMLP::identity(hidden);
            p2.set_params(&x[n_logit + n_res + n_mlp..]);
            (masks, res, p1, p2)
        };
        // The objective is piecewise smooth (L1, ReLU); only accept instances whose
        // kinks are far from the evaluation point relative to the finite-difference step.
        let (masks, res, p1, p2) = unpack(&point);
        let fwd = motion_forward(&target, &masks, &res, &p1, &p2).unwrap();
        let gap = (0..n)
            .flat_map(|p| [(fwd.prediction.u[p] - target.u[p]).abs(), (fwd.prediction.v[p] - target.v[p]).abs()])
            .fold(f64::INFINITY, f64::min);
        let mut relu_gap = f64::INFINITY;
        for j in 0..hidden {
            for p in 0..n {
                relu_gap = relu_gap.min(p1.pre_activation(target.at(p), j).abs());
            }
            for &q in &fwd.pooled_raw {
                relu_gap = relu_gap.min(p2.pre_activation(q, j).abs());
            }
        }
        if gap < 1e-2 || relu_gap < 1e-2 {
            continue;
        }
        return grad_check(
            |x| {
                let (masks, res, p1, p2) = unpack(x);
                let fwd = motion_forward(&target, &masks, &res, &p1, &p2)?;
                let g = motion_backward(&fwd, &target, &masks, &res, &p1, &p2, 1.0)?;
                let mut grad = softmax_backward(&masks, &g.masks);
                // d/draw of lambda * tanh(raw)
                grad.extend(g.residual.iter().zip(&x[n_logit..n_logit + n_res]).map(|(gr, raw)| {
                    let t = raw.tanh();
                    gr * lambda * (1.0 - t * t)
                }));
                grad.extend(g.phi1.flat());
                grad.extend(g.phi2.flat());
                Ok((fwd.loss, grad))
            },
            &point,
            None,
        )
        .unwrap();
    }
}

/// Full stage-1 loss through the network (16x16 frames, 8x8 mask grid) on
/// `coords` random parameters. Returns the report and the number of candidate
/// coordinates skipped because the loss is not smooth across the stencil.
pub fn model_gradcheck(seed: u64, coords: usize) -> (GradReport, usize) {
    let mut r = rng(seed);
    let cfg = TrainConfig { channels: 3, lambda: 2.0, feature_channels: 4, head_channels: 4, seed, ..Default::default() };
    let mut model = SegModel::new(ModelShape::from_config(&cfg, 16, 16), seed).unwrap();
    let frames: Vec<Frame> = (0..3).map(|_| random_frame(&mut r, 16, 16)).collect();
    let flows: Vec<FlowField> = (0..2).map(|_| random_flow(&mut r, 8, 8, 5.0)).collect();
    let items: Vec<TrainItem<'_>> = (0..2)
        .map(|i| TrainItem { frame_t: &frames[i], frame_t1: &frames[i + 1], flow: &flows[i], backward_flow: None, appearance_target: None })
        .collect();
    let point = model.flat_params();
    let mut eval = |x: &[f64]| -> rcf::Result<(f64, Vec<f64>)> {
        model.set_flat_params(x)?;
        let loss = accumulate_gradients(&mut model, &items, LossWeights::motion_only())?;
        Ok((loss.total, model.flat_grads()))
    };
    let mut order: Vec<usize> = (0..point.len()).collect();
    order.shuffle(&mut r);
    // The loss is piecewise smooth (L1, ReLU). A coordinate whose central
    // differences at h and h/2 disagree straddles a kink and is skipped; the
    // screen only uses loss values, never the analytic gradient.
    let h = FD_STEP;
    let mut x = point.clone();
    let mut idx = Vec::with_capacity(coords);
    let mut skipped = 0;
    for &i in &order {
        if idx.len() == coords {
            break;
        }
        let mut diff = |step: f64| {
            x[i] = point[i] + step;
            let up = eval(&x).unwrap().0;
            x[i] = point[i] - step;
            let down = eval(&x).unwrap().0;
            x[i] = point[i];
            (up - down) / (2.0 * step)
        };
        let (d1, d2) = (diff(h), diff(h / 2.0));
        if (d1 - d2).abs() > 1e-4 * d1.abs().max(d2.abs()).max(1e-6) {
            skipped += 1;
        } else {
            idx.push(i);
        }
    }
    (grad_check(eval, &point, Some(&idx)).unwrap(), skipped)
}

pub fn appearance_gradcheck(seed: u64) -> GradReport {
    let mut r = rng(seed);
    let target = random_mask(&mut r, 8, 8);
    let point = random_mask(&mut r, 8, 8).data;
    grad_check(
        |x| {
            let m = Mask { height: 8, width: 8, data: x.to_vec() };
            Ok((appearance_loss(&m, &target)?, appearance_loss_grad(&m, &target)?))
        },
        &point,
        None,
    )
    .unwrap()
}

/// NCut on a random symmetric binary affinity over an 8x8 grid.
pub fn ncut_gradcheck(seed: u64) -> GradReport {
    let mut r = rng(seed);
    let n = 64;
    let (_, a, _) = noisy_blocks(&mut r, &[20, 44], 0.2);
    let a = AffinityMatrix::new(n, a).unwrap();
    let point: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.95)).collect();
    grad_check(|x| ncut_with_grad(&a, x), &point, None).unwrap()
}

/// Fraction of seeds on which refinement strictly lowers the cut of a noisy
/// block-diagonal instance from a noisy initial assignment.
pub fn refine_success_rate(seeds: std::ops::Range<u64>) -> f64 {
    let total = (seeds.end - seeds.start) as usize;
    let mut ok = 0;
    for seed in seeds {
        let mut r = rng(seed);
        let (n, a, labels) = noisy_blocks(&mut r, &[10, 14], 0.1);
        let a = AffinityMatrix::new(n, a).unwrap();
        let x0: Vec<f64> = labels.iter().map(|&l| (if l == 0 { 0.7f64 } else { 0.3 } + r.random_range(-0.25..0.25)).clamp(0.0, 1.0)).collect();
        let x = ncut_refine(&a, &x0, NCUT_ITERATIONS, NCUT_STEP).unwrap();
        ok += (ncut_value(&a, &x).unwrap() < ncut_value(&a, &x0).unwrap()) as usize;
    }
    ok as f64 / total as f64
}

