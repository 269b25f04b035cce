//! Gradient verification: every differentiable primitive is checked against
//! central differences at 64-bit on multiple random probe points, plus the
//! hand-evaluable oracle cases.

use std::sync::Arc;

use nsig_core::numerics::gradcheck::gradcheck;
use nsig_core::numerics::ops_nn::{ConvDims, NchwDims, NormMode};
use nsig_core::numerics::ops_render::{tri_plan, GatherPlan};
use nsig_core::numerics::rng::{rng, Domain};
use nsig_core::numerics::tape::{Tape, Var};
use rand::Rng;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-4;
const PROBES: usize = 20;

/// Uniform in [lo, hi], nudged away from the listed kink locations so
/// non-differentiable ops (relu, clamp) are probed off their corners.
fn probe_kinked(
    r: &mut rand_chacha::ChaCha8Rng,
    n: usize,
    lo: f64,
    hi: f64,
    kinks: &[f64],
    margin: f64,
) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut v: f64 = r.gen_range(lo..hi);
            for &k in kinks {
                if (v - k).abs() < margin {
                    v = k + if v >= k { margin } else { -margin };
                }
            }
            v
        })
        .collect()
}

fn probe(r: &mut rand_chacha::ChaCha8Rng, n: usize, lo: f64, hi: f64, margin: f64) -> Vec<f64> {
    probe_kinked(r, n, lo, hi, &[0.0], margin)
}

/// MSE against a fixed random target makes a scalar root with a rich adjoint.
fn to_scalar(tape: &mut Tape<f64>, y: Var, r: &mut rand_chacha::ChaCha8Rng) -> Var {
    let s = tape.shape(y);
    let target: Vec<f64> = (0..s.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let t = tape.constant_owned(target, s.rows, s.cols);
    tape.mse_loss(y, t)
}

fn check_elementwise(
    name: &str,
    f: impl Fn(&mut Tape<f64>, Var) -> Var,
    lo: f64,
    hi: f64,
    kinks: &[f64],
) {
    let mut r = rng(7, Domain::Scene);
    for p in 0..PROBES {
        let x = probe_kinked(&mut r, 12, lo, hi, kinks, 0.05);
        let tr = rng(100 + p as u64, Domain::Scene);
        let rep = gradcheck(
            |tape, vars| {
                let y = f(tape, vars[0]);
                to_scalar(tape, y, &mut tr.clone())
            },
            &[(x, 3, 4)],
            STEP,
        );
        assert!(
            rep.max_rel_err <= TOL,
            "{name} probe {p}: rel err {} (analytic {}, numeric {})",
            rep.max_rel_err,
            rep.analytic,
            rep.numeric
        );
    }
}

#[test]
fn square_at_three_has_gradient_six() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Arc::new(vec![3.0]), 1, 1);
    let y = tape.mul(x, x);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);
}

#[test]
fn relu_sum_gates_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Arc::new(vec![-1.0, 2.0]), 1, 2);
    let y = tape.relu(x);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn logistic_slope_at_zero_is_quarter() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Arc::new(vec![0.0]), 1, 1);
    let y = tape.logistic(x);
    let g = tape.backward(y).unwrap();
    assert!((g.get(x).unwrap()[0] - 0.25).abs() < 1e-12);
}

#[test]
fn bce_gradient_at_logit_zero_target_one_is_minus_half() {
    let mut tape = Tape::<f64>::new();
    let z = tape.param(Arc::new(vec![0.0]), 1, 1);
    let t = tape.constant_owned(vec![1.0], 1, 1);
    let loss = tape.bce_logits_mean(z, t);
    let g = tape.backward(loss).unwrap();
    assert!((g.get(z).unwrap()[0] - (-0.5)).abs() < 1e-12);
}

#[test]
fn elementwise_primitives_pass_gradcheck() {
    check_elementwise("relu", |t, x| t.relu(x), -1.0, 1.0, &[0.0]);
    check_elementwise("logistic", |t, x| t.logistic(x), -3.0, 3.0, &[]);
    check_elementwise("exp", |t, x| t.exp(x), -2.0, 2.0, &[]);
    check_elementwise("softplus", |t, x| t.softplus(x), -3.0, 3.0, &[]);
    check_elementwise("affine", |t, x| t.affine(x, 1.7, -0.3), -2.0, 2.0, &[]);
    check_elementwise("clamp01", |t, x| t.clamp01(x), -0.5, 1.5, &[0.0, 1.0]);
}

#[test]
fn binary_and_reduction_primitives_pass_gradcheck() {
    let mut r = rng(11, Domain::Scene);
    for p in 0..PROBES {
        let a = probe(&mut r, 12, -1.0, 1.0, 0.0);
        let b = probe(&mut r, 12, -1.0, 1.0, 0.0);
        for (name, build) in [
            ("add", 0usize),
            ("sub", 1),
            ("mul", 2),
            ("mse", 3),
            ("mul_col", 4),
        ] {
            let thetas = if name == "mul_col" {
                vec![(a.clone(), 3, 4), (probe(&mut r, 3, -1.0, 1.0, 0.0), 3, 1)]
            } else {
                vec![(a.clone(), 3, 4), (b.clone(), 3, 4)]
            };
            let tr = rng(200 + p as u64, Domain::Scene);
            let rep = gradcheck(
                |tape, vars| {
                    let y = match build {
                        0 => tape.add(vars[0], vars[1]),
                        1 => tape.sub(vars[0], vars[1]),
                        2 => tape.mul(vars[0], vars[1]),
                        3 => return tape.mse_loss(vars[0], vars[1]),
                        4 => tape.mul_col(vars[0], vars[1]),
                        _ => unreachable!(),
                    };
                    to_scalar(tape, y, &mut tr.clone())
                },
                &thetas,
                STEP,
            );
            assert!(
                rep.max_rel_err <= TOL,
                "{name} probe {p}: rel err {}",
                rep.max_rel_err
            );
        }
    }
}

#[test]
fn matmul_and_bias_pass_gradcheck() {
    let mut r = rng(13, Domain::Scene);
    for p in 0..PROBES {
        let a = probe(&mut r, 3 * 4, -1.0, 1.0, 0.0);
        let b = probe(&mut r, 4 * 2, -1.0, 1.0, 0.0);
        let bias = probe(&mut r, 2, -1.0, 1.0, 0.0);
        let tr = rng(300 + p as u64, Domain::Scene);
        let rep = gradcheck(
            |tape, vars| {
                let y = tape.matmul(vars[0], vars[1]);
                let y = tape.bias_row(y, vars[2]);
                to_scalar(tape, y, &mut tr.clone())
            },
            &[(a.clone(), 3, 4), (b.clone(), 4, 2), (bias.clone(), 1, 2)],
            STEP,
        );
        assert!(rep.max_rel_err <= TOL, "matmul probe {p}: {}", rep.max_rel_err);
    }
}

#[test]
fn structural_ops_pass_gradcheck() {
    let mut r = rng(17, Domain::Scene);
    for p in 0..PROBES {
        let a = probe(&mut r, 6 * 3, -1.0, 1.0, 0.0);
        let b = probe(&mut r, 6 * 2, -1.0, 1.0, 0.0);
        let rows = Arc::new(vec![0u32, 2, 2, 5]);
        let perm: Arc<Vec<u32>> = Arc::new((0..18u32).rev().collect());
        let tr = rng(400 + p as u64, Domain::Scene);
        let rep = gradcheck(
            |tape, vars| {
                let cat = tape.concat_cols(vars[0], vars[1]); // [6,5]
                let sl = tape.slice_cols(cat, 1, 4); // [6,3]
                let gr = tape.gather_rows(sl, Arc::clone(&rows)); // [4,3]
                let sg = tape.sum_groups(gr, 2); // [2,3]
                let pm = tape.permute(vars[0], Arc::clone(&perm), 3, 6);
                let s1 = to_scalar(tape, sg, &mut tr.clone());
                let s2 = to_scalar(tape, pm, &mut tr.clone());
                tape.add(s1, s2)
            },
            &[(a.clone(), 6, 3), (b.clone(), 6, 2)],
            STEP,
        );
        assert!(rep.max_rel_err <= TOL, "structural probe {p}: {}", rep.max_rel_err);
    }
}

#[test]
fn cumsum_and_sum_many_pass_gradcheck() {
    let mut r = rng(19, Domain::Scene);
    for p in 0..PROBES {
        let a = probe(&mut r, 8, -1.0, 1.0, 0.0);
        let b = probe(&mut r, 8, -1.0, 1.0, 0.0);
        let tr = rng(500 + p as u64, Domain::Scene);
        let rep = gradcheck(
            |tape, vars| {
                let cs = tape.cumsum_excl_groups(vars[0], 4);
                let sm = tape.sum_many(&[cs, vars[1], vars[0]]);
                to_scalar(tape, sm, &mut tr.clone())
            },
            &[(a.clone(), 8, 1), (b.clone(), 8, 1)],
            STEP,
        );
        assert!(rep.max_rel_err <= TOL, "cumsum probe {p}: {}", rep.max_rel_err);
    }
}

#[test]
fn conv_then_mean_matches_central_differences() {
    // The documented oracle case: 1x3x8x8 input, scalar mean output.
    let mut r = rng(23, Domain::Scene);
    let x = probe(&mut r, 3 * 8 * 8, -1.0, 1.0, 0.0);
    let w = probe(&mut r, 4 * 3 * 3 * 3, -0.5, 0.5, 0.0);
    let dims = ConvDims {
        n: 1,
        c_in: 3,
        h: 8,
        w: 8,
        c_out: 4,
        kh: 3,
        kw: 3,
        stride: 1,
        pad: 1,
    };
    let rep = gradcheck(
        |tape, vars| {
            let y = tape.conv2d(vars[0], vars[1], dims);
            tape.mean(y)
        },
        &[(x, 1, 3 * 8 * 8), (w, 4, 27)],
        STEP,
    );
    assert!(rep.max_rel_err <= TOL, "conv mean: {}", rep.max_rel_err);
}

#[test]
fn conv_strides_and_norm_and_pool_pass_gradcheck() {
    let mut r = rng(29, Domain::Scene);
    for (p, stride) in [(0usize, 1usize), (1, 2), (2, 1), (3, 2)] {
        let x = probe(&mut r, 2 * 3 * 6 * 6, -1.0, 1.0, 0.0);
        let w = probe(&mut r, 4 * 3 * 3 * 3, -0.5, 0.5, 0.0);
        let gamma = probe(&mut r, 4, 0.5, 1.5, 0.0);
        let beta = probe(&mut r, 4, -0.5, 0.5, 0.0);
        let dims = ConvDims {
            n: 2,
            c_in: 3,
            h: 6,
            w: 6,
            c_out: 4,
            kh: 3,
            kw: 3,
            stride,
            pad: 1,
        };
        let (oh, ow) = dims.out_hw();
        let ndims = NchwDims {
            n: 2,
            c: 4,
            h: oh,
            w: ow,
        };
        let tr = rng(600 + p as u64, Domain::Scene);
        let rep = gradcheck(
            |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], dims);
                let y = if p < 2 {
                    tape.channel_norm(y, vars[2], vars[3], ndims, NormMode::Train { eps: 1e-5 })
                } else {
                    let mean = Arc::new(vec![0.1, -0.2, 0.05, 0.3]);
                    let var = Arc::new(vec![0.5, 1.2, 0.8, 2.0]);
                    tape.channel_norm(
                        y,
                        vars[2],
                        vars[3],
                        ndims,
                        NormMode::Frozen {
                            mean,
                            var,
                            eps: 1e-5,
                        },
                    )
                };
                let y = tape.avg_pool_global(y, ndims);
                to_scalar(tape, y, &mut tr.clone())
            },
            &[
                (x, 2, 3 * 6 * 6),
                (w, 4, 27),
                (gamma, 1, 4),
                (beta, 1, 4),
            ],
            STEP,
        );
        assert!(
            rep.max_rel_err <= TOL,
            "conv-norm-pool stride {stride} mode {p}: {}",
            rep.max_rel_err
        );
    }
}

#[test]
fn trilinear_gather_passes_gradcheck_at_interior_points() {
    let mut r = rng(31, Domain::Scene);
    for p in 0..PROBES {
        let res = 4;
        let grid = probe(&mut r, res * res * res * 2, -1.0, 1.0, 0.0);
        let points: Vec<[f64; 3]> = (0..5)
            .map(|_| {
                [
                    r.gen_range(0.05..0.95),
                    r.gen_range(0.05..0.95),
                    r.gen_range(0.05..0.95),
                ]
            })
            .collect();
        let plan = Arc::new(tri_plan(&points, res));
        let tr = rng(700 + p as u64, Domain::Scene);
        let rep = gradcheck(
            |tape, vars| {
                let y = tape.trilinear_gather(vars[0], Arc::clone(&plan));
                to_scalar(tape, y, &mut tr.clone())
            },
            &[(grid.clone(), res * res * res, 2)],
            STEP,
        );
        assert!(rep.max_rel_err <= TOL, "trilinear probe {p}: {}", rep.max_rel_err);
    }
}

#[test]
fn trilinear_backward_scatters_exactly_the_incoming_adjoint() {
    // Partition of unity: the 8 corner weights sum to 1, so the scattered
    // gradient mass equals the adjoint mass.
    let mut r = rng(37, Domain::Scene);
    for _ in 0..50 {
        let res = 5;
        let grid: Vec<f64> = (0..res * res * res).map(|i| i as f64 * 0.01).collect();
        let points: Vec<[f64; 3]> = (0..7)
            .map(|_| {
                [
                    r.gen_range(0.0..1.0),
                    r.gen_range(0.0..1.0),
                    r.gen_range(0.0..1.0),
                ]
            })
            .collect();
        let plan = Arc::new(tri_plan(&points, res));
        let mut tape = Tape::<f64>::new();
        let g = tape.param(Arc::new(grid), res * res * res, 1);
        let y = tape.trilinear_gather(g, plan);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        let total: f64 = grads.get(g).unwrap().iter().sum();
        assert!(
            (total - points.len() as f64).abs() < 1e-9,
            "scattered mass {total} != {}",
            points.len()
        );
    }
}

#[test]
fn weighted_gather_passes_gradcheck() {
    let mut r = rng(41, Domain::Scene);
    for p in 0..PROBES {
        let a = probe(&mut r, 6 * 3, -1.0, 1.0, 0.0);
        // Random sparse plan with a bias row (white-fill path).
        let mut taps = Vec::new();
        let mut offsets = vec![0u32];
        for _ in 0..4 {
            let n_taps = r.gen_range(0..4);
            for _ in 0..n_taps {
                taps.push((r.gen_range(0..6u32), r.gen_range(-1.0..1.0)));
            }
            offsets.push(taps.len() as u32);
        }
        let plan = Arc::new(GatherPlan {
            taps,
            offsets,
            bias: Some((0..4).map(|_| r.gen_range(0.0..1.0)).collect()),
            in_rows: 6,
        });
        let tr = rng(800 + p as u64, Domain::Scene);
        let rep = gradcheck(
            |tape, vars| {
                let y = tape.weighted_gather_rows(vars[0], Arc::clone(&plan));
                to_scalar(tape, y, &mut tr.clone())
            },
            &[(a.clone(), 6, 3)],
            STEP,
        );
        assert!(rep.max_rel_err <= TOL, "wgather probe {p}: {}", rep.max_rel_err);
    }
}

#[test]
fn adjoint_is_linear_over_independent_subgraphs() {
    let mut r = rng(43, Domain::Scene);
    let xv = probe(&mut r, 8, -1.0, 1.0, 0.0);

    let run = |mode: u8| -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Arc::new(xv.clone()), 2, 4);
        let f = {
            let y = tape.relu(x);
            tape.sum(y)
        };
        let g = {
            let y = tape.mul(x, x);
            tape.mean(y)
        };
        let root = match mode {
            0 => f,
            1 => g,
            _ => tape.add(f, g),
        };
        tape.backward(root).unwrap().get(x).unwrap().to_vec()
    };

    let (gf, gg, gsum) = (run(0), run(1), run(2));
    for i in 0..8 {
        assert!(
            (gf[i] + gg[i] - gsum[i]).abs() < 1e-12,
            "adjoint linearity at {i}"
        );
    }
}

#[test]
fn unreachable_leaves_have_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Arc::new(vec![1.0, 2.0]), 1, 2);
    let orphan = tape.param(Arc::new(vec![5.0]), 1, 1);
    let y = tape.sum(x);
    let g = tape.backward(y).unwrap();
    assert!(g.get(orphan).is_none(), "orphan leaf must carry no gradient");
    assert_eq!(g.get(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn nan_loss_reports_the_offending_node() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Arc::new(vec![f64::NAN]), 1, 1);
    let y = tape.sum(x);
    let err = tape.backward(y).unwrap_err();
    match err {
        nsig_core::Error::NonFinite { node, .. } => assert_eq!(node, y.index()),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn deep_composite_pixel_style_graph_passes_gradcheck() {
    // A miniature of the real render: gather -> mlp -> softplus density ->
    // transmittance -> composite. Catches interaction bugs between ops.
    let res = 3;
    let n_samples = 8; // 2 rays x 4 samples
    let mut r = rng(47, Domain::Scene);
    let grid = probe(&mut r, res * res * res * 2, -0.5, 0.5, 0.0);
    let w1 = probe(&mut r, 2 * 4, -0.7, 0.7, 0.0);
    let wsig = probe(&mut r, 4, -0.7, 0.7, 0.0);
    let wc = probe(&mut r, 4 * 3, -0.7, 0.7, 0.0);
    let points: Vec<[f64; 3]> = (0..n_samples)
        .map(|_| {
            [
                r.gen_range(0.1..0.9),
                r.gen_range(0.1..0.9),
                r.gen_range(0.1..0.9),
            ]
        })
        .collect();
    let plan = Arc::new(tri_plan(&points, res));
    let tr = rng(900, Domain::Scene);
    let rep = gradcheck(
        |tape, vars| {
            let feat = tape.trilinear_gather(vars[0], Arc::clone(&plan)); // [8,2]
            let h = tape.matmul(feat, vars[1]); // [8,4]
            let h = tape.relu(h);
            let sig = tape.matmul(h, vars[2]); // [8,1]
            let sigma = tape.softplus(sig);
            let delta = 0.25;
            let sd = tape.affine(sigma, delta, 0.0);
            let acc = tape.cumsum_excl_groups(sd, 4);
            let neg = tape.affine(acc, -1.0, 0.0);
            let t = tape.exp(neg); // transmittance
            let nsd = tape.affine(sd, -1.0, 0.0);
            let ealpha = tape.exp(nsd);
            let alpha = tape.affine(ealpha, -1.0, 1.0);
            let wgt = tape.mul(t, alpha); // [8,1]
            let rgb = tape.matmul(h, vars[3]); // [8,3]
            let rgb = tape.logistic(rgb);
            let contrib = tape.mul_col(rgb, wgt);
            let pix = tape.sum_groups(contrib, 4); // [2,3]
            to_scalar(tape, pix, &mut tr.clone())
        },
        &[
            (grid, res * res * res, 2),
            (w1, 2, 4),
            (wsig, 4, 1),
            (wc, 4, 3),
        ],
        STEP,
    );
    assert!(rep.max_rel_err <= TOL, "composite graph: {}", rep.max_rel_err);
}

#[test]
fn fused_linear_passes_gradcheck_on_all_inputs() {
    use nsig_core::numerics::tape::Act;
    let mut r = rng(23, Domain::Scene);
    for (pi, act) in [Act::None, Act::Relu, Act::Logistic].iter().enumerate() {
        for p in 0..PROBES / 2 {
            let a = probe(&mut r, 5 * 3, -1.0, 1.0, 0.0);
            let b = probe(&mut r, 5 * 2, -1.0, 1.0, 0.0);
            let w = probe(&mut r, 5 * 4, -1.0, 1.0, 0.0);
            let bias = probe(&mut r, 4, -0.5, 0.5, 0.0);
            let tr = rng(700 + (pi * 100 + p) as u64, Domain::Scene);
            let rep = gradcheck(
                |tape, vars| {
                    let y = tape.linear2(vars[0], vars[1], vars[2], Some(vars[3]), *act);
                    to_scalar(tape, y, &mut tr.clone())
                },
                &[
                    (a.clone(), 5, 3),
                    (b.clone(), 5, 2),
                    (w.clone(), 5, 4),
                    (bias.clone(), 1, 4),
                ],
                STEP,
            );
            assert!(
                rep.max_rel_err <= TOL,
                "fused linear {act:?} probe {p}: {}",
                rep.max_rel_err
            );
        }
    }
}

#[test]
fn fused_linear_matches_composed_ops() {
    use nsig_core::numerics::tape::Act;
    let mut r = rng(29, Domain::Scene);
    let a = probe(&mut r, 7 * 4, -1.0, 1.0, 0.0);
    let b = probe(&mut r, 7 * 3, -1.0, 1.0, 0.0);
    let w = probe(&mut r, 7 * 6, -1.0, 1.0, 0.0);
    let bias = probe(&mut r, 6, -0.5, 0.5, 0.0);
    let mut tape = Tape::<f64>::new();
    let av = tape.constant_owned(a, 7, 4);
    let bv = tape.constant_owned(b, 7, 3);
    let wv = tape.constant_owned(w, 7, 6);
    let biasv = tape.constant_owned(bias, 1, 6);
    let fused = tape.linear2(av, bv, wv, Some(biasv), Act::Relu);
    let cat = tape.concat_cols(av, bv);
    let mm = tape.matmul(cat, wv);
    let zb = tape.bias_row(mm, biasv);
    let composed = tape.relu(zb);
    let (f, c) = (
        tape.values(fused).to_vec(),
        tape.values(composed).to_vec(),
    );
    for (x, y) in f.iter().zip(&c) {
        assert!((x - y).abs() <= 1e-12, "fused {x} vs composed {y}");
    }
}

#[test]
fn reshape_passes_gradcheck_and_shares_values() {
    let mut r = rng(31, Domain::Scene);
    for p in 0..PROBES / 2 {
        let a = probe(&mut r, 12, -1.0, 1.0, 0.0);
        let tr = rng(900 + p as u64, Domain::Scene);
        let rep = gradcheck(
            |tape, vars| {
                let y = tape.reshape(vars[0], 6, 2);
                let z = tape.mul(y, y);
                to_scalar(tape, z, &mut tr.clone())
            },
            &[(a.clone(), 3, 4)],
            STEP,
        );
        assert!(rep.max_rel_err <= TOL, "reshape probe {p}: {}", rep.max_rel_err);
    }
}
