//! Oracles shared by the integration tests and the acceptance suite. Reference operators here
//! are plain loops over flat buffers and never call the kernels they are compared against.
#![allow(dead_code)]

use std::collections::BTreeMap;

use emonas_core::kernels::{ConvSpec, PoolSpec};
use emonas_core::nn::{CandidateOpKind, Ctx, OpInstance};
use emonas_core::params::{ParamGroup, ParamId, ParamStore};
use emonas_core::search_space::{mixed_edge_forward, Genotype, NodeInputs};
use emonas_core::tape::{Tape, Var};
use emonas_core::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Row = [f64; CandidateOpKind::COUNT];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Entries with `0.1 ≤ |x| < 1`, keeping ReLU kinks out of finite-difference range.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A shuffled grid of distinct values 0.01 apart, none of them zero, so max-pool winners and
/// ReLU signs are stable under small perturbations.
pub fn distinct(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - (n / 2) as f64) * 0.01 + 0.003).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).unwrap()
}

// ---------------------------------------------------------------- finite differences

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 20;

/// Relative error with a floor of 1e-3 on the denominator, so gradients that are zero in
/// exact arithmetic are compared in absolute terms.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn projection(seed: u64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let scale = 1.0 / (n as f64).sqrt();
    uniform(&mut rng(seed ^ 0x9e37_79b9), shape, -scale, scale)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub type TapeFn<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var>;
pub type ModuleFn<'a> = &'a dyn Fn(&mut Ctx, Var) -> Result<Var>;

fn tape_loss(inputs: &[Tensor], f: TapeFn, r: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    dot(tape.value(out), r)
}

/// Largest relative error between backprop and central differences of `Σ r ⊙ f(inputs)` for a
/// fixed random projection `r`, over every input coordinate.
pub fn check_tape(inputs: Vec<Tensor>, f: TapeFn, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let r = projection(seed, tape.value(out).shape());
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (tape_loss(&plus, f, &r) - tape_loss(&minus, f, &r)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

fn module_loss(store: &mut ParamStore, x: &Tensor, f: ModuleFn, r: &Tensor) -> f64 {
    let mut ctx = Ctx::new(store, true);
    let xv = ctx.tape.input(x.clone());
    let out = f(&mut ctx, xv).unwrap();
    dot(ctx.value(out), r)
}

/// Like [`check_tape`] for a layer with parameters: checks the input and every parameter
/// coordinate in `store`. Runs in training mode.
pub fn check_module(store: &mut ParamStore, x: Tensor, f: ModuleFn, seed: u64) -> f64 {
    store.zero_grad();
    let (dx, r) = {
        let mut ctx = Ctx::new(store, true);
        let xv = ctx.tape.input(x.clone());
        let out = f(&mut ctx, xv).unwrap();
        let r = projection(seed, ctx.value(out).shape());
        let rv = ctx.tape.constant(r.clone());
        let prod = ctx.tape.mul(out, rv).unwrap();
        let loss = ctx.tape.sum(prod);
        let grads = ctx.tape.backward(loss).unwrap();
        grads.accumulate_into(&mut *ctx.store);
        (grads.wrt(xv), r)
    };
    let mut worst: f64 = 0.0;
    for j in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[j] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[j] -= FD_STEP;
        let numeric = (module_loss(store, &plus, f, &r) - module_loss(store, &minus, f, &r)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(dx.data()[j], numeric));
    }
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let analytic = store.get(id).grad.clone();
        for j in 0..analytic.numel() {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let lp = module_loss(store, &x, f, &r);
            store.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let lm = module_loss(store, &x, f, &r);
            store.get_mut(id).value.data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic.data()[j], (lp - lm) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn conv(stride: usize, padding: usize, dilation: usize, groups: usize) -> ConvSpec {
    ConvSpec { stride, padding, dilation, groups }
}

fn pool(stride: usize) -> PoolSpec {
    PoolSpec { kernel: 3, stride, padding: 1 }
}

/// Every differentiable tape primitive (and a few broadcasting/shape variants) for one seed.
pub fn primitive_suite(seed: u64) -> Vec<(String, f64)> {
    let mut g = rng(seed);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: TapeFn| out.push((name.to_string(), check_tape(inputs, f, seed)));

    run("add", vec![uniform(&mut g, &[2, 3, 4], -1.0, 1.0), uniform(&mut g, &[2, 3, 4], -1.0, 1.0)], &|t, v| t.add(v[0], v[1]));
    run("add/broadcast", vec![uniform(&mut g, &[2, 3, 4], -1.0, 1.0), uniform(&mut g, &[1, 3, 1], -1.0, 1.0)], &|t, v| {
        t.add(v[0], v[1])
    });
    run("sub/broadcast", vec![uniform(&mut g, &[2, 3, 4], -1.0, 1.0), uniform(&mut g, &[2, 1, 4], -1.0, 1.0)], &|t, v| {
        t.sub(v[0], v[1])
    });
    run("mul", vec![uniform(&mut g, &[2, 3, 4], -1.0, 1.0), uniform(&mut g, &[2, 3, 4], -1.0, 1.0)], &|t, v| t.mul(v[0], v[1]));
    run("mul/broadcast", vec![uniform(&mut g, &[2, 3, 4], -1.0, 1.0), uniform(&mut g, &[1, 1, 4], -1.0, 1.0)], &|t, v| {
        t.mul(v[0], v[1])
    });
    run("scale", vec![uniform(&mut g, &[3, 4], -1.0, 1.0)], &|t, v| Ok(t.scale(v[0], -1.7)));
    run("relu", vec![away_from_zero(&mut g, &[2, 3, 4])], &|t, v| Ok(t.relu(v[0])));
    run("matmul", vec![uniform(&mut g, &[3, 4], -1.0, 1.0), uniform(&mut g, &[4, 5], -1.0, 1.0)], &|t, v| t.matmul(v[0], v[1]));
    run("softmax/vector", vec![uniform(&mut g, &[7], -2.0, 2.0)], &|t, v| t.softmax(v[0], 0));
    run("softmax/axis0", vec![uniform(&mut g, &[3, 4], -2.0, 2.0)], &|t, v| t.softmax(v[0], 0));
    run("softmax/axis1", vec![uniform(&mut g, &[3, 4], -2.0, 2.0)], &|t, v| t.softmax(v[0], 1));
    run("cross_entropy", vec![uniform(&mut g, &[4, 5], -2.0, 2.0)], &|t, v| t.cross_entropy(v[0], &[0, 3, 1, 4]));
    run("sum", vec![uniform(&mut g, &[2, 3, 4], -1.0, 1.0)], &|t, v| Ok(t.sum(v[0])));
    run("mean", vec![uniform(&mut g, &[2, 3, 4], -1.0, 1.0)], &|t, v| Ok(t.mean(v[0])));

    let convs: [(&str, [usize; 4], [usize; 4], ConvSpec); 8] = [
        ("conv/3x3", [2, 4, 7, 7], [3, 4, 3, 3], conv(1, 1, 1, 1)),
        ("conv/3x3-stride2", [2, 4, 7, 7], [3, 4, 3, 3], conv(2, 1, 1, 1)),
        ("conv/3x3-dilated", [2, 4, 7, 7], [3, 4, 3, 3], conv(1, 2, 2, 1)),
        ("conv/5x5-dilated-stride2", [2, 4, 8, 8], [3, 4, 5, 5], conv(2, 4, 2, 1)),
        ("conv/grouped", [2, 4, 6, 6], [4, 2, 3, 3], conv(1, 1, 1, 2)),
        ("conv/depthwise-5x5", [2, 4, 6, 6], [4, 1, 5, 5], conv(1, 2, 1, 4)),
        ("conv/1x1-stride2", [2, 4, 6, 6], [6, 4, 1, 1], conv(2, 0, 1, 1)),
        ("conv/valid", [1, 2, 5, 6], [2, 2, 3, 3], conv(1, 0, 1, 1)),
    ];
    for (name, xs, ws, spec) in convs {
        run(name, vec![uniform(&mut g, &xs, -1.0, 1.0), uniform(&mut g, &ws, -1.0, 1.0)], &move |t, v| t.conv2d(v[0], v[1], spec));
    }
    run("max_pool/stride1", vec![distinct(&mut g, &[2, 3, 6, 6])], &|t, v| t.max_pool2d(v[0], pool(1)));
    run("max_pool/stride2", vec![distinct(&mut g, &[2, 3, 7, 7])], &|t, v| t.max_pool2d(v[0], pool(2)));
    run("avg_pool/stride1", vec![uniform(&mut g, &[2, 3, 6, 6], -1.0, 1.0)], &|t, v| t.avg_pool2d(v[0], pool(1)));
    run("avg_pool/stride2", vec![uniform(&mut g, &[2, 3, 7, 7], -1.0, 1.0)], &|t, v| t.avg_pool2d(v[0], pool(2)));
    run(
        "batch_norm/train",
        vec![uniform(&mut g, &[3, 4, 3, 3], -1.0, 1.0), uniform(&mut g, &[4], 0.5, 1.5), uniform(&mut g, &[4], -0.5, 0.5)],
        &|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
    );
    let (mean, var) = (uniform(&mut g, &[4], -0.3, 0.3), uniform(&mut g, &[4], 0.5, 2.0));
    run(
        "batch_norm/eval",
        vec![uniform(&mut g, &[3, 4, 3, 3], -1.0, 1.0), uniform(&mut g, &[4], 0.5, 1.5), uniform(&mut g, &[4], -0.5, 0.5)],
        &|t, v| t.batch_norm_eval(v[0], v[1], v[2], mean.data(), var.data(), 1e-5),
    );
    run("global_avg_pool", vec![uniform(&mut g, &[2, 3, 4, 5], -1.0, 1.0)], &|t, v| t.global_avg_pool(v[0]));
    run(
        "concat_channels",
        vec![uniform(&mut g, &[2, 1, 3, 3], -1.0, 1.0), uniform(&mut g, &[2, 2, 3, 3], -1.0, 1.0), uniform(&mut g, &[2, 3, 3, 3], -1.0, 1.0)],
        &|t, v| t.concat_channels(v),
    );
    run("shift_crop", vec![uniform(&mut g, &[2, 3, 5, 5], -1.0, 1.0)], &|t, v| t.shift_crop(v[0]));
    run(
        "weighted_sum",
        vec![
            uniform(&mut g, &[2, 3, 4], -1.0, 1.0),
            uniform(&mut g, &[2, 3, 4], -1.0, 1.0),
            uniform(&mut g, &[2, 3, 4], -1.0, 1.0),
            uniform(&mut g, &[3], -1.0, 1.0),
        ],
        &|t, v| t.weighted_sum(&v[..3], v[3]),
    );
    run(
        "softmax+weighted_sum",
        vec![uniform(&mut g, &[2, 4], -1.0, 1.0), uniform(&mut g, &[2, 4], -1.0, 1.0), uniform(&mut g, &[2], -1.0, 1.0)],
        &|t, v| {
            let w = t.softmax(v[2], 0)?;
            t.weighted_sum(&v[..2], w)
        },
    );
    out
}

/// Moves norm scales/shifts off their 1/0 initialization so every gradient path is generic.
pub fn randomize_norm_params(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get_mut(id);
        let range = if p.name.ends_with(".gamma") {
            0.5..1.5
        } else if p.name.ends_with(".beta") {
            -0.5..0.5
        } else {
            continue;
        };
        for v in p.value.data_mut() {
            *v = rng.gen_range(range.clone());
        }
    }
}

/// Every candidate operation at stride 1 and 2, plus full mixed edges (α included), for one seed.
pub fn candidate_op_suite(seed: u64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for stride in [1, 2] {
        for kind in CandidateOpKind::ALL {
            let mut g = rng(seed.wrapping_mul(1000) + 10 * kind.ordinal() as u64 + stride as u64);
            let mut store = ParamStore::new();
            let op = OpInstance::new(kind, 4, 4, stride, &mut store, &mut g, "op").unwrap();
            randomize_norm_params(&mut store, &mut g);
            let x = if kind == CandidateOpKind::MaxPool3x3 {
                distinct(&mut g, &[2, 4, 6, 6])
            } else {
                away_from_zero(&mut g, &[2, 4, 6, 6])
            };
            let err = check_module(&mut store, x, &|ctx, x| op.apply(ctx, x), seed);
            out.push((format!("{kind}/stride{stride}"), err));
        }
        let mut g = rng(seed.wrapping_mul(1000) + 500 + stride as u64);
        let mut store = ParamStore::new();
        let ops: Vec<OpInstance> = CandidateOpKind::ALL
            .iter()
            .map(|&k| OpInstance::new(k, 4, 4, stride, &mut store, &mut g, "edge").unwrap())
            .collect();
        randomize_norm_params(&mut store, &mut g);
        let alpha = store.add("alpha", ParamGroup::Architecture, uniform(&mut g, &[7], -1.0, 1.0));
        let x = distinct(&mut g, &[2, 4, 6, 6]);
        let err = check_module(
            &mut store,
            x,
            &|ctx, x| {
                let a = ctx.param(alpha);
                mixed_edge_forward(ctx, x, &ops, a)
            },
            seed,
        );
        out.push((format!("mixed_edge/stride{stride}"), err));
    }
    out
}

// ---------------------------------------------------------------- reference operators

fn at(shape: &[usize], b: usize, c: usize, y: usize, x: usize) -> usize {
    ((b * shape[1] + c) * shape[2] + y) * shape[3] + x
}

pub fn ref_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize, dil: usize, groups: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(cin_g * groups, cin);
    let ho = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let wo = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let shape = [n, cout, ho, wo];
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for o in 0..cout {
            let grp = o / (cout / groups);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[at(xs, b, grp * cin_g + ci, iy as usize, ix as usize)];
                                acc += xv * w.data()[((o * cin_g + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[at(&shape, b, o, oy, ox)] = acc;
                }
            }
        }
    }
    Tensor::new(&shape, out).unwrap()
}

pub fn ref_relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Batch-statistics normalization with biased variance, eps 1e-5.
pub fn ref_bn(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Tensor {
    let s = x.shape();
    let m = (s[0] * s[2] * s[3]) as f64;
    let mut out = x.clone();
    for c in 0..s[1] {
        let vals: Vec<f64> = (0..s[0])
            .flat_map(|b| (0..s[2]).flat_map(move |y| (0..s[3]).map(move |xx| (b, y, xx))))
            .map(|(b, y, xx)| x.data()[at(s, b, c, y, xx)])
            .collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        for b in 0..s[0] {
            for y in 0..s[2] {
                for xx in 0..s[3] {
                    let i = at(s, b, c, y, xx);
                    out.data_mut()[i] = (x.data()[i] - mean) / (var + 1e-5).sqrt() * gamma[c] + beta[c];
                }
            }
        }
    }
    out
}

/// 3×3 pooling with padding 1; the average always divides by 9.
pub fn ref_pool(x: &Tensor, max: bool, stride: usize) -> Tensor {
    let s = x.shape();
    let (ho, wo) = ((s[2] - 1) / stride + 1, (s[3] - 1) / stride + 1);
    let shape = [s[0], s[1], ho, wo];
    let mut out = vec![0.0; s[0] * s[1] * ho * wo];
    for b in 0..s[0] {
        for c in 0..s[1] {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut vals = vec![];
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let iy = (oy * stride + dy) as isize - 1;
                            let ix = (ox * stride + dx) as isize - 1;
                            if iy >= 0 && ix >= 0 && iy < s[2] as isize && ix < s[3] as isize {
                                vals.push(x.data()[at(s, b, c, iy as usize, ix as usize)]);
                            }
                        }
                    }
                    out[at(&shape, b, c, oy, ox)] = if max {
                        vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        vals.iter().sum::<f64>() / 9.0
                    };
                }
            }
        }
    }
    Tensor::new(&shape, out).unwrap()
}

/// `x` moved up and left by one pixel, zero filled.
pub fn ref_shift(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    for b in 0..s[0] {
        for c in 0..s[1] {
            for y in 0..s[2] - 1 {
                for xx in 0..s[3] - 1 {
                    out.data_mut()[at(s, b, c, y, xx)] = x.data()[at(s, b, c, y + 1, xx + 1)];
                }
            }
        }
    }
    out
}

pub fn ref_concat(xs: &[Tensor]) -> Tensor {
    let s = xs[0].shape();
    let total: usize = xs.iter().map(|t| t.shape()[1]).sum();
    let shape = [s[0], total, s[2], s[3]];
    let mut out = Tensor::zeros(&shape);
    for b in 0..s[0] {
        let mut c0 = 0;
        for t in xs {
            for c in 0..t.shape()[1] {
                for y in 0..s[2] {
                    for xx in 0..s[3] {
                        out.data_mut()[at(&shape, b, c0 + c, y, xx)] = t.data()[at(t.shape(), b, c, y, xx)];
                    }
                }
            }
            c0 += t.shape()[1];
        }
    }
    out
}

pub fn ref_axpy(acc: &mut Tensor, a: f64, x: &Tensor) {
    assert_eq!(acc.shape(), x.shape());
    for (o, v) in acc.data_mut().iter_mut().zip(x.data()) {
        *o += a * v;
    }
}

pub fn ref_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

pub fn param_by_name(store: &ParamStore, name: &str) -> Tensor {
    store
        .iter()
        .find(|(_, p)| p.name == name)
        .unwrap_or_else(|| panic!("no parameter named {name}"))
        .1
        .value
        .clone()
}

fn ref_bn_named(store: &ParamStore, prefix: &str, x: &Tensor) -> Tensor {
    let gamma = param_by_name(store, &format!("{prefix}.gamma"));
    let beta = param_by_name(store, &format!("{prefix}.beta"));
    ref_bn(x, gamma.data(), beta.data())
}

fn ref_sep_block(store: &ParamStore, prefix: &str, x: &Tensor, k: usize, stride: usize, dil: usize) -> Tensor {
    let c = x.shape()[1];
    let r = ref_relu(x);
    let dw = ref_conv(&r, &param_by_name(store, &format!("{prefix}.dw.weight")), stride, dil * (k - 1) / 2, dil, c);
    let pw = ref_conv(&dw, &param_by_name(store, &format!("{prefix}.pw.weight")), 1, 0, 1, 1);
    ref_bn_named(store, &format!("{prefix}.bn"), &pw)
}

/// Training-mode output of the candidate op whose parameters live under `prefix`.
pub fn ref_op(kind: CandidateOpKind, stride: usize, store: &ParamStore, prefix: &str, x: &Tensor) -> Tensor {
    use CandidateOpKind::*;
    match kind {
        SepConv3x3 | SepConv5x5 => {
            let k = if kind == SepConv3x3 { 3 } else { 5 };
            let y = ref_sep_block(store, &format!("{prefix}.0"), x, k, stride, 1);
            ref_sep_block(store, &format!("{prefix}.1"), &y, k, 1, 1)
        }
        DilConv3x3 => ref_sep_block(store, prefix, x, 3, stride, 2),
        DilConv5x5 => ref_sep_block(store, prefix, x, 5, stride, 2),
        MaxPool3x3 | AvgPool3x3 => {
            let y = ref_pool(x, kind == MaxPool3x3, stride);
            if stride == 2 {
                ref_bn_named(store, &format!("{prefix}.bn"), &y)
            } else {
                y
            }
        }
        Identity if stride == 1 => x.clone(),
        Identity => {
            let r = ref_relu(x);
            let a = ref_conv(&r, &param_by_name(store, &format!("{prefix}.even.weight")), 2, 0, 1, 1);
            let b = ref_conv(&ref_shift(&r), &param_by_name(store, &format!("{prefix}.odd.weight")), 2, 0, 1, 1);
            ref_bn_named(store, &format!("{prefix}.bn"), &ref_concat(&[a, b]))
        }
    }
}

/// `Σ_o softmax(row)_o · op_o(x)` where op `o` lives under `"{edge}.{name}"`.
pub fn ref_mixed(store: &ParamStore, edge: &str, row: &Row, stride: usize, x: &Tensor) -> Tensor {
    let w = ref_softmax(row);
    let mut acc: Option<Tensor> = None;
    for kind in CandidateOpKind::ALL {
        let y = ref_op(kind, stride, store, &format!("{edge}.{kind}"), x);
        let acc = acc.get_or_insert_with(|| Tensor::zeros(y.shape()));
        ref_axpy(acc, w[kind.ordinal()], &y);
    }
    acc.unwrap()
}

/// Brute-force continuous cell: every node below `n_nodes − 1` past the two inputs sums a
/// mixed edge from each earlier node; the output concatenates those nodes.
pub fn ref_cell(
    store: &ParamStore,
    s0: &Tensor,
    s1: &Tensor,
    n_nodes: usize,
    reduction: bool,
    alphas: &BTreeMap<(usize, usize), Row>,
    edge_name: impl Fn(usize, usize) -> String,
) -> Tensor {
    let mut states = vec![s0.clone(), s1.clone()];
    for node in 2..n_nodes - 1 {
        let mut acc: Option<Tensor> = None;
        for from in 0..node {
            let stride = if reduction && from < 2 { 2 } else { 1 };
            let y = ref_mixed(store, &edge_name(from, node), &alphas[&(from, node)], stride, &states[from]);
            let acc = acc.get_or_insert_with(|| Tensor::zeros(y.shape()));
            ref_axpy(acc, 1.0, &y);
        }
        states.push(acc.unwrap());
    }
    ref_concat(&states[2..])
}

// ---------------------------------------------------------------- derivation oracle

/// `(max softmax weight, first op attaining the max logit)`; the normalizer is summed in
/// ascending order so permuted rows give identical strengths.
fn ref_strength(row: &Row) -> (f64, usize) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut terms: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let strength = 1.0 / terms.iter().sum::<f64>();
    let op = (0..row.len()).find(|&i| row[i] == max).unwrap();
    (strength, op)
}

/// Exhaustive search over predecessor pairs: the kept pair has the lexicographically largest
/// (stronger, weaker) strengths; among equal pairs the lexicographically smallest indices win.
pub fn brute_force_cell(n_nodes: usize, alphas: &BTreeMap<(usize, usize), Row>) -> Vec<NodeInputs> {
    (2..n_nodes - 1)
        .map(|node| {
            let s: Vec<(f64, usize)> = (0..node).map(|from| ref_strength(&alphas[&(from, node)])).collect();
            let mut best: Option<((f64, f64), (usize, usize))> = None;
            for j in 0..node {
                for k in j + 1..node {
                    let key = (s[j].0.max(s[k].0), s[j].0.min(s[k].0));
                    let better = match best {
                        None => true,
                        Some((b, _)) => key.0 > b.0 || (key.0 == b.0 && key.1 > b.1),
                    };
                    if better {
                        best = Some((key, (j, k)));
                    }
                }
            }
            let (_, (j, k)) = best.unwrap();
            let op = |i: usize| CandidateOpKind::from_ordinal(s[i].1).unwrap();
            [(op(j), j), (op(k), k)]
        })
        .collect()
}

pub fn brute_force_genotype(
    n_nodes: usize,
    normal: &BTreeMap<(usize, usize), Row>,
    reduce: &BTreeMap<(usize, usize), Row>,
) -> Genotype {
    let concat: Vec<usize> = (2..n_nodes - 1).collect();
    Genotype {
        n_nodes,
        normal: brute_force_cell(n_nodes, normal),
        normal_concat: concat.clone(),
        reduce: brute_force_cell(n_nodes, reduce),
        reduce_concat: concat,
    }
}

/// One α row for every `(from, to)` edge of an `n_nodes` cell.
pub fn random_alpha_map(rng: &mut impl Rng, n_nodes: usize, quantized: bool) -> BTreeMap<(usize, usize), Row> {
    let mut map = BTreeMap::new();
    for to in 2..n_nodes - 1 {
        for from in 0..to {
            let row: Row = std::array::from_fn(|_| {
                if quantized {
                    rng.gen_range(0..3) as f64 * 0.5
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            });
            map.insert((from, to), row);
        }
    }
    map
}

pub fn random_genotype(rng: &mut impl Rng, n_nodes: usize) -> Genotype {
    let mut cell = || -> Vec<NodeInputs> {
        (2..n_nodes - 1)
            .map(|node| {
                let mut preds: Vec<usize> = (0..node).collect();
                preds.shuffle(rng);
                let mut pair = [preds[0], preds[1]];
                pair.sort();
                let mut op = || CandidateOpKind::from_ordinal(rng.gen_range(0..CandidateOpKind::COUNT)).unwrap();
                [(op(), pair[0]), (op(), pair[1])]
            })
            .collect()
    };
    let normal = cell();
    let reduce = cell();
    let concat: Vec<usize> = (2..n_nodes - 1).collect();
    Genotype { n_nodes, normal, normal_concat: concat.clone(), reduce, reduce_concat: concat }
}

// ---------------------------------------------------------------- parameter oracle

/// Closed-form learnable-scalar count of one candidate op on `c` channels.
pub fn op_params(kind: CandidateOpKind, c: usize, stride: usize) -> usize {
    use CandidateOpKind::*;
    let sep_block = |k: usize| c * k * k + c * c + 2 * c;
    match kind {
        SepConv3x3 => 2 * sep_block(3),
        SepConv5x5 => 2 * sep_block(5),
        DilConv3x3 => sep_block(3),
        DilConv5x5 => sep_block(5),
        MaxPool3x3 | AvgPool3x3 => {
            if stride == 2 {
                2 * c
            } else {
                0
            }
        }
        Identity => {
            if stride == 2 {
                2 * c * (c / 2) + 2 * c
            } else {
                0
            }
        }
    }
}

/// Walks the stack with independent channel bookkeeping and sums every layer's scalars.
/// `edge_ops(reduction, c)` gives the op-parameter total of one cell at width `c`.
fn stack_params(
    n_cells: usize,
    c0: usize,
    in_channels: usize,
    classes: usize,
    n_intermediate: usize,
    edge_ops: impl Fn(bool, usize) -> usize,
) -> usize {
    let mut total = in_channels * c0 * 9 + 2 * c0;
    let (mut c_pp, mut c_p, mut c) = (c0, c0, c0);
    let mut reduction_prev = false;
    for i in 0..n_cells {
        let reduction = i == n_cells / 3 || i == 2 * n_cells / 3;
        if reduction {
            c *= 2;
        }
        let pre0 = if reduction_prev { 2 * c_pp * (c / 2) + 2 * c } else { c_pp * c + 2 * c };
        let pre1 = c_p * c + 2 * c;
        total += pre0 + pre1 + edge_ops(reduction, c);
        c_pp = c_p;
        c_p = n_intermediate * c;
        reduction_prev = reduction;
    }
    total + c_p * classes + classes
}

pub fn network_params(genotype: &Genotype, n_cells: usize, c0: usize, in_channels: usize, classes: usize) -> usize {
    stack_params(n_cells, c0, in_channels, classes, genotype.n_nodes - 3, |reduction, c| {
        let nodes = if reduction { &genotype.reduce } else { &genotype.normal };
        nodes
            .iter()
            .flatten()
            .map(|&(kind, from)| op_params(kind, c, if reduction && from < 2 { 2 } else { 1 }))
            .sum()
    })
}

pub fn supernet_params(n_nodes: usize, n_cells: usize, c0: usize, in_channels: usize, classes: usize) -> usize {
    stack_params(n_cells, c0, in_channels, classes, n_nodes - 3, |reduction, c| {
        let mut total = 0;
        for to in 2..n_nodes - 1 {
            for from in 0..to {
                let stride = if reduction && from < 2 { 2 } else { 1 };
                total += CandidateOpKind::ALL.iter().map(|&k| op_params(k, c, stride)).sum::<usize>();
            }
        }
        total
    })
}

/// Sum of element counts of every network weight tensor in `store`.
pub fn enumerate_weights(store: &ParamStore) -> usize {
    store.iter().filter(|(_, p)| p.group == ParamGroup::Weights).map(|(_, p)| p.value.numel()).sum()
}

// ---------------------------------------------------------------- dynamic images

/// `F(p) = Σ_{l=p}^{q} (2l − q) / l`, summed term by term for every `p`.
pub fn direct_rank_weights(q: usize) -> Vec<f64> {
    let qf = q as f64;
    (1..=q).map(|p| (p..=q).map(|l| (2.0 * l as f64 - qf) / l as f64).sum()).collect()
}
