//! Central finite-difference checks of the analytic gradients, per
//! differentiable operation and end to end through the model.
//!
//! Each case reduces the operation's output to a scalar with fixed random
//! weights, `L = Σ w ⊙ f(inputs)`, and compares `∂L/∂θ` with
//! `(L(θ + h) − L(θ − h)) / 2h`, `h = 1e-5·max(1, |θ|)`.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::config::{KvConv, ModelConfig, WindowFlags};
use crate::data::synth_image;
use crate::dmmsa::{attention_specs, block_specs, dmmsa_forward, window_set, AttentionKind, AttentionParams, BlockParams};
use crate::error::Result;
use crate::kernels::Conv2dGeometry;
use crate::masking::sample_mask_pair;
use crate::model::{param_specs, DyVit};
use crate::params::{ParamStore, Part, SpecList};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;
use crate::trainer::composite_objective;

pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so gradients that are zero in
/// both estimates compare as equal instead of dividing by zero. It sits an
/// order of magnitude above the roundoff of a central difference at this `h`.
pub const REL_FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn fd_step(theta: f64) -> f64 {
    1e-5 * theta.abs().max(1.0)
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    /// Individual gradient entries compared.
    pub entries: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

type OpFn<'a> = dyn Fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'a;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn weighted(out: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Compares analytic and numeric gradients of `Σ w ⊙ f(inputs)` for every
/// input, checking at most `max_entries` randomly chosen entries per input.
pub fn check_case(
    inputs: &[Tensor<f64>],
    f: &OpFn<'_>,
    rng: &mut ChaCha8Rng,
    max_entries: usize,
) -> Result<(usize, f64)> {
    let g = Graph::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars)?;
    let w = random_tensor(rng, out.shape());
    let loss = g.sum(&g.mul(&out, &Var::constant(w.clone()))?)?;
    let grads = g.backward(&loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let consts: Vec<Var<f64>> = xs.iter().map(|t| Var::constant(t.clone())).collect();
        Ok(weighted(f(&g, &consts)?.value(), &w))
    };
    let mut work = inputs.to_vec();
    let (mut entries, mut worst) = (0, 0.0_f64);
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(var);
        let n = inputs[i].numel();
        let picks: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            (0..max_entries).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let theta = inputs[i].data()[j];
            let h = fd_step(theta);
            work[i].data_mut()[j] = theta + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = theta - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = theta;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
            entries += 1;
        }
    }
    Ok((entries, worst))
}

/// A case generator: random inputs plus the operation applied to them.
type CaseGen = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<OpFn<'static>>);

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    random_tensor(rng, &[r, c])
}

fn case_binary(rng: &mut ChaCha8Rng, op: fn(&Graph<f64>, &Var<f64>, &Var<f64>) -> Result<Var<f64>>) -> (Vec<Tensor<f64>>, Box<OpFn<'static>>) {
    let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 5));
    (vec![mat(rng, r, c), mat(rng, r, c)], Box::new(move |g, v| op(g, &v[0], &v[1])))
}

fn suites() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("add", |rng| case_binary(rng, |g, a, b| g.add(a, b))),
        ("sub", |rng| case_binary(rng, |g, a, b| g.sub(a, b))),
        ("mul", |rng| case_binary(rng, |g, a, b| g.mul(a, b))),
        ("scale", |rng| {
            let c = rng.random_range(-2.0..2.0);
            let (r, k) = (dims(rng, 1, 5), dims(rng, 1, 5));
            (vec![mat(rng, r, k)], Box::new(move |g, v| g.scale(&v[0], c)))
        }),
        ("add_bias", |rng| {
            let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 5));
            (vec![mat(rng, r, c), random_tensor(rng, &[c])], Box::new(|g, v| g.add_bias(&v[0], &v[1])))
        }),
        ("matmul", |rng| {
            let (m, k, n) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 5));
            (vec![mat(rng, m, k), mat(rng, k, n)], Box::new(|g, v| g.matmul(&v[0], &v[1])))
        }),
        ("matmul_nt", |rng| {
            let (m, k, n) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 5));
            (vec![mat(rng, m, k), mat(rng, n, k)], Box::new(|g, v| g.matmul_nt(&v[0], &v[1])))
        }),
        ("transpose", |rng| {
            let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 5));
            (vec![mat(rng, r, c)], Box::new(|g, v| g.transpose(&v[0])))
        }),
        ("reshape", |rng| {
            let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 5));
            (vec![mat(rng, r, c)], Box::new(move |g, v| g.reshape(&v[0], [c, r])))
        }),
        ("gather", |rng| {
            let (r, c) = (dims(rng, 1, 4), dims(rng, 1, 4));
            let m = dims(rng, 1, 12);
            let idx: Rc<Vec<usize>> = Rc::new((0..m).map(|_| rng.random_range(0..r * c)).collect());
            (vec![mat(rng, r, c)], Box::new(move |g, v| g.gather(&v[0], idx.clone(), [m])))
        }),
        ("gather_rows", |rng| {
            let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 4));
            let rows: Vec<usize> = (0..dims(rng, 1, 6)).map(|_| rng.random_range(0..r)).collect();
            (vec![mat(rng, r, c)], Box::new(move |g, v| g.gather_rows(&v[0], &rows)))
        }),
        ("scatter_rows", |rng| {
            let (n, c) = (dims(rng, 1, 6), dims(rng, 1, 4));
            let k = dims(rng, 1, n);
            let mut all: Vec<usize> = (0..n).collect();
            for i in 0..k {
                let j = rng.random_range(i..n);
                all.swap(i, j);
            }
            let rows = all[..k].to_vec();
            (vec![mat(rng, k, c), mat(rng, n, c)], Box::new(move |g, v| g.scatter_rows(&v[0], &rows, &v[1])))
        }),
        ("broadcast_rows", |rng| {
            let (n, c) = (dims(rng, 1, 5), dims(rng, 1, 5));
            (vec![random_tensor(rng, &[c])], Box::new(move |g, v| g.broadcast_rows(&v[0], n)))
        }),
        ("slice_cols", |rng| {
            let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 6));
            let start = rng.random_range(0..c);
            let len = dims(rng, 1, c - start);
            (vec![mat(rng, r, c)], Box::new(move |g, v| g.slice_cols(&v[0], start, len)))
        }),
        ("concat_cols", |rng| {
            let r = dims(rng, 1, 4);
            let parts: Vec<Tensor<f64>> = (0..dims(rng, 1, 3)).map(|_| {
                let c = dims(rng, 1, 3);
                mat(rng, r, c)
            }).collect();
            (parts, Box::new(|g, v| g.concat_cols(v)))
        }),
        ("softmax_rows", |rng| {
            let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 6));
            let x = mat(rng, r, c).map(|v| 3.0 * v);
            (vec![x], Box::new(|g, v| g.softmax_rows(&v[0])))
        }),
        ("layer_norm", |rng| {
            // width 2 is singular wherever the two entries meet
            let (r, c) = (dims(rng, 1, 5), dims(rng, 3, 6));
            let eps = [1e-6, 1e-5, 0.0][rng.random_range(0..3)];
            (
                vec![mat(rng, r, c), random_tensor(rng, &[c]), random_tensor(rng, &[c])],
                Box::new(move |g, v| g.layer_norm(&v[0], &v[1], &v[2], eps)),
            )
        }),
        ("gelu", |rng| {
            let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 5));
            let x = mat(rng, r, c).map(|v| 4.0 * v);
            (vec![x], Box::new(|g, v| g.gelu(&v[0])))
        }),
        ("conv2d", |rng| {
            let k = dims(rng, 1, 3);
            let stride = dims(rng, 1, 3);
            let padding = rng.random_range(0..k);
            let min = k.saturating_sub(2 * padding).max(1);
            let (h, w) = (dims(rng, min, 6), dims(rng, min, 6));
            let (b, ci, co) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
            let with_bias = rng.random_bool(0.5);
            let mut inputs = vec![random_tensor(rng, &[b, ci, h, w]), random_tensor(rng, &[co, ci, k, k])];
            if with_bias {
                inputs.push(random_tensor(rng, &[co]));
            }
            let geom = Conv2dGeometry::truncating(stride, padding);
            (inputs, Box::new(move |g, v| g.conv2d(&v[0], &v[1], v.get(2), geom)))
        }),
        ("maxpool2d", |rng| {
            let win = dims(rng, 1, 3);
            let (b, c) = (dims(rng, 1, 2), dims(rng, 1, 2));
            let (h, w) = (win * dims(rng, 1, 3), win * dims(rng, 1, 3));
            (vec![random_tensor(rng, &[b, c, h, w])], Box::new(move |g, v| g.maxpool2d(&v[0], win)))
        }),
        ("sum", |rng| {
            let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 5));
            (vec![mat(rng, r, c)], Box::new(|g, v| g.sum(&v[0])))
        }),
        ("mean", |rng| {
            let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 5));
            (vec![mat(rng, r, c)], Box::new(|g, v| g.mean(&v[0])))
        }),
        ("dmmsa", |rng| {
            let p = [2, 4][rng.random_range(0..2)];
            let v = dims(rng, 1, 2);
            let heads = dims(rng, 1, 2);
            let c = heads * dims(rng, 1, 2);
            let flags = WindowFlags { include_patch: true, include_unit: rng.random_bool(0.3) };
            let kv = if rng.random_bool(0.5) { KvConv::Shared } else { KvConv::Separate };
            let kind = AttentionKind::MultiWindow { p, windows: window_set(p, flags).expect("valid window set") };
            let mut l = SpecList::new(Part::Encoder);
            attention_specs(&mut l, "a", c, &kind, kv);
            let store = ParamStore::<f64>::init(l.specs, rng.random()).expect("init");
            let mut inputs = vec![random_tensor(rng, &[v * p * p, c])];
            inputs.extend(store.values().iter().map(|t| random_tensor(rng, t.shape()).map(|x| 0.5 * x)));
            (
                inputs,
                Box::new(move |g, vars| {
                    let b = store.bind_vars(vars[1..].to_vec())?;
                    let params = AttentionParams::bind(&b, "a", &kind, kv, heads)?;
                    dmmsa_forward(g, &vars[0], &params, v, p)
                }),
            )
        }),
        ("block", |rng| {
            let global = rng.random_bool(0.5);
            let p = 2;
            let v = dims(rng, 1, 2);
            let heads = dims(rng, 1, 2);
            let c = heads * dims(rng, 3, 4);
            let kind = if global {
                AttentionKind::Global
            } else {
                AttentionKind::MultiWindow { p, windows: vec![2] }
            };
            let mut l = SpecList::new(Part::Encoder);
            block_specs(&mut l, "b", c, &kind, KvConv::Shared, 2);
            let store = ParamStore::<f64>::init(l.specs, rng.random()).expect("init");
            let mut inputs = vec![random_tensor(rng, &[v * p * p, c])];
            inputs.extend(store.values().iter().map(|t| t.zip_map(&random_tensor(rng, t.shape()), |a, n| a + 0.3 * n).expect("same shape")));
            (
                inputs,
                Box::new(move |g, vars| {
                    let b = store.bind_vars(vars[1..].to_vec())?;
                    let params = BlockParams::bind(&b, "b", &kind, KvConv::Shared, heads)?;
                    crate::dmmsa::block_forward(g, &vars[0], &params, &kind, v)
                }),
            )
        }),
    ]
}

/// Names of the per-operation suites, in run order.
pub fn suite_names() -> Vec<&'static str> {
    suites().into_iter().map(|(n, _)| n).collect()
}

/// Runs `cases` random instances of every operation suite.
pub fn run_kernel_suites(cases: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for (i, (name, gen)) in suites().into_iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::Check, i as u64);
        let mut report = CheckReport { name: name.to_string(), cases, entries: 0, max_rel_err: 0.0 };
        for _ in 0..cases {
            let (inputs, f) = gen(&mut rng);
            let (n, worst) = check_case(&inputs, f.as_ref(), &mut rng, 24)?;
            report.entries += n;
            report.max_rel_err = report.max_rel_err.max(worst);
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Checks `samples` randomly chosen parameters of the full composite
/// training loss: a tensor is drawn uniformly, then an entry within it.
pub fn run_end_to_end(config: &ModelConfig, samples: usize, seed: u64) -> Result<CheckReport> {
    let model = DyVit::<f64>::new(config)?;
    let mut adaptive = ParamStore::<f64>::init(param_specs(config)?, seed)?;
    let mut rng = stream_rng(seed, Stream::Check, u64::MAX);
    // move away from the zero-initialized biases and unit gains
    for t in adaptive.values_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
    }
    let evaluation = adaptive.clone();
    let image = synth_image(seed, 0, config.image_size).cast::<f64>();
    let pair = sample_mask_pair(config.n_patches(), config.mask_ratio, &mut rng)?;
    let batch = [image];
    let masks = [pair];
    let grads = composite_objective(&model, &adaptive, &evaluation, &batch, &masks, true)?.grads;

    let mut report = CheckReport { name: "end-to-end".into(), cases: samples, entries: 0, max_rel_err: 0.0 };
    for _ in 0..samples {
        let ti = rng.random_range(0..adaptive.len());
        let j = rng.random_range(0..adaptive.values()[ti].numel());
        let theta = adaptive.values()[ti].data()[j];
        let h = fd_step(theta);
        let mut loss_at = |x: f64| -> Result<f64> {
            adaptive.values_mut()[ti].data_mut()[j] = x;
            Ok(composite_objective(&model, &adaptive, &evaluation, &batch, &masks, false)?.loss)
        };
        let numeric = (loss_at(theta + h)? - loss_at(theta - h)?) / (2.0 * h);
        adaptive.values_mut()[ti].data_mut()[j] = theta;
        report.max_rel_err = report.max_rel_err.max(rel_err(grads[ti].data()[j], numeric));
        report.entries += 1;
    }
    Ok(report)
}
