//! Independent `f64` reference for forward passes, losses and finite
//! differences, plus small fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trikd::data::{generate_synthetic, Dataset, SyntheticSpec};
use trikd::distill::{student_loss, DistillWeights};
use trikd::nn::{ArchKind, ArchitectureSpec, Network};
use trikd::tensor::{Tape, Tensor};

/// Parameters copied out of a network as `f64`, in network order.
#[derive(Clone)]
pub struct RefParams {
    pub spec: ArchitectureSpec,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl RefParams {
    pub fn of(net: &Network) -> Self {
        let mut r = RefParams { spec: net.spec().clone(), names: vec![], shapes: vec![], values: vec![] };
        for (name, t) in net.params() {
            r.names.push(name.clone());
            r.shapes.push(t.shape().to_vec());
            r.values.push(t.data().iter().map(|&v| v as f64).collect());
        }
        r
    }

    fn get(&self, name: &str) -> (&[usize], &[f64]) {
        let i = self.names.iter().position(|n| n == name).expect(name);
        (&self.shapes[i], &self.values[i])
    }
}

/// Logits `[rows × K]` and the sign of every ReLU pre-activation.
pub fn ref_forward(p: &RefParams, x: &[f64], rows: usize) -> (Vec<f64>, Vec<bool>) {
    let mut signs = Vec::new();
    let mut relu = |v: &mut Vec<f64>| {
        for a in v.iter_mut() {
            signs.push(*a > 0.0);
            *a = a.max(0.0);
        }
    };
    match p.spec.kind {
        ArchKind::Mlp => {
            let mut h = x.to_vec();
            for i in 0..p.spec.base_widths.len() {
                let mut z = dense(&h, rows, p.get(&format!("hidden{i}.weight")), p.get(&format!("hidden{i}.bias")).1);
                relu(&mut z);
                h = z;
            }
            let logits = dense(&h, rows, p.get("head.weight"), p.get("head.bias").1);
            (logits, signs)
        }
        ArchKind::TinyCnn => {
            let (c, hh, ww) = (p.spec.input_dims[0], p.spec.input_dims[1], p.spec.input_dims[2]);
            let mut h = conv_same(x, rows, c, hh, ww, p.get("conv0.weight"), p.get("conv0.bias").1);
            relu(&mut h);
            let c1 = p.get("conv0.weight").0[0];
            let mut h = conv_same(&h, rows, c1, hh, ww, p.get("conv1.weight"), p.get("conv1.bias").1);
            relu(&mut h);
            let c2 = p.get("conv1.weight").0[0];
            let pooled = pool2(&h, rows, c2, hh, ww);
            let logits = dense(&pooled, rows, p.get("head.weight"), p.get("head.bias").1);
            (logits, signs)
        }
    }
}

fn dense(h: &[f64], rows: usize, (shape, w): (&[usize], &[f64]), b: &[f64]) -> Vec<f64> {
    let (n_in, n_out) = (shape[0], shape[1]);
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        for o in 0..n_out {
            let mut s = b[o];
            for i in 0..n_in {
                s += h[r * n_in + i] * w[i * n_out + o];
            }
            out[r * n_out + o] = s;
        }
    }
    out
}

/// 3×3 cross-correlation with one pixel of zero padding.
fn conv_same(x: &[f64], rows: usize, c: usize, h: usize, w: usize, (shape, k): (&[usize], &[f64]), b: &[f64]) -> Vec<f64> {
    let o_ch = shape[0];
    let mut out = vec![0.0; rows * o_ch * h * w];
    for r in 0..rows {
        for o in 0..o_ch {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = b[o];
                    for ci in 0..c {
                        for i in 0..3 {
                            for j in 0..3 {
                                let (sy, sx) = (y as isize + i as isize - 1, xx as isize + j as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += k[((o * c + ci) * 3 + i) * 3 + j] * x[((r * c + ci) * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[((r * o_ch + o) * h + y) * w + xx] = s;
                }
            }
        }
    }
    out
}

fn pool2(x: &[f64], rows: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; rows * c * oh * ow];
    for rc in 0..rows * c {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| x[(rc * h + 2 * y + dy) * w + 2 * xx + dx];
                out[(rc * oh + y) * ow + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
    }
    out
}

pub fn softmax(z: &[f64], k: usize, tau: f64) -> Vec<f64> {
    z.chunks(k)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| ((v - m) / tau).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

pub fn ce(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let p = softmax(logits, k, 1.0);
    -labels.iter().enumerate().map(|(r, &y)| p[r * k + y].ln()).sum::<f64>() / labels.len() as f64
}

/// `τ² · mean KL(σ(t/τ) ‖ σ(s/τ))`
pub fn kl(target: &[f64], learner: &[f64], k: usize, tau: f64) -> f64 {
    let (pt, ps) = (softmax(target, k, tau), softmax(learner, k, tau));
    let rows = target.len() / k;
    let s: f64 = pt.iter().zip(&ps).map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum();
    tau * tau * s / rows as f64
}

/// The student objective with a fixed peer and anchor, evaluated in `f64`.
pub struct RefObjective<'a> {
    pub x: &'a [f64],
    pub rows: usize,
    pub labels: &'a [usize],
    pub peer: &'a [f64],
    pub anchor: &'a [f64],
    pub w: [f64; 3],
    pub tau: f64,
}

impl RefObjective<'_> {
    pub fn eval(&self, p: &RefParams) -> (f64, Vec<bool>) {
        let k = p.spec.num_classes;
        let (z, signs) = ref_forward(p, self.x, self.rows);
        let v = self.w[0] * ce(&z, k, self.labels)
            + self.w[1] * kl(self.peer, &z, k, self.tau)
            + self.w[2] * kl(self.anchor, &z, k, self.tau);
        (v, signs)
    }
}

/// Outcome of one finite-difference comparison.
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// A perturbation flipped a ReLU, so the central difference is invalid.
    pub kink: bool,
}

/// Denominator floor: below it the comparison is absolute.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Checks every parameter of a random student network against central
/// differences of the reference objective.
pub fn gradient_check(spec: &ArchitectureSpec, seed: u64, rows: usize, h: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let net = Network::init(spec, seed).unwrap();
    let (d, k) = (spec.input_size(), spec.num_classes);
    let x: Vec<f32> = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
    let peer: Vec<f32> = (0..rows * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let anchor: Vec<f32> = (0..rows * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let tau = 2.0f32;
    let weights = DistillWeights { w1: 0.7, w2: 1.3, w3: 0.9, tau, ..DistillWeights::default() };

    let tape = Tape::new();
    let xt = Tensor::from_vec(vec![rows, d], x.clone()).unwrap();
    let own = net.forward(&tape, &xt).unwrap();
    let pt = Tensor::from_vec(vec![rows, k], peer.clone()).unwrap();
    let at = Tensor::from_vec(vec![rows, k], anchor.clone()).unwrap();
    let obj = student_loss(&tape, Some(&pt), &own, Some(&at), &labels, &weights).unwrap();
    tape.backward(&obj.total).unwrap();

    let f64s = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
    let (x64, peer64, anchor64) = (f64s(&x), f64s(&peer), f64s(&anchor));
    let reference = RefObjective {
        x: &x64,
        rows,
        labels: &labels,
        peer: &peer64,
        anchor: &anchor64,
        w: [0.7, 1.3, 0.9],
        tau: tau as f64,
    };
    let base = RefParams::of(&net);
    let (_, base_signs) = reference.eval(&base);
    let mut out = GradCheck { max_rel_err: 0.0, checked: 0, kink: false };
    for (pi, name) in base.names.iter().enumerate() {
        let grad = net.param(name).unwrap().grad().unwrap();
        for (j, &g) in grad.iter().enumerate() {
            let mut plus = base.clone();
            plus.values[pi][j] += h;
            let mut minus = base.clone();
            minus.values[pi][j] -= h;
            let ((fp, sp), (fm, sm)) = (reference.eval(&plus), reference.eval(&minus));
            if sp != base_signs || sm != base_signs {
                out.kink = true;
                return out;
            }
            let fd = (fp - fm) / (2.0 * h);
            out.max_rel_err = out.max_rel_err.max(rel_err(g as f64, fd));
            out.checked += 1;
        }
    }
    out
}

/// The 20 architectures of the gradient oracle: 1–3 layer MLPs up to 64
/// units and small CNNs.
pub fn gradient_specs() -> Vec<ArchitectureSpec> {
    let mut specs = Vec::new();
    let mlps: [&[usize]; 14] = [
        &[4],
        &[8],
        &[16],
        &[64],
        &[8, 8],
        &[16, 8],
        &[32, 16],
        &[64, 32],
        &[8, 8, 8],
        &[16, 16, 8],
        &[12, 10, 6],
        &[32, 32, 32],
        &[64, 16, 8],
        &[5, 7, 9],
    ];
    for (i, w) in mlps.iter().enumerate() {
        specs.push(ArchitectureSpec::mlp(2 + i % 5, 2 + i % 4, w, 1.0));
    }
    for (i, (dims, ch)) in [([1, 4, 4], [2, 3]), ([1, 5, 5], [3, 2]), ([2, 4, 4], [2, 2]), ([1, 6, 6], [4, 4]), ([1, 4, 6], [2, 4]), ([3, 4, 4], [2, 2])]
        .into_iter()
        .enumerate()
    {
        specs.push(ArchitectureSpec::tiny_cnn(dims, 3 + i % 3, ch, 1.0));
    }
    specs
}

/// Runs the oracle for one spec, redrawing the network (next seed) when a
/// perturbation crosses a ReLU kink. Returns the seed used and the check.
pub fn gradient_check_smooth(spec: &ArchitectureSpec, first_seed: u64) -> (u64, GradCheck) {
    for seed in first_seed..first_seed + 50 {
        let c = gradient_check(spec, seed, 6, 1e-3);
        if !c.kink {
            return (seed, c);
        }
    }
    panic!("every draw crossed a ReLU kink for {spec:?}");
}

pub fn small_data(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec { train_samples: 240, test_samples: 240, seed, ..SyntheticSpec::default() }).unwrap()
}
