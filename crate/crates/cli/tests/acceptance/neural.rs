//! Finite-difference gradient checks of every tape operation plus the KL,
//! reparameterization and adjoint-convolution identities.

use std::time::Instant;

use fasgen_neural::kernels::{conv1d, conv_transpose1d};
use fasgen_neural::{kl_diag_gaussian, ConvSpec, LatentDistribution, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::support::{Shared, Verdict};

const FD_STEP: f32 = 1e-2;
const GRAD_TOL: f64 = 1e-3;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

fn mse64(y: &Tensor, target: &Tensor) -> f64 {
    let s: f64 = y
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum();
    s / y.len() as f64
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// Largest norm-wise relative error of tape gradients against central
/// differences of an MSE head, over all inputs.
fn gradcheck(seed: u64, inputs: Vec<Tensor>, build: Build) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let forward = |inputs: &[Tensor]| -> Tensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let y = build(&mut tape, &vars);
        tape.value(y).clone()
    };
    let target = randn(&mut rng, forward(&inputs).shape());
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let y = build(&mut tape, &vars);
    let loss = tape.mse(y, target.clone()).expect("mse head");
    let grads = tape.backward(loss);
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let mut diff = 0.0;
        let mut norm = 0.0;
        for j in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= FD_STEP;
            let num = (mse64(&forward(&plus), &target) - mse64(&forward(&minus), &target)) / (2.0 * f64::from(FD_STEP));
            diff += (f64::from(analytic.data()[j]) - num).powi(2);
            norm += num * num;
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-8));
    }
    worst
}

fn gradient_cases() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut r = |shape: &[usize]| randn(&mut rng, shape);
    let spec = ConvSpec::new(2, 2);
    let tspec = ConvSpec::new(2, 2).with_output_padding(1);
    let mut kinked = r(&[2, 3, 5]);
    for v in kinked.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let log_sigma = Tensor::new(vec![3, 4], (0..12).map(|i| -0.5 + 0.08 * i as f32).collect()).expect("shape");
    let eps = r(&[3, 4]);
    let target = r(&[2, 5]);
    let scale: Vec<f32> = (0..26).map(|i| 0.5 + i as f32 * 0.1).collect();
    let shift: Vec<f32> = (0..26).map(|i| i as f32 * -0.05).collect();
    vec![
        (
            "conv1d",
            gradcheck(1, vec![r(&[3, 2, 10]), r(&[4, 3, 5]), r(&[4])], Box::new(move |t, v| t.conv1d(v[0], v[1], v[2], spec).unwrap())),
        ),
        (
            "conv_transpose1d",
            gradcheck(
                2,
                vec![r(&[3, 2, 6]), r(&[3, 2, 5]), r(&[2])],
                Box::new(move |t, v| t.conv_transpose1d(v[0], v[1], v[2], tspec).unwrap()),
            ),
        ),
        (
            "linear",
            gradcheck(3, vec![r(&[4, 6]), r(&[3, 6]), r(&[3])], Box::new(|t, v| t.linear(v[0], v[1], v[2]).unwrap())),
        ),
        ("leaky_relu", gradcheck(4, vec![kinked], Box::new(|t, v| t.leaky_relu(v[0], 0.2)))),
        (
            "broadcast/concat/dense/slice/affine",
            gradcheck(
                5,
                vec![r(&[2, 3, 4]), r(&[3, 2])],
                Box::new(move |t, v| {
                    let eb = t.broadcast_len(v[1], 4).unwrap();
                    let c = t.concat_channels(v[0], eb).unwrap();
                    let d = t.to_dense(c).unwrap();
                    let s = t.slice_features(d, 3, 10).unwrap();
                    let back = t.concat_features(s, d).unwrap();
                    let a = t.feature_affine(back, &scale, &shift).unwrap();
                    let a = t.slice_features(a, 0, 24).unwrap();
                    t.from_dense(a, 4, 6).unwrap()
                }),
            ),
        ),
        (
            "reparameterize",
            gradcheck(
                6,
                vec![r(&[3, 4]), log_sigma.clone()],
                Box::new(move |t, v| t.reparameterize(v[0], v[1], eps.clone()).unwrap()),
            ),
        ),
        (
            "kl_mean/mse/weighted_sum",
            gradcheck(
                7,
                vec![r(&[3, 4]), log_sigma, r(&[2, 5])],
                Box::new(move |t, v| {
                    let kl = t.kl_mean(v[0], v[1]).unwrap();
                    let mse = t.mse(v[2], target.clone()).unwrap();
                    t.weighted_sum(&[(mse, 1.0), (kl, 0.7)])
                }),
            ),
        ),
    ]
}

/// Simpson quadrature of `q ln(q/p)` for one dimension against N(0, 1).
fn kl_quadrature(mu: f64, sigma: f64) -> f64 {
    let ln_norm = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let (a, b) = (mu - 14.0 * sigma, mu + 14.0 * sigma);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let f = |x: f64| {
        let lq = ln_norm(x, mu, sigma);
        lq.exp() * (lq - ln_norm(x, 0.0, 1.0))
    };
    let mut acc = f(a) + f(b);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

fn kl_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let mu: Vec<f32> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ls: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..0.8)).collect();
        let oracle: f64 = mu
            .iter()
            .zip(&ls)
            .map(|(&m, &l)| kl_quadrature(f64::from(m), f64::from(l).exp()))
            .sum();
        let got = kl_diag_gaussian(&LatentDistribution::new(mu, ls));
        worst = worst.max((got - oracle).abs());
    }
    worst
}

/// Worst relative moment error of 100k reparameterized draws.
fn reparameterization_error() -> f64 {
    let ld = LatentDistribution::new(vec![0.7, -1.3, 2.0], vec![0.5f32.ln(), 0.0, 1.8f32.ln()]);
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let n = 100_000;
    let (mut sum, mut sum_sq) = ([0.0f64; 3], [0.0f64; 3]);
    for _ in 0..n {
        for (d, z) in ld.sample(&mut rng).iter().enumerate() {
            sum[d] += f64::from(*z);
            sum_sq[d] += f64::from(*z).powi(2);
        }
    }
    let sigma = ld.sigma();
    (0..3)
        .map(|d| {
            let mean = sum[d] / n as f64;
            let var = sum_sq[d] / n as f64 - mean * mean;
            let (mu, s2) = (f64::from(ld.mu[d]), f64::from(sigma[d]).powi(2));
            ((mean - mu).abs() / mu.abs().max(1.0)).max((var - s2).abs() / s2)
        })
        .fold(0.0, f64::max)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Worst relative gap in `<conv(x), y> = <x, conv_transpose(y)>`.
fn adjoint_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let spec = ConvSpec::new(2, 2).with_output_padding(1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (cin, cout, batch, half) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(2..9));
        let x = randn(&mut rng, &[cin, batch, 2 * half]);
        let w = randn(&mut rng, &[cout, cin, 5]);
        let y = randn(&mut rng, &[cout, batch, half]);
        let cx = conv1d(&x, &w, &Tensor::zeros(&[cout]), spec).expect("conv");
        let ty = conv_transpose1d(&y, &w, &Tensor::zeros(&[cin]), spec).expect("deconv");
        let (lhs, rhs) = (dot(&cx, &y), dot(&x, &ty));
        worst = worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
    }
    worst
}

pub fn hygiene(_: &mut Shared) -> Result<Verdict, String> {
    let t = Instant::now();
    let cases = gradient_cases();
    let grads_ok = cases.iter().all(|(_, e)| *e <= GRAD_TOL);
    let worst = cases.iter().map(|c| c.1).fold(0.0, f64::max);
    let failing: Vec<&str> = cases.iter().filter(|c| c.1 > GRAD_TOL).map(|c| c.0).collect();
    let (kl, rep, adj) = (kl_error(), reparameterization_error(), adjoint_error());
    let secs = t.elapsed().as_secs_f64();
    let pass = grads_ok && kl <= 1e-4 && rep <= 0.02 && adj <= 1e-5 && secs < 60.0;
    Ok(Verdict::new(
        pass,
        format!(
            "{} gradient checks, worst relative error {worst:.1e} (<= 1e-3){}; KL vs quadrature {kl:.1e} (<= 1e-4); \
             reparameterized moments {rep:.1e} (<= 2e-2); adjoint gap {adj:.1e} (<= 1e-5); {secs:.1} s (< 60 s)",
            cases.len(),
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(", ")) }
        ),
    ))
}
