//! Probability heads: truncated normal actions, diagonal-Gaussian latents,
//! Bernoulli logits and unit-variance Gaussian regression targets.
//!
//! Graph-building functions take and return [`NodeId`]s so that every density
//! is differentiable. A few value-level helpers exist for sampling and
//! bookkeeping outside a graph.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, Real, Tensor};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// Rejection attempts before a truncated-normal draw falls back to clipping.
pub const MAX_REJECTION_TRIES: usize = 100;

/// Truncated normal on `[-1, 1]` per action dimension.
#[derive(Clone, Copy, Debug)]
pub struct TruncNormal {
    pub mean: NodeId,
    pub std: NodeId,
}

/// Diagonal Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mean: NodeId,
    pub std: NodeId,
}

/// Splits a `[B, 2n]` head output into `tanh` mean and `softplus + floor` std.
pub fn trunc_normal_head<T: Real>(g: &mut Graph<T>, raw: NodeId, floor: f64) -> TruncNormal {
    let n = g.value(raw).cols() / 2;
    let m = g.slice_cols(raw, 0, n);
    let mean = g.tanh(m);
    let s = g.slice_cols(raw, n, 2 * n);
    let sp = g.softplus(s);
    let std = g.add_scalar(sp, floor);
    TruncNormal { mean, std }
}

/// Splits a `[B, 2n]` head output into mean and `softplus + floor` std.
pub fn diag_gaussian_head<T: Real>(g: &mut Graph<T>, raw: NodeId, floor: f64) -> DiagGaussian {
    let n = g.value(raw).cols() / 2;
    let mean = g.slice_cols(raw, 0, n);
    let s = g.slice_cols(raw, n, 2 * n);
    let sp = g.softplus(s);
    let std = g.add_scalar(sp, floor);
    DiagGaussian { mean, std }
}

pub fn std_normal_noise<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::c(v)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("noise shape")
}

/// Standard-normal noise such that `mean + std * eps` lands in `[-1, 1]`,
/// by rejection; after [`MAX_REJECTION_TRIES`] the last draw is kept and the
/// sample is clipped downstream.
pub fn trunc_normal_noise<T: Real>(mean: &Tensor<T>, std: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
    let data = mean
        .data()
        .iter()
        .zip(std.data())
        .map(|(&m, &s)| {
            let (m, s) = (m.to_f64c(), s.to_f64c());
            let mut eps = 0.0;
            for _ in 0..MAX_REJECTION_TRIES {
                eps = StandardNormal.sample(rng);
                if (m + s * eps).abs() <= 1.0 {
                    break;
                }
            }
            T::c(eps)
        })
        .collect();
    Tensor::new(mean.shape().to_vec(), data).expect("noise shape")
}

/// Reparameterized sample `clip(mean + std * eps)`; the clip is straight-through.
pub fn trunc_normal_sample<T: Real>(g: &mut Graph<T>, d: TruncNormal, eps: Tensor<T>) -> NodeId {
    let e = g.constant(eps);
    let se = g.mul(d.std, e);
    let x = g.add(d.mean, se);
    g.clip_straight_through(x, -1.0, 1.0)
}

/// Draws noise with [`trunc_normal_noise`] and samples.
pub fn trunc_normal_draw<T: Real>(g: &mut Graph<T>, d: TruncNormal, rng: &mut impl Rng) -> NodeId {
    let eps = trunc_normal_noise(g.value(d.mean), g.value(d.std), rng);
    trunc_normal_sample(g, d, eps)
}

fn std_normal_cdf<T: Real>(g: &mut Graph<T>, x: NodeId) -> NodeId {
    let s = g.scale(x, FRAC_1_SQRT_2);
    let e = g.erf(s);
    let h = g.scale(e, 0.5);
    g.add_scalar(h, 0.5)
}

/// Standardized bounds `alpha = (-1 - mu)/sigma`, `beta = (1 - mu)/sigma` and
/// the in-bounds mass `Z = Phi(beta) - Phi(alpha)`.
fn trunc_bounds<T: Real>(g: &mut Graph<T>, d: TruncNormal) -> (NodeId, NodeId, NodeId) {
    let neg_mu = g.neg(d.mean);
    let lo = g.add_scalar(neg_mu, -1.0);
    let hi = g.add_scalar(neg_mu, 1.0);
    let alpha = g.div(lo, d.std);
    let beta = g.div(hi, d.std);
    let cb = std_normal_cdf(g, beta);
    let ca = std_normal_cdf(g, alpha);
    let z = g.sub(cb, ca);
    (alpha, beta, z)
}

/// Log density of `action` under the truncated normal, summed over action
/// dimensions: `[B, 1]`.
pub fn trunc_normal_log_prob<T: Real>(g: &mut Graph<T>, d: TruncNormal, action: NodeId) -> Result<NodeId> {
    if let Some(v) = g.value(action).data().iter().find(|v| v.abs() > T::one()) {
        return Err(Error::OutOfSupport(format!(
            "action component {:?} outside [-1, 1]",
            v
        )));
    }
    let diff = g.sub(action, d.mean);
    let u = g.div(diff, d.std);
    let u2 = g.square(u);
    let quad = g.scale(u2, -0.5);
    let ln_std = g.ln(d.std);
    let (_, _, z) = trunc_bounds(g, d);
    let ln_z = g.ln(z);
    let a = g.sub(quad, ln_std);
    let b = g.sub(a, ln_z);
    let per_dim = g.add_scalar(b, -0.5 * LN_2PI);
    Ok(g.sum_cols(per_dim))
}

fn std_normal_pdf<T: Real>(g: &mut Graph<T>, x: NodeId) -> NodeId {
    let x2 = g.square(x);
    let h = g.scale(x2, -0.5);
    let e = g.exp(h);
    g.scale(e, (-0.5 * LN_2PI).exp())
}

/// Differential entropy, summed over action dimensions: `[B, 1]`.
///
/// `H = ln(sqrt(2 pi e) sigma Z) + (alpha phi(alpha) - beta phi(beta)) / (2 Z)`.
pub fn trunc_normal_entropy<T: Real>(g: &mut Graph<T>, d: TruncNormal) -> NodeId {
    let (alpha, beta, z) = trunc_bounds(g, d);
    let sz = g.mul(d.std, z);
    let ln_sz = g.ln(sz);
    let base = g.add_scalar(ln_sz, 0.5 * (LN_2PI + 1.0));
    let pa = std_normal_pdf(g, alpha);
    let pb = std_normal_pdf(g, beta);
    let apa = g.mul(alpha, pa);
    let bpb = g.mul(beta, pb);
    let num = g.sub(apa, bpb);
    let z2 = g.scale(z, 2.0);
    let corr = g.div(num, z2);
    let h = g.add(base, corr);
    g.sum_cols(h)
}

/// Value-level truncated-normal log density for one dimension.
pub fn trunc_normal_log_pdf_scalar(mean: f64, std: f64, a: f64) -> f64 {
    let phi = |x: f64| 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let z = phi((1.0 - mean) / std) - phi((-1.0 - mean) / std);
    -0.5 * ((a - mean) / std).powi(2) - std.ln() - 0.5 * LN_2PI - z.ln()
}

/// Reparameterized Gaussian sample `mean + std * eps`.
pub fn gaussian_sample<T: Real>(g: &mut Graph<T>, d: DiagGaussian, eps: Tensor<T>) -> NodeId {
    let e = g.constant(eps);
    let se = g.mul(d.std, e);
    g.add(d.mean, se)
}

/// `KL[q || p]` summed over dimensions and averaged over the batch.
pub fn diag_gaussian_kl<T: Real>(g: &mut Graph<T>, q: DiagGaussian, p: DiagGaussian) -> NodeId {
    let ratio = g.div(p.std, q.std);
    let ln_ratio = g.ln(ratio);
    let vq = g.square(q.std);
    let dm = g.sub(q.mean, p.mean);
    let dm2 = g.square(dm);
    let num = g.add(vq, dm2);
    let vp = g.square(p.std);
    let two_vp = g.scale(vp, 2.0);
    let frac = g.div(num, two_vp);
    let s = g.add(ln_ratio, frac);
    let per = g.add_scalar(s, -0.5);
    let rows = g.sum_cols(per);
    g.mean(rows)
}

/// Stop-gradient copy of a distribution's parameters.
pub fn detach_gaussian<T: Real>(g: &mut Graph<T>, d: DiagGaussian) -> DiagGaussian {
    DiagGaussian {
        mean: g.detach(d.mean),
        std: g.detach(d.std),
    }
}

/// Elementwise Bernoulli log-likelihood `t * x - softplus(x)` of 0/1 targets
/// under logits `x`. Stable for large `|x|`.
pub fn bernoulli_log_prob<T: Real>(g: &mut Graph<T>, logit: NodeId, target: NodeId) -> NodeId {
    let tx = g.mul(logit, target);
    let sp = g.softplus(logit);
    g.sub(tx, sp)
}

/// Negative log-likelihood of `target` under a unit-variance Gaussian centred
/// at `pred`, summed over the last dimension: `[B, 1]`.
pub fn unit_gaussian_nll<T: Real>(g: &mut Graph<T>, pred: NodeId, target: NodeId) -> NodeId {
    let d = g.sub(pred, target);
    let d2 = g.square(d);
    let h = g.scale(d2, 0.5);
    let c = g.add_scalar(h, 0.5 * LN_2PI);
    g.sum_cols(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn tn(g: &mut Graph<f64>, mean: &[f64], std: &[f64]) -> TruncNormal {
        let n = mean.len();
        TruncNormal {
            mean: g.constant(Tensor::from_f64(&[1, n], mean).unwrap()),
            std: g.constant(Tensor::from_f64(&[1, n], std).unwrap()),
        }
    }

    /// Closed-form truncated-normal mean via statrs.
    fn analytic_trunc_mean(mu: f64, sigma: f64) -> f64 {
        let n = Normal::new(0.0, 1.0).unwrap();
        let (a, b) = ((-1.0 - mu) / sigma, (1.0 - mu) / sigma);
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        mu + sigma * (pdf(a) - pdf(b)) / (n.cdf(b) - n.cdf(a))
    }

    #[test]
    fn log_prob_at_zero_matches_closed_form() {
        let mut g = Graph::<f64>::new();
        let d = tn(&mut g, &[0.0], &[1.0]);
        let a = g.constant(Tensor::from_rows(&[vec![0.0]]));
        let lp = trunc_normal_log_prob(&mut g, d, a).unwrap();
        let n = Normal::new(0.0, 1.0).unwrap();
        let expected = -0.5 * LN_2PI - (n.cdf(1.0) - n.cdf(-1.0)).ln();
        assert!((g.item(lp) - expected).abs() < 1e-10);
        // -0.918939 - ln(0.682689) = -0.918939 + 0.381700
        assert!((g.item(lp) - (-0.537239)).abs() < 1e-4);
    }

    #[test]
    fn density_integrates_to_one() {
        // Composite Simpson on [-1, 1].
        for &(m, s) in &[(0.0, 1.0), (0.7, 0.2), (-0.3, 2.5), (0.95, 0.1)] {
            let n = 20_000;
            let h = 2.0 / n as f64;
            let mut acc = 0.0;
            for i in 0..=n {
                let x = -1.0 + i as f64 * h;
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * trunc_normal_log_pdf_scalar(m, s, x).exp();
            }
            acc *= h / 3.0;
            assert!((acc - 1.0).abs() < 1e-4, "mean {m} std {s}: {acc}");
        }
    }

    #[test]
    fn graph_log_prob_matches_scalar_helper() {
        let mut g = Graph::<f64>::new();
        let d = tn(&mut g, &[0.3, -0.6], &[0.4, 0.9]);
        let a = g.constant(Tensor::from_rows(&[vec![0.1, -0.95]]));
        let lp = trunc_normal_log_prob(&mut g, d, a).unwrap();
        let expected = trunc_normal_log_pdf_scalar(0.3, 0.4, 0.1) + trunc_normal_log_pdf_scalar(-0.6, 0.9, -0.95);
        assert!((g.item(lp) - expected).abs() < 1e-12);
    }

    #[test]
    fn log_prob_symmetric() {
        let mut g = Graph::<f64>::new();
        let d = tn(&mut g, &[0.0], &[0.7]);
        let a = g.constant(Tensor::from_rows(&[vec![0.42]]));
        let b = g.constant(Tensor::from_rows(&[vec![-0.42]]));
        let la = trunc_normal_log_prob(&mut g, d, a).unwrap();
        let lb = trunc_normal_log_prob(&mut g, d, b).unwrap();
        assert_eq!(g.item(la), g.item(lb));
    }

    #[test]
    fn log_prob_out_of_support_is_error() {
        let mut g = Graph::<f64>::new();
        let d = tn(&mut g, &[0.0], &[0.7]);
        let a = g.constant(Tensor::from_rows(&[vec![1.2]]));
        assert!(matches!(trunc_normal_log_prob(&mut g, d, a), Err(Error::OutOfSupport(_))));
    }

    #[test]
    fn samples_stay_in_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f32>::new();
        let n = 10_000;
        let mean = g.constant(Tensor::full(&[n, 1], 0.9f32));
        let std = g.constant(Tensor::full(&[n, 1], 3.0f32));
        let s = trunc_normal_draw(&mut g, TruncNormal { mean, std }, &mut rng);
        assert!(g.value(s).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn degenerate_std_concentrates_on_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let d = tn(&mut g, &[0.0], &[1e-6]);
        let s = trunc_normal_draw(&mut g, d, &mut rng);
        assert!(g.item(s).abs() < 1e-5);
    }

    #[test]
    fn monte_carlo_mean_matches_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut g = Graph::<f64>::new();
        let mean = g.constant(Tensor::full(&[n, 1], 0.5));
        let std = g.constant(Tensor::full(&[n, 1], 0.2));
        let s = trunc_normal_draw(&mut g, TruncNormal { mean, std }, &mut rng);
        let emp = g.value(s).mean();
        let ana = analytic_trunc_mean(0.5, 0.2);
        assert!((emp - ana).abs() < 0.02, "{emp} vs {ana}");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::<f32>::new();
            let d = TruncNormal {
                mean: g.constant(Tensor::full(&[8, 2], 0.1f32)),
                std: g.constant(Tensor::full(&[8, 2], 0.5f32)),
            };
            let s = trunc_normal_draw(&mut g, d, &mut rng);
            g.value(s).clone()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn entropy_matches_numerical_integral_and_is_monotone_in_std() {
        let numeric = |m: f64, s: f64| {
            let n = 20_000;
            let h = 2.0 / n as f64;
            (0..n)
                .map(|i| {
                    let x = -1.0 + (i as f64 + 0.5) * h;
                    let lp = trunc_normal_log_pdf_scalar(m, s, x);
                    -lp.exp() * lp * h
                })
                .sum::<f64>()
        };
        let mut last = f64::NEG_INFINITY;
        for k in 1..=30 {
            let s = 0.1 * k as f64;
            let mut g = Graph::<f64>::new();
            let d = tn(&mut g, &[0.3], &[s]);
            let h = trunc_normal_entropy(&mut g, d);
            let hv = g.item(h);
            assert!((hv - numeric(0.3, s)).abs() < 1e-4, "std {s}");
            assert!(hv > last, "entropy must grow with std");
            last = hv;
        }
    }

    fn gauss(g: &mut Graph<f64>, m: &[f64], s: &[f64]) -> DiagGaussian {
        let n = m.len();
        DiagGaussian {
            mean: g.constant(Tensor::from_f64(&[1, n], m).unwrap()),
            std: g.constant(Tensor::from_f64(&[1, n], s).unwrap()),
        }
    }

    #[test]
    fn kl_closed_forms() {
        let mut g = Graph::<f64>::new();
        let q = gauss(&mut g, &[0.3, -1.0], &[0.5, 2.0]);
        let k0 = diag_gaussian_kl(&mut g, q, q);
        assert!(g.item(k0).abs() < 1e-15);
        let a = gauss(&mut g, &[1.0], &[1.0]);
        let b = gauss(&mut g, &[0.0], &[1.0]);
        let k = diag_gaussian_kl(&mut g, a, b);
        assert!((g.item(k) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (mq, sq) = ([0.4, -0.2, 1.1], [0.6, 1.3, 0.9]);
        let (mp, sp) = ([0.0, 0.5, 0.7], [1.0, 0.8, 1.5]);
        let mut g = Graph::<f64>::new();
        let q = gauss(&mut g, &mq, &sq);
        let p = gauss(&mut g, &mp, &sp);
        let kn = diag_gaussian_kl(&mut g, q, p);
        let k = g.item(kn);
        let logn = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * LN_2PI;
        let n = 100_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                (0..3)
                    .map(|d| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        let x = mq[d] + sq[d] * e;
                        logn(x, mq[d], sq[d]) - logn(x, mp[d], sp[d])
                    })
                    .sum::<f64>()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - k).abs() < 3.0 * se, "mc {mean} ± {se}, closed {k}");
    }

    #[test]
    fn bernoulli_values_and_stability() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0], vec![40.0], vec![-80.0], vec![80.0]]));
        let t = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![0.0]]));
        let lp = bernoulli_log_prob(&mut g, x, t);
        let v = g.value(lp).data().to_vec();
        assert!((v[0] - 0.5f64.ln()).abs() < 1e-12);
        assert!(v[1].abs() < 1e-15 && v[1].is_finite());
        assert!((v[2] - (-80.0)).abs() < 1e-12);
        assert!((v[3] - (-80.0)).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_matches_naive_formula_in_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::<f32>::new();
        let logits: Vec<f64> = (0..500).map(|_| rng.random_range(-15.0..15.0)).collect();
        let targets: Vec<f64> = (0..500).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let x = g.constant(Tensor::from_f64(&[500, 1], &logits).unwrap());
        let t = g.constant(Tensor::from_f64(&[500, 1], &targets).unwrap());
        let lp = bernoulli_log_prob(&mut g, x, t);
        for i in 0..500 {
            let s = 1.0 / (1.0 + (-logits[i]).exp());
            let naive = targets[i] * s.ln() + (1.0 - targets[i]) * (1.0 - s).ln();
            let got = g.value(lp).data()[i] as f64;
            assert!((got - naive).abs() < 1e-6 * naive.abs().max(1.0), "{got} vs {naive}");
        }
    }

    #[test]
    fn unit_gaussian_nll_floor() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let nll = unit_gaussian_nll(&mut g, p, p);
        assert!((g.item(nll) - LN_2PI).abs() < 1e-15);
    }
}
