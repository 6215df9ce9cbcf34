//! Central finite-difference gradient checking.
//!
//! The analytic gradient comes from the production `f32` graph. The numeric
//! reference re-evaluates the same loss in `f64`, so rounding in the
//! difference quotient does not drown the signal.

use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::ParamSet;
use super::tensor::Real;
use crate::error::Result;

/// A scalar loss that can be built in any precision.
pub trait LossFn {
    fn eval<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>) -> Result<NodeId>;
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Relative error `|a - n| / max(|a|, |n|)` over the sampled coordinates.
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub coords: usize,
}

/// Compares analytic and central-difference gradients on up to
/// `coords_per_param` random coordinates of every parameter tensor.
pub fn check<L: LossFn>(
    loss: &L,
    params: &ParamSet<f32>,
    step: f64,
    coords_per_param: usize,
    rng: &mut impl Rng,
) -> Result<GradCheck> {
    let mut g32 = Graph::<f32>::new();
    let l32 = loss.eval(&mut g32, params)?;
    g32.check_finite("gradcheck forward")?;
    let analytic = g32.grad(l32, params)?;

    let mut p64: ParamSet<f64> = params.cast();
    let mut a = Vec::new();
    let mut n = Vec::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name).unwrap().len();
        let k = coords_per_param.min(len);
        for idx in sample(rng, len, k).into_iter() {
            let orig = p64.get(&name).unwrap().data()[idx];
            let mut eval_at = |v: f64| -> Result<f64> {
                let mut t = p64.get(&name).unwrap().clone();
                t.data_mut()[idx] = v;
                p64.set(&name, t)?;
                let mut g = Graph::<f64>::new();
                let l = loss.eval(&mut g, &p64)?;
                Ok(g.item(l))
            };
            let plus = eval_at(orig + step)?;
            let minus = eval_at(orig - step)?;
            eval_at(orig)?;
            n.push((plus - minus) / (2.0 * step));
            a.push(analytic[&name].data()[idx] as f64);
        }
    }
    Ok(compare(&a, &n))
}

/// Norm-based relative error between two gradient vectors. Two vanishing
/// vectors compare equal.
pub fn compare(a: &[f64], n: &[f64]) -> GradCheck {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let (na, nn) = (norm(a), norm(n));
    let denom = na.max(nn);
    let rel_err = if denom < 1e-9 { 0.0 } else { norm(&diff) / denom };
    GradCheck {
        rel_err,
        analytic_norm: na,
        numeric_norm: nn,
        coords: a.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Cubic;
    impl LossFn for Cubic {
        fn eval<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>) -> Result<NodeId> {
            let p = g.param(ps, "p")?;
            let sq = g.square(p);
            let cube = g.mul(sq, p);
            Ok(g.sum(cube))
        }
    }

    /// A loss with a deliberately wrong backward: sg(p) * p has true
    /// derivative 2p but the graph reports p.
    struct Wrong;
    impl LossFn for Wrong {
        fn eval<T: Real>(&self, g: &mut Graph<T>, ps: &ParamSet<T>) -> Result<NodeId> {
            let p = g.param(ps, "p")?;
            let d = g.detach(p);
            let m = g.mul(d, p);
            Ok(g.sum(m))
        }
    }

    fn params() -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::from_rows(&[vec![0.5, -1.5, 2.0]])).unwrap();
        ps
    }

    #[test]
    fn passes_on_correct_gradient() {
        let r = check(&Cubic, &params(), 1e-3, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(r.rel_err < 1e-5, "{r:?}");
        assert_eq!(r.coords, 3);
    }

    #[test]
    fn detects_wrong_gradient() {
        let r = check(&Wrong, &params(), 1e-3, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(r.rel_err > 0.3, "{r:?}");
    }

    #[test]
    fn vanishing_vectors_compare_equal() {
        assert_eq!(compare(&[0.0, 0.0], &[1e-12, 0.0]).rel_err, 0.0);
    }
}
