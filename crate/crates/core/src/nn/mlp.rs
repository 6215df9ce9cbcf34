//! Dense multi-layer perceptrons with ELU hidden activations.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Bind, Graph, NodeId};
use super::params::ParamSet;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Standard normal draw truncated at two standard deviations.
pub fn truncated_std_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= 2.0 {
            return v;
        }
    }
}

/// Layer widths, input first: `[in, hidden.., out]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub prefix: String,
    pub sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        Self {
            prefix: prefix.into(),
            sizes: sizes.to_vec(),
        }
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.prefix)
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Fan-in scaled truncated-normal weights, zero biases. With
    /// `zero_last` the output layer starts at zero.
    pub fn init(&self, ps: &mut ParamSet<f32>, rng: &mut impl Rng, zero_last: bool) -> Result<()> {
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f32> = if zero_last && l + 1 == self.n_layers() {
                vec![0.0; fan_in * fan_out]
            } else {
                (0..fan_in * fan_out)
                    .map(|_| (truncated_std_normal(rng) * std) as f32)
                    .collect()
            };
            ps.insert(&self.weight_name(l), Tensor::new(vec![fan_in, fan_out], w)?)?;
            ps.insert(&self.bias_name(l), Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    /// Affine/ELU stack; the last layer is affine only.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bind<'_, T>, input: NodeId) -> Result<NodeId> {
        let width = g.value(input).cols();
        if width != self.sizes[0] {
            return Err(Error::Shape(format!(
                "{}: input width {width}, expected {}",
                self.prefix, self.sizes[0]
            )));
        }
        let mut x = input;
        for l in 0..self.n_layers() {
            let w = g.bind(p, &self.weight_name(l))?;
            let b = g.bind(p, &self.bias_name(l))?;
            let ws = g.shape(w);
            if ws != [self.sizes[l], self.sizes[l + 1]] {
                return Err(Error::Shape(format!(
                    "{}: weight {} has shape {ws:?}",
                    self.prefix,
                    self.weight_name(l)
                )));
            }
            let xw = g.matmul(x, w);
            x = g.add(xw, b);
            if l + 1 < self.n_layers() {
                x = g.elu(x);
            }
        }
        Ok(x)
    }
}
