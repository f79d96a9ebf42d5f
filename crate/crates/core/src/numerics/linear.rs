use super::{DenseMatrix, Rng};
use crate::error::{dim_err, Result};

/// Affine map `y = x·Wᵀ + b` with `W` stored as out × in.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Input saved by [`Linear::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LinearCache {
    pub input: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Weights and bias drawn from U(-1/√in, 1/√in).
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let weight = (0..d_in * d_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let bias = (0..d_out).map(|_| rng.uniform_range(-bound, bound)).collect();
        Self {
            weight: DenseMatrix::from_vec(d_out, d_in, weight).expect("sized"),
            bias,
        }
    }

    pub fn from_parts(weight: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return dim_err(format!(
                "bias length {} for {} outputs",
                bias.len(),
                weight.rows()
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.d_in() {
            return dim_err(format!(
                "linear expects width {}, got {}",
                self.d_in(),
                x.cols()
            ));
        }
        let mut y = x.matmul_t(&self.weight)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, LinearCache)> {
        let y = self.apply(x)?;
        Ok((y, LinearCache { input: x.clone() }))
    }

    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &LinearCache, dy: &DenseMatrix) -> Result<(LinearGrads, DenseMatrix)> {
        if dy.cols() != self.d_out() || dy.rows() != cache.input.rows() {
            return dim_err("linear backward: upstream gradient shape");
        }
        let weight = dy.t_matmul(&cache.input)?;
        let mut bias = vec![0.0; self.d_out()];
        for r in 0..dy.rows() {
            for (b, g) in bias.iter_mut().zip(dy.row(r)) {
                *b += g;
            }
        }
        let dx = dy.matmul(&self.weight)?;
        Ok((LinearGrads { weight, bias }, dx))
    }

    pub fn round_to_f32(&mut self) {
        self.weight.round_to_f32();
        for b in &mut self.bias {
            *b = super::round_f32(*b);
        }
    }
}
