use super::{DenseMatrix, Mode};
use crate::error::{dim_err, PkmError, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// 1-D batch normalization over the feature axis.
///
/// Train mode normalizes by the biased batch variance and folds the unbiased
/// variance into the running estimate, `running = (1 - momentum)·running +
/// momentum·batch`. With `affine == false` gamma/beta stay at 1/0 and their
/// gradients are reported as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub affine: bool,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub xhat: DenseMatrix,
    pub inv_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self::with_params(dim, DEFAULT_MOMENTUM, DEFAULT_EPS, true).expect("default parameters are valid")
    }

    pub fn with_params(dim: usize, momentum: f64, eps: f64, affine: bool) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(PkmError::Config(format!("batchnorm eps must be > 0, got {eps}")));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(PkmError::Config(format!(
                "batchnorm momentum must lie in (0,1), got {momentum}"
            )));
        }
        Ok(Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum,
            eps,
            affine,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with running statistics; never mutates.
    pub fn forward_eval(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_width(x)?;
        let mut y = x.clone();
        let scale: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        for r in 0..y.rows() {
            for (j, v) in y.row_mut(r).iter_mut().enumerate() {
                let xhat = (*v - self.running_mean[j]) * scale[j];
                *v = self.gamma[j] * xhat + self.beta[j];
            }
        }
        Ok(y)
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &DenseMatrix) -> Result<(DenseMatrix, BatchNormCache)> {
        self.check_width(x)?;
        let n = x.rows();
        if n < 2 {
            return Err(PkmError::Config(
                "batchnorm in train mode needs a batch of at least 2".into(),
            ));
        }
        let dim = self.dim();
        let mut mean = vec![0.0; dim];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        for s in &mut var {
            *s /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut xhat = x.clone();
        let mut y = DenseMatrix::zeros(n, dim);
        for r in 0..n {
            let xr = xhat.row_mut(r);
            for j in 0..dim {
                xr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            let yr = y.row_mut(r);
            for j in 0..dim {
                yr[j] = self.gamma[j] * xr[j] + self.beta[j];
            }
        }

        let unbias = n as f64 / (n as f64 - 1.0);
        for j in 0..dim {
            self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
            self.running_var[j] =
                (1.0 - self.momentum) * self.running_var[j] + self.momentum * var[j] * unbias;
        }
        Ok((y, BatchNormCache { xhat, inv_std }))
    }

    pub fn forward(&mut self, x: &DenseMatrix, mode: Mode) -> Result<(DenseMatrix, Option<BatchNormCache>)> {
        match mode {
            Mode::Train => self.forward_train(x).map(|(y, c)| (y, Some(c))),
            Mode::Eval => self.forward_eval(x).map(|y| (y, None)),
        }
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: &DenseMatrix) -> Result<(BatchNormGrads, DenseMatrix)> {
        let n = cache.xhat.rows();
        let dim = self.dim();
        if dy.rows() != n || dy.cols() != dim {
            return dim_err("batchnorm backward: upstream gradient shape");
        }
        let mut dgamma = vec![0.0; dim];
        let mut dbeta = vec![0.0; dim];
        // Σ_r dxhat and Σ_r dxhat·xhat per feature.
        let mut sum_dxhat = vec![0.0; dim];
        let mut sum_dxhat_xhat = vec![0.0; dim];
        for r in 0..n {
            let (g, xh) = (dy.row(r), cache.xhat.row(r));
            for j in 0..dim {
                dgamma[j] += g[j] * xh[j];
                dbeta[j] += g[j];
                let dxh = g[j] * self.gamma[j];
                sum_dxhat[j] += dxh;
                sum_dxhat_xhat[j] += dxh * xh[j];
            }
        }
        let nf = n as f64;
        let mut dx = DenseMatrix::zeros(n, dim);
        for r in 0..n {
            let (g, xh) = (dy.row(r), cache.xhat.row(r));
            let out = dx.row_mut(r);
            for j in 0..dim {
                let dxh = g[j] * self.gamma[j];
                out[j] = cache.inv_std[j] / nf * (nf * dxh - sum_dxhat[j] - xh[j] * sum_dxhat_xhat[j]);
            }
        }
        if !self.affine {
            dgamma.iter_mut().for_each(|v| *v = 0.0);
            dbeta.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok((
            BatchNormGrads {
                gamma: dgamma,
                beta: dbeta,
            },
            dx,
        ))
    }

    pub fn round_to_f32(&mut self) {
        for v in self
            .gamma
            .iter_mut()
            .chain(&mut self.beta)
            .chain(&mut self.running_mean)
            .chain(&mut self.running_var)
        {
            *v = super::round_f32(*v);
        }
    }

    fn check_width(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.dim() {
            return dim_err(format!("batchnorm expects width {}, got {}", self.dim(), x.cols()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Rng};

    #[test]
    fn unit_variance_batch() {
        let mut bn = BatchNorm::new(1);
        let x = DenseMatrix::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
        let (y, _) = bn.forward_train(&x).unwrap();
        let s = 1.0 / (1.0 + DEFAULT_EPS).sqrt();
        assert!((y.get(0, 0) + s).abs() < 1e-15);
        assert!((y.get(1, 0) - s).abs() < 1e-15);
        // running stats: mean 0, unbiased var 2
        assert_eq!(bn.running_mean[0], 0.0);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn eval_uses_running_stats() {
        let bn = BatchNorm::new(3);
        let x = DenseMatrix::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let y = bn.forward_eval(&x).unwrap();
        for j in 0..3 {
            assert_eq!(y.get(0, j), x.get(0, j) / (1.0 + DEFAULT_EPS).sqrt());
        }
    }

    #[test]
    fn singleton_train_batch_is_rejected() {
        let mut bn = BatchNorm::new(2);
        assert!(bn.forward_train(&DenseMatrix::zeros(1, 2)).is_err());
        assert!(BatchNorm::with_params(2, 0.1, 0.0, true).is_err());
        assert!(BatchNorm::with_params(2, 1.0, 1e-5, true).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let (dim, n) = (1 + rng.below(4), 3 + rng.below(5));
            let mut bn = BatchNorm::new(dim);
            for j in 0..dim {
                bn.gamma[j] = rng.normal(1.0, 0.3);
                bn.beta[j] = rng.normal(0.0, 0.3);
            }
            let x = DenseMatrix::from_vec(n, dim, (0..n * dim).map(|_| rng.normal(0.0, 2.0)).collect()).unwrap();
            let c = DenseMatrix::from_vec(n, dim, (0..n * dim).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
            let loss = |bn: &BatchNorm, x: &DenseMatrix| -> f64 {
                let (y, _) = bn.clone().forward_train(x).unwrap();
                y.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = bn.clone().forward_train(&x).unwrap();
            let (grads, dx) = bn.backward(&cache, &c).unwrap();

            let report = grad_check(
                |p| loss(&bn, &DenseMatrix::from_vec(n, dim, p.to_vec()).unwrap()),
                x.as_slice(),
                dx.as_slice(),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "dx {}", report.max_rel_error);

            let mut point = bn.gamma.clone();
            point.extend_from_slice(&bn.beta);
            let mut analytic = grads.gamma.clone();
            analytic.extend_from_slice(&grads.beta);
            let report = grad_check(
                |p| {
                    let mut b = bn.clone();
                    b.gamma.copy_from_slice(&p[..dim]);
                    b.beta.copy_from_slice(&p[dim..]);
                    loss(&b, &x)
                },
                &point,
                &analytic,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "gamma/beta {}", report.max_rel_error);
        }
    }
}
