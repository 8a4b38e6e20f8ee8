//! Dense, batch-normalization and dropout layers.

use crate::error::{Error, Result};
use crate::nn::rng::Rng;
use crate::tensor::{Array, Graph, Param, Tensor};

/// Weight initialization scheme for a dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±√(6/in)`, for layers followed by ReLU.
    He,
    /// Uniform in `±√(6/(in+out))`, for linear and sigmoid heads.
    Xavier,
}

impl Init {
    pub fn bound(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Init::He => (6.0 / fan_in as f64).sqrt(),
            Init::Xavier => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }
}

/// Fully connected layer `y = x·W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut Rng) -> Self {
        assert!(fan_in >= 1 && fan_out >= 1, "dense layer needs in, out >= 1");
        let bound = init.bound(fan_in, fan_out);
        let w = (0..fan_in * fan_out)
            .map(|_| rng.uniform_in(-bound, bound))
            .collect();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Array::new(vec![fan_in, fan_out], w).expect("sized above"),
            ),
            bias: Param::new(format!("{name}.bias"), Array::zeros(&[fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        x.matmul(&g.param(&self.weight))?.add(&g.param(&self.bias))
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Batch statistics observed during a training-mode forward pass, applied to
/// the running averages afterwards with [`BatchNorm::update_running`].
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array,
    pub running_var: Array,
    pub momentum: f64,
    pub eps: f64,
    name: String,
}

impl BatchNorm {
    pub fn new(name: &str, features: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Array::full(&[features], 1.0)),
            beta: Param::new(format!("{name}.beta"), Array::zeros(&[features])),
            running_mean: Array::zeros(&[features]),
            running_var: Array::full(&[features], 1.0),
            momentum: 0.1,
            eps: 1e-5,
            name: name.to_string(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Normalize with the batch's own statistics.
    pub fn forward_train(&self, g: &Graph, x: &Tensor) -> Result<(Tensor, BatchStats)> {
        let n = x.value().rows();
        if n < 1 {
            return Err(Error::contract("batch norm on an empty batch"));
        }
        let inv_n = 1.0 / n as f64;
        let mean = x.sum_cols()?.scale(inv_n);
        let centered = x.sub(&mean)?;
        let var = centered.square()?.sum_cols()?.scale(inv_n);
        let std = var.offset(self.eps).sqrt();
        let normed = centered.div(&std)?;
        let out = normed
            .mul(&g.param(&self.gamma))?
            .add(&g.param(&self.beta))?;
        let stats = BatchStats {
            mean: mean.value().data().to_vec(),
            var: var.value().data().to_vec(),
            count: n,
        };
        Ok((out, stats))
    }

    /// Normalize with the frozen running statistics: an affine map of `x`.
    pub fn forward_eval(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let inv_std = self.running_var.map(|v| 1.0 / (v + self.eps).sqrt());
        let mean = g.constant(self.running_mean.clone());
        let scale = g.constant(inv_std);
        x.sub(&mean)?
            .mul(&scale)?
            .mul(&g.param(&self.gamma))?
            .add(&g.param(&self.beta))
    }

    /// Exponential moving average update; the running variance uses the
    /// unbiased batch variance.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b * correction;
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Inverted dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate })
    }

    /// Zero each unit with probability `rate` and scale survivors by
    /// `1/(1-rate)`. With `rng == None` (evaluation mode) this is the identity.
    pub fn forward(&self, g: &Graph, x: &Tensor, rng: Option<&mut Rng>) -> Result<Tensor> {
        let Some(rng) = rng else {
            return Ok(x.clone());
        };
        if self.rate == 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.rate;
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.mul(&g.constant(Array::new(shape, mask)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_bias_zero_and_bounds() {
        let mut rng = Rng::new(1);
        let d = Dense::new("l", 64, 32, Init::He, &mut rng);
        assert!(d.bias.value().data().iter().all(|&b| b == 0.0));
        let bound = Init::He.bound(64, 32);
        assert!((bound - 0.306186).abs() < 1e-6);
        assert!(d.weight.value().data().iter().all(|w| w.abs() <= bound));
        let x = Init::Xavier.bound(64, 32);
        assert!((x - (6.0f64 / 96.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn init_is_deterministic() {
        let a = Dense::new("l", 3, 4, Init::He, &mut Rng::new(9));
        let b = Dense::new("l", 3, 4, Init::He, &mut Rng::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let g = Graph::new();
        let x = g.constant(Array::new(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let d = Dropout::new(0.5).unwrap();
        assert_eq!(d.forward(&g, &x, None).unwrap().array(), x.array());
        assert!(Dropout::new(1.0).is_err());
    }

    #[test]
    fn dropout_is_unbiased() {
        let g = Graph::new();
        let n = 200_000;
        let x = g.constant(Array::full(&[n], 2.0));
        let d = Dropout::new(0.3).unwrap();
        let mut rng = Rng::new(5);
        let y = d.forward(&g, &x, Some(&mut rng)).unwrap();
        let mean = y.value().sum() / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.01, "mean {mean}");
    }

    #[test]
    fn batchnorm_train_output_variance_is_gamma_squared() {
        let g = Graph::new();
        let mut rng = Rng::new(3);
        let n = 4096;
        let data: Vec<f64> = (0..n * 2).map(|_| 3.0 + 5.0 * rng.gaussian()).collect();
        let x = g.constant(Array::new(vec![n, 2], data).unwrap());
        let mut bn = BatchNorm::new("bn", 2);
        bn.gamma.value_mut().data_mut().copy_from_slice(&[2.0, 0.5]);
        let (y, stats) = bn.forward_train(&g, &x).unwrap();
        let y = y.array();
        for j in 0..2 {
            let col: Vec<f64> = (0..n).map(|i| y.data()[i * 2 + j]).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / n as f64;
            let gamma = [2.0, 0.5][j];
            assert!((v - gamma * gamma).abs() < 1e-3 * gamma * gamma, "{v}");
        }
        bn.update_running(&stats);
        assert!((bn.running_mean.data()[0] - 0.3 * 1.0).abs() < 0.1);
    }

    #[test]
    fn batchnorm_eval_is_affine() {
        let g = Graph::new();
        let mut bn = BatchNorm::new("bn", 1);
        bn.running_mean = Array::new(vec![1], vec![2.0]).unwrap();
        bn.running_var = Array::new(vec![1], vec![4.0]).unwrap();
        bn.eps = 0.0;
        let x = g.constant(Array::new(vec![3, 1], vec![2.0, 4.0, 6.0]).unwrap());
        let y = bn.forward_eval(&g, &x).unwrap();
        assert_eq!(y.value().data(), &[0.0, 1.0, 2.0]);
    }
}
