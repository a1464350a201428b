//! Named parameters and the small dense/convolutional building blocks used by
//! coupling networks, relation networks and discriminators.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Result<Var<'t, T>> {
        tape.param(&self.name, &self.value)
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
        }
    }
}

/// Anything that owns parameters. Both visitors must yield parameters in the same order.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }
}

pub(crate) fn normal_tensor<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = T::lit(z * std);
    }
    t
}

/// Adds `N(0, std²)` noise to every parameter. Test and verification helper
/// for moving a model away from its identity initialization.
pub fn perturb<T: Scalar, M: Module<T> + ?Sized, R: Rng>(module: &mut M, rng: &mut R, std: f64) {
    for p in module.params_mut() {
        for v in p.value.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = *v + T::lit(z * std);
        }
    }
}

/// Same-padded 2-D convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-style normal init scaled by `gain`.
    pub fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                normal_tensor(rng, &[cout, cin, kernel, kernel], gain / fan_in.sqrt()),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn zeros(name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Conv2d {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[cout, cin, kernel, kernel])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(self.weight.bind(tape)?, Some(self.bias.bind(tape)?))
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer on `[N, in]` rows; weight is stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Dense {
            weight: Param::new(
                format!("{name}.weight"),
                normal_tensor(rng, &[fan_in, fan_out], (2.0 / fan_in as f64).sqrt()),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(self.weight.bind(tape)?)?.add(self.bias.bind(tape)?)
    }

    pub fn cast<U: Scalar>(&self) -> Dense<U> {
        Dense {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Scalar> Module<T> for Dense<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_broadcasts_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Dense::<f64>::new("fc", 3, 2, &mut rng);
        d.bias.value = Tensor::from_vec(vec![1.0, -1.0]);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 3])).unwrap();
        let y = d.forward(&tape, x).unwrap().tensor();
        assert_eq!(y.shape(), &[4, 2]);
        assert_eq!(&y.data()[..2], &[1.0, -1.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut c = Conv2d::<f64>::zeros("c", 1, 1, 1);
        c.weight.value = Tensor::ones(&[1, 1, 1, 1]);
        let tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.3 - 1.0).collect();
        let x = Tensor::new(vec![1, 1, 3, 4], data).unwrap();
        let y = c.forward(&tape, tape.constant(x.clone()).unwrap()).unwrap();
        assert_eq!(y.tensor(), x);
    }
}
