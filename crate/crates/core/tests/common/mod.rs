#![allow(dead_code)]

use drr::autodiff::Tensor;
use drr::model::{Architecture, LayerSpec, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `f(x) = W x + b` with `W` given row-major as `[classes, n]`.
pub fn linear_model(n: usize, w: Vec<f64>, b: Vec<f64>) -> ModelParams {
    let classes = b.len();
    let arch = Architecture {
        input_len: n,
        classes,
        layers: vec![LayerSpec::Dense { units: classes }],
    };
    ModelParams::new(arch, vec![Tensor::from_vec(&[classes, n], w), Tensor::vector(b)]).unwrap()
}

pub fn tiny_arch(n: usize, classes: usize) -> Architecture {
    Architecture {
        input_len: n,
        classes,
        layers: vec![
            LayerSpec::Conv { filters: 3, width: 3 },
            LayerSpec::Relu,
            LayerSpec::Conv { filters: 2, width: 3 },
            LayerSpec::Relu,
            LayerSpec::LocallyConnected {
                filters: 2,
                width: 4,
                stride: 4,
            },
            LayerSpec::Relu,
            LayerSpec::Dense { units: classes },
        ],
    }
}

/// Tiny ReLU net with every weight and bias drawn from `U(-1, 1)`.
pub fn tiny_relu(n: usize, classes: usize, seed: u64) -> ModelParams {
    let mut model = ModelParams::zeros(tiny_arch(n, classes)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in &mut model.tensors {
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    model
}

pub fn tanh_model(n: usize) -> ModelParams {
    let arch = Architecture {
        input_len: n,
        classes: 2,
        layers: vec![
            LayerSpec::Conv { filters: 2, width: 3 },
            LayerSpec::Tanh,
            LayerSpec::Dense { units: 2 },
        ],
    };
    ModelParams::init(arch, 5).unwrap()
}

pub fn random_input(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}
