//! Dense layers, MLPs and the Adam optimizer used by every model head.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DsfError, Result};
use crate::tensor::{Graph, Tensor};

/// A named parameter array persisting across training steps. Each step binds
/// it into a fresh graph as a leaf.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply<'g>(&self, x: Tensor<'g>) -> Tensor<'g> {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Parameter,
    pub bias: Parameter,
    pub activation: Activation,
}

/// Records the graph leaves a model's parameters were bound to this step, so
/// gradients can be routed back by name after `backward`.
#[derive(Default)]
pub struct Binder<'g> {
    pub leaves: Vec<(String, Tensor<'g>)>,
}

impl<'g> Binder<'g> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, g: &'g Graph, p: &Parameter) -> Tensor<'g> {
        let t = g.leaf(&p.shape, &p.data);
        self.leaves.push((p.name.clone(), t));
        t
    }

    /// Gradients per parameter name after a backward pass. Missing grads
    /// (parameters unused by the loss) come back as zeros.
    pub fn grads(&self) -> HashMap<String, Vec<f64>> {
        self.leaves
            .iter()
            .map(|(name, t)| {
                let g = t
                    .grad()
                    .unwrap_or_else(|| vec![0.0; t.values().len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

/// Glorot-uniform weight init, deterministic per seed. 1-d shapes (biases)
/// come back zeroed.
pub fn init_params(name: &str, shape: &[usize], seed: u64) -> Parameter {
    let n: usize = shape.iter().product();
    let data = if shape.len() == 2 {
        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
    } else {
        vec![0.0; n]
    };
    Parameter {
        name: name.to_string(),
        shape: shape.to_vec(),
        data,
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `sizes` runs input → hidden... → output. Hidden layers use
    /// `hidden_activation`, the last layer `output_activation`. Parameter
    /// names are derived from `name` so checkpoints round-trip by name.
    pub fn new(
        name: &str,
        sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        seed: u64,
    ) -> Self {
        assert!(sizes.len() >= 2, "mlp needs at least input and output sizes");
        let mut layers = Vec::new();
        for (l, win) in sizes.windows(2).enumerate() {
            let last = l == sizes.len() - 2;
            let w = init_params(
                &format!("{name}.{l}.w"),
                &[win[0], win[1]],
                seed.wrapping_mul(1_000_003).wrapping_add(l as u64),
            );
            let b = init_params(&format!("{name}.{l}.b"), &[win[1]], 0);
            layers.push(DenseLayer {
                weights: w,
                bias: b,
                activation: if last {
                    output_activation
                } else {
                    hidden_activation
                },
            });
        }
        Mlp { layers }
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        x: Tensor<'g>,
        binder: &mut Binder<'g>,
    ) -> Result<Tensor<'g>> {
        let mut h = x;
        for layer in &self.layers {
            let w = binder.bind(g, &layer.weights);
            let b = binder.bind(g, &layer.bias);
            h = layer.activation.apply(h.matmul(w)?.add_row(b)?);
        }
        Ok(h)
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weights, &l.bias])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with bias correction. Weight decay enters as an L2 term added to the
/// gradient before the moment updates.
#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step_count: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over `params`, pulling each gradient from `grads` by name.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut Parameter>,
        grads: &HashMap<String, Vec<f64>>,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in params {
            let grad = grads.get(&p.name).ok_or_else(|| {
                DsfError::Contract(format!("no gradient recorded for parameter {}", p.name))
            })?;
            if grad.len() != p.data.len() {
                return Err(DsfError::Dimension(format!(
                    "gradient length {} vs parameter {} length {}",
                    grad.len(),
                    p.name,
                    p.data.len()
                )));
            }
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; p.data.len()], vec![0.0; p.data.len()]));
            for i in 0..p.data.len() {
                let g = grad[i] + c.weight_decay * p.data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use approx::assert_relative_eq;

    fn leaf_mlp(sizes: &[usize], seed: u64) -> Mlp {
        Mlp::new("t", sizes, Activation::Tanh, Activation::Linear, seed)
    }

    #[test]
    fn identity_layer_is_identity() {
        let mut mlp = leaf_mlp(&[2, 2], 0);
        mlp.layers[0].weights.data = vec![1.0, 0.0, 0.0, 1.0];
        let g = Graph::new();
        let x = g.constant(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut binder = Binder::new();
        let y = mlp.forward(&g, x, &mut binder).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn zero_weight_network_outputs_bias() {
        let mut mlp = leaf_mlp(&[3, 2], 0);
        mlp.layers[0].weights.data = vec![0.0; 6];
        mlp.layers[0].bias.data = vec![0.5, -0.25];
        let g = Graph::new();
        let x = g.constant(&[2, 3], &[9.0; 6]);
        let mut binder = Binder::new();
        let y = mlp.forward(&g, x, &mut binder).unwrap();
        assert_eq!(y.values(), vec![0.5, -0.25, 0.5, -0.25]);
    }

    #[test]
    fn two_layer_tanh_mlp_passes_grad_check() {
        let mlp = Mlp::new("t", &[3, 5, 2], Activation::Tanh, Activation::Tanh, 42);
        let params: Vec<(Vec<usize>, Vec<f64>)> = mlp
            .parameters()
            .map(|p| (p.shape.clone(), p.data.clone()))
            .collect();
        let report = grad_check(
            |g, leaves| {
                let x = g.constant(&[2, 3], &[0.3, -0.1, 0.8, -0.5, 0.2, 0.4]);
                let mut h = x;
                for (l, pair) in leaves.chunks(2).enumerate() {
                    h = h.matmul(pair[0])?.add_row(pair[1])?;
                    let _ = l;
                    h = h.tanh();
                }
                Ok(h.sum_all())
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut p = Parameter {
            name: "w".into(),
            shape: vec![1],
            data: vec![1.0],
        };
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), vec![2.0]);
        adam.step(std::iter::once(&mut p), &grads).unwrap();
        let delta = p.data[0] - 1.0;
        assert_relative_eq!(delta, -1e-4, max_relative = 1e-3);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = Parameter {
            name: "w".into(),
            shape: vec![2],
            data: vec![0.7, -0.3],
        };
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), vec![0.0, 0.0]);
        for _ in 0..10 {
            adam.step(std::iter::once(&mut p), &grads).unwrap();
        }
        assert_eq!(p.data, vec![0.7, -0.3]);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        // f(w) = w², grad = 2w, start at 1.0
        let mut p = Parameter {
            name: "w".into(),
            shape: vec![1],
            data: vec![1.0],
        };
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 1e-2,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let mut grads = HashMap::new();
            grads.insert("w".to_string(), vec![2.0 * p.data[0]]);
            adam.step(std::iter::once(&mut p), &grads).unwrap();
        }
        assert!(p.data[0].abs() < 0.5, "w = {}", p.data[0]);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params("w", &[30, 20], 123);
        let b = init_params("w", &[30, 20], 123);
        assert_eq!(a.data, b.data);
        let bound = (6.0 / 50.0f64).sqrt();
        assert!(a.data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn init_mean_is_near_zero() {
        let p = init_params("w", &[100, 100], 7);
        let mean: f64 = p.data.iter().sum::<f64>() / p.data.len() as f64;
        assert!(mean.abs() < 0.01, "mean = {mean}");
    }
}
