//! Echo noise channel: z = f(x) + s(x)⊙ε with an exact expression for
//! I(z:x).
//!
//! The noise ε is built by recursively applying the same encoder to other
//! samples in the batch, so its marginal matches the code marginal and the
//! channel's mutual information reduces to −E log|det S(x)|. With diagonal
//! S this is just −E Σ_j log s_j(x).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DsfError, Result};
use crate::nn::{Activation, Binder, Mlp};
use crate::tensor::{Graph, Tensor};

/// Default cap on the recursion depth; the truncated tail is bounded by
/// s_max^depth / (1 − s_max), below 0.012 at s_max = 0.9 and depth 64.
pub const DEFAULT_MAX_DEPTH: usize = 64;

/// Floor applied to the scale head so log s stays finite.
pub const S_FLOOR: f64 = 1e-6;

/// Paired mean/scale encoder heads producing a stochastic code with exact MI.
#[derive(Debug, Clone)]
pub struct EchoChannel {
    /// Mean head; tanh output keeps f(x) ∈ (−1, 1).
    pub f_head: Mlp,
    /// Scale head; s_max·sigmoid keeps s(x) ∈ (0, s_max).
    pub s_head: Mlp,
    pub dim: usize,
    pub s_max: f64,
    pub depth: usize,
}

impl EchoChannel {
    pub fn new(
        name: &str,
        input_dim: usize,
        hidden: &[usize],
        dim: usize,
        s_max: f64,
        depth: usize,
        seed: u64,
    ) -> Self {
        assert!(s_max > 0.0 && s_max < 1.0, "s_max must lie in (0,1)");
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        EchoChannel {
            f_head: Mlp::new(
                &format!("{name}.f"),
                &sizes,
                Activation::Relu,
                Activation::Tanh,
                seed,
            ),
            s_head: Mlp::new(
                &format!("{name}.s"),
                &sizes,
                Activation::Relu,
                Activation::Sigmoid,
                seed.wrapping_add(0x5eed),
            ),
            dim,
            s_max,
            depth,
        }
    }

    /// Runs both heads: (f(x), s(x)) with s already scaled and floored.
    pub fn heads<'g>(
        &self,
        g: &'g Graph,
        x: Tensor<'g>,
        binder: &mut Binder<'g>,
    ) -> Result<(Tensor<'g>, Tensor<'g>)> {
        let f = self.f_head.forward(g, x, binder)?;
        let s = self
            .s_head
            .forward(g, x, binder)?
            .scale(self.s_max)
            .clamp(S_FLOOR, 1.0);
        Ok((f, s))
    }

    pub fn parameters(&self) -> impl Iterator<Item = &crate::nn::Parameter> {
        self.f_head.parameters().chain(self.s_head.parameters())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut crate::nn::Parameter> {
        self.f_head
            .parameters_mut()
            .chain(self.s_head.parameters_mut())
    }
}

/// One stochastic draw from the channel for a whole batch.
pub struct EchoSample<'g> {
    /// z = f + s⊙ε, attached to the graph.
    pub z: Tensor<'g>,
    /// The constructed noise, gradient-detached ([n·d] row-major).
    pub epsilon: Vec<f64>,
    /// Batch estimate of I(z:x) in nats, differentiable w.r.t. the s head.
    pub mi_nats: Tensor<'g>,
}

fn validate_scales(s_vals: &[f64]) -> Result<()> {
    if let Some(bad) = s_vals.iter().find(|v| **v <= 0.0 || **v >= 1.0) {
        return Err(DsfError::Contract(format!(
            "echo scale entry {bad} outside (0, 1)"
        )));
    }
    Ok(())
}

/// Builds the recursion noise for a batch of head outputs.
///
/// A fresh permutation is drawn per recursion level; the level-0 permutation
/// is a derangement so no anchor contributes to its own noise. The result is
/// a pure function of (f, s, depth, seed).
pub fn echo_noise(
    f_vals: &[f64],
    s_vals: &[f64],
    n: usize,
    d: usize,
    depth: usize,
    seed: u64,
) -> Vec<f64> {
    let depth = depth.min(n.saturating_sub(1)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perms: Vec<Vec<usize>> = Vec::with_capacity(depth);
    for level in 0..depth {
        let mut p: Vec<usize> = (0..n).collect();
        if level == 0 {
            // derangement: retry until no fixed point
            loop {
                p.shuffle(&mut rng);
                if n < 2 || p.iter().enumerate().all(|(i, &j)| i != j) {
                    break;
                }
            }
        } else {
            p.shuffle(&mut rng);
        }
        perms.push(p);
    }
    // Innermost level first: acc ← f[p(i)] + s[p(i)]⊙acc
    let mut acc = vec![0.0; n * d];
    for p in perms.iter().rev() {
        let mut next = vec![0.0; n * d];
        for i in 0..n {
            let src = p[i];
            for j in 0..d {
                next[i * d + j] = f_vals[src * d + j] + s_vals[src * d + j] * acc[i * d + j];
            }
        }
        acc = next;
    }
    acc
}

/// Draws z = f + s⊙ε for a batch, treating ε as a constant in backward.
///
/// `frozen_noise` substitutes a previously constructed ε (used by gradient
/// checks, where the noise must not move with the parameters).
pub fn echo_sample<'g>(
    g: &'g Graph,
    f: Tensor<'g>,
    s: Tensor<'g>,
    depth: usize,
    seed: u64,
    frozen_noise: Option<&[f64]>,
) -> Result<EchoSample<'g>> {
    let shape = f.shape();
    if shape != s.shape() || shape.len() != 2 {
        return Err(DsfError::Dimension(format!(
            "echo_sample head shapes {:?} vs {:?}",
            shape,
            s.shape()
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(DsfError::BatchTooSmall { need: 2, got: n });
    }
    let s_vals = s.values();
    validate_scales(&s_vals)?;

    let epsilon = match frozen_noise {
        Some(e) => {
            if e.len() != n * d {
                return Err(DsfError::Dimension(format!(
                    "frozen noise length {} vs batch {}x{}",
                    e.len(),
                    n,
                    d
                )));
            }
            e.to_vec()
        }
        None => echo_noise(&f.values(), &s_vals, n, d, depth, seed),
    };

    let eps = g.constant(&[n, d], &epsilon);
    let z = f.add(s.mul(eps)?)?;
    let mi_nats = echo_mi(s)?;
    Ok(EchoSample {
        z,
        epsilon,
        mi_nats,
    })
}

/// Exact channel MI in nats: −(1/N)·Σ_i Σ_j log s_ij.
///
/// Accepts the closed boundary s = 1 (zero-information identity channel,
/// useful in tests) but rejects anything non-positive or above 1.
pub fn echo_mi<'g>(s: Tensor<'g>) -> Result<Tensor<'g>> {
    let vals = s.values();
    if let Some(bad) = vals.iter().find(|v| **v <= 0.0 || **v > 1.0) {
        return Err(DsfError::Domain(format!(
            "echo_mi scale entry {bad} outside (0, 1]"
        )));
    }
    let shape = s.shape();
    let n = if shape.len() == 2 { shape[0] } else { 1 };
    Ok(s.log()?.sum_all().scale(-1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn noiseless_limit_returns_mean() {
        let g = Graph::new();
        let n = 8;
        let d = 3;
        let f_vals: Vec<f64> = (0..n * d).map(|i| (i as f64 * 0.37).sin() * 0.8).collect();
        let f = g.leaf(&[n, d], &f_vals);
        let s = g.constant(&[n, d], &vec![S_FLOOR; n * d]);
        let sample = echo_sample(&g, f, s, 32, 9, None).unwrap();
        for (z, fv) in sample.z.values().iter().zip(&f_vals) {
            assert!((z - fv).abs() < 1e-5, "z={z} f={fv}");
        }
    }

    #[test]
    fn zero_mean_head_gives_zero_code() {
        let g = Graph::new();
        let f = g.leaf(&[4, 2], &[0.0; 8]);
        let s = g.constant(&[4, 2], &[0.5; 8]);
        let sample = echo_sample(&g, f, s, 3, 1, None).unwrap();
        assert!(sample.z.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_heads_match_geometric_series() {
        // f ≡ 0.3, s ≡ 0.5: ε = 0.3·Σ 0.5^k → 0.3/(1−0.5) = 0.6
        let g = Graph::new();
        let n = 64;
        let f = g.constant(&[n, 1], &vec![0.3; n]);
        let s = g.constant(&[n, 1], &vec![0.5; n]);
        let mut total = 0.0;
        let mut count = 0usize;
        for seed in 0..200 {
            let sample = echo_sample(&g, f, s, 32, seed, None).unwrap();
            total += sample.epsilon.iter().sum::<f64>();
            count += sample.epsilon.len();
        }
        let mean = total / count as f64;
        assert!((mean - 0.6).abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn mi_constant_diagonal() {
        let g = Graph::new();
        let s = g.leaf(&[5, 2], &[0.5; 10]);
        let mi = echo_mi(s).unwrap();
        assert_relative_eq!(mi.item(), 2.0 * std::f64::consts::LN_2, max_relative = 1e-12);
    }

    #[test]
    fn mi_identity_channel_is_zero() {
        let g = Graph::new();
        let s = g.leaf(&[3, 4], &[1.0; 12]);
        assert_relative_eq!(echo_mi(s).unwrap().item(), 0.0);
    }

    #[test]
    fn mi_rejects_non_positive() {
        let g = Graph::new();
        let s = g.leaf(&[1, 2], &[0.5, 0.0]);
        assert!(matches!(echo_mi(s), Err(DsfError::Domain(_))));
    }

    #[test]
    fn mi_gradient_is_negative_in_every_scale() {
        // ∂(−Σ log s / N)/∂s_j = −1/(N·s_j) < 0
        let g = Graph::new();
        let s = g.leaf(&[4, 3], &[0.3, 0.5, 0.7, 0.2, 0.9, 0.4, 0.6, 0.8, 0.35, 0.45, 0.55, 0.65]);
        echo_mi(s).unwrap().backward().unwrap();
        assert!(s.grad().unwrap().iter().all(|v| *v < 0.0));
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let g = Graph::new();
        let f = g.leaf(&[1, 2], &[0.0; 2]);
        let s = g.constant(&[1, 2], &[0.5; 2]);
        assert!(matches!(
            echo_sample(&g, f, s, 8, 0, None),
            Err(DsfError::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn out_of_range_scale_is_rejected() {
        let g = Graph::new();
        let f = g.leaf(&[2, 1], &[0.0; 2]);
        let s = g.constant(&[2, 1], &[0.5, 1.5]);
        assert!(matches!(
            echo_sample(&g, f, s, 8, 0, None),
            Err(DsfError::Contract(_))
        ));
    }

    #[test]
    fn sampling_is_bit_deterministic_per_seed() {
        let run = |seed| {
            let g = Graph::new();
            let f_vals: Vec<f64> = (0..24).map(|i| ((i * 7) as f64 * 0.13).cos() * 0.5).collect();
            let s_vals: Vec<f64> = (0..24).map(|i| 0.1 + 0.05 * (i % 7) as f64).collect();
            let f = g.leaf(&[8, 3], &f_vals);
            let s = g.constant(&[8, 3], &s_vals);
            echo_sample(&g, f, s, 16, seed, None).unwrap().z.values()
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a, run(43));
    }

    #[test]
    fn level_zero_permutation_never_uses_the_anchor() {
        // With f one-hot per sample, position 0 of the recursion dominates ε
        // up to s·‖inner‖; check ε_i has no contribution from sample i by
        // using s ≡ floor so deeper levels vanish.
        let g = Graph::new();
        let n = 6;
        let mut f_vals = vec![0.0; n * n];
        for i in 0..n {
            f_vals[i * n + i] = 1.0;
        }
        let f = g.leaf(&[n, n], &f_vals);
        let s = g.constant(&[n, n], &vec![S_FLOOR; n * n]);
        for seed in 0..50 {
            let sample = echo_sample(&g, f, s, 1, seed, None).unwrap();
            let eps = &sample.epsilon;
            for i in 0..n {
                assert!(
                    eps[i * n + i] < 0.5,
                    "anchor {i} appeared in its own noise (seed {seed})"
                );
            }
        }
    }

    #[test]
    fn frozen_noise_is_respected() {
        let g = Graph::new();
        let f = g.leaf(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        let s = g.constant(&[2, 2], &[0.5; 4]);
        let noise = vec![1.0, -1.0, 2.0, -2.0];
        let sample = echo_sample(&g, f, s, 8, 0, Some(&noise)).unwrap();
        assert_eq!(sample.z.values(), vec![0.6, -0.3, 1.3, -0.6]);
    }

    #[test]
    fn channel_heads_respect_bounds() {
        let chan = EchoChannel::new("p", 4, &[8], 3, 0.9, 16, 5);
        let g = Graph::new();
        let x_vals: Vec<f64> = (0..20).map(|i| (i as f64 * 0.61).sin() * 2.0).collect();
        let x = g.constant(&[5, 4], &x_vals);
        let mut binder = Binder::new();
        let (f, s) = chan.heads(&g, x, &mut binder).unwrap();
        assert!(f.values().iter().all(|v| v.abs() < 1.0));
        assert!(s.values().iter().all(|v| *v > 0.0 && *v < 0.9));
    }
}
