//! Hilbert-Schmidt independence criterion between the two embeddings.
//!
//! The penalty is the biased V-statistic trace(K H̄ L H̄)/N² with centered
//! Gram matrices; with universal kernels it vanishes in the population
//! exactly under independence, and it is differentiable in both inputs.

use crate::error::{DsfError, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median of pairwise distances, recomputed per call and detached.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    Gaussian(Bandwidth),
    Linear,
}

impl KernelSpec {
    pub fn gaussian_median() -> Self {
        KernelSpec::Gaussian(Bandwidth::Median)
    }
}

/// Median-heuristic bandwidth: σ = median pairwise distance / √2.
///
/// Works on raw values and is never part of the gradient graph.
pub fn median_bandwidth(values: &[f64], n: usize, d: usize) -> Result<f64> {
    if n < 2 {
        return Err(DsfError::BatchTooSmall { need: 2, got: n });
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for q in 0..d {
                let diff = values[i * d + q] - values[j * d + q];
                acc += diff * diff;
            }
            dists.push(acc.sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if median == 0.0 {
        return Err(DsfError::Degenerate(
            "all samples identical; median pairwise distance is zero".into(),
        ));
    }
    Ok(median / std::f64::consts::SQRT_2)
}

fn resolve_sigma(samples: Tensor<'_>, bw: Bandwidth) -> Result<f64> {
    match bw {
        Bandwidth::Fixed(s) => {
            if s <= 0.0 {
                return Err(DsfError::Contract(format!("bandwidth {s} must be positive")));
            }
            Ok(s)
        }
        Bandwidth::Median => {
            let shape = samples.shape();
            median_bandwidth(&samples.values(), shape[0], shape[1])
        }
    }
}

/// Symmetric PSD Gram matrix of the rows of `samples`.
pub fn gram<'g>(kernel: KernelSpec, samples: Tensor<'g>) -> Result<Tensor<'g>> {
    let shape = samples.shape();
    if shape.len() != 2 {
        return Err(DsfError::Dimension(format!(
            "gram needs [n, d] samples, got {:?}",
            shape
        )));
    }
    if shape[0] < 2 {
        return Err(DsfError::BatchTooSmall {
            need: 2,
            got: shape[0],
        });
    }
    match kernel {
        KernelSpec::Linear => samples.matmul(samples.transpose()?),
        KernelSpec::Gaussian(bw) => {
            let sigma = resolve_sigma(samples, bw)?;
            let sq = samples.pairwise_sqdist()?;
            Ok(sq.scale(-1.0 / (2.0 * sigma * sigma)).exp())
        }
    }
}

/// Biased HSIC estimate between paired samples u and v.
pub fn hsic_penalty<'g>(
    g: &'g Graph,
    u: Tensor<'g>,
    v: Tensor<'g>,
    k: KernelSpec,
    h: KernelSpec,
) -> Result<Tensor<'g>> {
    let su = u.shape();
    let sv = v.shape();
    if su.len() != 2 || sv.len() != 2 || su[0] != sv[0] {
        return Err(DsfError::Dimension(format!(
            "hsic_penalty sample shapes {:?} vs {:?}",
            su, sv
        )));
    }
    let n = su[0];
    let ku = gram(k, u)?;
    let lv = gram(h, v)?;
    // Centering matrix H̄ = I − J/N.
    let mut c = vec![-1.0 / n as f64; n * n];
    for i in 0..n {
        c[i * n + i] += 1.0;
    }
    let center = g.constant(&[n, n], &c);
    let centered = center.matmul(ku)?.matmul(center)?;
    // trace(K H̄ L H̄) = Σ_ij (H̄ K H̄)_ij · L_ij for symmetric L.
    Ok(centered.mul(lv)?.sum_all().scale(1.0 / (n * n) as f64))
}
