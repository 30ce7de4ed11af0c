//! Assembly of the three training losses.
//!
//! All three are minimization objectives (the negated maximization forms):
//!
//! * DSF-E: α·pred + λ·I(z_p:x)
//! * DSF-C: α·pred + (1+γ)·recon + (λ+γ)·I(z_p:x) + γ·I(z_n:x)
//! * DSF-H: α·pred + recon + λ·I(z_p:x) + γ·HSIC(z_p, z_n)
//!
//! with pred = −E log p(y|z_p), recon = −E log p(x|{z_p,z_n}) and the
//! compression terms computed exactly through the echo channel.

use serde::{Deserialize, Serialize};

use crate::echo::echo_sample;
use crate::error::{DsfError, Result};
use crate::hsic::{hsic_penalty, median_bandwidth, Bandwidth, KernelSpec};
use crate::model::{DsfModel, NuisanceHead};
use crate::nn::Binder;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "dsf-e")]
    DsfE,
    #[serde(rename = "dsf-c")]
    DsfC,
    #[serde(rename = "dsf-h")]
    DsfH,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::DsfE => "dsf-e",
            Variant::DsfC => "dsf-c",
            Variant::DsfH => "dsf-h",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = DsfError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dsf-e" | "dsfe" | "e" => Ok(Variant::DsfE),
            "dsf-c" | "dsfc" | "c" => Ok(Variant::DsfC),
            "dsf-h" | "dsfh" | "h" => Ok(Variant::DsfH),
            other => Err(DsfError::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub z_p_dim: usize,
    pub z_n_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub predictor_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub s_max: f64,
    /// Echo truncation depth; defaults to batch size − 1 capped at 64.
    pub echo_depth: Option<usize>,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.lambda < 0.0 || self.gamma < 0.0 {
            return Err(DsfError::Config(
                "multipliers alpha, lambda, gamma must be non-negative".into(),
            ));
        }
        if self.s_max <= 0.0 || self.s_max >= 1.0 {
            return Err(DsfError::Config(format!(
                "s_max {} must lie in (0, 1)",
                self.s_max
            )));
        }
        if self.num_classes < 2 {
            return Err(DsfError::Config("need at least 2 classes".into()));
        }
        match self.variant {
            Variant::DsfE => {
                if self.z_n_dim != 0 {
                    return Err(DsfError::Config(
                        "dsf-e has no nuisance embedding; set z_n_dim = 0".into(),
                    ));
                }
            }
            Variant::DsfC | Variant::DsfH => {
                if self.z_n_dim == 0 {
                    return Err(DsfError::Config(format!(
                        "{} needs z_n_dim > 0",
                        self.variant
                    )));
                }
            }
        }
        if self.z_p_dim == 0 || self.input_dim == 0 {
            return Err(DsfError::Config("z_p_dim and input_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Per-batch loss terms, all in nats and all non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub pred_nll: f64,
    pub recon_nll: f64,
    pub comp_p: f64,
    pub comp_n: f64,
    pub hsic: f64,
}

impl LossBreakdown {
    /// Recomposes the total from the parts with the variant's multipliers.
    pub fn recompose(&self, config: &ObjectiveConfig) -> f64 {
        let (a, l, g) = (config.alpha, config.lambda, config.gamma);
        match config.variant {
            Variant::DsfE => a * self.pred_nll + l * self.comp_p,
            Variant::DsfC => {
                a * self.pred_nll
                    + (1.0 + g) * self.recon_nll
                    + (l + g) * self.comp_p
                    + g * self.comp_n
            }
            Variant::DsfH => {
                a * self.pred_nll + self.recon_nll + l * self.comp_p + g * self.hsic
            }
        }
    }
}

/// Stochastic choices made while assembling one loss, replayable so gradient
/// checks can finite-difference against the exact same noise and bandwidths.
#[derive(Debug, Clone, Default)]
pub struct FrozenStochastics {
    pub eps_p: Option<Vec<f64>>,
    pub eps_n: Option<Vec<f64>>,
    pub sigma_u: Option<f64>,
    pub sigma_v: Option<f64>,
}

/// A fully assembled loss, still attached to its graph.
pub struct LossGraph<'g> {
    pub total: Tensor<'g>,
    pub breakdown: LossBreakdown,
    pub binder: Binder<'g>,
    pub frozen: FrozenStochastics,
    pub logits: Tensor<'g>,
    pub z_p: Tensor<'g>,
    pub z_n: Option<Tensor<'g>>,
}

/// Mean softmax cross-entropy in nats.
pub fn predict_nll<'g>(logits: Tensor<'g>, labels: &[usize]) -> Result<Tensor<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(DsfError::Dimension(format!(
            "predict_nll logits {:?} vs {} labels",
            shape,
            labels.len()
        )));
    }
    let c = shape[1];
    if c < 2 {
        return Err(DsfError::Config("need at least 2 classes".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(DsfError::Data(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let lse = logits.log_sum_exp_rows()?;
    let picked = logits.gather_rows(labels)?;
    lse.sub(picked)?.mean_all().scale(1.0).pipe_ok()
}

trait PipeOk: Sized {
    fn pipe_ok(self) -> Result<Self> {
        Ok(self)
    }
}
impl<'g> PipeOk for Tensor<'g> {}

/// Mean Bernoulli cross-entropy per image, summed over pixels.
pub fn recon_nll<'g>(decoded: Tensor<'g>, x: Tensor<'g>) -> Result<Tensor<'g>> {
    let sd = decoded.shape();
    let sx = x.shape();
    if sd != sx || sd.len() != 2 {
        return Err(DsfError::Dimension(format!(
            "recon_nll decoded {:?} vs target {:?}",
            sd, sx
        )));
    }
    let n = sd[0] as f64;
    let p = decoded.clamp(1e-7, 1.0 - 1e-7);
    let one_minus_p = p.neg().add_const(1.0);
    let one_minus_x = x.neg().add_const(1.0);
    let ll = x
        .mul(p.log()?)?
        .add(one_minus_x.mul(one_minus_p.log()?)?)?;
    Ok(ll.sum_all().scale(-1.0 / n))
}

/// Assembles the selected variant's loss for one batch.
///
/// `images` is row-major `[n, input_dim]` with pixels in [0,1]; `labels` are
/// class indices. Pass `frozen` to replay the stochastic choices of an
/// earlier call (gradient checks); otherwise they derive from `seed`.
pub fn dsf_loss<'g>(
    g: &'g Graph,
    model: &DsfModel,
    images: &[f64],
    labels: &[usize],
    seed: u64,
    frozen: Option<&FrozenStochastics>,
) -> Result<LossGraph<'g>> {
    let config = &model.config;
    config.validate()?;
    let n = labels.len();
    if n < 4 {
        return Err(DsfError::BatchTooSmall { need: 4, got: n });
    }
    if images.len() != n * config.input_dim {
        return Err(DsfError::Dimension(format!(
            "images length {} vs {}x{}",
            images.len(),
            n,
            config.input_dim
        )));
    }
    let mut binder = Binder::new();
    let mut out_frozen = FrozenStochastics::default();
    let x = g.constant(&[n, config.input_dim], images);

    // z_p always flows through its echo channel.
    let (f_p, s_p) = model.z_p_channel.heads(g, x, &mut binder)?;
    let depth = model.echo_depth(n);
    let sample_p = echo_sample(
        g,
        f_p,
        s_p,
        depth,
        seed,
        frozen.and_then(|f| f.eps_p.as_deref()),
    )?;
    out_frozen.eps_p = Some(sample_p.epsilon.clone());
    let z_p = sample_p.z;
    let comp_p = sample_p.mi_nats;

    let logits = model.predictor.forward(g, z_p, &mut binder)?;
    let pred = predict_nll(logits, labels)?;

    let zero = g.scalar(0.0);
    let (total, z_n, recon_t, comp_n_t, hsic_t) = match (&model.nuisance, config.variant) {
        (NuisanceHead::None, Variant::DsfE) => {
            let total = pred.scale(config.alpha).add(comp_p.scale(config.lambda))?;
            (total, None, zero, zero, zero)
        }
        (NuisanceHead::Echo(chan), Variant::DsfC) => {
            let (f_n, s_n) = chan.heads(g, x, &mut binder)?;
            let sample_n = echo_sample(
                g,
                f_n,
                s_n,
                depth,
                seed.wrapping_add(0x9e37),
                frozen.and_then(|f| f.eps_n.as_deref()),
            )?;
            out_frozen.eps_n = Some(sample_n.epsilon.clone());
            let z_n = sample_n.z;
            let comp_n = sample_n.mi_nats;
            let decoder = model.decoder.as_ref().expect("dsf-c has a decoder");
            let decoded = decoder.forward(g, z_p.concat_cols(z_n)?, &mut binder)?;
            let recon = recon_nll(decoded, x)?;
            let total = pred
                .scale(config.alpha)
                .add(recon.scale(1.0 + config.gamma))?
                .add(comp_p.scale(config.lambda + config.gamma))?
                .add(comp_n.scale(config.gamma))?;
            (total, Some(z_n), recon, comp_n, zero)
        }
        (NuisanceHead::Deterministic(head), Variant::DsfH) => {
            let z_n = head.forward(g, x, &mut binder)?;
            let decoder = model.decoder.as_ref().expect("dsf-h has a decoder");
            let decoded = decoder.forward(g, z_p.concat_cols(z_n)?, &mut binder)?;
            let recon = recon_nll(decoded, x)?;
            let sigma_u = match frozen.and_then(|f| f.sigma_u) {
                Some(s) => s,
                None => median_bandwidth(&z_p.values(), n, config.z_p_dim)?,
            };
            let sigma_v = match frozen.and_then(|f| f.sigma_v) {
                Some(s) => s,
                None => median_bandwidth(&z_n.values(), n, config.z_n_dim)?,
            };
            out_frozen.sigma_u = Some(sigma_u);
            out_frozen.sigma_v = Some(sigma_v);
            let hsic = hsic_penalty(
                g,
                z_p,
                z_n,
                KernelSpec::Gaussian(Bandwidth::Fixed(sigma_u)),
                KernelSpec::Gaussian(Bandwidth::Fixed(sigma_v)),
            )?;
            let total = pred
                .scale(config.alpha)
                .add(recon)?
                .add(comp_p.scale(config.lambda))?
                .add(hsic.scale(config.gamma))?;
            (total, Some(z_n), recon, zero, hsic)
        }
        _ => {
            return Err(DsfError::Config(format!(
                "model nuisance head does not match variant {}",
                config.variant
            )))
        }
    };

    let breakdown = LossBreakdown {
        total: total.item(),
        pred_nll: pred.item(),
        recon_nll: recon_t.item(),
        comp_p: comp_p.item(),
        comp_n: comp_n_t.item(),
        hsic: hsic_t.item(),
    };
    Ok(LossGraph {
        total,
        breakdown,
        binder,
        frozen: out_frozen,
        logits,
        z_p,
        z_n,
    })
}

/// Outcome of a finite-difference check of the full loss gradient.
#[derive(Debug, Clone)]
pub struct LossGradCheck {
    /// Worst relative error across all parameter elements.
    pub max_rel_err: f64,
    /// (parameter name, element index) of the worst offender.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub pass: bool,
}

/// Finite-difference check of `dsf_loss` gradients with respect to every
/// model parameter. The stochastic pieces (echo noise, HSIC bandwidths) are
/// frozen from the first evaluation, so central differences probe exactly
/// the function `backward` differentiates.
pub fn check_loss_gradients(
    model: &mut DsfModel,
    images: &[f64],
    labels: &[usize],
    seed: u64,
    step: f64,
    tol: f64,
) -> Result<LossGradCheck> {
    let (frozen, analytic) = {
        let g = Graph::new();
        let loss = dsf_loss(&g, model, images, labels, seed, None)?;
        loss.total.backward()?;
        (loss.frozen.clone(), loss.binder.grads())
    };
    let eval = |model: &DsfModel| -> Result<f64> {
        let g = Graph::new();
        Ok(dsf_loss(&g, model, images, labels, seed, Some(&frozen))?
            .breakdown
            .total)
    };
    let names: Vec<String> = model.parameters().iter().map(|p| p.name.clone()).collect();
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;
    for name in names {
        let len = model
            .parameters()
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.data.len())
            .unwrap();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| DsfError::Contract(format!("no gradient for parameter {name}")))?
            .clone();
        for i in 0..len {
            let nudge = |model: &mut DsfModel, delta: f64| {
                for p in model.parameters_mut() {
                    if p.name == name {
                        p.data[i] += delta;
                    }
                }
            };
            nudge(model, step);
            let up = eval(model)?;
            nudge(model, -2.0 * step);
            let down = eval(model)?;
            nudge(model, step);
            let numeric = (up - down) / (2.0 * step);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-6);
            let rel = (grad[i] - numeric).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((name.clone(), i));
            }
            checked += 1;
        }
    }
    Ok(LossGradCheck {
        max_rel_err,
        worst,
        checked,
        pass: max_rel_err < tol,
    })
}
