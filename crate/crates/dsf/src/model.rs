//! The full discovery-and-separation model: echo-compressed predictive
//! embedding z_p, nuisance embedding z_n, target predictor and decoder.

use std::path::Path;

use crate::checkpoint::{self, TensorRecord};
use crate::echo::{EchoChannel, DEFAULT_MAX_DEPTH};
use crate::error::{DsfError, Result};
use crate::nn::{Activation, Binder, Mlp, Parameter};
use crate::objectives::{ObjectiveConfig, Variant};
use crate::tensor::{Graph, Tensor};

/// How the nuisance embedding is produced, which differs per variant.
#[derive(Debug, Clone)]
pub enum NuisanceHead {
    /// DSF-C: a second echo channel, so I(z_n:x) has the same exact form.
    Echo(EchoChannel),
    /// DSF-H: a plain deterministic encoder; independence comes from HSIC.
    Deterministic(Mlp),
    /// DSF-E: no nuisance embedding at all.
    None,
}

#[derive(Debug, Clone)]
pub struct DsfModel {
    pub config: ObjectiveConfig,
    pub z_p_channel: EchoChannel,
    pub nuisance: NuisanceHead,
    pub predictor: Mlp,
    pub decoder: Option<Mlp>,
}

impl DsfModel {
    pub fn new(config: ObjectiveConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let z_p_channel = EchoChannel::new(
            "zp",
            config.input_dim,
            &config.encoder_widths,
            config.z_p_dim,
            config.s_max,
            DEFAULT_MAX_DEPTH,
            seed,
        );
        let nuisance = match config.variant {
            Variant::DsfE => NuisanceHead::None,
            Variant::DsfC => NuisanceHead::Echo(EchoChannel::new(
                "zn",
                config.input_dim,
                &config.encoder_widths,
                config.z_n_dim,
                config.s_max,
                DEFAULT_MAX_DEPTH,
                seed.wrapping_add(1),
            )),
            Variant::DsfH => {
                let mut sizes = vec![config.input_dim];
                sizes.extend_from_slice(&config.encoder_widths);
                sizes.push(config.z_n_dim);
                NuisanceHead::Deterministic(Mlp::new(
                    "zn",
                    &sizes,
                    Activation::Relu,
                    Activation::Tanh,
                    seed.wrapping_add(1),
                ))
            }
        };
        let mut pred_sizes = vec![config.z_p_dim];
        pred_sizes.extend_from_slice(&config.predictor_widths);
        pred_sizes.push(config.num_classes);
        let predictor = Mlp::new(
            "pred",
            &pred_sizes,
            Activation::Relu,
            Activation::Linear,
            seed.wrapping_add(2),
        );
        let decoder = if config.variant == Variant::DsfE {
            None
        } else {
            let mut dec_sizes = vec![config.z_p_dim + config.z_n_dim];
            dec_sizes.extend_from_slice(&config.decoder_widths);
            dec_sizes.push(config.input_dim);
            Some(Mlp::new(
                "dec",
                &dec_sizes,
                Activation::Relu,
                Activation::Sigmoid,
                seed.wrapping_add(3),
            ))
        };
        Ok(DsfModel {
            config,
            z_p_channel,
            nuisance,
            predictor,
            decoder,
        })
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.z_p_channel.parameters().collect();
        match &self.nuisance {
            NuisanceHead::Echo(c) => out.extend(c.parameters()),
            NuisanceHead::Deterministic(m) => out.extend(m.parameters()),
            NuisanceHead::None => {}
        }
        out.extend(self.predictor.parameters());
        if let Some(d) = &self.decoder {
            out.extend(d.parameters());
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.z_p_channel.parameters_mut().collect();
        match &mut self.nuisance {
            NuisanceHead::Echo(c) => out.extend(c.parameters_mut()),
            NuisanceHead::Deterministic(m) => out.extend(m.parameters_mut()),
            NuisanceHead::None => {}
        }
        out.extend(self.predictor.parameters_mut());
        if let Some(d) = &mut self.decoder {
            out.extend(d.parameters_mut());
        }
        out
    }

    /// Deterministic nuisance embedding for a batch (DSF-C uses the mean
    /// head of its echo channel when a noise-free embedding is wanted).
    pub fn nuisance_embedding<'g>(
        &self,
        g: &'g Graph,
        x: Tensor<'g>,
        binder: &mut Binder<'g>,
    ) -> Result<Option<Tensor<'g>>> {
        match &self.nuisance {
            NuisanceHead::None => Ok(None),
            NuisanceHead::Deterministic(m) => Ok(Some(m.forward(g, x, binder)?)),
            NuisanceHead::Echo(c) => {
                let (f, _s) = c.heads(g, x, binder)?;
                Ok(Some(f))
            }
        }
    }

    /// Writes all parameters to the binary tensor container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let records: Vec<TensorRecord> = self
            .parameters()
            .iter()
            .map(|p| TensorRecord::new(p.name.clone(), p.shape.clone(), p.data.clone()))
            .collect();
        checkpoint::write_records(path, &records)
    }

    /// Rebuilds a model from a config and a checkpoint written by [`save`].
    /// Every parameter must be present with a matching shape.
    ///
    /// [`save`]: DsfModel::save
    pub fn load(config: ObjectiveConfig, path: &Path) -> Result<Self> {
        let records = checkpoint::read_records(path)?;
        let mut model = DsfModel::new(config, 0)?;
        for p in model.parameters_mut() {
            let rec = records.iter().find(|r| r.name == p.name).ok_or_else(|| {
                DsfError::Config(format!(
                    "checkpoint/config mismatch: parameter '{}' missing from checkpoint",
                    p.name
                ))
            })?;
            if rec.dims != p.shape {
                return Err(DsfError::Config(format!(
                    "checkpoint/config mismatch: parameter '{}' has shape {:?} in checkpoint but {:?} in config",
                    p.name, rec.dims, p.shape
                )));
            }
            p.data.clone_from(&rec.values);
        }
        Ok(model)
    }

    /// Echo recursion depth for a batch of `n` samples.
    pub fn echo_depth(&self, n: usize) -> usize {
        self.config
            .echo_depth
            .unwrap_or(DEFAULT_MAX_DEPTH)
            .min(n.saturating_sub(1))
            .max(1)
    }
}
