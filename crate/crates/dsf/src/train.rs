//! Minibatch training loop: shuffled epochs, per-epoch loss curve, NaN
//! detection, deterministic given (config, seed).

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::LabeledImageBatch;
use crate::error::{DsfError, Result};
use crate::model::DsfModel;
use crate::nn::{Adam, AdamConfig};
use crate::objectives::{dsf_loss, LossBreakdown};
use crate::tensor::Graph;

pub struct TrainOutcome {
    pub model: DsfModel,
    /// Mean loss breakdown per epoch.
    pub curve: Vec<LossBreakdown>,
}

/// Header of the loss-curve CSV (one data row per epoch).
pub const CURVE_HEADER: &str = "epoch,total,pred_nll,recon_nll,comp_p,comp_n,hsic";

/// Renders a loss curve as CSV.
pub fn curve_to_csv(curve: &[LossBreakdown]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for (epoch, b) in curve.iter().enumerate() {
        let _ = writeln!(
            out,
            "{epoch},{},{},{},{},{},{}",
            b.total, b.pred_nll, b.recon_nll, b.comp_p, b.comp_n, b.hsic
        );
    }
    out
}

/// Parses a CSV written by [`curve_to_csv`].
pub fn curve_from_csv(text: &str) -> Result<Vec<LossBreakdown>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CURVE_HEADER => {}
        other => {
            return Err(DsfError::Data(format!(
                "bad curve header: {other:?}, expected '{CURVE_HEADER}'"
            )))
        }
    }
    let mut curve = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .skip(1)
            .map(|f| {
                f.trim()
                    .parse()
                    .map_err(|_| DsfError::Data(format!("curve row {}: bad value '{f}'", i + 1)))
            })
            .collect::<Result<_>>()?;
        if fields.len() != 6 {
            return Err(DsfError::Data(format!(
                "curve row {}: expected 7 columns, got {}",
                i + 1,
                fields.len() + 1
            )));
        }
        curve.push(LossBreakdown {
            total: fields[0],
            pred_nll: fields[1],
            recon_nll: fields[2],
            comp_p: fields[3],
            comp_n: fields[4],
            hsic: fields[5],
        });
    }
    Ok(curve)
}

/// Trains the configured variant on `data`. Only images and class labels are
/// read — the training loop never sees nuisance labels. Deterministic given
/// (config, seed); a non-finite loss aborts with the offending epoch.
pub fn train(config: &RunConfig, data: &LabeledImageBatch) -> Result<TrainOutcome> {
    config.validate()?;
    data.validate()?;
    let objective = config.objective(data.pixels_per_image(), crate::data::CLASS_COUNT);
    let mut model = DsfModel::new(objective, config.seed)?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    });

    let input_dim = data.pixels_per_image();
    let mut order: Vec<usize> = (0..data.n).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = [0.0; 6];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            // The echo channel and HSIC need a few samples to work with;
            // a short trailing batch is skipped rather than special-cased.
            if chunk.len() < 4 {
                continue;
            }
            let mut images = Vec::with_capacity(chunk.len() * input_dim);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                images.extend_from_slice(data.image(i));
                labels.push(data.y[i]);
            }
            let g = Graph::new();
            let noise_seed = config
                .seed
                .wrapping_mul(0x0100_0000_01b3)
                .wrapping_add((epoch * 1_000_003 + b) as u64);
            let loss = dsf_loss(&g, &model, &images, &labels, noise_seed, None)?;
            let breakdown = loss.breakdown;
            if !breakdown.total.is_finite() {
                return Err(DsfError::Diverged { epoch });
            }
            loss.total.backward()?;
            let grads = loss.binder.grads();
            adam.step(model.parameters_mut().into_iter(), &grads)?;
            sums[0] += breakdown.total;
            sums[1] += breakdown.pred_nll;
            sums[2] += breakdown.recon_nll;
            sums[3] += breakdown.comp_p;
            sums[4] += breakdown.comp_n;
            sums[5] += breakdown.hsic;
            batches += 1;
        }
        if batches == 0 {
            return Err(DsfError::Data(format!(
                "epoch {epoch}: no trainable batches (dataset of {} with batch size {})",
                data.n, config.batch_size
            )));
        }
        let k = batches as f64;
        curve.push(LossBreakdown {
            total: sums[0] / k,
            pred_nll: sums[1] / k,
            recon_nll: sums[2] / k,
            comp_p: sums[3] / k,
            comp_n: sums[4] / k,
            hsic: sums[5] / k,
        });
    }
    Ok(TrainOutcome { model, curve })
}

/// Writes the loss curve next to the checkpoint.
pub fn write_curve(curve: &[LossBreakdown], path: &Path) -> Result<()> {
    std::fs::write(path, curve_to_csv(curve))?;
    Ok(())
}
