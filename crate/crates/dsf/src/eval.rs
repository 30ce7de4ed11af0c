//! Evaluation protocol: y-accuracy, post-hoc nuisance probes against chance,
//! relative-improvement arithmetic, the brute-force discrete mutual-
//! information identity checks, and embedding export.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImageBatch;
use crate::error::{DsfError, Result};
use crate::model::DsfModel;
use crate::nn::{Activation, Adam, AdamConfig, Binder, Mlp};
use crate::objectives::{predict_nll, LossBreakdown};
use crate::tensor::Graph;

/// Fraction of exact matches between predictions and labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(DsfError::Dimension(format!(
            "predictions length {} vs labels length {}",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(DsfError::Dimension("accuracy of empty prediction set".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Row-wise argmax over an `n × d` matrix.
pub fn argmax_rows(values: &[f64], n: usize, d: usize) -> Vec<usize> {
    (0..n)
        .map(|r| {
            let row = &values[r * d..(r + 1) * d];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

/// Noise-free predictive embedding z_p = f(x) for a batch (the mean head of
/// the echo channel), flattened row-major `n × z_p_dim`.
pub fn predictive_embedding(model: &DsfModel, batch: &LabeledImageBatch) -> Result<Vec<f64>> {
    let g = Graph::new();
    let x = g.constant(&[batch.n, batch.pixels_per_image()], &batch.images);
    let mut binder = Binder::new();
    let (f, _s) = model.z_p_channel.heads(&g, x, &mut binder)?;
    Ok(f.values())
}

/// A sampled stochastic code z_p = f(x) + S(x)ε for a batch — the actual
/// representation the channel transmits, used for nuisance probes. One echo
/// sample per input, seeded.
pub fn sampled_embedding(model: &DsfModel, batch: &LabeledImageBatch, seed: u64) -> Result<Vec<f64>> {
    let g = Graph::new();
    let x = g.constant(&[batch.n, batch.pixels_per_image()], &batch.images);
    let mut binder = Binder::new();
    let (f, s) = model.z_p_channel.heads(&g, x, &mut binder)?;
    let sample = crate::echo::echo_sample(&g, f, s, model.echo_depth(batch.n), seed, None)?;
    Ok(sample.z.values())
}

/// Deterministic nuisance embedding z_n for a batch, if the variant has one.
pub fn nuisance_embedding(model: &DsfModel, batch: &LabeledImageBatch) -> Result<Option<Vec<f64>>> {
    let g = Graph::new();
    let x = g.constant(&[batch.n, batch.pixels_per_image()], &batch.images);
    let mut binder = Binder::new();
    Ok(model
        .nuisance_embedding(&g, x, &mut binder)?
        .map(|t| t.values()))
}

/// Class predictions for a batch: predictor logits over the noise-free z_p.
pub fn predict_classes(model: &DsfModel, batch: &LabeledImageBatch) -> Result<Vec<usize>> {
    let g = Graph::new();
    let x = g.constant(&[batch.n, batch.pixels_per_image()], &batch.images);
    let mut binder = Binder::new();
    let (f, _s) = model.z_p_channel.heads(&g, x, &mut binder)?;
    let logits = model.predictor.forward(&g, f, &mut binder)?;
    Ok(argmax_rows(&logits.values(), batch.n, model.config.num_classes))
}

/// Class predictions over a sampled stochastic code z_p — the same object a
/// nuisance probe reads, so y-accuracy and s-probe accuracy measure the same
/// representation. One echo sample per input, seeded.
pub fn sampled_predict_classes(
    model: &DsfModel,
    batch: &LabeledImageBatch,
    seed: u64,
) -> Result<Vec<usize>> {
    let g = Graph::new();
    let x = g.constant(&[batch.n, batch.pixels_per_image()], &batch.images);
    let mut binder = Binder::new();
    let (f, s) = model.z_p_channel.heads(&g, x, &mut binder)?;
    let z = crate::echo::echo_sample(&g, f, s, model.echo_depth(batch.n), seed, None)?.z;
    let logits = model.predictor.forward(&g, z, &mut binder)?;
    Ok(argmax_rows(&logits.values(), batch.n, model.config.num_classes))
}

/// A trained post-hoc probe: a 2-layer MLP classifier over frozen embeddings.
#[derive(Debug, Clone)]
pub struct Probe {
    pub mlp: Mlp,
    pub num_classes: usize,
}

impl Probe {
    pub fn predict(&self, embeddings: &[f64], n: usize, d: usize) -> Result<Vec<usize>> {
        let g = Graph::new();
        let x = g.constant(&[n, d], embeddings);
        let mut binder = Binder::new();
        let logits = self.mlp.forward(&g, x, &mut binder)?;
        Ok(argmax_rows(&logits.values(), n, self.num_classes))
    }
}

const PROBE_HIDDEN: usize = 64;
const PROBE_EPOCHS: usize = 50;
const PROBE_LR: f64 = 1e-3;
const PROBE_BATCH: usize = 256;

/// Trains a post-hoc probe to predict `s` from frozen embeddings: a 2-layer
/// relu MLP (hidden width 64), Adam lr 1e-3, 50 epochs, on the 80% split;
/// returns the probe and its accuracy on the held-out 20%.
///
/// The embeddings are plain values — nothing backpropagates into the model
/// that produced them.
pub fn train_probe(
    embeddings: &[f64],
    n: usize,
    d: usize,
    s_labels: &[usize],
    seed: u64,
) -> Result<(Probe, f64)> {
    if s_labels.len() != n || embeddings.len() != n * d {
        return Err(DsfError::Dimension(format!(
            "probe data mismatch: {} embeddings × {d}, {} labels, n = {n}",
            embeddings.len() / d.max(1),
            s_labels.len()
        )));
    }
    let num_classes = s_labels.iter().max().map_or(0, |&m| m + 1);
    let distinct = {
        let mut sorted = s_labels.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        sorted.len()
    };
    if distinct < 2 {
        return Err(DsfError::Degenerate(
            "probe labels contain a single class".into(),
        ));
    }
    if n < 10 * num_classes {
        return Err(DsfError::Contract(format!(
            "probe needs at least {} samples for {num_classes} classes, got {n}",
            10 * num_classes
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let split = (n * 4) / 5;
    let (train_idx, held_idx) = order.split_at(split);

    let mut probe = Probe {
        mlp: Mlp::new(
            "probe",
            &[d, PROBE_HIDDEN, num_classes],
            Activation::Relu,
            Activation::Linear,
            seed.wrapping_add(17),
        ),
        num_classes,
    };
    let mut adam = Adam::new(AdamConfig {
        learning_rate: PROBE_LR,
        weight_decay: 0.0,
        ..AdamConfig::default()
    });

    let mut epoch_order = train_idx.to_vec();
    for _epoch in 0..PROBE_EPOCHS {
        epoch_order.shuffle(&mut rng);
        for chunk in epoch_order.chunks(PROBE_BATCH) {
            let mut xb = Vec::with_capacity(chunk.len() * d);
            let mut yb = Vec::with_capacity(chunk.len());
            for &i in chunk {
                xb.extend_from_slice(&embeddings[i * d..(i + 1) * d]);
                yb.push(s_labels[i]);
            }
            let g = Graph::new();
            let x = g.constant(&[chunk.len(), d], &xb);
            let mut binder = Binder::new();
            let logits = probe.mlp.forward(&g, x, &mut binder)?;
            let loss = predict_nll(logits, &yb)?;
            loss.backward()?;
            let grads = binder.grads();
            adam.step(probe.mlp.parameters_mut(), &grads)?;
        }
    }

    let mut hx = Vec::with_capacity(held_idx.len() * d);
    let mut hy = Vec::with_capacity(held_idx.len());
    for &i in held_idx {
        hx.extend_from_slice(&embeddings[i * d..(i + 1) * d]);
        hy.push(s_labels[i]);
    }
    let preds = probe.predict(&hx, held_idx.len(), d)?;
    let acc = accuracy(&preds, &hy)?;
    Ok((probe, acc))
}

/// Which error-rate convention relative improvement uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImprovementKind {
    /// Target-prediction improvement: error = 1 − accuracy.
    Y,
    /// Nuisance-leakage improvement: error = accuracy − chance, clamped at 0
    /// (below-chance probes indicate noise, not negative leakage).
    S { chance: f64 },
}

/// Relative improvement of `new_acc` over `old_acc`:
/// (old-error − new-error) / old-error.
pub fn relative_improvement(new_acc: f64, old_acc: f64, kind: ImprovementKind) -> Result<f64> {
    for (label, acc) in [("new", new_acc), ("old", old_acc)] {
        if !(0.0..=1.0).contains(&acc) {
            return Err(DsfError::Contract(format!(
                "{label} accuracy {acc} outside [0,1]"
            )));
        }
    }
    let err = |acc: f64| match kind {
        ImprovementKind::Y => 1.0 - acc,
        ImprovementKind::S { chance } => (acc - chance).max(0.0),
    };
    let old_err = err(old_acc);
    if old_err == 0.0 {
        return Err(DsfError::UndefinedImprovement);
    }
    Ok((old_err - err(new_acc)) / old_err)
}

/// A joint probability table p(x, z_p, z_n) over small finite alphabets,
/// stored row-major as `p[x][z_p][z_n]`.
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    pub nx: usize,
    pub nzp: usize,
    pub nzn: usize,
    pub p: Vec<f64>,
}

pub const MI_TOL: f64 = 1e-12;

impl DiscreteJoint {
    pub fn new(nx: usize, nzp: usize, nzn: usize, p: Vec<f64>) -> Result<Self> {
        let joint = DiscreteJoint { nx, nzp, nzn, p };
        joint.validate()?;
        Ok(joint)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p.len() != self.nx * self.nzp * self.nzn {
            return Err(DsfError::Contract(format!(
                "joint table has {} entries for {}×{}×{} alphabet",
                self.p.len(),
                self.nx,
                self.nzp,
                self.nzn
            )));
        }
        if self.nx > 8 || self.nzp > 8 || self.nzn > 8 {
            return Err(DsfError::Contract(
                "joint alphabets limited to 8 states each".into(),
            ));
        }
        if self.p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(DsfError::Contract("joint entries must lie in [0,1]".into()));
        }
        let total: f64 = self.p.iter().sum();
        if (total - 1.0).abs() > MI_TOL {
            return Err(DsfError::Contract(format!(
                "joint table sums to {total}, not 1"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, x: usize, zp: usize, zn: usize) -> f64 {
        self.p[(x * self.nzp + zp) * self.nzn + zn]
    }

    /// A random joint that factorizes as p(x)·p(z_p|x)·p(z_n|x), i.e. with
    /// z_p and z_n conditionally independent given x by construction.
    pub fn random_conditionally_independent(
        nx: usize,
        nzp: usize,
        nzn: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut simplex = |k: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..k).map(|_| -f64::ln(rng.gen_range(1e-12..1.0))).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / total).collect()
        };
        let px = simplex(nx);
        let channels_p: Vec<Vec<f64>> = (0..nx).map(|_| simplex(nzp)).collect();
        let channels_n: Vec<Vec<f64>> = (0..nx).map(|_| simplex(nzn)).collect();
        let mut p = Vec::with_capacity(nx * nzp * nzn);
        for x in 0..nx {
            for zp in 0..nzp {
                for zn in 0..nzn {
                    p.push(px[x] * channels_p[x][zp] * channels_n[x][zn]);
                }
            }
        }
        // Exact renormalization guards against rounding drift in the product.
        let total: f64 = p.iter().sum();
        for v in &mut p {
            *v /= total;
        }
        DiscreteJoint::new(nx, nzp, nzn, p)
    }
}

fn plogp_ratio(joint: f64, independent: f64) -> f64 {
    if joint <= 0.0 {
        0.0
    } else {
        joint * (joint / independent).ln()
    }
}

/// All mutual informations needed for the identity checks, in nats, computed
/// by direct summation over the joint table.
#[derive(Debug, Clone, Copy)]
pub struct MiIdentityReport {
    pub i_zp_zn: f64,
    pub i_zp_x: f64,
    pub i_zn_x: f64,
    pub i_x_joint: f64,
    pub i_zp_x_given_zn: f64,
    pub i_zp_zn_given_x: f64,
    /// |I(x:{z_p,z_n}) − I(z_n:x) − I(z_p:x|z_n)| — chain rule of MI.
    pub chain_rule_residual: f64,
    /// |I(z_p:z_n) − (I(z_p:x)+I(z_n:x)−I(x:{z_p,z_n}))|, valid when
    /// I(z_p:z_n|x) = 0.
    pub independence_identity_residual: f64,
    /// |I(z_p:x|z_n) − (I(x:{z_p,z_n}) − I(z_n:x))|.
    pub conditional_identity_residual: f64,
    pub pass: bool,
}

/// Computes I(z_p:z_n), I(z_p:x), I(z_n:x), I(x:{z_p,z_n}), I(z_p:x|z_n) and
/// I(z_p:z_n|x) by brute-force summation and checks the three identities the
/// training objectives rely on, each to 1e-12 nats.
pub fn mi_identity_check(joint: &DiscreteJoint) -> Result<MiIdentityReport> {
    joint.validate()?;
    let (nx, nzp, nzn) = (joint.nx, joint.nzp, joint.nzn);

    let mut px = vec![0.0; nx];
    let mut pzp = vec![0.0; nzp];
    let mut pzn = vec![0.0; nzn];
    let mut p_x_zp = vec![0.0; nx * nzp];
    let mut p_x_zn = vec![0.0; nx * nzn];
    let mut p_zp_zn = vec![0.0; nzp * nzn];
    for x in 0..nx {
        for zp in 0..nzp {
            for zn in 0..nzn {
                let v = joint.at(x, zp, zn);
                px[x] += v;
                pzp[zp] += v;
                pzn[zn] += v;
                p_x_zp[x * nzp + zp] += v;
                p_x_zn[x * nzn + zn] += v;
                p_zp_zn[zp * nzn + zn] += v;
            }
        }
    }

    let mut i_zp_zn = 0.0;
    for zp in 0..nzp {
        for zn in 0..nzn {
            i_zp_zn += plogp_ratio(p_zp_zn[zp * nzn + zn], pzp[zp] * pzn[zn]);
        }
    }
    let mut i_zp_x = 0.0;
    for x in 0..nx {
        for zp in 0..nzp {
            i_zp_x += plogp_ratio(p_x_zp[x * nzp + zp], px[x] * pzp[zp]);
        }
    }
    let mut i_zn_x = 0.0;
    for x in 0..nx {
        for zn in 0..nzn {
            i_zn_x += plogp_ratio(p_x_zn[x * nzn + zn], px[x] * pzn[zn]);
        }
    }
    // I(x : {z_p, z_n}) treats the pair as a single variable.
    let mut i_x_joint = 0.0;
    for x in 0..nx {
        for zp in 0..nzp {
            for zn in 0..nzn {
                i_x_joint += plogp_ratio(
                    joint.at(x, zp, zn),
                    px[x] * p_zp_zn[zp * nzn + zn],
                );
            }
        }
    }
    // I(z_p : x | z_n) = Σ_{zn} p(zn) Σ p(x,zp|zn) log p(x,zp|zn)/(p(x|zn)p(zp|zn))
    // expanded so everything stays in joint-probability terms.
    let mut i_zp_x_given_zn = 0.0;
    for zn in 0..nzn {
        if pzn[zn] <= 0.0 {
            continue;
        }
        for x in 0..nx {
            for zp in 0..nzp {
                let v = joint.at(x, zp, zn);
                let denom = p_x_zn[x * nzn + zn] * p_zp_zn[zp * nzn + zn] / pzn[zn];
                i_zp_x_given_zn += plogp_ratio(v, denom);
            }
        }
    }
    let mut i_zp_zn_given_x = 0.0;
    for x in 0..nx {
        if px[x] <= 0.0 {
            continue;
        }
        for zp in 0..nzp {
            for zn in 0..nzn {
                let v = joint.at(x, zp, zn);
                let denom = p_x_zp[x * nzp + zp] * p_x_zn[x * nzn + zn] / px[x];
                i_zp_zn_given_x += plogp_ratio(v, denom);
            }
        }
    }

    let chain_rule_residual = (i_x_joint - i_zn_x - i_zp_x_given_zn).abs();
    let independence_identity_residual = if i_zp_zn_given_x.abs() <= MI_TOL {
        (i_zp_zn - (i_zp_x + i_zn_x - i_x_joint)).abs()
    } else {
        0.0
    };
    let conditional_identity_residual = (i_zp_x_given_zn - (i_x_joint - i_zn_x)).abs();
    let pass = chain_rule_residual <= MI_TOL
        && independence_identity_residual <= MI_TOL
        && conditional_identity_residual <= MI_TOL;
    Ok(MiIdentityReport {
        i_zp_zn,
        i_zp_x,
        i_zn_x,
        i_x_joint,
        i_zp_x_given_zn,
        i_zp_zn_given_x,
        chain_rule_residual,
        independence_identity_residual,
        conditional_identity_residual,
        pass,
    })
}

/// Writes embeddings to CSV with header `id,y,s,zp_0..zp_{d-1},zn_0..` —
/// z_n columns omitted when the model has no nuisance embedding. Values use
/// Rust's shortest-round-trip float formatting, so parsing back is bit-exact.
pub fn export_embeddings(
    model: &DsfModel,
    batch: &LabeledImageBatch,
    path: &Path,
) -> Result<()> {
    let zp = predictive_embedding(model, batch)?;
    let zn = nuisance_embedding(model, batch)?;
    let dp = model.config.z_p_dim;
    let dn = model.config.z_n_dim;
    let mut out = String::new();
    out.push_str("id,y,s");
    for j in 0..dp {
        let _ = write!(out, ",zp_{j}");
    }
    if zn.is_some() {
        for j in 0..dn {
            let _ = write!(out, ",zn_{j}");
        }
    }
    out.push('\n');
    for i in 0..batch.n {
        let s = batch.s.get(i).copied().unwrap_or(0);
        let _ = write!(out, "{i},{},{s}", batch.y[i]);
        for j in 0..dp {
            let _ = write!(out, ",{}", zp[i * dp + j]);
        }
        if let Some(zn) = &zn {
            for j in 0..dn {
                let _ = write!(out, ",{}", zn[i * dn + j]);
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// The evaluation summary a training run emits, serialized as JSON with the
/// exact field names below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "y-acc-seen")]
    pub y_acc_seen: f64,
    #[serde(rename = "y-acc-unseen")]
    pub y_acc_unseen: BTreeMap<String, f64>,
    #[serde(rename = "s-probe-acc")]
    pub s_probe_acc: f64,
    #[serde(rename = "s-chance")]
    pub s_chance: f64,
    #[serde(rename = "loss-curve")]
    pub loss_curve: Vec<LossBreakdown>,
    #[serde(rename = "run-seed")]
    pub run_seed: u64,
    /// Snapshot of the resolved run configuration, key → rendered value.
    pub config: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| DsfError::Data(format!("metrics serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| DsfError::Data(format!("metrics parse failed: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let mut accs = vec![self.y_acc_seen, self.s_probe_acc];
        accs.extend(self.y_acc_unseen.values());
        if accs.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(DsfError::Contract("accuracy outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Result of the transfer evaluation over morphed variants: κ → y-accuracy.
pub type TransferReport = HashMap<i32, f64>;
