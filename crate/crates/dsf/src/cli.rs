//! Command-line front end: dataset generation, training, grid search,
//! probing, evaluation, embedding export and the MI-identity self-test.
//!
//! Every command is also callable as a library function (the `cmd_*`
//! functions below), which is how the integration tests drive it.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{
    generate_glyphs, load_idx, make_rot_protocol, morph_batch, GlyphSpec, LabeledImageBatch,
    ProtocolSizes, RotProtocol, CLASS_COUNT,
};
use crate::error::{DsfError, Result};
use crate::eval::{
    accuracy, export_embeddings, mi_identity_check, sampled_embedding, sampled_predict_classes,
    train_probe, DiscreteJoint, MetricsReport, TransferReport, MI_TOL,
};
use crate::model::DsfModel;
use crate::objectives::Variant;
use crate::train::{train, write_curve};

pub const TRAIN_FILE: &str = "train.dsf";
pub const EVAL_SEEN_FILE: &str = "eval_seen.dsf";
pub const UNSEEN_55_FILE: &str = "unseen_55.dsf";
pub const UNSEEN_65_FILE: &str = "unseen_65.dsf";
pub const DIL_TRANSFER_FILE: &str = "dil_transfer.dsf";
pub const CHECKPOINT_FILE: &str = "model.dsf";
pub const CURVE_FILE: &str = "curve.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.snapshot.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

/// Morphology strengths used by the transfer evaluation.
pub const TRANSFER_KAPPAS: [i32; 4] = [-2, 2, 3, 4];

#[derive(Parser, Debug)]
#[command(
    name = "dsf",
    version,
    about = "Nuisance-invariant representation learning: echo compression, HSIC separation, evaluation protocol"
)]
pub struct Cli {
    /// Config file (`key = value` lines, `#` comments).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the objective variant: dsf-e, dsf-c or dsf-h.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Override the compression multiplier λ.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Override the separation multiplier γ.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the dataset splits into the output directory.
    Generate,
    /// Train the configured variant; writes checkpoint, curve and metrics.
    Train,
    /// Grid-search over the λ and γ lists; prints a leaderboard.
    Grid,
    /// Train a post-hoc nuisance probe against a saved checkpoint.
    Probe,
    /// Evaluate a saved checkpoint on every split, including morphed transfer.
    Eval,
    /// Export z_p / z_n embeddings for a split as CSV.
    Export,
    /// Self-test the discrete mutual-information identities.
    Micheck,
}

/// Builds the effective config: defaults, then the config file, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(variant) = &cli.variant {
        config.variant = variant.parse()?;
        if config.variant == Variant::DsfE {
            config.z_n_dim = 0;
        }
    }
    if let Some(lambda) = cli.lambda {
        config.lambda = lambda;
    }
    if let Some(gamma) = cli.gamma {
        config.gamma = gamma;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn base_corpus(config: &RunConfig) -> Result<LabeledImageBatch> {
    match (&config.idx_images, &config.idx_labels) {
        (Some(images), Some(labels)) => load_idx(images, labels),
        _ => {
            let spec = GlyphSpec {
                jitter_px: config.jitter_px,
                ..GlyphSpec::default()
            };
            let mut base = generate_glyphs(&spec, config.n_per_class, &[0.0], config.seed)?;
            // The protocol assigns angles itself; the base must be unlabeled.
            base.s = Vec::new();
            base.angle_values = Vec::new();
            Ok(base)
        }
    }
}

fn protocol_sizes(config: &RunConfig) -> ProtocolSizes {
    ProtocolSizes {
        train: config.train_count,
        eval_seen: config.eval_seen_count,
        unseen: config.unseen_count,
        dil_transfer: config.dil_count,
    }
}

fn build_protocol(config: &RunConfig) -> Result<RotProtocol> {
    make_rot_protocol(&base_corpus(config)?, &protocol_sizes(config), config.seed)
}

/// Generates and writes the five dataset splits; returns (name, count) pairs.
pub fn cmd_generate(config: &RunConfig) -> Result<Vec<(String, usize)>> {
    let protocol = build_protocol(config)?;
    std::fs::create_dir_all(&config.out_dir)?;
    let splits = [
        (TRAIN_FILE, &protocol.train),
        (EVAL_SEEN_FILE, &protocol.eval_seen),
        (UNSEEN_55_FILE, &protocol.unseen_55),
        (UNSEEN_65_FILE, &protocol.unseen_65),
        (DIL_TRANSFER_FILE, &protocol.dil_transfer),
    ];
    let mut counts = Vec::new();
    for (name, batch) in splits {
        batch.save(&config.out_dir.join(name))?;
        counts.push((name.to_string(), batch.n));
    }
    Ok(counts)
}

fn load_split(config: &RunConfig, name: &str) -> Result<LabeledImageBatch> {
    let path = config.out_dir.join(name);
    if !path.exists() {
        return Err(DsfError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset file {} not found; run `dsf generate` first", path.display()),
        )));
    }
    LabeledImageBatch::load(&path)
}

fn load_model(config: &RunConfig) -> Result<DsfModel> {
    let snapshot_path = config.out_dir.join(CONFIG_SNAPSHOT_FILE);
    let checkpoint_path = config.out_dir.join(CHECKPOINT_FILE);
    let trained_config = if snapshot_path.exists() {
        RunConfig::load(&snapshot_path)?
    } else {
        config.clone()
    };
    let input_dim = crate::data::CANVAS * crate::data::CANVAS;
    DsfModel::load(trained_config.objective(input_dim, CLASS_COUNT), &checkpoint_path)
}

/// Trains per the config and writes checkpoint, curve, config snapshot and
/// metrics JSON into the output directory.
pub fn cmd_train(config: &RunConfig) -> Result<MetricsReport> {
    let train_split = load_split(config, TRAIN_FILE)?;
    let eval_seen = load_split(config, EVAL_SEEN_FILE)?;
    let unseen_55 = load_split(config, UNSEEN_55_FILE)?;
    let unseen_65 = load_split(config, UNSEEN_65_FILE)?;

    let outcome = train(config, &train_split)?;
    let model = &outcome.model;

    // y-accuracy is measured on the sampled stochastic code — the same
    // object the nuisance probe reads below.
    let y_acc_seen = accuracy(
        &sampled_predict_classes(model, &eval_seen, config.seed.wrapping_add(37))?,
        &eval_seen.y,
    )?;
    let mut y_acc_unseen = BTreeMap::new();
    for (name, split) in [("55", &unseen_55), ("65", &unseen_65)] {
        y_acc_unseen.insert(
            name.to_string(),
            accuracy(
                &sampled_predict_classes(model, split, config.seed.wrapping_add(37))?,
                &split.y,
            )?,
        );
    }

    // The probe reads the stochastic code actually transmitted, not its mean.
    let embeddings = sampled_embedding(model, &eval_seen, config.seed.wrapping_add(71))?;
    let (_probe, s_probe_acc) = train_probe(
        &embeddings,
        eval_seen.n,
        config.z_p_dim,
        &eval_seen.s,
        config.seed.wrapping_add(101),
    )?;
    let s_chance = 1.0 / eval_seen.angle_values.len() as f64;

    let report = MetricsReport {
        y_acc_seen,
        y_acc_unseen,
        s_probe_acc,
        s_chance,
        loss_curve: outcome.curve.clone(),
        run_seed: config.seed,
        config: config.snapshot(),
    };
    report.validate()?;

    std::fs::create_dir_all(&config.out_dir)?;
    model.save(&config.out_dir.join(CHECKPOINT_FILE))?;
    write_curve(&outcome.curve, &config.out_dir.join(CURVE_FILE))?;
    std::fs::write(config.out_dir.join(CONFIG_SNAPSHOT_FILE), config.render())?;
    std::fs::write(config.out_dir.join(METRICS_FILE), report.to_json()?)?;
    Ok(report)
}

/// One grid-search cell: multipliers, where its artifacts live, and either
/// its metrics or the error that killed it.
#[derive(Debug)]
pub struct GridCell {
    pub lambda: f64,
    pub gamma: f64,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub outcome: std::result::Result<MetricsReport, DsfError>,
}

/// Trains one run per (λ, γ) pair with α = 1, sharing the dataset splits in
/// the parent output directory. DSF-E has no γ, so its grid is λ-only.
/// Returns cells sorted by y-acc-seen, best first; failures sort last.
pub fn cmd_grid(config: &RunConfig) -> Result<Vec<GridCell>> {
    if config.lambda_grid.is_empty() {
        return Err(DsfError::Config("lambda_grid is empty".into()));
    }
    let gammas: Vec<f64> = if config.variant == Variant::DsfE {
        vec![0.0]
    } else {
        if config.gamma_grid.is_empty() {
            return Err(DsfError::Config("gamma_grid is empty".into()));
        }
        config.gamma_grid.clone()
    };
    let mut cells = Vec::new();
    for &lambda in &config.lambda_grid {
        for &gamma in &gammas {
            let mut cell_config = config.clone();
            cell_config.alpha = 1.0;
            cell_config.lambda = lambda;
            cell_config.gamma = gamma;
            cell_config.out_dir = config
                .out_dir
                .join(format!("cell_l{lambda:e}_g{gamma:e}"));
            std::fs::create_dir_all(&cell_config.out_dir)?;
            // Cells share the parent's dataset splits.
            for name in [TRAIN_FILE, EVAL_SEEN_FILE, UNSEEN_55_FILE, UNSEEN_65_FILE] {
                let src = config.out_dir.join(name);
                let dst = cell_config.out_dir.join(name);
                if !dst.exists() {
                    std::fs::copy(&src, &dst).map_err(DsfError::Io)?;
                }
            }
            let outcome = cmd_train(&cell_config);
            cells.push(GridCell {
                lambda,
                gamma,
                out_dir: cell_config.out_dir,
                seed: cell_config.seed,
                outcome,
            });
        }
    }
    cells.sort_by(|a, b| {
        let score = |c: &GridCell| c.outcome.as_ref().map(|m| m.y_acc_seen).unwrap_or(-1.0);
        score(b).partial_cmp(&score(a)).unwrap()
    });
    Ok(cells)
}

/// Probes a saved checkpoint for nuisance leakage on the held-out seen split.
pub fn cmd_probe(config: &RunConfig) -> Result<(f64, f64)> {
    let model = load_model(config)?;
    let eval_seen = load_split(config, EVAL_SEEN_FILE)?;
    let embeddings = sampled_embedding(&model, &eval_seen, config.seed.wrapping_add(71))?;
    let (_probe, acc) = train_probe(
        &embeddings,
        eval_seen.n,
        model.config.z_p_dim,
        &eval_seen.s,
        config.seed.wrapping_add(101),
    )?;
    let chance = 1.0 / eval_seen.angle_values.len() as f64;
    Ok((acc, chance))
}

/// Accuracy of a saved checkpoint on every split, plus morphed transfer.
#[derive(Debug)]
pub struct EvalReport {
    pub y_acc_seen: f64,
    pub y_acc_unseen_55: f64,
    pub y_acc_unseen_65: f64,
    pub transfer: TransferReport,
}

pub fn cmd_eval(config: &RunConfig) -> Result<EvalReport> {
    let model = load_model(config)?;
    let eval_seen = load_split(config, EVAL_SEEN_FILE)?;
    let unseen_55 = load_split(config, UNSEEN_55_FILE)?;
    let unseen_65 = load_split(config, UNSEEN_65_FILE)?;
    let dil = load_split(config, DIL_TRANSFER_FILE)?;
    let acc_on = |split: &LabeledImageBatch| -> Result<f64> {
        accuracy(
            &sampled_predict_classes(&model, split, config.seed.wrapping_add(37))?,
            &split.y,
        )
    };
    let mut transfer = TransferReport::new();
    for kappa in TRANSFER_KAPPAS {
        let morphed = morph_batch(&dil, kappa)?;
        transfer.insert(kappa, acc_on(&morphed)?);
    }
    Ok(EvalReport {
        y_acc_seen: acc_on(&eval_seen)?,
        y_acc_unseen_55: acc_on(&unseen_55)?,
        y_acc_unseen_65: acc_on(&unseen_65)?,
        transfer,
    })
}

/// Exports embeddings of the held-out seen split to CSV; returns the path.
pub fn cmd_export(config: &RunConfig) -> Result<PathBuf> {
    let model = load_model(config)?;
    let eval_seen = load_split(config, EVAL_SEEN_FILE)?;
    let path = config.out_dir.join(EMBEDDINGS_FILE);
    export_embeddings(&model, &eval_seen, &path)?;
    Ok(path)
}

/// Number of random conditionally-independent joints the self-test checks.
pub const MICHECK_TRIALS: usize = 200;

/// Runs the MI identity suite: 200 random conditionally-independent joints
/// plus the two canonical hand cases. Returns the summary line.
pub fn cmd_micheck() -> Result<String> {
    let mut passed = 0usize;
    for seed in 0..MICHECK_TRIALS as u64 {
        let joint = DiscreteJoint::random_conditionally_independent(
            2 + (seed as usize % 7),
            2 + (seed as usize % 5),
            2 + (seed as usize % 3),
            seed,
        )?;
        let report = mi_identity_check(&joint)?;
        if report.pass {
            passed += 1;
        }
    }
    // Canonical case 1: x uniform on 2 bits, z_p = bit 1, z_n = bit 2.
    let mut p = vec![0.0; 4 * 2 * 2];
    for x in 0..4usize {
        p[(x * 2 + (x >> 1)) * 2 + (x & 1)] = 0.25;
    }
    let independent_bits = mi_identity_check(&DiscreteJoint::new(4, 2, 2, p)?)?;
    // Canonical case 2: z_p = z_n = x, x uniform binary.
    let mut p = vec![0.0; 2 * 2 * 2];
    for x in 0..2usize {
        p[(x * 2 + x) * 2 + x] = 0.5;
    }
    let fully_dependent = mi_identity_check(&DiscreteJoint::new(2, 2, 2, p)?)?;

    if passed == MICHECK_TRIALS && independent_bits.pass && fully_dependent.pass {
        Ok(format!("{passed}/{MICHECK_TRIALS} identities hold (tol {MI_TOL:e})"))
    } else {
        Err(DsfError::Contract(format!(
            "mi identities failed: {passed}/{MICHECK_TRIALS} random joints, canonical cases {} / {}",
            independent_bits.pass, fully_dependent.pass
        )))
    }
}

/// Dispatches a parsed command line; prints human-readable results to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    match cli.command {
        Command::Micheck => {
            println!("{}", cmd_micheck()?);
            return Ok(());
        }
        _ => {}
    }
    let config = resolve_config(cli)?;
    match cli.command {
        Command::Generate => {
            for (name, count) in cmd_generate(&config)? {
                println!("{name}: {count} samples");
            }
        }
        Command::Train => {
            let report = cmd_train(&config)?;
            println!("y-acc-seen: {:.4}", report.y_acc_seen);
            for (angles, acc) in &report.y_acc_unseen {
                println!("y-acc-unseen ±{angles}: {acc:.4}");
            }
            println!(
                "s-probe-acc: {:.4} (chance {:.2})",
                report.s_probe_acc, report.s_chance
            );
            println!("artifacts in {}", config.out_dir.display());
        }
        Command::Grid => {
            let cells = cmd_grid(&config)?;
            println!("lambda\tgamma\ty-acc-seen\ts-probe-acc\tseed\tout");
            for cell in &cells {
                match &cell.outcome {
                    Ok(m) => println!(
                        "{:e}\t{:e}\t{:.4}\t{:.4}\t{}\t{}",
                        cell.lambda,
                        cell.gamma,
                        m.y_acc_seen,
                        m.s_probe_acc,
                        cell.seed,
                        cell.out_dir.display()
                    ),
                    Err(e) => println!(
                        "{:e}\t{:e}\tFAILED\t-\t{}\t{e}",
                        cell.lambda, cell.gamma, cell.seed
                    ),
                }
            }
        }
        Command::Probe => {
            let (acc, chance) = cmd_probe(&config)?;
            println!("s-probe-acc: {acc:.4} (chance {chance:.2})");
        }
        Command::Eval => {
            let report = cmd_eval(&config)?;
            println!("y-acc-seen: {:.4}", report.y_acc_seen);
            println!("y-acc-unseen ±55: {:.4}", report.y_acc_unseen_55);
            println!("y-acc-unseen ±65: {:.4}", report.y_acc_unseen_65);
            let mut kappas: Vec<i32> = report.transfer.keys().copied().collect();
            kappas.sort_unstable();
            for kappa in kappas {
                println!("y-acc transfer κ={kappa}: {:.4}", report.transfer[&kappa]);
            }
        }
        Command::Export => {
            let path = cmd_export(&config)?;
            println!("embeddings written to {}", path.display());
        }
        Command::Micheck => unreachable!("handled above"),
    }
    Ok(())
}
