//! Acceptance gate: one pass/fail line per criterion.
//!
//! Criteria 6, 7 and 9 share a full-scale training run, so everything lives
//! in a single test function; each criterion prints its own line and the
//! test fails at the end if any criterion failed.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsf::cli::{
    cmd_eval, cmd_generate, cmd_micheck, cmd_train, CHECKPOINT_FILE, METRICS_FILE,
};
use dsf::config::RunConfig;
use dsf::echo::echo_sample;
use dsf::eval::{relative_improvement, ImprovementKind};
use dsf::hsic::{hsic_penalty, KernelSpec};
use dsf::model::DsfModel;
use dsf::objectives::{check_loss_gradients, ObjectiveConfig, Variant};
use dsf::tensor::Graph;

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn report(&mut self, criterion: usize, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {criterion}: {verdict} — {detail}");
        if !pass {
            self.failures.push(format!("criterion {criterion}: {detail}"));
        }
    }

    fn skip(&mut self, criterion: usize, detail: String) {
        println!("criterion {criterion}: SKIP — {detail}");
    }
}

/// Criterion 1: the analytic channel MI (−ln s for constant s) agrees with a
/// histogram Monte-Carlo estimate over 1e5 samples and 64 bins to 0.1 nats.
fn criterion_1(gate: &mut Gate) {
    let n = 100_000;
    let s_const = 0.6;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f_vals: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let g = Graph::new();
    let f = g.constant(&[n, 1], &f_vals);
    let s = g.constant(&[n, 1], &vec![s_const; n]);
    let sample = echo_sample(&g, f, s, 63, 11, None).unwrap();
    let exact = sample.mi_nats.values()[0];
    let z = sample.z.values();

    let bins = 64;
    let (zlo, zhi) = z
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let bin = |v: f64, lo: f64, hi: f64| -> usize {
        (((v - lo) / (hi - lo) * bins as f64) as isize).clamp(0, bins as isize - 1) as usize
    };
    let mut joint = vec![0.0f64; bins * bins];
    for i in 0..n {
        joint[bin(f_vals[i], 0.0, 1.0) * bins + bin(z[i], zlo, zhi)] += 1.0 / n as f64;
    }
    let mut px = vec![0.0; bins];
    let mut pz = vec![0.0; bins];
    for x in 0..bins {
        for zb in 0..bins {
            px[x] += joint[x * bins + zb];
            pz[zb] += joint[x * bins + zb];
        }
    }
    let mut mc = 0.0;
    for x in 0..bins {
        for zb in 0..bins {
            let p = joint[x * bins + zb];
            if p > 0.0 {
                mc += p * (p / (px[x] * pz[zb])).ln();
            }
        }
    }
    let gap = (mc - exact).abs();
    gate.report(
        1,
        gap < 0.1 && (exact - (-f64::ln(s_const))).abs() < 1e-12,
        format!("exact MI {exact:.4} nats, MC estimate {mc:.4}, gap {gap:.4} < 0.1"),
    );
}

/// Criterion 2: echo noise is marginal-matching — over 1e4 samples at depth
/// 64 / batch 128, the first and second moments of ε and z agree within 3
/// standard errors.
fn criterion_2(gate: &mut Gate) {
    let batch = 128;
    let batches = 79; // ~1e4 samples
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut eps_all = Vec::with_capacity(batch * batches);
    let mut z_all = Vec::with_capacity(batch * batches);
    for b in 0..batches {
        // A fixed smooth map x → (f, s) evaluated on fresh uniform inputs.
        let f_vals: Vec<f64> = (0..batch)
            .map(|_| {
                let x: f64 = rng.gen_range(-1.0..1.0);
                (2.3 * x).sin() + 0.3 * x
            })
            .collect();
        let s_vals: Vec<f64> = f_vals.iter().map(|&f| 0.3 + 0.25 * (1.0 + (1.7 * f).cos()) / 2.0).collect();
        let g = Graph::new();
        let f = g.constant(&[batch, 1], &f_vals);
        let s = g.constant(&[batch, 1], &s_vals);
        let sample = echo_sample(&g, f, s, 64, 1000 + b as u64, None).unwrap();
        eps_all.extend_from_slice(&sample.epsilon);
        z_all.extend(sample.z.values());
    }
    let n = eps_all.len() as f64;
    let stats = |v: &[f64], pow: i32| -> (f64, f64) {
        let m: f64 = v.iter().map(|x| x.powi(pow)).sum::<f64>() / n;
        let var: f64 = v.iter().map(|x| (x.powi(pow) - m).powi(2)).sum::<f64>() / n;
        (m, var / n) // (moment, squared standard error)
    };
    let mut ok = true;
    let mut details = Vec::new();
    for (label, pow) in [("mean", 1), ("2nd moment", 2)] {
        let (me, se2e) = stats(&eps_all, pow);
        let (mz, se2z) = stats(&z_all, pow);
        let se = (se2e + se2z).sqrt();
        let dev = (me - mz).abs() / se;
        ok &= dev <= 3.0;
        details.push(format!("{label}: ε {me:.4} vs z {mz:.4} ({dev:.2}σ)"));
    }
    gate.report(2, ok, details.join("; "));
}

/// Criterion 3: the discrete MI identity suite (200 random conditionally
/// independent joints plus the canonical cases) holds to 1e-12 nats.
fn criterion_3(gate: &mut Gate) {
    match cmd_micheck() {
        Ok(line) => gate.report(3, true, line),
        Err(e) => gate.report(3, false, e.to_string()),
    }
}

/// Plain (non-autodiff) biased HSIC with gaussian median kernels, matching
/// `hsic_penalty` but O(n²) per score so the permutation null is cheap.
fn hsic_plain(centered_k: &[f64], l: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..n * n {
        acc += centered_k[i] * l[i];
    }
    acc / (n * n) as f64
}

fn gram_values(v: &[f64], n: usize) -> Vec<f64> {
    let g = Graph::new();
    let t = g.constant(&[n, 1], v);
    dsf::hsic::gram(KernelSpec::gaussian_median(), t).unwrap().values()
}

fn center(k: &mut [f64], n: usize) {
    let mut row = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            row[i] += k[i * n + j] / n as f64;
        }
        total += row[i] / n as f64;
    }
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] += total - row[i] - row[j];
        }
    }
}

/// Criterion 4: HSIC calibration. Independent normals (N=256) fall below the
/// 95th percentile of a 200-permutation null in ≥90/100 trials; u=v exceeds
/// it in 100/100; and the N=2 linear-kernel hand case returns exactly 1.0.
fn criterion_4(gate: &mut Gate) {
    let n = 256;
    let trials = 100;
    let perms = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut indep_below = 0;
    let mut dependent_above = 0;
    for _ in 0..trials {
        let u: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let v: Vec<f64> = (0..n).map(|_| gauss(&mut rng)).collect();
        let mut ku = gram_values(&u, n);
        center(&mut ku, n);
        let lv = gram_values(&v, n);
        let observed_indep = hsic_plain(&ku, &lv, n);
        let lu = gram_values(&u, n);
        let observed_same = hsic_plain(&ku, &lu, n);

        // Permutation null: permute v, rebuild L by index gather.
        let mut null = Vec::with_capacity(perms);
        let mut idx: Vec<usize> = (0..n).collect();
        for _ in 0..perms {
            idx.shuffle(&mut rng);
            let mut lp = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    lp[i * n + j] = lv[idx[i] * n + idx[j]];
                }
            }
            null.push(hsic_plain(&ku, &lp, n));
        }
        null.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p95 = null[(perms * 95) / 100];
        if observed_indep < p95 {
            indep_below += 1;
        }
        if observed_same > p95 {
            dependent_above += 1;
        }
    }

    // N=2 linear-kernel hand case: u = v = (−1, 1)ᵀ ⇒ HSIC = 1.0 exactly.
    let g = Graph::new();
    let u = g.constant(&[2, 1], &[-1.0, 1.0]);
    let v = g.constant(&[2, 1], &[-1.0, 1.0]);
    let hand = hsic_penalty(&g, u, v, KernelSpec::Linear, KernelSpec::Linear)
        .unwrap()
        .values()[0];

    gate.report(
        4,
        indep_below >= 90 && dependent_above == trials && hand == 1.0,
        format!(
            "independent below null p95 in {indep_below}/100 (need ≥90), u=v above in {dependent_above}/100, N=2 hand case = {hand}"
        ),
    );
}

/// Criterion 5: full-loss gradient check (DSF-C and DSF-H, frozen noise and
/// bandwidths, tiny model, rel. err < 1e-3).
fn criterion_5(gate: &mut Gate) {
    let images: Vec<f64> = (0..4 * 16)
        .map(|i| 0.5 + 0.5 * ((i * 37 % 101) as f64 / 101.0 - 0.5))
        .collect();
    let labels = [0usize, 1, 2, 3];
    let mut ok = true;
    let mut details = Vec::new();
    for variant in [Variant::DsfC, Variant::DsfH] {
        let config = ObjectiveConfig {
            variant,
            alpha: 1.0,
            lambda: 0.01,
            gamma: 0.01,
            z_p_dim: 3,
            z_n_dim: 3,
            encoder_widths: vec![8],
            predictor_widths: vec![6],
            decoder_widths: vec![8],
            input_dim: 16,
            num_classes: 4,
            s_max: 0.9,
            echo_depth: None,
        };
        let mut model = DsfModel::new(config, 23).unwrap();
        let report = check_loss_gradients(&mut model, &images, &labels, 6, 1e-5, 1e-3).unwrap();
        ok &= report.pass;
        details.push(format!("{variant} max rel err {:.2e}", report.max_rel_err));
    }
    gate.report(5, ok, details.join(", "));
}

fn full_scale_config(variant: Variant, out_dir: PathBuf) -> RunConfig {
    let mut config = RunConfig::default();
    config.variant = variant;
    config.z_n_dim = if variant == Variant::DsfE { 0 } else { 32 };
    config.lambda = 1e-2;
    config.gamma = 1e-2;
    config.train_count = 10_000;
    config.eval_seen_count = 2_000;
    config.unseen_count = 1_000;
    config.dil_count = 1_000;
    config.n_per_class = 1_600;
    config.epochs = 30;
    // Optimization and capacity settings are config values, not fixed by the
    // criterion; the library default lr (1e-4) needs far more than the fixed
    // 30 epochs at this scale. These were tuned so the invariance mechanism
    // converges within the budget: a tight 8-d predictive code, a mildly
    // down-weighted prediction term, and a higher step count/rate.
    config.batch_size = 64;
    config.learning_rate = 3e-3;
    config.weight_decay = 1e-3;
    config.z_p_dim = 8;
    config.alpha = 0.75;
    config.seed = 2;
    config.out_dir = out_dir;
    config
}

/// Criteria 6/7/9 share the full-scale DSF-H run (and a DSF-E baseline).
fn criteria_6_7_9(gate: &mut Gate, root: &std::path::Path) {
    let h_dir = root.join("dsf_h");
    let e_dir = root.join("dsf_e");
    let h_config = full_scale_config(Variant::DsfH, h_dir.clone());
    let mut e_config = full_scale_config(Variant::DsfE, e_dir.clone());
    e_config.epochs = 30;

    let start = std::time::Instant::now();
    cmd_generate(&h_config).unwrap();
    let h_report = cmd_train(&h_config).unwrap();
    let elapsed_h = start.elapsed();

    cmd_generate(&e_config).unwrap();
    let e_report = cmd_train(&e_config).unwrap();

    let unseen_ok = h_report.y_acc_unseen.iter().all(|(k, &acc)| {
        acc >= *e_report.y_acc_unseen.get(k).unwrap()
    });
    let c6 = h_report.y_acc_seen >= 0.90
        && h_report.s_probe_acc <= 0.25
        && unseen_ok
        && elapsed_h.as_secs() < 15 * 60;
    gate.report(
        6,
        c6,
        format!(
            "DSF-H y-acc-seen {:.3} (≥0.90), s-probe {:.3} (≤0.25), unseen 55/65 {:.3}/{:.3} vs DSF-E {:.3}/{:.3}, {}s",
            h_report.y_acc_seen,
            h_report.s_probe_acc,
            h_report.y_acc_unseen["55"],
            h_report.y_acc_unseen["65"],
            e_report.y_acc_unseen["55"],
            e_report.y_acc_unseen["65"],
            elapsed_h.as_secs()
        ),
    );

    // Criterion 7: morphological transfer degrades with structuring size.
    let start = std::time::Instant::now();
    let eval = cmd_eval(&h_config).unwrap();
    let c7 = eval.transfer[&2] > eval.transfer[&4] && start.elapsed().as_secs() < 60;
    gate.report(
        7,
        c7,
        format!(
            "transfer y-acc κ=2 {:.3} > κ=4 {:.3} (κ=−2 {:.3}, κ=3 {:.3})",
            eval.transfer[&2], eval.transfer[&4], eval.transfer[&(-2)], eval.transfer[&3]
        ),
    );

    // Criterion 9: rerunning the criterion-6 training with the same seed
    // yields a byte-identical metrics JSON.
    let first = std::fs::read(h_dir.join(METRICS_FILE)).unwrap();
    let checkpoint_first = std::fs::read(h_dir.join(CHECKPOINT_FILE)).unwrap();
    cmd_train(&h_config).unwrap();
    let second = std::fs::read(h_dir.join(METRICS_FILE)).unwrap();
    let checkpoint_second = std::fs::read(h_dir.join(CHECKPOINT_FILE)).unwrap();
    gate.report(
        9,
        first == second,
        format!(
            "rerun metrics JSON byte-identical: {} ({} bytes); checkpoint identical: {}",
            first == second,
            first.len(),
            checkpoint_first == checkpoint_second
        ),
    );
}

/// Criterion 8: relative-improvement arithmetic reproduces the reference
/// table's RI column exactly after integer-percent rounding.
fn criterion_8(gate: &mut Gate) {
    let y = relative_improvement(0.981, 0.977, ImprovementKind::Y).unwrap();
    let s = relative_improvement(0.200, 0.338, ImprovementKind::S { chance: 0.20 }).unwrap();
    let y_pct = (y * 100.0).round() as i64;
    let s_pct = (s * 100.0).round() as i64;
    gate.report(
        8,
        y_pct == 17 && s_pct == 100,
        format!("(0.977→0.981) = {y_pct}% (expect 17), (0.338→0.200, chance 0.20) = {s_pct}% (expect 100)"),
    );
}

/// Criterion 10 (optional): real MNIST via IDX files, when present under
/// `$DSF_MNIST_DIR` (or `./data/mnist`): DSF-H reaches y-acc-seen ≥ 0.95
/// with s-probe ≤ 0.25.
fn criterion_10(gate: &mut Gate, root: &std::path::Path) {
    let dir = std::env::var("DSF_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from("data/mnist"));
    let images = dir.join("train-images-idx3-ubyte");
    let labels = dir.join("train-labels-idx1-ubyte");
    if !images.exists() || !labels.exists() {
        gate.skip(
            10,
            format!("optional real-data criterion: no IDX files under {}", dir.display()),
        );
        return;
    }
    let mut config = full_scale_config(Variant::DsfH, root.join("mnist"));
    config.idx_images = Some(images);
    config.idx_labels = Some(labels);
    cmd_generate(&config).unwrap();
    let report = cmd_train(&config).unwrap();
    gate.report(
        10,
        report.y_acc_seen >= 0.95 && report.s_probe_acc <= 0.25,
        format!(
            "real MNIST-ROT: y-acc-seen {:.3} (≥0.95), s-probe {:.3} (≤0.25)",
            report.y_acc_seen, report.s_probe_acc
        ),
    );
}

#[test]
fn acceptance() {
    let workdir = tempfile::tempdir().unwrap();
    let mut gate = Gate { failures: Vec::new() };

    let timed = |name: usize, f: &mut dyn FnMut(&mut Gate), gate: &mut Gate, limit_s: u64| {
        let start = std::time::Instant::now();
        f(gate);
        let took = start.elapsed().as_secs();
        if took >= limit_s {
            gate.failures
                .push(format!("criterion {name} exceeded {limit_s}s (took {took}s)"));
        }
    };

    timed(1, &mut criterion_1, &mut gate, 10);
    timed(2, &mut criterion_2, &mut gate, 30);
    timed(3, &mut criterion_3, &mut gate, 5);
    timed(4, &mut criterion_4, &mut gate, 60);
    timed(5, &mut criterion_5, &mut gate, 10);
    criteria_6_7_9(&mut gate, workdir.path());
    criterion_8(&mut gate);
    criterion_10(&mut gate, workdir.path());

    assert!(
        gate.failures.is_empty(),
        "acceptance failures:\n{}",
        gate.failures.join("\n")
    );
}
