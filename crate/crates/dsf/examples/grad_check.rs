//! Gradient integrity demo: finite-difference the full DSF-C and DSF-H
//! losses against the tape's backward pass on a tiny model.
//!
//! The echo noise and the HSIC kernel bandwidths are sampled once and then
//! frozen, so both differentiation methods see exactly the same function —
//! backward deliberately treats the noise as a constant.

use dsf::model::DsfModel;
use dsf::objectives::{check_loss_gradients, ObjectiveConfig, Variant};
use dsf::Result;

fn tiny_config(variant: Variant) -> ObjectiveConfig {
    ObjectiveConfig {
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
    }
}

fn main() -> Result<()> {
    // Batch of four 4×4 "images" with synthetic labels.
    let images: Vec<f64> = (0..4 * 16)
        .map(|i| 0.5 + 0.5 * ((i * 37 % 101) as f64 / 101.0 - 0.5))
        .collect();
    let labels = [0usize, 1, 2, 3];

    for variant in [Variant::DsfC, Variant::DsfH] {
        let mut model = DsfModel::new(tiny_config(variant), 23)?;
        let report = check_loss_gradients(&mut model, &images, &labels, 6, 1e-5, 1e-3)?;
        println!(
            "{variant}: checked {} parameter elements, max relative error {:.3e} → {}",
            report.checked,
            report.max_rel_err,
            if report.pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(())
}
