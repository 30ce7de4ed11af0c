//! Trains a small model, exports its z_p / z_n embeddings to CSV (the input
//! format for external t-SNE/UMAP tooling) and prints the first rows.

use dsf::cli::{cmd_export, cmd_generate, cmd_train};
use dsf::config::RunConfig;
use dsf::objectives::Variant;
use dsf::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("dsf_export_demo");
    let mut config = RunConfig::default();
    config.out_dir = dir;
    config.variant = Variant::DsfH;
    config.n_per_class = 40;
    config.train_count = 250;
    config.eval_seen_count = 80;
    config.unseen_count = 20;
    config.dil_count = 20;
    config.z_p_dim = 4;
    config.z_n_dim = 4;
    config.encoder_widths = vec![24];
    config.predictor_widths = vec![12];
    config.decoder_widths = vec![24];
    config.epochs = 3;
    config.batch_size = 32;
    config.learning_rate = 1e-3;

    cmd_generate(&config)?;
    cmd_train(&config)?;
    let path = cmd_export(&config)?;

    println!("embeddings written to {}\n", path.display());
    let text = std::fs::read_to_string(&path)?;
    for line in text.lines().take(6) {
        println!("{line}");
    }
    let rows = text.lines().count() - 1;
    println!("... ({rows} rows total; columns are id, y, s, then z_p and z_n coordinates)");
    Ok(())
}
