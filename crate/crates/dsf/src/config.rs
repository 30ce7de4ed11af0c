//! Run configuration: plain `key = value` text files with `#` comments,
//! overridable by command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{DsfError, Result};
use crate::objectives::{ObjectiveConfig, Variant};

/// Everything a run needs: the objective, the optimizer schedule, the dataset
/// recipe and the output location.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Objective.
    pub variant: Variant,
    pub alpha: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub z_p_dim: usize,
    pub z_n_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub predictor_widths: Vec<usize>,
    /// Hidden decoder widths; the output layer is always `input_dim` wide.
    pub decoder_widths: Vec<usize>,
    pub s_max: f64,
    pub echo_depth: Option<usize>,
    // Training.
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    // Dataset.
    pub n_per_class: usize,
    pub jitter_px: f64,
    pub train_count: usize,
    pub eval_seen_count: usize,
    pub unseen_count: usize,
    pub dil_count: usize,
    /// Optional real-data override: paths to IDX image/label files.
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    // Output and grid.
    pub out_dir: PathBuf,
    pub lambda_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
}

const DEFAULT_GRID: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::DsfH,
            alpha: 1.0,
            lambda: 1e-2,
            gamma: 1e-2,
            z_p_dim: 32,
            z_n_dim: 32,
            encoder_widths: vec![256, 128],
            predictor_widths: vec![64],
            decoder_widths: vec![128, 256],
            s_max: 0.9,
            echo_depth: None,
            seed: 0,
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            n_per_class: 1600,
            jitter_px: 2.0,
            train_count: 10_000,
            eval_seen_count: 2_000,
            unseen_count: 1_000,
            dil_count: 1_000,
            idx_images: None,
            idx_labels: None,
            out_dir: PathBuf::from("runs/default"),
            lambda_grid: DEFAULT_GRID.to_vec(),
            gamma_grid: DEFAULT_GRID.to_vec(),
        }
    }
}

fn parse_scalar<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        DsfError::Config(format!("line {line}: invalid value '{value}' for {key}"))
    })
}

fn parse_list<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<Vec<T>> {
    let trimmed = value.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|part| parse_scalar(part, line, key))
        .collect()
}

fn render_list<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Applies one `key = value` assignment. `line` is used in error text.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let v = value.trim();
        match key {
            "variant" => self.variant = v.parse()?,
            "alpha" => self.alpha = parse_scalar(v, line, key)?,
            "lambda" => self.lambda = parse_scalar(v, line, key)?,
            "gamma" => self.gamma = parse_scalar(v, line, key)?,
            "z_p_dim" => self.z_p_dim = parse_scalar(v, line, key)?,
            "z_n_dim" => self.z_n_dim = parse_scalar(v, line, key)?,
            "encoder_widths" => self.encoder_widths = parse_list(v, line, key)?,
            "predictor_widths" => self.predictor_widths = parse_list(v, line, key)?,
            "decoder_widths" => self.decoder_widths = parse_list(v, line, key)?,
            "s_max" => self.s_max = parse_scalar(v, line, key)?,
            "echo_depth" => {
                self.echo_depth = if v.is_empty() {
                    None
                } else {
                    Some(parse_scalar(v, line, key)?)
                }
            }
            "seed" => self.seed = parse_scalar(v, line, key)?,
            "epochs" => self.epochs = parse_scalar(v, line, key)?,
            "batch_size" => self.batch_size = parse_scalar(v, line, key)?,
            "learning_rate" => self.learning_rate = parse_scalar(v, line, key)?,
            "weight_decay" => self.weight_decay = parse_scalar(v, line, key)?,
            "n_per_class" => self.n_per_class = parse_scalar(v, line, key)?,
            "jitter_px" => self.jitter_px = parse_scalar(v, line, key)?,
            "train_count" => self.train_count = parse_scalar(v, line, key)?,
            "eval_seen_count" => self.eval_seen_count = parse_scalar(v, line, key)?,
            "unseen_count" => self.unseen_count = parse_scalar(v, line, key)?,
            "dil_count" => self.dil_count = parse_scalar(v, line, key)?,
            "idx_images" => {
                self.idx_images = (!v.is_empty()).then(|| PathBuf::from(v));
            }
            "idx_labels" => {
                self.idx_labels = (!v.is_empty()).then(|| PathBuf::from(v));
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "lambda_grid" => self.lambda_grid = parse_list(v, line, key)?,
            "gamma_grid" => self.gamma_grid = parse_list(v, line, key)?,
            other => {
                return Err(DsfError::Config(format!(
                    "line {line}: unknown config key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Parses a config file body, starting from the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        config.apply_text(text)?;
        Ok(config)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DsfError::Config(format!("line {line_no}: expected 'key = value', got '{line}'"))
            })?;
            self.set(key.trim(), value, line_no)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    /// Renders back to the `key = value` format `parse` accepts.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.snapshot() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Ordered key → rendered-value view, also embedded in metrics reports.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("variant", self.variant.to_string());
        put("alpha", self.alpha.to_string());
        put("lambda", self.lambda.to_string());
        put("gamma", self.gamma.to_string());
        put("z_p_dim", self.z_p_dim.to_string());
        put("z_n_dim", self.z_n_dim.to_string());
        put("encoder_widths", render_list(&self.encoder_widths));
        put("predictor_widths", render_list(&self.predictor_widths));
        put("decoder_widths", render_list(&self.decoder_widths));
        put("s_max", self.s_max.to_string());
        put(
            "echo_depth",
            self.echo_depth.map_or_else(String::new, |d| d.to_string()),
        );
        put("seed", self.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("n_per_class", self.n_per_class.to_string());
        put("jitter_px", self.jitter_px.to_string());
        put("train_count", self.train_count.to_string());
        put("eval_seen_count", self.eval_seen_count.to_string());
        put("unseen_count", self.unseen_count.to_string());
        put("dil_count", self.dil_count.to_string());
        put(
            "idx_images",
            self.idx_images
                .as_ref()
                .map_or_else(String::new, |p| p.display().to_string()),
        );
        put(
            "idx_labels",
            self.idx_labels
                .as_ref()
                .map_or_else(String::new, |p| p.display().to_string()),
        );
        put("out_dir", self.out_dir.display().to_string());
        put("lambda_grid", render_list(&self.lambda_grid));
        put("gamma_grid", render_list(&self.gamma_grid));
        m
    }

    /// The objective slice of the run config. `input_dim` and `num_classes`
    /// come from the dataset geometry.
    pub fn objective(&self, input_dim: usize, num_classes: usize) -> ObjectiveConfig {
        ObjectiveConfig {
            variant: self.variant,
            alpha: self.alpha,
            lambda: self.lambda,
            gamma: self.gamma,
            z_p_dim: self.z_p_dim,
            z_n_dim: if self.variant == Variant::DsfE {
                0
            } else {
                self.z_n_dim
            },
            encoder_widths: self.encoder_widths.clone(),
            predictor_widths: self.predictor_widths.clone(),
            decoder_widths: self.decoder_widths.clone(),
            input_dim,
            num_classes,
            s_max: self.s_max,
            echo_depth: self.echo_depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 4 {
            return Err(DsfError::Config(format!(
                "batch_size {} too small: HSIC and the echo channel need at least 4",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(DsfError::Config("epochs must be >= 1".into()));
        }
        if self.idx_images.is_some() != self.idx_labels.is_some() {
            return Err(DsfError::Config(
                "idx_images and idx_labels must be provided together".into(),
            ));
        }
        self.objective(784, 10).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_render_and_parse() {
        let config = RunConfig::default();
        let back = RunConfig::parse(&config.render()).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let config = RunConfig::parse(
            "# a comment\n\nseed = 9  # trailing comment\nvariant = dsf-c\n",
        )
        .unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(config.variant, Variant::DsfC);
    }

    #[test]
    fn lists_parse_from_commas() {
        let config = RunConfig::parse("encoder_widths = 100,50\nlambda_grid = 0.1,0.01\n").unwrap();
        assert_eq!(config.encoder_widths, vec![100, 50]);
        assert_eq!(config.lambda_grid, vec![0.1, 0.01]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("seed = 1\nepochs = banana\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = RunConfig::parse("nonsense line\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        let err = RunConfig::parse("mystery = 3\n").unwrap_err().to_string();
        assert!(err.contains("mystery"), "{err}");
    }

    #[test]
    fn validation_rejects_tiny_batches() {
        let mut config = RunConfig::default();
        config.batch_size = 2;
        assert!(matches!(config.validate(), Err(DsfError::Config(_))));
    }

    #[test]
    fn dsf_e_objective_drops_nuisance_dim() {
        let mut config = RunConfig::default();
        config.variant = Variant::DsfE;
        let obj = config.objective(784, 10);
        assert_eq!(obj.z_n_dim, 0);
        obj.validate().unwrap();
    }

    #[test]
    fn flag_style_overrides_apply_on_top() {
        let mut config = RunConfig::parse("lambda = 0.1\n").unwrap();
        config.apply_text("lambda = 0.001\n").unwrap();
        assert_eq!(config.lambda, 0.001);
    }
}
