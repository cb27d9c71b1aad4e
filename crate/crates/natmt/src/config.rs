//! Run settings shared by the CLI subcommands: documented defaults, an
//! optional `key = value` config file, and command-line overrides, in that
//! precedence order. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::ModelError;
use crate::model::ModelConfig;

macro_rules! settings {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr ; )*) => {
        /// Every tunable with its default. Field names double as config
        /// file keys.
        #[derive(Debug, Clone)]
        pub struct Settings {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for Settings {
            fn default() -> Self {
                Settings { $( $name: $default, )* }
            }
        }

        impl Settings {
            /// Apply one `key = value` assignment.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
                match key {
                    $( stringify!($name) => {
                        self.$name = value.parse::<$ty>().map_err(|e| ModelError::Config(
                            format!("bad value {value:?} for {key}: {e}")))?;
                        Ok(())
                    } )*
                    _ => Err(ModelError::Config(format!("unknown config key {key:?}"))),
                }
            }

            /// The full key list with defaults, for `--help` style output.
            pub fn documented_defaults() -> String {
                let mut out = String::new();
                let d = Settings::default();
                $( let _ = writeln!(out, "{} = {}", stringify!($name), d.$name); )*
                out
            }
        }
    };
}

settings! {
    /// Transformer layers in encoder and decoder.
    layers: usize = 2;
    /// Model and embedding width d.
    d_model: usize = 64;
    /// Attention heads.
    heads: usize = 2;
    /// Feed-forward inner width.
    d_ff: usize = 128;
    /// Dropout probability (0 disables).
    dropout: f64 = 0.0;
    /// Maximum supported sequence length.
    max_positions: usize = 64;
    /// Sentence-alignment loss weight.
    mu: f64 = 0.1;
    /// Adversarial loss weight.
    lambda: f64 = 1.0;
    /// Training epochs.
    epochs: usize = 4;
    /// Token budget per batch.
    max_tokens: usize = 2048;
    /// Peak learning rate (reached after warmup).
    base_lr: f64 = 2e-3;
    /// Warmup steps before inverse-sqrt decay.
    warmup: u64 = 60;
    /// Discriminator steps per joint step.
    d_steps: usize = 1;
    /// Length-kernel sharpness.
    tau: f64 = 0.3;
    /// Use the unnormalized kernel weights.
    raw_kernel: bool = false;
    /// Target/source length ratio at inference; 0 = use the checkpoint's.
    alpha: f64 = 0.0;
    /// Half-width of the inference length window.
    window_b: usize = 0;
    /// Beam size for teacher decoding and distillation.
    beam: usize = 4;
    /// RNG seed for everything in a run.
    seed: u64 = 7;
    /// Minimum token frequency kept in the vocabulary.
    min_count: usize = 1;
    /// EM iterations for the internal aligner.
    em_iterations: usize = 10;
    /// Maximum source phrase length when building tables.
    max_phrase_len: usize = 4;
    /// Which Moses score column holds p(tgt|src) (0-based).
    moses_score_col: usize = 2;
    /// Sentences per batched beam-search group during distillation.
    distill_chunk: usize = 32;
}

impl Settings {
    /// Parse a config file of `key = value` lines; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<(), ModelError> {
        let text = std::fs::read_to_string(path).map_err(ModelError::Io)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ModelError::Config(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim()).map_err(|e| {
                ModelError::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
            max_positions: self.max_positions,
        }
    }

    pub fn train_config(&self, method: crate::decoder_input::InputMethod) -> crate::training::TrainConfig {
        crate::training::TrainConfig {
            mu: self.mu,
            lambda: self.lambda,
            epochs: self.epochs,
            max_tokens: self.max_tokens,
            seed: self.seed,
            base_lr: self.base_lr,
            warmup: self.warmup,
            d_steps: self.d_steps,
            method,
            tau: self.tau,
            raw_kernel: self.raw_kernel,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let s = Settings::default();
        assert_eq!(s.mu, 0.1);
        assert_eq!(s.lambda, 1.0);
        assert_eq!(s.tau, 0.3);
        assert_eq!(s.d_model, 64);
        let docs = Settings::documented_defaults();
        assert!(docs.contains("mu = 0.1"));
        assert!(docs.contains("lambda = 1"));
    }

    #[test]
    fn set_and_reject() {
        let mut s = Settings::default();
        s.set("epochs", "9").unwrap();
        assert_eq!(s.epochs, 9);
        s.set("raw_kernel", "true").unwrap();
        assert!(s.raw_kernel);
        assert!(s.set("nonsense", "1").is_err());
        assert!(s.set("epochs", "x").is_err());
    }

    #[test]
    fn file_roundtrip_with_comments() {
        let dir = std::env::temp_dir().join(format!("natmt-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, "# toy run\nepochs = 2\nmu = 0.25 # inline\n\nwindow_b = 4\n").unwrap();
        let mut s = Settings::default();
        s.load_file(&path).unwrap();
        assert_eq!(s.epochs, 2);
        assert_eq!(s.mu, 0.25);
        assert_eq!(s.window_b, 4);

        std::fs::write(&path, "bogus = 3\n").unwrap();
        assert!(s.load_file(&path).is_err());
        std::fs::write(&path, "no equals sign\n").unwrap();
        assert!(s.load_file(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
