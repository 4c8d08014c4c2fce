//! Layered run configuration: built-in defaults, then an optional JSON
//! config file, then explicit command line flags, later layers winning.
//! Every command echoes the fully resolved configuration to stdout so a run
//! directory always records what actually ran.

use std::path::Path;

use tsdc_core::condense::{CondenseConfig, InitKind};
use tsdc_core::numerics::ops::NormAxes;
use tsdc_core::trajectory::TrainSpec;
use tsdc_core::tsfe::{HeadKind, TsfeConfig};

use crate::commands::CliError;

/// Everything a run needs besides file paths and seeds. Integer zero means
/// "pick automatically" for `syn_batch` (full batch) and `trend_kernel`
/// (derived from the patch count).
#[derive(Clone, Debug, serde::Serialize)]
pub struct RunConfig {
    // data pipeline
    pub lookback: usize,
    pub horizon: usize,
    pub window_stride: usize,
    pub has_header: bool,
    pub skip_first_col: bool,
    pub split: (f64, f64, f64),
    // model
    pub patch_len: usize,
    pub patch_stride: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub n_operators: usize,
    pub use_pos_enc: bool,
    // expert trajectories
    pub expert_count: usize,
    pub expert_epochs: usize,
    pub expert_lr: f32,
    pub expert_batch: usize,
    // condensation
    pub n_condensed: usize,
    pub init: InitKind,
    pub steps: usize,
    pub inner_steps: usize,
    pub inner_lr: f32,
    pub pre_steps: usize,
    pub lambda_task: f32,
    pub lambda_fre: f32,
    pub lambda_tmm: f32,
    pub outer_lr: f32,
    pub outer_momentum: f32,
    pub syn_batch: usize,
    pub real_batch: usize,
    pub rerank_every: usize,
    pub trend_kernel: usize,
    // downstream training and evaluation
    pub train_epochs: usize,
    pub train_lr: f32,
    pub train_batch: usize,
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lookback: 48,
            horizon: 24,
            window_stride: 1,
            has_header: true,
            skip_first_col: false,
            split: (0.7, 0.1, 0.2),
            patch_len: 16,
            patch_stride: 8,
            d_model: 64,
            num_heads: 4,
            n_operators: 1,
            use_pos_enc: true,
            expert_count: 5,
            expert_epochs: 10,
            expert_lr: 0.05,
            expert_batch: 64,
            n_condensed: 100,
            init: InitKind::RealSample,
            steps: 200,
            inner_steps: 16,
            inner_lr: 0.01,
            pre_steps: 2,
            lambda_task: 1.0,
            lambda_fre: 1.0,
            lambda_tmm: 1.0,
            outer_lr: 0.05,
            outer_momentum: 0.5,
            syn_batch: 0,
            real_batch: 32,
            rerank_every: 10,
            trend_kernel: 0,
            train_epochs: 30,
            train_lr: 0.05,
            train_batch: 64,
            eval_batch: 256,
        }
    }
}

/// The JSON config file: every field optional, unknown fields rejected so
/// typos fail loudly instead of silently running defaults.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub lookback: Option<usize>,
    pub horizon: Option<usize>,
    pub window_stride: Option<usize>,
    pub has_header: Option<bool>,
    pub skip_first_col: Option<bool>,
    pub split: Option<(f64, f64, f64)>,
    pub patch_len: Option<usize>,
    pub patch_stride: Option<usize>,
    pub d_model: Option<usize>,
    pub num_heads: Option<usize>,
    pub n_operators: Option<usize>,
    pub use_pos_enc: Option<bool>,
    pub expert_count: Option<usize>,
    pub expert_epochs: Option<usize>,
    pub expert_lr: Option<f32>,
    pub expert_batch: Option<usize>,
    pub n_condensed: Option<usize>,
    pub init: Option<InitKind>,
    pub steps: Option<usize>,
    pub inner_steps: Option<usize>,
    pub inner_lr: Option<f32>,
    pub pre_steps: Option<usize>,
    pub lambda_task: Option<f32>,
    pub lambda_fre: Option<f32>,
    pub lambda_tmm: Option<f32>,
    pub outer_lr: Option<f32>,
    pub outer_momentum: Option<f32>,
    pub syn_batch: Option<usize>,
    pub real_batch: Option<usize>,
    pub rerank_every: Option<usize>,
    pub trend_kernel: Option<usize>,
    pub train_epochs: Option<usize>,
    pub train_lr: Option<f32>,
    pub train_batch: Option<usize>,
    pub eval_batch: Option<usize>,
}

macro_rules! layer {
    ($dst:expr, $src:expr, { $($f:ident),* $(,)? }) => {
        $( if let Some(v) = $src.$f { $dst.$f = v; } )*
    };
}

/// The config file flag shared by every subcommand. The handful of knobs
/// that vary between invocations in practice get per-subcommand flags; the
/// long tail lives in the config file.
#[derive(Debug, clap::Args)]
pub struct Common {
    /// JSON config file; explicit flags take precedence over its fields
    #[arg(long, value_name = "FILE")]
    pub config: Option<std::path::PathBuf>,
}

impl Common {
    /// Defaults overlaid by the config file. Subcommand flags land on top
    /// of the result before anything runs, so the echo shows final values.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut rc = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let file: FileConfig = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            layer!(rc, file, {
                lookback, horizon, window_stride, has_header, skip_first_col, split,
                patch_len, patch_stride, d_model, num_heads, n_operators, use_pos_enc,
                expert_count, expert_epochs, expert_lr, expert_batch,
                n_condensed, init, steps, inner_steps, inner_lr, pre_steps,
                lambda_task, lambda_fre, lambda_tmm, outer_lr, outer_momentum,
                syn_batch, real_batch, rerank_every, trend_kernel,
                train_epochs, train_lr, train_batch, eval_batch,
            });
        }
        Ok(rc)
    }
}

impl RunConfig {
    /// Prints the fully resolved configuration to stdout. Every subcommand
    /// calls this once, after flag overrides, before doing any work.
    pub fn echo(&self) {
        println!("{}", serde_json::to_string_pretty(self).expect("config serializes"));
    }

    /// The forecasting model this run trains and condenses against.
    pub fn model(&self, channels: usize) -> Result<TsfeConfig, CliError> {
        let cfg = TsfeConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            channels,
            patch_len: self.patch_len,
            patch_stride: self.patch_stride,
            d_model: self.d_model,
            num_heads: self.num_heads,
            n_operators: self.n_operators,
            head: HeadKind::Forecast,
            num_classes: 0,
            norm: NormAxes::PerSample,
            use_pos_enc: self.use_pos_enc,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn expert_spec(&self) -> TrainSpec {
        TrainSpec {
            epochs: self.expert_epochs,
            lr: self.expert_lr,
            batch_size: self.expert_batch,
            shuffle_seed: 0,
        }
    }

    pub fn train_spec(&self, seed: u64) -> TrainSpec {
        TrainSpec {
            epochs: self.train_epochs,
            lr: self.train_lr,
            batch_size: self.train_batch,
            shuffle_seed: seed,
        }
    }

    pub fn condense_config(&self, seed: u64) -> CondenseConfig {
        CondenseConfig {
            steps: self.steps,
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            pre_steps: self.pre_steps,
            lambda_task: self.lambda_task,
            lambda_fre: self.lambda_fre,
            lambda_tmm: self.lambda_tmm,
            outer_lr: self.outer_lr,
            outer_momentum: self.outer_momentum,
            syn_batch: if self.syn_batch == 0 { usize::MAX } else { self.syn_batch },
            real_batch: self.real_batch,
            rerank_every: self.rerank_every,
            trend_kernel: if self.trend_kernel == 0 { None } else { Some(self.trend_kernel) },
            seed,
        }
    }
}

/// File stem used as the dataset name in metrics records.
pub fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}
