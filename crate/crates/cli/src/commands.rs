//! Subcommand implementations. Status goes to stderr, the resolved config
//! echo and nothing else goes to stdout, and results land in the files the
//! caller named. Exit code 2 means the invocation was wrong, 1 means the
//! run itself failed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use tsdc_core::baselines::{herding, k_center_greedy, load_selection, random_coreset, save_selection, Selection};
use tsdc_core::condense::{condense, init_condensed, load_condensed, save_condensed, InitKind};
use tsdc_core::dataset::{load_csv, make_windows, split_chronological, NormStats, WindowSet};
use tsdc_core::eval::{evaluate, stream_eval, stream_splits, train_downstream, EvalReport};
use tsdc_core::trajectory::{buffer_fingerprint, load_expert_buffer, save_expert_buffer, train_expert, ExpertBuffer};
use tsdc_core::tsfe::TsfeConfig;
use tsdc_core::Error;

use crate::config::{dataset_name, Common, RunConfig};

/// Command failures, split by whose fault they are.
#[derive(Debug)]
pub enum CliError {
    /// The invocation cannot be run as given: exit 2.
    Usage(String),
    /// The run was attempted and failed: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Every subcommand writes its artifacts under a run directory named by
/// --out; the directory is created on demand so pipelines can share one.
fn out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

macro_rules! override_config {
    ($rc:expr, $args:expr, { $($flag:ident => $field:ident),* $(,)? }) => {
        $( if let Some(v) = $args.$flag { $rc.$field = v; } )*
    };
}

/// The normalized, windowed view of one CSV: chronological train/val/test
/// windows in the train split's standardized units.
struct Prepared {
    name: String,
    channels: usize,
    train: WindowSet,
    #[allow(dead_code)]
    val: WindowSet,
    test: WindowSet,
}

fn prepare(data: &Path, rc: &RunConfig) -> Result<Prepared, CliError> {
    let ds = load_csv(data, rc.has_header, rc.skip_first_col)?;
    let (train, val, test) = split_chronological(&ds, rc.split)?;
    let stats = NormStats::compute(&train)?;
    let (train, val, test) = (stats.apply(&train), stats.apply(&val), stats.apply(&test));
    Ok(Prepared {
        name: dataset_name(data),
        channels: ds.channels,
        train: make_windows(&train, rc.lookback, rc.horizon, rc.window_stride)?,
        val: make_windows(&val, rc.lookback, rc.horizon, rc.window_stride)?,
        test: make_windows(&test, rc.lookback, rc.horizon, rc.window_stride)?,
    })
}

#[derive(Debug, clap::Args)]
pub struct TrainExpertsArgs {
    /// Input series CSV
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory; writes buffer.tdcb into it
    #[arg(long)]
    pub out: PathBuf,
    /// Number of expert trajectories to record
    #[arg(long)]
    pub k: Option<usize>,
    /// Training epochs per expert (one parameter snapshot each)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Expert SGD learning rate
    #[arg(long)]
    pub lr: Option<f32>,
    /// Base seed; expert i trains with seed + i
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train experts on this many threads
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub common: Common,
}

pub fn train_experts(args: &TrainExpertsArgs) -> Result<(), CliError> {
    let mut rc = args.common.resolve()?;
    override_config!(rc, args, { k => expert_count, epochs => expert_epochs, lr => expert_lr });
    rc.echo();
    let prep = prepare(&args.data, &rc)?;
    let cfg = rc.model(prep.channels)?;
    let spec = rc.expert_spec();

    let trajectories = if args.workers <= 1 {
        let mut out = Vec::with_capacity(rc.expert_count);
        for i in 0..rc.expert_count {
            out.push(train_expert(&cfg, &prep.train, &spec, args.seed + i as u64)?);
            eprintln!("expert {}/{} done", i + 1, rc.expert_count);
        }
        out
    } else {
        train_experts_parallel(&cfg, &prep.train, &spec, args.seed, rc.expert_count, args.workers)?
    };

    let buffer = ExpertBuffer {
        fingerprint: buffer_fingerprint(&cfg, spec.epochs, spec.lr, prep.train.count),
        epochs: spec.epochs,
        param_len: cfg.param_count(),
        trajectories,
    };
    out_dir(&args.out)?;
    let path = args.out.join("buffer.tdcb");
    save_expert_buffer(&path, &buffer)?;
    eprintln!(
        "wrote {} ({} experts, {} epochs, {} params each)",
        path.display(),
        rc.expert_count,
        spec.epochs,
        cfg.param_count()
    );
    Ok(())
}

/// Each expert is seeded independently, so splitting them across threads
/// reproduces the sequential buffer bit for bit.
fn train_experts_parallel(
    cfg: &TsfeConfig,
    ws: &WindowSet,
    spec: &tsdc_core::trajectory::TrainSpec,
    base_seed: u64,
    count: usize,
    workers: usize,
) -> Result<Vec<tsdc_core::trajectory::ExpertTrajectory>, CliError> {
    let workers = workers.min(count.max(1));
    let mut slots: Vec<Option<tsdc_core::trajectory::ExpertTrajectory>> = (0..count).map(|_| None).collect();
    let results: Vec<Result<(usize, tsdc_core::trajectory::ExpertTrajectory), Error>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        let mut mine = Vec::new();
                        let mut i = w;
                        while i < count {
                            mine.push(
                                train_expert(cfg, ws, spec, base_seed + i as u64).map(|t| (i, t)),
                            );
                            i += workers;
                        }
                        mine
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("expert thread panicked"))
                .collect()
        });
    for r in results {
        let (i, t) = r?;
        slots[i] = Some(t);
    }
    Ok(slots.into_iter().map(|s| s.expect("every slot trained")).collect())
}

/// Initialization strategies for the synthetic set, mirrored from the core
/// enum so it can be picked on the command line.
#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum InitArg {
    RealSample,
    Gaussian,
}

impl From<InitArg> for InitKind {
    fn from(v: InitArg) -> Self {
        match v {
            InitArg::RealSample => InitKind::RealSample,
            InitArg::Gaussian => InitKind::Gaussian,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct CondenseArgs {
    /// Input series CSV
    #[arg(long)]
    pub data: PathBuf,
    /// Expert trajectory buffer from train-experts
    #[arg(long)]
    pub buffer: PathBuf,
    /// Run directory; writes condensed.tdcs and diag.jsonl into it
    #[arg(long)]
    pub out: PathBuf,
    /// Number of synthetic windows to learn
    #[arg(long)]
    pub n: Option<usize>,
    /// Outer optimization steps
    #[arg(long)]
    pub outer: Option<usize>,
    /// Inner student steps unrolled per outer step
    #[arg(long)]
    pub inner: Option<usize>,
    /// Expert epochs each matched segment spans
    #[arg(long)]
    pub expert_steps: Option<usize>,
    /// Inner student learning rate
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Learning rate on the synthetic windows themselves
    #[arg(long)]
    pub lr_syn: Option<f32>,
    /// How the synthetic set starts out
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Seed for initialization and every stochastic draw in the loop
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

pub fn condense_cmd(args: &CondenseArgs) -> Result<(), CliError> {
    let mut rc = args.common.resolve()?;
    override_config!(rc, args, {
        n => n_condensed, outer => steps, inner => inner_steps,
        expert_steps => pre_steps, alpha => inner_lr, lr_syn => outer_lr,
    });
    if let Some(kind) = args.init {
        rc.init = kind.into();
    }
    rc.echo();
    let prep = prepare(&args.data, &rc)?;
    let cfg = rc.model(prep.channels)?;

    let buffer = load_expert_buffer(&args.buffer)?;
    let expect = buffer_fingerprint(&cfg, rc.expert_epochs, rc.expert_lr, prep.train.count);
    if expect != buffer.fingerprint {
        return Err(CliError::Runtime(format!(
            "{}: expert buffer was trained under a different configuration or data split",
            args.buffer.display()
        )));
    }

    let init = init_condensed(&prep.train, rc.n_condensed, 0, rc.init, args.seed)?;
    let (cd, diagnostics) = condense(&cfg, &rc.condense_config(args.seed), init, &prep.train, &buffer)?;
    out_dir(&args.out)?;
    let set_path = args.out.join("condensed.tdcs");
    save_condensed(&set_path, &cd)?;
    let diag_path = args.out.join("diag.jsonl");
    let mut lines = String::new();
    for d in &diagnostics {
        lines.push_str(&serde_json::to_string(d).expect("diagnostics serialize"));
        lines.push('\n');
    }
    std::fs::write(&diag_path, lines)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", diag_path.display())))?;
    if let Some(last) = diagnostics.last() {
        eprintln!(
            "wrote {} ({} windows; final l_task {:.4}, l_fre {:.4}, l_tmm {})",
            set_path.display(),
            cd.count(),
            last.l_task,
            last.l_fre,
            last.l_tmm.map(|v| format!("{v:.4}")).unwrap_or_else(|| "skipped".into()),
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CoresetMethod {
    Random,
    KCenter,
    Herding,
}

#[derive(Debug, clap::Args)]
pub struct SelectCoresetArgs {
    /// Input series CSV
    #[arg(long)]
    pub data: PathBuf,
    /// Selection strategy
    #[arg(long, value_enum)]
    pub method: CoresetMethod,
    /// Number of windows to keep; defaults to the configured condensed size
    #[arg(long)]
    pub n: Option<usize>,
    /// Seed for the stochastic selectors; herding ignores it
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory; writes coreset_{method}.json into it
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

pub fn select_coreset(args: &SelectCoresetArgs) -> Result<(), CliError> {
    let mut rc = args.common.resolve()?;
    override_config!(rc, args, { n => n_condensed });
    rc.echo();
    let prep = prepare(&args.data, &rc)?;
    let count = rc.n_condensed;
    let (method, seed, indices) = match args.method {
        CoresetMethod::Random => ("random", Some(args.seed), random_coreset(&prep.train, count, args.seed)?),
        CoresetMethod::KCenter => ("k_center", Some(args.seed), k_center_greedy(&prep.train, count, args.seed)?),
        CoresetMethod::Herding => ("herding", None, herding(&prep.train, count)?),
    };
    out_dir(&args.out)?;
    let path = args.out.join(format!("coreset_{method}.json"));
    save_selection(
        &path,
        &Selection {
            method: method.into(),
            seed,
            indices,
        },
    )?;
    eprintln!("wrote {} ({} of {} windows, {method})", path.display(), count, prep.train.count);
    Ok(())
}

/// One scored downstream run, the unit the report command aggregates.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub dataset: String,
    /// Prediction length (forecast horizon).
    pub pl: usize,
    /// Windows in the training set the model saw.
    pub n_condensed: usize,
    pub seed: u64,
    pub mae: Option<f64>,
    pub mse: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub train_seconds: f64,
    pub num_params: usize,
}

/// What train-eval trains on: the full real split, a condensed file, or a
/// coreset selection over the real split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainSource {
    /// The full training split of --data
    Csv,
    /// A condensed window set (--train-path points at the .tdcs file)
    Tdcs,
    /// A coreset selection (--train-path points at the selection JSON)
    CoresetJson,
}

#[derive(Debug, clap::Args)]
pub struct TrainEvalArgs {
    /// Input series CSV
    #[arg(long)]
    pub data: PathBuf,
    /// What kind of training set to use
    #[arg(long, value_enum)]
    pub train_source: TrainSource,
    /// Artifact holding the training set; required unless the source is csv
    #[arg(long)]
    pub train_path: Option<PathBuf>,
    /// Prediction length (forecast horizon)
    #[arg(long)]
    pub pl: Option<usize>,
    /// Downstream training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Model init and shuffle seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Method label in the metrics record; defaults to the source kind
    #[arg(long)]
    pub method: Option<String>,
    /// Run directory; writes metrics_{method}_pl{pl}_s{seed}.json into it
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

pub fn train_eval(args: &TrainEvalArgs) -> Result<(), CliError> {
    let mut rc = args.common.resolve()?;
    override_config!(rc, args, { pl => horizon, epochs => train_epochs });
    rc.echo();
    let prep = prepare(&args.data, &rc)?;
    let cfg = rc.model(prep.channels)?;

    let (default_method, train_ws) = match (args.train_source, &args.train_path) {
        (TrainSource::Csv, None) => ("full".to_string(), prep.train.clone()),
        (TrainSource::Csv, Some(_)) => {
            return Err(CliError::Usage(
                "the csv source trains on --data; --train-path only applies to tdcs or coreset-json".into(),
            ))
        }
        (TrainSource::Tdcs, Some(path)) => {
            let cd = load_condensed(path)?;
            ("condensed".to_string(), cd.to_window_set(rc.lookback, rc.horizon)?)
        }
        (TrainSource::CoresetJson, Some(path)) => {
            let sel = load_selection(path)?;
            if let Some(&bad) = sel.indices.iter().find(|&&i| i >= prep.train.count) {
                return Err(CliError::Runtime(format!(
                    "{}: index {bad} out of range for {} training windows",
                    path.display(),
                    prep.train.count
                )));
            }
            (format!("coreset_{}", sel.method), prep.train.subset(&sel.indices))
        }
        (_, None) => {
            return Err(CliError::Usage(
                "--train-path is required when the source is tdcs or coreset-json".into(),
            ))
        }
    };

    let run = train_downstream(&cfg, &train_ws, &rc.train_spec(args.seed), args.seed)?;
    let method = args.method.clone().unwrap_or(default_method);
    let record = match evaluate(&cfg, &run.params, &prep.test, rc.eval_batch)? {
        EvalReport::Forecast(m) => MetricsRecord {
            method,
            dataset: prep.name.clone(),
            pl: rc.horizon,
            n_condensed: train_ws.count,
            seed: args.seed,
            mae: Some(m.mae),
            mse: Some(m.mse),
            accuracy: None,
            precision: None,
            train_seconds: run.train_seconds,
            num_params: run.num_params,
        },
        EvalReport::Classify(m) => MetricsRecord {
            method,
            dataset: prep.name.clone(),
            pl: rc.horizon,
            n_condensed: train_ws.count,
            seed: args.seed,
            mae: None,
            mse: None,
            accuracy: Some(m.accuracy),
            precision: Some(m.macro_precision),
            train_seconds: run.train_seconds,
            num_params: run.num_params,
        },
    };
    out_dir(&args.out)?;
    let path = args
        .out
        .join(format!("metrics_{}_pl{}_s{}.json", record.method, record.pl, record.seed));
    write_json(&path, &record)?;
    eprintln!(
        "wrote {} (trained on {} windows, test mse {})",
        path.display(),
        train_ws.count,
        record.mse.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into()),
    );
    Ok(())
}

#[derive(Debug, clap::Args)]
pub struct StreamEvalArgs {
    /// Input series CSV
    #[arg(long)]
    pub data: PathBuf,
    /// Condensed set replayed during the incremental stage
    #[arg(long)]
    pub replay: PathBuf,
    /// Model init and shuffle seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory; writes stream_s{seed}.json into it
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

pub fn stream_eval_cmd(args: &StreamEvalArgs) -> Result<(), CliError> {
    let rc = args.common.resolve()?;
    rc.echo();
    let ds = load_csv(&args.data, rc.has_header, rc.skip_first_col)?;
    // Standardize on the base regime's training stretch only; stage two has
    // not happened yet when those statistics are fixed.
    let (base, _) = tsdc_core::dataset::split_fraction(&ds, 0.7)?;
    let (base_train, _, _) = split_chronological(&base, (0.7, 0.1, 0.2))?;
    let stats = NormStats::compute(&base_train)?;
    let normalized = stats.apply(&ds);

    let cfg = rc.model(ds.channels)?;
    let splits = stream_splits(&normalized, rc.lookback, rc.horizon, rc.window_stride)?;
    let replay = load_condensed(&args.replay)?.to_window_set(rc.lookback, rc.horizon)?;
    let report = stream_eval(
        &cfg,
        &splits,
        &replay,
        &rc.train_spec(args.seed),
        &rc.train_spec(args.seed + 1),
        args.seed,
        rc.eval_batch,
    )?;
    out_dir(&args.out)?;
    let path = args.out.join(format!("stream_s{}.json", args.seed));
    write_json(&path, &report)?;
    eprintln!(
        "wrote {} (base mse: stage1 {:.6}, fine-tune {:.6}, replay {:.6})",
        path.display(),
        report.base_mse_stage1,
        report.fine_tune.base_mse,
        report.replay.base_mse,
    );
    Ok(())
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// Directory holding metrics*.json files from train-eval runs
    #[arg(long)]
    pub run_dir: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, serde::Serialize)]
struct ReportRow {
    method: String,
    pl: usize,
    n_condensed: usize,
    runs: usize,
    mse_mean: Option<f64>,
    mae_mean: Option<f64>,
    accuracy_mean: Option<f64>,
    precision_mean: Option<f64>,
    train_seconds_mean: f64,
    num_params: usize,
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn report(args: &ReportArgs) -> Result<(), CliError> {
    let rc = args.common.resolve()?;
    rc.echo();
    let entries = std::fs::read_dir(&args.run_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.run_dir.display())))?;
    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("metrics"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Runtime(format!(
            "{}: no metrics*.json files found",
            args.run_dir.display()
        )));
    }
    for path in &paths {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let record: MetricsRecord = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("{}: malformed metrics file: {e}", path.display())))?;
        records.push(record);
    }

    let mut groups: BTreeMap<(String, usize), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.method.clone(), r.pl)).or_default().push(r);
    }
    let rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|((method, pl), rs)| ReportRow {
            method,
            pl,
            n_condensed: rs[0].n_condensed,
            runs: rs.len(),
            mse_mean: mean_of(&rs.iter().map(|r| r.mse).collect::<Vec<_>>()),
            mae_mean: mean_of(&rs.iter().map(|r| r.mae).collect::<Vec<_>>()),
            accuracy_mean: mean_of(&rs.iter().map(|r| r.accuracy).collect::<Vec<_>>()),
            precision_mean: mean_of(&rs.iter().map(|r| r.precision).collect::<Vec<_>>()),
            train_seconds_mean: rs.iter().map(|r| r.train_seconds).sum::<f64>() / rs.len() as f64,
            num_params: rs[0].num_params,
        })
        .collect();

    let json_path = args.run_dir.join("report.json");
    write_json(&json_path, &rows)?;

    let mut csv = String::from(
        "method,pl,n_condensed,runs,mse_mean,mae_mean,accuracy_mean,precision_mean,train_seconds_mean,num_params\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.3},{}\n",
            r.method,
            r.pl,
            r.n_condensed,
            r.runs,
            csv_cell(r.mse_mean),
            csv_cell(r.mae_mean),
            csv_cell(r.accuracy_mean),
            csv_cell(r.precision_mean),
            r.train_seconds_mean,
            r.num_params,
        ));
    }
    let csv_path = args.run_dir.join("report.csv");
    std::fs::write(&csv_path, csv).map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;
    eprintln!(
        "wrote {} and {} ({} records, {} groups)",
        json_path.display(),
        csv_path.display(),
        records.len(),
        rows.len()
    );
    Ok(())
}

/// Scatter export of real versus condensed windows in the plane of the real
/// windows' top two principal directions.
#[derive(Debug, clap::Args)]
pub struct ProjectArgs {
    /// Input series CSV
    #[arg(long)]
    pub data: PathBuf,
    /// Condensed set to project alongside the real windows
    #[arg(long)]
    pub condensed: PathBuf,
    /// Run directory; writes projection.json into it
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, serde::Serialize)]
struct ProjectionOut {
    real: Vec<[f64; 2]>,
    condensed: Vec<[f64; 2]>,
}

pub fn project(args: &ProjectArgs) -> Result<(), CliError> {
    let rc = args.common.resolve()?;
    rc.echo();
    let prep = prepare(&args.data, &rc)?;
    let cd = load_condensed(&args.condensed)?;
    let dim = prep.train.window_len() * prep.train.channels;
    if cd.window_len() * cd.channels() != dim {
        return Err(CliError::Usage(format!(
            "condensed windows have {} values, real windows {}",
            cd.window_len() * cd.channels(),
            dim
        )));
    }
    let pca = tsdc_core::eval::pca_2d(&prep.train.windows, prep.train.count, dim, 200)?;
    let project_rows = |rows: &[f32], count: usize| -> Vec<[f64; 2]> {
        (0..count)
            .map(|r| {
                let row = &rows[r * dim..][..dim];
                let mut p = [0.0f64; 2];
                for (c, comp) in pca.components.iter().enumerate() {
                    p[c] = row
                        .iter()
                        .zip(&pca.mean)
                        .zip(comp)
                        .map(|((&x, &m), &v)| (x as f64 - m) * v)
                        .sum();
                }
                p
            })
            .collect()
    };
    let out = ProjectionOut {
        real: pca.projections.clone(),
        condensed: project_rows(&cd.values.data, cd.count()),
    };
    out_dir(&args.out)?;
    let path = args.out.join("projection.json");
    write_json(&path, &out)?;
    eprintln!(
        "wrote {} ({} real, {} condensed points)",
        path.display(),
        out.real.len(),
        out.condensed.len()
    );
    Ok(())
}
