//! Evaluation: train fresh models on a chosen window set (real, coreset, or
//! condensed) and measure how well they do on held-out data.
//!
//! Metrics accumulate in f64 in window order, so results do not depend on
//! the evaluation batch size. The streaming scenario trains in two stages
//! and compares plain fine-tuning against fine-tuning with condensed replay
//! on how much of the first regime survives stage two.

use std::time::Instant;

use crate::dataset::{make_windows, split_chronological, split_fraction, TimeSeriesDataset, WindowSet};
use crate::error::{Error, Result};
use crate::numerics::Tape;
use crate::trajectory::{train_model, TrainSpec};
use crate::tsfe::{forward, stage_windows, HeadKind, ModelParams, ModelVars, TsfeConfig};

/// Forecast error over a window set.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct RegressionMetrics {
    pub mse: f64,
    pub mae: f64,
}

/// Label agreement over a window set. Macro precision averages per-class
/// precision over all classes; a class never predicted contributes zero.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
}

/// What `evaluate` measured, depending on the model head.
#[derive(Clone, Copy, Debug)]
pub enum EvalReport {
    Forecast(RegressionMetrics),
    Classify(ClassificationMetrics),
}

pub fn regression_metrics(pred: &[f32], truth: &[f32]) -> RegressionMetrics {
    assert_eq!(pred.len(), truth.len(), "prediction/truth lengths differ");
    assert!(!pred.is_empty(), "no values to score");
    let mut abs = 0.0f64;
    let mut sq = 0.0f64;
    for (&p, &t) in pred.iter().zip(truth) {
        let e = p as f64 - t as f64;
        abs += e.abs();
        sq += e * e;
    }
    let n = pred.len() as f64;
    RegressionMetrics {
        mse: sq / n,
        mae: abs / n,
    }
}

pub fn classification_metrics(truth: &[u32], pred: &[u32], num_classes: usize) -> ClassificationMetrics {
    assert_eq!(truth.len(), pred.len(), "prediction/truth lengths differ");
    assert!(!truth.is_empty(), "no labels to score");
    assert!(num_classes > 0, "need at least one class");
    let mut correct = 0usize;
    let mut predicted = vec![0usize; num_classes];
    let mut hits = vec![0usize; num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        correct += usize::from(t == p);
        predicted[p as usize] += 1;
        hits[p as usize] += usize::from(t == p);
    }
    let precision_sum: f64 = (0..num_classes)
        .map(|c| {
            if predicted[c] == 0 {
                0.0
            } else {
                hits[c] as f64 / predicted[c] as f64
            }
        })
        .sum();
    ClassificationMetrics {
        accuracy: correct as f64 / truth.len() as f64,
        macro_precision: precision_sum / num_classes as f64,
    }
}

/// Run the model over the whole set in batches and score it against the
/// stored targets or labels.
pub fn evaluate(cfg: &TsfeConfig, params: &ModelParams, ws: &WindowSet, batch: usize) -> Result<EvalReport> {
    if ws.count == 0 {
        return Err(Error::Data("cannot evaluate on an empty window set".into()));
    }
    let batch = batch.clamp(1, ws.count);
    let mut pred_all: Vec<f32> = Vec::new();
    let mut truth_all: Vec<f32> = Vec::new();
    let mut labels_pred: Vec<u32> = Vec::new();

    let mut start = 0;
    while start < ws.count {
        let end = (start + batch).min(ws.count);
        let indices: Vec<usize> = (start..end).collect();
        let mut tape = Tape::new();
        let staged = stage_windows(&mut tape, ws, &indices);
        let m = ModelVars::stage(&mut tape, params, false);
        match cfg.head {
            HeadKind::Forecast => {
                let x = tape.slice(staged, 1, 0, cfg.lookback);
                let y = tape.slice(staged, 1, cfg.lookback, cfg.horizon);
                let out = forward(&mut tape, &m, x, cfg);
                pred_all.extend_from_slice(&tape.value(out.prediction).data);
                truth_all.extend_from_slice(&tape.value(y).data);
            }
            HeadKind::Classify => {
                let out = forward(&mut tape, &m, staged, cfg);
                let logits = tape.value(out.prediction);
                for row in logits.data.chunks_exact(cfg.num_classes) {
                    let mut best = 0usize;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    labels_pred.push(best as u32);
                }
            }
        }
        start = end;
    }

    match cfg.head {
        HeadKind::Forecast => Ok(EvalReport::Forecast(regression_metrics(&pred_all, &truth_all))),
        HeadKind::Classify => {
            let truth = ws
                .labels
                .as_ref()
                .ok_or_else(|| Error::Data("classification eval needs labels".into()))?;
            Ok(EvalReport::Classify(classification_metrics(
                truth,
                &labels_pred,
                cfg.num_classes,
            )))
        }
    }
}

/// A model trained on some window set, with its cost accounting.
pub struct DownstreamRun {
    pub params: ModelParams,
    pub train_seconds: f64,
    pub num_params: usize,
    pub final_loss: f32,
}

/// Train a fresh model (seeded init) on the given windows.
pub fn train_downstream(
    cfg: &TsfeConfig,
    ws: &WindowSet,
    spec: &TrainSpec,
    init_seed: u64,
) -> Result<DownstreamRun> {
    let start = Instant::now();
    let mut params = ModelParams::init(cfg, init_seed);
    let mut final_loss = f32::NAN;
    train_model(cfg, &mut params, ws, spec, |_, loss, _| final_loss = loss)?;
    Ok(DownstreamRun {
        num_params: cfg.param_count(),
        params,
        train_seconds: start.elapsed().as_secs_f64(),
        final_loss,
    })
}

/// Same backbone, more operator layers.
pub fn deeper_variant(cfg: &TsfeConfig, n_operators: usize) -> TsfeConfig {
    TsfeConfig {
        n_operators,
        ..cfg.clone()
    }
}

/// Same backbone, wider embedding. Head count is unchanged, so the model
/// width must stay divisible by it.
pub fn wider_variant(cfg: &TsfeConfig, factor: usize) -> TsfeConfig {
    TsfeConfig {
        d_model: cfg.d_model * factor,
        ..cfg.clone()
    }
}

/// Chronological two-regime split for streaming: the first 70% of the
/// series is the base regime, the rest the incremental one, and each regime
/// splits 7:1:2 into train, validation and test stretches.
pub struct StreamSplits {
    pub base_train: WindowSet,
    pub base_val: WindowSet,
    pub base_test: WindowSet,
    pub inc_train: WindowSet,
    pub inc_val: WindowSet,
    pub inc_test: WindowSet,
}

pub fn stream_splits(
    ds: &TimeSeriesDataset,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<StreamSplits> {
    let (base, inc) = split_fraction(ds, 0.7)?;
    let (bt, bv, bs) = split_chronological(&base, (0.7, 0.1, 0.2))?;
    let (it, iv, is) = split_chronological(&inc, (0.7, 0.1, 0.2))?;
    Ok(StreamSplits {
        base_train: make_windows(&bt, lookback, horizon, stride)?,
        base_val: make_windows(&bv, lookback, horizon, stride)?,
        base_test: make_windows(&bs, lookback, horizon, stride)?,
        inc_train: make_windows(&it, lookback, horizon, stride)?,
        inc_val: make_windows(&iv, lookback, horizon, stride)?,
        inc_test: make_windows(&is, lookback, horizon, stride)?,
    })
}

/// One continuation strategy's standing after stage two.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct StreamArmReport {
    /// Base-regime test error after incremental training (forgetting).
    pub base_mse: f64,
    /// Incremental-regime test error (adaptation).
    pub inc_mse: f64,
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct StreamReport {
    /// Base-regime test error right after stage one.
    pub base_mse_stage1: f64,
    pub fine_tune: StreamArmReport,
    pub replay: StreamArmReport,
}

fn forecast_mse(cfg: &TsfeConfig, params: &ModelParams, ws: &WindowSet, batch: usize) -> Result<f64> {
    match evaluate(cfg, params, ws, batch)? {
        EvalReport::Forecast(m) => Ok(m.mse),
        EvalReport::Classify(_) => Err(Error::Config("streaming eval needs a forecast head".into())),
    }
}

/// Two-stage streaming comparison. Stage one trains on the base regime.
/// Stage two continues those same weights on the incremental regime, either
/// as-is (fine-tune) or with the replay windows mixed in (condensed replay).
pub fn stream_eval(
    cfg: &TsfeConfig,
    splits: &StreamSplits,
    replay: &WindowSet,
    stage1: &TrainSpec,
    stage2: &TrainSpec,
    init_seed: u64,
    eval_batch: usize,
) -> Result<StreamReport> {
    let stage1_run = train_downstream(cfg, &splits.base_train, stage1, init_seed)?;
    let base_mse_stage1 = forecast_mse(cfg, &stage1_run.params, &splits.base_test, eval_batch)?;

    let mut fine = stage1_run.params.clone();
    train_model(cfg, &mut fine, &splits.inc_train, stage2, |_, _, _| ())?;

    let mixed = splits.inc_train.concat(replay)?;
    let mut replayed = stage1_run.params.clone();
    train_model(cfg, &mut replayed, &mixed, stage2, |_, _, _| ())?;

    Ok(StreamReport {
        base_mse_stage1,
        fine_tune: StreamArmReport {
            base_mse: forecast_mse(cfg, &fine, &splits.base_test, eval_batch)?,
            inc_mse: forecast_mse(cfg, &fine, &splits.inc_test, eval_batch)?,
        },
        replay: StreamArmReport {
            base_mse: forecast_mse(cfg, &replayed, &splits.base_test, eval_batch)?,
            inc_mse: forecast_mse(cfg, &replayed, &splits.inc_test, eval_batch)?,
        },
    })
}

/// Two principal components of a row collection, for scatter export.
pub struct Pca2d {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub projections: Vec<[f64; 2]>,
}

fn matvec_cov(rows: &[f32], count: usize, dim: usize, mean: &[f64], v: &[f64]) -> Vec<f64> {
    // (X - mean)^T (X - mean) v / (count - 1), without forming the matrix.
    let mut out = vec![0.0f64; dim];
    for r in 0..count {
        let row = &rows[r * dim..][..dim];
        let mut dot = 0.0f64;
        for ((&x, &m), &vv) in row.iter().zip(mean).zip(v) {
            dot += (x as f64 - m) * vv;
        }
        for ((o, &x), &m) in out.iter_mut().zip(row).zip(mean) {
            *o += (x as f64 - m) * dot;
        }
    }
    let denom = (count - 1) as f64;
    for o in out.iter_mut() {
        *o /= denom;
    }
    out
}

fn normalize_in_place(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if norm > 1e-300 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn orthogonalize(v: &mut [f64], against: &[f64]) {
    let dot: f64 = v.iter().zip(against).map(|(&a, &b)| a * b).sum();
    for (x, &a) in v.iter_mut().zip(against) {
        *x -= dot * a;
    }
}

/// Power iteration for the top two covariance eigenvectors. `rows` is a
/// flat [count x dim] buffer. The sign convention makes each component's
/// largest-magnitude entry positive, so repeated runs agree.
pub fn pca_2d(rows: &[f32], count: usize, dim: usize, iters: usize) -> Result<Pca2d> {
    if count < 2 || dim == 0 || rows.len() != count * dim {
        return Err(Error::Data(format!(
            "pca needs [count x dim] with count >= 2, got count {count}, dim {dim}, len {}",
            rows.len()
        )));
    }
    let mut mean = vec![0.0f64; dim];
    for r in 0..count {
        for (m, &x) in mean.iter_mut().zip(&rows[r * dim..][..dim]) {
            *m += x as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }

    let mut components: [Vec<f64>; 2] = [vec![0.0; dim], vec![0.0; dim]];
    for c in 0..2 {
        // A fixed ramp start breaks symmetry deterministically and is never
        // the zero vector after orthogonalization against one component.
        let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + (i as f64) * 0.37).collect();
        if c == 1 {
            orthogonalize(&mut v, &components[0]);
        }
        normalize_in_place(&mut v);
        for _ in 0..iters {
            let mut next = matvec_cov(rows, count, dim, &mean, &v);
            if c == 1 {
                orthogonalize(&mut next, &components[0]);
            }
            if normalize_in_place(&mut next) < 1e-30 {
                // Degenerate direction (constant data): keep the zero vector.
                next = vec![0.0; dim];
            }
            v = next;
        }
        let pivot = (0..dim).fold(0usize, |b, i| if v[i].abs() > v[b].abs() { i } else { b });
        if v[pivot] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        components[c] = v;
    }

    let projections: Vec<[f64; 2]> = (0..count)
        .map(|r| {
            let row = &rows[r * dim..][..dim];
            let mut p = [0.0f64; 2];
            for (c, comp) in components.iter().enumerate() {
                p[c] = row
                    .iter()
                    .zip(&mean)
                    .zip(comp)
                    .map(|((&x, &m), &v)| (x as f64 - m) * v)
                    .sum();
            }
            p
        })
        .collect();
    Ok(Pca2d {
        mean,
        components,
        projections,
    })
}
