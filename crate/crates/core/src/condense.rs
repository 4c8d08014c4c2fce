//! Dataset condensation: learn a small synthetic window set whose training
//! behavior matches the real data.
//!
//! Each outer step unrolls `inner_steps` SGD updates of a student model on
//! the synthetic set, starting from a snapshot inside a sampled expert
//! trajectory segment. Because the backward pass emits adjoints as tape
//! nodes, the whole unrolled segment stays differentiable and the outer
//! loss can push gradients back into the synthetic values themselves. The
//! outer loss blends the mean inner task loss, the mean frequency-matching
//! loss against fresh real batches, and the trajectory-matching loss at the
//! segment end. Experts are consumed in curriculum order: a cheap
//! pre-update probe on the synthetic set is ranked against every expert's
//! segment, most similar first, and the ranking refreshes periodically.
//! The synthetic values follow SGD with momentum; labels, when present,
//! stay fixed at their class-balanced initialization.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::WindowSet;
use crate::decomp::{default_trend_kernel, frequency_matching_loss};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::trajectory::{curriculum_rank, pre_update, trajectory_matching_loss, ExpertBuffer};
use crate::tsfe::{forward, stage_windows, task_loss, ModelParams, ModelVars, TsfeConfig};

/// A learned synthetic window set. Values are [count, window_len, channels];
/// classification sets carry one fixed label per window.
#[derive(Clone, Debug)]
pub struct CondensedDataset {
    pub values: Tensor,
    pub labels: Option<Vec<u32>>,
}

impl CondensedDataset {
    pub fn count(&self) -> usize {
        self.values.shape[0]
    }

    pub fn window_len(&self) -> usize {
        self.values.shape[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape[2]
    }

    /// View as a window set for downstream training. The stored window
    /// length must equal lookback + horizon.
    pub fn to_window_set(&self, lookback: usize, horizon: usize) -> Result<WindowSet> {
        if lookback + horizon != self.window_len() {
            return Err(Error::Config(format!(
                "condensed windows are {} steps, lookback {lookback} + horizon {horizon} asked",
                self.window_len()
            )));
        }
        Ok(WindowSet {
            windows: self.values.data.clone(),
            count: self.count(),
            lookback,
            horizon,
            channels: self.channels(),
            labels: self.labels.clone(),
        })
    }
}

/// How to seed the synthetic values before optimization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Copy real windows, sampled without replacement (per class when
    /// labels are present).
    RealSample,
    /// Standard gaussian noise.
    Gaussian,
}

fn balanced_labels(count: usize, num_classes: usize) -> Vec<u32> {
    // count = q*classes + r: the first r classes get one extra window.
    let mut labels = Vec::with_capacity(count);
    for c in 0..num_classes {
        let share = count / num_classes + usize::from(c < count % num_classes);
        labels.extend(std::iter::repeat(c as u32).take(share));
    }
    labels
}

/// Build the initial synthetic set from the real windows.
pub fn init_condensed(
    ws: &WindowSet,
    count: usize,
    num_classes: usize,
    kind: InitKind,
    seed: u64,
) -> Result<CondensedDataset> {
    if count == 0 {
        return Err(Error::Config("synthetic set needs at least one window".into()));
    }
    let row = ws.window_len() * ws.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = ws.labels.as_ref().map(|_| balanced_labels(count, num_classes));
    let values = match kind {
        InitKind::Gaussian => Tensor::randn(vec![count, ws.window_len(), ws.channels], 1.0, &mut rng),
        InitKind::RealSample => {
            let mut data = Vec::with_capacity(count * row);
            match (&ws.labels, &labels) {
                (Some(real_labels), Some(want)) => {
                    for c in 0..num_classes as u32 {
                        let need = want.iter().filter(|&&l| l == c).count();
                        let mut pool: Vec<usize> = (0..ws.count).filter(|&i| real_labels[i] == c).collect();
                        if pool.len() < need {
                            return Err(Error::Data(format!(
                                "class {c} has {} real windows, synthetic set wants {need}",
                                pool.len()
                            )));
                        }
                        pool.shuffle(&mut rng);
                        for &i in &pool[..need] {
                            data.extend_from_slice(ws.window(i));
                        }
                    }
                }
                _ => {
                    if count > ws.count {
                        return Err(Error::Data(format!(
                            "cannot sample {count} of {} windows without replacement",
                            ws.count
                        )));
                    }
                    let mut pool: Vec<usize> = (0..ws.count).collect();
                    pool.shuffle(&mut rng);
                    pool.truncate(count);
                    for &i in &pool {
                        data.extend_from_slice(ws.window(i));
                    }
                }
            }
            Tensor::new(vec![count, ws.window_len(), ws.channels], data)
        }
    };
    Ok(CondensedDataset { values, labels })
}

const CONDENSED_MAGIC: &[u8; 4] = b"TDCS";
const CONDENSED_VERSION: u32 = 1;

/// Write a condensed set: magic, version, count, window_len, channels, a
/// label-presence flag, the f32 values, optional i32 labels, all
/// little-endian, closed by a CRC32 of every preceding byte.
pub fn save_condensed(path: &Path, cd: &CondensedDataset) -> Result<()> {
    let mut bytes: Vec<u8> = Vec::new();
    bytes.extend_from_slice(CONDENSED_MAGIC);
    bytes.extend_from_slice(&CONDENSED_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(cd.count() as u32).to_le_bytes());
    bytes.extend_from_slice(&(cd.window_len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(cd.channels() as u32).to_le_bytes());
    bytes.push(u8::from(cd.labels.is_some()));
    for v in &cd.values.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &cd.labels {
        assert_eq!(labels.len(), cd.count(), "one label per window");
        for &l in labels {
            bytes.extend_from_slice(&(l as i32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Data(format!("{}: truncated condensed file", path.display())));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Read a file written by `save_condensed`, verifying magic, version and
/// checksum.
pub fn load_condensed(path: &Path) -> Result<CondensedDataset> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 + 4 + 4 + 4 + 4 + 1 + 4 {
        return Err(Error::Data(format!("{}: truncated condensed file", path.display())));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().expect("four bytes"));
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::ChecksumMismatch { path: path.to_path_buf() });
    }
    let mut rest = body;
    if take(&mut rest, 4, path)? != CONDENSED_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "TDCS",
        });
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, path)?.try_into().expect("four bytes"));
    if version != CONDENSED_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            found: version,
            expected: CONDENSED_VERSION,
        });
    }
    let count = u32::from_le_bytes(take(&mut rest, 4, path)?.try_into().expect("four bytes")) as usize;
    let window_len = u32::from_le_bytes(take(&mut rest, 4, path)?.try_into().expect("four bytes")) as usize;
    let channels = u32::from_le_bytes(take(&mut rest, 4, path)?.try_into().expect("four bytes")) as usize;
    let has_labels = take(&mut rest, 1, path)?[0] != 0;
    let values: Vec<f32> = take(&mut rest, count * window_len * channels * 4, path)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect();
    let labels = if has_labels {
        let raw = take(&mut rest, count * 4, path)?;
        Some(
            raw.chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().expect("four bytes")) as u32)
                .collect(),
        )
    } else {
        None
    };
    if !rest.is_empty() {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            rest.len()
        )));
    }
    Ok(CondensedDataset {
        values: Tensor::new(vec![count, window_len, channels], values),
        labels,
    })
}

/// Condensation hyperparameters.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CondenseConfig {
    /// Outer optimization steps on the synthetic values.
    pub steps: usize,
    /// Unrolled student updates per outer step.
    pub inner_steps: usize,
    /// Student learning rate inside the unrolled segment.
    pub inner_lr: f32,
    /// Probe updates for curriculum ranking.
    pub pre_steps: usize,
    /// Outer loss weights: task, frequency, trajectory.
    pub lambda_task: f32,
    pub lambda_fre: f32,
    pub lambda_tmm: f32,
    /// SGD-with-momentum settings for the synthetic values.
    pub outer_lr: f32,
    pub outer_momentum: f32,
    /// Synthetic windows per inner batch (full batch when >= count).
    pub syn_batch: usize,
    /// Real windows drawn fresh per inner step for the frequency loss.
    pub real_batch: usize,
    /// Re-rank the curriculum every this many outer steps.
    pub rerank_every: usize,
    /// Moving-average width for the decomposition; None picks the default
    /// for the model's patch count.
    pub trend_kernel: Option<usize>,
    pub seed: u64,
}

impl CondenseConfig {
    pub fn new(seed: u64) -> Self {
        CondenseConfig {
            steps: 200,
            inner_steps: 16,
            inner_lr: 0.01,
            pre_steps: 2,
            lambda_task: 1.0,
            lambda_fre: 1.0,
            lambda_tmm: 1.0,
            outer_lr: 0.05,
            outer_momentum: 0.5,
            syn_batch: usize::MAX,
            real_batch: 32,
            rerank_every: 10,
            trend_kernel: None,
            seed,
        }
    }
}

/// Per-outer-step record for run logs. A step that had to skip its update
/// (degenerate expert segment twice in a row) reports no l_tmm/l_all.
#[derive(Clone, Debug, serde::Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub expert_index: usize,
    pub e0: usize,
    pub l_task: f32,
    pub l_fre: f32,
    pub l_tmm: Option<f32>,
    pub l_all: Option<f32>,
}

struct InnerRun {
    student: ModelVars,
    task_mean: Var,
    fre_mean: Option<Var>,
}

/// Unroll `inner_steps` student SGD updates on the synthetic tensor, keeping
/// every update differentiable with respect to `syn`. Returns the final
/// student and the per-step loss means.
#[allow(clippy::too_many_arguments)]
fn inner_train(
    tape: &mut Tape,
    cfg: &TsfeConfig,
    ccfg: &CondenseConfig,
    syn: Var,
    syn_labels: Option<&[u32]>,
    start: &[f32],
    real: &WindowSet,
    kernel: usize,
    rng: &mut ChaCha8Rng,
) -> Result<InnerRun> {
    let n = tape.shape(syn)[0];
    let start_params = ModelParams::unflatten(cfg, start)?;
    let mut student = ModelVars::stage(tape, &start_params, true);
    let mut task_terms = Vec::with_capacity(ccfg.inner_steps);
    let mut fre_terms = Vec::with_capacity(ccfg.inner_steps);
    let mut real_pool: Vec<usize> = (0..real.count).collect();

    for step in 0..ccfg.inner_steps {
        let (batch, labels): (Var, Option<Vec<usize>>) = if ccfg.syn_batch >= n {
            (syn, syn_labels.map(|ls| ls.iter().map(|&l| l as usize).collect()))
        } else {
            let mut pool: Vec<usize> = (0..n).collect();
            pool.shuffle(rng);
            pool.truncate(ccfg.syn_batch);
            let picked = tape.gather_rows(syn, &pool);
            (
                picked,
                syn_labels.map(|ls| pool.iter().map(|&i| ls[i] as usize).collect()),
            )
        };
        let (l_task, syn_feats) = task_loss(tape, &student, cfg, batch, labels.as_deref());
        let mut l_inner = l_task;
        if ccfg.lambda_fre > 0.0 {
            let take = ccfg.real_batch.min(real.count);
            real_pool.shuffle(rng);
            let real_batch = stage_windows(tape, real, &real_pool[..take]);
            let x = if cfg.horizon > 0 {
                tape.slice(real_batch, 1, 0, cfg.lookback)
            } else {
                real_batch
            };
            let real_feats = forward(tape, &student, x, cfg).features;
            let l_fre = frequency_matching_loss(tape, &real_feats, &syn_feats, kernel);
            fre_terms.push(l_fre);
            let weighted = tape.scale(l_fre, ccfg.lambda_fre);
            l_inner = tape.add(l_inner, weighted);
        }
        let check = tape.scalar_value(l_inner);
        if !check.is_finite() {
            return Err(Error::Diverged {
                context: format!("inner loss became {check} at unrolled step {step}"),
            });
        }
        task_terms.push(l_task);

        let roots = student.var_list();
        let grads = tape.grad_vars(l_inner, &roots);
        let next: Vec<Var> = roots
            .iter()
            .zip(&grads)
            .map(|(&p, &g)| {
                let step_v = tape.scale(g, ccfg.inner_lr);
                tape.sub(p, step_v)
            })
            .collect();
        student = ModelVars::from_var_list(cfg, &next);
    }

    let mean = |tape: &mut Tape, terms: &[Var]| -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t);
        }
        tape.scale(acc, 1.0 / terms.len() as f32)
    };
    let task_mean = mean(tape, &task_terms);
    let fre_mean = (!fre_terms.is_empty()).then(|| mean(tape, &fre_terms));
    Ok(InnerRun {
        student,
        task_mean,
        fre_mean,
    })
}

/// Outcome of one outer step: the gradient on the synthetic values (absent
/// when the step was skipped) and its diagnostics.
struct OuterStep {
    grad: Option<Vec<f32>>,
    diag: StepDiagnostics,
}

#[allow(clippy::too_many_arguments)]
fn condense_step(
    step: usize,
    cfg: &TsfeConfig,
    ccfg: &CondenseConfig,
    current: &CondensedDataset,
    real: &WindowSet,
    buffer: &ExpertBuffer,
    order: &[usize],
    kernel: usize,
    rng: &mut ChaCha8Rng,
) -> Result<OuterStep> {
    let expert_index = order[step % order.len()];
    let segment_max = buffer.epochs - ccfg.pre_steps - 1;

    // A degenerate segment (expert endpoints coincide) gets one fresh draw;
    // a second degeneracy skips this step's update.
    let mut last_err: Option<(usize, Error)> = None;
    for attempt in 0..2 {
        let e0 = rng.gen_range(0..=segment_max);
        let theta_start = &buffer.trajectories[expert_index].snapshots[e0];
        let theta_target = &buffer.trajectories[expert_index].snapshots[e0 + ccfg.pre_steps];

        let mut tape = Tape::new();
        let syn = tape.param(current.values.clone());
        let run = inner_train(
            &mut tape,
            cfg,
            ccfg,
            syn,
            current.labels.as_deref(),
            theta_start,
            real,
            kernel,
            rng,
        )?;
        let l_task = tape.scalar_value(run.task_mean);
        let l_fre = run.fre_mean.map(|v| tape.scalar_value(v)).unwrap_or(0.0);

        let l_tmm = if ccfg.lambda_tmm > 0.0 {
            match trajectory_matching_loss(&mut tape, &run.student.var_list(), theta_start, theta_target) {
                Ok(v) => Some(v),
                Err(e @ Error::DegenerateSegment { .. }) => {
                    last_err = Some((e0, e));
                    if attempt == 0 {
                        continue;
                    }
                    return Ok(OuterStep {
                        grad: None,
                        diag: StepDiagnostics {
                            step,
                            expert_index,
                            e0,
                            l_task,
                            l_fre,
                            l_tmm: None,
                            l_all: None,
                        },
                    });
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };

        let mut l_all = tape.scale(run.task_mean, ccfg.lambda_task);
        if let Some(fre) = run.fre_mean {
            let w = tape.scale(fre, ccfg.lambda_fre);
            l_all = tape.add(l_all, w);
        }
        if let Some(tmm) = l_tmm {
            let w = tape.scale(tmm, ccfg.lambda_tmm);
            l_all = tape.add(l_all, w);
        }
        let l_all_value = tape.scalar_value(l_all);
        if !l_all_value.is_finite() {
            return Err(Error::Diverged {
                context: format!("outer loss became {l_all_value} at step {step}"),
            });
        }
        let grad = tape.differentiate(l_all, &[syn]).remove(0);
        return Ok(OuterStep {
            grad: Some(grad.data),
            diag: StepDiagnostics {
                step,
                expert_index,
                e0,
                l_task,
                l_fre,
                l_tmm: l_tmm.map(|v| tape.scalar_value(v)),
                l_all: Some(l_all_value),
            },
        });
    }
    let (e0, err) = last_err.expect("loop exits early otherwise");
    Err(Error::Data(format!("unreachable: segment at {e0} not handled: {err}")))
}

/// Run the full condensation loop. The synthetic set starts from `init` and
/// is optimized for `ccfg.steps` outer steps against the real windows and
/// the expert buffer. Returns the final set and per-step diagnostics.
pub fn condense(
    cfg: &TsfeConfig,
    ccfg: &CondenseConfig,
    init: CondensedDataset,
    real: &WindowSet,
    buffer: &ExpertBuffer,
) -> Result<(CondensedDataset, Vec<StepDiagnostics>)> {
    cfg.validate()?;
    if buffer.param_len != cfg.param_count() {
        return Err(Error::FingerprintMismatch);
    }
    if buffer.trajectories.is_empty() {
        return Err(Error::Data("expert buffer is empty".into()));
    }
    if buffer.epochs < ccfg.pre_steps + 1 {
        return Err(Error::Config(format!(
            "trajectories have {} snapshots, segments need {}",
            buffer.epochs,
            ccfg.pre_steps + 1
        )));
    }
    if real.count == 0 {
        return Err(Error::Data("real window set is empty".into()));
    }
    let kernel = ccfg
        .trend_kernel
        .unwrap_or_else(|| default_trend_kernel(cfg.patches()));

    let mut rng = ChaCha8Rng::seed_from_u64(ccfg.seed);
    let mut current = init;
    let mut velocity = vec![0.0f32; current.values.data.len()];
    let mut order: Vec<usize> = (0..buffer.trajectories.len()).collect();
    let mut diagnostics = Vec::with_capacity(ccfg.steps);

    for step in 0..ccfg.steps {
        if step % ccfg.rerank_every.max(1) == 0 {
            // Probe from the first expert's segment start, then rank all
            // expert segments against the probe path.
            let e0 = rng.gen_range(0..=buffer.epochs - ccfg.pre_steps - 1);
            let ws = current.to_window_set(cfg.lookback, cfg.horizon)?;
            let probe = pre_update(
                cfg,
                &buffer.trajectories[0].snapshots[e0],
                &ws,
                ccfg.pre_steps,
                ccfg.inner_lr,
            )?;
            let ranked = curriculum_rank(&probe[1..], buffer, e0, ccfg.pre_steps);
            order = ranked.into_iter().map(|(i, _)| i).collect();
        }
        let outcome = condense_step(step, cfg, ccfg, &current, real, buffer, &order, kernel, &mut rng)?;
        if let Some(grad) = outcome.grad {
            for ((v, g), x) in velocity.iter_mut().zip(&grad).zip(current.values.data.iter_mut()) {
                *v = ccfg.outer_momentum * *v + g;
                *x -= ccfg.outer_lr * *v;
            }
        }
        diagnostics.push(outcome.diag);
    }
    Ok((current, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_windows, TimeSeriesDataset};
    use crate::numerics::check::fd_partial;
    use crate::numerics::ops::NormAxes;
    use crate::trajectory::{train_expert_buffer, TrainSpec};
    use crate::tsfe::HeadKind;

    fn tiny_cfg() -> TsfeConfig {
        TsfeConfig {
            lookback: 8,
            horizon: 2,
            channels: 2,
            patch_len: 4,
            patch_stride: 2,
            d_model: 8,
            num_heads: 2,
            n_operators: 1,
            head: HeadKind::Forecast,
            num_classes: 0,
            norm: NormAxes::PerSample,
            use_pos_enc: true,
        }
    }

    fn tiny_real(cfg: &TsfeConfig) -> WindowSet {
        let t = 60;
        let values: Vec<f32> = (0..t * cfg.channels)
            .map(|i| {
                let step = (i / cfg.channels) as f32;
                let ch = (i % cfg.channels) as f32;
                (0.31 * step + 0.5 * ch).sin() + 0.05 * (0.05 * step).cos()
            })
            .collect();
        let ds = TimeSeriesDataset::new(values, cfg.channels);
        make_windows(&ds, cfg.lookback, cfg.horizon, 2).unwrap()
    }

    fn tiny_buffer(cfg: &TsfeConfig, real: &WindowSet) -> ExpertBuffer {
        let spec = TrainSpec {
            epochs: 4,
            lr: 0.05,
            batch_size: 8,
            shuffle_seed: 0,
        };
        train_expert_buffer(cfg, real, &spec, 2, 100).unwrap()
    }

    fn tiny_ccfg(steps: usize) -> CondenseConfig {
        CondenseConfig {
            steps,
            inner_steps: 2,
            inner_lr: 0.01,
            pre_steps: 2,
            rerank_every: 4,
            real_batch: 8,
            seed: 17,
            ..CondenseConfig::new(17)
        }
    }

    #[test]
    fn balanced_labels_cover_all_classes() {
        assert_eq!(balanced_labels(7, 3), vec![0, 0, 0, 1, 1, 2, 2]);
        assert_eq!(balanced_labels(3, 3), vec![0, 1, 2]);
    }

    #[test]
    fn real_sample_init_copies_distinct_windows() {
        let cfg = tiny_cfg();
        let real = tiny_real(&cfg);
        let cd = init_condensed(&real, 5, 0, InitKind::RealSample, 3).unwrap();
        assert_eq!(cd.values.shape, vec![5, 10, 2]);
        let row = real.window_len() * real.channels;
        let mut seen = std::collections::HashSet::new();
        for i in 0..5 {
            let window = &cd.values.data[i * row..][..row];
            let pos = (0..real.count).find(|&j| real.window(j) == window);
            assert!(pos.is_some(), "window {i} not found among real windows");
            assert!(seen.insert(pos.unwrap()), "window {i} sampled twice");
        }
        assert!(init_condensed(&real, real.count + 1, 0, InitKind::RealSample, 3).is_err());
    }

    #[test]
    fn gaussian_init_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let real = tiny_real(&cfg);
        let a = init_condensed(&real, 4, 0, InitKind::Gaussian, 9).unwrap();
        let b = init_condensed(&real, 4, 0, InitKind::Gaussian, 9).unwrap();
        let c = init_condensed(&real, 4, 0, InitKind::Gaussian, 10).unwrap();
        assert_eq!(a.values.data, b.values.data);
        assert_ne!(a.values.data, c.values.data);
    }

    #[test]
    fn condensed_file_roundtrip_is_bit_exact() {
        let values = Tensor::new(vec![2, 3, 1], vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.0]);
        let cd = CondensedDataset {
            values,
            labels: Some(vec![1, 0]),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.tdcs");
        save_condensed(&path, &cd).unwrap();
        let back = load_condensed(&path).unwrap();
        assert_eq!(back.values.shape, cd.values.shape);
        assert_eq!(
            back.values.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            cd.values.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.labels, cd.labels);

        // Flip one payload byte.
        let mut bad = std::fs::read(&path).unwrap();
        bad[20] ^= 0x10;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_condensed(&path), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn window_set_view_checks_lengths() {
        let cd = CondensedDataset {
            values: Tensor::zeros(vec![2, 10, 1]),
            labels: None,
        };
        assert!(cd.to_window_set(8, 2).is_ok());
        assert!(cd.to_window_set(8, 3).is_err());
    }

    #[test]
    fn zero_inner_lr_keeps_student_fixed_and_tmm_at_one() {
        let cfg = tiny_cfg();
        let real = tiny_real(&cfg);
        let buffer = tiny_buffer(&cfg, &real);
        let cd = init_condensed(&real, 4, 0, InitKind::RealSample, 3).unwrap();

        let mut tape = Tape::new();
        let syn = tape.param(cd.values.clone());
        let mut ccfg = tiny_ccfg(1);
        ccfg.inner_lr = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let start = buffer.trajectories[0].snapshots[0].clone();
        let run = inner_train(&mut tape, &cfg, &ccfg, syn, None, &start, &real, 5, &mut rng).unwrap();
        let end_flat: Vec<f32> = run
            .student
            .var_list()
            .iter()
            .flat_map(|&v| tape.value(v).data.clone())
            .collect();
        assert_eq!(end_flat, start, "zero step size must not move the student");

        let target = &buffer.trajectories[0].snapshots[2];
        let l = trajectory_matching_loss(&mut tape, &run.student.var_list(), &start, target).unwrap();
        assert!((tape.scalar_value(l) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn condense_runs_deterministically_and_moves_the_set() {
        let cfg = tiny_cfg();
        let real = tiny_real(&cfg);
        let buffer = tiny_buffer(&cfg, &real);
        let init = init_condensed(&real, 4, 0, InitKind::RealSample, 3).unwrap();

        let (a, diag_a) = condense(&cfg, &tiny_ccfg(3), init.clone(), &real, &buffer).unwrap();
        let (b, _) = condense(&cfg, &tiny_ccfg(3), init.clone(), &real, &buffer).unwrap();
        assert_eq!(a.values.data, b.values.data, "same seed, same result");
        assert_ne!(a.values.data, init.values.data, "optimization must move the set");
        assert_eq!(diag_a.len(), 3);
        assert!(diag_a.iter().all(|d| d.l_all.is_some()));
        assert!(diag_a.iter().all(|d| d.l_tmm.is_some()));
        assert!(diag_a.iter().all(|d| d.e0 + 2 < buffer.epochs + 1));
    }

    #[test]
    fn degenerate_expert_segments_skip_the_update() {
        let cfg = tiny_cfg();
        let real = tiny_real(&cfg);
        let init = init_condensed(&real, 4, 0, InitKind::RealSample, 3).unwrap();
        // Every snapshot identical: every segment is degenerate.
        let frozen = ModelParams::init(&cfg, 5).flatten();
        let buffer = ExpertBuffer {
            fingerprint: [0; 32],
            epochs: 4,
            param_len: frozen.len(),
            trajectories: vec![crate::trajectory::ExpertTrajectory {
                seed: 0,
                snapshots: vec![frozen; 4],
            }],
        };
        let (out, diag) = condense(&cfg, &tiny_ccfg(2), init.clone(), &real, &buffer).unwrap();
        assert_eq!(out.values.data, init.values.data, "skipped steps must not move the set");
        assert!(diag.iter().all(|d| d.l_tmm.is_none() && d.l_all.is_none()));
    }

    #[test]
    fn outer_gradient_matches_finite_differences() {
        // The full pipeline: unrolled inner training plus all three loss
        // terms, differentiated back to the synthetic values.
        let cfg = tiny_cfg();
        let real = tiny_real(&cfg);
        let buffer = tiny_buffer(&cfg, &real);
        let init = init_condensed(&real, 4, 0, InitKind::RealSample, 3).unwrap();
        let ccfg = tiny_ccfg(1);
        let start = buffer.trajectories[0].snapshots[0].clone();
        let target = buffer.trajectories[0].snapshots[2].clone();

        let eval = |values: &[f32]| -> f32 {
            let mut tape = Tape::new();
            let syn = tape.param(Tensor::new(vec![4, 10, 2], values.to_vec()));
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let run = inner_train(&mut tape, &cfg, &ccfg, syn, None, &start, &real, 5, &mut rng).unwrap();
            let tmm = trajectory_matching_loss(&mut tape, &run.student.var_list(), &start, &target).unwrap();
            let mut l = run.task_mean;
            let fre = run.fre_mean.unwrap();
            l = tape.add(l, fre);
            l = tape.add(l, tmm);
            tape.scalar_value(l)
        };

        // Analytic gradient from one taped run.
        let mut tape = Tape::new();
        let syn = tape.param(Tensor::new(vec![4, 10, 2], init.values.data.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let run = inner_train(&mut tape, &cfg, &ccfg, syn, None, &start, &real, 5, &mut rng).unwrap();
        let tmm = trajectory_matching_loss(&mut tape, &run.student.var_list(), &start, &target).unwrap();
        let mut l = run.task_mean;
        let fre = run.fre_mean.unwrap();
        l = tape.add(l, fre);
        l = tape.add(l, tmm);
        let grad = tape.differentiate(l, &[syn]).remove(0);

        // Small-magnitude coordinates are noise-limited: one loss eval is a
        // whole unrolled training in f32, so the FD quotient scatters. Ask
        // for tight agreement on 95% of coords and loose agreement on all.
        let coords: Vec<usize> = (0..20).map(|i| i * 4).collect();
        let mut tight = 0;
        for &coord in &coords {
            let an = grad.data[coord] as f64;
            let rel = [1e-3f32, 3e-3, 1e-2, 3e-2]
                .iter()
                .map(|&eps| {
                    let fd = fd_partial(&eval, &init.values.data, coord, eps);
                    (an - fd).abs() / (fd.abs() + 1e-8)
                })
                .fold(f64::INFINITY, f64::min);
            assert!(rel < 2e-2, "coord {coord}: analytic {an} rel {rel}");
            tight += usize::from(rel < 2e-3);
        }
        assert!(
            tight * 100 >= coords.len() * 95,
            "only {tight}/{} coords within 2e-3",
            coords.len()
        );
    }
}
