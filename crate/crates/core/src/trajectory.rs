//! Expert trajectory training, the trajectory buffer container, curriculum
//! ranking, and the trajectory-matching loss.
//!
//! An expert is a model trained on the full real window set; its trajectory
//! is the sequence of flattened parameter snapshots taken after each epoch.
//! Buffers of expert trajectories are written to disk in a checksummed
//! binary container so condensation runs can reuse them. During
//! condensation a short pre-update run on the synthetic set is compared
//! against expert trajectory segments by cosine similarity, most similar
//! first, and the matching loss measures how far the end of an unrolled
//! synthetic training segment lands from the expert's endpoint, normalized
//! by the expert's own movement.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dataset::WindowSet;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::tsfe::{task_loss, ModelParams, ModelVars, TsfeConfig};

/// Plain SGD hyperparameters for real-data training runs.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

fn batch_labels(ws: &WindowSet, indices: &[usize]) -> Option<Vec<usize>> {
    ws.labels
        .as_ref()
        .map(|ls| indices.iter().map(|&i| ls[i] as usize).collect())
}

/// One SGD pass over `indices` in minibatches, updating `params` in place.
/// Returns the window-weighted mean batch loss.
fn run_epoch(
    cfg: &TsfeConfig,
    params: &mut ModelParams,
    ws: &WindowSet,
    indices: &[usize],
    lr: f32,
    batch_size: usize,
) -> Result<f32> {
    let mut total = 0.0f64;
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let m = ModelVars::stage(&mut tape, params, true);
        let window = crate::tsfe::stage_windows(&mut tape, ws, chunk);
        let labels = batch_labels(ws, chunk);
        let (loss, _) = task_loss(&mut tape, &m, cfg, window, labels.as_deref());
        let loss_value = tape.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                context: format!("training loss became {loss_value}"),
            });
        }
        total += loss_value as f64 * chunk.len() as f64;
        let roots = m.var_list();
        let grads = tape.differentiate(loss, &roots);
        let mut flat = params.flatten();
        let mut off = 0;
        for g in &grads {
            for (p, &gv) in flat[off..off + g.data.len()].iter_mut().zip(&g.data) {
                *p -= lr * gv;
            }
            off += g.data.len();
        }
        *params = ModelParams::unflatten(cfg, &flat)?;
    }
    Ok((total / indices.len() as f64) as f32)
}

/// Seeded minibatch SGD for `spec.epochs` epochs. Batches are reshuffled
/// each epoch; when `batch_size` covers the whole set the single batch keeps
/// identity order, so full-batch runs are order-deterministic regardless of
/// seed. `after_epoch` sees the epoch index, its mean loss, and the params.
pub fn train_model(
    cfg: &TsfeConfig,
    params: &mut ModelParams,
    ws: &WindowSet,
    spec: &TrainSpec,
    mut after_epoch: impl FnMut(usize, f32, &ModelParams),
) -> Result<()> {
    if ws.count == 0 {
        return Err(Error::Data("cannot train on an empty window set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.shuffle_seed);
    let mut indices: Vec<usize> = (0..ws.count).collect();
    for epoch in 0..spec.epochs {
        if spec.batch_size < ws.count {
            indices.shuffle(&mut rng);
        }
        let loss = run_epoch(cfg, params, ws, &indices, spec.lr, spec.batch_size)?;
        after_epoch(epoch, loss, params);
    }
    Ok(())
}

/// One expert: its init/shuffle seed and one flattened parameter snapshot
/// per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertTrajectory {
    pub seed: u64,
    pub snapshots: Vec<Vec<f32>>,
}

/// Train one expert from a seeded init, snapshotting after every epoch.
pub fn train_expert(
    cfg: &TsfeConfig,
    ws: &WindowSet,
    spec: &TrainSpec,
    seed: u64,
) -> Result<ExpertTrajectory> {
    let mut params = ModelParams::init(cfg, seed);
    let mut snapshots = Vec::with_capacity(spec.epochs);
    let spec = TrainSpec {
        shuffle_seed: seed,
        ..spec.clone()
    };
    train_model(cfg, &mut params, ws, &spec, |_, _, p| snapshots.push(p.flatten()))?;
    Ok(ExpertTrajectory { seed, snapshots })
}

/// A set of expert trajectories plus the fingerprint of the setup that
/// produced them.
#[derive(Clone, Debug)]
pub struct ExpertBuffer {
    pub fingerprint: [u8; 32],
    pub epochs: usize,
    pub param_len: usize,
    pub trajectories: Vec<ExpertTrajectory>,
}

/// SHA-256 over the canonical JSON of everything that shapes a trajectory:
/// the model config, the training spec sans seed, and the data dimensions.
pub fn buffer_fingerprint(cfg: &TsfeConfig, epochs: usize, lr: f32, window_count: usize) -> [u8; 32] {
    #[derive(serde::Serialize)]
    struct Ident<'a> {
        config: &'a TsfeConfig,
        epochs: usize,
        lr: f32,
        window_count: usize,
        channels: usize,
    }
    let json = serde_json::to_string(&Ident {
        config: cfg,
        epochs,
        lr,
        window_count,
        channels: cfg.channels,
    })
    .expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    h.finalize().into()
}

/// Train `k` experts with seeds `base_seed..base_seed+k`.
pub fn train_expert_buffer(
    cfg: &TsfeConfig,
    ws: &WindowSet,
    spec: &TrainSpec,
    k: usize,
    base_seed: u64,
) -> Result<ExpertBuffer> {
    let param_len = cfg.param_count();
    let mut trajectories = Vec::with_capacity(k);
    for i in 0..k {
        trajectories.push(train_expert(cfg, ws, spec, base_seed + i as u64)?);
    }
    Ok(ExpertBuffer {
        fingerprint: buffer_fingerprint(cfg, spec.epochs, spec.lr, ws.count),
        epochs: spec.epochs,
        param_len,
        trajectories,
    })
}

const BUFFER_MAGIC: &[u8; 4] = b"TDCB";
const BUFFER_VERSION: u32 = 1;

/// Write the buffer: magic, version, fingerprint, counts, then per
/// trajectory its seed and snapshots, all little-endian, closed by a CRC32
/// of every preceding byte.
pub fn save_expert_buffer(path: &Path, buf: &ExpertBuffer) -> Result<()> {
    let mut bytes: Vec<u8> = Vec::new();
    bytes.extend_from_slice(BUFFER_MAGIC);
    bytes.extend_from_slice(&BUFFER_VERSION.to_le_bytes());
    bytes.extend_from_slice(&buf.fingerprint);
    bytes.extend_from_slice(&(buf.trajectories.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(buf.epochs as u32).to_le_bytes());
    bytes.extend_from_slice(&(buf.param_len as u64).to_le_bytes());
    for tr in &buf.trajectories {
        assert_eq!(tr.snapshots.len(), buf.epochs, "trajectory length mismatch");
        bytes.extend_from_slice(&tr.seed.to_le_bytes());
        for snap in &tr.snapshots {
            assert_eq!(snap.len(), buf.param_len, "snapshot length mismatch");
            for v in snap {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
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
        return Err(Error::Data(format!("{}: truncated buffer file", path.display())));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Read a buffer written by `save_expert_buffer`, verifying magic, version
/// and checksum. Fingerprint agreement is the caller's check, since only the
/// caller knows the intended setup.
pub fn load_expert_buffer(path: &Path) -> Result<ExpertBuffer> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 + 4 + 32 + 4 + 4 + 8 + 4 {
        return Err(Error::Data(format!("{}: truncated buffer file", path.display())));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().expect("four bytes"));
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::ChecksumMismatch { path: path.to_path_buf() });
    }
    let mut rest = body;
    let magic = take(&mut rest, 4, path)?;
    if magic != BUFFER_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "TDCB",
        });
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, path)?.try_into().expect("four bytes"));
    if version != BUFFER_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            found: version,
            expected: BUFFER_VERSION,
        });
    }
    let fingerprint: [u8; 32] = take(&mut rest, 32, path)?.try_into().expect("32 bytes");
    let k = u32::from_le_bytes(take(&mut rest, 4, path)?.try_into().expect("four bytes")) as usize;
    let epochs = u32::from_le_bytes(take(&mut rest, 4, path)?.try_into().expect("four bytes")) as usize;
    let param_len = u64::from_le_bytes(take(&mut rest, 8, path)?.try_into().expect("eight bytes")) as usize;
    let mut trajectories = Vec::with_capacity(k);
    for _ in 0..k {
        let seed = u64::from_le_bytes(take(&mut rest, 8, path)?.try_into().expect("eight bytes"));
        let mut snapshots = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let raw = take(&mut rest, param_len * 4, path)?;
            let snap: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            snapshots.push(snap);
        }
        trajectories.push(ExpertTrajectory { seed, snapshots });
    }
    if !rest.is_empty() {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            rest.len()
        )));
    }
    Ok(ExpertBuffer {
        fingerprint,
        epochs,
        param_len,
        trajectories,
    })
}

/// Short full-batch descent on the synthetic set starting from `start`,
/// using the task loss only. Returns `steps + 1` flattened snapshots
/// including the start. No graph is retained; this is the cheap probe used
/// for curriculum ranking.
pub fn pre_update(
    cfg: &TsfeConfig,
    start: &[f32],
    ws: &WindowSet,
    steps: usize,
    alpha: f32,
) -> Result<Vec<Vec<f32>>> {
    let mut params = ModelParams::unflatten(cfg, start)?;
    let mut path = Vec::with_capacity(steps + 1);
    path.push(start.to_vec());
    let indices: Vec<usize> = (0..ws.count).collect();
    for _ in 0..steps {
        run_epoch(cfg, &mut params, ws, &indices, alpha, ws.count)?;
        path.push(params.flatten());
    }
    Ok(path)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity between two trajectory segments, each a list of
/// snapshots compared as one concatenated vector. Zero-norm segments score
/// zero.
pub fn trajectory_similarity(a: &[Vec<f32>], b: &[Vec<f32>]) -> f32 {
    assert_eq!(a.len(), b.len(), "segments must span the same number of snapshots");
    let mut num = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (sa, sb) in a.iter().zip(b) {
        assert_eq!(sa.len(), sb.len(), "snapshot lengths must match");
        num += dot(sa, sb);
        na += dot(sa, sa);
        nb += dot(sb, sb);
    }
    let denom = (na * nb).sqrt();
    if denom < 1e-30 {
        return 0.0;
    }
    (num / denom) as f32
}

/// Rank experts by similarity of their `[e0, e0+span]` trajectory segment to
/// the student path, most similar first; ties break toward the lower expert
/// index. Returns (expert index, similarity) pairs, a permutation of all
/// experts.
pub fn curriculum_rank(
    student: &[Vec<f32>],
    buffer: &ExpertBuffer,
    e0: usize,
    span: usize,
) -> Vec<(usize, f32)> {
    assert!(e0 + span < buffer.epochs + 1, "segment exceeds trajectory");
    let mut ranked: Vec<(usize, f32)> = buffer
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            let seg = &tr.snapshots[e0..=(e0 + span - 1).min(tr.snapshots.len() - 1)];
            (i, trajectory_similarity(student, seg))
        })
        .collect();
    ranked.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap_or(std::cmp::Ordering::Equal).then(x.0.cmp(&y.0)));
    ranked
}

/// Squared distance of the unrolled endpoint to the expert endpoint,
/// normalized by the expert's own squared movement over the segment:
/// ||end - target||^2 / ||start - target||^2. The endpoint lives on the
/// tape; start and target are plain snapshots. A segment whose endpoints
/// coincide (denominator under 1e-12) cannot normalize and is an error the
/// caller should skip.
pub fn trajectory_matching_loss(
    tape: &mut Tape,
    end: &[Var],
    start: &[f32],
    target: &[f32],
) -> Result<Var> {
    assert_eq!(start.len(), target.len(), "snapshot lengths must match");
    // Denominator first, mirroring the tape's per-tensor summation order.
    let mut denom = 0.0f32;
    {
        let mut off = 0;
        for &v in end {
            let n = tape.value(v).numel();
            let mut part = 0.0f32;
            for i in off..off + n {
                let d = start[i] - target[i];
                part += d * d;
            }
            denom += part;
            off += n;
        }
        assert_eq!(off, start.len(), "parameter count mismatch");
    }
    if (denom as f64) < 1e-12 {
        return Err(Error::DegenerateSegment { denom: denom as f64 });
    }
    let mut num: Option<Var> = None;
    let mut off = 0;
    for &v in end {
        let shape = tape.shape(v).to_vec();
        let n: usize = shape.iter().product();
        let tgt = tape.constant(crate::numerics::Tensor::new(shape, target[off..off + n].to_vec()));
        let d = tape.sub(v, tgt);
        let sq = tape.mul(d, d);
        let part = tape.sum_all(sq);
        num = Some(match num {
            Some(acc) => tape.add(acc, part),
            None => part,
        });
        off += n;
    }
    let num = num.expect("at least one parameter tensor");
    Ok(tape.scale(num, 1.0 / denom))
}
