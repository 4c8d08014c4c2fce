//! Coreset selection baselines: cheap ways to pick a small training set of
//! real windows, for comparison against learned condensation.
//!
//! All three selectors treat a window as one flat feature vector and return
//! indices into the window set, in pick order. Scores and distances
//! accumulate in f64 so ties are decided by value, not by drift.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::WindowSet;
use crate::error::{Error, Result};

/// A recorded pick: which method chose which windows.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Selection {
    pub method: String,
    pub seed: Option<u64>,
    pub indices: Vec<usize>,
}

pub fn save_selection(path: &Path, sel: &Selection) -> Result<()> {
    let json = serde_json::to_string_pretty(sel).expect("selection serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_selection(path: &Path) -> Result<Selection> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn check_count(ws: &WindowSet, count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("coreset needs at least one window".into()));
    }
    if count > ws.count {
        return Err(Error::Data(format!(
            "cannot select {count} of {} windows",
            ws.count
        )));
    }
    Ok(())
}

/// Uniform sample without replacement.
pub fn random_coreset(ws: &WindowSet, count: usize, seed: u64) -> Result<Vec<usize>> {
    check_count(ws, count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..ws.count).collect();
    // Partial Fisher-Yates: only the first `count` slots are needed.
    for i in 0..count {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(count);
    Ok(pool)
}

fn dist2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Farthest-point traversal: seed one center at random, then repeatedly add
/// the window farthest from its nearest center. Ties go to the lowest index.
pub fn k_center_greedy(ws: &WindowSet, count: usize, seed: u64) -> Result<Vec<usize>> {
    check_count(ws, count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..ws.count);
    let mut picked = vec![first];
    let mut nearest = vec![f64::INFINITY; ws.count];
    while picked.len() < count {
        let center = ws.window(*picked.last().expect("picked is non-empty"));
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..ws.count {
            let d = dist2(ws.window(i), center).min(nearest[i]);
            nearest[i] = d;
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        picked.push(best);
    }
    Ok(picked)
}

/// Kernel herding on raw window features. The running weight starts at the
/// feature mean; each pick takes the unpicked window with the largest inner
/// product against the weight (ties to the lowest index), then the weight
/// absorbs mean minus pick. The telescoped updates give the exact identity
/// mean(picked) - mean(all) = -(w_end - w_start) / count.
pub fn herding(ws: &WindowSet, count: usize) -> Result<Vec<usize>> {
    check_count(ws, count)?;
    let dim = ws.window_len() * ws.channels;
    let mut mu = vec![0.0f64; dim];
    for i in 0..ws.count {
        for (m, &v) in mu.iter_mut().zip(ws.window(i)) {
            *m += v as f64;
        }
    }
    for m in mu.iter_mut() {
        *m /= ws.count as f64;
    }

    let mut w = mu.clone();
    let mut taken = vec![false; ws.count];
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let mut best = usize::MAX;
        let mut best_score = f64::NEG_INFINITY;
        for i in 0..ws.count {
            if taken[i] {
                continue;
            }
            let score: f64 = w
                .iter()
                .zip(ws.window(i))
                .map(|(&wv, &x)| wv * x as f64)
                .sum();
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        taken[best] = true;
        picked.push(best);
        for ((wv, &m), &x) in w.iter_mut().zip(&mu).zip(ws.window(best)) {
            *wv += m - x as f64;
        }
    }
    Ok(picked)
}
