//! Patch-attention feature extractor for multivariate series.
//!
//! Each channel passes independently through shared weights: the input
//! [batch, lookback, channels] is folded to [batch*channels, lookback] rows,
//! cut into overlapping patches, linearly embedded, offset by a learned
//! positional encoding, and refined by a stack of operator layers (multi-head
//! self-attention over patches, then a position-wise linear map, each with a
//! residual connection and affine feature normalization). A forecast head
//! maps the flattened patch features of each channel to the horizon; a
//! classification head pools patches and channels into class logits.
//!
//! The per-operator feature maps [batch, channels, patches, d_model] are part
//! of the public output: downstream losses match them between datasets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::patch_count;
use crate::numerics::ops::{self, NormAxes};
use crate::numerics::{Tape, Tensor, Var};

/// Output head: map patch features to a forecast or to class logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Forecast,
    Classify,
}

/// Model hyperparameters. `lookback` is the input length per channel; for
/// classification sets the whole stored window is the input and `horizon`
/// is 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsfeConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub n_operators: usize,
    pub head: HeadKind,
    pub num_classes: usize,
    pub norm: NormAxes,
    pub use_pos_enc: bool,
}

impl TsfeConfig {
    /// Forecasting defaults; shrink `d_model`/`num_heads` for small studies.
    pub fn forecast(lookback: usize, horizon: usize, channels: usize) -> Self {
        TsfeConfig {
            lookback,
            horizon,
            channels,
            patch_len: 16,
            patch_stride: 8,
            d_model: 128,
            num_heads: 16,
            n_operators: 3,
            head: HeadKind::Forecast,
            num_classes: 0,
            norm: NormAxes::PerSample,
            use_pos_enc: true,
        }
    }

    /// Classification over univariate rows of length `series_len`.
    pub fn classify(series_len: usize, num_classes: usize) -> Self {
        TsfeConfig {
            lookback: series_len,
            horizon: 0,
            channels: 1,
            patch_len: 16,
            patch_stride: 8,
            d_model: 128,
            num_heads: 16,
            n_operators: 3,
            head: HeadKind::Classify,
            num_classes,
            norm: NormAxes::PerSample,
            use_pos_enc: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_stride == 0 || self.patch_len < self.patch_stride {
            return Err(Error::Config(format!(
                "need 1 <= stride <= patch_len, got stride {} patch_len {}",
                self.patch_stride, self.patch_len
            )));
        }
        if self.lookback < self.patch_len {
            return Err(Error::Config(format!(
                "lookback {} shorter than patch_len {}",
                self.lookback, self.patch_len
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.n_operators == 0 {
            return Err(Error::Config("need at least one operator layer".into()));
        }
        match self.head {
            HeadKind::Forecast => {
                if self.horizon == 0 {
                    return Err(Error::Config("forecast head needs horizon >= 1".into()));
                }
            }
            HeadKind::Classify => {
                if self.num_classes < 2 {
                    return Err(Error::Config("classify head needs at least 2 classes".into()));
                }
                if self.horizon != 0 {
                    return Err(Error::Config("classify head expects horizon 0".into()));
                }
                if self.channels != 1 {
                    return Err(Error::Config("classify head expects univariate rows".into()));
                }
            }
        }
        Ok(())
    }

    /// Patches per channel, including the replicate-padded tail patch.
    pub fn patches(&self) -> usize {
        patch_count(self.lookback, self.patch_len, self.patch_stride)
    }

    /// Stored window length: lookback plus horizon.
    pub fn window_len(&self) -> usize {
        self.lookback + self.horizon
    }

    fn head_dims(&self) -> (usize, usize) {
        match self.head {
            HeadKind::Forecast => (self.patches() * self.d_model, self.horizon),
            HeadKind::Classify => (self.d_model, self.num_classes),
        }
    }

    /// Total scalar parameter count, matching `ModelParams::flatten`.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let mut n = self.patch_len * d + d;
        if self.use_pos_enc {
            n += self.patches() * d;
        }
        // Per operator: four d x d attention maps plus output bias, one
        // d x d position-wise map plus bias, two affine norms.
        n += self.n_operators * (4 * d * d + d + d * d + d + 4 * d);
        let (hin, hout) = self.head_dims();
        n + hin * hout + hout
    }
}

/// One operator layer's weights.
#[derive(Clone, Debug)]
pub struct OperatorParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub w_f: Tensor,
    pub b_f: Tensor,
    pub norm1_gain: Tensor,
    pub norm1_shift: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_shift: Tensor,
}

/// Full model state. Flattening order is fixed: patch embedding weight and
/// bias, positional encoding (when enabled), then per operator w_q, w_k,
/// w_v, w_o, b_o, w_f, b_f, norm1 gain/shift, norm2 gain/shift, then the
/// head weight and bias. `unflatten` inverts `flatten` bit-exactly.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub pos_enc: Option<Tensor>,
    pub operators: Vec<OperatorParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ModelParams {
    /// Seeded initialization: weights uniform in +-1/sqrt(fan_in), biases
    /// and norm shifts zero, norm gains one, positional encoding gaussian
    /// with std 0.02. Draw order equals the flattening order.
    pub fn init(cfg: &TsfeConfig, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, d, p) = (cfg.patch_len, cfg.d_model, cfg.patches());
        let embed_w = Tensor::rand_uniform(vec![l, d], 1.0 / (l as f32).sqrt(), &mut rng);
        let embed_b = Tensor::zeros(vec![d]);
        let pos_enc = cfg
            .use_pos_enc
            .then(|| Tensor::randn(vec![p, d], 0.02, &mut rng));
        let wb = 1.0 / (d as f32).sqrt();
        let operators = (0..cfg.n_operators)
            .map(|_| OperatorParams {
                w_q: Tensor::rand_uniform(vec![d, d], wb, &mut rng),
                w_k: Tensor::rand_uniform(vec![d, d], wb, &mut rng),
                w_v: Tensor::rand_uniform(vec![d, d], wb, &mut rng),
                w_o: Tensor::rand_uniform(vec![d, d], wb, &mut rng),
                b_o: Tensor::zeros(vec![d]),
                w_f: Tensor::rand_uniform(vec![d, d], wb, &mut rng),
                b_f: Tensor::zeros(vec![d]),
                norm1_gain: Tensor::full(vec![d], 1.0),
                norm1_shift: Tensor::zeros(vec![d]),
                norm2_gain: Tensor::full(vec![d], 1.0),
                norm2_shift: Tensor::zeros(vec![d]),
            })
            .collect();
        let (hin, hout) = cfg.head_dims();
        let head_w = Tensor::rand_uniform(vec![hin, hout], 1.0 / (hin as f32).sqrt(), &mut rng);
        let head_b = Tensor::zeros(vec![hout]);
        ModelParams {
            embed_w,
            embed_b,
            pos_enc,
            operators,
            head_w,
            head_b,
        }
    }

    fn tensor_list(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed_w, &self.embed_b];
        if let Some(pe) = &self.pos_enc {
            out.push(pe);
        }
        for op in &self.operators {
            out.extend([
                &op.w_q,
                &op.w_k,
                &op.w_v,
                &op.w_o,
                &op.b_o,
                &op.w_f,
                &op.b_f,
                &op.norm1_gain,
                &op.norm1_shift,
                &op.norm2_gain,
                &op.norm2_shift,
            ]);
        }
        out.extend([&self.head_w, &self.head_b]);
        out
    }

    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for t in self.tensor_list() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn unflatten(cfg: &TsfeConfig, flat: &[f32]) -> Result<ModelParams> {
        if flat.len() != cfg.param_count() {
            return Err(Error::Data(format!(
                "parameter vector has {} entries, config needs {}",
                flat.len(),
                cfg.param_count()
            )));
        }
        let (l, d, p) = (cfg.patch_len, cfg.d_model, cfg.patches());
        let mut pos = 0usize;
        let mut take = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape, flat[pos..pos + n].to_vec());
            pos += n;
            t
        };
        let embed_w = take(vec![l, d]);
        let embed_b = take(vec![d]);
        let pos_enc = cfg.use_pos_enc.then(|| take(vec![p, d]));
        let operators = (0..cfg.n_operators)
            .map(|_| OperatorParams {
                w_q: take(vec![d, d]),
                w_k: take(vec![d, d]),
                w_v: take(vec![d, d]),
                w_o: take(vec![d, d]),
                b_o: take(vec![d]),
                w_f: take(vec![d, d]),
                b_f: take(vec![d]),
                norm1_gain: take(vec![d]),
                norm1_shift: take(vec![d]),
                norm2_gain: take(vec![d]),
                norm2_shift: take(vec![d]),
            })
            .collect();
        let (hin, hout) = cfg.head_dims();
        let head_w = take(vec![hin, hout]);
        let head_b = take(vec![hout]);
        Ok(ModelParams {
            embed_w,
            embed_b,
            pos_enc,
            operators,
            head_w,
            head_b,
        })
    }
}

/// One operator layer staged on a tape.
#[derive(Clone, Copy, Debug)]
pub struct OperatorVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub w_f: Var,
    pub b_f: Var,
    pub norm1_gain: Var,
    pub norm1_shift: Var,
    pub norm2_gain: Var,
    pub norm2_shift: Var,
}

/// Model parameters staged on a tape. The flat ordering of `var_list` and
/// `from_var_list` equals `ModelParams::flatten`.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed_w: Var,
    pub embed_b: Var,
    pub pos_enc: Option<Var>,
    pub operators: Vec<OperatorVars>,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    /// Put every parameter tensor on the tape. Trainable parameters become
    /// gradient roots; frozen ones are constants.
    pub fn stage(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let vars: Vec<Var> = params.tensor_list().into_iter().map(&mut put).collect();
        Self::from_var_list_with(params.pos_enc.is_some(), params.operators.len(), &vars)
    }

    /// Rebuild the structured view from a canonical-order var list.
    pub fn from_var_list(cfg: &TsfeConfig, vars: &[Var]) -> ModelVars {
        Self::from_var_list_with(cfg.use_pos_enc, cfg.n_operators, vars)
    }

    fn from_var_list_with(has_pos: bool, n_ops: usize, vars: &[Var]) -> ModelVars {
        let expect = 2 + usize::from(has_pos) + 11 * n_ops + 2;
        assert_eq!(vars.len(), expect, "var list length mismatch");
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked above");
        let embed_w = next();
        let embed_b = next();
        let pos_enc = has_pos.then(&mut next);
        let operators = (0..n_ops)
            .map(|_| OperatorVars {
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                b_o: next(),
                w_f: next(),
                b_f: next(),
                norm1_gain: next(),
                norm1_shift: next(),
                norm2_gain: next(),
                norm2_shift: next(),
            })
            .collect();
        let head_w = next();
        let head_b = next();
        ModelVars {
            embed_w,
            embed_b,
            pos_enc,
            operators,
            head_w,
            head_b,
        }
    }

    /// Canonical flat order, inverse of `from_var_list`.
    pub fn var_list(&self) -> Vec<Var> {
        let mut out = vec![self.embed_w, self.embed_b];
        if let Some(pe) = self.pos_enc {
            out.push(pe);
        }
        for op in &self.operators {
            out.extend([
                op.w_q,
                op.w_k,
                op.w_v,
                op.w_o,
                op.b_o,
                op.w_f,
                op.b_f,
                op.norm1_gain,
                op.norm1_shift,
                op.norm2_gain,
                op.norm2_shift,
            ]);
        }
        out.extend([self.head_w, self.head_b]);
        out
    }

    /// Copy current tape values back into an owned parameter struct.
    pub fn read_back(&self, tape: &Tape, cfg: &TsfeConfig) -> ModelParams {
        let flat: Vec<f32> = self
            .var_list()
            .iter()
            .flat_map(|&v| tape.value(v).data.iter().copied())
            .collect();
        ModelParams::unflatten(cfg, &flat).expect("staged model matches its config")
    }
}

/// Features per operator layer plus the head output.
pub struct ForwardOutput {
    /// One entry per operator: [batch, channels, patches, d_model].
    pub features: Vec<Var>,
    /// Forecast: [batch, horizon, channels]. Classify: [batch, classes].
    pub prediction: Var,
}

fn self_attention(tape: &mut Tape, op: &OperatorVars, h: Var, cfg: &TsfeConfig) -> Var {
    let shape = tape.shape(h).to_vec();
    let (rows, p, d) = (shape[0], shape[1], shape[2]);
    let heads = cfg.num_heads;
    let dk = d / heads;
    let q = tape.matmul(h, op.w_q);
    let k = tape.matmul(h, op.w_k);
    let v = tape.matmul(h, op.w_v);
    let split = |tape: &mut Tape, t: Var| {
        let t = tape.reshape(t, &[rows, p, heads, dk]);
        tape.permute(t, &[0, 2, 1, 3])
    };
    let q = split(tape, q);
    let k = split(tape, k);
    let v = split(tape, v);
    let kt = tape.transpose_last2(k);
    let scores = tape.bmm(q, kt);
    let scaled = tape.scale(scores, 1.0 / (dk as f32).sqrt());
    let weights = ops::softmax_last(tape, scaled);
    let ctx = tape.bmm(weights, v);
    let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
    let merged = tape.reshape(ctx, &[rows, p, d]);
    let out = tape.matmul(merged, op.w_o);
    ops::add_bias(tape, out, op.b_o)
}

/// Run the extractor on `x` [batch, lookback, channels].
pub fn forward(tape: &mut Tape, m: &ModelVars, x: Var, cfg: &TsfeConfig) -> ForwardOutput {
    let xs = tape.shape(x).to_vec();
    assert_eq!(xs.len(), 3, "input must be [batch, lookback, channels], got {xs:?}");
    assert_eq!(xs[1], cfg.lookback, "input length {} != lookback {}", xs[1], cfg.lookback);
    assert_eq!(xs[2], cfg.channels, "input channels {} != config {}", xs[2], cfg.channels);
    let (b, c, d, p) = (xs[0], cfg.channels, cfg.d_model, cfg.patches());
    let rows = b * c;

    let xc = tape.permute(x, &[0, 2, 1]);
    let flat = tape.reshape(xc, &[rows, cfg.lookback]);
    let patches = tape.patchify(flat, cfg.patch_len, cfg.patch_stride);
    let emb = tape.matmul(patches, m.embed_w);
    let mut h = ops::add_bias(tape, emb, m.embed_b);
    if let Some(pe) = m.pos_enc {
        let pe3 = tape.reshape(pe, &[1, p, d]);
        let peb = tape.broadcast(pe3, &[rows, p, d]);
        h = tape.add(h, peb);
    }

    let mut features = Vec::with_capacity(cfg.n_operators);
    for op in &m.operators {
        let attn = self_attention(tape, op, h, cfg);
        let res1 = tape.add(h, attn);
        let n1 = ops::normalize(tape, res1, op.norm1_gain, op.norm1_shift, cfg.norm);
        let fc = tape.matmul(n1, op.w_f);
        let fc = ops::add_bias(tape, fc, op.b_f);
        let res2 = tape.add(n1, fc);
        h = ops::normalize(tape, res2, op.norm2_gain, op.norm2_shift, cfg.norm);
        features.push(tape.reshape(h, &[b, c, p, d]));
    }

    let prediction = match cfg.head {
        HeadKind::Forecast => {
            let flat = tape.reshape(h, &[rows, p * d]);
            let y = tape.matmul(flat, m.head_w);
            let y = ops::add_bias(tape, y, m.head_b);
            let y = tape.reshape(y, &[b, c, cfg.horizon]);
            tape.permute(y, &[0, 2, 1])
        }
        HeadKind::Classify => {
            let pooled = tape.sum_axes(h, &[1]);
            let pooled = tape.scale(pooled, 1.0 / p as f32);
            let by_chan = tape.reshape(pooled, &[b, c, d]);
            let merged = tape.sum_axes(by_chan, &[1]);
            let merged = tape.scale(merged, 1.0 / c as f32);
            let feat = tape.reshape(merged, &[b, d]);
            let logits = tape.matmul(feat, m.head_w);
            ops::add_bias(tape, logits, m.head_b)
        }
    };
    ForwardOutput { features, prediction }
}

/// Stage selected windows as a constant [batch, window_len, channels].
pub fn stage_windows(tape: &mut Tape, ws: &crate::dataset::WindowSet, indices: &[usize]) -> Var {
    let values = ws.batch_values(indices);
    tape.constant(Tensor::new(
        vec![indices.len(), ws.window_len(), ws.channels],
        values,
    ))
}

/// Split a window batch [batch, lookback+horizon, channels] into model input
/// and forecast target.
pub fn split_input_target(tape: &mut Tape, window: Var, cfg: &TsfeConfig) -> (Var, Var) {
    let x = tape.slice(window, 1, 0, cfg.lookback);
    let y = tape.slice(window, 1, cfg.lookback, cfg.horizon);
    (x, y)
}

/// Supervised loss on a window batch: forecasting scores mean squared error
/// against the horizon part, classification scores cross-entropy against the
/// labels. Returns the loss and the per-operator feature maps.
pub fn task_loss(
    tape: &mut Tape,
    m: &ModelVars,
    cfg: &TsfeConfig,
    window: Var,
    labels: Option<&[usize]>,
) -> (Var, Vec<Var>) {
    match cfg.head {
        HeadKind::Forecast => {
            let (x, target) = split_input_target(tape, window, cfg);
            let out = forward(tape, m, x, cfg);
            let loss = ops::mse(tape, out.prediction, target);
            (loss, out.features)
        }
        HeadKind::Classify => {
            let out = forward(tape, m, window, cfg);
            let labels = labels.expect("classification loss needs labels");
            let loss = ops::cross_entropy_logits(tape, out.prediction, labels);
            (loss, out.features)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check::fd_partial;

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

    fn window_tensor(cfg: &TsfeConfig, batch: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(vec![batch, cfg.window_len(), cfg.channels], 1.0, &mut rng)
    }

    #[test]
    fn param_count_matches_flatten() {
        for cfg in [tiny_cfg(), TsfeConfig::forecast(96, 24, 3), TsfeConfig::classify(60, 4)] {
            let params = ModelParams::init(&cfg, 7);
            assert_eq!(params.flatten().len(), cfg.param_count());
        }
    }

    #[test]
    fn unflatten_inverts_flatten_bitwise() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 13);
        let flat = params.flatten();
        let back = ModelParams::unflatten(&cfg, &flat).unwrap();
        assert_eq!(back.flatten(), flat);
        assert!(ModelParams::unflatten(&cfg, &flat[1..]).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_cfg();
        assert_eq!(ModelParams::init(&cfg, 5).flatten(), ModelParams::init(&cfg, 5).flatten());
        assert_ne!(ModelParams::init(&cfg, 5).flatten(), ModelParams::init(&cfg, 6).flatten());
    }

    #[test]
    fn forward_shapes_are_as_documented() {
        let cfg = tiny_cfg();
        cfg.validate().unwrap();
        let params = ModelParams::init(&cfg, 1);
        let mut tape = Tape::new();
        let m = ModelVars::stage(&mut tape, &params, false);
        let w = tape.constant(window_tensor(&cfg, 3, 2));
        let (x, y) = split_input_target(&mut tape, w, &cfg);
        assert_eq!(tape.shape(y), &[3, 2, 2]);
        let out = forward(&mut tape, &m, x, &cfg);
        assert_eq!(out.prediction, out.prediction);
        assert_eq!(tape.shape(out.prediction), &[3, 2, 2]);
        assert_eq!(out.features.len(), cfg.n_operators);
        assert_eq!(tape.shape(out.features[0]), &[3, 2, cfg.patches(), 8]);
    }

    #[test]
    fn channels_do_not_leak_into_each_other() {
        // Same channel 0, different channel 1: channel 0 forecasts match
        // bitwise because channels share weights but never mix.
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 3);
        let base = window_tensor(&cfg, 1, 4);
        let mut other = base.clone();
        for t in 0..cfg.window_len() {
            other.data[t * cfg.channels + 1] += 5.0;
        }
        let run = |input: Tensor| {
            let mut tape = Tape::new();
            let m = ModelVars::stage(&mut tape, &params, false);
            let w = tape.constant(input);
            let (x, _) = split_input_target(&mut tape, w, &cfg);
            let out = forward(&mut tape, &m, x, &cfg);
            tape.value(out.prediction).data.clone()
        };
        let a = run(base);
        let b = run(other);
        let c = cfg.channels;
        for t in 0..cfg.horizon {
            assert_eq!(a[t * c], b[t * c], "channel 0 must be unaffected");
            assert_ne!(a[t * c + 1], b[t * c + 1], "channel 1 must differ");
        }
    }

    #[test]
    fn per_sample_norm_makes_rows_batch_invariant() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 9);
        let batch = window_tensor(&cfg, 4, 11);
        let mut tape = Tape::new();
        let m = ModelVars::stage(&mut tape, &params, false);
        let w = tape.constant(batch.clone());
        let (x, _) = split_input_target(&mut tape, w, &cfg);
        let pred = forward(&mut tape, &m, x, &cfg).prediction;
        let full = tape.value(pred).data.clone();

        let row_len = cfg.window_len() * cfg.channels;
        let pred_len = cfg.horizon * cfg.channels;
        for i in 0..4 {
            let mut tape = Tape::new();
            let m = ModelVars::stage(&mut tape, &params, false);
            let one = Tensor::new(
                vec![1, cfg.window_len(), cfg.channels],
                batch.data[i * row_len..][..row_len].to_vec(),
            );
            let w = tape.constant(one);
            let (x, _) = split_input_target(&mut tape, w, &cfg);
            let pred = forward(&mut tape, &m, x, &cfg).prediction;
            let single = tape.value(pred).data.clone();
            assert_eq!(single, full[i * pred_len..][..pred_len], "row {i}");
        }
    }

    #[test]
    fn classify_head_emits_logits() {
        let cfg = TsfeConfig {
            lookback: 12,
            horizon: 0,
            channels: 1,
            patch_len: 4,
            patch_stride: 2,
            d_model: 8,
            num_heads: 2,
            n_operators: 1,
            head: HeadKind::Classify,
            num_classes: 3,
            norm: NormAxes::PerSample,
            use_pos_enc: true,
        };
        cfg.validate().unwrap();
        let params = ModelParams::init(&cfg, 2);
        let mut tape = Tape::new();
        let m = ModelVars::stage(&mut tape, &params, false);
        let w = tape.constant(window_tensor(&cfg, 5, 3));
        let (loss, feats) = task_loss(&mut tape, &m, &cfg, w, Some(&[0, 1, 2, 1, 0]));
        assert!(tape.scalar_value(loss).is_finite());
        assert_eq!(feats.len(), 1);
    }

    #[test]
    fn task_loss_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 21);
        let window = window_tensor(&cfg, 2, 22);

        let mut tape = Tape::new();
        let m = ModelVars::stage(&mut tape, &params, true);
        let w = tape.constant(window.clone());
        let (loss, _) = task_loss(&mut tape, &m, &cfg, w, None);
        let roots = m.var_list();
        let grads = tape.differentiate(loss, &roots);

        // Check the embedding weight and the first-operator query weight
        // against central differences over the flattened parameter vector.
        let flat0 = params.flatten();
        let eval = |flat: &[f32]| -> f32 {
            let p = ModelParams::unflatten(&cfg, flat).unwrap();
            let mut tape = Tape::new();
            let m = ModelVars::stage(&mut tape, &p, false);
            let w = tape.constant(window.clone());
            let (loss, _) = task_loss(&mut tape, &m, &cfg, w, None);
            tape.scalar_value(loss)
        };
        // Offsets of embed_w (0) and w_q (embed + bias + pos block).
        let wq_off = cfg.patch_len * cfg.d_model + cfg.d_model + cfg.patches() * cfg.d_model;
        // Two step sizes: one quotient is truncation-limited, the other
        // noise-limited; the closer one is the oracle.
        for (root_idx, off, coords) in [(0usize, 0usize, [0usize, 5, 17]), (3, wq_off, [2, 9, 31])] {
            for &k in &coords {
                let an = grads[root_idx].data[k] as f64;
                let rel = [3e-3f32, 1e-2]
                    .iter()
                    .map(|&eps| {
                        let fd = fd_partial(&eval, &flat0, off + k, eps);
                        (an - fd).abs() / (fd.abs() + 1e-8)
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!(rel < 2e-3, "root {root_idx} coord {k}: analytic {an} rel {rel}");
            }
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = tiny_cfg();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.patch_len = 12;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.horizon = 0;
        assert!(cfg.validate().is_err());
    }
}
