//! The trainable segmentation model: a per-pixel two-layer network over a
//! reflect-padded local patch. The encoder (linear + relu) is frozen after the
//! initial step; the decoder (linear) grows one column per learned class.
//! Gradients are analytic; optimization is SGD with momentum under polynomial
//! learning-rate decay.
//!
//! Checkpoints are versioned binary blobs: a small header followed by
//! little-endian f64 weights in declaration order. The serialized size of a
//! decoder blob is the memory-accounting unit for helper decoders.

use rand::Rng;
use thiserror::Error;

use crate::core::{rng_from, ClassId, ClassSet, Image, LabelMap, Sample};

#[derive(Error, Debug)]
pub enum SegError {
    #[error("feature dim mismatch: decoder expects {expected}, features carry {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("label {0} not in the decoder's class list")]
    LabelOutOfRange(u8),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class {0} already present in the decoder")]
    ClassCollision(u8),
    #[error("encoder is frozen; refusing to update its weights")]
    FrozenEncoder,
    #[error("empty batch")]
    EmptyBatch,
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

pub const DEFAULT_PATCH_SIZE: usize = 5;
pub const DEFAULT_FEATURE_DIM: usize = 32;

/// Frozen-after-step-0 feature extractor: one linear layer with bias over the
/// flattened patch, followed by relu.
#[derive(Clone, PartialEq, Debug)]
pub struct Encoder {
    patch_size: usize,
    feature_dim: usize,
    weights: Vec<f64>, // (3*patch^2 + 1) rows x feature_dim cols, row-major
    frozen: bool,
}

impl Encoder {
    pub fn input_rows(patch_size: usize) -> usize {
        3 * patch_size * patch_size + 1
    }

    pub fn new_random(patch_size: usize, feature_dim: usize, seed: u64) -> Self {
        assert!(patch_size % 2 == 1, "patch size must be odd");
        let rows = Self::input_rows(patch_size);
        let scale = 1.0 / (rows as f64).sqrt();
        let mut rng = rng_from(seed);
        let weights = (0..rows * feature_dim)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Encoder {
            patch_size,
            feature_dim,
            weights,
            frozen: false,
        }
    }

    pub fn zeros(patch_size: usize, feature_dim: usize) -> Self {
        assert!(patch_size % 2 == 1, "patch size must be odd");
        Encoder {
            patch_size,
            feature_dim,
            weights: vec![0.0; Self::input_rows(patch_size) * feature_dim],
            frozen: false,
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }
}

/// Linear per-pixel classifier head. Column order matches the ascending class
/// list; growing the decoder preserves existing columns bit-exactly.
#[derive(Clone, PartialEq, Debug)]
pub struct Decoder {
    class_list: ClassSet,
    feature_dim: usize,
    weights: Vec<f64>, // (feature_dim + 1) rows x |classes| cols, row-major
}

impl Decoder {
    pub fn new_zero(class_list: ClassSet, feature_dim: usize) -> Self {
        let n = class_list.len();
        Decoder {
            class_list,
            feature_dim,
            weights: vec![0.0; (feature_dim + 1) * n],
        }
    }

    pub fn new_random(class_list: ClassSet, feature_dim: usize, seed: u64) -> Self {
        let n = class_list.len();
        let scale = 1.0 / ((feature_dim + 1) as f64).sqrt();
        let mut rng = rng_from(seed);
        let weights = (0..(feature_dim + 1) * n)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Decoder {
            class_list,
            feature_dim,
            weights,
        }
    }

    pub fn class_list(&self) -> &ClassSet {
        &self.class_list
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_list.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Clone, PartialEq, Debug)]
pub struct SegModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Dense per-pixel features, row-major `H x W x F`.
#[derive(Clone, PartialEq, Debug)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.feature_dim;
        &self.data[i..i + self.feature_dim]
    }
}

/// Dense per-pixel logits, row-major `H x W x |C|`.
#[derive(Clone, PartialEq, Debug)]
pub struct Logits {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.num_classes;
        &self.data[i..i + self.num_classes]
    }
}

/// Reflect coordinate into [0, len) without repeating the edge sample.
fn reflect(t: isize, len: usize) -> usize {
    let len = len as isize;
    let mut t = t;
    if t < 0 {
        t = -t;
    }
    if t >= len {
        t = 2 * len - 2 - t;
    }
    debug_assert!(t >= 0 && t < len);
    t as usize
}

/// Flattened reflect-padded patch centered at (row, col) plus a trailing 1
/// bias entry; layout is spatial-major with channels innermost.
fn gather_patch(image: &Image, row: usize, col: usize, patch_size: usize, out: &mut [f64]) {
    let r = (patch_size / 2) as isize;
    let mut i = 0;
    for dy in -r..=r {
        let y = reflect(row as isize + dy, image.height());
        for dx in -r..=r {
            let x = reflect(col as isize + dx, image.width());
            let px = image.get(y, x);
            out[i] = px[0];
            out[i + 1] = px[1];
            out[i + 2] = px[2];
            i += 3;
        }
    }
    out[i] = 1.0;
}

/// Linear part of the encoder before the relu; exposed so oracles can inspect
/// how close activations sit to the relu kink.
pub fn encode_preactivations(enc: &Encoder, image: &Image) -> FeatureMap {
    assert!(
        image.height() >= enc.patch_size && image.width() >= enc.patch_size,
        "image smaller than the encoder patch"
    );
    let (h, w, f_dim) = (image.height(), image.width(), enc.feature_dim);
    let rows = Encoder::input_rows(enc.patch_size);
    let mut patch = vec![0.0; rows];
    let mut data = vec![0.0; h * w * f_dim];
    for row in 0..h {
        for col in 0..w {
            gather_patch(image, row, col, enc.patch_size, &mut patch);
            let out = &mut data[(row * w + col) * f_dim..(row * w + col + 1) * f_dim];
            for (i, x) in patch.iter().enumerate() {
                if *x == 0.0 {
                    continue;
                }
                let wrow = &enc.weights[i * f_dim..(i + 1) * f_dim];
                for f in 0..f_dim {
                    out[f] += x * wrow[f];
                }
            }
        }
    }
    FeatureMap {
        height: h,
        width: w,
        feature_dim: f_dim,
        data,
    }
}

/// Per-pixel encoder forward pass: relu of the patch projection.
pub fn encode(enc: &Encoder, image: &Image) -> FeatureMap {
    let mut fm = encode_preactivations(enc, image);
    for v in fm.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    fm
}

/// Linear decoder head over a feature map.
pub fn decode(dec: &Decoder, features: &FeatureMap) -> Result<Logits, SegError> {
    if features.feature_dim != dec.feature_dim {
        return Err(SegError::DimMismatch {
            expected: dec.feature_dim,
            got: features.feature_dim,
        });
    }
    let (h, w) = (features.height, features.width);
    let n = dec.num_classes();
    let f_dim = dec.feature_dim;
    let mut data = vec![0.0; h * w * n];
    for px in 0..h * w {
        let feats = &features.data[px * f_dim..(px + 1) * f_dim];
        let out = &mut data[px * n..(px + 1) * n];
        // bias row
        out.copy_from_slice(&dec.weights[f_dim * n..(f_dim + 1) * n]);
        for (f, x) in feats.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            let wrow = &dec.weights[f * n..(f + 1) * n];
            for c in 0..n {
                out[c] += x * wrow[c];
            }
        }
    }
    Ok(Logits {
        height: h,
        width: w,
        num_classes: n,
        data,
    })
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Mean per-pixel cross-entropy in the stabilized log-sum-exp form.
pub fn ce_loss(logits: &Logits, labels: &LabelMap, class_list: &ClassSet) -> Result<f64, SegError> {
    if logits.height != labels.height() || logits.width != labels.width() {
        return Err(SegError::ShapeMismatch(format!(
            "logits {}x{} vs labels {}x{}",
            logits.height,
            logits.width,
            labels.height(),
            labels.width()
        )));
    }
    let n_px = logits.height * logits.width;
    let mut total = 0.0;
    for px in 0..n_px {
        let label = labels.labels()[px];
        let col = class_list
            .position(label)
            .ok_or(SegError::LabelOutOfRange(label.0))?;
        let l = &logits.data[px * logits.num_classes..(px + 1) * logits.num_classes];
        total += log_sum_exp(l) - l[col];
    }
    Ok(total / n_px as f64)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TrainableSet {
    DecoderOnly,
    All,
}

/// Gradients of the mean batch loss with respect to the selected weights.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub encoder: Option<Vec<f64>>,
    pub decoder: Vec<f64>,
}

/// Accumulate one sample's decoder gradient contribution. `pixel_weight` is
/// the weight of a single pixel in the overall mean, and the iteration order
/// (pixels row-major, classes ascending) is fixed so results are
/// bit-deterministic however the caller batches.
fn accumulate_decoder_grad(
    dec: &Decoder,
    features: &FeatureMap,
    labels: &LabelMap,
    pixel_weight: f64,
    grad: &mut [f64],
    mut per_pixel_delta: Option<&mut Vec<f64>>,
) -> Result<(), SegError> {
    let n = dec.num_classes();
    let f_dim = dec.feature_dim;
    let mut probs = vec![0.0; n];
    for px in 0..features.height * features.width {
        let label = labels.labels()[px];
        let col = dec
            .class_list
            .position(label)
            .ok_or(SegError::LabelOutOfRange(label.0))?;
        let feats = &features.data[px * f_dim..(px + 1) * f_dim];
        // logits -> softmax
        probs.copy_from_slice(&dec.weights[f_dim * n..(f_dim + 1) * n]);
        for (f, x) in feats.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            let wrow = &dec.weights[f * n..(f + 1) * n];
            for c in 0..n {
                probs[c] += x * wrow[c];
            }
        }
        let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for p in probs.iter_mut() {
            *p = (*p - max).exp();
            sum += *p;
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        probs[col] -= 1.0;
        // dL/dlogit_c = pixel_weight * (softmax_c - onehot_c)
        for (f, x) in feats.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            let grow = &mut grad[f * n..(f + 1) * n];
            for c in 0..n {
                grow[c] += pixel_weight * x * probs[c];
            }
        }
        let grow = &mut grad[f_dim * n..(f_dim + 1) * n];
        for c in 0..n {
            grow[c] += pixel_weight * probs[c];
        }
        if let Some(deltas) = per_pixel_delta.as_deref_mut() {
            deltas[px * n..(px + 1) * n].copy_from_slice(&probs);
        }
    }
    Ok(())
}

/// Decoder-only gradient over cached feature maps. Produces bit-identical
/// results to [`grad`] in decoder-only mode on the same inputs.
pub fn decoder_grad_from_features(
    dec: &Decoder,
    batch: &[(&FeatureMap, &LabelMap)],
) -> Result<Vec<f64>, SegError> {
    if batch.is_empty() {
        return Err(SegError::EmptyBatch);
    }
    let mut grad = vec![0.0; dec.num_params()];
    for (features, labels) in batch {
        if features.feature_dim != dec.feature_dim {
            return Err(SegError::DimMismatch {
                expected: dec.feature_dim,
                got: features.feature_dim,
            });
        }
        let pixel_weight = 1.0 / (batch.len() * features.height * features.width) as f64;
        accumulate_decoder_grad(dec, features, labels, pixel_weight, &mut grad, None)?;
    }
    Ok(grad)
}

/// Exact analytic gradients of the mean cross-entropy over `batch`.
pub fn grad(model: &SegModel, batch: &[&Sample], mode: TrainableSet) -> Result<Gradients, SegError> {
    if batch.is_empty() {
        return Err(SegError::EmptyBatch);
    }
    let dec = &model.decoder;
    let enc = &model.encoder;
    let n = dec.num_classes();
    let f_dim = dec.feature_dim;
    let mut dec_grad = vec![0.0; dec.num_params()];
    let mut enc_grad = match mode {
        TrainableSet::All => Some(vec![0.0; enc.num_params()]),
        TrainableSet::DecoderOnly => None,
    };
    let rows = Encoder::input_rows(enc.patch_size);
    let mut patch = vec![0.0; rows];
    for sample in batch {
        let features = encode(enc, &sample.image);
        let n_px = features.height * features.width;
        let pixel_weight = 1.0 / (batch.len() * n_px) as f64;
        let mut deltas = vec![0.0; n_px * n];
        accumulate_decoder_grad(
            dec,
            &features,
            &sample.labels,
            pixel_weight,
            &mut dec_grad,
            Some(&mut deltas),
        )?;
        if let Some(eg) = enc_grad.as_mut() {
            for row in 0..features.height {
                for col in 0..features.width {
                    let px = row * features.width + col;
                    let delta = &deltas[px * n..(px + 1) * n];
                    let feats = features.at(row, col);
                    gather_patch(&sample.image, row, col, enc.patch_size, &mut patch);
                    for f in 0..f_dim {
                        // relu gate: zero activation means zero downstream grad
                        if feats[f] == 0.0 {
                            continue;
                        }
                        let wrow = &dec.weights[f * n..(f + 1) * n];
                        let mut dfeat = 0.0;
                        for c in 0..n {
                            dfeat += wrow[c] * delta[c];
                        }
                        if dfeat == 0.0 {
                            continue;
                        }
                        let dpre = pixel_weight * dfeat;
                        for (i, x) in patch.iter().enumerate() {
                            if *x != 0.0 {
                                eg[i * f_dim + f] += x * dpre;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Gradients {
        encoder: enc_grad,
        decoder: dec_grad,
    })
}

/// SGD-with-momentum state under polynomial learning-rate decay.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub lr0: f64,
    pub lr_end: f64,
    pub power: f64,
    pub momentum: f64,
    pub step_counter: usize,
    pub total_steps: usize,
    vel_encoder: Option<Vec<f64>>,
    vel_decoder: Vec<f64>,
}

impl OptimizerState {
    pub fn new(
        lr0: f64,
        lr_end: f64,
        power: f64,
        momentum: f64,
        total_steps: usize,
        encoder_params: Option<usize>,
        decoder_params: usize,
    ) -> Self {
        assert!(total_steps >= 1);
        assert!((0.0..1.0).contains(&momentum));
        OptimizerState {
            lr0,
            lr_end,
            power,
            momentum,
            step_counter: 0,
            total_steps,
            vel_encoder: encoder_params.map(|n| vec![0.0; n]),
            vel_decoder: vec![0.0; decoder_params],
        }
    }
}

/// Current learning rate: `(lr0 - lr_end) * (1 - t/T)^power + lr_end`.
pub fn poly_lr(state: &OptimizerState) -> f64 {
    assert!(state.step_counter <= state.total_steps);
    let t = state.step_counter as f64 / state.total_steps as f64;
    (state.lr0 - state.lr_end) * (1.0 - t).powf(state.power) + state.lr_end
}

/// One `velocity = momentum*velocity + grad; weights -= lr*velocity` update.
pub fn sgd_step(
    model: &mut SegModel,
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<(), SegError> {
    if grads.decoder.len() != model.decoder.weights.len() {
        return Err(SegError::ShapeMismatch(format!(
            "decoder grad has {} entries, weights have {}",
            grads.decoder.len(),
            model.decoder.weights.len()
        )));
    }
    let lr = poly_lr(state);
    if let Some(enc_grad) = &grads.encoder {
        if model.encoder.frozen {
            return Err(SegError::FrozenEncoder);
        }
        if enc_grad.len() != model.encoder.weights.len() {
            return Err(SegError::ShapeMismatch(format!(
                "encoder grad has {} entries, weights have {}",
                enc_grad.len(),
                model.encoder.weights.len()
            )));
        }
        let vel = state
            .vel_encoder
            .as_mut()
            .ok_or_else(|| SegError::ShapeMismatch("optimizer lacks encoder buffers".into()))?;
        for ((v, g), w) in vel
            .iter_mut()
            .zip(enc_grad)
            .zip(model.encoder.weights.iter_mut())
        {
            *v = state.momentum * *v + g;
            *w -= lr * *v;
        }
    }
    for ((v, g), w) in state
        .vel_decoder
        .iter_mut()
        .zip(&grads.decoder)
        .zip(model.decoder.weights.iter_mut())
    {
        *v = state.momentum * *v + g;
        *w -= lr * *v;
    }
    state.step_counter += 1;
    Ok(())
}

/// Extend the decoder with zero-initialized columns for `new_classes`.
/// Existing columns are preserved bit-exactly (possibly at new positions,
/// since the class list stays sorted).
pub fn grow_decoder(dec: &Decoder, new_classes: &ClassSet) -> Result<Decoder, SegError> {
    for c in new_classes.iter() {
        if dec.class_list.contains(c) {
            return Err(SegError::ClassCollision(c.0));
        }
    }
    let merged = dec.class_list.union(new_classes);
    let n_new = merged.len();
    let n_old = dec.num_classes();
    let mut weights = vec![0.0; (dec.feature_dim + 1) * n_new];
    for (old_col, c) in dec.class_list.iter().enumerate() {
        let new_col = merged.position(c).expect("union keeps old classes");
        for row in 0..=dec.feature_dim {
            weights[row * n_new + new_col] = dec.weights[row * n_old + old_col];
        }
    }
    Ok(Decoder {
        class_list: merged,
        feature_dim: dec.feature_dim,
        weights,
    })
}

/// Per-pixel argmax over the decoder's class list; ties break toward the
/// lowest class id.
pub fn predict(model: &SegModel, image: &Image) -> LabelMap {
    let features = encode(&model.encoder, image);
    predict_from_features(&model.decoder, &features)
}

/// Argmax labeling over cached features (identical to [`predict`]).
pub fn predict_from_features(dec: &Decoder, features: &FeatureMap) -> LabelMap {
    let logits = decode(dec, features).expect("feature dim checked by caller");
    let classes = dec.class_list.as_slice();
    let n = dec.num_classes();
    let mut labels = Vec::with_capacity(logits.height * logits.width);
    for px in 0..logits.height * logits.width {
        let l = &logits.data[px * n..(px + 1) * n];
        let mut best = 0usize;
        for c in 1..n {
            if l[c] > l[best] {
                best = c;
            }
        }
        labels.push(classes[best]);
    }
    LabelMap::new(logits.height, logits.width, labels)
}

// ---------------------------------------------------------------------------
// Checkpoint blobs
// ---------------------------------------------------------------------------

const MODEL_MAGIC: &[u8; 4] = b"RCM1";
const DECODER_MAGIC: &[u8; 4] = b"RCD1";

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct BlobReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BlobReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SegError> {
        if self.pos + n > self.data.len() {
            return Err(SegError::BadCheckpoint("truncated blob".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SegError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, SegError> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Closed-form size of [`serialize_decoder`]'s output.
pub fn decoder_blob_len(feature_dim: usize, num_classes: usize) -> usize {
    4 + 4 + 4 + num_classes + 8 * (feature_dim + 1) * num_classes
}

/// Closed-form size of [`serialize_model`]'s output.
pub fn model_blob_len(patch_size: usize, feature_dim: usize, num_classes: usize) -> usize {
    4 + 4 + 4 + 4 + 1
        + num_classes
        + 8 * Encoder::input_rows(patch_size) * feature_dim
        + 8 * (feature_dim + 1) * num_classes
}

pub fn serialize_decoder(dec: &Decoder) -> Vec<u8> {
    let mut out = Vec::with_capacity(decoder_blob_len(dec.feature_dim, dec.num_classes()));
    out.extend_from_slice(DECODER_MAGIC);
    push_u32(&mut out, dec.feature_dim as u32);
    push_u32(&mut out, dec.num_classes() as u32);
    out.extend(dec.class_list.iter().map(|c| c.0));
    push_f64s(&mut out, &dec.weights);
    out
}

pub fn deserialize_decoder(data: &[u8]) -> Result<Decoder, SegError> {
    let mut r = BlobReader { data, pos: 0 };
    if r.take(4)? != DECODER_MAGIC {
        return Err(SegError::BadCheckpoint("bad decoder magic".into()));
    }
    let feature_dim = r.u32()? as usize;
    let n = r.u32()? as usize;
    let ids = r.take(n)?.to_vec();
    let class_list = ClassSet::new(ids.iter().copied().map(ClassId));
    if class_list.len() != n {
        return Err(SegError::BadCheckpoint("duplicate class ids".into()));
    }
    let weights = r.f64s((feature_dim + 1) * n)?;
    Ok(Decoder {
        class_list,
        feature_dim,
        weights,
    })
}

pub fn serialize_model(model: &SegModel) -> Vec<u8> {
    let enc = &model.encoder;
    let dec = &model.decoder;
    let mut out = Vec::with_capacity(model_blob_len(
        enc.patch_size,
        enc.feature_dim,
        dec.num_classes(),
    ));
    out.extend_from_slice(MODEL_MAGIC);
    push_u32(&mut out, enc.patch_size as u32);
    push_u32(&mut out, enc.feature_dim as u32);
    push_u32(&mut out, dec.num_classes() as u32);
    out.push(enc.frozen as u8);
    out.extend(dec.class_list.iter().map(|c| c.0));
    push_f64s(&mut out, &enc.weights);
    push_f64s(&mut out, &dec.weights);
    out
}

pub fn deserialize_model(data: &[u8]) -> Result<SegModel, SegError> {
    let mut r = BlobReader { data, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(SegError::BadCheckpoint("bad model magic".into()));
    }
    let patch_size = r.u32()? as usize;
    let feature_dim = r.u32()? as usize;
    let n = r.u32()? as usize;
    let frozen = r.take(1)?[0] != 0;
    let ids = r.take(n)?.to_vec();
    let class_list = ClassSet::new(ids.iter().copied().map(ClassId));
    if class_list.len() != n {
        return Err(SegError::BadCheckpoint("duplicate class ids".into()));
    }
    let enc_weights = r.f64s(Encoder::input_rows(patch_size) * feature_dim)?;
    let dec_weights = r.f64s((feature_dim + 1) * n)?;
    Ok(SegModel {
        encoder: Encoder {
            patch_size,
            feature_dim,
            weights: enc_weights,
            frozen,
        },
        decoder: Decoder {
            class_list,
            feature_dim,
            weights: dec_weights,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{ClassSet, Image, LabelMap, Sample};

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = rng_from(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    fn random_labels(h: usize, w: usize, n: u8, seed: u64) -> LabelMap {
        let mut rng = rng_from(seed);
        LabelMap::new(h, w, (0..h * w).map(|_| ClassId(rng.gen_range(0..n))).collect())
    }

    #[test]
    fn encode_zero_weights_gives_zero_features() {
        let enc = Encoder::zeros(3, 4);
        let fm = encode(&enc, &random_image(6, 6, 1));
        assert!(fm.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_constant_image_is_translation_invariant() {
        let enc = Encoder::new_random(3, 4, 2);
        let img = Image::filled(6, 6, [0.3, 0.6, 0.2]);
        let fm = encode(&enc, &img);
        let reference = fm.at(2, 2).to_vec();
        for row in 0..6 {
            for col in 0..6 {
                assert_eq!(fm.at(row, col), &reference[..]);
            }
        }
    }

    #[test]
    fn encode_matches_nested_loop_oracle() {
        let enc = Encoder::new_random(3, 4, 3);
        let img = random_image(6, 6, 4);
        let fm = encode(&enc, &img);
        let p = 3usize;
        let r = 1isize;
        for row in 0..6usize {
            for col in 0..6usize {
                for f in 0..4usize {
                    // direct per-pixel dot-product oracle
                    let mut acc = enc.weights()[(3 * p * p) * 4 + f]; // bias
                    let mut idx = 0usize;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let y = reflect(row as isize + dy, 6);
                            let x = reflect(col as isize + dx, 6);
                            let px = img.get(y, x);
                            for ch in 0..3 {
                                acc += px[ch] * enc.weights()[(idx * 3 + ch) * 4 + f];
                            }
                            idx += 1;
                        }
                    }
                    let expected = acc.max(0.0);
                    assert!(
                        (fm.at(row, col)[f] - expected).abs() < 1e-12,
                        "mismatch at ({row},{col},{f})"
                    );
                }
            }
        }
    }

    #[test]
    fn decode_zero_weights_gives_zero_logits() {
        let dec = Decoder::new_zero(ClassSet::universe(3), 4);
        let enc = Encoder::new_random(3, 4, 5);
        let fm = encode(&enc, &random_image(6, 6, 6));
        let logits = decode(&dec, &fm).unwrap();
        assert!(logits.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decode_matches_nested_loop_oracle() {
        let dec = Decoder::new_random(ClassSet::universe(2), 4, 7);
        let enc = Encoder::new_random(3, 4, 8);
        let fm = encode(&enc, &random_image(6, 6, 9));
        let logits = decode(&dec, &fm).unwrap();
        for row in 0..6 {
            for col in 0..6 {
                for c in 0..3 {
                    let mut acc = dec.weights()[4 * 3 + c];
                    for f in 0..4 {
                        acc += fm.at(row, col)[f] * dec.weights()[f * 3 + c];
                    }
                    assert!((logits.at(row, col)[c] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn decode_rejects_dim_mismatch() {
        let dec = Decoder::new_zero(ClassSet::universe(2), 8);
        let enc = Encoder::new_random(3, 4, 5);
        let fm = encode(&enc, &random_image(6, 6, 6));
        assert!(matches!(
            decode(&dec, &fm),
            Err(SegError::DimMismatch { .. })
        ));
    }

    #[test]
    fn ce_loss_perfect_prediction_is_zero() {
        let classes = ClassSet::universe(2);
        let labels = random_labels(4, 4, 3, 10);
        let mut data = vec![0.0; 16 * 3];
        for px in 0..16 {
            let col = classes.position(labels.labels()[px]).unwrap();
            for c in 0..3 {
                data[px * 3 + c] = if c == col { 60.0 } else { -60.0 };
            }
        }
        let logits = Logits {
            height: 4,
            width: 4,
            num_classes: 3,
            data,
        };
        let loss = ce_loss(&logits, &labels, &classes).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn ce_loss_uniform_logits_is_ln_num_classes() {
        let classes = ClassSet::universe(3);
        let labels = random_labels(4, 4, 4, 11);
        let logits = Logits {
            height: 4,
            width: 4,
            num_classes: 4,
            data: vec![0.0; 16 * 4],
        };
        let loss = ce_loss(&logits, &labels, &classes).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn ce_loss_matches_direct_softmax_oracle() {
        let classes = ClassSet::universe(2);
        let labels = random_labels(3, 3, 3, 12);
        let mut rng = rng_from(13);
        let data: Vec<f64> = (0..9 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits = Logits {
            height: 3,
            width: 3,
            num_classes: 3,
            data: data.clone(),
        };
        let loss = ce_loss(&logits, &labels, &classes).unwrap();
        // direct softmax-then-log oracle
        let mut expected = 0.0;
        for px in 0..9 {
            let l = &data[px * 3..(px + 1) * 3];
            let exps: Vec<f64> = l.iter().map(|v| v.exp()).collect();
            let sum: f64 = exps.iter().sum();
            let col = classes.position(labels.labels()[px]).unwrap();
            expected += -(exps[col] / sum).ln();
        }
        expected /= 9.0;
        assert!((loss - expected).abs() < 1e-9);
    }

    #[test]
    fn ce_loss_rejects_out_of_range_label() {
        let classes = ClassSet::universe(1);
        let labels = LabelMap::filled(2, 2, ClassId(5));
        let logits = Logits {
            height: 2,
            width: 2,
            num_classes: 2,
            data: vec![0.0; 8],
        };
        assert!(matches!(
            ce_loss(&logits, &labels, &classes),
            Err(SegError::LabelOutOfRange(5))
        ));
    }

    fn numeric_loss(model: &SegModel, batch: &[&Sample]) -> f64 {
        let mut total = 0.0;
        for s in batch {
            let fm = encode(&model.encoder, &s.image);
            let logits = decode(&model.decoder, &fm).unwrap();
            total += ce_loss(&logits, &s.labels, model.decoder.class_list()).unwrap();
        }
        total / batch.len() as f64
    }

    fn finite_diff_check(base_seed: u64) -> f64 {
        // The loss is only differentiable away from relu kinks, so redraw any
        // instance whose pre-activations sit inside the finite-difference
        // window (|pre| below 20x the probe step).
        let mut seed = base_seed;
        let (mut model, batch) = loop {
            let enc = Encoder::new_random(3, 4, seed);
            let dec = Decoder::new_random(ClassSet::universe(2), 4, seed + 1);
            let batch = vec![
                Sample::new(random_image(6, 6, seed + 2), random_labels(6, 6, 3, seed + 3))
                    .unwrap(),
                Sample::new(random_image(6, 6, seed + 4), random_labels(6, 6, 3, seed + 5))
                    .unwrap(),
            ];
            let near_kink = batch.iter().any(|s| {
                encode_preactivations(&enc, &s.image)
                    .data
                    .iter()
                    .any(|p| p.abs() < 2e-3)
            });
            if !near_kink {
                break (
                    SegModel {
                        encoder: enc,
                        decoder: dec,
                    },
                    batch,
                );
            }
            seed += 1000;
        };
        let refs: Vec<&Sample> = batch.iter().collect();
        let g = grad(&model, &refs, TrainableSet::All).unwrap();
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        let enc_params = model.encoder.num_params();
        for i in 0..enc_params + model.decoder.num_params() {
            let read = |m: &SegModel, i: usize| {
                if i < enc_params {
                    m.encoder.weights[i]
                } else {
                    m.decoder.weights[i - enc_params]
                }
            };
            let write = |m: &mut SegModel, i: usize, v: f64| {
                if i < enc_params {
                    m.encoder.weights[i] = v;
                } else {
                    m.decoder.weights[i - enc_params] = v;
                }
            };
            let orig = read(&model, i);
            write(&mut model, i, orig + eps);
            let up = numeric_loss(&model, &refs);
            write(&mut model, i, orig - eps);
            let down = numeric_loss(&model, &refs);
            write(&mut model, i, orig);
            let fd = (up - down) / (2.0 * eps);
            let analytic = if i < enc_params {
                g.encoder.as_ref().unwrap()[i]
            } else {
                g.decoder[i - enc_params]
            };
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max((fd - analytic).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in [100u64, 200, 300] {
            let worst = finite_diff_check(seed);
            assert!(worst < 1e-4, "seed {seed}: max rel error {worst}");
        }
    }

    #[test]
    fn decoder_only_mode_has_no_encoder_grads() {
        let model = SegModel {
            encoder: Encoder::new_random(3, 4, 1),
            decoder: Decoder::new_random(ClassSet::universe(2), 4, 2),
        };
        let batch =
            vec![Sample::new(random_image(6, 6, 3), random_labels(6, 6, 3, 4)).unwrap()];
        let refs: Vec<&Sample> = batch.iter().collect();
        let g = grad(&model, &refs, TrainableSet::DecoderOnly).unwrap();
        assert!(g.encoder.is_none());
    }

    #[test]
    fn gradient_vanishes_at_saturated_correct_prediction() {
        // build a decoder that already assigns huge margin to the right class
        let classes = ClassSet::universe(1);
        let labels = LabelMap::filled(6, 6, ClassId(1));
        let enc = Encoder::zeros(3, 4);
        let mut dec = Decoder::new_zero(classes.clone(), 4);
        // bias row pushes class 1 far above class 0 everywhere
        let n = 2;
        dec.weights[4 * n] = -50.0;
        dec.weights[4 * n + 1] = 50.0;
        let model = SegModel {
            encoder: enc,
            decoder: dec,
        };
        let batch = vec![Sample::new(Image::filled(6, 6, [0.5; 3]), labels).unwrap()];
        let refs: Vec<&Sample> = batch.iter().collect();
        let g = grad(&model, &refs, TrainableSet::All).unwrap();
        let norm: f64 = g
            .decoder
            .iter()
            .chain(g.encoder.as_ref().unwrap())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn cached_feature_grad_matches_grad() {
        let model = SegModel {
            encoder: Encoder::new_random(3, 4, 5),
            decoder: Decoder::new_random(ClassSet::universe(2), 4, 6),
        };
        let batch = vec![
            Sample::new(random_image(6, 6, 7), random_labels(6, 6, 3, 8)).unwrap(),
            Sample::new(random_image(6, 6, 9), random_labels(6, 6, 3, 10)).unwrap(),
        ];
        let refs: Vec<&Sample> = batch.iter().collect();
        let g = grad(&model, &refs, TrainableSet::DecoderOnly).unwrap();
        let fms: Vec<FeatureMap> = batch.iter().map(|s| encode(&model.encoder, &s.image)).collect();
        let pairs: Vec<(&FeatureMap, &LabelMap)> =
            fms.iter().zip(batch.iter().map(|s| &s.labels)).collect();
        let g2 = decoder_grad_from_features(&model.decoder, &pairs).unwrap();
        assert_eq!(g.decoder, g2);
    }

    #[test]
    fn poly_lr_hits_both_endpoints_and_midpoint() {
        let mut state = OptimizerState::new(5e-4, 5e-6, 0.9, 0.9, 100, None, 1);
        assert_eq!(poly_lr(&state), 5e-4);
        state.step_counter = 100;
        assert!((poly_lr(&state) - 5e-6).abs() < 1e-18);
        state.step_counter = 50;
        // closed form: (5e-4 - 5e-6) * 0.5^0.9 + 5e-6
        let expected = (5e-4 - 5e-6) * 0.5f64.powf(0.9) + 5e-6;
        assert!((poly_lr(&state) - expected).abs() < 1e-12);
        assert!((poly_lr(&state) - 2.7027e-4).abs() < 1e-8);
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut model = SegModel {
            encoder: Encoder::zeros(3, 2),
            decoder: Decoder::new_zero(ClassSet::universe(1), 2),
        };
        let grads = Gradients {
            encoder: None,
            decoder: vec![1.0; model.decoder.num_params()],
        };
        let mut state = OptimizerState::new(0.1, 0.1, 0.9, 0.0, 10, None, model.decoder.num_params());
        sgd_step(&mut model, &grads, &mut state).unwrap();
        for w in model.decoder.weights() {
            assert!((w + 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_zero_grads_zero_velocity_is_identity() {
        let mut model = SegModel {
            encoder: Encoder::zeros(3, 2),
            decoder: Decoder::new_random(ClassSet::universe(1), 2, 3),
        };
        let before = model.decoder.weights().to_vec();
        let grads = Gradients {
            encoder: None,
            decoder: vec![0.0; model.decoder.num_params()],
        };
        let mut state = OptimizerState::new(0.1, 0.1, 0.9, 0.9, 10, None, model.decoder.num_params());
        sgd_step(&mut model, &grads, &mut state).unwrap();
        assert_eq!(model.decoder.weights(), &before[..]);
    }

    #[test]
    fn sgd_momentum_follows_hand_computed_recursion() {
        let mut model = SegModel {
            encoder: Encoder::zeros(3, 2),
            decoder: Decoder::new_zero(ClassSet::universe(0), 2),
        };
        let g1 = Gradients {
            encoder: None,
            decoder: vec![2.0; 3],
        };
        let g2 = Gradients {
            encoder: None,
            decoder: vec![-1.0; 3],
        };
        let lr = 0.1;
        let mut state = OptimizerState::new(lr, lr, 0.9, 0.9, 10, None, 3);
        sgd_step(&mut model, &g1, &mut state).unwrap();
        sgd_step(&mut model, &g2, &mut state).unwrap();
        // v1 = 2.0, w1 = -0.2; v2 = 0.9*2.0 - 1.0 = 0.8, w2 = -0.2 - 0.08 = -0.28
        for w in model.decoder.weights() {
            assert!((w + 0.28).abs() < 1e-12, "w = {w}");
        }
    }

    #[test]
    fn frozen_encoder_rejects_updates() {
        let mut enc = Encoder::new_random(3, 2, 1);
        enc.freeze();
        let n_enc = enc.num_params();
        let mut model = SegModel {
            encoder: enc,
            decoder: Decoder::new_zero(ClassSet::universe(1), 2),
        };
        let n_dec = model.decoder.num_params();
        let grads = Gradients {
            encoder: Some(vec![1.0; n_enc]),
            decoder: vec![0.0; n_dec],
        };
        let mut state = OptimizerState::new(0.1, 0.1, 0.9, 0.0, 10, Some(n_enc), n_dec);
        assert!(matches!(
            sgd_step(&mut model, &grads, &mut state),
            Err(SegError::FrozenEncoder)
        ));
    }

    #[test]
    fn grow_by_empty_set_is_identity() {
        let dec = Decoder::new_random(ClassSet::universe(3), 4, 5);
        let grown = grow_decoder(&dec, &ClassSet::empty()).unwrap();
        assert_eq!(dec, grown);
    }

    #[test]
    fn grow_preserves_old_logits_and_zeroes_new() {
        let enc = Encoder::new_random(5, 8, 6);
        let old_classes = ClassSet::universe(10);
        let dec = Decoder::new_random(old_classes.clone(), 8, 7);
        let grown = grow_decoder(&dec, &ClassSet::new([ClassId(11)])).unwrap();
        let img = random_image(8, 8, 8);
        let fm = encode(&enc, &img);
        let before = decode(&dec, &fm).unwrap();
        let after = decode(&grown, &fm).unwrap();
        for px in 0..64 {
            for c in old_classes.iter() {
                let old_col = old_classes.position(c).unwrap();
                let new_col = grown.class_list().position(c).unwrap();
                assert_eq!(
                    before.data[px * 11 + old_col],
                    after.data[px * 12 + new_col]
                );
            }
            let new_col = grown.class_list().position(ClassId(11)).unwrap();
            assert_eq!(after.data[px * 12 + new_col], 0.0);
        }
    }

    #[test]
    fn grow_rejects_collision() {
        let dec = Decoder::new_zero(ClassSet::universe(3), 4);
        assert!(matches!(
            grow_decoder(&dec, &ClassSet::new([ClassId(2)])),
            Err(SegError::ClassCollision(2))
        ));
    }

    #[test]
    fn predict_single_class_is_constant() {
        let model = SegModel {
            encoder: Encoder::new_random(3, 4, 9),
            decoder: Decoder::new_random(ClassSet::new([ClassId(4)]), 4, 10),
        };
        let pred = predict(&model, &random_image(6, 6, 11));
        assert!(pred.labels().iter().all(|c| *c == ClassId(4)));
    }

    #[test]
    fn predict_breaks_ties_toward_lowest_id() {
        // zero weights: every class ties at logit 0
        let model = SegModel {
            encoder: Encoder::zeros(3, 4),
            decoder: Decoder::new_zero(ClassSet::new([ClassId(2), ClassId(5)]), 4),
        };
        let pred = predict(&model, &random_image(6, 6, 12));
        assert!(pred.labels().iter().all(|c| *c == ClassId(2)));
    }

    #[test]
    fn predict_matches_encode_decode_argmax_oracle() {
        let model = SegModel {
            encoder: Encoder::new_random(3, 4, 13),
            decoder: Decoder::new_random(ClassSet::universe(3), 4, 14),
        };
        let img = random_image(6, 6, 15);
        let pred = predict(&model, &img);
        let fm = encode(&model.encoder, &img);
        let logits = decode(&model.decoder, &fm).unwrap();
        for row in 0..6 {
            for col in 0..6 {
                let l = logits.at(row, col);
                let mut best = 0;
                for c in 1..4 {
                    if l[c] > l[best] {
                        best = c;
                    }
                }
                assert_eq!(pred.get(row, col), model.decoder.class_list().as_slice()[best]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_closed_form_sizes() {
        let mut enc = Encoder::new_random(5, 8, 16);
        enc.freeze();
        let model = SegModel {
            encoder: enc,
            decoder: Decoder::new_random(ClassSet::universe(4), 8, 17),
        };
        let blob = serialize_model(&model);
        assert_eq!(blob.len(), model_blob_len(5, 8, 5));
        let back = deserialize_model(&blob).unwrap();
        assert_eq!(back, model);

        let dblob = serialize_decoder(&model.decoder);
        assert_eq!(dblob.len(), decoder_blob_len(8, 5));
        let dback = deserialize_decoder(&dblob).unwrap();
        assert_eq!(dback, model.decoder);
    }

    #[test]
    fn toy_training_reduces_loss_by_ninety_percent() {
        // 20-sample linearly separable toy set: constant images whose color
        // decides the label
        let classes = ClassSet::universe(2);
        let mut batch = Vec::new();
        for i in 0..20 {
            let c = i % 3;
            let color = match c {
                0 => [0.9, 0.1, 0.1],
                1 => [0.1, 0.9, 0.1],
                _ => [0.1, 0.1, 0.9],
            };
            let img = Image::filled(6, 6, color);
            let labels = LabelMap::filled(6, 6, ClassId(c as u8));
            batch.push(Sample::new(img, labels).unwrap());
        }
        let mut enc = Encoder::new_random(3, 4, 18);
        enc.freeze();
        let mut model = SegModel {
            encoder: enc,
            decoder: Decoder::new_zero(classes, 4),
        };
        let refs: Vec<&Sample> = batch.iter().collect();
        let initial = numeric_loss(&model, &refs);
        let mut state =
            OptimizerState::new(2.0, 0.02, 0.9, 0.9, 200, None, model.decoder.num_params());
        for _ in 0..200 {
            let g = grad(&model, &refs, TrainableSet::DecoderOnly).unwrap();
            sgd_step(&mut model, &g, &mut state).unwrap();
        }
        let final_loss = numeric_loss(&model, &refs);
        assert!(
            final_loss <= 0.1 * initial,
            "loss went {initial} -> {final_loss}"
        );
    }
}
