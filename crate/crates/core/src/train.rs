//! Gradient-based supervised training: Adam, the pinned learning-rate
//! schedules, top-layer-only training over frozen features, and full
//! end-to-end backpropagation for the standard CONV baseline.
//!
//! Determinism contract: minibatch order is seeded, per-sample gradients are
//! reduced in ascending sample order, and parallelism only ever splits work
//! across disjoint output rows — so results are bit-identical for a given
//! `(seed, config, data)` regardless of thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{
    argmax_row, block_forward, feature_dim, features_for_images, logits_for_features_stable, BlockArchitecture,
    BlockLayer,
};
use crate::numeric::{cross_entropy, gemm, softmax, Matrix, Scalar};
use crate::patches::PixelGrid;

/// Adam optimizer state for one parameter group. Moments are kept in f64 so
/// the update math is identical whether the parameters are f32 or f64.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Fails on shape mismatch or NaN gradients.
pub fn adam_step<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::config(format!(
            "adam shapes disagree: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i].to_f64();
        if g.is_nan() {
            return Err(Error::training(format!(
                "NaN gradient at parameter {i} (step {t})"
            )));
        }
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        let p = params[i].to_f64() - lr * m_hat / (v_hat.sqrt() + state.eps_hat);
        params[i] = S::from_f64(p);
    }
    Ok(())
}

/// Piecewise-constant learning-rate schedules. Epochs are 1-based; asking
/// for an epoch beyond the schedule is a configuration error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    /// 70-epoch staircase: 1e-4 through epoch 15, then 8e-5 (<=30),
    /// 5e-5 (<=45), 2e-5 (<=60), 1e-5 (<=70).
    Cifar70,
    /// 48-epoch staircase: 1e-4 (<=15), 8e-5 (<=25), 5e-5 (<=35),
    /// 2e-5 (<=45), 1e-5 (<=48).
    Imagenet48,
    /// `base * (1 - (epoch-1)/epochs)`, valid for `epoch <= epochs`.
    Linear { base: f64, epochs: usize },
    Constant { value: f64 },
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> Result<f64> {
        if epoch == 0 {
            return Err(Error::config("epochs are 1-based"));
        }
        match *self {
            LrSchedule::Cifar70 => match epoch {
                1..=15 => Ok(1e-4),
                16..=30 => Ok(8e-5),
                31..=45 => Ok(5e-5),
                46..=60 => Ok(2e-5),
                61..=70 => Ok(1e-5),
                _ => Err(Error::config(format!(
                    "epoch {epoch} beyond the 70-epoch schedule"
                ))),
            },
            LrSchedule::Imagenet48 => match epoch {
                1..=15 => Ok(1e-4),
                16..=25 => Ok(8e-5),
                26..=35 => Ok(5e-5),
                36..=45 => Ok(2e-5),
                46..=48 => Ok(1e-5),
                _ => Err(Error::config(format!(
                    "epoch {epoch} beyond the 48-epoch schedule"
                ))),
            },
            LrSchedule::Linear { base, epochs } => {
                if epoch > epochs {
                    Err(Error::config(format!(
                        "epoch {epoch} beyond the {epochs}-epoch linear schedule"
                    )))
                } else {
                    Ok(base * (1.0 - (epoch - 1) as f64 / epochs as f64))
                }
            }
            LrSchedule::Constant { value } => Ok(value),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// One row of the per-epoch training log (errors in percent).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_error: f64,
    pub test_error: f64,
    pub loss: f64,
}

pub fn epoch_log_csv(rows: &[EpochRow]) -> String {
    let mut s = String::from("epoch,lr,train_error,test_error,loss\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch, r.lr, r.train_error, r.test_error, r.loss
        );
    }
    s
}

pub fn write_epoch_log(rows: &[EpochRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, epoch_log_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Softmax cross-entropy loss, error count, and raw (summed, not averaged)
/// gradients of the affine classifier on one feature minibatch.
pub fn classifier_grads<S: Scalar>(
    features: &Matrix<S>,
    labels: &[u16],
    w: &Matrix<S>,
    b: &[S],
) -> Result<(f64, usize, Matrix<S>, Vec<S>)> {
    if features.rows() != labels.len() {
        return Err(Error::config("feature/label counts disagree"));
    }
    if features.cols() != w.rows() || b.len() != w.cols() {
        return Err(Error::config("classifier shapes disagree"));
    }
    let classes = w.cols();
    let mut logits = gemm(features, false, w, false)?;
    let mut loss_sum = 0.0f64;
    let mut errors = 0usize;
    // dlogits = probs - one_hot, reused in place
    for r in 0..logits.rows() {
        let row = logits.row_mut(r);
        for c in 0..classes {
            row[c] = row[c] + b[c];
        }
        let label = labels[r] as usize;
        if argmax_row(row) != label {
            errors += 1;
        }
        let probs = softmax(row);
        loss_sum += cross_entropy(&probs, label)?.to_f64();
        row.copy_from_slice(&probs);
        row[label] = row[label] - S::one();
    }
    let gw = gemm(features, true, &logits, false)?;
    let mut gb = vec![S::zero(); classes];
    for r in 0..logits.rows() {
        let row = logits.row(r);
        for c in 0..classes {
            gb[c] = gb[c] + row[c];
        }
    }
    Ok((loss_sum, errors, gw, gb))
}

/// Trained classifier plus the per-epoch log.
#[derive(Clone, Debug)]
pub struct TopLayerResult<S: Scalar> {
    pub w: Matrix<S>,
    pub b: Vec<S>,
    pub log: Vec<EpochRow>,
}

fn top1_error_percent<S: Scalar>(logits: &Matrix<S>, labels: &[u16]) -> f64 {
    let mut errors = 0usize;
    for r in 0..logits.rows() {
        if argmax_row(logits.row(r)) != labels[r] as usize {
            errors += 1;
        }
    }
    100.0 * errors as f64 / logits.rows().max(1) as f64
}

/// Trains only the affine classifier over precomputed (frozen) features with
/// Adam and mean-over-batch gradients. Weights start at zero; `cfg.seed`
/// controls only the minibatch order.
pub fn train_top_layer<S: Scalar>(
    features: &Matrix<S>,
    labels: &[u16],
    test_features: &Matrix<S>,
    test_labels: &[u16],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<TopLayerResult<S>> {
    if features.rows() != labels.len() || test_features.rows() != test_labels.len() {
        return Err(Error::config("feature/label counts disagree"));
    }
    if features.rows() == 0 || classes == 0 {
        return Err(Error::config("empty training set or class list"));
    }
    if test_features.cols() != features.cols() {
        return Err(Error::config("train/test feature widths disagree"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if let Some(&bad) = labels.iter().chain(test_labels).find(|&&l| l as usize >= classes) {
        return Err(Error::config(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let fd = features.cols();
    let mut w = Matrix::<S>::zeros(fd, classes);
    let mut b = vec![S::zero(); classes];
    let mut w_state = AdamState::new(fd * classes);
    let mut b_state = AdamState::new(classes);
    let n = features.rows();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.lr(epoch)?;
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut err_sum = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Matrix::<S>::zeros(chunk.len(), fd);
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                batch.row_mut(r).copy_from_slice(features.row(i as usize));
                batch_labels.push(labels[i as usize]);
            }
            let (loss, errors, mut gw, mut gb) = classifier_grads(&batch, &batch_labels, &w, &b)?;
            if !loss.is_finite() {
                return Err(Error::training(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            loss_sum += loss;
            err_sum += errors;
            let scale = S::from_f64(1.0 / chunk.len() as f64);
            for v in gw.data_mut() {
                *v = *v * scale;
            }
            for v in gb.iter_mut() {
                *v = *v * scale;
            }
            adam_step(w.data_mut(), gw.data(), &mut w_state, lr)?;
            adam_step(&mut b, &gb, &mut b_state, lr)?;
        }

        let test_arch = BlockArchitecture {
            blocks: Vec::new(),
            classifier_w: w.clone(),
            classifier_b: b.clone(),
        };
        let test_logits = logits_for_features_stable(&test_arch, test_features)?;
        log.push(EpochRow {
            epoch,
            lr,
            train_error: 100.0 * err_sum as f64 / n as f64,
            test_error: top1_error_percent(&test_logits, test_labels),
            loss: loss_sum / n as f64,
        });
    }
    Ok(TopLayerResult { w, b, log })
}

/// Gradients for every parameter group of an all-CONV architecture.
#[derive(Clone, Debug)]
pub struct ArchGrads<S: Scalar> {
    pub conv_w: Vec<Matrix<S>>,
    pub conv_b: Vec<Vec<S>>,
    pub cls_w: Matrix<S>,
    pub cls_b: Vec<S>,
}

impl<S: Scalar> ArchGrads<S> {
    fn zeros_like(arch: &BlockArchitecture<S>) -> Result<Self> {
        let mut conv_w = Vec::with_capacity(arch.blocks.len());
        let mut conv_b = Vec::with_capacity(arch.blocks.len());
        for block in &arch.blocks {
            match &block.layer {
                BlockLayer::Conv(l) => {
                    conv_w.push(Matrix::zeros(l.weights.rows(), l.weights.cols()));
                    conv_b.push(vec![S::zero(); l.biases.len()]);
                }
                BlockLayer::Nnl(_) => {
                    return Err(Error::config(
                        "end-to-end training requires CONV blocks; backprop through \
                         patch normalization is out of scope",
                    ))
                }
            }
        }
        Ok(ArchGrads {
            conv_w,
            conv_b,
            cls_w: Matrix::zeros(arch.classifier_w.rows(), arch.classifier_w.cols()),
            cls_b: vec![S::zero(); arch.classifier_b.len()],
        })
    }

    fn add(&mut self, other: &ArchGrads<S>) {
        for (a, o) in self.conv_w.iter_mut().zip(&other.conv_w) {
            for (x, y) in a.data_mut().iter_mut().zip(o.data()) {
                *x = *x + *y;
            }
        }
        for (a, o) in self.conv_b.iter_mut().zip(&other.conv_b) {
            for (x, y) in a.iter_mut().zip(o) {
                *x = *x + *y;
            }
        }
        for (x, y) in self.cls_w.data_mut().iter_mut().zip(other.cls_w.data()) {
            *x = *x + *y;
        }
        for (x, y) in self.cls_b.iter_mut().zip(&other.cls_b) {
            *x = *x + *y;
        }
    }

    fn scale(&mut self, s: f64) {
        let s = S::from_f64(s);
        for m in &mut self.conv_w {
            for v in m.data_mut() {
                *v = *v * s;
            }
        }
        for b in &mut self.conv_b {
            for v in b.iter_mut() {
                *v = *v * s;
            }
        }
        for v in self.cls_w.data_mut() {
            *v = *v * s;
        }
        for v in self.cls_b.iter_mut() {
            *v = *v * s;
        }
    }
}

/// Cross-entropy loss of the architecture on one image (used for finite
/// difference checks and the memorization sanity test).
pub fn e2e_loss<S: Scalar>(
    arch: &BlockArchitecture<S>,
    image: &[S],
    h: usize,
    w: usize,
    label: usize,
) -> Result<S> {
    let (logits, _) = block_forward(arch, image, h, w)?;
    cross_entropy(&softmax(&logits), label)
}

/// Full backward pass for one image: softmax cross-entropy at the top, then
/// classifier, un-concatenation into per-block pooled grads, max-pool
/// routing to the stored argmax, ReLU mask, and convolution weight/bias
/// gradients. Returns (loss, predicted class, gradients).
pub fn e2e_grads<S: Scalar>(
    arch: &BlockArchitecture<S>,
    image: &[S],
    h: usize,
    w: usize,
    label: usize,
) -> Result<(S, usize, ArchGrads<S>)> {
    let mut grads = ArchGrads::zeros_like(arch)?;
    let (logits, cache) = block_forward(arch, image, h, w)?;
    let pred = argmax_row(&logits);
    let probs = softmax(&logits);
    let loss = cross_entropy(&probs, label)?;
    let classes = arch.classes();
    let mut dlogits = probs;
    dlogits[label] = dlogits[label] - S::one();

    // classifier
    grads.cls_b.copy_from_slice(&dlogits);
    let features = &cache.features;
    for f in 0..features.len() {
        let out = grads.cls_w.row_mut(f);
        let v = features[f];
        for c in 0..classes {
            out[c] = v * dlogits[c];
        }
    }
    // feature gradient
    let mut dfeat = vec![S::zero(); features.len()];
    for f in 0..features.len() {
        let wrow = arch.classifier_w.row(f);
        let mut acc = S::zero();
        for c in 0..classes {
            acc = acc + wrow[c] * dlogits[c];
        }
        dfeat[f] = acc;
    }

    // per block: un-concatenate, route through pool and ReLU, then conv
    let mut off = 0;
    for (bi, bc) in cache.blocks.iter().enumerate() {
        let pooled_len = bc.pooled.data.data().len();
        let dpooled = &dfeat[off..off + pooled_len];
        off += pooled_len;

        let k = bc.post.channels();
        let positions = bc.post.h * bc.post.w;
        let per_channel = bc.pooled.h * bc.pooled.w;
        let mut dpost = Matrix::<S>::zeros(k, positions);
        for ch in 0..k {
            for j in 0..per_channel {
                let src = bc.argmax[ch * per_channel + j] as usize;
                let cell = dpost.get(ch, src) + dpooled[ch * per_channel + j];
                dpost.set(ch, src, cell);
            }
        }
        // ReLU mask from the cached pre-activations
        let mut dpre = dpost;
        for ch in 0..k {
            let pre = bc.pre_act.row(ch);
            let row = dpre.row_mut(ch);
            for p in 0..positions {
                if !(pre[p] > S::zero()) {
                    row[p] = S::zero();
                }
            }
        }
        grads.conv_w[bi] = gemm(&dpre, false, &bc.patches, false)?;
        let gb = &mut grads.conv_b[bi];
        for ch in 0..k {
            let mut acc = S::zero();
            for &v in dpre.row(ch) {
                acc = acc + v;
            }
            gb[ch] = acc;
        }
    }
    Ok((loss, pred, grads))
}

/// Trains an all-CONV architecture end-to-end with Adam. Per-sample
/// gradients inside a minibatch are accumulated serially in sample order
/// (mean reduction), so results do not depend on the thread count.
pub fn train_end_to_end<S: Scalar>(
    arch: &mut BlockArchitecture<S>,
    train: PixelGrid<'_, S>,
    train_labels: &[u16],
    test: PixelGrid<'_, S>,
    test_labels: &[u16],
    cfg: &TrainConfig,
) -> Result<Vec<EpochRow>> {
    if train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(Error::config("image/label counts disagree"));
    }
    if train.is_empty() {
        return Err(Error::config("empty training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let classes = arch.classes();
    if let Some(&bad) = train_labels.iter().chain(test_labels).find(|&&l| (l as usize) >= classes) {
        return Err(Error::config(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let fd = feature_dim(&arch.blocks, train.height(), train.width())?;
    if fd != arch.classifier_w.rows() {
        return Err(Error::config(format!(
            "classifier expects {} features, architecture produces {fd}",
            arch.classifier_w.rows()
        )));
    }
    // reject NNL blocks up front
    let _ = ArchGrads::zeros_like(arch)?;

    let mut conv_w_states: Vec<AdamState> = Vec::new();
    let mut conv_b_states: Vec<AdamState> = Vec::new();
    for block in &arch.blocks {
        if let BlockLayer::Conv(l) = &block.layer {
            conv_w_states.push(AdamState::new(l.weights.rows() * l.weights.cols()));
            conv_b_states.push(AdamState::new(l.biases.len()));
        }
    }
    let mut cls_w_state = AdamState::new(arch.classifier_w.rows() * arch.classifier_w.cols());
    let mut cls_b_state = AdamState::new(arch.classifier_b.len());

    let n = train.len();
    let (h, w) = (train.height(), train.width());
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.lr(epoch)?;
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut err_sum = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc = ArchGrads::zeros_like(arch)?;
            for &i in chunk {
                let (loss, pred, g) = e2e_grads(arch, train.image(i as usize), h, w, train_labels[i as usize] as usize)?;
                let l = loss.to_f64();
                if !l.is_finite() {
                    return Err(Error::training(format!(
                        "non-finite loss on sample {i} at epoch {epoch}"
                    )));
                }
                loss_sum += l;
                if pred != train_labels[i as usize] as usize {
                    err_sum += 1;
                }
                acc.add(&g);
            }
            acc.scale(1.0 / chunk.len() as f64);
            for (bi, block) in arch.blocks.iter_mut().enumerate() {
                if let BlockLayer::Conv(l) = &mut block.layer {
                    adam_step(l.weights.data_mut(), acc.conv_w[bi].data(), &mut conv_w_states[bi], lr)?;
                    adam_step(&mut l.biases, &acc.conv_b[bi], &mut conv_b_states[bi], lr)?;
                }
            }
            adam_step(arch.classifier_w.data_mut(), acc.cls_w.data(), &mut cls_w_state, lr)?;
            adam_step(&mut arch.classifier_b, &acc.cls_b, &mut cls_b_state, lr)?;
        }

        let test_feats = features_for_images(&arch.blocks, test)?;
        let test_logits = logits_for_features_stable(arch, &test_feats)?;
        log.push(EpochRow {
            epoch,
            lr,
            train_error: 100.0 * err_sum as f64 / n as f64,
            test_error: top1_error_percent(&test_logits, test_labels),
            loss: loss_sum / n as f64,
        });
    }
    Ok(log)
}

/// Seeded fan-in-scaled normal init (std 1/sqrt(N)) for an end-to-end CONV
/// layer's weights; biases start at zero, classifier at zero.
pub fn init_conv_weights(k: usize, patch_len: usize, seed: u64) -> Matrix<f32> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (patch_len as f64).sqrt();
    let mut m = Matrix::zeros(k, patch_len);
    for v in m.data_mut() {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v = (g * std) as f32;
    }
    m
}
