//! Network layers and forward passes.
//!
//! Two convolution flavors share one block shape (conv -> max-pool):
//!
//! * NNL: each patch is L2-normalized, dotted with unit-norm filters (so the
//!   current is a cosine similarity), then passed through `relu(x)^n`. The
//!   normalization makes every output — and therefore the whole network's
//!   prediction — invariant to uniform rescaling of the image.
//! * standard CONV: raw dot product plus a per-channel bias, then ReLU. No
//!   normalization, no invariance; this is the backprop-trainable baseline.
//!
//! Pooled block outputs are flattened channel-major (channel, then row, then
//! column), concatenated in block order, and fed to an affine classifier.
//! That flatten order is frozen into the model file format.

use rayon::prelude::*;

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::hebbian::{filter_bank_bytes, filter_bank_from_bytes, FilterBank};
use crate::numeric::{dot_stable, gemm, l2_normalize, rectified_power, Matrix, Scalar};
use crate::patches::{extract_patches, PixelGrid, GRID_CHANNELS};

/// Convolution with per-patch L2 normalization and rectified power output.
#[derive(Clone, Debug, PartialEq)]
pub struct NnlConvLayer<S: Scalar> {
    /// K x N filters; rows are expected (not enforced) to be unit-norm.
    pub filters: Matrix<S>,
    /// Final-epoch win counts carried along from training for inspection.
    pub win_counts: Vec<u64>,
    pub window: usize,
    pub stride: usize,
    /// Exponent of `relu(x)^n`.
    pub power: u32,
}

impl NnlConvLayer<f32> {
    pub fn from_bank(bank: FilterBank, power: u32, stride: usize) -> Self {
        NnlConvLayer {
            window: bank.window,
            win_counts: bank.win_counts,
            filters: bank.m,
            stride,
            power,
        }
    }

    pub fn to_bank(&self) -> FilterBank {
        FilterBank {
            m: self.filters.clone(),
            window: self.window,
            win_counts: self.win_counts.clone(),
            epochs_trained: 0,
            seed: 0,
        }
    }
}

/// Standard convolution: dot product + bias, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<S: Scalar> {
    pub weights: Matrix<S>,
    pub biases: Vec<S>,
    pub window: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockLayer<S: Scalar> {
    Nnl(NnlConvLayer<S>),
    Conv(ConvLayer<S>),
}

impl<S: Scalar> BlockLayer<S> {
    pub fn channels(&self) -> usize {
        match self {
            BlockLayer::Nnl(l) => l.filters.rows(),
            BlockLayer::Conv(l) => l.weights.rows(),
        }
    }

    pub fn window(&self) -> usize {
        match self {
            BlockLayer::Nnl(l) => l.window,
            BlockLayer::Conv(l) => l.window,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            BlockLayer::Nnl(l) => l.stride,
            BlockLayer::Conv(l) => l.stride,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxPoolLayer {
    pub window: usize,
    pub stride: usize,
}

/// One conv (either flavor) followed by max-pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<S: Scalar> {
    pub layer: BlockLayer<S>,
    pub pool: MaxPoolLayer,
}

/// Blocks plus the affine classifier over their concatenated pooled maps.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockArchitecture<S: Scalar> {
    pub blocks: Vec<Block<S>>,
    /// feature_dim x classes.
    pub classifier_w: Matrix<S>,
    pub classifier_b: Vec<S>,
}

impl<S: Scalar> BlockArchitecture<S> {
    pub fn classes(&self) -> usize {
        self.classifier_b.len()
    }

    pub fn cast<U: Scalar>(&self) -> BlockArchitecture<U> {
        BlockArchitecture {
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    layer: match &b.layer {
                        BlockLayer::Nnl(l) => BlockLayer::Nnl(NnlConvLayer {
                            filters: l.filters.cast(),
                            win_counts: l.win_counts.clone(),
                            window: l.window,
                            stride: l.stride,
                            power: l.power,
                        }),
                        BlockLayer::Conv(l) => BlockLayer::Conv(ConvLayer {
                            weights: l.weights.cast(),
                            biases: l.biases.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
                            window: l.window,
                            stride: l.stride,
                        }),
                    },
                    pool: b.pool,
                })
                .collect(),
            classifier_w: self.classifier_w.cast(),
            classifier_b: self
                .classifier_b
                .iter()
                .map(|&v| U::from_f64(v.to_f64()))
                .collect(),
        }
    }
}

/// A channels x (h*w) activation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<S: Scalar> {
    /// One row per channel, positions row-major.
    pub data: Matrix<S>,
    pub h: usize,
    pub w: usize,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn channels(&self) -> usize {
        self.data.rows()
    }
}

/// Output grid side lengths of a valid (no padding) sliding window.
pub fn conv_out_dims(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::config("window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::config(format!(
            "window {window} exceeds input {h}x{w}"
        )));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

/// Flattened feature length this architecture produces on an h x w image.
pub fn feature_dim<S: Scalar>(blocks: &[Block<S>], h: usize, w: usize) -> Result<usize> {
    let mut dim = 0;
    for b in blocks {
        let (ch, cw) = conv_out_dims(h, w, b.layer.window(), b.layer.stride())?;
        let (ph, pw) = conv_out_dims(ch, cw, b.pool.window, b.pool.stride)?;
        dim += b.layer.channels() * ph * pw;
    }
    Ok(dim)
}

/// Normalized-patch cosine convolution with rectified power activation.
pub fn nnl_conv_forward<S: Scalar>(
    layer: &NnlConvLayer<S>,
    image: &[S],
    h: usize,
    w: usize,
) -> Result<FeatureMap<S>> {
    let mut patches = extract_patches(image, h, w, layer.window, layer.stride)?;
    if patches.cols() != layer.filters.cols() {
        return Err(Error::config(format!(
            "patch length {} does not match filter length {}",
            patches.cols(),
            layer.filters.cols()
        )));
    }
    for p in 0..patches.rows() {
        l2_normalize(patches.row_mut(p));
    }
    let (oh, ow) = conv_out_dims(h, w, layer.window, layer.stride)?;
    let k = layer.filters.rows();
    let positions = patches.rows();
    let mut data = Matrix::zeros(k, positions);
    data.data_mut()
        .par_chunks_exact_mut(positions.max(1))
        .enumerate()
        .for_each(|(mu, out)| {
            let f = layer.filters.row(mu);
            for p in 0..positions {
                // f64 accumulation keeps the cosine (and its n-th power)
                // stable enough for the scale-invariance guarantee.
                let cosine = dot_stable(f, patches.row(p));
                out[p] = S::from_f64(rectified_power(cosine, layer.power));
            }
        });
    Ok(FeatureMap { data, h: oh, w: ow })
}

/// Standard convolution forward pass; returns the post-ReLU map.
pub fn conv_forward<S: Scalar>(
    layer: &ConvLayer<S>,
    image: &[S],
    h: usize,
    w: usize,
) -> Result<FeatureMap<S>> {
    let (map, _, _) = conv_forward_cached(layer, image, h, w)?;
    Ok(map)
}

/// As [`conv_forward`], but also returns the pre-activation currents and the
/// raw patch matrix needed to backpropagate through the layer.
pub fn conv_forward_cached<S: Scalar>(
    layer: &ConvLayer<S>,
    image: &[S],
    h: usize,
    w: usize,
) -> Result<(FeatureMap<S>, Matrix<S>, Matrix<S>)> {
    let patches = extract_patches(image, h, w, layer.window, layer.stride)?;
    if patches.cols() != layer.weights.cols() {
        return Err(Error::config(format!(
            "patch length {} does not match filter length {}",
            patches.cols(),
            layer.weights.cols()
        )));
    }
    if layer.biases.len() != layer.weights.rows() {
        return Err(Error::config("bias count does not match filter count"));
    }
    let (oh, ow) = conv_out_dims(h, w, layer.window, layer.stride)?;
    let mut pre = gemm(&layer.weights, false, &patches, true)?;
    for k in 0..layer.weights.rows() {
        let b = layer.biases[k];
        for v in pre.row_mut(k) {
            *v = *v + b;
        }
    }
    let mut post = pre.clone();
    for v in post.data_mut() {
        if !(*v > S::zero()) {
            *v = S::zero();
        }
    }
    Ok((FeatureMap { data: post, h: oh, w: ow }, pre, patches))
}

/// Max pooling; returns the pooled map and, per output cell, the flat
/// (row * width + col) index of its source inside that channel's input grid.
/// Ties pick the lowest index.
pub fn maxpool_forward<S: Scalar>(
    pool: &MaxPoolLayer,
    map: &FeatureMap<S>,
) -> Result<(FeatureMap<S>, Vec<u32>)> {
    let (oh, ow) = conv_out_dims(map.h, map.w, pool.window, pool.stride)?;
    let k = map.channels();
    let mut out = Matrix::zeros(k, oh * ow);
    let mut argmax = vec![0u32; k * oh * ow];
    let out_cols = oh * ow;
    out.data_mut()
        .par_chunks_exact_mut(out_cols.max(1))
        .zip(argmax.par_chunks_exact_mut(out_cols.max(1)))
        .enumerate()
        .for_each(|(ch, (orow, arow))| {
            let src = map.data.row(ch);
            for pr in 0..oh {
                for pc in 0..ow {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0u32;
                    for dr in 0..pool.window {
                        let r = pr * pool.stride + dr;
                        for dc in 0..pool.window {
                            let c = pc * pool.stride + dc;
                            let idx = r * map.w + c;
                            let v = src[idx];
                            if v > best {
                                best = v;
                                best_idx = idx as u32;
                            }
                        }
                    }
                    orow[pr * ow + pc] = best;
                    arow[pr * ow + pc] = best_idx;
                }
            }
        });
    Ok((FeatureMap { data: out, h: oh, w: ow }, argmax))
}

/// Everything one block computed for one image, kept for backprop.
#[derive(Clone, Debug)]
pub struct BlockCache<S: Scalar> {
    /// Patch matrix fed to the convolution (normalized iff NNL).
    pub patches: Matrix<S>,
    pub patches_normalized: bool,
    /// Pre-activation currents (K x positions); for NNL these are cosines.
    pub pre_act: Matrix<S>,
    pub post: FeatureMap<S>,
    pub pooled: FeatureMap<S>,
    pub argmax: Vec<u32>,
}

/// Forward pass of one block with full caching.
pub fn block_forward_cached<S: Scalar>(
    block: &Block<S>,
    image: &[S],
    h: usize,
    w: usize,
) -> Result<BlockCache<S>> {
    match &block.layer {
        BlockLayer::Nnl(layer) => {
            let mut patches = extract_patches(image, h, w, layer.window, layer.stride)?;
            for p in 0..patches.rows() {
                l2_normalize(patches.row_mut(p));
            }
            let post = nnl_conv_forward(layer, image, h, w)?;
            // recompute cosines as the pre-activation record
            let pre = gemm(&layer.filters, false, &patches, true)?;
            let (pooled, argmax) = maxpool_forward(&block.pool, &post)?;
            Ok(BlockCache {
                patches,
                patches_normalized: true,
                pre_act: pre,
                post,
                pooled,
                argmax,
            })
        }
        BlockLayer::Conv(layer) => {
            let (post, pre, patches) = conv_forward_cached(layer, image, h, w)?;
            let (pooled, argmax) = maxpool_forward(&block.pool, &post)?;
            Ok(BlockCache {
                patches,
                patches_normalized: false,
                pre_act: pre,
                post,
                pooled,
                argmax,
            })
        }
    }
}

/// Full forward state for one image.
#[derive(Clone, Debug)]
pub struct ForwardCache<S: Scalar> {
    pub blocks: Vec<BlockCache<S>>,
    /// Concatenated flattened pooled maps, block-major then channel-major.
    pub features: Vec<S>,
}

/// Runs every block, concatenates pooled features, applies the classifier.
pub fn block_forward<S: Scalar>(
    arch: &BlockArchitecture<S>,
    image: &[S],
    h: usize,
    w: usize,
) -> Result<(Vec<S>, ForwardCache<S>)> {
    let mut caches = Vec::with_capacity(arch.blocks.len());
    let mut features = Vec::new();
    for block in &arch.blocks {
        let cache = block_forward_cached(block, image, h, w)?;
        features.extend_from_slice(cache.pooled.data.data());
        caches.push(cache);
    }
    let logits = classifier_logits(arch, &features)?;
    Ok((
        logits,
        ForwardCache {
            blocks: caches,
            features,
        },
    ))
}

/// Affine classifier on a single feature vector.
pub fn classifier_logits<S: Scalar>(arch: &BlockArchitecture<S>, features: &[S]) -> Result<Vec<S>> {
    if features.len() != arch.classifier_w.rows() {
        return Err(Error::config(format!(
            "feature length {} does not match classifier input {}",
            features.len(),
            arch.classifier_w.rows()
        )));
    }
    let classes = arch.classes();
    if arch.classifier_w.cols() != classes {
        return Err(Error::config("classifier weight/bias shape mismatch"));
    }
    // f64 accumulation: evaluation must not let summation noise across
    // thousands of features undo the invariances the features guarantee
    let mut acc: Vec<f64> = arch.classifier_b.iter().map(|&b| b.to_f64()).collect();
    for (f, &v) in features.iter().enumerate() {
        let wrow = arch.classifier_w.row(f);
        let vf = v.to_f64();
        for c in 0..classes {
            acc[c] += vf * wrow[c].to_f64();
        }
    }
    Ok(acc.into_iter().map(S::from_f64).collect())
}

/// Feature matrix (images x feature_dim) for a whole image set; rows are
/// independent, so this parallelizes over images without affecting values.
pub fn features_for_images<S: Scalar>(
    blocks: &[Block<S>],
    grid: PixelGrid<'_, S>,
) -> Result<Matrix<S>> {
    let fd = feature_dim(blocks, grid.height(), grid.width())?;
    let mut out = Matrix::zeros(grid.len(), fd);
    let h = grid.height();
    let w = grid.width();
    let results: Result<Vec<()>> = out
        .data_mut()
        .par_chunks_exact_mut(fd.max(1))
        .enumerate()
        .map(|(i, row)| {
            let image = grid.image(i);
            let mut off = 0;
            for block in blocks {
                let map = match &block.layer {
                    BlockLayer::Nnl(l) => nnl_conv_forward(l, image, h, w)?,
                    BlockLayer::Conv(l) => conv_forward(l, image, h, w)?,
                };
                let (pooled, _) = maxpool_forward(&block.pool, &map)?;
                let chunk = pooled.data.data();
                row[off..off + chunk.len()].copy_from_slice(chunk);
                off += chunk.len();
            }
            Ok(())
        })
        .collect();
    results?;
    Ok(out)
}

/// Batched classifier logits: features (B x F) -> logits (B x C).
pub fn logits_for_features<S: Scalar>(
    arch: &BlockArchitecture<S>,
    features: &Matrix<S>,
) -> Result<Matrix<S>> {
    if features.cols() != arch.classifier_w.rows() {
        return Err(Error::config(format!(
            "feature length {} does not match classifier input {}",
            features.cols(),
            arch.classifier_w.rows()
        )));
    }
    let mut logits = gemm(features, false, &arch.classifier_w, false)?;
    let classes = arch.classes();
    for r in 0..logits.rows() {
        let row = logits.row_mut(r);
        for c in 0..classes {
            row[c] = row[c] + arch.classifier_b[c];
        }
    }
    Ok(logits)
}

/// Like [`logits_for_features`] but with f64 accumulation per logit
/// (see [`classifier_logits`]); the evaluation-path counterpart of the
/// faster training gemm.
pub fn logits_for_features_stable<S: Scalar>(
    arch: &BlockArchitecture<S>,
    features: &Matrix<S>,
) -> Result<Matrix<S>> {
    if features.cols() != arch.classifier_w.rows() {
        return Err(Error::config(format!(
            "feature length {} does not match classifier input {}",
            features.cols(),
            arch.classifier_w.rows()
        )));
    }
    let classes = arch.classes();
    let mut out = Matrix::zeros(features.rows(), classes);
    out.data_mut()
        .par_chunks_exact_mut(classes)
        .enumerate()
        .for_each(|(r, row)| {
            let logits = classifier_logits(arch, features.row(r)).expect("validated above");
            row.copy_from_slice(&logits);
        });
    Ok(out)
}

/// Index of the largest value; ties pick the lowest index.
pub fn argmax_row<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const MODEL_MAGIC: &[u8; 4] = b"NNLM";
const MODEL_VERSION: u32 = 1;
const TAG_NNL: u32 = 0;
const TAG_CONV: u32 = 1;

fn push_u32(out: &mut Vec<u8>, v: u32) {
    let mut b = [0u8; 4];
    LittleEndian::write_u32(&mut b, v);
    out.extend_from_slice(&b);
}

fn push_f32(out: &mut Vec<u8>, v: f32) {
    let mut b = [0u8; 4];
    LittleEndian::write_f32(&mut b, v);
    out.extend_from_slice(&b);
}

/// Serializes a model: "NNLM" magic, version, block count; per block a type
/// tag (0 = NNL with an embedded filter-bank record, 1 = CONV with raw
/// weights and biases) followed by power n, conv stride, pool window, pool
/// stride; then classifier dims, weights (feature_dim x classes, row-major)
/// and biases. All scalars f32/u32 LE; round-trips bit-exactly.
pub fn save_model(arch: &BlockArchitecture<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&model_bytes(arch)).map_err(|e| Error::io(path, e))
}

pub fn model_bytes(arch: &BlockArchitecture<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    push_u32(&mut out, MODEL_VERSION);
    push_u32(&mut out, arch.blocks.len() as u32);
    for block in &arch.blocks {
        match &block.layer {
            BlockLayer::Nnl(l) => {
                push_u32(&mut out, TAG_NNL);
                out.extend_from_slice(&filter_bank_bytes(&l.to_bank()));
                push_u32(&mut out, l.power);
                push_u32(&mut out, l.stride as u32);
            }
            BlockLayer::Conv(l) => {
                push_u32(&mut out, TAG_CONV);
                push_u32(&mut out, l.weights.rows() as u32);
                push_u32(&mut out, l.window as u32);
                for &v in l.weights.data() {
                    push_f32(&mut out, v);
                }
                for &v in &l.biases {
                    push_f32(&mut out, v);
                }
                push_u32(&mut out, 1); // power (ReLU exponent, fixed 1)
                push_u32(&mut out, l.stride as u32);
            }
        }
        push_u32(&mut out, block.pool.window as u32);
        push_u32(&mut out, block.pool.stride as u32);
    }
    push_u32(&mut out, arch.classifier_w.rows() as u32);
    push_u32(&mut out, arch.classifier_w.cols() as u32);
    for &v in arch.classifier_w.data() {
        push_f32(&mut out, v);
    }
    for &v in &arch.classifier_b {
        push_f32(&mut out, v);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.off + n > self.bytes.len() {
            return Err("unexpected end of file".into());
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn f32(&mut self) -> std::result::Result<f32, String> {
        Ok(LittleEndian::read_f32(self.take(4)?))
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<BlockArchitecture<f32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn model_from_bytes(bytes: &[u8]) -> std::result::Result<BlockArchitecture<f32>, String> {
    let mut r = Reader { bytes, off: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err("missing NNLM header".into());
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let n_blocks = r.u32()? as usize;
    if n_blocks == 0 {
        return Err("model has no blocks".into());
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let tag = r.u32()?;
        let layer = match tag {
            TAG_NNL => {
                // the embedded bank record is self-describing: peek K and W
                // from its header to know its length.
                let head = r.take(24)?;
                let k = LittleEndian::read_u32(&head[8..12]) as usize;
                let window = LittleEndian::read_u32(&head[12..16]) as usize;
                let n = window * window * GRID_CHANNELS;
                let body = r.take(4 * k * n + 8 * k)?;
                let mut rec = Vec::with_capacity(24 + body.len());
                rec.extend_from_slice(head);
                rec.extend_from_slice(body);
                let bank = filter_bank_from_bytes(&rec)?;
                let power = r.u32()?;
                let stride = r.u32()? as usize;
                if power == 0 || stride == 0 {
                    return Err("power and stride must be positive".into());
                }
                BlockLayer::Nnl(NnlConvLayer::from_bank(bank, power, stride))
            }
            TAG_CONV => {
                let k = r.u32()? as usize;
                let window = r.u32()? as usize;
                if k == 0 || window == 0 {
                    return Err("empty conv layer".into());
                }
                let n = window * window * GRID_CHANNELS;
                let mut data = Vec::with_capacity(k * n);
                for _ in 0..k * n {
                    data.push(r.f32()?);
                }
                let mut biases = Vec::with_capacity(k);
                for _ in 0..k {
                    biases.push(r.f32()?);
                }
                let _power = r.u32()?;
                let stride = r.u32()? as usize;
                if stride == 0 {
                    return Err("stride must be positive".into());
                }
                BlockLayer::Conv(ConvLayer {
                    weights: Matrix::from_vec(k, n, data).map_err(|e| e.to_string())?,
                    biases,
                    window,
                    stride,
                })
            }
            other => return Err(format!("unknown block type tag {other}")),
        };
        let pool_window = r.u32()? as usize;
        let pool_stride = r.u32()? as usize;
        if pool_window == 0 || pool_stride == 0 {
            return Err("pool window and stride must be positive".into());
        }
        blocks.push(Block {
            layer,
            pool: MaxPoolLayer {
                window: pool_window,
                stride: pool_stride,
            },
        });
    }
    let fd = r.u32()? as usize;
    let classes = r.u32()? as usize;
    if classes == 0 {
        return Err("classifier has no classes".into());
    }
    let mut wdata = Vec::with_capacity(fd * classes);
    for _ in 0..fd * classes {
        wdata.push(r.f32()?);
    }
    let mut biases = Vec::with_capacity(classes);
    for _ in 0..classes {
        biases.push(r.f32()?);
    }
    if r.off != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.off));
    }
    Ok(BlockArchitecture {
        blocks,
        classifier_w: Matrix::from_vec(fd, classes, wdata).map_err(|e| e.to_string())?,
        classifier_b: biases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(m: &mut Matrix<f32>) {
        for r in 0..m.rows() {
            l2_normalize(m.row_mut(r));
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f32> {
        (0..h * w * 3).map(|_| rng.gen_range(0.0f32..1.0)).collect()
    }

    fn nnl_layer(rng: &mut ChaCha8Rng, k: usize, window: usize, stride: usize, power: u32) -> NnlConvLayer<f32> {
        let mut filters = Matrix::from_fn(k, window * window * 3, |_, _| rng.gen_range(-1.0f32..1.0));
        unit_rows(&mut filters);
        NnlConvLayer {
            filters,
            win_counts: vec![1; k],
            window,
            stride,
            power,
        }
    }

    #[test]
    fn nnl_matching_patch_activates_fully() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // 2x2 image: single patch position; filter 0 = normalized image
        let image: Vec<f32> = (0..12).map(|_| rng.gen_range(0.1f32..1.0)).collect();
        let mut filters = Matrix::zeros(2, 12);
        filters.row_mut(0).copy_from_slice(&image);
        l2_normalize(filters.row_mut(0));
        filters.set(1, 0, 1.0); // arbitrary second filter
        let layer = NnlConvLayer {
            filters,
            win_counts: vec![1, 1],
            window: 2,
            stride: 1,
            power: 40,
        };
        // positive rescaling of the image must still give cosine 1
        let scaled: Vec<f32> = image.iter().map(|v| v * 0.37).collect();
        let map = nnl_conv_forward(&layer, &scaled, 2, 2).unwrap();
        assert!((map.data.get(0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn nnl_orthogonal_patch_is_zero() {
        let mut filters = Matrix::zeros(1, 12);
        filters.set(0, 0, 1.0);
        let layer = NnlConvLayer {
            filters,
            win_counts: vec![1],
            window: 2,
            stride: 1,
            power: 7,
        };
        let mut image = vec![0.0f32; 12];
        image[1] = 0.9; // orthogonal to e0
        let map = nnl_conv_forward(&layer, &image, 2, 2).unwrap();
        assert_eq!(map.data.get(0, 0), 0.0);
    }

    #[test]
    fn nnl_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = nnl_layer(&mut rng, 400, 4, 1, 40);
        let image = random_image(&mut rng, 32, 32);
        let map = nnl_conv_forward(&layer, &image, 32, 32).unwrap();
        assert_eq!((map.h, map.w), (29, 29));
        assert_eq!(map.channels(), 400);

        // independent f64 oracle over a sample of positions and all filters
        for &(pr, pc) in &[(0usize, 0usize), (3, 17), (28, 28), (11, 5)] {
            let mut patch = vec![0.0f64; 48];
            let mut idx = 0;
            for ch in 0..3 {
                for dr in 0..4 {
                    for dc in 0..4 {
                        patch[idx] = f64::from(image[ch * 1024 + (pr + dr) * 32 + (pc + dc)]);
                        idx += 1;
                    }
                }
            }
            let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..400 {
                let mut dot = 0.0f64;
                for j in 0..48 {
                    dot += patch[j] / norm * f64::from(layer.filters.get(k, j));
                }
                let want = if dot > 0.0 { dot.powi(40) } else { 0.0 };
                let got = f64::from(map.data.get(k, pr * 29 + pc));
                assert!(
                    (got - want).abs() <= 1e-5,
                    "filter {k} at ({pr},{pc}): {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn nnl_outputs_bounded_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = nnl_layer(&mut rng, 16, 3, 2, 5);
        let image = random_image(&mut rng, 8, 8);
        let map = nnl_conv_forward(&layer, &image, 8, 8).unwrap();
        for &v in map.data.data() {
            assert!((0.0..=1.0 + 1e-6).contains(&v));
        }
    }

    #[test]
    fn conv_zero_weights_bias_gives_constant_map() {
        let layer = ConvLayer {
            weights: Matrix::zeros(3, 12),
            biases: vec![0.5, 0.0, -1.0],
            window: 2,
            stride: 1,
        };
        let image = vec![0.7f32; 27]; // 3x3 image
        let map = conv_forward(&layer, &image, 3, 3).unwrap();
        assert!(map.data.row(0).iter().all(|&v| v == 0.5));
        assert!(map.data.row(1).iter().all(|&v| v == 0.0));
        assert!(map.data.row(2).iter().all(|&v| v == 0.0), "ReLU clips negative bias");
    }

    #[test]
    fn conv_currents_scale_linearly_with_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = ConvLayer {
            weights: Matrix::from_fn(4, 12, |_, _| rng.gen_range(-1.0f32..1.0)),
            biases: vec![0.0; 4],
            window: 2,
            stride: 1,
        };
        let image = random_image(&mut rng, 4, 4);
        let scaled: Vec<f32> = image.iter().map(|v| v * 0.3).collect();
        let a = conv_forward(&layer, &image, 4, 4).unwrap();
        let b = conv_forward(&layer, &scaled, 4, 4).unwrap();
        let mut some_nonzero = false;
        for (x, y) in a.data.data().iter().zip(b.data.data()) {
            assert!((x * 0.3 - y).abs() < 1e-5, "outputs must scale, not stay invariant");
            some_nonzero |= *x > 0.0;
        }
        assert!(some_nonzero);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = ConvLayer {
            weights: Matrix::from_fn(5, 27, |_, _| rng.gen_range(-1.0f32..1.0)),
            biases: (0..5).map(|_| rng.gen_range(-0.5f32..0.5)).collect(),
            window: 3,
            stride: 2,
        };
        let image = random_image(&mut rng, 9, 9);
        let map = conv_forward(&layer, &image, 9, 9).unwrap();
        assert_eq!((map.h, map.w), (4, 4));
        for k in 0..5 {
            for pr in 0..4 {
                for pc in 0..4 {
                    let mut acc = f64::from(layer.biases[k]);
                    let mut j = 0;
                    for ch in 0..3 {
                        for dr in 0..3 {
                            for dc in 0..3 {
                                let px = image[ch * 81 + (pr * 2 + dr) * 9 + (pc * 2 + dc)];
                                acc += f64::from(px) * f64::from(layer.weights.get(k, j));
                                j += 1;
                            }
                        }
                    }
                    let want = acc.max(0.0);
                    let got = f64::from(map.data.get(k, pr * 4 + pc));
                    assert!((got - want).abs() <= 1e-5);
                }
            }
        }
    }

    #[test]
    fn maxpool_window11_stride2_dims() {
        let map = FeatureMap {
            data: Matrix::<f32>::zeros(2, 29 * 29),
            h: 29,
            w: 29,
        };
        let (pooled, _) = maxpool_forward(&MaxPoolLayer { window: 11, stride: 2 }, &map).unwrap();
        assert_eq!((pooled.h, pooled.w), (10, 10));
    }

    #[test]
    fn maxpool_constant_map_takes_first_index() {
        let map = FeatureMap {
            data: Matrix::from_fn(1, 16, |_, _| 0.25f32),
            h: 4,
            w: 4,
        };
        let (pooled, argmax) = maxpool_forward(&MaxPoolLayer { window: 2, stride: 2 }, &map).unwrap();
        assert!(pooled.data.data().iter().all(|&v| v == 0.25));
        assert_eq!(argmax, vec![0, 2, 8, 10], "window top-left indices");
    }

    #[test]
    fn maxpool_matches_loop_oracle_and_covers_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let map = FeatureMap {
            data: Matrix::from_fn(3, 36, |_, _| rng.gen_range(-1.0f32..1.0)),
            h: 6,
            w: 6,
        };
        let pool = MaxPoolLayer { window: 2, stride: 2 };
        let (pooled, argmax) = maxpool_forward(&pool, &map).unwrap();
        assert_eq!((pooled.h, pooled.w), (3, 3));
        for ch in 0..3 {
            for pr in 0..3 {
                for pc in 0..3 {
                    let mut want = f32::NEG_INFINITY;
                    for dr in 0..2 {
                        for dc in 0..2 {
                            want = want.max(map.data.get(ch, (pr * 2 + dr) * 6 + pc * 2 + dc));
                        }
                    }
                    let got = pooled.data.get(ch, pr * 3 + pc);
                    assert_eq!(got, want);
                    let src = argmax[ch * 9 + pr * 3 + pc] as usize;
                    assert_eq!(map.data.get(ch, src), got, "argmax points at the max");
                }
            }
        }
    }

    fn tiny_arch(rng: &mut ChaCha8Rng, nnl: bool) -> BlockArchitecture<f32> {
        let layer = if nnl {
            BlockLayer::Nnl(nnl_layer(rng, 6, 2, 1, 4))
        } else {
            BlockLayer::Conv(ConvLayer {
                weights: Matrix::from_fn(6, 12, |_, _| rng.gen_range(-0.5f32..0.5)),
                biases: (0..6).map(|_| rng.gen_range(-0.1f32..0.1)).collect(),
                window: 2,
                stride: 1,
            })
        };
        let blocks = vec![Block {
            layer,
            pool: MaxPoolLayer { window: 2, stride: 2 },
        }];
        let fd = feature_dim(&blocks, 6, 6).unwrap();
        BlockArchitecture {
            blocks,
            classifier_w: Matrix::from_fn(fd, 4, |_, _| rng.gen_range(-0.3f32..0.3)),
            classifier_b: (0..4).map(|_| rng.gen_range(-0.1f32..0.1)).collect(),
        }
    }

    #[test]
    fn block_forward_equals_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let arch = tiny_arch(&mut rng, true);
        let image = random_image(&mut rng, 6, 6);
        let (logits, cache) = block_forward(&arch, &image, 6, 6).unwrap();

        let BlockLayer::Nnl(layer) = &arch.blocks[0].layer else {
            unreachable!()
        };
        let map = nnl_conv_forward(layer, &image, 6, 6).unwrap();
        let (pooled, _) = maxpool_forward(&arch.blocks[0].pool, &map).unwrap();
        let manual = classifier_logits(&arch, pooled.data.data()).unwrap();
        assert_eq!(logits, manual);
        assert_eq!(cache.features, pooled.data.data());
    }

    #[test]
    fn permuting_blocks_with_classifier_slices_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b0 = Block {
            layer: BlockLayer::Nnl(nnl_layer(&mut rng, 3, 2, 1, 2)),
            pool: MaxPoolLayer { window: 2, stride: 2 },
        };
        let b1 = Block {
            layer: BlockLayer::Nnl(nnl_layer(&mut rng, 5, 3, 1, 3)),
            pool: MaxPoolLayer { window: 2, stride: 1 },
        };
        let blocks = vec![b0.clone(), b1.clone()];
        let d0 = feature_dim(std::slice::from_ref(&b0), 6, 6).unwrap();
        let fd = feature_dim(&blocks, 6, 6).unwrap();
        // f64 weights so the reordered accumulation is exact
        let w = Matrix::<f64>::from_fn(fd, 4, |_, _| rng.gen_range(-0.3f64..0.3));
        let biases: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.1f64..0.1)).collect();
        let arch = BlockArchitecture {
            blocks: blocks.iter().map(|b| b.cast_block()).collect::<Vec<_>>(),
            classifier_w: w.clone(),
            classifier_b: biases.clone(),
        };

        // swapped arch: blocks reversed, classifier rows reordered to match
        let mut swapped_w = Matrix::zeros(fd, 4);
        for r in 0..fd {
            let src = if r < fd - d0 { r + d0 } else { r - (fd - d0) };
            swapped_w.row_mut(r).copy_from_slice(w.row(src));
        }
        let swapped = BlockArchitecture {
            blocks: vec![b1.cast_block(), b0.cast_block()],
            classifier_w: swapped_w,
            classifier_b: biases,
        };

        let image: Vec<f64> = random_image(&mut rng, 6, 6).iter().map(|&v| f64::from(v)).collect();
        let (a, _) = block_forward(&arch, &image, 6, 6).unwrap();
        let (b, _) = block_forward(&swapped, &image, 6, 6).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn full_scale_block_feature_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let blocks = vec![Block {
            layer: BlockLayer::Nnl(nnl_layer(&mut rng, 400, 4, 1, 40)),
            pool: MaxPoolLayer { window: 11, stride: 2 },
        }];
        assert_eq!(feature_dim(&blocks, 32, 32).unwrap(), 40000);
    }

    #[test]
    fn nnl_network_scale_invariance_and_conv_non_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let nnl = tiny_arch(&mut rng, true);
        let conv = tiny_arch(&mut rng, false);
        let image = random_image(&mut rng, 6, 6);
        let (base_n, _) = block_forward(&nnl, &image, 6, 6).unwrap();
        let (base_c, _) = block_forward(&conv, &image, 6, 6).unwrap();
        let mut conv_changed = false;
        for c in [0.1f32, 0.3, 0.7] {
            let scaled: Vec<f32> = image.iter().map(|v| v * c).collect();
            let (ln, _) = block_forward(&nnl, &scaled, 6, 6).unwrap();
            for (a, b) in ln.iter().zip(base_n.iter()) {
                assert!((a - b).abs() <= 1e-5, "NNL logits invariant under c={c}");
            }
            let (lc, _) = block_forward(&conv, &scaled, 6, 6).unwrap();
            conv_changed |= lc
                .iter()
                .zip(base_c.iter())
                .any(|(a, b)| (a - b).abs() > 1e-3);
        }
        assert!(conv_changed, "CONV outputs must NOT be scale invariant");
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let arch = tiny_arch(&mut rng, true);
        let image = random_image(&mut rng, 6, 6);
        let (a, _) = block_forward(&arch, &image, 6, 6).unwrap();
        let (b, _) = block_forward(&arch, &image, 6, 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_round_trip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let nnl_block = Block {
            layer: BlockLayer::Nnl(nnl_layer(&mut rng, 4, 2, 1, 40)),
            pool: MaxPoolLayer { window: 2, stride: 2 },
        };
        let conv_block = Block {
            layer: BlockLayer::Conv(ConvLayer {
                weights: Matrix::from_fn(3, 27, |_, _| rng.gen_range(-1.0f32..1.0)),
                biases: vec![0.1, -0.2, 0.0],
                window: 3,
                stride: 1,
            }),
            pool: MaxPoolLayer { window: 3, stride: 3 },
        };
        let blocks = vec![nnl_block, conv_block];
        let fd = feature_dim(&blocks, 8, 8).unwrap();
        let arch = BlockArchitecture {
            blocks,
            classifier_w: Matrix::from_fn(fd, 10, |_, _| rng.gen_range(-1.0f32..1.0)),
            classifier_b: (0..10).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nnlm");
        save_model(&arch, &path).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, arch);
        let path2 = dir.path().join("model2.nnlm");
        save_model(&back, &path2).unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn model_load_rejects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let arch = tiny_arch(&mut rng, false);
        let bytes = model_bytes(&arch);
        assert!(model_from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(model_from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(model_from_bytes(&extra).is_err());
    }

    #[test]
    fn classifier_dimension_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut arch = tiny_arch(&mut rng, true);
        arch.classifier_w = Matrix::zeros(7, 4); // wrong feature dim
        let image = random_image(&mut rng, 6, 6);
        assert!(matches!(
            block_forward(&arch, &image, 6, 6),
            Err(Error::Config(_))
        ));
    }

    impl<S: Scalar> Block<S> {
        fn cast_block<U: Scalar>(&self) -> Block<U> {
            BlockArchitecture {
                blocks: vec![self.clone()],
                classifier_w: Matrix::<S>::zeros(1, 1),
                classifier_b: vec![S::zero()],
            }
            .cast::<U>()
            .blocks
            .remove(0)
        }
    }
}
