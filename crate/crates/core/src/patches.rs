//! Cutting images into W x W x 3 patches and streaming them, shuffled per
//! epoch, as minibatches for the filter trainer.
//!
//! The full patch set is only ever represented as indices; pixel data is
//! gathered lazily per minibatch, so corpora much larger than memory stream
//! fine as long as the images themselves fit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{l2_normalize, Matrix, Scalar};

/// Planar (channel, row, col) images in one contiguous slice.
#[derive(Clone, Copy, Debug)]
pub struct PixelGrid<'a, S> {
    data: &'a [S],
    n: usize,
    h: usize,
    w: usize,
}

pub const GRID_CHANNELS: usize = 3;

impl<'a, S: Scalar> PixelGrid<'a, S> {
    pub fn new(data: &'a [S], n: usize, h: usize, w: usize) -> Result<Self> {
        if data.len() != n * h * w * GRID_CHANNELS {
            return Err(Error::config(format!(
                "pixel buffer length {} does not match {n} images of {h}x{w}x3",
                data.len()
            )));
        }
        Ok(PixelGrid { data, n, h, w })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn image(&self, i: usize) -> &'a [S] {
        let px = self.h * self.w * GRID_CHANNELS;
        &self.data[i * px..(i + 1) * px]
    }
}

/// Copies the patch at (top-left `row`, `col`) of `image` into `out`, in
/// planar channel order: all red rows, then green, then blue, row-major
/// within a channel.
pub fn copy_patch<S: Scalar>(
    image: &[S],
    h: usize,
    w: usize,
    row: usize,
    col: usize,
    window: usize,
    out: &mut [S],
) {
    debug_assert_eq!(out.len(), window * window * GRID_CHANNELS);
    let plane = h * w;
    let mut o = 0;
    for ch in 0..GRID_CHANNELS {
        for dr in 0..window {
            let src = ch * plane + (row + dr) * w + col;
            out[o..o + window].copy_from_slice(&image[src..src + window]);
            o += window;
        }
    }
}

/// All valid patch positions of one image (stride `stride`, no padding),
/// as rows of a (positions x W*W*3) matrix.
pub fn extract_patches<S: Scalar>(
    image: &[S],
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> Result<Matrix<S>> {
    if window == 0 || stride == 0 {
        return Err(Error::config("window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::config(format!(
            "window {window} exceeds image side {h}x{w}"
        )));
    }
    if image.len() != h * w * GRID_CHANNELS {
        return Err(Error::config("image length does not match dimensions"));
    }
    let ph = (h - window) / stride + 1;
    let pw = (w - window) / stride + 1;
    let n = window * window * GRID_CHANNELS;
    let mut m = Matrix::zeros(ph * pw, n);
    for pr in 0..ph {
        for pc in 0..pw {
            copy_patch(image, h, w, pr * stride, pc * stride, window, m.row_mut(pr * pw + pc));
        }
    }
    Ok(m)
}

/// A minibatch of flattened patches.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub patches: Matrix<f32>,
    pub source_window: usize,
    pub normalized: bool,
}

impl PatchBatch {
    /// L2-normalizes every row in place (degenerate rows become zero).
    pub fn normalize(&mut self) {
        for r in 0..self.patches.rows() {
            l2_normalize(self.patches.row_mut(r));
        }
        self.normalized = true;
    }
}

/// Lazy view of every patch position over a set of images.
#[derive(Clone, Copy, Debug)]
pub struct PatchSource<'a> {
    grid: PixelGrid<'a, f32>,
    window: usize,
    stride: usize,
    ph: usize,
    pw: usize,
}

impl<'a> PatchSource<'a> {
    pub fn new(grid: PixelGrid<'a, f32>, window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 {
            return Err(Error::config("window and stride must be positive"));
        }
        if window > grid.height() || window > grid.width() {
            return Err(Error::config(format!(
                "window {window} exceeds image side {}x{}",
                grid.height(),
                grid.width()
            )));
        }
        let ph = (grid.height() - window) / stride + 1;
        let pw = (grid.width() - window) / stride + 1;
        Ok(PatchSource {
            grid,
            window,
            stride,
            ph,
            pw,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Patch vector length W*W*3.
    pub fn patch_len(&self) -> usize {
        self.window * self.window * GRID_CHANNELS
    }

    pub fn patches_per_image(&self) -> usize {
        self.ph * self.pw
    }

    /// Total number of patches across all images.
    pub fn len(&self) -> usize {
        self.grid.len() * self.patches_per_image()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (image, top row, left col) for a flat patch index.
    pub fn locate(&self, index: usize) -> (usize, usize, usize) {
        let per = self.patches_per_image();
        let img = index / per;
        let rem = index % per;
        (img, (rem / self.pw) * self.stride, (rem % self.pw) * self.stride)
    }

    /// Copies patch `index` into `out`.
    pub fn fetch(&self, index: usize, out: &mut [f32]) {
        let (img, row, col) = self.locate(index);
        copy_patch(
            self.grid.image(img),
            self.grid.height(),
            self.grid.width(),
            row,
            col,
            self.window,
            out,
        );
    }

    /// Gathers the given patch indices into a batch, in order.
    pub fn gather(&self, indices: &[u32]) -> PatchBatch {
        let n = self.patch_len();
        let mut m = Matrix::zeros(indices.len(), n);
        for (r, &idx) in indices.iter().enumerate() {
            self.fetch(idx as usize, m.row_mut(r));
        }
        PatchBatch {
            patches: m,
            source_window: self.window,
            normalized: false,
        }
    }
}

/// Minibatches covering a fresh permutation of the full patch set. The
/// permutation is fully determined by `(seed, epoch)`; the final short
/// batch is emitted as-is.
pub struct EpochStream<'a> {
    source: PatchSource<'a>,
    perm: Vec<u32>,
    pos: usize,
    batch: usize,
}

pub fn epoch_stream<'a>(
    source: PatchSource<'a>,
    minibatch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<EpochStream<'a>> {
    if minibatch_size == 0 {
        return Err(Error::config("minibatch_size must be positive"));
    }
    if source.len() > u32::MAX as usize {
        return Err(Error::config("patch set exceeds u32 index space"));
    }
    let mut perm: Vec<u32> = (0..source.len() as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    perm.shuffle(&mut rng);
    Ok(EpochStream {
        source,
        perm,
        pos: 0,
        batch: minibatch_size,
    })
}

impl<'a> Iterator for EpochStream<'a> {
    type Item = PatchBatch;

    fn next(&mut self) -> Option<PatchBatch> {
        if self.pos >= self.perm.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.perm.len());
        let batch = self.source.gather(&self.perm[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}
