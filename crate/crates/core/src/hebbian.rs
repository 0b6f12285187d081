//! Local, unsupervised filter learning with winner-take-all competition.
//!
//! For every patch in a minibatch the filter rows are ranked by their input
//! current (dot product with the patch). The strongest-driven row is pushed
//! toward the patch, the rank-`m` row is pushed away with strength `delta`,
//! and everything else stays put:
//!
//! ```text
//! delta_M[mu][i] = eps * sum_A g(rank_mu^A) * (v_i^A - I_mu^A * M[mu][i])
//! I_mu^A        = sum_j M[mu][j] * v_j^A
//! g(rank)       = 1 if rank = 1, -delta if rank = m, 0 otherwise
//! ```
//!
//! Rows converge to unit vectors (the `v - I*M` term is an Oja-style decay)
//! and are then usable as frozen convolutional filters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::numeric::{gemm, Matrix};
use crate::patches::{PatchBatch, PatchSource, GRID_CHANNELS};

/// Update magnitudes below this floor are treated as zero when max-scaling.
const SCALE_FLOOR: f64 = 1e-30;

/// A learned K x N filter matrix plus training bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    /// K x N weights, N = window * window * 3, patch layout order.
    pub m: Matrix<f32>,
    pub window: usize,
    /// Rank-1 wins per row, accumulated over the final training epoch.
    pub win_counts: Vec<u64>,
    pub epochs_trained: usize,
    pub seed: u64,
}

impl FilterBank {
    /// Number of filters K.
    pub fn channels(&self) -> usize {
        self.m.rows()
    }

    /// Flattened patch length N.
    pub fn patch_len(&self) -> usize {
        self.m.cols()
    }

    pub fn row_norm(&self, r: usize) -> f64 {
        self.m
            .row(r)
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Worst |norm - 1| over rows that won at least once in the final
    /// epoch; `None` when no row ever won.
    pub fn convergence(&self) -> Option<f64> {
        let mut worst: Option<f64> = None;
        for r in 0..self.channels() {
            if self.win_counts[r] > 0 {
                let d = (self.row_norm(r) - 1.0).abs();
                worst = Some(worst.map_or(d, |w: f64| w.max(d)));
            }
        }
        worst
    }
}

/// Hyperparameters of the local learning rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HebbianConfig {
    /// Base learning rate; per-epoch rate is `learning_rate * (1 - e/epochs)`
    /// for e = 1..=epochs, reaching exactly zero in the final epoch (which
    /// therefore only collects win statistics).
    pub learning_rate: f64,
    pub epochs: usize,
    /// Rank receiving the anti-Hebbian push; must be >= 2.
    pub rank_m: usize,
    /// Anti-Hebbian strength applied to the rank-m row.
    pub delta: f32,
    pub minibatch_size: usize,
    /// Divide each raw minibatch update by its max |entry| (floored at
    /// 1e-30) before applying the learning rate. Stabilizes training; turn
    /// off for the literal rule.
    pub scale_update_by_max: bool,
    /// L2-normalize patches before the update (off is the standard recipe;
    /// the flag exists as an experiment).
    pub normalize_patches: bool,
}

impl Default for HebbianConfig {
    fn default() -> Self {
        HebbianConfig {
            learning_rate: 1e-4,
            epochs: 500,
            rank_m: 2,
            delta: 0.2,
            minibatch_size: 1000,
            scale_update_by_max: true,
            normalize_patches: false,
        }
    }
}

impl HebbianConfig {
    /// Validates against a bank of `k` filters. `rank_m > k` leaves no row
    /// for the anti-Hebbian push and is only allowed when `delta` is zero.
    pub fn validate(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::config("filter count must be positive"));
        }
        if self.rank_m < 2 {
            return Err(Error::config(format!(
                "rank_m must be at least 2, got {}",
                self.rank_m
            )));
        }
        if self.rank_m > k && self.delta != 0.0 {
            return Err(Error::config(format!(
                "rank_m {} exceeds filter count {k} with nonzero delta",
                self.rank_m
            )));
        }
        if self.delta < 0.0 {
            return Err(Error::config(format!(
                "delta must be nonnegative, got {}",
                self.delta
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.minibatch_size == 0 {
            return Err(Error::config("minibatch_size must be positive"));
        }
        Ok(())
    }
}

/// Which rows a single patch drives: the strongest (rank 1) and the rank-m
/// row (`None` when fewer than m rows exist).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankPair {
    pub winner: u32,
    pub anti: Option<u32>,
}

/// Computes input currents `I = batch * M^T` (B x K) and, per sample, the
/// rank-1 and rank-m rows. Ties rank the lower row index first.
pub fn rank_activations(
    m: &Matrix<f32>,
    batch: &PatchBatch,
    rank_m: usize,
) -> Result<(Matrix<f32>, Vec<RankPair>)> {
    if batch.patches.cols() != m.cols() {
        return Err(Error::config(format!(
            "patch length {} does not match filter length {}",
            batch.patches.cols(),
            m.cols()
        )));
    }
    if rank_m < 2 {
        return Err(Error::config("rank_m must be at least 2"));
    }
    let currents = gemm(&batch.patches, false, m, true)?;
    let b = batch.patches.rows();
    let mut pairs = Vec::with_capacity(b);
    // top-m selection buffer, ordered best-first; scanning rows in
    // ascending index order and inserting only on strict improvement
    // implements the lowest-index tie-break.
    let mut buf: Vec<(f32, u32)> = Vec::with_capacity(rank_m);
    for a in 0..b {
        buf.clear();
        let row = currents.row(a);
        for (idx, &v) in row.iter().enumerate() {
            let mut p = buf.len();
            while p > 0 && v > buf[p - 1].0 {
                p -= 1;
            }
            if p < rank_m {
                if buf.len() < rank_m {
                    buf.insert(p, (v, idx as u32));
                } else if p < buf.len() {
                    buf.pop();
                    buf.insert(p, (v, idx as u32));
                }
            }
        }
        pairs.push(RankPair {
            winner: buf[0].1,
            anti: if buf.len() >= rank_m {
                Some(buf[rank_m - 1].1)
            } else {
                None
            },
        });
    }
    Ok((currents, pairs))
}

/// Scalar weight of a rank under the competition rule.
pub fn g_of_rank(rank: usize, m: usize, delta: f32) -> f32 {
    if rank == 1 {
        1.0
    } else if rank == m {
        -delta
    } else {
        0.0
    }
}

fn update_from_ranks(
    m: &Matrix<f32>,
    batch: &PatchBatch,
    currents: &Matrix<f32>,
    pairs: &[RankPair],
    eps: f64,
    delta: f32,
    scale_update_by_max: bool,
) -> Matrix<f32> {
    let k = m.rows();
    let n = m.cols();
    // per-row (sample, g) contributions, in ascending sample order, so each
    // row's accumulation order is independent of how rows are scheduled.
    let mut per_row: Vec<Vec<(u32, f32)>> = vec![Vec::new(); k];
    for (a, pair) in pairs.iter().enumerate() {
        per_row[pair.winner as usize].push((a as u32, 1.0));
        if let Some(anti) = pair.anti {
            per_row[anti as usize].push((a as u32, -delta));
        }
    }

    let mut raw = Matrix::<f32>::zeros(k, n);
    raw.data_mut()
        .par_chunks_exact_mut(n.max(1))
        .enumerate()
        .for_each(|(mu, out)| {
            let w = m.row(mu);
            for &(a, g) in &per_row[mu] {
                let v = batch.patches.row(a as usize);
                let i_cur = currents.get(a as usize, mu);
                for j in 0..n {
                    out[j] += g * (v[j] - i_cur * w[j]);
                }
            }
        });

    let factor = if scale_update_by_max {
        let denom = f64::from(raw.max_abs()).max(SCALE_FLOOR);
        eps / denom
    } else {
        eps
    };
    for v in raw.data_mut() {
        *v = (f64::from(*v) * factor) as f32;
    }
    raw
}

/// One minibatch update of the learning rule; returns the weight delta to
/// add to `m`. When `scale_update_by_max` is set, the raw summed update is
/// divided by its max absolute entry before the learning rate is applied.
pub fn hebbian_update(
    m: &Matrix<f32>,
    batch: &PatchBatch,
    eps: f64,
    rank_m: usize,
    delta: f32,
    scale_update_by_max: bool,
) -> Result<Matrix<f32>> {
    let (currents, pairs) = rank_activations(m, batch, rank_m)?;
    Ok(update_from_ranks(
        m,
        batch,
        &currents,
        &pairs,
        eps,
        delta,
        scale_update_by_max,
    ))
}

/// Standard-normal K x N initialization, fully determined by `seed`.
pub fn init_filters(k: usize, patch_len: usize, seed: u64) -> Matrix<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(k, patch_len);
    for v in m.data_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    m
}

/// Runs the epoch loop over a patch source. The per-epoch learning rate is
/// `eps0 * (1 - e/epochs)` for e = 1..=epochs (linear decay to exactly zero,
/// so the final epoch freezes the weights and only counts rank-1 wins).
/// Deterministic given `(seed, config)` and the source contents, regardless
/// of thread count.
pub fn train_filters(
    source: &PatchSource<'_>,
    k: usize,
    config: &HebbianConfig,
    seed: u64,
) -> Result<FilterBank> {
    config.validate(k)?;
    if source.is_empty() {
        return Err(Error::config("patch source is empty"));
    }
    let n = source.patch_len();
    let mut m = init_filters(k, n, seed);
    let mut win_counts = vec![0u64; k];
    for e in 1..=config.epochs {
        let eps = config.learning_rate * (1.0 - e as f64 / config.epochs as f64);
        let final_epoch = e == config.epochs;
        for mut batch in crate::patches::epoch_stream(
            *source,
            config.minibatch_size,
            seed,
            e as u64,
        )? {
            if config.normalize_patches {
                batch.normalize();
            }
            let (currents, pairs) = rank_activations(&m, &batch, config.rank_m)?;
            if final_epoch {
                for pair in &pairs {
                    win_counts[pair.winner as usize] += 1;
                }
            }
            if eps > 0.0 {
                let delta_m = update_from_ranks(
                    &m,
                    &batch,
                    &currents,
                    &pairs,
                    eps,
                    config.delta,
                    config.scale_update_by_max,
                );
                let data = m.data_mut();
                for (w, d) in data.iter_mut().zip(delta_m.data()) {
                    *w += d;
                }
            }
        }
    }
    Ok(FilterBank {
        m,
        window: source.window(),
        win_counts,
        epochs_trained: config.epochs,
        seed,
    })
}

/// Rows whose share of final-epoch wins falls below `threshold` (filters
/// that learned nothing useful). With no recorded wins at all, every row is
/// flagged.
pub fn detect_dead_units(bank: &FilterBank, threshold: f64) -> Vec<usize> {
    let total: u64 = bank.win_counts.iter().sum();
    (0..bank.channels())
        .filter(|&r| {
            if total == 0 {
                true
            } else {
                (bank.win_counts[r] as f64 / total as f64) < threshold
            }
        })
        .collect()
}

/// Default dead-unit win-fraction threshold.
pub const DEAD_UNIT_THRESHOLD: f64 = 1e-5;

/// Copy of the bank without its dead rows.
pub fn prune_dead(bank: &FilterBank, threshold: f64) -> FilterBank {
    let dead = detect_dead_units(bank, threshold);
    let keep: Vec<usize> = (0..bank.channels()).filter(|r| !dead.contains(r)).collect();
    let mut m = Matrix::zeros(keep.len(), bank.patch_len());
    let mut win_counts = Vec::with_capacity(keep.len());
    for (new_r, &r) in keep.iter().enumerate() {
        m.row_mut(new_r).copy_from_slice(bank.m.row(r));
        win_counts.push(bank.win_counts[r]);
    }
    FilterBank {
        m,
        window: bank.window,
        win_counts,
        epochs_trained: bank.epochs_trained,
        seed: bank.seed,
    }
}

const BANK_MAGIC: &[u8; 4] = b"NNLF";
const BANK_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

/// Serializes a bank: magic "NNLF", then u32 LE version, K, window,
/// channels (3), dtype (0 = f32 LE), followed by K*N weights and K u64
/// win counts. Round-trips bit-exactly.
pub fn save_filter_bank(bank: &FilterBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&filter_bank_bytes(bank))
        .map_err(|e| Error::io(path, e))
}

pub(crate) fn filter_bank_bytes(bank: &FilterBank) -> Vec<u8> {
    let k = bank.channels();
    let n = bank.patch_len();
    let mut out = Vec::with_capacity(24 + 4 * k * n + 8 * k);
    out.extend_from_slice(BANK_MAGIC);
    for v in [
        BANK_VERSION,
        k as u32,
        bank.window as u32,
        GRID_CHANNELS as u32,
        DTYPE_F32,
    ] {
        let mut b = [0u8; 4];
        LittleEndian::write_u32(&mut b, v);
        out.extend_from_slice(&b);
    }
    for &w in bank.m.data() {
        let mut b = [0u8; 4];
        LittleEndian::write_f32(&mut b, w);
        out.extend_from_slice(&b);
    }
    for &c in &bank.win_counts {
        let mut b = [0u8; 8];
        LittleEndian::write_u64(&mut b, c);
        out.extend_from_slice(&b);
    }
    out
}

pub fn load_filter_bank(path: impl AsRef<Path>) -> Result<FilterBank> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    filter_bank_from_bytes(&bytes)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub(crate) fn filter_bank_from_bytes(bytes: &[u8]) -> std::result::Result<FilterBank, String> {
    if bytes.len() < 24 || &bytes[0..4] != BANK_MAGIC {
        return Err("missing NNLF header".into());
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != BANK_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let k = LittleEndian::read_u32(&bytes[8..12]) as usize;
    let window = LittleEndian::read_u32(&bytes[12..16]) as usize;
    let channels = LittleEndian::read_u32(&bytes[16..20]) as usize;
    let dtype = LittleEndian::read_u32(&bytes[20..24]);
    if channels != GRID_CHANNELS {
        return Err(format!("expected 3 color channels, got {channels}"));
    }
    if dtype != DTYPE_F32 {
        return Err(format!("unsupported dtype code {dtype}"));
    }
    if k == 0 || window == 0 {
        return Err("empty filter bank".into());
    }
    let n = window * window * GRID_CHANNELS;
    let expect = 24 + 4 * k * n + 8 * k;
    if bytes.len() != expect {
        return Err(format!("expected {expect} bytes, found {}", bytes.len()));
    }
    let mut data = Vec::with_capacity(k * n);
    let mut off = 24;
    for _ in 0..k * n {
        data.push(LittleEndian::read_f32(&bytes[off..off + 4]));
        off += 4;
    }
    let mut win_counts = Vec::with_capacity(k);
    for _ in 0..k {
        win_counts.push(LittleEndian::read_u64(&bytes[off..off + 8]));
        off += 8;
    }
    Ok(FilterBank {
        m: Matrix::from_vec(k, n, data).expect("sized above"),
        window,
        win_counts,
        epochs_trained: 0, // not persisted; the file carries inference state only
        seed: 0,
    })
}
