//! Accuracy metrics, shadowed/rescaled evaluation, and transfer learning
//! (frozen filters from one dataset, fresh classifier on another).

use std::fmt;
use std::fmt::Write as _;

use crate::dataset::{apply_shadow, to_float, ImageDataset, ShadowSpec, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::hebbian::FilterBank;
use crate::model::{
    argmax_row, features_for_images, logits_for_features_stable, Block, BlockArchitecture, BlockLayer,
    MaxPoolLayer, NnlConvLayer,
};
use crate::numeric::{Matrix, Scalar};
use crate::patches::PixelGrid;
use crate::train::{train_top_layer, TrainConfig};

/// Fraction (in percent) of samples whose true label is not among the k
/// largest logits; logit ties rank the lower class index first.
pub fn top_k_error<S: Scalar>(logits: &Matrix<S>, labels: &[u16], k: usize) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::config("logit/label counts disagree"));
    }
    if k == 0 || k > logits.cols() {
        return Err(Error::config(format!(
            "k must be in 1..={}, got {k}",
            logits.cols()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::config("no samples to evaluate"));
    }
    let mut errors = 0usize;
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let label = labels[r] as usize;
        if label >= logits.cols() {
            return Err(Error::config(format!(
                "label {label} out of range for {} classes",
                logits.cols()
            )));
        }
        let lv = row[label];
        // rank of the true class under (value desc, index asc) ordering
        let mut rank = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > lv || (v == lv && j < label) {
                rank += 1;
            }
        }
        if rank >= k {
            errors += 1;
        }
    }
    Ok(100.0 * errors as f64 / logits.rows() as f64)
}

/// Evaluation result of one model on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub top1_error: f64,
    pub top5_error: f64,
    /// Top-1 error percent per class (0 for classes with no samples).
    pub per_class_errors: Vec<f64>,
    pub shadow: Option<ShadowSpec>,
    pub n_samples: usize,
}

impl EvalReport {
    /// Single-table CSV: one row for top-1, top-5, and each class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,scope,n_samples,error_percent\n");
        let _ = writeln!(s, "{},top1,{},{}", self.dataset, self.n_samples, self.top1_error);
        let _ = writeln!(s, "{},top5,{},{}", self.dataset, self.n_samples, self.top5_error);
        for (c, e) in self.per_class_errors.iter().enumerate() {
            let _ = writeln!(s, "{},class_{c},{},{e}", self.dataset, self.n_samples);
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dataset      : {}", self.dataset)?;
        writeln!(f, "samples      : {}", self.n_samples)?;
        if let Some(sh) = self.shadow {
            writeln!(f, "shadow       : {} columns x {}", sh.columns, sh.intensity)?;
        }
        writeln!(f, "top-1 error  : {:.2}%", self.top1_error)?;
        writeln!(f, "top-5 error  : {:.2}%", self.top5_error)?;
        write!(f, "per-class    :")?;
        for e in &self.per_class_errors {
            write!(f, " {e:.1}")?;
        }
        Ok(())
    }
}

/// Optional input transforms applied before the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    /// Darken the leading image columns (8-bit rounding, like a camera).
    pub shadow: Option<ShadowSpec>,
    /// Multiply every pixel by this factor after conversion to float.
    pub scale: Option<f32>,
}

/// Builds a report from a precomputed logits matrix.
pub fn report_from_logits<S: Scalar>(
    name: impl Into<String>,
    logits: &Matrix<S>,
    labels: &[u16],
    shadow: Option<ShadowSpec>,
) -> Result<EvalReport> {
    let classes = logits.cols();
    let top1 = top_k_error(logits, labels, 1)?;
    let top5 = top_k_error(logits, labels, 5.min(classes))?;
    let mut wrong = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for r in 0..logits.rows() {
        let label = labels[r] as usize;
        count[label] += 1;
        if argmax_row(logits.row(r)) != label {
            wrong[label] += 1;
        }
    }
    let per_class = (0..classes)
        .map(|c| {
            if count[c] == 0 {
                0.0
            } else {
                100.0 * wrong[c] as f64 / count[c] as f64
            }
        })
        .collect();
    Ok(EvalReport {
        dataset: name.into(),
        top1_error: top1,
        top5_error: top5,
        per_class_errors: per_class,
        shadow,
        n_samples: logits.rows(),
    })
}

/// Predicted class per image (after optional shadow/scale), argmax with
/// lowest-index tie-break.
pub fn predict(
    arch: &BlockArchitecture<f32>,
    ds: &ImageDataset,
    opts: EvalOptions,
) -> Result<Vec<u16>> {
    let logits = eval_logits(arch, ds, opts)?.1;
    Ok((0..logits.rows())
        .map(|r| argmax_row(logits.row(r)) as u16)
        .collect())
}

fn eval_logits(
    arch: &BlockArchitecture<f32>,
    ds: &ImageDataset,
    opts: EvalOptions,
) -> Result<(String, Matrix<f32>)> {
    if ds.is_empty() {
        return Err(Error::config("empty evaluation dataset"));
    }
    let shadowed;
    let ds_ref = if let Some(spec) = opts.shadow {
        shadowed = apply_shadow(ds, spec);
        &shadowed
    } else {
        ds
    };
    let mut floats = to_float(ds_ref);
    let mut name = ds_ref.name.clone();
    if let Some(c) = opts.scale {
        if !(c > 0.0) {
            return Err(Error::config(format!("scale must be positive, got {c}")));
        }
        floats = floats.scaled(c);
        let _ = write!(name, "-x{c}");
    }
    let grid = PixelGrid::new(floats.raw(), floats.len(), IMAGE_SIDE, IMAGE_SIDE)?;
    let feats = features_for_images(&arch.blocks, grid)?;
    let logits = logits_for_features_stable(arch, &feats)?;
    Ok((name, logits))
}

/// Forward-passes the dataset (after optional shadow/scale) and reports
/// errors. Pure and deterministic.
pub fn evaluate(
    arch: &BlockArchitecture<f32>,
    ds: &ImageDataset,
    opts: EvalOptions,
) -> Result<EvalReport> {
    if arch.classes() != ds.class_count() as usize {
        return Err(Error::config(format!(
            "model has {} classes, dataset has {}",
            arch.classes(),
            ds.class_count()
        )));
    }
    let (name, logits) = eval_logits(arch, ds, opts)?;
    report_from_logits(name, &logits, ds.labels(), opts.shadow)
}

/// Shape of one NNL block when rebuilding an architecture around imported
/// filters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NnlBlockSpec {
    pub power: u32,
    pub stride: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
}

/// Assembles NNL blocks from frozen banks and per-block shapes.
pub fn nnl_blocks(banks: Vec<FilterBank>, specs: &[NnlBlockSpec]) -> Result<Vec<Block<f32>>> {
    if banks.len() != specs.len() {
        return Err(Error::config(format!(
            "{} filter banks but {} block specs",
            banks.len(),
            specs.len()
        )));
    }
    Ok(banks
        .into_iter()
        .zip(specs)
        .map(|(bank, spec)| Block {
            layer: BlockLayer::Nnl(NnlConvLayer::from_bank(bank, spec.power, spec.stride)),
            pool: MaxPoolLayer {
                window: spec.pool_window,
                stride: spec.pool_stride,
            },
        })
        .collect())
}

/// Transfer-learning outcome over several seeded classifier runs.
#[derive(Clone, Debug)]
pub struct TransferReport {
    pub runs: Vec<EvalReport>,
    pub mean_top1: f64,
    /// Sample standard deviation (n-1); 0 for a single run.
    pub std_top1: f64,
}

impl fmt::Display for TransferReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "transfer top-1 error: {:.2}% +/- {:.2}% over {} runs",
            self.mean_top1,
            self.std_top1,
            self.runs.len()
        )?;
        for (i, r) in self.runs.iter().enumerate() {
            writeln!(f, "  run {i}: {:.2}%", r.top1_error)?;
        }
        Ok(())
    }
}

/// Default number of seeded transfer runs.
pub const TRANSFER_RUNS: usize = 5;

/// Imports frozen filters, trains only the classifier on the target
/// training set `n_runs` times (seeds `cfg.seed + run`), and reports the
/// spread of test errors. Features are computed once; runs differ only in
/// minibatch order.
pub fn transfer(
    banks: Vec<FilterBank>,
    specs: &[NnlBlockSpec],
    train_ds: &ImageDataset,
    test_ds: &ImageDataset,
    cfg: &TrainConfig,
    n_runs: usize,
) -> Result<TransferReport> {
    if n_runs == 0 {
        return Err(Error::config("need at least one transfer run"));
    }
    if train_ds.class_count() != test_ds.class_count() {
        return Err(Error::config("train/test class counts disagree"));
    }
    let blocks = nnl_blocks(banks, specs)?;
    let classes = train_ds.class_count() as usize;

    let train_f = to_float(train_ds);
    let test_f = to_float(test_ds);
    let train_grid = PixelGrid::new(train_f.raw(), train_f.len(), IMAGE_SIDE, IMAGE_SIDE)?;
    let test_grid = PixelGrid::new(test_f.raw(), test_f.len(), IMAGE_SIDE, IMAGE_SIDE)?;
    let train_feats = features_for_images(&blocks, train_grid)?;
    let test_feats = features_for_images(&blocks, test_grid)?;

    let mut runs = Vec::with_capacity(n_runs);
    for run in 0..n_runs {
        let run_cfg = TrainConfig {
            seed: cfg.seed + run as u64,
            ..*cfg
        };
        let out = train_top_layer(
            &train_feats,
            train_ds.labels(),
            &test_feats,
            test_ds.labels(),
            classes,
            &run_cfg,
        )?;
        let arch = BlockArchitecture {
            blocks: Vec::new(),
            classifier_w: out.w,
            classifier_b: out.b,
        };
        let logits = logits_for_features_stable(&arch, &test_feats)?;
        runs.push(report_from_logits(
            format!("{}-run{run}", test_ds.name),
            &logits,
            test_ds.labels(),
            None,
        )?);
    }
    let mean = runs.iter().map(|r| r.top1_error).sum::<f64>() / n_runs as f64;
    let var = if n_runs > 1 {
        runs.iter()
            .map(|r| (r.top1_error - mean).powi(2))
            .sum::<f64>()
            / (n_runs - 1) as f64
    } else {
        0.0
    };
    Ok(TransferReport {
        runs,
        mean_top1: mean,
        std_top1: var.sqrt(),
    })
}
