//! Resolves dataset references from config values to loaded datasets.
//!
//! Accepted forms:
//! - `synth:std:COUNT:SEED` / `synth:alt:COUNT:SEED` — seeded synthetic data
//! - a path ending in `.bin` — CIFAR-10 binary batch format
//! - a path ending in `.rawi` — the raw-image container format
//! - a comma-separated list of paths — loaded and concatenated in order

use nnl_core::dataset::{load_cifar10_binary, load_raw, ImageDataset};
use nnl_core::synth::{generate, SynthVariant};
use nnl_core::{Error, Result};

fn load_one(part: &str) -> Result<ImageDataset> {
    if let Some(rest) = part.strip_prefix("synth:") {
        let fields: Vec<&str> = rest.split(':').collect();
        if fields.len() != 3 {
            return Err(Error::config(format!(
                "synthetic dataset reference '{part}' must be synth:std|alt:COUNT:SEED"
            )));
        }
        let variant = match fields[0] {
            "std" => SynthVariant::Standard,
            "alt" => SynthVariant::Alternate,
            other => {
                return Err(Error::config(format!(
                    "unknown synthetic variant '{other}' (expected std or alt)"
                )))
            }
        };
        let count: usize = fields[1]
            .parse()
            .map_err(|_| Error::config(format!("bad image count in '{part}'")))?;
        let seed: u64 = fields[2]
            .parse()
            .map_err(|_| Error::config(format!("bad seed in '{part}'")))?;
        if count == 0 {
            return Err(Error::config("synthetic dataset count must be positive"));
        }
        return Ok(generate(count, seed, variant));
    }
    if part.ends_with(".bin") {
        return load_cifar10_binary(part);
    }
    if part.ends_with(".rawi") {
        return load_raw(part);
    }
    Err(Error::config(format!(
        "cannot infer dataset format of '{part}' (expected synth:..., *.bin or *.rawi)"
    )))
}

/// Loads a dataset reference, concatenating comma-separated parts.
pub fn load_dataset(reference: &str) -> Result<ImageDataset> {
    let parts: Vec<&str> = reference.split(',').map(str::trim).collect();
    let mut out: Option<ImageDataset> = None;
    for part in parts {
        let ds = load_one(part)?;
        out = Some(match out {
            None => ds,
            Some(acc) => acc.concat(&ds, reference)?,
        });
    }
    out.ok_or_else(|| Error::config("empty dataset reference"))
}
