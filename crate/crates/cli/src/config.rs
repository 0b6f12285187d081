//! Plain-text experiment configuration: sections of `key = value` lines with
//! `#` comments. Unknown sections or keys are errors (no silent typos);
//! values outside the hyperparameter ranges that are known to work well emit
//! warnings but do not fail.

use std::fmt::Write as _;

use nnl_core::train::LrSchedule;
use nnl_core::{Error, Result};

/// Where a block's filters come from and how its forward pass behaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Hebbian-trained filters, patch-normalized cosine forward.
    Nnl,
    /// Backprop-trained filters with biases, raw dot + ReLU forward.
    Conv,
}

impl BlockKind {
    fn as_str(self) -> &'static str {
        match self {
            BlockKind::Nnl => "nnl",
            BlockKind::Conv => "conv",
        }
    }
}

/// One architecture block: a (NNL-)CONV layer plus its max-pool.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSection {
    pub kind: BlockKind,
    /// Number of filters K.
    pub k: usize,
    /// Filter window side W.
    pub w: usize,
    /// Rectified-power exponent n (NNL forward only).
    pub n: u32,
    /// Convolution stride ST.
    pub st: usize,
    /// Pooling window W_p.
    pub wp: usize,
    /// Pooling stride ST_p.
    pub stp: usize,
    /// Anti-Hebbian rank m (filter training only).
    pub m: u32,
    /// Anti-Hebbian strength Delta (filter training only).
    pub delta: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataSection {
    /// Dataset reference: a `.bin`/`.rawi` path (comma-separated paths are
    /// concatenated) or `synth:std:COUNT:SEED` / `synth:alt:COUNT:SEED`.
    pub train: Option<String>,
    pub test: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HebbianSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub scale_update: bool,
    pub normalize_patches: bool,
}

impl Default for HebbianSection {
    fn default() -> Self {
        HebbianSection {
            lr: 1e-4,
            epochs: 500,
            batch: 1000,
            scale_update: true,
            normalize_patches: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Cifar70,
    Imagenet48,
    Linear,
    Constant,
}

impl ScheduleKind {
    fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Cifar70 => "cifar70",
            ScheduleKind::Imagenet48 => "imagenet48",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Constant => "constant",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub schedule: ScheduleKind,
    /// Base learning rate for `linear`/`constant` schedules.
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            schedule: ScheduleKind::Cifar70,
            lr: 1e-4,
            epochs: 70,
            batch: 300,
        }
    }
}

impl TrainSection {
    /// Concrete schedule for this section.
    pub fn lr_schedule(&self) -> LrSchedule {
        match self.schedule {
            ScheduleKind::Cifar70 => LrSchedule::Cifar70,
            ScheduleKind::Imagenet48 => LrSchedule::Imagenet48,
            ScheduleKind::Linear => LrSchedule::Linear {
                base: self.lr,
                epochs: self.epochs,
            },
            ScheduleKind::Constant => LrSchedule::Constant { value: self.lr },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    /// 0 = library default thread count.
    pub threads: usize,
    pub out: Option<String>,
    pub log: Option<String>,
    /// Filter-bank files, one per NNL block.
    pub filters: Vec<String>,
}

/// A parsed experiment file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub hebbian: HebbianSection,
    pub blocks: Vec<BlockSection>,
    pub train: TrainSection,
    pub run: RunSection,
}

/// Per-block partial state while parsing (k and w are required).
#[derive(Clone, Debug)]
struct BlockBuilder {
    kind: BlockKind,
    k: Option<usize>,
    w: Option<usize>,
    n: u32,
    st: usize,
    wp: usize,
    stp: usize,
    m: u32,
    delta: f32,
    index: usize,
}

impl BlockBuilder {
    fn new(index: usize) -> Self {
        BlockBuilder {
            kind: BlockKind::Nnl,
            k: None,
            w: None,
            n: 40,
            st: 1,
            wp: 11,
            stp: 2,
            m: 2,
            delta: 0.2,
            index,
        }
    }

    fn finish(self) -> Result<BlockSection> {
        let k = self
            .k
            .ok_or_else(|| Error::config(format!("missing required key 'k' in [block] {}", self.index)))?;
        let w = self
            .w
            .ok_or_else(|| Error::config(format!("missing required key 'w' in [block] {}", self.index)))?;
        Ok(BlockSection {
            kind: self.kind,
            k,
            w,
            n: self.n,
            st: self.st,
            wp: self.wp,
            stp: self.stp,
            m: self.m,
            delta: self.delta,
        })
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::config(format!(
            "type mismatch for key '{key}': expected {kind}, got '{value}'"
        ))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "type mismatch for key '{key}': expected true/false, got '{value}'"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Section {
    None,
    Data,
    Hebbian,
    Block,
    Train,
    Run,
}

/// Parses config text. Returns the config plus human-readable warnings for
/// values outside the known-good hyperparameter sweep ranges.
pub fn parse_config(text: &str) -> Result<(RunConfig, Vec<String>)> {
    let mut cfg = RunConfig::default();
    let mut section = Section::None;
    let mut block: Option<BlockBuilder> = None;
    let mut block_count = 0usize;

    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::config(format!("line {}: malformed section header '{line}'", lineno + 1)))?
                .trim();
            if section == Section::Block {
                cfg.blocks.push(block.take().expect("block builder set").finish()?);
            }
            section = match name {
                "data" => Section::Data,
                "hebbian" => Section::Hebbian,
                "block" => Section::Block,
                "train" => Section::Train,
                "run" => Section::Run,
                other => {
                    return Err(Error::config(format!(
                        "line {}: unknown section '[{other}]'",
                        lineno + 1
                    )))
                }
            };
            if section == Section::Block {
                block_count += 1;
                block = Some(BlockBuilder::new(block_count));
            }
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        match section {
            Section::None => {
                return Err(Error::config(format!(
                    "line {}: key '{key}' before any section",
                    lineno + 1
                )))
            }
            Section::Data => match key {
                "train" => cfg.data.train = Some(value.to_string()),
                "test" => cfg.data.test = Some(value.to_string()),
                _ => return Err(unknown_key(lineno, "data", key)),
            },
            Section::Hebbian => match key {
                "lr" => cfg.hebbian.lr = parse_num(key, value, "number")?,
                "epochs" => cfg.hebbian.epochs = parse_num(key, value, "integer")?,
                "batch" => cfg.hebbian.batch = parse_num(key, value, "integer")?,
                "scale_update" => cfg.hebbian.scale_update = parse_bool(key, value)?,
                "normalize_patches" => cfg.hebbian.normalize_patches = parse_bool(key, value)?,
                _ => return Err(unknown_key(lineno, "hebbian", key)),
            },
            Section::Block => {
                let b = block.as_mut().expect("inside block section");
                match key {
                    "type" => {
                        b.kind = match value {
                            "nnl" => BlockKind::Nnl,
                            "conv" => BlockKind::Conv,
                            _ => {
                                return Err(Error::config(format!(
                                    "type mismatch for key 'type': expected nnl|conv, got '{value}'"
                                )))
                            }
                        }
                    }
                    "k" => b.k = Some(parse_num(key, value, "integer")?),
                    "w" => b.w = Some(parse_num(key, value, "integer")?),
                    "n" => b.n = parse_num(key, value, "integer")?,
                    "st" => b.st = parse_num(key, value, "integer")?,
                    "wp" => b.wp = parse_num(key, value, "integer")?,
                    "stp" => b.stp = parse_num(key, value, "integer")?,
                    "m" => b.m = parse_num(key, value, "integer")?,
                    "delta" => b.delta = parse_num(key, value, "number")?,
                    _ => return Err(unknown_key(lineno, "block", key)),
                }
            }
            Section::Train => match key {
                "schedule" => {
                    cfg.train.schedule = match value {
                        "cifar70" | "cifar_70" => ScheduleKind::Cifar70,
                        "imagenet48" | "imagenet_48" => ScheduleKind::Imagenet48,
                        "linear" => ScheduleKind::Linear,
                        "constant" => ScheduleKind::Constant,
                        _ => {
                            return Err(Error::config(format!(
                                "type mismatch for key 'schedule': expected cifar70|imagenet48|linear|constant, got '{value}'"
                            )))
                        }
                    }
                }
                "lr" => cfg.train.lr = parse_num(key, value, "number")?,
                "epochs" => cfg.train.epochs = parse_num(key, value, "integer")?,
                "batch" => cfg.train.batch = parse_num(key, value, "integer")?,
                _ => return Err(unknown_key(lineno, "train", key)),
            },
            Section::Run => match key {
                "seed" => cfg.run.seed = parse_num(key, value, "integer")?,
                "threads" => cfg.run.threads = parse_num(key, value, "integer")?,
                "out" => cfg.run.out = Some(value.to_string()),
                "log" => cfg.run.log = Some(value.to_string()),
                "filters" => {
                    cfg.run.filters = value.split(',').map(|s| s.trim().to_string()).collect()
                }
                _ => return Err(unknown_key(lineno, "run", key)),
            },
        }
    }
    if section == Section::Block {
        cfg.blocks.push(block.take().expect("block builder set").finish()?);
    }
    let warnings = sweep_warnings(&cfg);
    Ok((cfg, warnings))
}

fn unknown_key(lineno: usize, section: &str, key: &str) -> Error {
    Error::config(format!(
        "line {}: unknown key '{key}' in section [{section}]",
        lineno + 1
    ))
}

/// Hyperparameter ranges that are known to behave well; values outside them
/// are legal but warned about.
fn sweep_warnings(cfg: &RunConfig) -> Vec<String> {
    let mut out = Vec::new();
    for (i, b) in cfg.blocks.iter().enumerate() {
        let mut warn = |msg: String| out.push(format!("[block] {}: {msg}", i + 1));
        if !(100..=2000).contains(&b.k) {
            warn(format!("k={} outside the known-good range [100, 2000]", b.k));
        }
        if !(2..=18).contains(&b.w) {
            warn(format!("w={} outside the known-good range [2, 18]", b.w));
        }
        if !(0.0..=0.3).contains(&b.delta) {
            warn(format!(
                "delta={} outside the known-good range [0, 0.3]",
                b.delta
            ));
        }
        if !(1..=100).contains(&b.n) {
            warn(format!("n={} outside the known-good range [1, 100]", b.n));
        }
        if !(1..=4).contains(&b.st) {
            warn(format!("st={} outside the known-good range [1, 4]", b.st));
        }
        if !(1..=4).contains(&b.stp) {
            warn(format!("stp={} outside the known-good range [1, 4]", b.stp));
        }
        if !(1..=18).contains(&b.wp) {
            warn(format!("wp={} outside the known-good range [1, 18]", b.wp));
        }
    }
    out
}

/// Canonical text form; `parse_config(serialize_config(c))` yields `c`.
pub fn serialize_config(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[data]");
    if let Some(t) = &cfg.data.train {
        let _ = writeln!(s, "train = {t}");
    }
    if let Some(t) = &cfg.data.test {
        let _ = writeln!(s, "test = {t}");
    }
    let h = &cfg.hebbian;
    let _ = writeln!(s, "\n[hebbian]");
    let _ = writeln!(s, "lr = {}", h.lr);
    let _ = writeln!(s, "epochs = {}", h.epochs);
    let _ = writeln!(s, "batch = {}", h.batch);
    let _ = writeln!(s, "scale_update = {}", h.scale_update);
    let _ = writeln!(s, "normalize_patches = {}", h.normalize_patches);
    for b in &cfg.blocks {
        let _ = writeln!(s, "\n[block]");
        let _ = writeln!(s, "type = {}", b.kind.as_str());
        let _ = writeln!(s, "k = {}", b.k);
        let _ = writeln!(s, "w = {}", b.w);
        let _ = writeln!(s, "n = {}", b.n);
        let _ = writeln!(s, "st = {}", b.st);
        let _ = writeln!(s, "wp = {}", b.wp);
        let _ = writeln!(s, "stp = {}", b.stp);
        let _ = writeln!(s, "m = {}", b.m);
        let _ = writeln!(s, "delta = {}", b.delta);
    }
    let t = &cfg.train;
    let _ = writeln!(s, "\n[train]");
    let _ = writeln!(s, "schedule = {}", t.schedule.as_str());
    let _ = writeln!(s, "lr = {}", t.lr);
    let _ = writeln!(s, "epochs = {}", t.epochs);
    let _ = writeln!(s, "batch = {}", t.batch);
    let r = &cfg.run;
    let _ = writeln!(s, "\n[run]");
    let _ = writeln!(s, "seed = {}", r.seed);
    let _ = writeln!(s, "threads = {}", r.threads);
    if let Some(o) = &r.out {
        let _ = writeln!(s, "out = {o}");
    }
    if let Some(l) = &r.log {
        let _ = writeln!(s, "log = {l}");
    }
    if !r.filters.is_empty() {
        let _ = writeln!(s, "filters = {}", r.filters.join(","));
    }
    s
}
