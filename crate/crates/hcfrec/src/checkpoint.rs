//! Binary checkpoint and code-export files.
//!
//! A checkpoint is the best-validation model: a one-line text manifest
//! (epoch and validation score), then the encoder and flow segments for the
//! user side followed by the item side. All integers are little-endian u64,
//! all floats little-endian f64, so a reload reproduces the saved state bit
//! for bit. Code exports are packed sign codes under the same conventions.

use std::fmt;
use std::fs;
use std::path::Path;

use hcfrec_core::flow::FlowLayer;
use hcfrec_core::hashing::PackedCode;
use hcfrec_core::model::{EncoderDims, EncoderParams};
use hcfrec_core::trainer::{Adam, ModelState, SideState, TrainMode};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HCFR";
pub const ENCODER_MAGIC: &[u8; 4] = b"HCEN";
pub const FLOW_MAGIC: &[u8; 4] = b"HCFL";
pub const CODES_MAGIC: &[u8; 4] = b"HCOD";
pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    /// Wrong magic, wrong version, truncation, or inconsistent segments.
    Corrupt(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "{e}"),
            CheckpointError::Corrupt(msg) => write!(f, "corrupt checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

/// Everything a later evaluation needs from a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub best_epoch: usize,
    pub best_val_ndcg10: f64,
    pub mode: TrainMode,
    pub user: SideState,
    pub item: SideState,
}

impl Checkpoint {
    /// Rebuilds a state usable for code export and evaluation. Optimizer
    /// moments are not stored, so the result cannot resume training.
    pub fn model_for_eval(&self) -> ModelState {
        let lens = |side: &SideState| {
            let mut lens = Vec::new();
            side.visit(|a| lens.push(a.len()));
            lens
        };
        ModelState {
            adam_user: Adam::new(1e-3, &lens(&self.user)),
            adam_item: Adam::new(1e-3, &lens(&self.item)),
            user: self.user.clone(),
            item: self.item.clone(),
        }
    }
}

// --- writing -----------------------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn magic(&mut self, m: &[u8; 4]) {
        self.buf.extend_from_slice(m);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn array(&mut self, a: &[f64]) {
        self.u64(a.len() as u64);
        for &v in a {
            self.f64(v);
        }
    }

    fn text(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

fn write_side(w: &mut Writer, side: &SideState) {
    w.magic(ENCODER_MAGIC);
    let dims = side.encoder.dims();
    w.u64(dims.input as u64);
    w.u64(dims.hidden as u64);
    w.u64(dims.latent as u64);
    side.encoder.visit(|a| w.array(a));
    w.magic(FLOW_MAGIC);
    w.u64(side.flow.len() as u64);
    for layer in &side.flow {
        w.array(&layer.u);
        w.array(&layer.w);
        w.array(&[layer.a]);
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = Writer::new();
    w.magic(CHECKPOINT_MAGIC);
    w.u64(FORMAT_VERSION);
    w.text(&manifest_line(ck.best_epoch, ck.best_val_ndcg10));
    w.u64(match ck.mode {
        TrainMode::Hcfrec => 0,
        TrainMode::DirectBinarize => 1,
    });
    write_side(&mut w, &ck.user);
    write_side(&mut w, &ck.item);
    fs::write(path, w.buf)?;
    Ok(())
}

fn manifest_line(epoch: usize, val: f64) -> String {
    format!("epoch = {epoch}, val_ndcg10 = {val}\n")
}

fn parse_manifest_line(line: &str) -> Option<(usize, f64)> {
    let rest = line.strip_prefix("epoch = ")?;
    let (epoch, rest) = rest.split_once(", val_ndcg10 = ")?;
    let val = rest.strip_suffix('\n')?;
    Some((epoch.parse().ok()?, val.parse().ok()?))
}

// --- reading -----------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, m: &[u8; 4], what: &str) -> Result<(), CheckpointError> {
        let got = self.bytes(4)?;
        if got != m {
            return Err(corrupt(format!("bad {what} magic {got:?}")));
        }
        Ok(())
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    /// Length-checked size field; the cap stops absurd lengths from
    /// turning a corrupt file into a huge allocation.
    fn len(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        if n > (1 << 32) {
            return Err(corrupt(format!("{what} length {n} is implausible")));
        }
        Ok(n as usize)
    }

    fn array_into(&mut self, dst: &mut [f64], what: &str) -> Result<(), CheckpointError> {
        let n = self.len(what)?;
        if n != dst.len() {
            return Err(corrupt(format!("{what}: expected {} values, found {n}", dst.len())));
        }
        for v in dst.iter_mut() {
            *v = self.f64()?;
        }
        Ok(())
    }

    fn text(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.len(what)?;
        let raw = self.bytes(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| corrupt(format!("{what} is not UTF-8")))
    }

    fn done(&self) -> Result<(), CheckpointError> {
        if self.pos != self.buf.len() {
            return Err(corrupt(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_side(r: &mut Reader) -> Result<SideState, CheckpointError> {
    r.magic(ENCODER_MAGIC, "encoder segment")?;
    let dims = EncoderDims {
        input: r.len("input dim")?,
        hidden: r.len("hidden dim")?,
        latent: r.len("latent dim")?,
    };
    let mut encoder = EncoderParams::zeros(dims);
    let mut fill: Result<(), CheckpointError> = Ok(());
    encoder.visit_mut(|a| {
        if fill.is_ok() {
            fill = r.array_into(a, "encoder array");
        }
    });
    fill?;
    r.magic(FLOW_MAGIC, "flow segment")?;
    let depth = r.len("flow depth")?;
    let mut flow = Vec::with_capacity(depth);
    for _ in 0..depth {
        let mut layer = FlowLayer::identity(dims.latent);
        r.array_into(&mut layer.u, "flow u")?;
        r.array_into(&mut layer.w, "flow w")?;
        let mut a = [0.0];
        r.array_into(&mut a, "flow a")?;
        layer.a = a[0];
        flow.push(layer);
    }
    Ok(SideState { encoder, flow })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let raw = fs::read(path)?;
    let mut r = Reader::new(&raw);
    r.magic(CHECKPOINT_MAGIC, "checkpoint")?;
    let version = r.u64()?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let manifest = r.text("manifest line")?;
    let (best_epoch, best_val_ndcg10) = parse_manifest_line(&manifest)
        .ok_or_else(|| corrupt(format!("unreadable manifest line {manifest:?}")))?;
    let mode = match r.u64()? {
        0 => TrainMode::Hcfrec,
        1 => TrainMode::DirectBinarize,
        other => return Err(corrupt(format!("unknown training mode {other}"))),
    };
    let user = read_side(&mut r)?;
    let item = read_side(&mut r)?;
    r.done()?;
    Ok(Checkpoint { best_epoch, best_val_ndcg10, mode, user, item })
}

// --- code exports ------------------------------------------------------

pub fn save_codes(path: &Path, codes: &[PackedCode]) -> Result<(), CheckpointError> {
    let dim = codes.first().map_or(0, PackedCode::dim);
    debug_assert!(codes.iter().all(|c| c.dim() == dim));
    let mut w = Writer::new();
    w.magic(CODES_MAGIC);
    w.u64(FORMAT_VERSION);
    w.u64(codes.len() as u64);
    w.u64(dim as u64);
    for code in codes {
        for &word in code.words() {
            w.u64(word);
        }
    }
    fs::write(path, w.buf)?;
    Ok(())
}

pub fn load_codes(path: &Path) -> Result<Vec<PackedCode>, CheckpointError> {
    let raw = fs::read(path)?;
    let mut r = Reader::new(&raw);
    r.magic(CODES_MAGIC, "code export")?;
    let version = r.u64()?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let count = r.len("code count")?;
    let dim = r.len("code dim")?;
    let words_per = dim.div_ceil(64);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut words = Vec::with_capacity(words_per);
        for _ in 0..words_per {
            words.push(r.u64()?);
        }
        out.push(PackedCode::from_words(words, dim));
    }
    r.done()?;
    Ok(out)
}
