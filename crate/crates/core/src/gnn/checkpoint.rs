//! Binary checkpoint.
//!
//! ```text
//! "GNFPMODEL" | version u32
//! dims: count u32, then u32 x count
//!       (node_in edge_in enc_hidden enc_out conv_hidden conv_out layers out)
//! hyper: dropout_mlp dropout_decoder projection_eps bn_eps bn_momentum: f64 x5
//! parameters: count u64, f64 x count      (GnnModel::params order, row-major)
//! running stats: count u64, f64 x count   (per batch-norm layer: mean, var)
//! parameter count u64
//! ```

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::model::{GnnModel, ModelDims};
use crate::io::{checked_count, write_atomic, FormatError, Reader, Writer};

pub const MODEL_MAGIC: &[u8; 9] = b"GNFPMODEL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<FormatError> for CheckpointError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io(e) => CheckpointError::Io(e),
            FormatError::VersionMismatch { found, expected } => {
                CheckpointError::VersionMismatch { found, expected }
            }
            FormatError::Corrupt(m) => CheckpointError::CorruptFile(m),
            FormatError::Json(e) => CheckpointError::CorruptFile(e.to_string()),
        }
    }
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptFile(msg.into())
}

pub fn write_model(out: &mut dyn Write, model: &GnnModel) -> std::io::Result<()> {
    let mut w = Writer::new(out);
    w.bytes(MODEL_MAGIC)?;
    w.u32(MODEL_VERSION)?;
    let dims = model.dims.as_array();
    w.u32(dims.len() as u32)?;
    for d in dims {
        w.u32(d as u32)?;
    }
    let bn = model.batchnorms();
    let (bn_eps, bn_momentum) = bn
        .first()
        .map(|b| (b.eps, b.momentum))
        .unwrap_or((0.0, 0.0));
    w.f64s(&[
        model.dropout_mlp,
        model.dropout_decoder,
        model.projection_eps,
        bn_eps,
        bn_momentum,
    ])?;
    let count = model.param_count();
    w.u64(count as u64)?;
    for t in model.params() {
        w.f64s(t.as_slice())?;
    }
    let stats: usize = bn.iter().map(|b| 2 * b.channels()).sum();
    w.u64(stats as u64)?;
    for b in &bn {
        w.f64s(&b.running_mean)?;
        w.f64s(&b.running_var)?;
    }
    w.u64(count as u64)
}

pub fn read_model(input: impl Read) -> Result<GnnModel, CheckpointError> {
    let mut r = Reader::new(input);
    if &r.bytes::<9>()? != MODEL_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    if r.u32()? != 8 {
        return Err(corrupt("unexpected dimension table length"));
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = checked_count(r.u32()? as u64, 1 << 16, "dimension")?;
    }
    if dims.contains(&0) {
        return Err(corrupt("zero dimension"));
    }
    let dims = ModelDims::from_array(dims);
    let hyper = r.f64s(5)?;
    let mut model = GnnModel::new(dims, 0);
    model.dropout_mlp = hyper[0];
    model.dropout_decoder = hyper[1];
    model.projection_eps = hyper[2];
    let expected = model.param_count();
    let count = checked_count(r.u64()?, 1 << 32, "parameter count")?;
    if count != expected {
        return Err(corrupt(format!(
            "{count} parameters for dims that need {expected}"
        )));
    }
    for t in model.params_mut() {
        for x in t.as_mut_slice() {
            *x = r.f64()?;
        }
    }
    let stats = checked_count(r.u64()?, 1 << 32, "running-stat count")?;
    let mut bns = model.batchnorms_mut();
    if stats != bns.iter().map(|b| 2 * b.channels()).sum::<usize>() {
        return Err(corrupt("running-stat blob does not match dims"));
    }
    for b in &mut bns {
        b.eps = hyper[3];
        b.momentum = hyper[4];
        for x in b.running_mean.iter_mut().chain(b.running_var.iter_mut()) {
            *x = r.f64()?;
        }
    }
    if r.u64()? != expected as u64 {
        return Err(corrupt("parameter count field disagrees with blob"));
    }
    r.expect_end()?;
    Ok(model)
}

pub fn model_to_bytes(model: &GnnModel) -> Vec<u8> {
    let mut buf = Vec::new();
    write_model(&mut buf, model).expect("writing to memory");
    buf
}

pub fn save_model(path: &Path, model: &GnnModel) -> Result<(), CheckpointError> {
    Ok(write_atomic(path, |w| write_model(w, model))?)
}

pub fn load_model(path: &Path) -> Result<GnnModel, CheckpointError> {
    read_model(BufReader::new(File::open(path)?))
}
