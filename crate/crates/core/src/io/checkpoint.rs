//! FSCK model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FSCK"            4 bytes magic
//! version           u16 (= 1)
//! precision         u8 (0 = f32, 1 = f64)
//! model id          u32 byte length + UTF-8
//! encoder spec      u32 byte length + UTF-8 JSON
//! params            tensor list
//! adam step         u64
//! lr, beta1, beta2, epsilon   f64 each
//! first moments     tensor list
//! second moments    tensor list
//!
//! tensor list:  u32 count, then per tensor u32 rank, rank x u64 dims,
//!               product(dims) values at the stored precision
//! ```

use std::path::Path;

use crate::encoder::load_frozen;
use crate::encoder::{Encoder, EncoderKind, EncoderSpec};
use crate::error::{Error, FormatError, Result};
use crate::io::bin::{put_string, ByteReader};
use crate::numeric::{AdamHyper, AdamState, Precision, Real, Tensor};
use crate::trainer::{AnyModel, ProtoModel};

pub const MAGIC: &[u8; 4] = b"FSCK";
pub const VERSION: u16 = 1;

const MAX_RANK: usize = 8;

fn precision_tag(p: Precision) -> u8 {
    match p {
        Precision::F32 => 0,
        Precision::F64 => 1,
    }
}

fn put_tensors<F: Real>(out: &mut Vec<u8>, tensors: &[Tensor<F>]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
}

fn read_tensors<F: Real>(r: &mut ByteReader<'_>, what: &str) -> std::result::Result<Vec<Tensor<F>>, FormatError> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let rank = r.u32()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(FormatError::Malformed(format!("{what} tensor {i} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| FormatError::Malformed(format!("{what} tensor {i} has shape {shape:?}")))?;
        let width = F::PRECISION.bytes();
        let bytes = r.take(n.checked_mul(width).ok_or(FormatError::Truncated)?)?;
        let data = bytes.chunks_exact(width).map(F::read_le).collect();
        out.push(Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))?);
    }
    Ok(out)
}

fn encode_model<F: Real>(m: &ProtoModel<F>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(precision_tag(F::PRECISION));
    put_string(&mut out, &m.id);
    put_string(&mut out, &serde_json::to_string(m.encoder.spec())?);
    put_tensors(&mut out, m.encoder.params());
    out.extend_from_slice(&m.adam.step.to_le_bytes());
    let h = m.adam.hyper;
    for v in [h.lr, h.beta1, h.beta2, h.epsilon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_tensors(&mut out, &m.adam.first_moment);
    put_tensors(&mut out, &m.adam.second_moment);
    Ok(out)
}

pub fn encode(model: &AnyModel) -> Result<Vec<u8>> {
    match model {
        AnyModel::F32(m) => encode_model(m),
        AnyModel::F64(m) => encode_model(m),
    }
}

fn same_shapes<F: Real>(a: &[Tensor<F>], b: &[Tensor<F>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
}

fn decode_model<F: Real>(
    mut r: ByteReader<'_>,
    id: String,
    spec: EncoderSpec,
    store_dir: Option<&Path>,
) -> Result<ProtoModel<F>> {
    let params: Vec<Tensor<F>> = read_tensors(&mut r, "parameter")?;
    let step = r.u64()?;
    let hyper = AdamHyper {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        epsilon: r.f64()?,
    };
    let first_moment = read_tensors(&mut r, "first moment")?;
    let second_moment = read_tensors(&mut r, "second moment")?;
    r.finish()?;
    if !same_shapes(&params, &first_moment) || !same_shapes(&params, &second_moment) {
        return Err(FormatError::DimensionMismatch("optimizer moments do not match parameter shapes".into()).into());
    }

    let store = match &spec.kind {
        EncoderKind::FrozenProjection { store, .. } => {
            let path = match store_dir {
                Some(dir) if store.is_relative() => dir.join(store),
                _ => store.clone(),
            };
            Some(std::sync::Arc::new(load_frozen(path)?))
        }
        _ => None,
    };
    let mut encoder = Encoder::<F>::with_store(&spec, store)?;
    encoder.set_params(params).map_err(|_| {
        FormatError::DimensionMismatch(format!(
            "parameters do not match the `{}` encoder spec",
            spec.kind_name()
        ))
    })?;
    Ok(ProtoModel {
        id,
        encoder,
        adam: AdamState {
            hyper,
            step,
            first_moment,
            second_moment,
        },
    })
}

/// Relative frozen-store paths in the spec are resolved against `store_dir`
/// when given.
pub fn decode(bytes: &[u8], store_dir: Option<&Path>) -> Result<AnyModel> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let tag = r.u8()?;
    let id = r.string("model id")?;
    let spec_json = r.string("encoder spec")?;
    let spec: EncoderSpec =
        serde_json::from_str(&spec_json).map_err(|e| FormatError::Malformed(format!("encoder spec: {e}")))?;
    match tag {
        0 => Ok(AnyModel::F32(decode_model(r, id, spec, store_dir)?)),
        1 => Ok(AnyModel::F64(decode_model(r, id, spec, store_dir)?)),
        t => Err(FormatError::Malformed(format!("unknown precision tag {t}")).into()),
    }
}

pub fn write(path: impl AsRef<Path>, model: &AnyModel) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<AnyModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    decode(&bytes, path.parent())
}
