//! Binary model files.
//!
//! All integers are unsigned 32-bit little-endian and all parameters are
//! IEEE-754 `f32` little-endian:
//!
//! ```text
//! "EXPC"                      magic
//! u32 version                 = 1
//! u32 variant                 0 = conv, 1 = dense
//! u32 height, width, channels
//! u32 n, u32 x n              conv channel widths
//! u32 n, u32 x n              conv strides
//! u32 n, u32 x n              dense hidden widths
//! f32 x param_count           layer order, weights before bias
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{InputSize, LayerSpec, ModelConfig, ModelParams, Variant, NUM_CLASSES};
use crate::tensor::Scalar;

pub const MAGIC: [u8; 4] = *b"EXPC";
pub const VERSION: u32 = 1;

fn variant_tag(v: Variant) -> u32 {
    match v {
        Variant::Conv => 0,
        Variant::Dense => 1,
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::usage(format!("{v} does not fit the model file's 32-bit fields")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_list(out: &mut Vec<u8>, values: &[usize]) -> Result<()> {
    push_u32(out, values.len())?;
    values.iter().try_for_each(|&v| push_u32(out, v))
}

/// Serialises `params` (converted to `f32`) together with their configuration.
pub fn encode_model<T: Scalar>(config: &ModelConfig, params: &ModelParams<T>) -> Result<Vec<u8>> {
    config.validate()?;
    params.check_matches(config)?;
    let values = params.flatten();
    let mut out = Vec::with_capacity(64 + 4 * values.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&variant_tag(config.variant).to_le_bytes());
    let InputSize {
        height,
        width,
        channels,
    } = config.input_size;
    for v in [height, width, channels] {
        push_u32(&mut out, v)?;
    }
    push_list(&mut out, &config.conv_channels)?;
    push_list(&mut out, &config.conv_strides)?;
    push_list(&mut out, &config.dense_hidden)?;
    for (i, v) in values.iter().enumerate() {
        let f = v.to_f64_lossy() as f32;
        if !f.is_finite() {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::Corruption(format!("file ends at byte {} while reading {what}", self.bytes.len()))
        })?;
        self.pos = end;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
    }

    fn list(&mut self, what: &str) -> Result<Vec<usize>> {
        let len = self.u32(what)? as usize;
        if len > (self.bytes.len() - self.pos) / 4 {
            return Err(Error::Corruption(format!(
                "{what} claims {len} entries but the file is too short"
            )));
        }
        (0..len).map(|_| Ok(self.u32(what)? as usize)).collect()
    }
}

/// Parameter count with overflow checking, for untrusted configurations.
fn checked_param_count(config: &ModelConfig) -> Option<usize> {
    config.layers().ok()?.iter().try_fold(0usize, |acc, spec| {
        let n = match *spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                ..
            } => 9usize
                .checked_mul(in_channels)?
                .checked_mul(out_channels)?
                .checked_add(out_channels)?,
            LayerSpec::Dense { inputs, outputs } => {
                inputs.checked_mul(outputs)?.checked_add(outputs)?
            }
            _ => 0,
        };
        acc.checked_add(n)
    })
}

pub fn decode_model(bytes: &[u8]) -> Result<(ModelConfig, ModelParams<f32>)> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::format(0, "not a model file (bad magic)"));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            4,
            format!("unsupported model file version {version} (expected {VERSION})"),
        ));
    }
    let variant = match r.u32("variant")? {
        0 => Variant::Conv,
        1 => Variant::Dense,
        other => return Err(Error::format(8, format!("unknown variant tag {other}"))),
    };
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let channels = r.u32("channels")? as usize;
    let config = ModelConfig {
        variant,
        input_size: InputSize {
            height,
            width,
            channels,
        },
        conv_channels: r.list("conv channels")?,
        conv_strides: r.list("conv strides")?,
        dense_hidden: r.list("dense hidden widths")?,
        num_classes: NUM_CLASSES,
    };
    config
        .validate()
        .map_err(|e| Error::Corruption(format!("invalid configuration: {e}")))?;
    let count = checked_param_count(&config)
        .ok_or_else(|| Error::Corruption("configuration is too large".into()))?;

    let payload = &bytes[r.pos..];
    if Some(payload.len()) != count.checked_mul(4) {
        return Err(Error::Corruption(format!(
            "expected {} payload bytes for {count} parameters, found {}",
            count.saturating_mul(4),
            payload.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Corruption(format!("parameter {i} is not finite ({v})")));
        }
        values.push(v);
    }
    let params = ModelParams::from_flat(&config, &values)?;
    Ok((config, params))
}

pub fn save_model<T: Scalar>(path: &Path, config: &ModelConfig, params: &ModelParams<T>) -> Result<()> {
    fs::write(path, encode_model(config, params)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    decode_model(&fs::read(path)?)
}
