//! Little-endian binary checkpoint container.
//!
//! ```text
//! magic      4 bytes   ("EVNN", "EVAC", "EVDS", ...)
//! version    u32
//! layers     u32
//! per layer:
//!   tag      u8        0 conv2d, 1 dense, 2 relu, 3 flatten
//!   ndims    u32
//!   dims     ndims x u32
//!   payload  f32 x (implied by tag and dims)
//! ```
//!
//! Layer dims: conv2d `[in_ch, out_ch, kernel, stride, padding, in_h, in_w]`
//! followed by weight then bias; dense `[in, out]` followed by weight then
//! bias; relu and flatten carry their per-sample input shape and no payload.
//! Container variants append their own sections after the layers.

use std::io::{Read, Write};

use super::layer::{Conv2d, Dense, Layer};
use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const NETWORK_MAGIC: &[u8; 4] = b"EVNN";

const TAG_CONV2D: u8 = 0;
const TAG_DENSE: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_FLATTEN: u8 = 3;

// Guards against absurd allocations from corrupt headers.
const MAX_DIM: u32 = 1 << 24;

pub fn write_header<W: Write>(w: &mut W, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    write_u32(w, FORMAT_VERSION)
}

pub fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    read_exact(r, &mut found)?;
    if &found != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Checkpoint("file is truncated".into())
        } else {
            Error::Io(e)
        }
    })
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_dims<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let n = read_u32(r)?;
    if n > 16 {
        return Err(Error::Checkpoint(format!("implausible dim count {n}")));
    }
    (0..n)
        .map(|_| {
            let d = read_u32(r)?;
            if d > MAX_DIM {
                return Err(Error::Checkpoint(format!("implausible dimension {d}")));
            }
            Ok(d as usize)
        })
        .collect()
}

fn write_dims<W: Write>(w: &mut W, dims: &[usize]) -> Result<()> {
    write_u32(w, dims.len() as u32)?;
    for d in dims {
        write_u32(w, *d as u32)?;
    }
    Ok(())
}

/// Writes the layer count and layers (no header).
pub fn write_layers<W: Write>(w: &mut W, net: &Network) -> Result<()> {
    write_u32(w, net.layers().len() as u32)?;
    for layer in net.layers() {
        match layer {
            Layer::Conv2d(c) => {
                w.write_all(&[TAG_CONV2D])?;
                write_dims(
                    w,
                    &[
                        c.in_channels,
                        c.out_channels,
                        c.kernel,
                        c.stride,
                        c.padding,
                        c.in_h,
                        c.in_w,
                    ],
                )?;
                write_f32s(w, c.weight.data())?;
                write_f32s(w, c.bias.data())?;
            }
            Layer::Dense(d) => {
                w.write_all(&[TAG_DENSE])?;
                write_dims(w, &[d.in_features, d.out_features])?;
                write_f32s(w, d.weight.data())?;
                write_f32s(w, d.bias.data())?;
            }
            Layer::Relu(shape) => {
                w.write_all(&[TAG_RELU])?;
                write_dims(w, shape)?;
            }
            Layer::Flatten(shape) => {
                w.write_all(&[TAG_FLATTEN])?;
                write_dims(w, shape)?;
            }
        }
    }
    Ok(())
}

/// Reads a layer block written by [`write_layers`].
pub fn read_layers<R: Read>(r: &mut R) -> Result<Network> {
    let count = read_u32(r)?;
    if count == 0 || count > 4096 {
        return Err(Error::Checkpoint(format!(
            "implausible layer count {count}"
        )));
    }
    let mut layers = Vec::with_capacity(count as usize);
    for i in 0..count {
        let mut tag = [0u8; 1];
        read_exact(r, &mut tag)?;
        let dims = read_dims(r)?;
        let bad = |what: &str| Error::Checkpoint(format!("layer {i}: {what}"));
        let layer = match tag[0] {
            TAG_CONV2D => {
                let [in_channels, out_channels, kernel, stride, padding, in_h, in_w] =
                    <[usize; 7]>::try_from(dims.as_slice())
                        .map_err(|_| bad("conv2d needs 7 dims"))?;
                if kernel == 0
                    || stride == 0
                    || in_h + 2 * padding < kernel
                    || in_w + 2 * padding < kernel
                {
                    return Err(bad("invalid conv2d geometry"));
                }
                let wshape = vec![out_channels, in_channels, kernel, kernel];
                let wlen: usize = wshape.iter().product();
                let weight = Tensor::new(wshape.clone(), read_f32s(r, wlen)?)
                    .map_err(|_| bad("empty conv2d"))?;
                let bias = Tensor::new(vec![out_channels], read_f32s(r, out_channels)?)
                    .map_err(|_| bad("empty conv2d"))?;
                Layer::Conv2d(Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    in_h,
                    in_w,
                    weight,
                    bias,
                    grad_weight: Tensor::zeros(&wshape),
                    grad_bias: Tensor::zeros(&[out_channels]),
                })
            }
            TAG_DENSE => {
                let [in_features, out_features] = <[usize; 2]>::try_from(dims.as_slice())
                    .map_err(|_| bad("dense needs 2 dims"))?;
                let wshape = vec![out_features, in_features];
                let weight = Tensor::new(wshape.clone(), read_f32s(r, in_features * out_features)?)
                    .map_err(|_| bad("empty dense"))?;
                let bias = Tensor::new(vec![out_features], read_f32s(r, out_features)?)
                    .map_err(|_| bad("empty dense"))?;
                Layer::Dense(Dense {
                    in_features,
                    out_features,
                    weight,
                    bias,
                    grad_weight: Tensor::zeros(&wshape),
                    grad_bias: Tensor::zeros(&[out_features]),
                })
            }
            TAG_RELU => Layer::Relu(dims),
            TAG_FLATTEN => Layer::Flatten(dims),
            other => return Err(bad(&format!("unknown layer tag {other}"))),
        };
        layers.push(layer);
    }
    Network::from_layers(layers).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Serializes a bare network as an `EVNN` container.
pub fn save_network<W: Write>(w: &mut W, net: &Network) -> Result<()> {
    write_header(w, NETWORK_MAGIC)?;
    write_layers(w, net)
}

pub fn load_network<R: Read>(r: &mut R) -> Result<Network> {
    read_header(r, NETWORK_MAGIC)?;
    read_layers(r)
}
