//! Binary layer-stack serialisation.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "SFNN1\n"  u32 layer_count
//! per layer: u8 kind tag, then
//!   ReflectionPad  u32 pad
//!   Conv           u32 in, u32 out, u32 kernel, u32 stride, array weight, array bias
//!   BatchNorm      u32 channels, f64 eps, f64 momentum,
//!                  array gamma, array beta, array running_mean, array running_var
//!   Linear         u32 in, u32 out, array weight, array bias
//!   Relu, MaxPool, Flatten: no payload
//! array: u32 rank, rank × u32 extents, f32 values
//! ```

use std::io::{Read, Write};

use super::{BatchNorm2d, Conv2d, Layer, LayerKind, Linear, NnError, ReflectionPad, Result, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"SFNN1\n";

const MAX_RANK: u32 = 8;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| NnError::Format(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_array(w: &mut impl Write, shape: &[usize], data: &[f32]) -> Result<()> {
    put_u32(w, shape.len())?;
    for &d in shape {
        put_u32(w, d)?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn write_layers(w: &mut impl Write, layers: &[Layer<f32>]) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, layers.len())?;
    for layer in layers {
        w.write_all(&[layer.kind() as u8])?;
        match layer {
            Layer::ReflectionPad(p) => put_u32(w, p.pad)?,
            Layer::Conv(c) => {
                put_u32(w, c.in_channels)?;
                put_u32(w, c.out_channels)?;
                put_u32(w, c.kernel)?;
                put_u32(w, 1)?;
                put_array(w, c.weight.shape(), c.weight.data())?;
                put_array(w, c.bias.shape(), c.bias.data())?;
            }
            Layer::BatchNorm(bn) => {
                put_u32(w, bn.channels)?;
                w.write_all(&bn.eps.to_le_bytes())?;
                w.write_all(&bn.momentum.to_le_bytes())?;
                put_array(w, bn.gamma.shape(), bn.gamma.data())?;
                put_array(w, bn.beta.shape(), bn.beta.data())?;
                put_array(w, &[bn.channels], &bn.running_mean)?;
                put_array(w, &[bn.channels], &bn.running_var)?;
            }
            Layer::Linear(l) => {
                put_u32(w, l.in_features)?;
                put_u32(w, l.out_features)?;
                put_array(w, l.weight.shape(), l.weight.data())?;
                put_array(w, l.bias.shape(), l.bias.data())?;
            }
            Layer::Relu | Layer::MaxPool2x2 | Layer::Flatten => {}
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => NnError::Format(format!("truncated while reading {what}")),
            _ => NnError::Io(e),
        })?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.bytes(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn array(&mut self, what: &str, expected: &[usize]) -> Result<Tensor<f32>> {
        let rank = self.u32(what)?;
        if rank as u32 > MAX_RANK {
            return Err(NnError::Format(format!("{what}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32(what)?);
        }
        if shape != expected {
            return Err(NnError::Format(format!(
                "{what}: extents {shape:?} do not match hyperparameters {expected:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = self.bytes(n * 4, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| NnError::Format(format!("{what}: {e}")))
    }
}

pub fn read_layers(r: &mut impl Read) -> Result<Vec<Layer<f32>>> {
    let mut rd = Reader { inner: r };
    let magic = rd.bytes(CHECKPOINT_MAGIC.len(), "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(NnError::Format("bad magic, not a network checkpoint".into()));
    }
    let count = rd.u32("layer count")?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let tag = rd.u8("layer tag")?;
        let kind = LayerKind::from_tag(tag)
            .ok_or_else(|| NnError::Format(format!("layer {i}: unknown kind tag {tag}")))?;
        let layer = match kind {
            LayerKind::ReflectionPad => Layer::ReflectionPad(ReflectionPad {
                pad: rd.u32("padding")?,
            }),
            LayerKind::Conv => {
                let cin = rd.u32("conv in_channels")?;
                let cout = rd.u32("conv out_channels")?;
                let k = rd.u32("conv kernel")?;
                let stride = rd.u32("conv stride")?;
                if stride != 1 {
                    return Err(NnError::Format(format!("layer {i}: unsupported stride {stride}")));
                }
                let weight = rd.array("conv weight", &[cout, cin, k, k])?;
                let bias = rd.array("conv bias", &[cout])?;
                Layer::Conv(Conv2d {
                    in_channels: cin,
                    out_channels: cout,
                    kernel: k,
                    weight,
                    bias,
                })
            }
            LayerKind::BatchNorm => {
                let c = rd.u32("batchnorm channels")?;
                let eps = rd.f64("batchnorm eps")?;
                let momentum = rd.f64("batchnorm momentum")?;
                let gamma = rd.array("batchnorm gamma", &[c])?;
                let beta = rd.array("batchnorm beta", &[c])?;
                let running_mean = rd.array("batchnorm running_mean", &[c])?.into_data();
                let running_var = rd.array("batchnorm running_var", &[c])?.into_data();
                if running_var.iter().any(|&v| v.is_nan() || v < 0.0) {
                    return Err(NnError::Format(format!("layer {i}: negative running variance")));
                }
                Layer::BatchNorm(BatchNorm2d {
                    channels: c,
                    eps,
                    momentum,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                })
            }
            LayerKind::Linear => {
                let fin = rd.u32("linear in_features")?;
                let fout = rd.u32("linear out_features")?;
                let weight = rd.array("linear weight", &[fout, fin])?;
                let bias = rd.array("linear bias", &[fout])?;
                Layer::Linear(Linear {
                    in_features: fin,
                    out_features: fout,
                    weight,
                    bias,
                })
            }
            LayerKind::Relu => Layer::Relu,
            LayerKind::MaxPool => Layer::MaxPool2x2,
            LayerKind::Flatten => Layer::Flatten,
        };
        layers.push(layer);
    }
    let mut trailing = [0u8; 1];
    if rd.inner.read(&mut trailing)? != 0 {
        return Err(NnError::Format("trailing bytes after last layer".into()));
    }
    Ok(layers)
}
