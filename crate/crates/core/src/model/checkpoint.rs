//! Binary parameter checkpoints.
//!
//! Layout: the magic bytes `HGL1`, then every tensor in fixed order as
//! `rank: u32`, `dims: rank × u32`, row-major `f64` values, all little-endian.
//! Order: input mean, input scale, then weight and bias of each layer in
//! [`Layer::ALL`] order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::network::{Layer, LayerSet, NetworkParams};

pub const MAGIC: &[u8; 4] = b"HGL1";

fn put_tensor(out: &mut Vec<u8>, dims: &[usize], values: &[f64]) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(params: &NetworkParams) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put_tensor(&mut out, &[params.input_mean.len()], &params.input_mean);
    put_tensor(&mut out, &[params.input_scale.len()], &params.input_scale);
    for l in Layer::ALL {
        let d = params.layer(l);
        put_tensor(&mut out, &[d.fan_in(), d.fan_out()], d.weight.data());
        put_tensor(&mut out, &[d.bias.len()], &d.bias);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::BadCheckpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn tensor(&mut self, expected_rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let rank = self.u32()?;
        if rank != expected_rank {
            return Err(Error::BadCheckpoint(format!(
                "tensor rank {rank}, expected {expected_rank}"
            )));
        }
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = self.take(count * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((dims, values))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<NetworkParams> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadCheckpoint("missing HGL1 magic".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let (_, input_mean) = r.tensor(1)?;
    let (_, input_scale) = r.tensor(1)?;
    let features = input_mean.len();
    if input_scale.len() != features {
        return Err(Error::BadCheckpoint(
            "input mean/scale lengths differ".into(),
        ));
    }
    let mut layers = Vec::new();
    for _ in Layer::ALL {
        let (dims, w) = r.tensor(2)?;
        let (_, b) = r.tensor(1)?;
        layers.push((Matrix::from_vec(dims[0], dims[1], w), b));
    }
    if r.pos != bytes.len() {
        return Err(Error::BadCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let classes = layers[Layer::Classifier as usize].0.cols();
    let mut set = LayerSet::zeros(features, classes);
    for (l, (w, b)) in Layer::ALL.into_iter().zip(layers) {
        let slot = set.layer_mut(l);
        if slot.weight.rows() != w.rows() || slot.weight.cols() != w.cols() {
            return Err(Error::BadCheckpoint(format!(
                "layer {l:?} is {}x{}, expected {}x{}",
                w.rows(),
                w.cols(),
                slot.weight.rows(),
                slot.weight.cols()
            )));
        }
        if slot.bias.len() != b.len() {
            return Err(Error::BadCheckpoint(format!(
                "layer {l:?} has {} biases, expected {}",
                b.len(),
                slot.bias.len()
            )));
        }
        slot.weight = w;
        slot.bias = b;
    }
    let params = NetworkParams {
        input_mean,
        input_scale,
        layers: set,
    };
    if !params.is_finite() {
        return Err(Error::BadCheckpoint("non-finite parameter".into()));
    }
    Ok(params)
}

pub fn save(params: &NetworkParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NetworkParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
