//! Binary model checkpoints.
//!
//! Layout: the ASCII magic `GGRAD1`, then for each layer its weight rows and
//! cols as little-endian `u64`, the weight matrix row-major as little-endian
//! `f32`, then `rows` bias values in the same encoding. Activations and
//! dropout rates are not stored; loading fills an existing model of the same
//! architecture.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{Mlp, Tensor};

pub const MAGIC: &[u8; 6] = b"GGRAD1";

pub fn encode(model: &Mlp<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + model.layers().len() * 16 + 4 * count(model));
    out.extend_from_slice(MAGIC);
    for layer in model.layers() {
        out.extend_from_slice(&(layer.weight.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(layer.weight.cols() as u64).to_le_bytes());
        for v in layer.weight.data().iter().chain(layer.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn count(model: &Mlp<f32>) -> usize {
    model
        .layers()
        .iter()
        .map(|l| l.weight.numel() + l.bias.numel())
        .sum()
}

/// Parses checkpoint bytes into `(weight, bias)` pairs.
pub fn decode(mut bytes: &[u8]) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let mut magic = [0u8; 6];
    bytes
        .read_exact(&mut magic)
        .map_err(|_| Error::data("checkpoint truncated before magic"))?;
    if &magic != MAGIC {
        return Err(Error::data("not a GGRAD1 checkpoint"));
    }
    let mut layers = Vec::new();
    while !bytes.is_empty() {
        let rows = read_u64(&mut bytes)? as usize;
        let cols = read_u64(&mut bytes)? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_add(rows).and_then(|t| t.checked_mul(4)).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::data(format!("checkpoint layer {rows}x{cols} exceeds file")))?;
        let w = read_f32s(&mut bytes, n)?;
        let b = read_f32s(&mut bytes, rows)?;
        layers.push((Tensor::matrix(rows, cols, w)?, Tensor::matrix(1, rows, b)?));
    }
    Ok(layers)
}

fn read_u64(bytes: &mut &[u8]) -> Result<u64> {
    let mut buf = [0u8; 8];
    bytes
        .read_exact(&mut buf)
        .map_err(|_| Error::data("checkpoint truncated in layer header"))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f32s(bytes: &mut &[u8], n: usize) -> Result<Vec<f32>> {
    if bytes.len() < n * 4 {
        return Err(Error::data("checkpoint truncated in layer values"));
    }
    let (head, rest) = bytes.split_at(n * 4);
    *bytes = rest;
    Ok(head
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Overwrites the weights of `model` with decoded layers of matching shape.
pub fn load_into(model: &mut Mlp<f32>, layers: Vec<(Tensor<f32>, Tensor<f32>)>) -> Result<()> {
    if layers.len() != model.layers().len() {
        return Err(Error::data(format!(
            "checkpoint has {} layers, model has {}",
            layers.len(),
            model.layers().len()
        )));
    }
    for (i, (dst, (w, b))) in model.layers_mut().iter_mut().zip(layers).enumerate() {
        if w.shape() != dst.weight.shape() || b.numel() != dst.bias.numel() {
            return Err(Error::data(format!(
                "checkpoint layer {i} is {:?}, model expects {:?}",
                w.shape(),
                dst.weight.shape()
            )));
        }
        dst.weight.data_mut().copy_from_slice(w.data());
        dst.bias.data_mut().copy_from_slice(b.data());
        dst.weight.zero_grad();
        dst.bias.zero_grad();
    }
    Ok(())
}

pub fn save(model: &Mlp<f32>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(model: &mut Mlp<f32>, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_into(model, decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> Mlp<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mlp::new(&[6, 4, 3], Activation::Relu, Activation::Identity, 0.0, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_restores_weights() {
        let a = model(1);
        let mut b = model(2);
        assert_ne!(a, b);
        load_into(&mut b, decode(&encode(&a)).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&model(1));
        assert_eq!(&bytes[..6], b"GGRAD1");
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 4);
        assert_eq!(u64::from_le_bytes(bytes[14..22].try_into().unwrap()), 6);
        assert_eq!(bytes.len(), 6 + 2 * 16 + 4 * (24 + 4 + 12 + 3));
    }

    #[test]
    fn rejects_corrupt_files() {
        let bytes = encode(&model(1));
        assert!(matches!(decode(b"GGRAD2"), Err(Error::Data(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Data(_))));
        let mut other = model(3);
        let wrong = Mlp::new(&[6, 5, 3], Activation::Relu, Activation::Identity, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(load_into(&mut other, decode(&encode(&wrong)).unwrap()).is_err());
    }
}
