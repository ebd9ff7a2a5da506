//! The `FTCN` weight file.
//!
//! Layout, all little-endian: magic `FTCN`, `u32` version, `u32` layer
//! count, then per layer five `u32` (`M`, `Ch/G`, `R`, `R`, bias flag),
//! then the `f32` data of every layer in order, kernels followed by bias.

use std::path::Path;

use convguard::Tensor4;

use crate::config::ModelConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"FTCN";
pub const VERSION: u32 = 1;
const PREFIX: usize = 12;
const LAYER_HEADER: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub kernels: Tensor4<f32>,
    pub bias: Option<Vec<f32>>,
}

impl LayerWeights {
    fn floats(&self) -> usize {
        self.kernels.len() + self.bias.as_ref().map_or(0, Vec::len)
    }
}

pub fn encode(layers: &[LayerWeights]) -> Vec<u8> {
    let data: usize = layers.iter().map(LayerWeights::floats).sum();
    let mut out = Vec::with_capacity(PREFIX + LAYER_HEADER * layers.len() + 4 * data);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        let [m, c, r, s] = l.kernels.dims();
        for v in [m, c, r, s, usize::from(l.bias.is_some())] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    for l in layers {
        for v in l.kernels.data().iter().chain(l.bias.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn truncated(expected: usize, found: usize) -> CliError {
    CliError::Weights(format!("truncated file: expected {expected} bytes, found {found}"))
}

pub fn decode(bytes: &[u8]) -> Result<Vec<LayerWeights>> {
    if bytes.len() < PREFIX {
        return Err(truncated(PREFIX, bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err(CliError::Weights(format!(
            "bad magic {:?}, expected \"FTCN\"",
            &bytes[..4]
        )));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(CliError::Weights(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = u32_at(bytes, 8) as usize;
    let header = count
        .checked_mul(LAYER_HEADER)
        .and_then(|h| h.checked_add(PREFIX))
        .ok_or_else(|| CliError::Weights(format!("layer count {count} is too large")))?;
    if bytes.len() < header {
        return Err(truncated(header, bytes.len()));
    }
    let mut shapes = Vec::with_capacity(count);
    let mut total = header;
    for k in 0..count {
        let at = PREFIX + k * LAYER_HEADER;
        let f: [usize; 5] = std::array::from_fn(|i| u32_at(bytes, at + 4 * i) as usize);
        if f[2] != f[3] {
            return Err(CliError::Weights(format!(
                "layer {k}: non-square kernel {}x{}",
                f[2], f[3]
            )));
        }
        if f[4] > 1 {
            return Err(CliError::Weights(format!(
                "layer {k}: bias flag {} is not 0 or 1",
                f[4]
            )));
        }
        let floats = f[0] * f[1] * f[2] * f[3] + if f[4] == 1 { f[0] } else { 0 };
        total += 4 * floats;
        shapes.push(f);
    }
    if bytes.len() < total {
        return Err(truncated(total, bytes.len()));
    }
    if bytes.len() > total {
        return Err(CliError::Weights(format!(
            "{} trailing bytes after the expected {total}",
            bytes.len() - total
        )));
    }
    let mut floats = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")));
    let mut layers = Vec::with_capacity(count);
    for [m, c, r, s, b] in shapes {
        let kernels: Vec<f32> = floats.by_ref().take(m * c * r * s).collect();
        let bias = (b == 1).then(|| floats.by_ref().take(m).collect());
        layers.push(LayerWeights {
            kernels: Tensor4::from_vec([m, c, r, s], kernels)?,
            bias,
        });
    }
    Ok(layers)
}

pub fn save(path: &Path, layers: &[LayerWeights]) -> Result<()> {
    std::fs::write(path, encode(layers)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<LayerWeights>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes)
}

/// Checks the file's layers against the model description.
pub fn check_against(cfg: &ModelConfig, layers: &[LayerWeights]) -> Result<()> {
    if layers.len() != cfg.layers.len() {
        return Err(CliError::Config(format!(
            "weight file has {} layers, config has {}",
            layers.len(),
            cfg.layers.len()
        )));
    }
    for (l, w) in cfg.layers.iter().zip(layers) {
        if w.kernels.dims() != l.kernel_dims() || w.bias.is_some() != l.bias {
            return Err(CliError::Config(format!(
                "layer {}: weights {:?} (bias {}) do not match config {:?} (bias {})",
                l.name,
                w.kernels.dims(),
                w.bias.is_some(),
                l.kernel_dims(),
                l.bias
            )));
        }
    }
    Ok(())
}

/// Seeded uniform `[-1, 1]` kernels and `[-0.1, 0.1]` bias for every layer.
pub fn random(cfg: &ModelConfig, seed: u64) -> Vec<LayerWeights> {
    cfg.layers
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let s = seed.wrapping_add(k as u64);
            LayerWeights {
                kernels: Tensor4::random(l.kernel_dims(), s),
                bias: l.bias.then(|| {
                    Tensor4::<f32>::random([l.m, 1, 1, 1], s ^ 0xb1a5)
                        .data()
                        .iter()
                        .map(|v| v * 0.1)
                        .collect()
                }),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<LayerWeights> {
        vec![
            LayerWeights {
                kernels: Tensor4::random([4, 3, 3, 3], 1),
                bias: Some(vec![0.5, -0.25, 1e-3, f32::MIN_POSITIVE]),
            },
            LayerWeights {
                kernels: Tensor4::random([2, 2, 1, 1], 2),
                bias: None,
            },
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let layers = sample();
        let bytes = encode(&layers);
        assert_eq!(bytes.len(), 12 + 40 + 4 * (108 + 4 + 4));
        let back = decode(&bytes).unwrap();
        for (a, b) in layers.iter().zip(&back) {
            let bits = |t: &Tensor4<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.kernels), bits(&b.kernels));
            assert_eq!(a.kernels.dims(), b.kernels.dims());
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn truncation_names_expected_size() {
        let bytes = encode(&sample());
        let full = bytes.len();
        for cut in [0, 7, 30, full - 1] {
            let msg = decode(&bytes[..cut]).unwrap_err().to_string();
            let expected = if cut < 12 {
                12
            } else if cut < 52 {
                52
            } else {
                full
            };
            assert!(msg.contains(&format!("expected {expected} bytes")), "{cut}: {msg}");
        }
    }

    #[test]
    fn header_errors() {
        let mut bytes = encode(&sample());
        bytes[4] = 9;
        assert!(decode(&bytes).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(decode(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = encode(&sample());
        bytes.push(0);
        assert!(decode(&bytes).is_err());
    }
}
