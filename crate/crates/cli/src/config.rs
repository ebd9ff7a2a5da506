//! Model description: an ordered chain of convolution layers.

use std::path::Path;

use convguard::{ConvGeometry, ConvParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    #[default]
    F32,
    F64,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub name: String,
    pub n: usize,
    pub ch: usize,
    pub h: usize,
    pub m: usize,
    pub r: usize,
    #[serde(default = "one")]
    pub u: usize,
    #[serde(default)]
    pub pad: usize,
    #[serde(default = "one")]
    pub g: usize,
    #[serde(default)]
    pub bias: bool,
}

impl LayerConfig {
    pub fn params(&self) -> ConvParams {
        ConvParams {
            stride: self.u,
            groups: self.g,
            pad: self.pad,
            bias_enabled: self.bias,
        }
    }

    pub fn geometry(&self) -> Result<ConvGeometry> {
        ConvGeometry::new(self.n, self.ch, self.h, self.m, self.r, self.params())
            .map_err(|e| CliError::Config(format!("layer {}: {e}", self.name)))
    }

    /// Kernel tensor dimensions `[M, Ch/G, R, R]`.
    pub fn kernel_dims(&self) -> [usize; 4] {
        [self.m, self.ch / self.g.max(1), self.r, self.r]
    }
}

/// Parsed and validated model description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub element: ElementType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub layers: Vec<LayerConfig>,
}

impl ModelConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: ModelConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every layer's geometry and that consecutive layers chain:
    /// same batch, `M_k = Ch_{k+1}` and `E_k = H_{k+1}`.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(CliError::Config("model has no layers".into()));
        }
        if let Some(t) = self.tau {
            if !(t.is_finite() && t > 0.0) {
                return Err(CliError::Config(format!("tau must be positive, got {t}")));
            }
        }
        let mut names = std::collections::HashSet::new();
        for l in &self.layers {
            if !names.insert(l.name.as_str()) {
                return Err(CliError::Config(format!("duplicate layer name {}", l.name)));
            }
            if l.g == 0 || !l.ch.is_multiple_of(l.g) || !l.m.is_multiple_of(l.g) {
                return Err(CliError::Config(format!(
                    "layer {}: groups {} must divide Ch={} and M={}",
                    l.name, l.g, l.ch, l.m
                )));
            }
        }
        let geos = self.geometries()?;
        for (k, pair) in geos.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            let (la, lb) = (&self.layers[k], &self.layers[k + 1]);
            if a.n != b.n || a.m != b.ch || a.e != b.h {
                return Err(CliError::Config(format!(
                    "layer {} output [{}, {}, {e}, {e}] does not feed layer {} input [{}, {}, {h}, {h}]",
                    la.name,
                    a.n,
                    a.m,
                    lb.name,
                    b.n,
                    b.ch,
                    e = a.e,
                    h = b.h
                )));
            }
        }
        Ok(())
    }

    pub fn geometries(&self) -> Result<Vec<ConvGeometry>> {
        self.layers.iter().map(LayerConfig::geometry).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(name: &str, ch: usize, h: usize, m: usize, r: usize, u: usize) -> LayerConfig {
        LayerConfig {
            name: name.into(),
            n: 2,
            ch,
            h,
            m,
            r,
            u,
            pad: 0,
            g: 1,
            bias: false,
        }
    }

    #[test]
    fn non_integral_output_is_rejected() {
        let cfg = ModelConfig {
            element: ElementType::F32,
            tau: None,
            layers: vec![layer("a", 1, 5, 1, 2, 2)],
        };
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn layers_must_chain() {
        let mut cfg = ModelConfig {
            element: ElementType::F32,
            tau: None,
            layers: vec![layer("a", 3, 8, 4, 3, 1), layer("b", 4, 6, 2, 3, 1)],
        };
        assert!(cfg.validate().is_ok());
        cfg.layers[1].h = 7;
        assert!(cfg.validate().is_err());
        cfg.layers[1].h = 6;
        cfg.layers[1].ch = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn defaults_fill_optional_fields() {
        let cfg: ModelConfig =
            serde_json::from_str(r#"{"layers":[{"name":"c","n":1,"ch":2,"h":4,"m":3,"r":3}]}"#).unwrap();
        assert_eq!(cfg.element, ElementType::F32);
        assert_eq!(cfg.layers[0].params(), ConvParams::default());
    }
}
