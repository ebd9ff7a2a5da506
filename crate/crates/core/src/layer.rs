//! A convolution layer with golden weights and precomputed kernel checksums.

use crate::checksum::{kernel_checksums, verify_kernel, Tolerance};
use crate::conv::{conv_forward, ConvGeometry, ConvImpl, ConvParams};
use crate::element::Element;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor4;

/// Weights as loaded from disk plus the live execution copy.
///
/// `live` is what the convolution reads and what kernel faults corrupt;
/// `golden` is never modified and serves as the reload source.
#[derive(Clone, Debug)]
pub struct ConvLayer<T: Element> {
    pub name: String,
    pub params: ConvParams,
    golden: Tensor4<T>,
    pub live: Tensor4<T>,
    bias: Option<Vec<T>>,
    cw1: Tensor4<T>,
    cw2: Tensor4<T>,
}

impl<T: Element> ConvLayer<T> {
    pub fn new(name: impl Into<String>, weights: Tensor4<T>, bias: Option<Vec<T>>, params: ConvParams) -> Result<Self> {
        if let Some(i) = weights.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        let m = weights.dims()[0];
        match (&bias, params.bias_enabled) {
            (Some(b), true) if b.len() != m => {
                return shape_err(format!("bias length {} != kernels {m}", b.len()));
            }
            (Some(b), true) if b.iter().any(|v| !v.is_finite()) => {
                return Err(Error::Config("non-finite bias".into()));
            }
            (None, true) => return Err(Error::Config("bias enabled but no bias given".into())),
            (Some(_), false) => return Err(Error::Config("bias given but bias disabled".into())),
            _ => {}
        }
        let (cw1, cw2) = kernel_checksums(&weights, params.groups)?;
        Ok(Self {
            name: name.into(),
            params,
            live: weights.clone(),
            golden: weights,
            bias,
            cw1,
            cw2,
        })
    }

    /// Random weights in `[-1, 1]` (bias in `[-0.1, 0.1]`) from `seed`.
    pub fn random(
        name: impl Into<String>,
        m: usize,
        ch: usize,
        r: usize,
        params: ConvParams,
        seed: u64,
    ) -> Result<Self> {
        if params.groups == 0 || !ch.is_multiple_of(params.groups) {
            return Err(Error::Config(format!(
                "groups {} must divide channels {ch}",
                params.groups
            )));
        }
        let w = Tensor4::random([m, ch / params.groups, r, r], seed);
        let bias = params.bias_enabled.then(|| {
            Tensor4::<T>::random([m, 1, 1, 1], seed ^ 0xb1a5)
                .data()
                .iter()
                .map(|&v| v * T::lit(0.1))
                .collect()
        });
        Self::new(name, w, bias, params)
    }

    pub fn golden(&self) -> &Tensor4<T> {
        &self.golden
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    /// Load-time `(Cw1, Cw2)`.
    pub fn kernel_checksums(&self) -> (&Tensor4<T>, &Tensor4<T>) {
        (&self.cw1, &self.cw2)
    }

    pub fn m(&self) -> usize {
        self.golden.dims()[0]
    }

    pub fn r(&self) -> usize {
        self.golden.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.golden.dims()[1] * self.params.groups
    }

    pub fn geometry(&self, n: usize, h: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(n, self.channels(), h, self.m(), self.r(), self.params)
    }

    /// Unprotected forward pass with the live weights.
    pub fn forward(&self, d: &Tensor4<T>, imp: ConvImpl) -> Result<Tensor4<T>> {
        conv_forward(d, &self.live, self.bias(), &self.params, imp)
    }

    pub fn kernels_intact(&self, tol: &Tolerance) -> bool {
        verify_kernel(&self.live, &self.cw1, self.params.groups, tol)
    }

    pub fn reload_weights(&mut self) {
        self.live.clone_from(&self.golden);
    }

    /// Split borrow used by the protected pipeline.
    pub(crate) fn parts_mut(&mut self) -> LayerParts<'_, T> {
        LayerParts {
            golden: &self.golden,
            live: &mut self.live,
            bias: self.bias.as_deref(),
            cw1: &self.cw1,
            cw2: &self.cw2,
        }
    }
}

pub(crate) struct LayerParts<'a, T> {
    pub golden: &'a Tensor4<T>,
    pub live: &'a mut Tensor4<T>,
    pub bias: Option<&'a [T]>,
    pub cw1: &'a Tensor4<T>,
    pub cw2: &'a Tensor4<T>,
}
