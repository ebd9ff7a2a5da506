//! Convolution forward and backward passes.
//!
//! `O[n][m][x][y] = B[m] + Σ_k Σ_i Σ_j D[n][k][Ux+i][Uy+j] · W[m][k][i][j]`
//!
//! Two forward implementations are provided: a direct loop nest and an
//! im2col + matrix-multiply path. Both accumulate every output element in
//! ascending `(k, i, j)` order starting from zero, so checksum comparisons
//! are reproducible regardless of the implementation selected.

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor4;

/// Stride, grouping, padding and bias settings of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: usize,
    pub groups: usize,
    pub pad: usize,
    pub bias_enabled: bool,
}

impl Default for ConvParams {
    fn default() -> Self {
        Self {
            stride: 1,
            groups: 1,
            pad: 0,
            bias_enabled: false,
        }
    }
}

impl ConvParams {
    pub fn with_stride(stride: usize) -> Self {
        Self {
            stride,
            ..Self::default()
        }
    }

    /// Output size `E = (H + 2·pad − R + U) / U`; errors unless it is a
    /// positive integer.
    pub fn output_size(&self, h: usize, r: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        let hp = h + 2 * self.pad;
        if r == 0 || r > hp {
            return Err(Error::Config(format!("kernel size {r} does not fit padded input {hp}")));
        }
        let num = hp - r + self.stride;
        if !num.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "output size ({hp} - {r} + {u}) / {u} is not integral",
                u = self.stride
            )));
        }
        Ok(num / self.stride)
    }
}

/// Which forward implementation to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvImpl {
    #[default]
    Direct,
    Mm,
}

impl std::str::FromStr for ConvImpl {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "mm" => Ok(Self::Mm),
            other => Err(Error::Config(format!("unknown conv impl `{other}`"))),
        }
    }
}

/// Resolved dimensions of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub n: usize,
    pub ch: usize,
    pub h: usize,
    pub m: usize,
    pub r: usize,
    pub e: usize,
    pub params: ConvParams,
}

impl ConvGeometry {
    pub fn new(n: usize, ch: usize, h: usize, m: usize, r: usize, params: ConvParams) -> Result<Self> {
        let g = params.groups;
        if g == 0 || !ch.is_multiple_of(g) || !m.is_multiple_of(g) {
            return Err(Error::Config(format!(
                "groups {g} must divide channels {ch} and kernels {m}"
            )));
        }
        let e = params.output_size(h, r)?;
        Ok(Self {
            n,
            ch,
            h,
            m,
            r,
            e,
            params,
        })
    }

    /// Derives geometry from `D` and `W`, validating their compatibility.
    pub fn from_tensors<T: Element>(d: &Tensor4<T>, w: &Tensor4<T>, params: ConvParams) -> Result<Self> {
        let [n, ch, h, hw] = d.dims();
        let [m, wch, r, rw] = w.dims();
        if h != hw || r != rw {
            return shape_err(format!(
                "feature maps and kernels must be square, got {:?} and {:?}",
                d.dims(),
                w.dims()
            ));
        }
        if params.groups == 0 || ch % params.groups != 0 || wch * params.groups != ch {
            return shape_err(format!(
                "kernel channels {wch} × groups {} must equal input channels {ch}",
                params.groups
            ));
        }
        Self::new(n, ch, h, m, r, params)
    }

    pub fn channels_per_group(&self) -> usize {
        self.ch / self.params.groups
    }

    pub fn kernels_per_group(&self) -> usize {
        self.m / self.params.groups
    }

    pub fn fmap_dims(&self) -> [usize; 4] {
        [self.n, self.ch, self.h, self.h]
    }

    pub fn kernel_dims(&self) -> [usize; 4] {
        [self.m, self.channels_per_group(), self.r, self.r]
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [self.n, self.m, self.e, self.e]
    }

    /// Group index that kernel `m` belongs to.
    pub fn group_of_kernel(&self, m: usize) -> usize {
        m / self.kernels_per_group()
    }

    pub fn group_of_channel(&self, k: usize) -> usize {
        k / self.channels_per_group()
    }

    pub fn padded_h(&self) -> usize {
        self.h + 2 * self.params.pad
    }
}

/// Bounds for [`ConvGeometry::sample`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeLimits {
    pub max_n: usize,
    pub max_m: usize,
    pub max_ch: usize,
    pub max_h: usize,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub groups: Vec<usize>,
}

impl Default for ShapeLimits {
    fn default() -> Self {
        Self {
            max_n: 16,
            max_m: 16,
            max_ch: 16,
            max_h: 32,
            kernel_sizes: vec![1, 2, 3, 5],
            strides: vec![1, 2],
            groups: vec![1, 2, 4],
        }
    }
}

impl ConvGeometry {
    /// Draws a valid geometry within `limits`: groups divide `Ch` and `M`,
    /// padding is below `R`, and `E` is integral.
    pub fn sample(rng: &mut impl rand::Rng, limits: &ShapeLimits) -> Result<Self> {
        fn pick(rng: &mut impl rand::Rng, v: &[usize], what: &str) -> Result<usize> {
            if v.is_empty() {
                return Err(Error::Config(format!("no {what} to sample from")));
            }
            Ok(v[rng.gen_range(0..v.len())])
        }
        for _ in 0..1000 {
            let g = pick(rng, &limits.groups, "group counts")?;
            let r = pick(rng, &limits.kernel_sizes, "kernel sizes")?;
            let u = pick(rng, &limits.strides, "strides")?;
            if g == 0 || g > limits.max_ch.min(limits.max_m) || limits.max_n == 0 {
                continue;
            }
            let ch = g * rng.gen_range(1..=limits.max_ch / g);
            let m = g * rng.gen_range(1..=limits.max_m / g);
            let pad = rng.gen_range(0..r);
            if limits.max_h + 2 * pad < r {
                continue;
            }
            let e_max = (limits.max_h + 2 * pad - r) / u + 1;
            let e = rng.gen_range(1..=e_max);
            let Some(h) = (u * (e - 1) + r).checked_sub(2 * pad).filter(|&h| h >= 1) else {
                continue;
            };
            let params = ConvParams {
                stride: u,
                groups: g,
                pad,
                bias_enabled: rng.gen_bool(0.5),
            };
            return Self::new(rng.gen_range(1..=limits.max_n), ch, h, m, r, params);
        }
        Err(Error::Config("could not sample a geometry within the limits".into()))
    }
}

/// Convolves one fmap block `D_n` (`1×Ch×H×H`) with one kernel block `W_m`
/// (`1×Ch×R×R`), without bias. Returns a `1×1×E×E` tensor.
pub fn conv_block<T: Element>(d_block: &Tensor4<T>, w_block: &Tensor4<T>, stride: usize) -> Result<Tensor4<T>> {
    if d_block.dims()[0] != 1 || w_block.dims()[0] != 1 {
        return shape_err("conv_block expects single blocks (leading dim 1)");
    }
    conv_forward(
        d_block,
        w_block,
        None,
        &ConvParams::with_stride(stride),
        ConvImpl::Direct,
    )
}

/// Full forward convolution, including grouping, zero padding, and bias.
pub fn conv_forward<T: Element>(
    d: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    params: &ConvParams,
    imp: ConvImpl,
) -> Result<Tensor4<T>> {
    let geo = ConvGeometry::from_tensors(d, w, *params)?;
    let bias = match (params.bias_enabled, bias) {
        (true, Some(b)) if b.len() == geo.m => Some(b),
        (true, Some(b)) => {
            return shape_err(format!("bias length {} != kernels {}", b.len(), geo.m));
        }
        (true, None) => return Err(Error::Config("bias enabled but no bias given".into())),
        (false, _) => None,
    };
    let dp = d.padded(params.pad);
    let mut out = match imp {
        ConvImpl::Direct => direct(&dp, w, &geo),
        ConvImpl::Mm => im2col_mm(&dp, w, &geo),
    };
    if let Some(b) = bias {
        let e2 = geo.e * geo.e;
        for (plane_idx, plane) in out.data_mut().chunks_mut(e2).enumerate() {
            let bm = b[plane_idx % geo.m];
            plane.iter_mut().for_each(|v| *v = *v + bm);
        }
    }
    Ok(out)
}

fn direct<T: Element>(dp: &Tensor4<T>, w: &Tensor4<T>, geo: &ConvGeometry) -> Tensor4<T> {
    let (e, r, u, hp) = (geo.e, geo.r, geo.params.stride, geo.padded_h());
    let chg = geo.channels_per_group();
    let mut out = Tensor4::zeros(geo.output_dims());
    let mut acc = vec![T::zero(); e * e];
    for n in 0..geo.n {
        for m in 0..geo.m {
            let g = geo.group_of_kernel(m);
            acc.iter_mut().for_each(|v| *v = T::zero());
            let wm = w.block(m);
            for kc in 0..chg {
                let dplane = dp.plane(n, g * chg + kc);
                let wplane = &wm[kc * r * r..(kc + 1) * r * r];
                for i in 0..r {
                    for j in 0..r {
                        let wv = wplane[i * r + j];
                        for x in 0..e {
                            let row = &dplane[(u * x + i) * hp + j..];
                            let acc_row = &mut acc[x * e..(x + 1) * e];
                            for (y, a) in acc_row.iter_mut().enumerate() {
                                *a = *a + row[u * y] * wv;
                            }
                        }
                    }
                }
            }
            out.plane_mut(n, m).copy_from_slice(&acc);
        }
    }
    out
}

/// im2col layout: a `(Ch/G·R·R) × (N·E·E)` patch matrix per group, kernels
/// flattened to `(M/G) × (Ch/G·R·R)`.
fn im2col_mm<T: Element>(dp: &Tensor4<T>, w: &Tensor4<T>, geo: &ConvGeometry) -> Tensor4<T> {
    let (e, r, u, hp) = (geo.e, geo.r, geo.params.stride, geo.padded_h());
    let (chg, mg) = (geo.channels_per_group(), geo.kernels_per_group());
    let k_len = chg * r * r;
    let cols = geo.n * e * e;
    let mut out = Tensor4::zeros(geo.output_dims());
    let mut patches = vec![T::zero(); k_len * cols];
    let mut acc = vec![T::zero(); cols];
    for g in 0..geo.params.groups {
        for kc in 0..chg {
            for i in 0..r {
                for j in 0..r {
                    let row = &mut patches[((kc * r + i) * r + j) * cols..][..cols];
                    for n in 0..geo.n {
                        let dplane = dp.plane(n, g * chg + kc);
                        for x in 0..e {
                            for y in 0..e {
                                row[(n * e + x) * e + y] = dplane[(u * x + i) * hp + u * y + j];
                            }
                        }
                    }
                }
            }
        }
        for m in g * mg..(g + 1) * mg {
            let wm = w.block(m);
            acc.iter_mut().for_each(|v| *v = T::zero());
            for (kk, &wv) in wm.iter().enumerate() {
                let prow = &patches[kk * cols..(kk + 1) * cols];
                for (a, &p) in acc.iter_mut().zip(prow) {
                    *a = *a + p * wv;
                }
            }
            for n in 0..geo.n {
                out.plane_mut(n, m).copy_from_slice(&acc[n * e * e..(n + 1) * e * e]);
            }
        }
    }
    out
}

fn backward_geometry<T: Element>(
    d_dims: [usize; 4],
    w_dims: [usize; 4],
    d_o: &Tensor4<T>,
    params: &ConvParams,
) -> Result<ConvGeometry> {
    if params.groups != 1 {
        return Err(Error::Unsupported(
            "backward pass is implemented for ungrouped convolution only".into(),
        ));
    }
    let [n, ch, h, _] = d_dims;
    let [m, _, r, _] = w_dims;
    let geo = ConvGeometry::new(n, ch, h, m, r, *params)?;
    if d_o.dims() != geo.output_dims() {
        return shape_err(format!(
            "output gradient dims {:?} != {:?}",
            d_o.dims(),
            geo.output_dims()
        ));
    }
    Ok(geo)
}

/// Kernel gradient `∇W = D ⊗ ∇O`:
/// `dW[m][k][i][j] = Σ_n Σ_{x,y} D[n][k][Ux+i][Uy+j] · dO[n][m][x][y]`.
///
/// `r` is the kernel size. Only `G = 1` is supported.
pub fn conv_backward_weight<T: Element>(
    d: &Tensor4<T>,
    d_o: &Tensor4<T>,
    r: usize,
    params: &ConvParams,
) -> Result<Tensor4<T>> {
    let [_, ch, _, _] = d.dims();
    let m = d_o.dims()[1];
    let geo = backward_geometry(d.dims(), [m, ch, r, r], d_o, params)?;
    let dp = d.padded(params.pad);
    let (e, u, hp) = (geo.e, params.stride, geo.padded_h());
    let mut dw = Tensor4::zeros([m, ch, r, r]);
    for mi in 0..m {
        for k in 0..ch {
            for i in 0..r {
                for j in 0..r {
                    let mut acc = T::zero();
                    for n in 0..geo.n {
                        let dplane = dp.plane(n, k);
                        let oplane = d_o.plane(n, mi);
                        for x in 0..e {
                            for y in 0..e {
                                acc = acc + dplane[(u * x + i) * hp + u * y + j] * oplane[x * e + y];
                            }
                        }
                    }
                    dw.set([mi, k, i, j], acc);
                }
            }
        }
    }
    Ok(dw)
}

/// Feature-map gradient `∇D = Wᵀ ⊗ ∇O`, i.e. the full correlation of the
/// output gradient with the kernels (roles of `M` and `Ch` swapped).
///
/// `h` is the (unpadded) input size. Only `G = 1` is supported.
pub fn conv_backward_data<T: Element>(
    w: &Tensor4<T>,
    d_o: &Tensor4<T>,
    h: usize,
    params: &ConvParams,
) -> Result<Tensor4<T>> {
    let [m, ch, r, _] = w.dims();
    let n = d_o.dims()[0];
    let geo = backward_geometry([n, ch, h, h], w.dims(), d_o, params)?;
    let _ = m;
    let (e, u, hp) = (geo.e, params.stride, geo.padded_h());
    let mut ddp = Tensor4::zeros([n, ch, hp, hp]);
    for ni in 0..n {
        for k in 0..ch {
            let dst = ddp.plane_mut(ni, k);
            for mi in 0..geo.m {
                let wplane = w.plane(mi, k);
                let oplane = d_o.plane(ni, mi);
                for i in 0..r {
                    for j in 0..r {
                        let wv = wplane[i * r + j];
                        for x in 0..e {
                            for y in 0..e {
                                let idx = (u * x + i) * hp + u * y + j;
                                dst[idx] = dst[idx] + wv * oplane[x * e + y];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ddp.cropped(params.pad))
}

/// Returns `(∇W, ∇D)` for the forward convolution of `d` with `w`.
pub fn conv_backward<T: Element>(
    d: &Tensor4<T>,
    w: &Tensor4<T>,
    d_o: &Tensor4<T>,
    params: &ConvParams,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    if params.groups != 1 {
        return Err(Error::Unsupported(
            "backward pass is implemented for ungrouped convolution only".into(),
        ));
    }
    if d.dims()[1] != w.dims()[1] {
        return shape_err(format!(
            "fmap channels {} != kernel channels {}",
            d.dims()[1],
            w.dims()[1]
        ));
    }
    let dw = conv_backward_weight(d, d_o, w.dims()[2], params)?;
    let dd = conv_backward_data(w, d_o, d.dims()[2], params)?;
    Ok((dw, dd))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: [usize; 4], v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn block_example_hand_computed() {
        let d = t([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t([1, 1, 2, 2], &[1., 0., 0., 1.]);
        let o = conv_block(&d, &w, 1).unwrap();
        assert_eq!(o.data(), &[6., 8., 12., 14.]);
    }

    #[test]
    fn zero_kernel_gives_zero_block() {
        let d = Tensor4::<f64>::random([1, 2, 5, 5], 1);
        let w = Tensor4::zeros([1, 2, 3, 3]);
        let o = conv_block(&d, &w, 1).unwrap();
        assert_eq!(o.dims(), [1, 1, 3, 3]);
        assert!(o.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_extent_kernel_is_dot_product() {
        let d = Tensor4::<f64>::random([1, 3, 4, 4], 2);
        let w = Tensor4::<f64>::random([1, 3, 4, 4], 3);
        let o = conv_block(&d, &w, 1).unwrap();
        let dot: f64 = d.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        assert_eq!(o.dims(), [1, 1, 1, 1]);
        assert!((o.data()[0] - dot).abs() < 1e-12);
    }

    #[test]
    fn bias_is_broadcast() {
        let d = t([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t([1, 1, 2, 2], &[1., 0., 0., 1.]);
        let p = ConvParams {
            bias_enabled: true,
            ..ConvParams::default()
        };
        for imp in [ConvImpl::Direct, ConvImpl::Mm] {
            let o = conv_forward(&d, &w, Some(&[10.0]), &p, imp).unwrap();
            assert_eq!(o.data(), &[16., 18., 22., 24.]);
        }
    }

    #[test]
    fn identity_kernel_copies_input() {
        let d = Tensor4::<f32>::random([2, 1, 4, 4], 9);
        let w = Tensor4::filled([1, 1, 1, 1], 1.0f32);
        let o = conv_forward(&d, &w, None, &ConvParams::default(), ConvImpl::Mm).unwrap();
        assert_eq!(o, d);
    }

    #[test]
    fn non_integral_output_size_is_config_error() {
        let p = ConvParams::with_stride(2);
        assert!(matches!(p.output_size(5, 2), Err(Error::Config(_))));
        assert_eq!(p.output_size(5, 1).unwrap(), 3);
        let padded = ConvParams {
            pad: 1,
            ..ConvParams::default()
        };
        assert_eq!(padded.output_size(4, 3).unwrap(), 4);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let d = Tensor4::<f64>::zeros([1, 3, 4, 4]);
        let w = Tensor4::<f64>::zeros([2, 2, 3, 3]);
        let err = conv_forward(&d, &w, None, &ConvParams::default(), ConvImpl::Direct);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn backward_scalar_case() {
        let d = t([1, 1, 1, 1], &[3.0]);
        let w = t([1, 1, 1, 1], &[-2.0]);
        let d_o = t([1, 1, 1, 1], &[5.0]);
        let (dw, dd) = conv_backward(&d, &w, &d_o, &ConvParams::default()).unwrap();
        assert_eq!(dw.data(), &[15.0]);
        assert_eq!(dd.data(), &[-10.0]);
    }

    #[test]
    fn backward_with_ones_sums_windows() {
        let d = t([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = Tensor4::<f64>::random([1, 1, 2, 2], 4);
        let d_o = Tensor4::filled([1, 1, 2, 2], 1.0);
        let (dw, _) = conv_backward(&d, &w, &d_o, &ConvParams::default()).unwrap();
        // Σ_{x,y} D[x+i][y+j] for each (i, j).
        assert_eq!(dw.data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn backward_zero_gradient() {
        let d = Tensor4::<f64>::random([2, 2, 5, 5], 1);
        let w = Tensor4::<f64>::random([3, 2, 3, 3], 2);
        let d_o = Tensor4::zeros([2, 3, 3, 3]);
        let (dw, dd) = conv_backward(&d, &w, &d_o, &ConvParams::default()).unwrap();
        assert!(dw.data().iter().chain(dd.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn grouped_backward_is_unsupported() {
        let d = Tensor4::<f64>::zeros([1, 2, 3, 3]);
        let w = Tensor4::<f64>::zeros([2, 1, 2, 2]);
        let d_o = Tensor4::zeros([1, 2, 2, 2]);
        let p = ConvParams {
            groups: 2,
            ..ConvParams::default()
        };
        assert!(matches!(conv_backward(&d, &w, &d_o, &p), Err(Error::Unsupported(_))));
    }
}
