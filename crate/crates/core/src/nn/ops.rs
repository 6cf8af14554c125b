//! Patch extraction and accumulation shared by convolution and
//! de-convolution, plus layout conversions between NCHW tensors and
//! channel-major matrices.
//!
//! Matrices are `(channels * k * k, batch * grid_h * grid_w)`; column
//! `n * grid_h * grid_w + i * grid_w + j` holds the patch whose top-left tap
//! sits at image position `(i * stride - pad, j * stride - pad)`.

use ndarray::{Array2, Array4, ArrayView4, Axis};

use super::Real;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub channels: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGeometry {
    /// Geometry of a strided convolution reading an `img_h x img_w` image.
    pub fn conv(channels: usize, img_h: usize, img_w: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let grid_h = (img_h + 2 * pad - kernel) / stride + 1;
        let grid_w = (img_w + 2 * pad - kernel) / stride + 1;
        Self { channels, img_h, img_w, kernel, stride, pad, grid_h, grid_w }
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn grid_len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn source(&self, g: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (g * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

pub fn im2col<T: Real>(x: &ArrayView4<T>, geo: &PatchGeometry) -> Array2<T> {
    let (batch, c, h, w) = x.dim();
    debug_assert_eq!((c, h, w), (geo.channels, geo.img_h, geo.img_w));
    let cols = batch * geo.grid_len();
    let mut out = vec![T::zero(); geo.rows() * cols];
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let kk = geo.kernel * geo.kernel;
    par::for_each_chunk_mut(&mut out, cols, |row, dst| {
        let ch = row / kk;
        let ki = (row % kk) / geo.kernel;
        let kj = row % geo.kernel;
        for n in 0..batch {
            let plane = &src[(n * c + ch) * h * w..(n * c + ch + 1) * h * w];
            let base = n * geo.grid_len();
            for gi in 0..geo.grid_h {
                let Some(ih) = geo.source(gi, ki, h) else { continue };
                let line = &plane[ih * w..(ih + 1) * w];
                let dst_line = &mut dst[base + gi * geo.grid_w..base + (gi + 1) * geo.grid_w];
                for (gj, d) in dst_line.iter_mut().enumerate() {
                    if let Some(iw) = geo.source(gj, kj, w) {
                        *d = line[iw];
                    }
                }
            }
        }
    });
    Array2::from_shape_vec((geo.rows(), cols), out).expect("im2col shape")
}

/// Scatter-adds patch columns back onto a `(batch, channels, img_h, img_w)` image.
pub fn col2im<T: Real>(cols: &Array2<T>, geo: &PatchGeometry, batch: usize) -> Array4<T> {
    debug_assert_eq!(cols.dim(), (geo.rows(), batch * geo.grid_len()));
    let (c, h, w) = (geo.channels, geo.img_h, geo.img_w);
    let mut out = vec![T::zero(); batch * c * h * w];
    let cs = cols.as_standard_layout();
    let src = cs.as_slice().expect("standard layout");
    let ncols = batch * geo.grid_len();
    let kk = geo.kernel * geo.kernel;
    par::for_each_chunk_mut(&mut out, h * w, |plane_idx, plane| {
        let n = plane_idx / c;
        let ch = plane_idx % c;
        let base = n * geo.grid_len();
        for ki in 0..geo.kernel {
            for kj in 0..geo.kernel {
                let row = ch * kk + ki * geo.kernel + kj;
                let row_src = &src[row * ncols..(row + 1) * ncols];
                for gi in 0..geo.grid_h {
                    let Some(ih) = geo.source(gi, ki, h) else { continue };
                    for gj in 0..geo.grid_w {
                        if let Some(iw) = geo.source(gj, kj, w) {
                            plane[ih * w + iw] += row_src[base + gi * geo.grid_w + gj];
                        }
                    }
                }
            }
        }
    });
    Array4::from_shape_vec((batch, c, h, w), out).expect("col2im shape")
}

/// `(N, C, H, W)` to `(C, N * H * W)`.
pub fn to_channel_major<T: Real>(x: &ArrayView4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let permuted = x.view().permuted_axes([1, 0, 2, 3]);
    let data: Vec<T> = permuted.as_standard_layout().iter().copied().collect();
    Array2::from_shape_vec((c, n * h * w), data).expect("channel-major shape")
}

/// Inverse of [`to_channel_major`].
pub fn from_channel_major<T: Real>(m: Array2<T>, n: usize, h: usize, w: usize) -> Array4<T> {
    let c = m.nrows();
    let a = m.into_shape_with_order((c, n, h, w)).expect("channel-major reshape");
    a.permuted_axes([1, 0, 2, 3]).as_standard_layout().to_owned()
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Array4<T>]) -> Array4<T> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("concat shapes agree")
}
