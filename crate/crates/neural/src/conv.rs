//! Channel-last convolution kernels (im2col + GEMM).
//!
//! Every convolution is described by a [`ConvGeom`] mapping a grid of
//! output positions onto a dense field: field coordinate =
//! `grid * stride - pad + tap * dilation`. A forward convolution gathers
//! from the field (its input) into the grid (its output); a transposed
//! convolution scatters from the grid (its input) into the field (its
//! output). 1D convolutions use a field height of 1.

use serde::{Deserialize, Serialize};

use crate::error::NeuralError;
use crate::gemm::gemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub field: [usize; 2],
    pub grid: [usize; 2],
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub dilation: [usize; 2],
    pub pad: [usize; 2],
}

impl ConvGeom {
    /// Geometry of a forward convolution over a field of `input` spatial size.
    pub fn conv(
        input: [usize; 2],
        kernel: [usize; 2],
        stride: [usize; 2],
        dilation: [usize; 2],
        padding: Padding,
    ) -> Result<Self, NeuralError> {
        let mut grid = [0; 2];
        let mut pad = [0; 2];
        for ax in 0..2 {
            if kernel[ax] == 0 || stride[ax] == 0 || dilation[ax] == 0 {
                return Err(NeuralError::InvalidConfig(
                    "kernel, stride and dilation must be positive".into(),
                ));
            }
            let span = dilation[ax] * (kernel[ax] - 1) + 1;
            match padding {
                Padding::Valid => {
                    if input[ax] < span {
                        return Err(NeuralError::ShapeMismatch(format!(
                            "input extent {} shorter than kernel span {}",
                            input[ax], span
                        )));
                    }
                    grid[ax] = (input[ax] - span) / stride[ax] + 1;
                }
                Padding::Same => {
                    if input[ax] == 0 {
                        return Err(NeuralError::ShapeMismatch("empty input".into()));
                    }
                    grid[ax] = input[ax].div_ceil(stride[ax]);
                    let total = ((grid[ax] - 1) * stride[ax] + span).saturating_sub(input[ax]);
                    pad[ax] = total / 2;
                }
            }
        }
        Ok(ConvGeom {
            field: input,
            grid,
            kernel,
            stride,
            dilation,
            pad,
        })
    }

    /// Geometry of a transposed convolution whose input has spatial size `input`.
    ///
    /// `Same` yields an output of `input * stride`; `Valid` yields
    /// `(input - 1) * stride + span`. Either way the result is the exact
    /// adjoint of the forward convolution from the output back to `input`.
    pub fn transposed(
        input: [usize; 2],
        kernel: [usize; 2],
        stride: [usize; 2],
        dilation: [usize; 2],
        padding: Padding,
    ) -> Result<Self, NeuralError> {
        let mut field = [0; 2];
        for ax in 0..2 {
            let span = dilation[ax] * (kernel[ax].max(1) - 1) + 1;
            field[ax] = match padding {
                Padding::Same => input[ax] * stride[ax],
                Padding::Valid => (input[ax].max(1) - 1) * stride[ax] + span,
            };
        }
        let g = Self::conv(field, kernel, stride, dilation, padding)?;
        debug_assert_eq!(g.grid, input);
        Ok(g)
    }

    pub fn taps(&self) -> usize {
        self.kernel[0] * self.kernel[1]
    }

    pub fn grid_len(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn field_len(&self) -> usize {
        self.field[0] * self.field[1]
    }

    #[inline]
    fn field_index(&self, g: [usize; 2], k: [usize; 2]) -> Option<usize> {
        let h = (g[0] * self.stride[0] + k[0] * self.dilation[0]) as isize - self.pad[0] as isize;
        let w = (g[1] * self.stride[1] + k[1] * self.dilation[1]) as isize - self.pad[1] as isize;
        if h < 0 || w < 0 || h as usize >= self.field[0] || w as usize >= self.field[1] {
            None
        } else {
            Some(h as usize * self.field[1] + w as usize)
        }
    }
}

/// Field `[B, FH, FW, C]` into columns `[B*GH*GW, KH*KW*C]`.
pub fn gather(field: &[f64], batch: usize, channels: usize, geom: &ConvGeom) -> Vec<f64> {
    let taps = geom.taps();
    let row = taps * channels;
    let mut cols = vec![0.0; batch * geom.grid_len() * row];
    for b in 0..batch {
        let src = &field[b * geom.field_len() * channels..(b + 1) * geom.field_len() * channels];
        for gh in 0..geom.grid[0] {
            for gw in 0..geom.grid[1] {
                let r = (b * geom.grid_len() + gh * geom.grid[1] + gw) * row;
                for kh in 0..geom.kernel[0] {
                    for kw in 0..geom.kernel[1] {
                        if let Some(fi) = geom.field_index([gh, gw], [kh, kw]) {
                            let t = kh * geom.kernel[1] + kw;
                            cols[r + t * channels..r + (t + 1) * channels]
                                .copy_from_slice(&src[fi * channels..(fi + 1) * channels]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`gather`]: accumulate columns back onto a zeroed field.
pub fn scatter(cols: &[f64], batch: usize, channels: usize, geom: &ConvGeom) -> Vec<f64> {
    let taps = geom.taps();
    let row = taps * channels;
    let mut field = vec![0.0; batch * geom.field_len() * channels];
    for b in 0..batch {
        let dst = &mut field[b * geom.field_len() * channels..(b + 1) * geom.field_len() * channels];
        for gh in 0..geom.grid[0] {
            for gw in 0..geom.grid[1] {
                let r = (b * geom.grid_len() + gh * geom.grid[1] + gw) * row;
                for kh in 0..geom.kernel[0] {
                    for kw in 0..geom.kernel[1] {
                        if let Some(fi) = geom.field_index([gh, gw], [kh, kw]) {
                            let t = kh * geom.kernel[1] + kw;
                            let c = &cols[r + t * channels..r + (t + 1) * channels];
                            for (d, s) in dst[fi * channels..(fi + 1) * channels].iter_mut().zip(c) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
    field
}

/// Forward convolution: `x [B, field.., cin]`, `w [KH, KW, cin, cout]` → `[B, grid.., cout]`.
pub fn conv_forward(
    x: &[f64],
    w: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    geom: &ConvGeom,
) -> Vec<f64> {
    let cols = gather(x, batch, cin, geom);
    let m = batch * geom.grid_len();
    let k = geom.taps() * cin;
    let mut y = vec![0.0; m * cout];
    gemm(m, k, cout, &cols, false, w, false, &mut y, 0.0);
    y
}

/// Gradients of [`conv_forward`] with respect to `x` and `w`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    geom: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let m = batch * geom.grid_len();
    let k = geom.taps() * cin;
    let dw = need_dw.then(|| {
        let cols = gather(x, batch, cin, geom);
        let mut dw = vec![0.0; k * cout];
        gemm(k, m, cout, &cols, true, dy, false, &mut dw, 0.0);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; m * k];
        gemm(m, cout, k, dy, false, w, true, &mut dcols, 0.0);
        scatter(&dcols, batch, cin, geom)
    });
    (dx, dw)
}

/// `[KH, KW, cin, cout]` → `[cin, KH*KW*cout]`.
fn kernel_to_grid_major(w: &[f64], taps: usize, cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for t in 0..taps {
        for ci in 0..cin {
            let src = (t * cin + ci) * cout;
            let dst = ci * taps * cout + t * cout;
            out[dst..dst + cout].copy_from_slice(&w[src..src + cout]);
        }
    }
    out
}

fn kernel_from_grid_major(wp: &[f64], taps: usize, cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; wp.len()];
    for t in 0..taps {
        for ci in 0..cin {
            let dst = (t * cin + ci) * cout;
            let src = ci * taps * cout + t * cout;
            out[dst..dst + cout].copy_from_slice(&wp[src..src + cout]);
        }
    }
    out
}

/// Transposed convolution: `x [B, grid.., cin]`, `w [KH, KW, cin, cout]` → `[B, field.., cout]`.
pub fn tconv_forward(
    x: &[f64],
    w: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    geom: &ConvGeom,
) -> Vec<f64> {
    let taps = geom.taps();
    let wp = kernel_to_grid_major(w, taps, cin, cout);
    let m = batch * geom.grid_len();
    let n = taps * cout;
    let mut cols = vec![0.0; m * n];
    gemm(m, cin, n, x, false, &wp, false, &mut cols, 0.0);
    scatter(&cols, batch, cout, geom)
}

#[allow(clippy::too_many_arguments)]
pub fn tconv_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    batch: usize,
    cin: usize,
    cout: usize,
    geom: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let taps = geom.taps();
    let m = batch * geom.grid_len();
    let n = taps * cout;
    let dcols = gather(dy, batch, cout, geom);
    let dx = need_dx.then(|| {
        let wp = kernel_to_grid_major(w, taps, cin, cout);
        let mut dx = vec![0.0; m * cin];
        gemm(m, n, cin, &dcols, false, &wp, true, &mut dx, 0.0);
        dx
    });
    let dw = need_dw.then(|| {
        let mut dwp = vec![0.0; cin * n];
        gemm(cin, m, n, x, true, &dcols, false, &mut dwp, 0.0);
        kernel_from_grid_major(&dwp, taps, cin, cout)
    });
    (dx, dw)
}
