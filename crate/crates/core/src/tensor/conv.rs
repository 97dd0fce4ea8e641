//! im2col-based 3D cross-correlation. 2D convolution is the `kt = 1` case.

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::{shape_err, TensorError};

/// Stride and zero padding along (time, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeom {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }
}

/// Resolved sizes for one conv3d call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub geom: ConvGeom,
}

impl ConvDims {
    pub fn resolve(
        input_shape: &[usize],
        kernel_shape: &[usize],
        geom: ConvGeom,
    ) -> Result<Self, TensorError> {
        if input_shape.len() != 5 || kernel_shape.len() != 5 {
            return Err(shape_err(
                "conv3d",
                format!("expected 5-d input and kernel, got {input_shape:?} and {kernel_shape:?}"),
            ));
        }
        if input_shape[1] != kernel_shape[1] {
            return Err(shape_err(
                "conv3d",
                format!(
                    "input has {} channels but kernel expects {}",
                    input_shape[1], kernel_shape[1]
                ),
            ));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input_shape[2 + a] + 2 * geom.padding[a];
            let k = kernel_shape[2 + a];
            if geom.stride[a] == 0 || padded < k {
                return Err(shape_err(
                    "conv3d",
                    format!(
                        "axis {a}: extent {} with padding {} too small for kernel {k} (stride {})",
                        input_shape[2 + a],
                        geom.padding[a],
                        geom.stride[a]
                    ),
                ));
            }
            output[a] = (padded - k) / geom.stride[a] + 1;
        }
        Ok(Self {
            batch: input_shape[0],
            in_ch: input_shape[1],
            out_ch: kernel_shape[0],
            input: [input_shape[2], input_shape[3], input_shape[4]],
            kernel: [kernel_shape[2], kernel_shape[3], kernel_shape[4]],
            output,
            geom,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    pub fn col_cols(&self) -> usize {
        self.output.iter().product()
    }

    fn in_sample(&self) -> usize {
        self.in_ch * self.input.iter().product::<usize>()
    }

    fn out_sample(&self) -> usize {
        self.out_ch * self.col_cols()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_ch,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    /// Visits every (column-buffer offset, input offset) pair whose input
    /// position lies inside the unpadded volume.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [it, ih, iw] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.output;
        let [st, sh, sw] = self.geom.stride;
        let [pt, ph, pw] = self.geom.padding;
        let ncols = self.col_cols();
        for c in 0..self.in_ch {
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let row = ((c * kt + dt) * kh + dh) * kw + dw;
                        for t in 0..ot {
                            let ti = (t * st + dt) as isize - pt as isize;
                            if ti < 0 || ti >= it as isize {
                                continue;
                            }
                            for y in 0..oh {
                                let yi = (y * sh + dh) as isize - ph as isize;
                                if yi < 0 || yi >= ih as isize {
                                    continue;
                                }
                                let base_in = ((c * it + ti as usize) * ih + yi as usize) * iw;
                                let base_col = row * ncols + (t * oh + y) * ow;
                                for x in 0..ow {
                                    let xi = (x * sw + dw) as isize - pw as isize;
                                    if xi < 0 || xi >= iw as isize {
                                        continue;
                                    }
                                    f(base_col + x, base_in + xi as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        self.for_each_tap(|col, inp| cols[col] = input[inp]);
    }

    fn col2im(&self, cols: &[f64], input_grad: &mut [f64]) {
        self.for_each_tap(|col, inp| input_grad[inp] += cols[col]);
    }
}

/// Forward pass. Returns the output data and the per-sample column buffers
/// (kept for the backward pass).
pub(crate) fn conv3d_forward(
    dims: &ConvDims,
    input: &[f64],
    kernel: &[f64],
    keep_cols: bool,
) -> (Vec<f64>, Vec<f64>) {
    let rows = dims.col_rows();
    let ncols = dims.col_cols();
    let mut out = vec![0.0; dims.batch * dims.out_sample()];
    let mut all_cols = if keep_cols {
        vec![0.0; dims.batch * rows * ncols]
    } else {
        Vec::new()
    };
    let mut scratch = vec![0.0; rows * ncols];
    for b in 0..dims.batch {
        let cols: &mut [f64] = if keep_cols {
            &mut all_cols[b * rows * ncols..(b + 1) * rows * ncols]
        } else {
            scratch.iter_mut().for_each(|v| *v = 0.0);
            &mut scratch
        };
        dims.im2col(
            &input[b * dims.in_sample()..(b + 1) * dims.in_sample()],
            cols,
        );
        gemm_nn(
            kernel,
            cols,
            &mut out[b * dims.out_sample()..(b + 1) * dims.out_sample()],
            dims.out_ch,
            rows,
            ncols,
        );
    }
    super::instrument::add_macs((dims.batch * dims.out_ch * rows * ncols) as u64);
    (out, all_cols)
}

/// Accumulates gradients for input and/or kernel given the upstream gradient.
pub(crate) fn conv3d_backward(
    dims: &ConvDims,
    kernel: &[f64],
    cols: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
) {
    let rows = dims.col_rows();
    let ncols = dims.col_cols();
    if let Some(gk) = grad_kernel {
        for b in 0..dims.batch {
            gemm_nt(
                &grad_out[b * dims.out_sample()..(b + 1) * dims.out_sample()],
                &cols[b * rows * ncols..(b + 1) * rows * ncols],
                gk,
                dims.out_ch,
                ncols,
                rows,
            );
        }
    }
    if let Some(gi) = grad_input {
        let mut dcols = vec![0.0; rows * ncols];
        for b in 0..dims.batch {
            dcols.iter_mut().for_each(|v| *v = 0.0);
            gemm_tn(
                kernel,
                &grad_out[b * dims.out_sample()..(b + 1) * dims.out_sample()],
                &mut dcols,
                rows,
                dims.out_ch,
                ncols,
            );
            dims.col2im(
                &dcols,
                &mut gi[b * dims.in_sample()..(b + 1) * dims.in_sample()],
            );
        }
    }
}
