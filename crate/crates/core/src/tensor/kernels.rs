use super::Scalar;

/// Output extent of a strided, zero-padded window, or `None` when it would be < 1.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 {
        return None;
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_spatial(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Number of columns of the unrolled matrix (one per output pixel across the batch).
    pub fn columns(&self) -> usize {
        self.batch * self.out_spatial()
    }
}

/// Unrolls `input[B,C,H,W]` into `[C*k*k, B*Ho*Wo]`.
pub(crate) fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let ncols = g.columns();
    let mut cols = vec![T::zero(); g.patch_len() * ncols];
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &input[(b * g.in_channels + c) * g.height * g.width..];
                    for oy in 0..g.out_height {
                        let y = (oy * g.stride + ki) as isize - pad;
                        let base = b * g.out_spatial() + oy * g.out_width;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for ox in 0..g.out_width {
                            let x = (ox * g.stride + kj) as isize - pad;
                            if x >= 0 && x < w {
                                dst[base + ox] = src[(y * w + x) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input layout.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    let ncols = g.columns();
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut out[(b * g.in_channels + c) * g.height * g.width..];
                    for oy in 0..g.out_height {
                        let y = (oy * g.stride + ki) as isize - pad;
                        if y < 0 || y >= h {
                            continue;
                        }
                        let base = b * g.out_spatial() + oy * g.out_width;
                        for ox in 0..g.out_width {
                            let x = (ox * g.stride + kj) as isize - pad;
                            if x >= 0 && x < w {
                                dst[(y * w + x) as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
