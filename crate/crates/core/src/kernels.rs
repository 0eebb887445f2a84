//! Raw numeric kernels behind the tape operations. These work on flat f64
//! slices with explicit dimensions so they stay easy to test against
//! nested-loop oracles, and they fix the summation order so results are
//! bit-reproducible across runs.

/// Geometry of one 2-D convolution, shared by forward and both backward passes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub in_rows: usize,
    pub in_cols: usize,
    pub out_channels: usize,
    pub kernel_rows: usize,
    pub kernel_cols: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub out_rows: usize,
    pub out_cols: usize,
}

impl ConvDims {
    /// Rows/cols actually covered by the kernel once dilation spreads the taps.
    pub fn effective_extent(kernel: usize, dilation: usize) -> usize {
        dilation * (kernel - 1) + 1
    }

    /// Output extent along one axis, or None when the kernel does not fit.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
        let padded = input + 2 * padding;
        let eff = Self::effective_extent(kernel, dilation);
        if eff > padded {
            None
        } else {
            Some((padded - eff) / stride + 1)
        }
    }
}

/// out[b,co,oh,ow] = sum_{ci,kr,kc} in[b,ci,oh*s+kr*d-p, ow*s+kc*d-p] * k[co,ci,kr,kc]
/// (out-of-bounds input positions read as zero padding).
pub fn conv2d_forward(input: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.batch * d.out_channels * d.out_rows * d.out_cols];
    for b in 0..d.batch {
        for co in 0..d.out_channels {
            let out_base = (b * d.out_channels + co) * d.out_rows * d.out_cols;
            for ci in 0..d.in_channels {
                let in_base = (b * d.in_channels + ci) * d.in_rows * d.in_cols;
                for kr in 0..d.kernel_rows {
                    for kc in 0..d.kernel_cols {
                        let w = kernel
                            [((co * d.in_channels + ci) * d.kernel_rows + kr) * d.kernel_cols + kc];
                        for oh in 0..d.out_rows {
                            let ih = (oh * d.stride + kr * d.dilation) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.in_rows as isize {
                                continue;
                            }
                            let in_row = &input[in_base + ih as usize * d.in_cols..][..d.in_cols];
                            let out_row = &mut out[out_base + oh * d.out_cols..][..d.out_cols];
                            accumulate_row(out_row, in_row, w, d, kc);
                        }
                    }
                }
            }
        }
    }
    out
}

/// out_row[ow] += w * in_row[ow*s + kc*d - p] over the valid ow range.
#[inline]
fn accumulate_row(out_row: &mut [f64], in_row: &[f64], w: f64, d: &ConvDims, kc: usize) {
    let off = kc as isize * d.dilation as isize - d.padding as isize;
    if d.stride == 1 {
        // Valid ow satisfy 0 <= ow + off < in_cols.
        let ow0 = (-off).max(0) as usize;
        let ow1 = ((in_row.len() as isize - off).max(0) as usize).min(out_row.len());
        if ow0 >= ow1 {
            return;
        }
        let iw0 = (ow0 as isize + off) as usize;
        let src = &in_row[iw0..iw0 + (ow1 - ow0)];
        for (o, &i) in out_row[ow0..ow1].iter_mut().zip(src) {
            *o += w * i;
        }
    } else {
        for (ow, o) in out_row.iter_mut().enumerate() {
            let iw = (ow * d.stride) as isize + off;
            if iw >= 0 && (iw as usize) < in_row.len() {
                *o += w * in_row[iw as usize];
            }
        }
    }
}

/// d_input[b,ci,ih,iw] += sum over the output positions that read it.
pub fn conv2d_backward_input(grad_out: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut din = vec![0.0; d.batch * d.in_channels * d.in_rows * d.in_cols];
    for b in 0..d.batch {
        for co in 0..d.out_channels {
            let out_base = (b * d.out_channels + co) * d.out_rows * d.out_cols;
            for ci in 0..d.in_channels {
                let in_base = (b * d.in_channels + ci) * d.in_rows * d.in_cols;
                for kr in 0..d.kernel_rows {
                    for kc in 0..d.kernel_cols {
                        let w = kernel
                            [((co * d.in_channels + ci) * d.kernel_rows + kr) * d.kernel_cols + kc];
                        let off = kc as isize * d.dilation as isize - d.padding as isize;
                        for oh in 0..d.out_rows {
                            let ih = (oh * d.stride + kr * d.dilation) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.in_rows as isize {
                                continue;
                            }
                            let g_row = &grad_out[out_base + oh * d.out_cols..][..d.out_cols];
                            let din_row =
                                &mut din[in_base + ih as usize * d.in_cols..][..d.in_cols];
                            if d.stride == 1 {
                                let ow0 = (-off).max(0) as usize;
                                let ow1 = ((d.in_cols as isize - off).max(0) as usize)
                                    .min(d.out_cols);
                                if ow0 >= ow1 {
                                    continue;
                                }
                                let iw0 = (ow0 as isize + off) as usize;
                                for (i, &g) in din_row[iw0..iw0 + (ow1 - ow0)]
                                    .iter_mut()
                                    .zip(&g_row[ow0..ow1])
                                {
                                    *i += w * g;
                                }
                            } else {
                                for (ow, &g) in g_row.iter().enumerate() {
                                    let iw = (ow * d.stride) as isize + off;
                                    if iw >= 0 && (iw as usize) < d.in_cols {
                                        din_row[iw as usize] += w * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// d_kernel[co,ci,kr,kc] += sum_{b,oh,ow} grad_out[b,co,oh,ow] * input[...]
pub fn conv2d_backward_kernel(grad_out: &[f64], input: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut dk = vec![0.0; d.out_channels * d.in_channels * d.kernel_rows * d.kernel_cols];
    for b in 0..d.batch {
        for co in 0..d.out_channels {
            let out_base = (b * d.out_channels + co) * d.out_rows * d.out_cols;
            for ci in 0..d.in_channels {
                let in_base = (b * d.in_channels + ci) * d.in_rows * d.in_cols;
                for kr in 0..d.kernel_rows {
                    for kc in 0..d.kernel_cols {
                        let off = kc as isize * d.dilation as isize - d.padding as isize;
                        let mut acc = 0.0;
                        for oh in 0..d.out_rows {
                            let ih = (oh * d.stride + kr * d.dilation) as isize - d.padding as isize;
                            if ih < 0 || ih >= d.in_rows as isize {
                                continue;
                            }
                            let g_row = &grad_out[out_base + oh * d.out_cols..][..d.out_cols];
                            let in_row = &input[in_base + ih as usize * d.in_cols..][..d.in_cols];
                            if d.stride == 1 {
                                let ow0 = (-off).max(0) as usize;
                                let ow1 = ((d.in_cols as isize - off).max(0) as usize)
                                    .min(d.out_cols);
                                if ow0 >= ow1 {
                                    continue;
                                }
                                let iw0 = (ow0 as isize + off) as usize;
                                for (&g, &i) in
                                    g_row[ow0..ow1].iter().zip(&in_row[iw0..iw0 + (ow1 - ow0)])
                                {
                                    acc += g * i;
                                }
                            } else {
                                for (ow, &g) in g_row.iter().enumerate() {
                                    let iw = (ow * d.stride) as isize + off;
                                    if iw >= 0 && (iw as usize) < d.in_cols {
                                        acc += g * in_row[iw as usize];
                                    }
                                }
                            }
                        }
                        dk[((co * d.in_channels + ci) * d.kernel_rows + kr) * d.kernel_cols + kc] +=
                            acc;
                    }
                }
            }
        }
    }
    dk
}

/// C[m,n] = A[m,k] * B[k,n], i-k-j loop order for contiguous inner updates.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..][..n];
        for kk in 0..k {
            let a_ik = a[i * k + kk];
            if a_ik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..][..n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ik * bv;
            }
        }
    }
    c
}

/// Out-of-place transpose of an r x c row-major matrix.
pub fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}
