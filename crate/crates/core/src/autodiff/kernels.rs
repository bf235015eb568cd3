//! Plain slice kernels shared by the tape and by gradient-free forward passes.
//!
//! Every output element accumulates its terms in a fixed order that does not
//! depend on how many other rows are in the batch, so a row evaluated alone
//! and the same row evaluated inside a larger batch produce identical bits.

/// `c = a · b` with `a: m×k`, `b: k×n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cij, &bpj) in ci.iter_mut().zip(bp) {
                *cij += aip * bpj;
            }
        }
    }
    c
}

/// `c = a · bᵀ` with `a: m×n`, `b: k×n`; result `m×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let ai = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let bj = &b[j * n..(j + 1) * n];
            c[i * k + j] = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `c = aᵀ · b` with `a: m×k`, `b: m×n`; result `k×n`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let bi = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let cp = &mut c[p * n..(p + 1) * n];
            for (cpj, &bij) in cp.iter_mut().zip(bi) {
                *cpj += aip * bij;
            }
        }
    }
    c
}

/// Adds `bias` (length `n`) to each row of the `m×n` matrix `x` in place.
pub fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Row-wise softmax of an `m×n` matrix.
pub fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    out
}

/// `log Σ exp(row)` computed stably.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Geometry of a stride-1, zero-padded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// `None` when the kernel does not fit inside the padded input.
    pub fn output_hw(&self) -> Option<(usize, usize)> {
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if self.kernel == 0 || self.kernel > ph || self.kernel > pw {
            return None;
        }
        Some((ph - self.kernel + 1, pw - self.kernel + 1))
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        let (oh, ow) = self.output_hw().unwrap_or((0, 0));
        self.out_channels * oh * ow
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Visits every (output index, input index, kernel index) triple with a
    /// nonzero contribution, in a fixed order.
    pub fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = self.output_hw().expect("validated geometry");
        let k = self.kernel;
        let pad = self.padding as isize;
        for o in 0..self.out_channels {
            for y in 0..oh {
                for x in 0..ow {
                    let out_idx = (o * oh + y) * ow + x;
                    for c in 0..self.in_channels {
                        for dy in 0..k {
                            let iy = y as isize + dy as isize - pad;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            for dx in 0..k {
                                let ix = x as isize + dx as isize - pad;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                let in_idx =
                                    (c * self.height + iy as usize) * self.width + ix as usize;
                                let k_idx = ((o * self.in_channels + c) * k + dy) * k + dx;
                                f(out_idx, in_idx, k_idx);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution; `input` holds `n` samples of `geom.input_len()` values.
pub fn conv2d(input: &[f64], kernel: &[f64], geom: &ConvGeometry) -> Vec<f64> {
    let (il, ol) = (geom.input_len(), geom.output_len());
    let n = input.len() / il.max(1);
    let mut out = vec![0.0; n * ol];
    for s in 0..n {
        let x = &input[s * il..(s + 1) * il];
        let y = &mut out[s * ol..(s + 1) * ol];
        geom.for_each_tap(|oi, ii, ki| y[oi] += kernel[ki] * x[ii]);
    }
    out
}

/// Gradient of a batched convolution with respect to its input.
pub fn conv2d_grad_input(grad_out: &[f64], kernel: &[f64], geom: &ConvGeometry) -> Vec<f64> {
    let (il, ol) = (geom.input_len(), geom.output_len());
    let n = grad_out.len() / ol.max(1);
    let mut gi = vec![0.0; n * il];
    for s in 0..n {
        let g = &grad_out[s * ol..(s + 1) * ol];
        let dx = &mut gi[s * il..(s + 1) * il];
        geom.for_each_tap(|oi, ii, ki| dx[ii] += kernel[ki] * g[oi]);
    }
    gi
}

/// Gradient of a batched convolution with respect to its kernel.
pub fn conv2d_grad_kernel(grad_out: &[f64], input: &[f64], geom: &ConvGeometry) -> Vec<f64> {
    let (il, ol) = (geom.input_len(), geom.output_len());
    let n = grad_out.len() / ol.max(1);
    let mut gk = vec![0.0; geom.kernel_len()];
    for s in 0..n {
        let g = &grad_out[s * ol..(s + 1) * ol];
        let x = &input[s * il..(s + 1) * il];
        geom.for_each_tap(|oi, ii, ki| gk[ki] += x[ii] * g[oi]);
    }
    gk
}

/// Adds a per-channel bias to `n` samples of shape `(channels, plane)`.
pub fn add_channel_bias(x: &mut [f64], bias: &[f64], plane: usize) {
    for sample in x.chunks_mut(bias.len() * plane) {
        for (ch, b) in sample.chunks_mut(plane).zip(bias) {
            for v in ch {
                *v += b;
            }
        }
    }
}
