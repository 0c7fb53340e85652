//! Forward and backward kernels shared by the tape and the tape-free
//! inference path. Convolutions are lowered to one matrix product per call by
//! gathering patches (`im2col`) or scattering them back (`col2im`).

use crate::tensor::{check_rank, Tensor};
use crate::NeuralError;

/// Geometry of a strided 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    /// Extra trailing outputs of a transposed convolution.
    pub output_padding: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            output_padding: 0,
        }
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    pub fn conv_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }

    pub fn deconv_len(&self, len: usize, kernel: usize) -> Option<usize> {
        if self.stride == 0 || len == 0 {
            return None;
        }
        ((len - 1) * self.stride + kernel + self.output_padding).checked_sub(2 * self.padding)
    }
}

/// `c = a · b + beta · c` with `a: m×k`, `b: k×n`, optionally transposed in
/// storage (a transposed `a` is stored as `k×m`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe exactly those buffers.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gathers patches of `x: [c, batch, len]` into `[c·kernel, batch·out_len]`.
pub fn im2col(
    x: &[f32],
    channels: usize,
    batch: usize,
    len: usize,
    kernel: usize,
    spec: ConvSpec,
    out_len: usize,
) -> Vec<f32> {
    let n = batch * out_len;
    let mut cols = vec![0.0f32; channels * kernel * n];
    for c in 0..channels {
        for k in 0..kernel {
            let row = &mut cols[(c * kernel + k) * n..(c * kernel + k + 1) * n];
            for b in 0..batch {
                let src = &x[(c * batch + b) * len..(c * batch + b + 1) * len];
                let dst = &mut row[b * out_len..(b + 1) * out_len];
                for (j, d) in dst.iter_mut().enumerate() {
                    let pos = (j * spec.stride + k) as isize - spec.padding as isize;
                    if pos >= 0 && (pos as usize) < len {
                        *d = src[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds `[c·kernel, batch·cols_len]` into
/// `out: [c, batch, len]`.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f32],
    channels: usize,
    batch: usize,
    len: usize,
    kernel: usize,
    spec: ConvSpec,
    cols_len: usize,
    out: &mut [f32],
) {
    let n = batch * cols_len;
    let st = spec.stride;
    // Column `j` of tap `k` lands at `j·stride + k − padding`; per phase
    // `k % stride` these positions are contiguous, so taps are summed into
    // de-interleaved rows first and interleaved once.
    let phase_len = cols_len + kernel.div_ceil(st);
    let mut tmp = vec![0.0f32; st * phase_len];
    for c in 0..channels {
        for b in 0..batch {
            tmp.fill(0.0);
            for k in 0..kernel {
                let start = (c * kernel + k) * n + b * cols_len;
                let off = (k % st) * phase_len + k / st;
                for (t, &v) in tmp[off..off + cols_len].iter_mut().zip(&cols[start..start + cols_len]) {
                    *t += v;
                }
            }
            let dst = &mut out[(c * batch + b) * len..(c * batch + b + 1) * len];
            for r in 0..st {
                let first = (r + st - spec.padding % st) % st;
                let q = (first + spec.padding) / st;
                let row = &tmp[r * phase_len + q..(r + 1) * phase_len];
                for (d, &v) in dst.iter_mut().skip(first).step_by(st).zip(row) {
                    *d += v;
                }
            }
        }
    }
}

fn add_channel_bias(out: &mut [f32], bias: &[f32], per_channel: usize) {
    for (chunk, &b) in out.chunks_mut(per_channel).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn channel_sums(dy: &[f32], channels: usize) -> Vec<f32> {
    let per = dy.len() / channels.max(1);
    dy.chunks(per.max(1))
        .take(channels)
        .map(|c| c.iter().map(|&v| f64::from(v)).sum::<f64>() as f32)
        .collect()
}

fn shape_err(op: &'static str, detail: String) -> NeuralError {
    NeuralError::Shape { op, detail }
}

/// `y = x · wᵀ + b` for `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NeuralError> {
    check_rank("linear", x, 2)?;
    check_rank("linear", w, 2)?;
    let (batch, fin) = (x.dim(0), x.dim(1));
    let fout = w.dim(0);
    if w.dim(1) != fin || b.len() != fout {
        return Err(shape_err(
            "linear",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut y = vec![0.0; batch * fout];
    for row in y.chunks_mut(fout) {
        row.copy_from_slice(b.data());
    }
    gemm(batch, fin, fout, x.data(), false, w.data(), true, 1.0, &mut y);
    Tensor::new(vec![batch, fout], y)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, fin) = (x.dim(0), x.dim(1));
    let fout = w.dim(0);
    let mut dx = vec![0.0; batch * fin];
    gemm(batch, fout, fin, dy.data(), false, w.data(), false, 0.0, &mut dx);
    let mut dw = vec![0.0; fout * fin];
    gemm(fout, batch, fin, dy.data(), true, x.data(), false, 0.0, &mut dw);
    let mut db = vec![0.0f64; fout];
    for row in dy.data().chunks(fout) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += f64::from(v);
        }
    }
    (
        Tensor::new(vec![batch, fin], dx).expect("shape"),
        Tensor::new(vec![fout, fin], dw).expect("shape"),
        Tensor::new(vec![fout], db.into_iter().map(|v| v as f32).collect()).expect("shape"),
    )
}

/// Cross-correlation of `x: [in_ch, batch, len]` with `w: [out_ch, in_ch, k]`.
pub fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Result<Tensor, NeuralError> {
    check_rank("conv1d", x, 3)?;
    check_rank("conv1d", w, 3)?;
    let (cin, batch, len) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, kernel) = (w.dim(0), w.dim(2));
    if w.dim(1) != cin || b.len() != cout {
        return Err(shape_err(
            "conv1d",
            format!(
                "input channels {cin} vs weight {:?}, bias {:?}",
                w.shape(),
                b.shape()
            ),
        ));
    }
    let out_len = spec.conv_len(len, kernel).ok_or_else(|| {
        shape_err(
            "conv1d",
            format!("length {len} too short for kernel {kernel} with {spec:?}"),
        )
    })?;
    let n = batch * out_len;
    let cols = im2col(x.data(), cin, batch, len, kernel, spec, out_len);
    let mut y = vec![0.0; cout * n];
    gemm(cout, cin * kernel, n, w.data(), false, &cols, false, 0.0, &mut y);
    add_channel_bias(&mut y, b.data(), n);
    Tensor::new(vec![cout, batch, out_len], y)
}

/// Returns `(dx, dw, db)` for [`conv1d`].
pub fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: ConvSpec,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (cin, batch, len) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, kernel) = (w.dim(0), w.dim(2));
    let out_len = dy.dim(2);
    let n = batch * out_len;
    let ck = cin * kernel;
    let cols = im2col(x.data(), cin, batch, len, kernel, spec, out_len);
    let mut dw = vec![0.0; cout * ck];
    gemm(cout, n, ck, dy.data(), false, &cols, true, 0.0, &mut dw);
    let mut dcols = vec![0.0; ck * n];
    gemm(ck, cout, n, w.data(), true, dy.data(), false, 0.0, &mut dcols);
    let mut dx = vec![0.0; cin * batch * len];
    col2im(&dcols, cin, batch, len, kernel, spec, out_len, &mut dx);
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("shape"),
        Tensor::new(vec![cout], channel_sums(dy.data(), cout)).expect("shape"),
    )
}

/// Transposed convolution of `x: [in_ch, batch, len]` with
/// `w: [in_ch, out_ch, k]`. With bias zero this is the exact adjoint of
/// [`conv1d`] using the same weight buffer.
pub fn conv_transpose1d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    spec: ConvSpec,
) -> Result<Tensor, NeuralError> {
    check_rank("conv_transpose1d", x, 3)?;
    check_rank("conv_transpose1d", w, 3)?;
    let (cin, batch, len) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, kernel) = (w.dim(1), w.dim(2));
    if w.dim(0) != cin || b.len() != cout {
        return Err(shape_err(
            "conv_transpose1d",
            format!(
                "input channels {cin} vs weight {:?}, bias {:?}",
                w.shape(),
                b.shape()
            ),
        ));
    }
    let out_len = spec.deconv_len(len, kernel).ok_or_else(|| {
        shape_err(
            "conv_transpose1d",
            format!("length {len} invalid for kernel {kernel} with {spec:?}"),
        )
    })?;
    let n = batch * len;
    let ck = cout * kernel;
    let mut cols = vec![0.0; ck * n];
    gemm(ck, cin, n, w.data(), true, x.data(), false, 0.0, &mut cols);
    let mut y = vec![0.0; cout * batch * out_len];
    col2im(&cols, cout, batch, out_len, kernel, spec, len, &mut y);
    add_channel_bias(&mut y, b.data(), batch * out_len);
    Tensor::new(vec![cout, batch, out_len], y)
}

/// Returns `(dx, dw, db)` for [`conv_transpose1d`].
pub fn conv_transpose1d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: ConvSpec,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (cin, batch, len) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, kernel) = (w.dim(1), w.dim(2));
    let out_len = dy.dim(2);
    let n = batch * len;
    let ck = cout * kernel;
    let dcols = im2col(dy.data(), cout, batch, out_len, kernel, spec, len);
    let mut dx = vec![0.0; cin * n];
    gemm(cin, ck, n, w.data(), false, &dcols, false, 0.0, &mut dx);
    let mut dw = vec![0.0; cin * ck];
    gemm(cin, n, ck, x.data(), false, &dcols, true, 0.0, &mut dw);
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("shape"),
        Tensor::new(vec![cout], channel_sums(dy.data(), cout)).expect("shape"),
    )
}

pub fn leaky_relu(x: &Tensor, slope: f32) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

pub fn leaky_relu_inplace(x: &mut Tensor, slope: f32) {
    for v in x.data_mut() {
        if *v <= 0.0 {
            *v *= slope;
        }
    }
}

pub fn leaky_relu_backward(x: &Tensor, slope: f32, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}
