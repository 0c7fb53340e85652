//! Inference-only decoder in a channels-last layout.
//!
//! Each transposed convolution is one `[rows, cin] × [cin, kernel·cout]`
//! product followed by a gather of contiguous `cout`-wide tap blocks.

use fasgen_neural::kernels::gemm;

use super::model::CgmFasModel;
use super::LEAKY_SLOPE;

fn leaky(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

struct PhaseLayer {
    cin: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
    kernel: usize,
    /// `[cin, kernel·cout]`, column `tap·cout + co`.
    taps: Vec<f32>,
    bias: Vec<f32>,
    activate: bool,
}

impl PhaseLayer {
    fn out_len(&self, len: usize) -> usize {
        (len - 1) * self.stride + self.kernel + self.out_pad - 2 * self.pad
    }

    /// `x: [batch, len, cin]` into `y: [batch, out_len, cout]`; returns `out_len`.
    fn forward(&self, x: &[f32], batch: usize, len: usize, z: &mut Vec<f32>, y: &mut Vec<f32>) -> usize {
        let (s, k, cout) = (self.stride, self.kernel, self.cout);
        let lo = self.out_len(len);
        let width = k * cout;
        fit(z, batch * len * width);
        gemm(batch * len, self.cin, width, x, false, &self.taps, false, 0.0, z);
        fit(y, batch * lo * cout);
        let mut offsets = Vec::with_capacity(lo * k.div_ceil(s));
        let mut ends = Vec::with_capacity(lo);
        for o in 0..lo {
            let t = o + self.pad;
            for tap in (t % s..k.min(t + 1)).step_by(s) {
                let i = (t - tap) / s;
                if i < len {
                    offsets.push(i * width + tap * cout);
                }
            }
            ends.push(offsets.len());
        }
        let g = Gather {
            z,
            y,
            zrow: len * width,
            offsets: &offsets,
            ends: &ends,
            bias: &self.bias,
            activate: self.activate,
        };
        match cout {
            1 => g.run::<1>(),
            16 => g.run::<16>(),
            32 => g.run::<32>(),
            64 => g.run::<64>(),
            _ => g.run_dyn(cout),
        }
        lo
    }
}

/// Sums tap blocks into each output row, then adds bias and activates.
struct Gather<'a> {
    z: &'a [f32],
    y: &'a mut [f32],
    zrow: usize,
    offsets: &'a [usize],
    ends: &'a [usize],
    bias: &'a [f32],
    activate: bool,
}

impl Gather<'_> {
    fn run<const C: usize>(self) {
        let bias: &[f32; C] = self.bias.try_into().expect("bias width");
        let lo = self.ends.len();
        for (zb, yb) in self.z.chunks_exact(self.zrow).zip(self.y.chunks_exact_mut(lo * C)) {
            let mut start = 0;
            for (dst, &end) in yb.chunks_exact_mut(C).zip(self.ends) {
                let mut acc = *bias;
                for &off in &self.offsets[start..end] {
                    let src: &[f32; C] = zb[off..off + C].try_into().expect("tap width");
                    for c in 0..C {
                        acc[c] += src[c];
                    }
                }
                start = end;
                if self.activate {
                    acc.iter_mut().for_each(|v| *v = leaky(*v));
                }
                dst.copy_from_slice(&acc);
            }
        }
    }

    fn run_dyn(self, cout: usize) {
        let lo = self.ends.len();
        for (zb, yb) in self.z.chunks_exact(self.zrow).zip(self.y.chunks_exact_mut(lo * cout)) {
            let mut start = 0;
            for (dst, &end) in yb.chunks_exact_mut(cout).zip(self.ends) {
                dst.copy_from_slice(self.bias);
                for &off in &self.offsets[start..end] {
                    dst.iter_mut().zip(&zb[off..off + cout]).for_each(|(d, v)| *d += v);
                }
                start = end;
                if self.activate {
                    dst.iter_mut().for_each(|d| *d = leaky(*d));
                }
            }
        }
    }
}

/// Resizes without clearing; callers overwrite every element.
fn fit(v: &mut Vec<f32>, len: usize) {
    v.resize(len, 0.0);
}

/// Reusable buffers for [`DecoderPlan::decode`].
#[derive(Default)]
pub(crate) struct Scratch {
    z: Vec<f32>,
    a: Vec<f32>,
    b: Vec<f32>,
}

/// Decoder weights rearranged for fast batched sampling.
pub(crate) struct DecoderPlan {
    latent: usize,
    hidden: usize,
    bottleneck: usize,
    /// First layer, latent block `[hidden, latent]`, rows in `(position, channel)` order.
    wz: Vec<f32>,
    /// First layer, embedding block `[hidden, embed]`, same row order.
    we: Vec<f32>,
    fc_bias: Vec<f32>,
    layers: Vec<PhaseLayer>,
    n_freq: usize,
    scale: Vec<f32>,
    mean: Vec<f32>,
}

impl DecoderPlan {
    pub(crate) fn new(model: &CgmFasModel) -> Self {
        let arch = &model.arch;
        let (c, lb, l) = (arch.channels, arch.bottleneck_len(), arch.latent_dim);
        let (wz0, we0) = model.split_decoder_input();
        let bias0 = model.decoder_bias();
        let e = we0.len() / (c * lb);
        // Tape layout is channel-major `c·lb + pos`; here it is `pos·c + ch`.
        let (mut wz, mut we, mut fc_bias) = (Vec::new(), Vec::new(), Vec::new());
        for pos in 0..lb {
            for ch in 0..c {
                let src = ch * lb + pos;
                wz.extend_from_slice(&wz0[src * l..(src + 1) * l]);
                we.extend_from_slice(&we0[src * e..(src + 1) * e]);
                fc_bias.push(bias0[src]);
            }
        }
        let spec = arch.deconv_spec();
        let dec = model.decoder_layers();
        let last = dec.len() - 1;
        let layers = dec
            .iter()
            .enumerate()
            .map(|(i, (w, b))| {
                let (cin, cout, k) = (w.dim(0), w.dim(1), w.dim(2));
                let mut taps = Vec::with_capacity(cin * k * cout);
                for ci in 0..cin {
                    for t in 0..k {
                        for co in 0..cout {
                            taps.push(w.data()[(ci * cout + co) * k + t]);
                        }
                    }
                }
                PhaseLayer {
                    cin,
                    cout,
                    stride: spec.stride,
                    pad: spec.padding,
                    out_pad: spec.output_padding,
                    kernel: k,
                    taps,
                    bias: b.data().to_vec(),
                    activate: i < last,
                }
            })
            .collect();
        Self {
            latent: l,
            hidden: c * lb,
            bottleneck: lb,
            wz,
            we,
            fc_bias,
            layers,
            n_freq: arch.n_freq,
            scale: model.norm.dws_scale.iter().map(|v| *v as f32).collect(),
            mean: model.norm.dws_mean.iter().map(|v| *v as f32).collect(),
        }
    }

    pub(crate) fn latent(&self) -> usize {
        self.latent
    }

    pub(crate) fn hidden(&self) -> usize {
        self.hidden
    }

    /// Latent-independent part of the first layer per embedding row,
    /// `emb · w_eᵀ + b` as `[sites, hidden]`.
    pub(crate) fn site_offsets(&self, emb: &[f32], sites: usize) -> Vec<f32> {
        let e = emb.len() / sites.max(1);
        let mut out = Vec::with_capacity(sites * self.hidden);
        for _ in 0..sites {
            out.extend_from_slice(&self.fc_bias);
        }
        gemm(sites, e, self.hidden, emb, false, &self.we, true, 1.0, &mut out);
        out
    }

    /// Adds `z · w_zᵀ` to pre-activations `h: [rows, hidden]`.
    pub(crate) fn add_latent(&self, z: &[f32], rows: usize, h: &mut [f32]) {
        gemm(rows, self.latent, self.hidden, z, false, &self.wz, true, 1.0, h);
    }

    /// Decodes first-layer pre-activations `[rows, hidden]` to raw-unit
    /// spectra `[rows, n_freq]`, appended to `out`.
    pub(crate) fn decode(&self, pre: &[f32], out: &mut Vec<f32>, scratch: &mut Scratch) {
        let rows = pre.len() / self.hidden;
        let Scratch { z, a, b } = scratch;
        a.clear();
        a.extend(pre.iter().map(|v| leaky(*v)));
        let mut len = self.bottleneck;
        for layer in &self.layers {
            len = layer.forward(a, rows, len, z, b);
            std::mem::swap(a, b);
        }
        for row in a[..rows * len].chunks(len) {
            out.extend(
                row[..self.n_freq]
                    .iter()
                    .zip(self.scale.iter().zip(&self.mean))
                    .map(|(v, (s, m))| v * s + m),
            );
        }
    }
}
