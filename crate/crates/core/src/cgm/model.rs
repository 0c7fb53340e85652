use fasgen_neural::kernels;
use fasgen_neural::tape::{concat_rows, dense_to_channels};
use fasgen_neural::{init_uniform, LatentDistribution, ParamSet, Tape, Tensor, Var};
use rand::Rng;

use super::{ArchConfig, ConditioningVector, Normalization, COND_DIM, LEAKY_SLOPE};
use crate::{Error, Result};

type Layer = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    embed: Vec<Layer>,
    enc: Vec<Layer>,
    head: Layer,
    fc: Layer,
    dec: Vec<Layer>,
}

/// Canonical parameter list: `(name, shape, fan_in)`.
pub(crate) fn param_layout(arch: &ArchConfig) -> Vec<(String, Vec<usize>, usize)> {
    let (c, k, e, l) = (arch.channels, arch.kernel_size, arch.embed_width, arch.latent_dim);
    let flat = c * arch.bottleneck_len();
    let mut out = Vec::new();
    let dense = |name: String, fout: usize, fin: usize, out: &mut Vec<_>| {
        out.push((format!("{name}.w"), vec![fout, fin], fin));
        out.push((format!("{name}.b"), vec![fout], fin));
    };
    for i in 0..arch.embed_layers {
        dense(format!("embed.{i}"), e, if i == 0 { COND_DIM } else { e }, &mut out);
    }
    for i in 0..arch.conv_layers {
        let cin = if i == 0 { 1 + e } else { c };
        out.push((format!("enc.conv{i}.w"), vec![c, cin, k], cin * k));
        out.push((format!("enc.conv{i}.b"), vec![c], cin * k));
    }
    dense("enc.head".into(), 2 * l, flat, &mut out);
    dense("dec.fc".into(), flat, l + e, &mut out);
    for i in 0..arch.conv_layers {
        let cout = if i + 1 == arch.conv_layers { 1 } else { c };
        let fan = c * k / arch.stride;
        out.push((format!("dec.deconv{i}.w"), vec![c, cout, k], fan));
        out.push((format!("dec.deconv{i}.b"), vec![cout], fan));
    }
    out
}

fn index_layers(arch: &ArchConfig) -> Layers {
    let mut next = 0;
    let mut take = || {
        let l = (next, next + 1);
        next += 2;
        l
    };
    let embed = (0..arch.embed_layers).map(|_| take()).collect();
    let enc = (0..arch.conv_layers).map(|_| take()).collect();
    let head = take();
    let fc = take();
    let dec = (0..arch.conv_layers).map(|_| take()).collect();
    Layers {
        embed,
        enc,
        head,
        fc,
        dec,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
}

/// `mse + alpha·kl` with the MSE averaged over every element and the KL
/// averaged over the batch; `mu` and `log_sigma` are `[batch, latent]`.
pub fn loss_terms(recon: &[f64], target: &[f64], mu: &[f64], log_sigma: &[f64], batch: usize, alpha: f64) -> LossTerms {
    let mse = recon.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / recon.len().max(1) as f64;
    let kl = mu
        .iter()
        .zip(log_sigma)
        .map(|(m, ls)| 0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls))
        .sum::<f64>()
        / batch.max(1) as f64;
    LossTerms {
        total: mse + alpha * kl,
        mse,
        kl,
    }
}

/// Network inputs for one mini-batch.
pub(crate) struct Batch {
    /// Standardized, edge-padded residuals `[1, batch, padded_len]`.
    pub x: Tensor,
    /// Raw residuals `[batch, n_freq]`.
    pub target: Tensor,
    pub cond: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgmFasModel {
    pub arch: ArchConfig,
    pub norm: Normalization,
    /// KL weight used in training.
    pub alpha: f64,
    pub seed: u64,
    pub(crate) params: ParamSet,
    layers: Layers,
}

impl CgmFasModel {
    pub(crate) fn init(arch: ArchConfig, norm: Normalization, alpha: f64, seed: u64, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        for (name, shape, fan_in) in param_layout(&arch) {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                init_uniform(rng, &shape, fan_in, std::f32::consts::SQRT_2)
            };
            params.push(name, t);
        }
        Self::from_params(arch, norm, alpha, seed, params)
    }

    /// Checks names and shapes against the layout implied by `arch`.
    pub(crate) fn from_params(arch: ArchConfig, norm: Normalization, alpha: f64, seed: u64, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        let layout = param_layout(&arch);
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} weight arrays, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (i, (name, shape, _)) in layout.iter().enumerate() {
            if params.name(i) != name || params.tensor(i).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "weight {i}: expected `{name}` {shape:?}, found `{}` {:?}",
                    params.name(i),
                    params.tensor(i).shape()
                )));
            }
        }
        let n = arch.n_freq;
        if norm.freqs.len() != n || norm.dws_mean.len() != n || norm.dws_scale.len() != n {
            return Err(Error::Checkpoint(format!("normalization constants do not cover {n} frequencies")));
        }
        if norm.dws_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) || norm.dws_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Checkpoint("non-finite or non-positive normalization constants".into()));
        }
        Ok(Self {
            layers: index_layers(&arch),
            arch,
            norm,
            alpha,
            seed,
            params,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    fn p(&self, i: usize) -> &Tensor {
        self.params.tensor(i)
    }

    pub(crate) fn make_batch(&self, rows: &[(&[f64], ConditioningVector)]) -> Result<Batch> {
        let (n, lp) = (self.arch.n_freq, self.arch.padded_len());
        let b = rows.len();
        let mut x = Vec::with_capacity(b * lp);
        let mut target = Vec::with_capacity(b * n);
        let mut cond = Vec::with_capacity(b * COND_DIM);
        for (dws, c) in rows {
            if dws.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "spectrum has {} values, model expects {n}",
                    dws.len()
                )));
            }
            let s = self.norm.standardize(dws);
            let last = s[n - 1];
            x.extend_from_slice(&s);
            x.extend(std::iter::repeat(last).take(lp - n));
            target.extend(dws.iter().map(|v| *v as f32));
            cond.extend_from_slice(&c.0);
        }
        Ok(Batch {
            x: Tensor::new(vec![1, b, lp], x)?,
            target: Tensor::new(vec![b, n], target)?,
            cond: Tensor::new(vec![b, COND_DIM], cond)?,
        })
    }

    fn tape_dense(&self, t: &mut Tape, x: Var, layer: Layer) -> Result<Var> {
        let w = t.param(&self.params, layer.0);
        let b = t.param(&self.params, layer.1);
        Ok(t.linear(x, w, b)?)
    }

    fn tape_embed(&self, t: &mut Tape, cond: Var) -> Result<Var> {
        let mut h = cond;
        for &layer in &self.layers.embed {
            h = self.tape_dense(t, h, layer)?;
            h = t.leaky_relu(h, LEAKY_SLOPE);
        }
        Ok(h)
    }

    /// Records the forward pass and loss; returns `(total, mse, kl)`.
    pub(crate) fn tape_loss(&self, t: &mut Tape, batch: &Batch, eps: Tensor, alpha: f32) -> Result<(Var, Var, Var)> {
        let (lp, lb, l) = (self.arch.padded_len(), self.arch.bottleneck_len(), self.arch.latent_dim);
        let cond = t.input(batch.cond.clone());
        let emb = self.tape_embed(t, cond)?;

        let x = t.input(batch.x.clone());
        let emb_ch = t.broadcast_len(emb, lp)?;
        let mut h = t.concat_channels(x, emb_ch)?;
        for &(w, b) in &self.layers.enc {
            let (w, b) = (t.param(&self.params, w), t.param(&self.params, b));
            h = t.conv1d(h, w, b, self.arch.conv_spec())?;
            h = t.leaky_relu(h, LEAKY_SLOPE);
        }
        let flat = t.to_dense(h)?;
        let head = self.tape_dense(t, flat, self.layers.head)?;
        let mu = t.slice_features(head, 0, l)?;
        let log_sigma = t.slice_features(head, l, l)?;
        let z = t.reparameterize(mu, log_sigma, eps)?;

        let zc = t.concat_features(z, emb)?;
        let h = self.tape_dense(t, zc, self.layers.fc)?;
        let h = t.leaky_relu(h, LEAKY_SLOPE);
        let mut h = t.from_dense(h, self.arch.channels, lb)?;
        let last = self.layers.dec.len() - 1;
        for (i, &(w, b)) in self.layers.dec.iter().enumerate() {
            let (w, b) = (t.param(&self.params, w), t.param(&self.params, b));
            h = t.conv_transpose1d(h, w, b, self.arch.deconv_spec())?;
            if i < last {
                h = t.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        let dense = t.to_dense(h)?;
        let cropped = t.slice_features(dense, 0, self.arch.n_freq)?;
        let recon = t.feature_affine(cropped, &self.norm.dws_scale, &self.norm.dws_mean)?;
        let mse = t.mse(recon, batch.target.clone())?;
        let kl = t.kl_mean(mu, log_sigma)?;
        let total = t.weighted_sum(&[(mse, 1.0), (kl, alpha)]);
        Ok((total, mse, kl))
    }

    fn dense(&self, x: &Tensor, layer: Layer) -> Result<Tensor> {
        Ok(kernels::linear(x, self.p(layer.0), self.p(layer.1))?)
    }

    /// Embedding rows `[batch, embed_width]`.
    pub fn embed(&self, conds: &[ConditioningVector]) -> Result<Tensor> {
        let data = conds.iter().flat_map(|c| c.0).collect();
        let mut h = Tensor::new(vec![conds.len(), COND_DIM], data)?;
        for &layer in &self.layers.embed {
            h = self.dense(&h, layer)?;
            kernels::leaky_relu_inplace(&mut h, LEAKY_SLOPE);
        }
        Ok(h)
    }

    /// Posterior parameters for each `(spectrum, condition)` row.
    pub fn encode(&self, rows: &[(&[f64], ConditioningVector)]) -> Result<Vec<LatentDistribution>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let batch = self.make_batch(rows)?;
        let emb = self.embed(&rows.iter().map(|r| r.1).collect::<Vec<_>>())?;
        let (b, e, lp) = (rows.len(), self.arch.embed_width, self.arch.padded_len());
        let mut input = batch.x.into_data();
        input.reserve(e * b * lp);
        for f in 0..e {
            for r in 0..b {
                let v = emb.data()[r * e + f];
                input.extend(std::iter::repeat(v).take(lp));
            }
        }
        let mut h = Tensor::new(vec![1 + e, b, lp], input)?;
        for &(w, bias) in &self.layers.enc {
            h = kernels::conv1d(&h, self.p(w), self.p(bias), self.arch.conv_spec())?;
            kernels::leaky_relu_inplace(&mut h, LEAKY_SLOPE);
        }
        let flat = fasgen_neural::tape::channels_to_dense(&h);
        let head = self.dense(&flat, self.layers.head)?;
        let l = self.arch.latent_dim;
        Ok(head
            .data()
            .chunks(2 * l)
            .map(|row| LatentDistribution::new(row[..l].to_vec(), row[l..].to_vec()))
            .collect())
    }

    /// Runs the transposed-convolution stack on first-layer activations
    /// `[batch, channels·bottleneck]` (already activated); returns raw-unit
    /// spectra `[batch, n_freq]`.
    pub(crate) fn decode_hidden(&self, hidden: &Tensor) -> Result<Vec<f32>> {
        let b = hidden.dim(0);
        let mut h = dense_to_channels(hidden, self.arch.channels, self.arch.bottleneck_len());
        let last = self.layers.dec.len() - 1;
        for (i, &(w, bias)) in self.layers.dec.iter().enumerate() {
            h = kernels::conv_transpose1d(&h, self.p(w), self.p(bias), self.arch.deconv_spec())?;
            if i < last {
                kernels::leaky_relu_inplace(&mut h, LEAKY_SLOPE);
            }
        }
        let (n, lp) = (self.arch.n_freq, self.arch.padded_len());
        let mut out = Vec::with_capacity(b * n);
        for row in h.data().chunks(lp) {
            out.extend(
                row[..n]
                    .iter()
                    .zip(self.norm.dws_scale.iter().zip(&self.norm.dws_mean))
                    .map(|(v, (s, m))| v * s + m),
            );
        }
        Ok(out)
    }

    /// Decodes latent rows `z: [batch, latent]` with embeddings
    /// `[batch, embed_width]`.
    pub fn decode_batch(&self, z: &Tensor, emb: &Tensor) -> Result<Vec<f32>> {
        if z.shape().len() != 2 || z.dim(1) != self.arch.latent_dim || emb.dim(0) != z.dim(0) {
            return Err(Error::InvalidArgument(format!(
                "decode: latent {:?} with embedding {:?}",
                z.shape(),
                emb.shape()
            )));
        }
        let mut h = self.dense(&concat_rows(z, emb), self.layers.fc)?;
        kernels::leaky_relu_inplace(&mut h, LEAKY_SLOPE);
        self.decode_hidden(&h)
    }

    pub fn decode(&self, z: &[f32], cond: ConditioningVector) -> Result<Vec<f64>> {
        let zt = Tensor::new(vec![1, z.len()], z.to_vec())?;
        let out = self.decode_batch(&zt, &self.embed(&[cond])?)?;
        Ok(out.into_iter().map(f64::from).collect())
    }

    /// Encode then decode at the posterior mean.
    pub fn reconstruct(&self, rows: &[(&[f64], ConditioningVector)]) -> Result<Vec<Vec<f64>>> {
        let lds = self.encode(rows)?;
        let l = self.arch.latent_dim;
        let z = Tensor::new(vec![rows.len(), l], lds.iter().flat_map(|d| d.mu.clone()).collect())?;
        let emb = self.embed(&rows.iter().map(|r| r.1).collect::<Vec<_>>())?;
        let out = self.decode_batch(&z, &emb)?;
        Ok(out
            .chunks(self.arch.n_freq)
            .map(|r| r.iter().map(|v| f64::from(*v)).collect())
            .collect())
    }

    /// Splits the first decoder layer into its latent and embedding blocks:
    /// `(w_z [hidden, latent], w_e [hidden, embed])`.
    pub(crate) fn split_decoder_input(&self) -> (Vec<f32>, Vec<f32>) {
        let w = self.p(self.layers.fc.0);
        let (hidden, fin) = (w.dim(0), w.dim(1));
        let l = self.arch.latent_dim;
        let mut wz = Vec::with_capacity(hidden * l);
        let mut we = Vec::with_capacity(hidden * (fin - l));
        for row in w.data().chunks(fin) {
            wz.extend_from_slice(&row[..l]);
            we.extend_from_slice(&row[l..]);
        }
        (wz, we)
    }

    pub(crate) fn decoder_bias(&self) -> &[f32] {
        self.p(self.layers.fc.1).data()
    }

    /// Transposed-convolution `(weight, bias)` pairs in order.
    pub(crate) fn decoder_layers(&self) -> Vec<(&Tensor, &Tensor)> {
        self.layers.dec.iter().map(|&(w, b)| (self.p(w), self.p(b))).collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geo::{GeoPoint, LocalFrame};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_model(n_freq: usize, seed: u64) -> CgmFasModel {
        let norm = Normalization {
            frame: LocalFrame::new(GeoPoint::surface(37.5, -122.0).unwrap()),
            x_range: [-50.0, 50.0],
            y_range: [-50.0, 50.0],
            depth_range: [0.0, 20.0],
            freqs: (0..n_freq).map(|i| 2.0 + i as f64).collect(),
            dws_mean: vec![0.1; n_freq],
            dws_scale: vec![0.6; n_freq],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CgmFasModel::init(ArchConfig::new(n_freq), norm, 1e-4, seed, &mut rng).unwrap()
    }

    fn cond(v: f32) -> ConditioningVector {
        ConditioningVector([v, -v, 0.3, 0.5 * v, 0.1])
    }

    #[test]
    fn shape_contracts() {
        let m = toy_model(128, 1);
        let dws = vec![0.2; 128];
        let ld = m.encode(&[(&dws, cond(0.1))]).unwrap();
        assert_eq!(ld[0].dim(), 16);
        let out = m.decode(&ld[0].mu, cond(0.1)).unwrap();
        assert_eq!(out.len(), 128);
        assert!(m.decode(&[0.0; 3], cond(0.1)).is_err());
        assert!(m.encode(&[(&dws[..100], cond(0.1))]).is_err());
    }

    #[test]
    fn odd_grid_is_padded_and_cropped() {
        let m = toy_model(37, 2);
        let dws = vec![0.0; 37];
        let r = m.reconstruct(&[(&dws, cond(0.0))]).unwrap();
        assert_eq!(r[0].len(), 37);
    }

    #[test]
    fn repeated_calls_are_identical() {
        let m = toy_model(64, 3);
        let z = [0.5f32; 16];
        assert_eq!(m.decode(&z, cond(0.2)).unwrap(), m.decode(&z, cond(0.2)).unwrap());
        assert_eq!(m.embed(&[cond(0.4), cond(0.4)]).unwrap().data()[..32], m.embed(&[cond(0.4)]).unwrap().data()[..]);
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let mut m = toy_model(64, 4);
        for i in 0..m.params.len() {
            if m.params.name(i).starts_with("embed") {
                m.params.tensor_mut(i).data_mut().fill(0.0);
            }
        }
        assert!(m.embed(&[cond(0.9)]).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tape_matches_inference_path() {
        let m = toy_model(64, 5);
        let dws: Vec<f64> = (0..64).map(|i| (i as f64 * 0.1).sin()).collect();
        let rows = [(&dws[..], cond(0.3))];
        let batch = m.make_batch(&rows).unwrap();
        let mut t = Tape::new();
        let (_, mse, _) = m.tape_loss(&mut t, &batch, Tensor::zeros(&[1, 16]), 0.0).unwrap();
        let rec = m.reconstruct(&rows).unwrap();
        let direct = rec[0].iter().zip(&dws).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 64.0;
        assert!((f64::from(t.value(mse).item()) - direct).abs() < 1e-5);
    }

    #[test]
    fn loss_hand_computed() {
        let l = loss_terms(&[1.0, 2.0, 3.0, 4.0], &[1.5, 2.0, 2.0, 4.0], &[1.0, 0.0], &[0.0, 0.5], 1, 0.1);
        let kl = 0.5 * (1.0 + 1.0 - 1.0) + 0.5 * (1.0f64.exp() - 1.0 - 1.0);
        assert!((l.mse - 0.3125).abs() < 1e-12);
        assert!((l.kl - kl).abs() < 1e-12);
        assert!((l.total - (0.3125 + 0.1 * kl)).abs() < 1e-12);
        let perfect = loss_terms(&[0.3; 4], &[0.3; 4], &[0.0; 2], &[0.0; 2], 1, 1.0);
        assert_eq!(perfect.total, 0.0);
        let no_kl = loss_terms(&[1.0], &[0.0], &[2.0], &[1.0], 1, 0.0);
        assert_eq!(no_kl.total, no_kl.mse);
    }
}
