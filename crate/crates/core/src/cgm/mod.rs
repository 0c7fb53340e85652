//! Conditional variational autoencoder over residual spectra: coordinate
//! embedding, convolutional encoder, transposed-convolution decoder,
//! training, ensemble generation and KL-weight calibration.

mod calibrate;
mod checkpoint;
mod generate;
pub(crate) mod model;
mod plan;
mod train;

use serde::{Deserialize, Serialize};

use crate::geo::{GeoPoint, LocalFrame};
use crate::{Error, Result};

pub use calibrate::{
    calibrate_alpha, default_alpha_grid, mid_band_residual_std, Calibration, CalibrationRow, MidBandStats, MID_BAND_EDGE,
};
pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use generate::{
    dataset_conditions, ensemble_stats, generate, predict_path_term, sample_each, site_rng, EnsembleStats, DEFAULT_ENSEMBLE,
};
pub use model::{loss_terms, CgmFasModel, LossTerms};
pub use train::{train, LossRecord, TrainOutcome, TrainingConfig};

/// Conditioning inputs: event `(x, y, depth)` and station `(x, y)`.
pub const COND_DIM: usize = 5;

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub n_freq: usize,
    pub conv_layers: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub latent_dim: usize,
    pub embed_width: usize,
    pub embed_layers: usize,
}

impl ArchConfig {
    pub fn new(n_freq: usize) -> Self {
        Self {
            n_freq,
            conv_layers: 3,
            channels: 32,
            kernel_size: 5,
            stride: 2,
            latent_dim: 16,
            embed_width: 32,
            embed_layers: 2,
        }
    }

    /// Wider network for the 911-frequency grid.
    pub fn full_scale(n_freq: usize) -> Self {
        Self {
            conv_layers: 4,
            channels: 64,
            latent_dim: 32,
            embed_width: 64,
            ..Self::new(n_freq)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("architecture: {m}")));
        if self.conv_layers == 0 || self.channels == 0 || self.embed_width == 0 || self.embed_layers == 0 {
            return bad("layer counts and widths must be positive".into());
        }
        if self.stride == 0 || self.kernel_size % 2 == 0 || self.kernel_size < self.stride {
            return bad(format!(
                "need an odd kernel no smaller than the stride, got kernel {} stride {}",
                self.kernel_size, self.stride
            ));
        }
        if self.latent_dim < 2 {
            return bad("latent_dim must be at least 2".into());
        }
        if self.n_freq < self.reduction() {
            return bad(format!(
                "{} frequencies cannot pass {} stride-{} layers",
                self.n_freq, self.conv_layers, self.stride
            ));
        }
        Ok(())
    }

    fn reduction(&self) -> usize {
        self.stride.pow(self.conv_layers as u32)
    }

    /// Working length: `n_freq` rounded up to a multiple of the total stride.
    pub fn padded_len(&self) -> usize {
        self.n_freq.div_ceil(self.reduction()) * self.reduction()
    }

    pub fn bottleneck_len(&self) -> usize {
        self.padded_len() / self.reduction()
    }

    pub(crate) fn conv_spec(&self) -> fasgen_neural::ConvSpec {
        fasgen_neural::ConvSpec::new(self.stride, (self.kernel_size - 1) / 2)
    }

    pub(crate) fn deconv_spec(&self) -> fasgen_neural::ConvSpec {
        self.conv_spec().with_output_padding(self.stride - 1)
    }
}

/// Normalized coordinates fed to the embedding network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditioningVector(pub [f32; COND_DIM]);

/// Maps coordinates and residuals to network units and back.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub frame: LocalFrame,
    /// Planar box shared by events and stations, km.
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub depth_range: [f64; 2],
    pub freqs: Vec<f64>,
    pub dws_mean: Vec<f32>,
    pub dws_scale: Vec<f32>,
}

fn unit(v: f64, range: [f64; 2]) -> f32 {
    let w = range[1] - range[0];
    if w <= 0.0 {
        0.0
    } else {
        (2.0 * (v - range[0]) / w - 1.0) as f32
    }
}

impl Normalization {
    pub fn condition_xy(&self, event_xy: [f64; 2], depth: f64, station_xy: [f64; 2]) -> ConditioningVector {
        ConditioningVector([
            unit(event_xy[0], self.x_range),
            unit(event_xy[1], self.y_range),
            unit(depth, self.depth_range),
            unit(station_xy[0], self.x_range),
            unit(station_xy[1], self.y_range),
        ])
    }

    pub fn condition(&self, event: &GeoPoint, station: &GeoPoint) -> ConditioningVector {
        self.condition_xy(self.frame.project(event), event.depth, self.frame.project(station))
    }

    pub fn standardize(&self, dws: &[f64]) -> Vec<f32> {
        dws.iter()
            .zip(self.dws_mean.iter().zip(&self.dws_scale))
            .map(|(v, (m, s))| ((*v as f32) - m) / s)
            .collect()
    }
}
