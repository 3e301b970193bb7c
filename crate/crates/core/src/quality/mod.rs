//! Image quality metrics.
//!
//! PSNR and SSIM compare against a reference. UCIQE and UIQM score a single
//! underwater image from colour, sharpness and contrast statistics. The
//! default weights of the two no-reference scores are those published with
//! the metrics themselves.

mod fullref;
mod nonref;

pub use fullref::{psnr, ssim, Psnr};
pub use nonref::{uciqe, uciqe_components, uiqm, uiqm_components, UciqeComponents, UiqmComponents};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Weights and constants of all four metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricWeights {
    /// Chroma spread, luminance contrast, mean saturation.
    pub uciqe: [f64; 3],
    /// Colourfulness, sharpness, contrast.
    pub uiqm: [f64; 3],
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    /// Largest pixel value.
    pub p_max: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        MetricWeights {
            uciqe: [0.4680, 0.2745, 0.2576],
            uiqm: [0.0282, 0.2953, 3.5753],
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            p_max: 1.0,
        }
    }
}

impl MetricWeights {
    pub fn c1(&self) -> f64 {
        (self.ssim_k1 * self.p_max).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.ssim_k2 * self.p_max).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.uciqe.iter().chain(&self.uiqm).chain([&self.ssim_k1, &self.ssim_k2]).all(|v| v.is_finite());
        if !finite || !(self.p_max > 0.0 && self.p_max.is_finite()) {
            return Err(Error::Config("metric weights must be finite and p_max positive".into()));
        }
        Ok(())
    }
}

/// An RGB image as three `f64` planes.
pub(crate) struct Planes {
    pub height: usize,
    pub width: usize,
    pub rgb: [Vec<f64>; 3],
}

impl Planes {
    pub fn from_tensor(img: &Tensor4<f32>, op: &'static str) -> Result<Self> {
        let s = img.shape();
        if s.batch != 1 || s.channels != 3 {
            return Err(Error::precondition(op, format!("expected one RGB image, got {s}")));
        }
        let plane = s.plane_len();
        let d = img.data();
        let ch = |c: usize| d[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        Ok(Planes {
            height: s.height,
            width: s.width,
            rgb: [ch(0), ch(1), ch(2)],
        })
    }

    /// `0.299 R + 0.587 G + 0.114 B`.
    pub fn luma(&self) -> Vec<f64> {
        let [r, g, b] = &self.rgb;
        r.iter().zip(g).zip(b).map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b).collect()
    }
}
