//! No-reference underwater quality scores.
//!
//! UCIQE works in CIELab: the spread of chroma, the luminance range between
//! the 1st and 99th percentiles, and the mean saturation `C / √(C² + L²)`,
//! with `L` scaled to `[0, 1]` and `a`, `b` divided by 100.
//!
//! UIQM works on 0-255 RGB values:
//! * UICM, colourfulness from α-trimmed (10% each side) means and the
//!   variances of the `R - G` and `(R + G)/2 - B` opponent channels;
//! * UISM, the luma-weighted EME of each channel multiplied by its
//!   normalised Sobel magnitude, over 10×10 blocks;
//! * UIConM, the PLIP-free logAMEE `-(1/k₁k₂) Σ r ln r` with
//!   `r = (max - min)/(max + min)` over 10×10×3 blocks.
//!
//! Partial blocks at the right and bottom edges are dropped.

use super::{MetricWeights, Planes};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UciqeComponents {
    pub chroma_std: f64,
    pub luminance_contrast: f64,
    pub saturation_mean: f64,
}

impl UciqeComponents {
    pub fn score(&self, w: [f64; 3]) -> f64 {
        w[0] * self.chroma_std + w[1] * self.luminance_contrast + w[2] * self.saturation_mean
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UiqmComponents {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

impl UiqmComponents {
    pub fn score(&self, w: [f64; 3]) -> f64 {
        w[0] * self.uicm + w[1] * self.uism + w[2] * self.uiconm
    }
}

const BLOCK: usize = 10;

// sRGB primaries to XYZ; the white point is taken as the row sums so that
// neutral greys land on a = b = 0.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const D: f64 = 6.0 / 29.0;
    if t > D * D * D {
        t.cbrt()
    } else {
        t / (3.0 * D * D) + 4.0 / 29.0
    }
}

/// CIELab `(L, a, b)` of one sRGB pixel in `[0, 1]`.
pub(crate) fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz: Vec<f64> = RGB_TO_XYZ
        .iter()
        .map(|row| {
            let white: f64 = row.iter().sum();
            row.iter().zip(&lin).map(|(m, c)| m * c).sum::<f64>() / white
        })
        .collect();
    let (fx, fy, fz) = (lab_f(xyz[0]), lab_f(xyz[1]), lab_f(xyz[2]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn uciqe_components(img: &Tensor4<f32>) -> Result<UciqeComponents> {
    let p = Planes::from_tensor(img, "uciqe")?;
    let n = p.height * p.width;
    let mut lum = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat_sum = 0.0;
    for i in 0..n {
        let [l, a, b] = srgb_to_lab([p.rgb[0][i], p.rgb[1][i], p.rgb[2][i]]);
        let (l, a, b) = (l / 100.0, a / 100.0, b / 100.0);
        let c = (a * a + b * b).sqrt();
        let denom = (c * c + l * l).sqrt();
        sat_sum += if denom > 0.0 { c / denom } else { 0.0 };
        lum.push(l);
        chroma.push(c);
    }
    let mean_c = chroma.iter().sum::<f64>() / n as f64;
    let var_c = chroma.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>() / n as f64;
    lum.sort_by(f64::total_cmp);
    Ok(UciqeComponents {
        chroma_std: var_c.sqrt(),
        luminance_contrast: quantile(&lum, 0.99) - quantile(&lum, 0.01),
        saturation_mean: sat_sum / n as f64,
    })
}

pub fn uciqe(img: &Tensor4<f32>, weights: &MetricWeights) -> Result<f64> {
    Ok(uciqe_components(img)?.score(weights.uciqe))
}

/// Mean after dropping `⌈αK⌉` lowest and `⌊αK⌋` highest values.
fn trimmed_mean(mut v: Vec<f64>, alpha: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    let lo = (alpha * k as f64).ceil() as usize;
    let hi = (alpha * k as f64).floor() as usize;
    let kept = &v[lo.min(k)..k.saturating_sub(hi).max(lo.min(k))];
    if kept.is_empty() {
        return 0.0;
    }
    kept.iter().sum::<f64>() / kept.len() as f64
}

fn uicm(p: &Planes) -> f64 {
    let [r, g, b] = &p.rgb;
    let rg: Vec<f64> = r.iter().zip(g).map(|(r, g)| 255.0 * (r - g)).collect();
    let yb: Vec<f64> = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| 255.0 * ((r + g) / 2.0 - b))
        .collect();
    let spread = |v: &[f64], mu: f64| v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64;
    let mu_rg = trimmed_mean(rg.clone(), 0.1);
    let mu_yb = trimmed_mean(yb.clone(), 0.1);
    let l = (mu_rg * mu_rg + mu_yb * mu_yb).sqrt();
    let r = (spread(&rg, mu_rg) + spread(&yb, mu_yb)).sqrt();
    -0.0268 * l + 0.1586 * r
}

/// Symmetric boundary: `-1 → 0`, `n → n - 1`.
fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i - 1) as usize
    } else if i as usize >= n {
        2 * n - 1 - i as usize
    } else {
        i as usize
    }
}

/// Sobel gradient magnitude rescaled so its maximum is 255.
fn sobel_magnitude(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, xx: isize| x[reflect(y, h) * w + reflect(xx, w)];
    let mut mag = vec![0.0; h * w];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let row = |dy: isize| at(y + dy, xx - 1) + 2.0 * at(y + dy, xx) + at(y + dy, xx + 1);
            let col = |dx: isize| at(y - 1, xx + dx) + 2.0 * at(y, xx + dx) + at(y + 1, xx + dx);
            let gy = row(1) - row(-1);
            let gx = col(1) - col(-1);
            mag[y as usize * w + xx as usize] = gy.hypot(gx);
        }
    }
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        mag.iter_mut().for_each(|m| *m *= 255.0 / peak);
    }
    mag
}

/// Extremes of each full block, visited row-major.
fn block_extremes(planes: &[&[f64]], h: usize, w: usize) -> Vec<(f64, f64)> {
    let (k1, k2) = (w / BLOCK, h / BLOCK);
    let mut out = Vec::with_capacity(k1 * k2);
    for by in 0..k2 {
        for bx in 0..k1 {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for p in planes {
                for y in by * BLOCK..(by + 1) * BLOCK {
                    for v in &p[y * w + bx * BLOCK..y * w + (bx + 1) * BLOCK] {
                        lo = lo.min(*v);
                        hi = hi.max(*v);
                    }
                }
            }
            out.push((lo, hi));
        }
    }
    out
}

fn eme(x: &[f64], h: usize, w: usize) -> f64 {
    let blocks = block_extremes(&[x], h, w);
    let sum: f64 = blocks
        .iter()
        .filter(|(lo, hi)| *lo != 0.0 && *hi != 0.0)
        .map(|(lo, hi)| (hi / lo).ln())
        .sum();
    2.0 / blocks.len() as f64 * sum
}

fn uism(p: &Planes) -> f64 {
    let (h, w) = (p.height, p.width);
    let lambda = [0.299, 0.587, 0.114];
    p.rgb
        .iter()
        .zip(lambda)
        .map(|(c, l)| {
            let scaled: Vec<f64> = c.iter().map(|v| 255.0 * v).collect();
            let edges: Vec<f64> = sobel_magnitude(&scaled, h, w)
                .iter()
                .zip(&scaled)
                .map(|(m, v)| m * v)
                .collect();
            l * eme(&edges, h, w)
        })
        .sum()
}

fn uiconm(p: &Planes) -> f64 {
    let (h, w) = (p.height, p.width);
    let scaled: Vec<Vec<f64>> = p.rgb.iter().map(|c| c.iter().map(|v| 255.0 * v).collect()).collect();
    let planes: Vec<&[f64]> = scaled.iter().map(Vec::as_slice).collect();
    let blocks = block_extremes(&planes, h, w);
    let sum: f64 = blocks
        .iter()
        .map(|(lo, hi)| {
            let (top, bot) = (hi - lo, hi + lo);
            if top == 0.0 || bot == 0.0 {
                0.0
            } else {
                let r = top / bot;
                r * r.ln()
            }
        })
        .sum();
    -sum / blocks.len() as f64
}

pub fn uiqm_components(img: &Tensor4<f32>) -> Result<UiqmComponents> {
    let p = Planes::from_tensor(img, "uiqm")?;
    if p.height < BLOCK || p.width < BLOCK {
        return Err(Error::precondition(
            "uiqm",
            format!("image {}x{} is smaller than one {BLOCK}x{BLOCK} block", p.height, p.width),
        ));
    }
    Ok(UiqmComponents {
        uicm: uicm(&p),
        uism: uism(&p),
        uiconm: uiconm(&p),
    })
}

pub fn uiqm(img: &Tensor4<f32>, weights: &MetricWeights) -> Result<f64> {
    Ok(uiqm_components(img)?.score(weights.uiqm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn pattern(h: usize, w: usize, seed: usize) -> Tensor4<f32> {
        Tensor4::from_fn(Shape4::new(1, 3, h, w), |_, c, y, x| {
            ((x * 37 + y * 91 + c * 53 + x * y + seed * 17) % 256) as f32 / 255.0
        })
        .unwrap()
    }

    #[test]
    fn grey_image_scores_zero() {
        let g = Tensor4::filled(Shape4::new(1, 3, 20, 30), 0.4f32).unwrap();
        let w = MetricWeights::default();
        let u = uciqe_components(&g).unwrap();
        assert_eq!(u.chroma_std, 0.0);
        assert_eq!(u.luminance_contrast, 0.0);
        assert!(u.saturation_mean.abs() < 1e-12);
        assert!(uciqe(&g, &w).unwrap().abs() < 1e-12);
        let q = uiqm_components(&g).unwrap();
        assert_eq!((q.uicm, q.uism, q.uiconm), (0.0, 0.0, 0.0));
        assert_eq!(uiqm(&g, &w).unwrap(), 0.0);
    }

    #[test]
    fn weighted_sums_are_linear() {
        let w = MetricWeights::default();
        let ones = UiqmComponents {
            uicm: 1.0,
            uism: 1.0,
            uiconm: 1.0,
        };
        assert!((ones.score(w.uiqm) - 3.8988).abs() < 1e-12);
        let c = UiqmComponents {
            uicm: 2.5,
            uism: -1.0,
            uiconm: 0.3,
        };
        assert_eq!(c.score([1.0, 0.0, 0.0]), 2.5);
        let u = UciqeComponents {
            chroma_std: 0.2,
            luminance_contrast: 0.5,
            saturation_mean: 0.7,
        };
        assert_eq!(u.score(w.uciqe), 0.4680 * 0.2 + 0.2745 * 0.5 + 0.2576 * 0.7);
    }

    #[test]
    fn scores_ignore_horizontal_flips() {
        let img = pattern(20, 30, 5);
        let flip = img.flip_horizontal();
        let w = MetricWeights::default();
        assert!((uciqe(&img, &w).unwrap() - uciqe(&flip, &w).unwrap()).abs() < 1e-6);
        assert!((uiqm(&img, &w).unwrap() - uiqm(&flip, &w).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn tiny_or_non_rgb_images_are_rejected() {
        let w = MetricWeights::default();
        assert!(matches!(uiqm(&pattern(9, 30, 0), &w), Err(Error::Precondition { .. })));
        let grey = Tensor4::<f32>::zeros(Shape4::new(1, 1, 20, 20)).unwrap();
        assert!(matches!(uciqe(&grey, &w), Err(Error::Precondition { .. })));
    }

    #[test]
    fn blurring_a_checker_lowers_uciqe() {
        let checker = Tensor4::from_fn(Shape4::new(1, 3, 32, 32), |_, c, y, x| {
            let on = ((x / 4) + (y / 4)) % 2 == 0;
            match (on, c) {
                (true, 0) => 0.95,
                (true, _) => 0.2,
                (false, 2) => 0.9,
                (false, _) => 0.05,
            }
        })
        .unwrap();
        let mut blurred = checker.clone();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let mut s = 0.0;
                    for dy in -2i32..=2 {
                        for dx in -2i32..=2 {
                            let yy = (y as i32 + dy).clamp(0, 31) as usize;
                            let xx = (x as i32 + dx).clamp(0, 31) as usize;
                            s += checker.get(0, c, yy, xx);
                        }
                    }
                    blurred.set(0, c, y, x, s / 25.0);
                }
            }
        }
        let w = MetricWeights::default();
        assert!(uciqe(&checker, &w).unwrap() >= uciqe(&blurred, &w).unwrap());
    }

    #[test]
    fn lab_of_reference_colours() {
        let white = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!((white[0] - 100.0).abs() < 1e-9 && white[1].abs() < 1e-9 && white[2].abs() < 1e-9);
        let black = srgb_to_lab([0.0, 0.0, 0.0]);
        assert!(black.iter().all(|v| v.abs() < 1e-12));
        // Pure red is L ≈ 53.24, a ≈ 80.09, b ≈ 67.20.
        let red = srgb_to_lab([1.0, 0.0, 0.0]);
        assert!((red[0] - 53.24).abs() < 0.01 && (red[1] - 80.09).abs() < 0.05 && (red[2] - 67.20).abs() < 0.05);
    }

    fn smooth(h: usize, w: usize, seed: usize) -> Tensor4<f32> {
        Tensor4::from_fn(Shape4::new(1, 3, h, w), |_, c, y, x| {
            (30 + (x * 5 + y * 3 + c * 47 + (x * y) % 7 + seed * 11) % 180) as f32 / 255.0
        })
        .unwrap()
    }

    // Frozen from a separate numpy/scipy implementation of the same definitions
    // (scipy.ndimage.sobel with reflect borders, numpy linear quantiles).
    #[test]
    fn components_match_frozen_oracle() {
        let img = smooth(20, 30, 2);
        let q = uiqm_components(&img).unwrap();
        assert!((q.uicm - 17.46203679151071).abs() < 1e-9, "{}", q.uicm);
        assert!((q.uism - 6.0326506651327065).abs() < 1e-9, "{}", q.uism);
        assert!((q.uiconm - 0.21663078359294807).abs() < 1e-9, "{}", q.uiconm);
        let u = uciqe_components(&img).unwrap();
        assert!((u.chroma_std - 0.1631412539413811).abs() < 1e-9);
        assert!((u.luminance_contrast - 0.449273861045161).abs() < 1e-9);
        assert!((u.saturation_mean - 0.6628189361457445).abs() < 1e-9);

        let busy = pattern(20, 30, 5);
        let q = uiqm_components(&busy).unwrap();
        assert!((q.uicm - 22.956723975963012).abs() < 1e-9);
        assert!((q.uism - 9.012163741219263).abs() < 1e-9);
        assert_eq!(q.uiconm, 0.0);
        let u = uciqe_components(&busy).unwrap();
        assert!((u.chroma_std - 0.2494145106231705).abs() < 1e-9);
        assert!((u.luminance_contrast - 0.6789446995538002).abs() < 1e-9);
        assert!((u.saturation_mean - 0.6555025532924635).abs() < 1e-9);
    }
}
