//! Image container and fidelity metrics (PSNR, SSIM).

use crate::error::{Error, Result};

/// Value reported by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// RGB image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape("image data", width * height * 3, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image { width, height, data })
    }

    /// Builds an image from arbitrary finite values, clamping into `[0, 1]`.
    pub fn from_clamped(width: usize, height: usize, data: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut out = Vec::with_capacity(width * height * 3);
        for v in data {
            if !v.is_finite() {
                return Err(Error::non_finite("image construction"));
            }
            out.push(v.clamp(0.0, 1.0) as f32);
        }
        Image::new(width, height, out)
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Result<Self> {
        Image::new(width, height, color.iter().copied().cycle().take(width * height * 3).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn same_size(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::InvalidInput(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_size(b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len().max(1) as f64)
}

/// PSNR for mean squared error `mse` with unit peak, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - c;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Valid-region separable Gaussian filter of a `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid 11×11 windows, computed per channel and
/// averaged over the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_size(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let (w, h) = (a.width, a.height);
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.data.iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data.iter().skip(ch).step_by(3).map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &taps);
        let my = filter_valid(&y, w, h, &taps);
        let exx = filter_valid(&xx, w, h, &taps);
        let eyy = filter_valid(&yy, w, h, &taps);
        let exy = filter_valid(&xy, w, h, &taps);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let sx = exx[i] - ux * ux;
            let sy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sx + sy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(w: usize, h: usize, phase: f64) -> Image {
        Image::from_clamped(
            w,
            h,
            (0..w * h * 3).map(|i| {
                let p = i / 3;
                let (x, y, c) = ((p % w) as f64, (p / w) as f64, (i % 3) as f64);
                0.5 + 0.4 * ((x * 0.3 + y * 0.2 + c + phase).sin())
            }),
        )
        .unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, [0.5; 3]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(4, 4, [0.6; 3]).unwrap();
        // f32 storage: 0.6 − 0.5 is not exactly 0.1
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!((psnr_from_mse(0.0025) - 26.020599913279625).abs() < 1e-9);
    }

    #[test]
    fn size_mismatch_rejected() {
        let a = Image::filled(12, 12, [0.0; 3]).unwrap();
        let b = Image::filled(12, 13, [0.0; 3]).unwrap();
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
        let small = Image::filled(10, 12, [0.0; 3]).unwrap();
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 0.5]).is_err());
        assert!(Image::from_clamped(1, 1, [f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn ssim_identity_and_degenerate_negative() {
        let a = gradient(16, 16, 0.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let half = Image::filled(16, 16, [0.5; 3]).unwrap();
        let neg = Image::from_clamped(16, 16, half.data().iter().map(|&v| 1.0 - v as f64)).unwrap();
        assert_eq!(ssim(&half, &neg).unwrap(), 1.0);
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let a = gradient(20, 17, 0.0);
        let b = gradient(20, 17, 1.3);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..1.0).contains(&ab));
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = gradient(16, 16, 0.0);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let noisy = Image::from_clamped(
                16,
                16,
                // push toward mid-gray so clamping never kicks in
                a.data()
                    .iter()
                    .map(|&v| v as f64 + if v < 0.5 { amp } else { -amp }),
            )
            .unwrap();
            let p = psnr(&a, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    proptest! {
        #[test]
        fn psnr_symmetric(vals in proptest::collection::vec(0.0f32..=1.0, 48), other in proptest::collection::vec(0.0f32..=1.0, 48)) {
            let a = Image::new(4, 4, vals).unwrap();
            let b = Image::new(4, 4, other).unwrap();
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }
}
