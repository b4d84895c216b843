use radfield::metrics::{psnr, ssim, Image};

fn gradient_image(phase: f64, tilt: f64) -> Image {
    let (w, h) = (16usize, 16usize);
    Image::from_clamped(
        w,
        h,
        (0..w * h * 3).map(|i| {
            let p = i / 3;
            let (x, y, c) = ((p % w) as f64, (p / w) as f64, (i % 3) as f64);
            (0.1 + 0.05 * x + tilt * y + 0.02 * c + phase * ((x + y) * 0.7).sin()).clamp(0.0, 1.0)
        }),
    )
    .unwrap()
}

/// Windowed SSIM evaluated term by term with a full 2-D Gaussian window.
fn direct_ssim(a: &Image, b: &Image) -> f64 {
    let (w, h) = (a.width(), a.height());
    let size = 11usize;
    let sigma = 1.5f64;
    let mut kernel = vec![0.0; size * size];
    for (i, k) in kernel.iter_mut().enumerate() {
        let (dx, dy) = ((i % size) as f64 - 5.0, (i / size) as f64 - 5.0);
        *k = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
    }
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=h - size {
            for x0 in 0..=w - size {
                let (mut mx, mut my) = (0.0, 0.0);
                for j in 0..size {
                    for i in 0..size {
                        let k = kernel[j * size + i];
                        mx += k * a.pixel(x0 + i, y0 + j)[ch] as f64;
                        my += k * b.pixel(x0 + i, y0 + j)[ch] as f64;
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for j in 0..size {
                    for i in 0..size {
                        let k = kernel[j * size + i];
                        let dx = a.pixel(x0 + i, y0 + j)[ch] as f64 - mx;
                        let dy = b.pixel(x0 + i, y0 + j)[ch] as f64 - my;
                        vx += k * dx * dx;
                        vy += k * dy * dy;
                        cxy += k * dx * dy;
                    }
                }
                sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    total / 3.0
}

#[test]
fn ssim_matches_direct_formula() {
    let a = gradient_image(0.0, 0.03);
    let b = gradient_image(0.08, 0.025);
    let got = ssim(&a, &b).unwrap();
    let want = direct_ssim(&a, &b);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert!(got < 0.999);
    let same = ssim(&a, &a).unwrap();
    assert!((same - 1.0).abs() < 1e-12);
}

#[test]
fn psnr_of_uniform_offset() {
    let a = Image::filled(8, 8, [0.25, 0.5, 0.75]).unwrap();
    let b = Image::filled(8, 8, [0.3, 0.55, 0.8]).unwrap();
    // MSE = 0.0025 up to f32 storage of the pixel values
    assert!((psnr(&a, &b).unwrap() - 26.0206).abs() < 1e-3);
}
