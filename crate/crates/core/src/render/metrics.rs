//! Image quality metrics.

use super::{Image, RenderError};

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;

fn check_dims(a: &Image, b: &Image) -> Result<(), RenderError> {
    if a.width != b.width || a.height != b.height {
        return Err(RenderError::Dimensions {
            a: (a.width, a.height),
            b: (b.width, b.height),
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, RenderError> {
    check_dims(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10·log10(1/MSE)` for images in `[0,1]`; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, RenderError> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

fn gaussian_window() -> [f64; WINDOW] {
    let c = (WINDOW / 2) as f64;
    let mut w: [f64; WINDOW] = std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "same" convolution of one plane with zero padding.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM over pixels and channels, 11×11 Gaussian window (σ = 1.5),
/// zero padding at the borders.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, RenderError> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM together with its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image), RenderError> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>), RenderError> {
    check_dims(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    let k = gaussian_window();
    let n = (w * h * 3).max(1) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(a.width, a.height));
    for c in 0..3 {
        let pa = a.plane(c);
        let pb = b.plane(c);
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = blur(pa, w, h, &k);
        let mu_b = blur(pb, w, h, &k);
        let e_aa = blur(&aa, w, h, &k);
        let e_bb = blur(&bb, w, h, &k);
        let e_ab = blur(&ab, w, h, &k);
        // Per-pixel partials of the SSIM map w.r.t. μa, σa² and σab.
        let mut d_mu = vec![0.0; w * h];
        let mut d_saa = vec![0.0; w * h];
        let mut d_sab = vec![0.0; w * h];
        for i in 0..w * h {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let saa = e_aa[i] - ma * ma;
            let sbb = e_bb[i] - mb * mb;
            let sab = e_ab[i] - ma * mb;
            let l_num = 2.0 * ma * mb + C1;
            let l_den = ma * ma + mb * mb + C1;
            let c_num = 2.0 * sab + C2;
            let c_den = saa + sbb + C2;
            let s = (l_num * c_num) / (l_den * c_den);
            total += s;
            if want_grad {
                let ds_dma = (2.0 * mb * c_num) / (l_den * c_den) - s * 2.0 * ma / l_den;
                let ds_dsaa = -s / c_den;
                let ds_dsab = 2.0 * l_num / (l_den * c_den);
                // σa² = E[a²] − μa², σab = E[ab] − μa μb.
                d_mu[i] = (ds_dma - 2.0 * ma * ds_dsaa - mb * ds_dsab) / n;
                d_saa[i] = ds_dsaa / n;
                d_sab[i] = ds_dsab / n;
            }
        }
        if let Some(g) = grad.as_mut() {
            // The window is symmetric, so the adjoint of the blur is itself.
            let g_mu = blur(&d_mu, w, h, &k);
            let g_saa = blur(&d_saa, w, h, &k);
            let g_sab = blur(&d_sab, w, h, &k);
            let out = g.plane_mut(c);
            for i in 0..w * h {
                out[i] = g_mu[i] + 2.0 * pa[i] * g_saa[i] + pb[i] * g_sab[i];
            }
        }
    }
    Ok((total / n, grad))
}
