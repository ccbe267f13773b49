//! Photometric and mask losses.

use serde::{Deserialize, Serialize};

use crate::masks::{mask_loss, sh_mask_loss, MaskState};
use crate::model::MAX_SH_DEGREE;
use crate::render::metrics::ssim_with_grad;
use crate::render::{Image, RenderError};

/// Weights of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub lambda_mask: f64,
    pub lambda_sh_mask: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub mask: f64,
    pub sh_mask: f64,
}

/// `(1−λ)·L1 + λ·(1−SSIM)` and its gradient with respect to `rendered`.
pub fn image_loss(rendered: &Image, target: &Image, lambda: f64) -> Result<(f64, f64, f64, Image), RenderError> {
    let (ssim, dssim) = ssim_with_grad(rendered, target)?;
    let n = rendered.data.len().max(1) as f64;
    let mut l1 = 0.0;
    let mut grad = Image::new(rendered.width, rendered.height);
    for (i, (a, b)) in rendered.data.iter().zip(&target.data).enumerate() {
        let d = a - b;
        l1 += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad.data[i] = (1.0 - lambda) * sign / n - lambda * dssim.data[i];
    }
    l1 /= n;
    Ok(((1.0 - lambda) * l1 + lambda * (1.0 - ssim), l1, ssim, grad))
}

/// Gradients of [`total_loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub image: Image,
    pub mu: Vec<f64>,
    pub eta: Vec<[f64; MAX_SH_DEGREE]>,
}

/// `L = (1−λ)L1 + λ(1−SSIM) + λ_mask·L_mask + λ_SH·L_SH`.
pub fn total_loss(
    rendered: &Image,
    target: &Image,
    masks: &MaskState,
    w: &LossWeights,
) -> Result<(LossTerms, LossGrad), RenderError> {
    let (img, l1, ssim, image) = image_loss(rendered, target, w.lambda)?;
    let (lm, mut mu) = mask_loss(masks);
    let (ls, mut eta) = sh_mask_loss(masks);
    mu.iter_mut().for_each(|g| *g *= w.lambda_mask);
    eta.iter_mut().for_each(|e| e.iter_mut().for_each(|g| *g *= w.lambda_sh_mask));
    let terms = LossTerms {
        total: img + w.lambda_mask * lm + w.lambda_sh_mask * ls,
        l1,
        ssim,
        mask: lm,
        sh_mask: ls,
    };
    Ok((terms, LossGrad { image, mu, eta }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng) -> Image {
        let mut img = Image::new(12, 9);
        img.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
        img
    }

    #[test]
    fn identical_images_leave_mask_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng);
        let mut m = MaskState::new(5, 0.01, 0.01);
        m.mu.iter_mut().for_each(|v| *v = 0.0);
        m.eta.iter_mut().for_each(|e| *e = [0.0; 3]);
        let w = LossWeights { lambda: 0.2, lambda_mask: 0.004, lambda_sh_mask: 1e-4 };
        let (t, _) = total_loss(&a, &a, &m, &w).unwrap();
        assert!((t.total - (0.004 * 0.5 + 1e-4 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn lambda_zero_is_plain_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng);
        let b = random_image(&mut rng);
        let m = MaskState::new(3, 0.01, 0.01);
        let w = LossWeights { lambda: 0.0, lambda_mask: 0.0, lambda_sh_mask: 0.0 };
        let (t, _) = total_loss(&a, &b, &m, &w).unwrap();
        let l1: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
        assert!((t.total - l1).abs() < 1e-15);
    }

    #[test]
    fn image_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng);
        let b = random_image(&mut rng);
        let (_, _, _, g) = image_loss(&a, &b, 0.2).unwrap();
        for _ in 0..30 {
            let i = rng.random_range(0..a.data.len());
            let h = 1e-7;
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (image_loss(&p, &b, 0.2).unwrap().0 - image_loss(&m, &b, 0.2).unwrap().0) / (2.0 * h);
            assert!((fd - g.data[i]).abs() < 1e-6 * fd.abs().max(1e-3));
        }
    }
}
