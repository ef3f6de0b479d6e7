//! Scalar objectives and image metrics: L1, windowed SSIM / D-SSIM with
//! analytic gradients, the fidelity and mask-regularized losses, opacity
//! regularization, identity cross-entropy, and PSNR.
//!
//! SSIM uses the 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03,
//! zero-padded same-size convolution, computed per channel and averaged.

use crate::error::CoreError;
use crate::gaussians::{sigmoid, sigmoid_prime, GaussianSet};
use crate::io::Image;
use crate::par;
use crate::Result;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// λ blending L1 against D-SSIM in the fidelity loss; in [0, 1].
    pub lambda_dssim: f64,
    /// Mask-regularizer weight of the inheritance loss.
    pub lambda_inher: f64,
    /// Opacity regularizer weight, used only during initialization.
    pub lambda_opacity_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_dssim: 0.2, lambda_inher: 5e-4, lambda_opacity_reg: 0.01 }
    }
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(CoreError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.h, a.w, a.c, b.h, b.w, b.c
        )));
    }
    Ok(())
}

fn l1_sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error and its gradient w.r.t. `a`.
pub fn l1(a: &Image, b: &Image) -> Result<(f64, Image)> {
    check_shapes(a, b)?;
    let n = a.data.len() as f64;
    let mut grad = Image::zeros(a.h, a.w, a.c);
    let mut sum = 0.0;
    for (i, (&x, &y)) in a.data.iter().zip(&b.data).enumerate() {
        sum += (x - y).abs();
        grad.data[i] = l1_sign(x - y) / n;
    }
    Ok((sum / n, grad))
}

/// Per-pixel mean absolute error over channels; the 2D error map consumed
/// by error-guided densification. Values land in [0, 1] for [0, 1] inputs.
pub fn error_map(rendered: &Image, target: &Image) -> Result<Image> {
    check_shapes(rendered, target)?;
    let mut out = Image::zeros(rendered.h, rendered.w, 1);
    for y in 0..rendered.h {
        for x in 0..rendered.w {
            let mut s = 0.0;
            for ch in 0..rendered.c {
                s += (rendered.at(y, x, ch) - target.at(y, x, ch)).abs();
            }
            *out.at_mut(y, x, 0) = s / rendered.c as f64;
        }
    }
    Ok(out)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Zero-padded same-size separable convolution of a single-channel plane.
/// The Gaussian kernel is symmetric, so this is self-adjoint.
fn conv_same(plane: &[f64], h: usize, w: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = SSIM_WINDOW as i64 / 2;
    let mut tmp = vec![0.0; h * w];
    // rows
    par::for_each_band(&mut tmp, w, |y, row| {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = x + k as i64 - half;
                if xx >= 0 && xx < w as i64 {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            row[x as usize] = acc;
        }
    });
    // columns
    let mut out = vec![0.0; h * w];
    par::for_each_band(&mut out, w, |y, row| {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = y as i64 + k as i64 - half;
                if yy >= 0 && yy < h as i64 {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            row[x] = acc;
        }
    });
    out
}

fn channel_plane(img: &Image, ch: usize) -> Vec<f64> {
    (0..img.h * img.w).map(|i| img.data[i * img.c + ch]).collect()
}

/// Windowed SSIM and its gradient w.r.t. `a`. SSIM(a, a) = 1 exactly.
pub fn ssim(a: &Image, b: &Image) -> Result<(f64, Image)> {
    check_shapes(a, b)?;
    let kernel = gaussian_window();
    let (h, w, c) = (a.h, a.w, a.c);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let upstream = 1.0 / (h * w * c) as f64;

    let mut total = 0.0;
    let mut grad = Image::zeros(h, w, c);
    for ch in 0..c {
        let x = channel_plane(a, ch);
        let y = channel_plane(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(u, v)| u * v).collect();
        let mu1 = conv_same(&x, h, w, &kernel);
        let mu2 = conv_same(&y, h, w, &kernel);
        let e11 = conv_same(&xx, h, w, &kernel);
        let e22 = conv_same(&yy, h, w, &kernel);
        let e12 = conv_same(&xy, h, w, &kernel);

        let mut f_mu1 = vec![0.0; h * w];
        let mut f_e11 = vec![0.0; h * w];
        let mut f_e12 = vec![0.0; h * w];
        for i in 0..h * w {
            let s11 = e11[i] - mu1[i] * mu1[i];
            let s22 = e22[i] - mu2[i] * mu2[i];
            let s12 = e12[i] - mu1[i] * mu2[i];
            let a1 = 2.0 * mu1[i] * mu2[i] + c1;
            let a2 = 2.0 * s12 + c2;
            let b1 = mu1[i] * mu1[i] + mu2[i] * mu2[i] + c1;
            let b2 = s11 + s22 + c2;
            let denom = b1 * b2;
            let val = a1 * a2 / denom;
            total += val;

            let df_da1 = a2 / denom;
            let df_da2 = a1 / denom;
            let df_db1 = -val / b1;
            let df_db2 = -val / b2;
            // A2 and B2 carry −2μ2 and −2μ1 dependence on μ1 through s12, s11
            f_mu1[i] = upstream
                * (df_da1 * 2.0 * mu2[i] + df_db1 * 2.0 * mu1[i] - df_da2 * 2.0 * mu2[i] - df_db2 * 2.0 * mu1[i]);
            f_e11[i] = upstream * df_db2;
            f_e12[i] = upstream * df_da2 * 2.0;
        }
        let g_mu1 = conv_same(&f_mu1, h, w, &kernel);
        let g_e11 = conv_same(&f_e11, h, w, &kernel);
        let g_e12 = conv_same(&f_e12, h, w, &kernel);
        for i in 0..h * w {
            grad.data[i * c + ch] = g_mu1[i] + 2.0 * x[i] * g_e11[i] + y[i] * g_e12[i];
        }
    }
    Ok((total * upstream, grad))
}

/// D-SSIM = (1 − SSIM)/2 and its gradient w.r.t. `a`.
pub fn dssim(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (s, mut g) = ssim(a, b)?;
    for v in g.data.iter_mut() {
        *v *= -0.5;
    }
    Ok(((1.0 - s) * 0.5, g))
}

/// Fidelity loss (1−λ)·L1 + λ·D-SSIM with its per-pixel gradient.
pub fn fidelity_loss(rendered: &Image, target: &Image, w: &LossWeights) -> Result<(f64, Image)> {
    let lambda = w.lambda_dssim;
    let (l1_val, l1_grad) = l1(rendered, target)?;
    if lambda == 0.0 {
        return Ok((l1_val, l1_grad));
    }
    let (ds_val, ds_grad) = dssim(rendered, target)?;
    let mut grad = Image::zeros(rendered.h, rendered.w, rendered.c);
    for i in 0..grad.data.len() {
        grad.data[i] = (1.0 - lambda) * l1_grad.data[i] + lambda * ds_grad.data[i];
    }
    Ok(((1.0 - lambda) * l1_val + lambda * ds_val, grad))
}

/// Inheritance loss: fidelity plus λ_inher · Σ sigmoid(m).
///
/// Returns (total, image gradient, mask-term gradient per m). The fidelity
/// route into m (through the straight-through estimator and the renderer)
/// is composed by the stage driver; here only the regularizer contributes.
pub fn inheritance_loss(
    rendered: &Image,
    target: &Image,
    m: &[f64],
    w: &LossWeights,
) -> Result<(f64, Image, Vec<f64>)> {
    let (fid, grad_img) = fidelity_loss(rendered, target, w)?;
    let mask_term: f64 = m.iter().map(|&mi| sigmoid(mi)).sum();
    let grad_m = m.iter().map(|&mi| w.lambda_inher * sigmoid_prime(mi)).collect();
    Ok((fid + w.lambda_inher * mask_term, grad_img, grad_m))
}

/// Opacity regularizer −(1/N)·Σ o·log(o) over all primitives, with the
/// gradient w.r.t. each logit opacity (base first, then var).
pub fn opacity_regularizer(set: &GaussianSet) -> (f64, Vec<f64>) {
    let n = set.total().max(1) as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(set.total());
    for g in set.iter_all() {
        let o = g.opacity();
        value -= o * o.ln();
        // d(−o ln o)/d logit = −(ln o + 1)·o·(1−o)
        grads.push(-(o.ln() + 1.0) * o * (1.0 - o) / n);
    }
    (value / n, grads)
}

/// Softmax cross-entropy between a rendered identity image and a label map,
/// averaged over pixels. Labels must be < n_classes ≤ K_id. Returns the
/// gradient w.r.t. the identity image.
pub fn id_cross_entropy(id_img: &Image, labels: &[u8], n_classes: usize) -> Result<(f64, Image)> {
    if labels.len() != id_img.h * id_img.w {
        return Err(CoreError::ShapeMismatch("label map size".into()));
    }
    if n_classes > id_img.c {
        return Err(CoreError::ShapeMismatch(format!("{n_classes} classes > {} identity channels", id_img.c)));
    }
    let npix = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Image::zeros(id_img.h, id_img.w, id_img.c);
    for (i, &lab) in labels.iter().enumerate() {
        let lab = lab as usize;
        if lab >= n_classes {
            return Err(CoreError::Data(format!("label {lab} out of range {n_classes}")));
        }
        let logits = &id_img.data[i * id_img.c..i * id_img.c + n_classes];
        let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - maxv).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + maxv - logits[lab];
        for k in 0..n_classes {
            let p = exps[k] / z;
            grad.data[i * id_img.c + k] = (p - if k == lab { 1.0 } else { 0.0 }) / npix;
        }
    }
    Ok((loss / npix, grad))
}

/// PSNR in dB against peak 1.0; +∞ sentinel for identical images.
pub fn psnr(rendered: &Image, target: &Image) -> Result<f64> {
    check_shapes(rendered, target)?;
    let mse: f64 =
        rendered.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / rendered.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}
