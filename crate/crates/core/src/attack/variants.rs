//! Gradient transforms of the iterative FGSM family.

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{ImageTensor, Real};

/// `sign(v)` with `sign(0) = 0`.
pub fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `α · sign(∇ₓ J(x_adv, y))`.
pub fn grad_sign_step<T: Real, M: Model<T> + ?Sized>(model: &M, x_adv: &ImageTensor<T>, labels: &[usize], alpha: T) -> Result<ImageTensor<T>> {
    if !(alpha > T::zero()) {
        return Err(Error::config("step size must be positive"));
    }
    let (_, grad) = model.per_sample_loss_grad(x_adv, labels)?;
    Ok(grad.map(|g| alpha * sign(g)))
}

/// `μ·g_prev + grad/‖grad‖₁`, normalized per sample. A sample with a zero
/// gradient contributes only `μ·g_prev`.
pub fn momentum_accumulate<T: Real>(g_prev: &ImageTensor<T>, grad: &ImageTensor<T>, mu: T) -> Result<ImageTensor<T>> {
    g_prev.check_same_shape(grad)?;
    let mut out = g_prev.map(|v| mu * v);
    for b in 0..grad.batch() {
        let gs = grad.sample(b);
        let l1: T = gs.iter().map(|v| v.abs()).sum();
        if l1 > T::zero() {
            for (o, &g) in out.sample_mut(b).iter_mut().zip(gs) {
                *o += g / l1;
            }
        }
    }
    Ok(out)
}

/// Random resize-and-pad drawn for one sample: the image is shrunk with
/// nearest-neighbor sampling to `size × size` and placed at `(top, left)` on
/// a zero canvas of the original size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResizePad {
    pub size: usize,
    pub top: usize,
    pub left: usize,
}

/// Per-sample draws of input diversity; `None` leaves a sample unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diversity {
    pub draws: Vec<Option<ResizePad>>,
}

impl Diversity {
    pub fn draw<R: Rng>(rng: &mut R, batch: usize, height: usize, width: usize, prob: f64, low_ratio: f64) -> Self {
        let side = height.min(width);
        let draws = (0..batch)
            .map(|_| {
                if !(rng.gen::<f64>() < prob) {
                    return None;
                }
                let lo = ((low_ratio * side as f64).ceil() as usize).clamp(1, side.saturating_sub(1).max(1));
                let hi = side.saturating_sub(1).max(lo);
                let size = rng.gen_range(lo..=hi);
                let top = rng.gen_range(0..=height - size);
                let left = rng.gen_range(0..=width - size);
                Some(ResizePad { size, top, left })
            })
            .collect();
        Self { draws }
    }

    pub fn apply<T: Real>(&self, x: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        self.check(x)?;
        let (h, w) = (x.height(), x.width());
        let mut out = x.clone();
        for (b, d) in self.draws.iter().enumerate() {
            let Some(d) = d else { continue };
            for c in 0..x.channels() {
                let src = x.plane(b, c);
                let dst = out.plane_mut(b, c);
                dst.iter_mut().for_each(|v| *v = T::zero());
                for i in 0..d.size {
                    let si = i * h / d.size;
                    for j in 0..d.size {
                        let sj = j * w / d.size;
                        dst[(d.top + i) * w + d.left + j] = src[si * w + sj];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Transpose of [`Diversity::apply`], used to pull gradients back.
    pub fn adjoint<T: Real>(&self, g: &ImageTensor<T>) -> Result<ImageTensor<T>> {
        self.check(g)?;
        let (h, w) = (g.height(), g.width());
        let mut out = g.clone();
        for (b, d) in self.draws.iter().enumerate() {
            let Some(d) = d else { continue };
            for c in 0..g.channels() {
                let src = g.plane(b, c);
                let dst = out.plane_mut(b, c);
                dst.iter_mut().for_each(|v| *v = T::zero());
                for i in 0..d.size {
                    let si = i * h / d.size;
                    for j in 0..d.size {
                        let sj = j * w / d.size;
                        dst[si * w + sj] += src[(d.top + i) * w + d.left + j];
                    }
                }
            }
        }
        Ok(out)
    }

    fn check<T: Real>(&self, x: &ImageTensor<T>) -> Result<()> {
        if self.draws.len() != x.batch() {
            return Err(Error::shape("diversity draws do not match the batch"));
        }
        Ok(())
    }
}

/// With probability `prob` per sample, resize to a random scale in
/// `[low_ratio, 1)` and zero-pad back at a random offset.
pub fn input_diversity<T: Real, R: Rng>(x: &ImageTensor<T>, prob: f64, low_ratio: f64, rng: &mut R) -> Result<(ImageTensor<T>, Diversity)> {
    let d = Diversity::draw(rng, x.batch(), x.height(), x.width(), prob, low_ratio);
    Ok((d.apply(x)?, d))
}

/// Normalized `k × k` Gaussian with `σ = k / 3`, row-major.
pub fn gaussian_kernel(kernel_size: usize) -> Vec<f64> {
    let one_d = gaussian_1d(kernel_size);
    one_d
        .iter()
        .flat_map(|&a| one_d.iter().map(move |&b| a * b))
        .collect()
}

fn gaussian_1d(k: usize) -> Vec<f64> {
    let sigma = k as f64 / 3.0;
    let r = (k / 2) as f64;
    let raw: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Depthwise Gaussian smoothing of the gradient with reflect padding.
pub fn translation_invariant_smooth<T: Real>(grad: &ImageTensor<T>, kernel_size: usize) -> Result<ImageTensor<T>> {
    if kernel_size % 2 == 0 {
        return Err(Error::config(format!("TI kernel size {kernel_size} must be odd")));
    }
    if kernel_size == 1 {
        return Ok(grad.clone());
    }
    let k: Vec<T> = gaussian_1d(kernel_size).into_iter().map(T::lit).collect();
    let r = (kernel_size / 2) as isize;
    let (h, w) = (grad.height(), grad.width());
    let mut out = grad.clone();
    for b in 0..grad.batch() {
        for c in 0..grad.channels() {
            let src = grad.plane(b, c);
            let mut tmp = vec![T::zero(); h * w];
            for y in 0..h {
                for x in 0..w {
                    tmp[y * w + x] = (-r..=r)
                        .map(|d| k[(d + r) as usize] * src[y * w + reflect(x as isize + d, w)])
                        .sum();
                }
            }
            let dst = out.plane_mut(b, c);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = (-r..=r)
                        .map(|d| k[(d + r) as usize] * tmp[reflect(y as isize + d, h) * w + x])
                        .sum();
                }
            }
        }
    }
    Ok(out)
}

/// Average input gradient over the scaled copies `x_nes / 2^i`, `i < m`, at
/// the Nesterov look-ahead point `x_nes = x_adv + α·μ·g`. Returns the
/// gradient with respect to `x_nes` and the mean loss of the unscaled copy.
pub fn scale_invariant_nesterov_grad<T: Real, M: Model<T> + ?Sized>(
    model: &M,
    x_adv: &ImageTensor<T>,
    labels: &[usize],
    g: &ImageTensor<T>,
    alpha: T,
    mu: T,
    copies: usize,
) -> Result<(ImageTensor<T>, Vec<T>)> {
    if copies == 0 {
        return Err(Error::config("SI-NI needs at least one scaled copy"));
    }
    let x_nes = x_adv.zip_map(g, |x, gv| x + alpha * mu * gv)?;
    let mut acc = ImageTensor::zeros(x_adv.shape(), x_adv.color_space());
    let mut first_losses = Vec::new();
    for i in 0..copies {
        let factor = T::lit(0.5f64.powi(i as i32));
        let scaled = x_nes.map(|v| v * factor);
        let (losses, grad) = model.per_sample_loss_grad(&scaled, labels)?;
        if i == 0 {
            first_losses = losses;
        }
        // chain rule through the scaling
        acc = acc.zip_map(&grad, |a, gv| a + gv * factor)?;
    }
    let n = T::lit(copies as f64);
    Ok((acc.map(|v| v / n), first_losses))
}

/// Current gradient tuned by the previous variance term, and the new
/// variance `mean_k ∇J(x_adv + r_k) − ∇J(x_adv)` with `r_k` uniform in
/// `[−bound, bound]^d`. Also returns per-sample losses at `x_adv`.
#[allow(clippy::too_many_arguments)]
pub fn variance_tuned_grad<T: Real, M: Model<T> + ?Sized, R: Rng>(
    model: &M,
    x_adv: &ImageTensor<T>,
    labels: &[usize],
    v_prev: &ImageTensor<T>,
    neighbors: usize,
    bound: f64,
    rng: &mut R,
) -> Result<(ImageTensor<T>, ImageTensor<T>, Vec<T>)> {
    let (losses, current) = model.per_sample_loss_grad(x_adv, labels)?;
    let tuned = current.zip_map(v_prev, |a, b| a + b)?;
    if neighbors == 0 {
        return Ok((tuned, ImageTensor::zeros(x_adv.shape(), x_adv.color_space()), losses));
    }
    let mut acc = ImageTensor::zeros(x_adv.shape(), x_adv.color_space());
    for _ in 0..neighbors {
        let mut noisy = x_adv.clone();
        for v in noisy.data_mut() {
            *v += T::lit(rng.gen_range(-bound..=bound));
        }
        let (_, g) = model.per_sample_loss_grad(&noisy, labels)?;
        acc = acc.zip_map(&g, |a, b| a + b)?;
    }
    let n = T::lit(neighbors as f64);
    let v_new = acc.zip_map(&current, |a, c| a / n - c)?;
    Ok((tuned, v_new, losses))
}
