//! Image quality metrics (PSNR, SSIM) and the finite-difference gradient
//! checker used across the crate.
//!
//! SSIM follows the canonical reference implementation: 11x11 Gaussian
//! window with sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.0, valid
//! (unpadded) windows, channel-mean over RGB.

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Reporting cap used when the MSE is exactly zero.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub per_image: Vec<(String, f64, f64)>,
}

/// Peak signal-to-noise ratio in dB: 10 log10(peak^2 / MSE). Identical
/// images return the documented 99.0 dB sentinel.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    let mse = crate::ops::mse(a, b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Quantize to 8-bit levels after clamping to [0, 1]; used when evaluating
/// saved images so scores match what lands on disk.
pub fn quantize_8bit(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable Gaussian filter, valid region only: (H, W) -> (H-10, W-10).
fn gaussian_filter_valid(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let win = gaussian_window();
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    // horizontal pass
    let mut tmp = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                acc += wk * plane[y * w + x + k];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                acc += wk * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mu_a = gaussian_filter_valid(a, h, w);
    let mu_b = gaussian_filter_valid(b, h, w);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let s_aa = gaussian_filter_valid(&aa, h, w);
    let s_bb = gaussian_filter_valid(&bb, h, w);
    let s_ab = gaussian_filter_valid(&ab, h, w);
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let ma = mu_a[i];
        let mb = mu_b[i];
        let va = s_aa[i] - ma * ma;
        let vb = s_bb[i] - mb * mb;
        let cov = s_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        acc += num / den;
    }
    acc / mu_a.len() as f64
}

/// Mean local SSIM; RGB inputs are scored per channel and averaged.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    let [n, c, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim requires at least {SSIM_WINDOW}x{SSIM_WINDOW} spatial dims, got {h}x{w}"
        )));
    }
    let mut acc = 0.0;
    for img in 0..n {
        for ch in 0..c {
            let offset = (img * c + ch) * h * w;
            let pa: Vec<f64> = a.data()[offset..offset + h * w]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let pb: Vec<f64> = b.data()[offset..offset + h * w]
                .iter()
                .map(|&v| v as f64)
                .collect();
            acc += ssim_plane(&pa, &pb, h, w);
        }
    }
    Ok(acc / (n * c) as f64)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||) over
    /// the full gradient vector. Robust to isolated activation-kink noise
    /// that inflates single-component relative errors in float32.
    pub l2_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central-difference gradient check of a scalar-valued parameterized
/// function. `loss` must zero the gradient buffers, run forward + backward,
/// leave d(loss)/d(param) in each entry's grad, and return the loss value.
///
/// Relative error per scalar is |analytic - numeric| divided by
/// max(|analytic|, |numeric|, 1e-8); the worst case and its parameter are
/// reported.
pub fn grad_check<F>(
    store: &mut ParameterStore,
    eps: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParameterStore) -> Result<f64>,
{
    grad_check_with_floor(store, eps, 1e-8, loss)
}

/// [`grad_check`] with an explicit denominator floor. Components whose
/// analytic and numeric gradients both sit below `floor` compare against
/// `floor` instead, so finite-difference noise on negligible components
/// does not dominate the report. Pick the floor relative to the gradient
/// scale of the function under test.
pub fn grad_check_with_floor<F>(
    store: &mut ParameterStore,
    eps: f64,
    floor: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParameterStore) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check requires eps > 0".to_string()));
    }
    if floor <= 0.0 {
        return Err(Error::invalid("grad_check requires floor > 0".to_string()));
    }
    let base = loss(store)?;
    if !base.is_finite() {
        return Err(Error::numeric(format!("non-finite base loss {base}")));
    }
    let analytic: Vec<Vec<f32>> = store.iter().map(|e| e.grad.data().to_vec()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        l2_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut diff_sq = 0f64;
    let mut analytic_sq = 0f64;
    let mut numeric_sq = 0f64;
    let n_entries = store.len();
    for ei in 0..n_entries {
        let name = store.entry(ei).name.clone();
        let n_scalars = store.entry(ei).value.len();
        for si in 0..n_scalars {
            let orig = store.entry(ei).value.data()[si];
            store.entry_mut(ei).value.data_mut()[si] = orig + eps as f32;
            let fp = loss(store)?;
            store.entry_mut(ei).value.data_mut()[si] = orig - eps as f32;
            let fm = loss(store)?;
            store.entry_mut(ei).value.data_mut()[si] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss while perturbing {name}[{si}]"
                )));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ei][si] as f64;
            diff_sq += (a - numeric) * (a - numeric);
            analytic_sq += a * a;
            numeric_sq += numeric * numeric;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = si;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.l2_rel_err =
        diff_sq.sqrt() / analytic_sq.sqrt().max(numeric_sq.sqrt()).max(floor);
    // restore analytic grads for the caller
    let _ = loss(store)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::rng::Rng;

    fn random_image(rng: &mut Rng, shape: [usize; 4]) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let a = Tensor::full([1, 3, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_zero_vs_one_is_zero_db() {
        let a = Tensor::zeros([1, 1, 4, 4]);
        let b = Tensor::full([1, 1, 4, 4], 1.0);
        assert!((psnr(&a, &b, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let mut rng = Rng::seed(2);
        let a = random_image(&mut rng, [1, 3, 6, 6]);
        let b = random_image(&mut rng, [1, 3, 6, 6]);
        let mut acc = 0f64;
        for i in 0..a.len() {
            let d = (a.data()[i] - b.data()[i]) as f64;
            acc += d * d;
        }
        let expect = 10.0 * (1.0 / (acc / a.len() as f64)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn psnr_is_symmetric_and_decreases_with_noise() {
        let mut rng = Rng::seed(3);
        let a = random_image(&mut rng, [1, 3, 8, 8]);
        let mut last = f64::INFINITY;
        for &amp in &[0.01f32, 0.05, 0.2] {
            let noisy = Tensor::from_vec(
                a.shape(),
                a.data().iter().map(|&v| v + rng.uniform(-amp, amp)).collect(),
            )
            .unwrap();
            let p = psnr(&a, &noisy, 1.0).unwrap();
            assert!((p - psnr(&noisy, &a, 1.0).unwrap()).abs() < 1e-12);
            assert!(p < last, "psnr did not decrease with noise amplitude");
            last = p;
        }
    }

    #[test]
    fn ssim_identity_is_one() {
        let mut rng = Rng::seed(4);
        let a = random_image(&mut rng, [1, 3, 12, 12]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = Rng::seed(5);
        let a = random_image(&mut rng, [1, 1, 16, 16]);
        let b = random_image(&mut rng, [1, 1, 16, 16]);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_negative_image_scores_low() {
        // high-contrast pattern without mid-gray so the negation is distinct
        let mut a = Tensor::zeros([1, 1, 16, 16]);
        for y in 0..16 {
            for x in 0..16 {
                a.set(0, 0, y, x, if (x / 4 + y / 4) % 2 == 0 { 0.9 } else { 0.1 });
            }
        }
        let b = a.map(|v| 1.0 - v);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.5, "ssim of negated pattern was {s}");
    }

    /// Direct double-loop windowed oracle, independent of the separable path.
    fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let [n, c, h, w] = a.shape();
        let win = gaussian_window();
        let c1 = SSIM_K1.powi(2);
        let c2 = SSIM_K2.powi(2);
        let mut total = 0.0;
        let mut planes = 0usize;
        for img in 0..n {
            for ch in 0..c {
                let mut acc = 0.0;
                let mut count = 0usize;
                for y0 in 0..=(h - SSIM_WINDOW) {
                    for x0 in 0..=(w - SSIM_WINDOW) {
                        let mut ma = 0.0;
                        let mut mb = 0.0;
                        let mut saa = 0.0;
                        let mut sbb = 0.0;
                        let mut sab = 0.0;
                        for dy in 0..SSIM_WINDOW {
                            for dx in 0..SSIM_WINDOW {
                                let wgt = win[dy] * win[dx];
                                let va = a.at(img, ch, y0 + dy, x0 + dx) as f64;
                                let vb = b.at(img, ch, y0 + dy, x0 + dx) as f64;
                                ma += wgt * va;
                                mb += wgt * vb;
                                saa += wgt * va * va;
                                sbb += wgt * vb * vb;
                                sab += wgt * va * vb;
                            }
                        }
                        let va = saa - ma * ma;
                        let vb = sbb - mb * mb;
                        let cov = sab - ma * mb;
                        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                        count += 1;
                    }
                }
                total += acc / count as f64;
                planes += 1;
            }
        }
        total / planes as f64
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        let mut rng = Rng::seed(6);
        let a = random_image(&mut rng, [1, 3, 14, 13]);
        let b = random_image(&mut rng, [1, 3, 14, 13]);
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_oracle(&a, &b);
        assert!((fast - slow).abs() < 1e-5, "{fast} vs {slow}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros([1, 1, 8, 8]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn grad_check_quadratic_is_exact() {
        // f(w) = w^2 at w = 3: central differences are exact on polynomials,
        // and eps = 0.125 keeps the perturbed weights exactly representable
        let mut store = ParameterStore::new();
        store.register("w", ParamKind::ConvWeight, [1, 1, 1, 1]).unwrap();
        store.get_mut("w").unwrap().data_mut()[0] = 3.0;
        let report = grad_check(&mut store, 0.125, |s| {
            let w = s.get("w")?.data()[0] as f64;
            s.zero_grads();
            s.entry_mut(0).grad.data_mut()[0] = (2.0 * w) as f32;
            Ok(w * w)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    #[test]
    fn grad_check_detects_planted_fault() {
        // gradient deliberately doubled: rel-err approx 0.5 must be reported
        let mut store = ParameterStore::new();
        store.register("w", ParamKind::ConvWeight, [1, 1, 1, 1]).unwrap();
        store.get_mut("w").unwrap().data_mut()[0] = 3.0;
        let report = grad_check(&mut store, 1e-3, |s| {
            let w = s.get("w")?.data()[0] as f64;
            s.zero_grads();
            s.entry_mut(0).grad.data_mut()[0] = (4.0 * w) as f32;
            Ok(w * w)
        })
        .unwrap();
        assert!((report.max_rel_err - 0.5).abs() < 1e-4, "{report:?}");
        assert_eq!(report.worst_param, "w");
    }

    #[test]
    fn grad_check_single_conv_layer() {
        use crate::autograd::Tape;
        let mut rng = Rng::seed(40);
        let input = random_image(&mut rng, [1, 2, 6, 6]);
        let target = random_image(&mut rng, [1, 3, 6, 6]);
        let mut store = ParameterStore::new();
        store.register("c.w", ParamKind::ConvWeight, [3, 2, 3, 3]).unwrap();
        store.register("c.b", ParamKind::Bias, [1, 3, 1, 1]).unwrap();
        crate::params::init_weights(&mut store, &mut rng);

        let report = grad_check(&mut store, 1e-3, |s| {
            s.zero_grads();
            let mut tape = Tape::new();
            let vx = tape.leaf(input.clone());
            let vw = tape.leaf(s.get("c.w")?.clone());
            let vb = tape.leaf(s.get("c.b")?.clone());
            let out = tape.conv2d(vx, vw, vb, 1, 1)?;
            let loss = tape.mse_loss(out, &target)?;
            tape.backward(loss)?;
            let iw = s.index_of("c.w")?;
            let ib = s.index_of("c.b")?;
            s.entry_mut(iw).grad.add_assign(&tape.grad(vw))?;
            s.entry_mut(ib).grad.add_assign(&tape.grad(vb))?;
            Ok(tape.value(loss).data()[0] as f64)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
