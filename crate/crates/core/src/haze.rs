//! Atmospheric scattering physics, the portion-of-haze measure, the
//! image-space SOS boosting harness, and the classical iterative
//! back-projection oracle.
//!
//! The scattering model is I(x) = T(x) J(x) + (1 - T(x)) A with
//! transmission T = exp(-beta * depth) under homogeneous haze.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Floor applied to the radiance denominator inside [`poh`] so black pixels
/// do not blow up the ratio.
pub const POH_RADIANCE_FLOOR: f32 = 1e-3;

#[derive(Clone, Debug)]
pub enum TransmissionSpec {
    /// Scattering coefficient per unit depth; requires a depth map.
    Beta(f32),
    /// Explicit per-pixel transmission, values in (0, 1], shape (N,1,H,W).
    Map(Tensor),
}

#[derive(Clone, Debug)]
pub struct SceneParams {
    /// Global atmospheric light, strictly positive, at most 1.
    pub atmospheric_light: f32,
    pub transmission: TransmissionSpec,
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let a = self.atmospheric_light;
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::invalid(format!(
                "atmospheric light must be in (0, 1], got {a}"
            )));
        }
        match &self.transmission {
            TransmissionSpec::Beta(b) => {
                if *b < 0.0 || !b.is_finite() {
                    return Err(Error::invalid(format!(
                        "scattering coefficient must be >= 0, got {b}"
                    )));
                }
            }
            TransmissionSpec::Map(t) => {
                if t.c() != 1 {
                    return Err(Error::invalid(format!(
                        "transmission map must have 1 channel, got shape {:?}",
                        t.shape()
                    )));
                }
                if t.data().iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
                    return Err(Error::invalid(
                        "transmission map values must be in (0, 1]".to_string(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ImagePair {
    pub hazy: Tensor,
    pub clean: Tensor,
    pub depth: Option<Tensor>,
    pub transmission: Option<Tensor>,
}

/// One step of the image-space boosting recursion.
#[derive(Clone, Debug)]
pub struct BoostState {
    pub iterate: Tensor,
    pub index: usize,
}

/// T = exp(-beta * depth), a (N,1,H,W) map.
pub fn transmission_from_depth(beta: f32, depth: &Tensor) -> Result<Tensor> {
    if depth.c() != 1 {
        return Err(Error::invalid(format!(
            "depth map must have 1 channel, got shape {:?}",
            depth.shape()
        )));
    }
    Ok(depth.map(|d| (-beta * d).exp()))
}

fn check_map_matches(clean: &Tensor, map: &Tensor, what: &str) -> Result<()> {
    if map.n() != clean.n() || map.h() != clean.h() || map.w() != clean.w() {
        return Err(Error::shape(format!(
            "{what} shape {:?} does not match image {:?}",
            map.shape(),
            clean.shape()
        )));
    }
    Ok(())
}

/// Apply a 1-channel map to every channel of `img` through `f(pixel, map)`.
pub fn apply_map(img: &Tensor, map: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    check_map_matches(img, map, "map")?;
    let [n, c, h, w] = img.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for img_i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = f(img.at(img_i, ch, y, x), map.at(img_i, 0, y, x));
                    out.set(img_i, ch, y, x, v);
                }
            }
        }
    }
    Ok(out)
}

/// Synthesize a hazy image from a clean one: I = T J + (1 - T) A, clamped to
/// [0, 1]. The returned pair carries the transmission map (and the depth map
/// when synthesis went through one).
pub fn synthesize_hazy(
    clean: &Tensor,
    params: &SceneParams,
    depth: Option<&Tensor>,
) -> Result<ImagePair> {
    params.validate()?;
    let a = params.atmospheric_light;
    let (t, depth_used) = match &params.transmission {
        TransmissionSpec::Map(t) => {
            check_map_matches(clean, t, "transmission map")?;
            (t.clone(), depth.cloned())
        }
        TransmissionSpec::Beta(beta) => {
            let d = depth.ok_or_else(|| {
                Error::invalid(
                    "synthesize_hazy: depth map required when the scene specifies beta"
                        .to_string(),
                )
            })?;
            check_map_matches(clean, d, "depth map")?;
            (transmission_from_depth(*beta, d)?, Some(d.clone()))
        }
    };
    if t.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid(
            "transmission map contains non-positive values".to_string(),
        ));
    }
    let hazy = apply_map(clean, &t, |j, tv| (tv * j + (1.0 - tv) * a).clamp(0.0, 1.0))?;
    Ok(ImagePair {
        hazy,
        clean: clean.clone(),
        depth: depth_used,
        transmission: Some(t),
    })
}

/// Invert the scattering model given the true transmission and light.
pub fn recover_clean(hazy: &Tensor, t: &Tensor, a: f32) -> Result<Tensor> {
    apply_map(hazy, t, |i, tv| (i - (1.0 - tv) * a) / tv)
}

/// Portion of haze: mean over pixels of (1 - T) A / J, with J floor-clamped
/// at [`POH_RADIANCE_FLOOR`].
pub fn poh(radiance: &Tensor, t: &Tensor, a: f32) -> Result<f64> {
    check_map_matches(radiance, t, "transmission map")?;
    let [n, c, h, w] = radiance.shape();
    let mut acc = 0f64;
    for img in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let j = radiance.at(img, ch, y, x).max(POH_RADIANCE_FLOOR);
                    let tv = t.at(img, 0, y, x);
                    acc += ((1.0 - tv) * a / j) as f64;
                }
            }
        }
    }
    Ok(acc / radiance.len() as f64)
}

/// SOS boosting in image space: J_hat^0 = g(I), then
/// J_hat^{n+1} = g(I + J_hat^n) - J_hat^n. The strengthened input I + J_hat^n
/// may leave [0, 1] and is deliberately not clamped before g.
pub fn sos_boost_images(
    hazy: &Tensor,
    dehazer: impl Fn(&Tensor) -> Result<Tensor>,
    iterations: usize,
) -> Result<Vec<BoostState>> {
    if iterations < 1 {
        return Err(Error::invalid("sos_boost_images: iterations >= 1".to_string()));
    }
    let mut states = Vec::with_capacity(iterations + 1);
    let mut current = dehazer(hazy)?;
    current.check_same_shape(hazy, "dehazer output")?;
    states.push(BoostState {
        iterate: current.clone(),
        index: 0,
    });
    for n in 1..=iterations {
        let strengthened = hazy.add(&current)?;
        let refined = dehazer(&strengthened)?;
        let next = refined.sub(&current)?;
        if !next.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite boost iterate at iteration {n}"
            )));
        }
        states.push(BoostState {
            iterate: next.clone(),
            index: n,
        });
        current = next;
    }
    Ok(states)
}

/// Ideal partial dehazer used by the boosting harness: it knows the true
/// transmission and light and removes the fraction `gamma` of the optical
/// depth, i.e. it inverts the scattering model with T_gamma = T^gamma.
/// gamma -> 1 is the exact inversion, gamma -> 0 the identity map.
pub fn ideal_dehazer(
    t: &Tensor,
    a: f32,
    gamma: f32,
) -> impl Fn(&Tensor) -> Result<Tensor> + '_ {
    move |img: &Tensor| {
        let t_gamma = t.map(|tv| tv.powf(gamma));
        apply_map(img, &t_gamma, |i, tg| (i - (1.0 - tg) * a) / tg)
    }
}

/// Classical iterative back-projection with a supplied downsampler `f` and
/// back-projector `h`. The correction is applied in the residual-decreasing
/// orientation H += h(L_ob - f(H)), starting from H_0 = h(L_ob).
pub fn iterative_back_projection(
    l_ob: &Tensor,
    f: impl Fn(&Tensor) -> Result<Tensor>,
    h: impl Fn(&Tensor) -> Result<Tensor>,
    iterations: usize,
) -> Result<Tensor> {
    let mut estimate = h(l_ob)?;
    for _ in 0..iterations {
        let residual = l_ob.sub(&f(&estimate)?)?;
        estimate = estimate.add(&h(&residual)?)?;
    }
    Ok(estimate)
}

/// Reference projection pair for the oracle: 2x average-pool down, 2x
/// nearest-neighbor up.
pub fn reference_downsampler(t: &Tensor) -> Result<Tensor> {
    ops::avg_pool2(t)
}

pub fn reference_back_projector(t: &Tensor) -> Result<Tensor> {
    Ok(ops::upsample_nearest2(t))
}

/// Random low-frequency positive depth field in roughly [0.2, 1.0], for
/// synthesizing scenes without real depth maps.
pub fn procedural_depth(rng: &mut crate::rng::Rng, h: usize, w: usize) -> Tensor {
    let ax = rng.uniform(0.5, 2.0);
    let ay = rng.uniform(0.5, 2.0);
    let phase = rng.uniform(0.0, std::f32::consts::TAU);
    let mut d = Tensor::zeros([1, 1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let v = 0.6
                + 0.4
                    * ((ax * x as f32 / w as f32 + ay * y as f32 / h as f32)
                        * std::f32::consts::TAU
                        + phase)
                        .sin()
                        .abs();
            d.set(0, 0, y, x, v);
        }
    }
    d
}

/// Random smooth RGB radiance field with values in (0, 1), for synthetic
/// datasets. Each channel is a shifted low-frequency sinusoid plus mild
/// per-pixel texture.
pub fn procedural_clean(rng: &mut crate::rng::Rng, h: usize, w: usize) -> Tensor {
    let mut img = Tensor::zeros([1, 3, h, w]);
    for ch in 0..3 {
        let ax = rng.uniform(0.5, 3.0);
        let ay = rng.uniform(0.5, 3.0);
        let phase = rng.uniform(0.0, std::f32::consts::TAU);
        let level = rng.uniform(0.35, 0.65);
        for y in 0..h {
            for x in 0..w {
                let wave = ((ax * x as f32 / w as f32 + ay * y as f32 / h as f32)
                    * std::f32::consts::TAU
                    + phase)
                    .sin();
                let noise = rng.uniform(-0.05, 0.05);
                let v = (level + 0.25 * wave + noise).clamp(0.05, 0.95);
                img.set(0, ch, y, x, v);
            }
        }
    }
    img
}
