use dehaze::haze::{self, SceneParams, TransmissionSpec};
use dehaze::rng::Rng;
use dehaze::training::Pair;
use dehaze::Tensor;

/// Synthetic hazy/clean pairs with smooth procedural scenes.
pub fn synthetic_pairs(seed: u64, count: usize, size: usize) -> Vec<Pair> {
    let mut rng = Rng::seed(seed);
    (0..count)
        .map(|_| {
            let clean = haze::procedural_clean(&mut rng, size, size);
            let depth = haze::procedural_depth(&mut rng, size, size);
            let beta = rng.uniform(0.4, 1.6);
            let a = rng.uniform(0.7, 1.0);
            let params = SceneParams {
                atmospheric_light: a,
                transmission: TransmissionSpec::Beta(beta),
            };
            let pair = haze::synthesize_hazy(&clean, &params, Some(&depth)).unwrap();
            Pair {
                hazy: pair.hazy,
                clean: pair.clean,
            }
        })
        .collect()
}

#[allow(dead_code)]
pub fn random_tensor(rng: &mut Rng, shape: [usize; 4], lo: f32, hi: f32) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Run a named check, print one PASS/FAIL line, and propagate the failure.
#[allow(dead_code)]
pub fn report<F: FnOnce() -> Result<String, String>>(name: &str, f: F) {
    match f() {
        Ok(detail) => println!("{name}: PASS ({detail})"),
        Err(detail) => {
            println!("{name}: FAIL ({detail})");
            panic!("{name} failed: {detail}");
        }
    }
}
