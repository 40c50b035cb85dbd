#![allow(dead_code)]

use rand::Rng;
use sgl_core::oracle::ClassifierHandle;
use sgl_core::Tensor;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Piecewise-constant classifier: the input box is cut into `cells` bins per
/// coordinate and every bin gets a pseudo-random label pair.
pub fn lookup_classifier(seed: u64, cells: usize, classes: [usize; 2]) -> ClassifierHandle {
    ClassifierHandle::from_fn(format!("lookup-{seed}"), move |x| {
        let mut h = mix(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
        for &v in x {
            let bin = ((v + 0.5) * cells as f64).floor().clamp(0.0, cells as f64 - 1.0) as u64;
            h = mix(h ^ bin.wrapping_add(0x2545_F491_4F6C_DD1D));
        }
        vec![(h % classes[0] as u64) as usize, ((h >> 32) % classes[1] as u64) as usize]
    })
}

pub fn uniform_points<R: Rng>(n: usize, dim: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[n, dim], -0.5, 0.5, rng)
}
