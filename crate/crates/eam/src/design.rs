//! Space-filling designs on a box.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::Bounds;

/// Latin-hypercube sample of `count` points.
pub fn latin_hypercube<R: Rng + ?Sized>(bounds: &Bounds, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let p = bounds.dim();
    let mut points = vec![vec![0.0; p]; count];
    let mut strata: Vec<usize> = (0..count).collect();
    for k in 0..p {
        strata.shuffle(rng);
        let (lo, hi) = (bounds.lower[k], bounds.upper[k]);
        for (point, &s) in points.iter_mut().zip(&strata) {
            let u = (s as f64 + rng.random::<f64>()) / count as f64;
            point[k] = lo + u * (hi - lo);
        }
    }
    points
}

const PRIMES: [u32; 40] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173,
];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    out
}

/// Randomly shifted Halton points. Dimensions beyond the prime table fall back to
/// independent uniforms.
pub fn shifted_halton<R: Rng + ?Sized>(bounds: &Bounds, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let p = bounds.dim();
    let shift: Vec<f64> = (0..p).map(|_| rng.random::<f64>()).collect();
    (0..count)
        .map(|i| {
            (0..p)
                .map(|k| {
                    let u = if k < PRIMES.len() {
                        (radical_inverse(i as u64 + 1, PRIMES[k] as u64) + shift[k]).fract()
                    } else {
                        rng.random::<f64>()
                    };
                    bounds.lower[k] + u * (bounds.upper[k] - bounds.lower[k])
                })
                .collect()
        })
        .collect()
}

pub fn uniform_point<R: Rng + ?Sized>(bounds: &Bounds, rng: &mut R) -> Vec<f64> {
    bounds
        .lower
        .iter()
        .zip(&bounds.upper)
        .map(|(&lo, &hi)| lo + rng.random::<f64>() * (hi - lo))
        .collect()
}
