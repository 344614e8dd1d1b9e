//! Space-filling designs on the unit box.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Resample budget for a single infeasible design point.
pub const MAX_RESAMPLES: usize = 1000;

/// Latin hypercube of `n` points in `[0,1]^dims`.
///
/// Every dimension is split into `n` equal strata and each stratum holds
/// exactly one point. A point rejected by `feasible` is redrawn inside its
/// own strata; when that fails for [`MAX_RESAMPLES`] draws, one dimension at
/// a time is released to the whole axis (the Latin property is then lost in
/// that dimension only).
pub fn lhs_init<F>(n: usize, dims: usize, seed: u64, feasible: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> bool,
{
    if n == 0 {
        return Err(Error::invalid("lhs_init needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strata: Vec<Vec<usize>> = (0..dims)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let width = 1.0 / n as f64;
    let draw = |rng: &mut ChaCha8Rng, j: usize, free: Option<usize>| -> Vec<f64> {
        (0..dims)
            .map(|d| {
                let u: f64 = rng.random();
                if Some(d) == free {
                    u
                } else {
                    (strata[d][j] as f64 + u) * width
                }
            })
            .collect()
    };

    let mut points = Vec::with_capacity(n);
    for j in 0..n {
        let mut point = draw(&mut rng, j, None);
        let mut ok = feasible(&point);
        let mut attempts = 0;
        while !ok && attempts < MAX_RESAMPLES {
            point = draw(&mut rng, j, None);
            ok = feasible(&point);
            attempts += 1;
        }
        let mut free = 0;
        while !ok && free < dims {
            attempts = 0;
            while !ok && attempts < MAX_RESAMPLES {
                point = draw(&mut rng, j, Some(free));
                ok = feasible(&point);
                attempts += 1;
            }
            free += 1;
        }
        if !ok {
            return Err(Error::InfeasibleStratum {
                attempts: MAX_RESAMPLES,
            });
        }
        points.push(point);
    }
    Ok(points)
}

/// Radical-inverse (Halton) sequence in the first `dims` prime bases with a
/// seeded Cranley–Patterson rotation.
pub fn halton(count: usize, dims: usize, seed: u64) -> Vec<Vec<f64>> {
    const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    assert!(dims <= PRIMES.len(), "halton supports up to {} dimensions", PRIMES.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..dims).map(|_| rng.random()).collect();
    (1..=count as u64)
        .map(|i| {
            (0..dims)
                .map(|d| (radical_inverse(i, PRIMES[d]) + shift[d]).fract())
                .collect()
        })
        .collect()
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    r
}
