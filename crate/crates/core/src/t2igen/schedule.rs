//! Cosine masking for training and the decoding schedule.

use std::f64::consts::FRAC_PI_2;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{ensure, Result};
use crate::vq::TokenGrid;

/// Mask count for a draw `u` in `[0, 1)`: `max(1, round(n * cos(pi u / 2)))`.
pub fn mask_count(u: f64, n: usize) -> usize {
    ((n as f64 * (FRAC_PI_2 * u).cos()).round() as usize).clamp(1, n)
}

/// Draws `u ~ U[0, 1)` and returns that many distinct positions in `0..n`, sorted.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    assert!(n >= 1, "cannot mask an empty grid");
    let u: f64 = rng.random();
    let mut m = sample(rng, n, mask_count(u, n)).into_vec();
    m.sort_unstable();
    m
}

/// Replaces the ids at `positions` with `drop_id`.
pub fn apply_mask(grid: &TokenGrid, positions: &[usize], drop_id: u32) -> Result<TokenGrid> {
    let mut out = grid.clone();
    for &p in positions {
        ensure!(
            p < grid.len(),
            Contract,
            "mask position {p} outside grid of {}",
            grid.len()
        );
        out.ids_mut()[p] = drop_id;
    }
    Ok(out)
}

/// Tokens still masked after decoding step `t` of `steps`:
/// `ceil(n * cos(pi/2 * t / steps))`.
///
/// A 1e-9 guard absorbs rounding in the cosine so exact integers (e.g.
/// `t == steps`, or `cos(pi/3) = 0.5` at even `n`) are not bumped up by one.
pub fn masked_count_at_step(t: usize, steps: usize, n: usize) -> Result<usize> {
    ensure!(steps >= 1, Parameter, "decode needs at least one step");
    ensure!(t <= steps, Parameter, "step {t} beyond schedule length {steps}");
    let v = n as f64 * (FRAC_PI_2 * t as f64 / steps as f64).cos();
    Ok(((v - 1e-9).ceil().max(0.0) as usize).min(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_count_limits() {
        assert_eq!(mask_count(0.0, 256), 256);
        assert_eq!(mask_count(0.999_999, 256), 1);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(masked_count_at_step(0, 24, 256).unwrap(), 256);
        assert_eq!(masked_count_at_step(24, 24, 256).unwrap(), 0);
        assert_eq!(masked_count_at_step(12, 24, 256).unwrap(), 182);
        assert_eq!(masked_count_at_step(16, 24, 256).unwrap(), 128);
        assert!(masked_count_at_step(25, 24, 256).is_err());
        assert_eq!(masked_count_at_step(0, 1, 64).unwrap(), 64);
        assert_eq!(masked_count_at_step(1, 1, 64).unwrap(), 0);
    }

    #[test]
    fn apply_mask_rejects_out_of_range() {
        let g = TokenGrid::filled(2, 1);
        assert!(apply_mask(&g, &[4], 9).is_err());
        assert_eq!(apply_mask(&g, &[], 9).unwrap(), g);
    }
}
