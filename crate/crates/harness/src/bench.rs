//! Weight-gradient GEMM benchmark: skip kernel at several frozen densities
//! against the dense kernel on the same operands.

use std::time::Instant;

use lts_core::sparse::{weight_grad_dense, weight_grad_skipped};
use lts_core::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const BENCH_HEADER: [&str; 5] = ["shape", "mask_density", "macs_performed", "elapsed_ns", "speedup_vs_dense"];

/// Output gradient `M×K`, weight `M×N`: `m` output rows, `n` fan-in, `k` reduction length.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Frozen fractions of the weight.
    pub densities: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub shape: String,
    pub mask_density: f64,
    pub macs_performed: u64,
    /// Median over repetitions.
    pub elapsed_ns: u64,
    pub speedup_vs_dense: f64,
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Mask with exactly `round(density · len)` frozen positions.
pub fn random_mask(len: usize, density: f64, rng: &mut impl Rng) -> Vec<bool> {
    let count = ((density * len as f64).round() as usize).min(len);
    let mut mask = vec![false; len];
    for i in sample(rng, len, count) {
        mask[i] = true;
    }
    mask
}

/// Median dense time in nanoseconds plus one row per density. Repetitions
/// of all kernels are interleaved so slow drift affects them equally.
pub fn bench_gemm(spec: &BenchSpec) -> Result<(u64, Vec<BenchRow>)> {
    if spec.m == 0 || spec.n == 0 || spec.k == 0 || spec.reps == 0 {
        return Err(HarnessError::invalid("bench-gemm needs positive m, n, k and reps"));
    }
    if let Some(d) = spec.densities.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(HarnessError::invalid(format!("density {d} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let act = Tensor::<f32>::from_fn(&[spec.n, spec.k], |_| rng.random_range(-1.0..1.0));
    let g = Tensor::<f32>::from_fn(&[spec.m, spec.k], |_| rng.random_range(-1.0..1.0));
    let masks: Vec<Vec<bool>> = spec
        .densities
        .iter()
        .map(|&d| random_mask(spec.m * spec.n, d, &mut rng))
        .collect();

    // Warm caches and page in every buffer once.
    let _ = weight_grad_dense(&act, &g)?;
    let mut dense_ns = Vec::with_capacity(spec.reps);
    let mut skip_ns = vec![Vec::with_capacity(spec.reps); masks.len()];
    let mut performed = vec![0u64; masks.len()];
    for _ in 0..spec.reps {
        let t = Instant::now();
        let out = weight_grad_dense(&act, &g)?;
        dense_ns.push(t.elapsed().as_nanos() as u64);
        std::hint::black_box(out);
        for (i, mask) in masks.iter().enumerate() {
            let t = Instant::now();
            let (out, report) = weight_grad_skipped(&act, &g, mask)?;
            skip_ns[i].push(t.elapsed().as_nanos() as u64);
            performed[i] = report.macs_performed;
            std::hint::black_box(out);
        }
    }
    let dense = median(dense_ns);
    let shape = format!("{}x{}x{}", spec.m, spec.n, spec.k);
    let rows = spec
        .densities
        .iter()
        .zip(skip_ns)
        .zip(performed)
        .map(|((&d, ns), macs)| {
            let t = median(ns).max(1);
            BenchRow {
                shape: shape.clone(),
                mask_density: d,
                macs_performed: macs,
                elapsed_ns: t,
                speedup_vs_dense: dense as f64 / t as f64,
            }
        })
        .collect();
    Ok((dense, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_has_exact_count_and_macs_follow() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = random_mask(40, 0.25, &mut rng);
        assert_eq!(mask.iter().filter(|&&f| f).count(), 10);
        let spec = BenchSpec {
            m: 4,
            n: 10,
            k: 33,
            densities: vec![0.0, 0.5, 1.0],
            reps: 3,
            seed: 0,
        };
        let (_, rows) = bench_gemm(&spec).unwrap();
        let macs: Vec<u64> = rows.iter().map(|r| r.macs_performed).collect();
        assert_eq!(macs, vec![40 * 33, 20 * 33, 0]);
        assert_eq!(rows[0].shape, "4x10x33");
    }
}
