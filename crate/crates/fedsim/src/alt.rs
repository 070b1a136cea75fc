//! Adaptive local training: per-client step budgets.
//!
//! A client's utility is the harmonic mean of its normalized sample count
//! and normalized class entropy. Local gradient steps are reallocated in
//! proportion to utility, scaled so the total budget over all clients stays
//! at `K * E` (up to rounding) when the conservation constant is computed
//! rather than overridden.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ClientStats;
use crate::error::{Error, Result};

/// Derived scheduling record for one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientUtility {
    /// Sample count normalized by the federation maximum.
    pub n_bar: f64,
    /// Normalized class entropy.
    pub e_bar: f64,
    /// Harmonic mean of the two.
    pub r_bar: f64,
    /// Allocated local gradient steps.
    pub steps: usize,
}

/// `n_bar_k = n_k / max_j n_j`. The largest client maps to exactly 1.
pub fn normalize_counts(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::config("cannot normalize an empty count list"));
    }
    if counts.iter().any(|&n| n == 0) {
        return Err(Error::config("client sample counts must be at least 1"));
    }
    let max = *counts.iter().max().unwrap() as f64;
    Ok(counts.iter().map(|&n| n as f64 / max).collect())
}

/// Harmonic mean `2ab / (a + b)`, with 0 when both inputs are 0.
pub fn utility(n_bar: f64, e_bar: f64) -> Result<f64> {
    for v in [n_bar, e_bar] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::config(format!(
                "utility inputs must lie in [0, 1], got {v}"
            )));
        }
    }
    let sum = n_bar + e_bar;
    if sum == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * n_bar * e_bar / sum)
    }
}

/// Allocate `round(r0 * r_bar_k * E)` steps per client and return the steps
/// together with the effective `r0`.
///
/// `r0` defaults to `K / sum(r_bar)` which conserves the total step budget;
/// an override disables conservation. Rounding is half-to-even so rounding
/// errors do not accumulate with a systematic sign.
pub fn allocate_steps(
    r_bar: &[f64],
    base_steps: usize,
    r0_override: Option<f64>,
) -> Result<(Vec<usize>, f64)> {
    if r_bar.is_empty() {
        return Err(Error::config("cannot allocate steps for zero clients"));
    }
    if base_steps == 0 {
        return Err(Error::config("base step count must be at least 1"));
    }
    for &r in r_bar {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::config(format!("utility {r} outside [0, 1]")));
        }
    }
    let r0 = match r0_override {
        Some(r0) => {
            if !(r0 > 0.0) || !r0.is_finite() {
                return Err(Error::config("r0 override must be positive and finite"));
            }
            r0
        }
        None => {
            let sum: f64 = r_bar.iter().sum();
            if sum <= 0.0 {
                return Err(Error::Scheduling(
                    "all client utilities are zero; supply an r0 override".to_string(),
                ));
            }
            r_bar.len() as f64 / sum
        }
    };
    let steps = r_bar
        .iter()
        .map(|&r| (r0 * r * base_steps as f64).round_ties_even() as usize)
        .collect();
    Ok((steps, r0))
}

/// Compose the pipeline over federation statistics.
pub fn build_utilities(
    stats: &[ClientStats],
    base_steps: usize,
    r0_override: Option<f64>,
) -> Result<(Vec<ClientUtility>, f64)> {
    let counts: Vec<usize> = stats.iter().map(|s| s.samples).collect();
    let n_bar = normalize_counts(&counts)?;
    let r_bar: Vec<f64> = n_bar
        .iter()
        .zip(stats)
        .map(|(&n, s)| utility(n, s.entropy))
        .collect::<Result<_>>()?;
    let (steps, r0) = allocate_steps(&r_bar, base_steps, r0_override)?;
    let utilities = stats
        .iter()
        .zip(&n_bar)
        .zip(&r_bar)
        .zip(&steps)
        .map(|(((s, &n_bar), &r_bar), &steps)| ClientUtility {
            n_bar,
            e_bar: s.entropy,
            r_bar,
            steps,
        })
        .collect();
    Ok((utilities, r0))
}

/// Write the allocation table as CSV:
/// `client_id,n,n_bar,e_bar,r_bar,steps`.
pub fn write_allocation_csv(
    path: &Path,
    stats: &[ClientStats],
    utilities: &[ClientUtility],
) -> Result<()> {
    if stats.len() != utilities.len() {
        return Err(Error::config("stats and utilities lengths differ"));
    }
    let mut out = String::from("client_id,n,n_bar,e_bar,r_bar,steps\n");
    for (k, (s, u)) in stats.iter().zip(utilities).enumerate() {
        out.push_str(&format!(
            "{k},{},{},{},{},{}\n",
            s.samples, u.n_bar, u.e_bar, u.r_bar, u.steps
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
