//! Synthetic capacity-fade corpus: power-law degradation with a knee,
//! a resistance channel that rises after the knee, bounded-noise
//! temperature channels, and a mildly increasing charge time.
//!
//! Discharge capacity follows `q(j) = q0 * (1 - a * (j/EOL)^b)` with the
//! fade depth `a` fixed so capacity ends at exactly `1 - a` of nominal at
//! EOL (80% for the default 0.2). The shape exponent `b` is solved per cell
//! so the curvature maximum of the normalized curve lands at the requested
//! knee fraction; the realized knee cycle (discrete curvature argmax) is
//! recorded as ground truth.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{CellSeries, Schema};
use crate::error::{Error, Result};

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_cells: usize,
    pub eol_min: usize,
    pub eol_max: usize,
    /// Target knee position as a fraction of EOL. Feasible values for the
    /// power-law family sit roughly in [0.87, 0.95].
    pub knee_frac_min: f64,
    pub knee_frac_max: f64,
    /// Fraction of nominal capacity lost at EOL (0.2 puts EOL at 80%).
    pub fade_depth: f64,
    /// Noise multiplier; 0 disables noise entirely.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_cells: 20,
            eol_min: 400,
            eol_max: 800,
            knee_frac_min: 0.88,
            knee_frac_max: 0.92,
            fade_depth: 0.2,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// One generated cell plus its ground-truth knee cycle.
#[derive(Debug, Clone)]
pub struct SynthCell {
    pub series: CellSeries,
    pub knee_cycle: usize,
}

const NOMINAL_CAPACITY: f64 = 1.1;
const NOMINAL_RESISTANCE: f64 = 0.016;
const B_MIN: f64 = 3.01;
const B_MAX: f64 = 80.0;

/// Curvature argmax of `y(t) = 1 - a t^b` on the unit square, closed form:
/// the stationary point of kappa(t) = a b (b-1) t^(b-2) / (1 + (a b t^(b-1))^2)^(3/2).
fn knee_frac_for(a: f64, b: f64) -> f64 {
    (((b - 2.0) / ((a * b).powi(2) * (2.0 * b - 1.0))).ln() / (2.0 * b - 2.0)).exp()
}

/// Invert [`knee_frac_for`] in `b` by bisection (it is increasing in `b`).
fn solve_shape_exponent(a: f64, target: f64) -> Result<f64> {
    let lo_frac = knee_frac_for(a, B_MIN);
    let hi_frac = knee_frac_for(a, B_MAX);
    if target < lo_frac || target > hi_frac {
        return Err(Error::InvalidArgument(format!(
            "knee fraction {target:.3} is outside the feasible range [{lo_frac:.3}, {hi_frac:.3}] for fade depth {a}"
        )));
    }
    let (mut lo, mut hi) = (B_MIN, B_MAX);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if knee_frac_for(a, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Discrete curvature argmax of a capacity curve over 1-based cycles,
/// computed on normalized coordinates (t = j/eol, y = q/q(1)).
pub fn knee_by_curvature(q: &[f64]) -> usize {
    let eol = q.len();
    let q0 = q[0];
    let dt = 1.0 / eol as f64;
    let mut best = (1, f64::NEG_INFINITY);
    for j in 2..eol {
        let ym = q[j - 2] / q0;
        let y0 = q[j - 1] / q0;
        let yp = q[j] / q0;
        let d1 = (yp - ym) / (2.0 * dt);
        let d2 = (yp - 2.0 * y0 + ym) / (dt * dt);
        let kappa = d2.abs() / (1.0 + d1 * d1).powf(1.5);
        if kappa > best.1 {
            best = (j, kappa);
        }
    }
    best.0
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two uniforms.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<SynthCell>> {
    if spec.n_cells == 0 {
        return Err(Error::InvalidArgument("n_cells must be positive".into()));
    }
    if spec.eol_min < 200 || spec.eol_min > spec.eol_max {
        return Err(Error::InvalidArgument(format!(
            "EOL range [{}, {}] invalid: need 200 <= eol_min <= eol_max",
            spec.eol_min, spec.eol_max
        )));
    }
    if !(spec.fade_depth > 0.0 && spec.fade_depth < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fade depth must lie in (0, 1), got {}",
            spec.fade_depth
        )));
    }
    if spec.knee_frac_min > spec.knee_frac_max {
        return Err(Error::InvalidArgument("knee fraction range is inverted".into()));
    }
    if spec.noise < 0.0 {
        return Err(Error::InvalidArgument("noise must be non-negative".into()));
    }

    let a = spec.fade_depth;
    let mut cells = Vec::with_capacity(spec.n_cells);
    for idx in 0..spec.n_cells {
        // Independent stream per cell so corpora are stable under n_cells.
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1_000_003 * idx as u64));
        let eol = rng.random_range(spec.eol_min..=spec.eol_max);
        let knee_target = if spec.knee_frac_min == spec.knee_frac_max {
            spec.knee_frac_min
        } else {
            rng.random_range(spec.knee_frac_min..spec.knee_frac_max)
        };
        let b = solve_shape_exponent(a, knee_target)?;

        // Per-cell baselines: real corpora spread a few percent around the
        // nominal values, which is what keeps a small early fade ambiguous
        // against cell-to-cell variation.
        let q0 = NOMINAL_CAPACITY * (1.0 + 0.08 * rng.random_range(-1.0..1.0));
        let r0 = NOMINAL_RESISTANCE * (1.0 + 0.005 * rng.random_range(-1.0..1.0));
        let ct0 = 13.0 * (1.0 + 0.005 * rng.random_range(-1.0..1.0));
        let temp0 = 30.0 + 0.2 * rng.random_range(-1.0..1.0);

        let q_clean: Vec<f64> = (1..=eol)
            .map(|j| {
                let t = j as f64 / eol as f64;
                q0 * (1.0 - a * t.powf(b))
            })
            .collect();
        let knee_cycle = knee_by_curvature(&q_clean);

        let noise = spec.noise;
        let mut cycles = Vec::with_capacity(eol);
        for j in 1..=eol {
            let t = j as f64 / eol as f64;
            let ramp = ((j as f64 - knee_cycle as f64) / (eol - knee_cycle).max(1) as f64).max(0.0);
            let q = q_clean[j - 1] + 0.002 * q0 * noise * gaussian(&mut rng);
            let r = r0 * (1.0 + 0.35 * ramp.powf(1.2))
                + 0.002 * r0 * noise * gaussian(&mut rng);
            let qc = q_clean[j - 1] * 1.004 + 0.002 * q0 * noise * gaussian(&mut rng);
            let temp_avg = temp0 + 0.3 * noise * rng.random_range(-1.0..1.0);
            let temp_min = temp0 - 0.8 + 0.3 * noise * rng.random_range(-1.0..1.0);
            let temp_max = temp0 + 0.8 + 0.3 * noise * rng.random_range(-1.0..1.0);
            // Mildly increasing throughout, with most of the rise after the
            // knee (the constant-voltage phase stretches as the cell ages).
            let charge_time = ct0 * (1.0 + 0.002 * t + 0.06 * ramp.powf(1.2))
                + 0.05 * noise * rng.random_range(-1.0..1.0);
            cycles.push(vec![q, r, qc, temp_avg, temp_min, temp_max, charge_time]);
        }

        cells.push(SynthCell {
            series: CellSeries::new(format!("synth-{idx:03}"), Schema::Synth, cycles)?,
            knee_cycle,
        });
    }
    Ok(cells)
}
