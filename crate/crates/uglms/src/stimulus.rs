//! High-resolution DAC stimulus and localized sweep measurement.
//!
//! A sweep probes one code edge: the stimulus DAC places a handful of levels
//! inside a narrow window around the predicted edge position, each level is
//! converted a fixed number of times, and the mean output code is condensed
//! into one scalar residual.
//!
//! Sign convention: `z = mean(y) - (c* + 0.5)`, with `c*` the lower code of
//! the probed transition. A perfectly centered edge gives `z = 0`; when the
//! true edge sits above the window center the samples skew toward `c*` and
//! `z` goes negative.

use crate::adc::SarDevice;
use crate::rng::RngStream;
use crate::{Error, Result};

/// Stimulus source with `extra_bits` more resolution than the converter
/// under test, over the same full-scale range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HiResDac {
    extra_bits: u32,
}

impl HiResDac {
    pub fn new(extra_bits: u32) -> Result<Self> {
        if extra_bits == 0 || extra_bits > 24 {
            return Err(Error::InvalidConfig(format!("extra_bits {extra_bits} outside 1..=24")));
        }
        Ok(HiResDac { extra_bits })
    }

    pub fn extra_bits(&self) -> u32 {
        self.extra_bits
    }

    /// Step size in ADC LSB units, an exact power of two.
    pub fn step(&self) -> f64 {
        0.5f64.powi(self.extra_bits as i32)
    }

    /// Position of stimulus code `q` in ADC LSB units.
    pub fn position(&self, q: u64) -> f64 {
        q as f64 * self.step()
    }

    fn max_code(&self, adc_bits: u32) -> u64 {
        (1u64 << (adc_bits + self.extra_bits)) - 1
    }
}

/// Planned stimulus for one edge probe.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    /// Lower code of the probed transition; the target edge is `CE[c*]`.
    pub target_code: u64,
    /// Window center in LSB units, the current model prediction of the edge.
    pub center: f64,
    /// Window half width in LSB units.
    pub half_span: f64,
    /// Total sample count `M`.
    pub samples: u32,
    /// Distinct stimulus codes in increasing order with their repeat counts;
    /// repeats sum to `M`.
    pub levels: Vec<(u64, u32)>,
    /// Stimulus resolution the level codes are expressed in.
    pub extra_bits: u32,
    /// Set when no stimulus code fell inside the window and the plan was
    /// widened to the two codes bracketing the center.
    pub widened: bool,
}

/// Raw outcome of an executed sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Output codes in stimulus order.
    pub codes: Vec<u64>,
    /// Mean output code.
    pub mean_code: f64,
    /// Residual `mean_code - (c* + 0.5)` in LSB units.
    pub z: f64,
}

/// Sweep defaults for a given noise level: the window half span grows with
/// the expected noise, floored at a quarter LSB, and the stimulus keeps four
/// extra bits of resolution.
pub fn default_sweep_params(noise_rms: f64) -> (f64, u32) {
    (0.25f64.max(0.25 * noise_rms), 4)
}

/// Small-signal gain of the sweep statistic: how many units the mean code
/// moves per LSB of local transfer-curve shift near a centered window.
///
/// Under noise the mean output responds to every edge the smeared samples
/// can cross, so each stimulus level contributes the Gaussian density
/// summed over the surrounding unit edge lattice; at one LSB RMS and above
/// that sum is essentially one. Below the stimulus grid resolution the
/// transition is a bare staircase and the slope is the level density
/// `1 / (2 * half_span)`.
pub fn sweep_gain(noise_rms: f64, half_span: f64, extra_bits: u32) -> f64 {
    let step = 0.5f64.powi(extra_bits as i32);
    let grid_slope = 0.5 / half_span;
    if noise_rms <= step {
        return grid_slope;
    }
    let scale = 1.0 / step;
    let lo = (-half_span * scale).ceil() as i64;
    let hi_excl = (half_span * scale).ceil() as i64;
    if lo >= hi_excl {
        return grid_slope;
    }
    let reach = (4.0 * noise_rms).ceil() as i64 + 1;
    let norm = (2.0 * std::f64::consts::PI).sqrt() * noise_rms;
    let mut acc = 0.0;
    for q in lo..hi_excl {
        let u = q as f64 * step;
        for m in -reach..=reach {
            let t = (u - m as f64) / noise_rms;
            acc += (-0.5 * t * t).exp();
        }
    }
    acc / (hi_excl - lo) as f64 / norm
}

/// Lays out `samples` conversions across the stimulus codes whose positions
/// fall in `[center - half_span, center + half_span)`.
///
/// With at least as many candidate codes as samples, `samples` evenly spaced
/// codes get one conversion each; otherwise the samples are spread as evenly
/// as possible over the candidates, extras assigned from the lowest code
/// upward. The half-open window splits the level grid evenly around an
/// on-grid center, so a centered noiseless sweep balances exactly.
pub fn plan_sweep(
    adc_bits: u32,
    target_code: u64,
    center: f64,
    half_span: f64,
    samples: u32,
    dac: &HiResDac,
) -> Result<SweepPlan> {
    if samples == 0 {
        return Err(Error::InvalidConfig("sweep needs at least one sample".into()));
    }
    if !half_span.is_finite() || half_span <= 0.0 || !center.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "invalid sweep window: center {center}, half_span {half_span}"
        )));
    }
    if target_code >= (1u64 << adc_bits) - 1 {
        return Err(Error::CodeOutOfRange { code: target_code, bits: adc_bits });
    }

    let max_code = dac.max_code(adc_bits);
    let scale = 2f64.powi(dac.extra_bits() as i32);
    let clamp = |q: i64| -> u64 { q.clamp(0, max_code as i64) as u64 };

    let lo = ((center - half_span) * scale).ceil() as i64;
    let hi_excl = ((center + half_span) * scale).ceil() as i64;
    let (lo, hi_excl, widened) = if lo >= hi_excl {
        // Window narrower than one stimulus step: fall back to the two
        // codes bracketing the center.
        log::warn!("sweep window narrower than one DAC step, widening to the bracketing codes");
        let below = (center * scale).floor() as i64;
        (below, below + 2, true)
    } else {
        (lo, hi_excl, false)
    };
    let lo = clamp(lo);
    let hi = clamp(hi_excl - 1);
    let count = hi - lo + 1;

    let mut levels = Vec::new();
    if samples == 1 {
        let nearest = clamp((center * scale).round() as i64).clamp(lo, hi);
        levels.push((nearest, 1));
    } else if count >= samples as u64 {
        // One conversion on each of `samples` index-evenly-spaced codes.
        for j in 0..samples as u64 {
            let offset = (j * (count - 1) + (samples as u64 - 1) / 2) / (samples as u64 - 1);
            let q = lo + offset;
            match levels.last_mut() {
                Some((last, n)) if *last == q => *n += 1,
                _ => levels.push((q, 1)),
            }
        }
    } else {
        let base = samples / count as u32;
        let extra = samples as u64 % count;
        for q in lo..=hi {
            let repeats = base + u32::from(q - lo < extra);
            levels.push((q, repeats));
        }
    }
    debug_assert_eq!(levels.iter().map(|(_, n)| *n).sum::<u32>(), samples);

    Ok(SweepPlan {
        target_code,
        center,
        half_span,
        samples,
        levels,
        extra_bits: dac.extra_bits(),
        widened,
    })
}

/// Runs the planned conversions and condenses them into the residual.
///
/// Levels execute in increasing order, repeats back to back, which fixes the
/// noise-stream alignment for a given plan.
pub fn execute_sweep(device: &SarDevice, plan: &SweepPlan, rng: &mut RngStream) -> SweepResult {
    let spec = device.spec();
    let step = 0.5f64.powi(plan.extra_bits as i32);
    let mut codes = Vec::with_capacity(plan.samples as usize);
    let mut sum = 0.0;
    for (q, repeats) in &plan.levels {
        let v = spec.v_ref_neg + *q as f64 * step * spec.lsb();
        for _ in 0..*repeats {
            let y = device.convert(v, rng);
            sum += y as f64;
            codes.push(y);
        }
    }
    let mean_code = sum / plan.samples as f64;
    let z = mean_code - (plan.target_code as f64 + 0.5);
    SweepResult { codes, mean_code, z }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adc::{DeviceSpec, SarDevice};
    use crate::rng::{RngStream, StreamKind};

    fn ideal(bits: u32, noise: f64) -> SarDevice {
        SarDevice::ideal(DeviceSpec::new(bits, 0.0, 1.0, noise, 1).unwrap())
    }

    fn stream(i: u64) -> RngStream {
        RngStream::new(77, StreamKind::Conversion, i)
    }

    #[test]
    fn default_params() {
        assert_eq!(default_sweep_params(1.0), (0.25, 4));
        assert_eq!(default_sweep_params(0.0), (0.25, 4));
        assert_eq!(default_sweep_params(5.0), (1.25, 4));
    }

    #[test]
    fn sweep_gain_limits() {
        // Noiseless: the level density over the window.
        assert_eq!(sweep_gain(0.0, 0.25, 4), 2.0);
        // At one LSB RMS the lattice sum saturates at one.
        let g = sweep_gain(1.0, 0.25, 4);
        assert!((0.99..1.01).contains(&g), "{g}");
        let g5 = sweep_gain(5.0, 1.25, 4);
        assert!((0.99..1.01).contains(&g5), "{g5}");
        // Sub-LSB noise concentrates samples where the probed edge is
        // densest, pushing the slope above one.
        let gq = sweep_gain(0.25, 0.25, 4);
        assert!((1.2..1.5).contains(&gq), "{gq}");
    }

    #[test]
    fn sweep_gain_matches_measured_slope() {
        // Empirical check: mean residual slope between two grid-aligned
        // window centers, so both plans share the same level layout.
        let dev = ideal(12, 1.0);
        let dac = HiResDac::new(4).unwrap();
        let predicted = sweep_gain(1.0, 0.25, 4);
        let reps = 20_000;
        let mut rng = stream(42);
        let mut mean_lo = 0.0;
        let mut mean_hi = 0.0;
        for _ in 0..reps {
            let plan = plan_sweep(12, 42, 42.25, 0.25, 8, &dac).unwrap();
            mean_lo += execute_sweep(&dev, &plan, &mut rng).z;
            let plan = plan_sweep(12, 42, 42.75, 0.25, 8, &dac).unwrap();
            mean_hi += execute_sweep(&dev, &plan, &mut rng).z;
        }
        mean_lo /= reps as f64;
        mean_hi /= reps as f64;
        // Raising the center by half an LSB raises z by gain * 0.5.
        let slope = (mean_hi - mean_lo) / 0.5;
        assert!(
            (slope - predicted).abs() < 0.05,
            "measured {slope} vs predicted {predicted}"
        );
    }

    #[test]
    fn quarter_lsb_window_gives_eight_levels_of_eight() {
        let dac = HiResDac::new(4).unwrap();
        let plan = plan_sweep(12, 42, 42.5, 0.25, 64, &dac).unwrap();
        assert_eq!(plan.levels.len(), 8);
        assert!(plan.levels.iter().all(|(_, n)| *n == 8));
        assert!(!plan.widened);
        // Every level lies inside the window.
        for (q, _) in &plan.levels {
            let x = dac.position(*q);
            assert!((42.25..=42.75).contains(&x));
        }
        // Levels are distinct and increasing.
        for w in plan.levels.windows(2) {
            assert!(w[1].0 > w[0].0);
        }
    }

    #[test]
    fn single_sample_picks_nearest_code() {
        let dac = HiResDac::new(4).unwrap();
        let plan = plan_sweep(12, 42, 42.47, 0.25, 1, &dac).unwrap();
        assert_eq!(plan.levels, vec![((42.47f64 * 16.0).round() as u64, 1)]);
    }

    #[test]
    fn few_candidates_split_evenly_low_first() {
        // A window of three codes receiving eight samples: repeats (3, 3, 2).
        let dac = HiResDac::new(4).unwrap();
        let step = dac.step();
        let center = 42.5;
        let plan = plan_sweep(12, 42, center, 1.45 * step, 8, &dac).unwrap();
        assert_eq!(plan.levels.len(), 3);
        let repeats: Vec<u32> = plan.levels.iter().map(|(_, n)| *n).collect();
        assert_eq!(repeats, vec![3, 3, 2]);
    }

    #[test]
    fn narrow_window_widens_to_bracketing_codes() {
        // A window between two grid points holds no stimulus code at all.
        let dac = HiResDac::new(4).unwrap();
        let plan = plan_sweep(12, 42, 42.53, dac.step() / 8.0, 4, &dac).unwrap();
        assert!(plan.widened);
        assert_eq!(plan.levels.len(), 2);
        assert_eq!(plan.levels.iter().map(|(_, n)| *n).sum::<u32>(), 4);
    }

    #[test]
    fn centered_noiseless_sweep_is_exactly_zero() {
        let dev = ideal(12, 0.0);
        let dac = HiResDac::new(4).unwrap();
        for c in [0u64, 42, 2047, 4093] {
            let plan = plan_sweep(12, c, c as f64 + 0.5, 0.25, 64, &dac).unwrap();
            let res = execute_sweep(&dev, &plan, &mut stream(c));
            assert_eq!(res.z, 0.0, "edge {c}");
        }
    }

    #[test]
    fn all_high_outputs_give_half_lsb_residual() {
        // Window fully above the true edge: every sample reads c* + 1.
        let dev = ideal(12, 0.0);
        let dac = HiResDac::new(4).unwrap();
        let plan = plan_sweep(12, 42, 43.2, 0.25, 8, &dac).unwrap();
        let res = execute_sweep(&dev, &plan, &mut stream(0));
        assert!(res.codes.iter().all(|y| *y == 43));
        assert_eq!(res.mean_code, 43.0);
        assert_eq!(res.z, 0.5);
    }

    #[test]
    fn split_outputs_balance_to_zero() {
        // Half the samples at 42 and half at 43 average to the edge.
        let dev = ideal(12, 0.0);
        let dac = HiResDac::new(4).unwrap();
        let plan = plan_sweep(12, 42, 42.5, 0.25, 8, &dac).unwrap();
        let res = execute_sweep(&dev, &plan, &mut stream(0));
        let low = res.codes.iter().filter(|y| **y == 42).count();
        assert_eq!(low, 4);
        assert_eq!(res.z, 0.0);
    }

    #[test]
    fn sign_convention_true_edge_above_center_is_negative() {
        // Sweep centered below the true edge at 42.5: samples skew to 42.
        let dev = ideal(12, 0.0);
        let dac = HiResDac::new(4).unwrap();
        let plan = plan_sweep(12, 42, 42.3, 0.25, 64, &dac).unwrap();
        let res = execute_sweep(&dev, &plan, &mut stream(0));
        assert!(res.z < 0.0, "expected negative residual, got {}", res.z);
        // And the mirror case.
        let plan = plan_sweep(12, 42, 42.7, 0.25, 64, &dac).unwrap();
        let res = execute_sweep(&dev, &plan, &mut stream(0));
        assert!(res.z > 0.0);
    }

    #[test]
    fn residual_saturates_at_code_distance() {
        let dev = ideal(10, 0.0);
        let dac = HiResDac::new(4).unwrap();
        // Probing edge 10 with a wildly wrong center: the residual is the
        // actual code distance, bounded by the code range.
        let plan = plan_sweep(10, 10, 500.5, 0.25, 16, &dac).unwrap();
        let res = execute_sweep(&dev, &plan, &mut stream(0));
        assert!(res.z.abs() <= 1024.0);
        assert!((res.z - (500.0 - 10.0)).abs() <= 1.0);
    }

    #[test]
    fn mean_residual_slope_is_negative_under_noise() {
        // E[z] decreases as the true edge moves up relative to the center.
        let dev = ideal(12, 1.0);
        let dac = HiResDac::new(4).unwrap();
        let reps = 10_000;
        let mut means = Vec::new();
        for (k, offset) in [-0.2f64, 0.0, 0.2].iter().enumerate() {
            // Center the window `offset` below the true edge 42.5.
            let mut rng = stream(k as u64 + 10);
            let plan = plan_sweep(12, 42, 42.5 - offset, 0.25, 8, &dac).unwrap();
            let mut acc = 0.0;
            for _ in 0..reps {
                acc += execute_sweep(&dev, &plan, &mut rng).z;
            }
            means.push(acc / reps as f64);
        }
        // offset = edge - center; E[z] must fall as offset grows.
        assert!(means[0] > means[1] + 0.02, "{means:?}");
        assert!(means[1] > means[2] + 0.02, "{means:?}");
        assert!(means[1].abs() < 0.05, "centered sweep should be near zero: {means:?}");
    }
}
