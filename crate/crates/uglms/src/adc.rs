//! Behavioral model of a binary-weighted capacitive-DAC SAR ADC.
//!
//! The converter resolves one bit per comparison by searching its internal
//! DAC against the sampled input. Per-bit capacitor mismatch is the only
//! modeled error source besides input-referred comparator noise, so the code
//! edge transfer curve is a smooth rational function of the mismatch vector.
//!
//! Conventions used throughout the crate:
//!
//! * Input positions are expressed in LSB units, `x = (v - v_ref_neg) / LSB`.
//! * The edge between codes `c` and `c + 1` sits at `x = c + 0.5` for an
//!   ideal device.
//! * Bit 0 is the LSB capacitor (one unit), bit `N - 1` the MSB capacitor
//!   (`2^(N-1)` units).

use std::sync::atomic::{AtomicU64, Ordering};

use crate::rng::RngStream;
use crate::{Error, Result};

/// Static description of a converter under test.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSpec {
    /// Resolution in bits.
    pub bits: u32,
    /// Lower reference voltage in volts.
    pub v_ref_neg: f64,
    /// Upper reference voltage in volts.
    pub v_ref_pos: f64,
    /// Input-referred comparator noise, RMS in LSB units.
    pub noise_rms: f64,
    /// Experiment seed the device's streams are derived from.
    pub seed: u64,
}

impl DeviceSpec {
    /// Validates and builds a spec. The production range is 8 to 20 bits;
    /// smaller resolutions down to 2 bits are accepted so that closed-form
    /// behavior stays checkable on hand-sized converters.
    pub fn new(bits: u32, v_ref_neg: f64, v_ref_pos: f64, noise_rms: f64, seed: u64) -> Result<Self> {
        if !(2..=20).contains(&bits) {
            return Err(Error::InvalidSpec(format!("resolution {bits} outside 2..=20 bits")));
        }
        if !v_ref_pos.is_finite() || !v_ref_neg.is_finite() || v_ref_pos <= v_ref_neg {
            return Err(Error::InvalidSpec(format!(
                "v_ref_pos {v_ref_pos} must exceed v_ref_neg {v_ref_neg}"
            )));
        }
        if !noise_rms.is_finite() || noise_rms < 0.0 {
            return Err(Error::InvalidSpec(format!("noise_rms {noise_rms} must be >= 0")));
        }
        Ok(DeviceSpec { bits, v_ref_neg, v_ref_pos, noise_rms, seed })
    }

    /// Full-scale range in volts.
    pub fn fsr(&self) -> f64 {
        self.v_ref_pos - self.v_ref_neg
    }

    /// Size of one quantization step in volts.
    pub fn lsb(&self) -> f64 {
        self.fsr() / (1u64 << self.bits) as f64
    }

    /// Number of output codes.
    pub fn code_count(&self) -> u64 {
        1u64 << self.bits
    }

    /// Number of code edges, one less than the code count.
    pub fn edge_count(&self) -> usize {
        (self.code_count() - 1) as usize
    }
}

/// Per-bit relative capacitor deviations, dimensionless.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchVector {
    theta: Vec<f64>,
}

impl MismatchVector {
    /// Validates that every component is finite and keeps its capacitor
    /// positive (`|theta[i]| < 1`).
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidSpec("mismatch vector must not be empty".into()));
        }
        for (i, t) in theta.iter().enumerate() {
            if !t.is_finite() || t.abs() >= 1.0 {
                return Err(Error::InvalidSpec(format!("theta[{i}] = {t} outside (-1, 1)")));
            }
        }
        Ok(MismatchVector { theta })
    }

    /// The all-zero (ideal) vector for an `bits`-bit device.
    pub fn zeros(bits: u32) -> Self {
        MismatchVector { theta: vec![0.0; bits as usize] }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }
}

impl std::ops::Index<usize> for MismatchVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.theta[i]
    }
}

/// Capacitor weights for a mismatch vector: `w[i] = 2^i * (1 + theta[i])`
/// and the array total including the one-unit dummy capacitor.
pub(crate) fn bit_weights(theta: &[f64]) -> (Vec<f64>, f64) {
    let mut weights = Vec::with_capacity(theta.len());
    let mut total = 1.0; // dummy unit capacitor
    for (i, t) in theta.iter().enumerate() {
        let w = (1u64 << i) as f64 * (1.0 + t);
        weights.push(w);
        total += w;
    }
    (weights, total)
}

/// Sum of the weights selected by the bits of `d`, accumulated from the MSB
/// down. The fixed association order keeps every evaluation route in the
/// crate bit-identical.
pub(crate) fn dac_numerator(weights: &[f64], d: u64) -> f64 {
    let mut acc = 0.0;
    for i in (0..weights.len()).rev() {
        if d >> i & 1 == 1 {
            acc += weights[i];
        }
    }
    acc
}

/// Unvalidated edge evaluation for internal callers that already hold a
/// plausible parameter slice, such as the running filter estimate.
pub(crate) fn edge_position_raw(theta: &[f64], bits: u32, code: u64) -> f64 {
    let (weights, total) = bit_weights(theta);
    let scale = (1u64 << bits) as f64 / total;
    scale * dac_numerator(&weights, code + 1) - 0.5
}

/// Position of the code edge `CE[c]` in LSB units for a device with the
/// given mismatch.
///
/// The edge is the capacitive-DAC level of code `c + 1`, ratioed against the
/// total array capacitance, minus the half-LSB front-end offset that places
/// ideal edges at `c + 0.5`:
///
/// ```text
/// CE[c] = 2^N * D(c + 1) / T - 0.5,   D(d) = sum_i b_i(d) * 2^i * (1 + theta_i)
/// ```
pub fn model_edge(theta: &MismatchVector, bits: u32, code: u64) -> Result<f64> {
    let edges = (1u64 << bits) - 1;
    if theta.len() != bits as usize {
        return Err(Error::DimensionMismatch(format!(
            "mismatch vector has {} components, device has {bits} bits",
            theta.len()
        )));
    }
    if code >= edges {
        return Err(Error::CodeOutOfRange { code, bits });
    }
    Ok(edge_position_raw(theta.as_slice(), bits, code))
}

/// Scan result of [`SarDevice::true_edges`]: bisected edge positions plus
/// any codes whose bracket looked ill-posed on the probe grid.
#[derive(Debug, Clone)]
pub struct TrueEdges {
    /// `2^N - 1` edge positions in LSB units.
    pub edges: Vec<f64>,
    /// Codes flagged because the probe-grid outputs were not non-decreasing
    /// around them. Empty for every device this model can produce.
    pub warnings: Vec<u64>,
}

/// Ground-truth simulated converter.
///
/// Immutable after construction and safe to share across threads; every
/// stochastic operation takes its own [`RngStream`]. A relaxed atomic counts
/// measurement conversions for sample accounting.
#[derive(Debug)]
pub struct SarDevice {
    spec: DeviceSpec,
    theta_true: MismatchVector,
    weights: Vec<f64>,
    total: f64,
    conversions: AtomicU64,
}

impl SarDevice {
    pub fn new(spec: DeviceSpec, theta_true: MismatchVector) -> Result<Self> {
        if theta_true.len() != spec.bits as usize {
            return Err(Error::DimensionMismatch(format!(
                "mismatch vector has {} components, device has {} bits",
                theta_true.len(),
                spec.bits
            )));
        }
        let (weights, total) = bit_weights(theta_true.as_slice());
        // |theta| < 1 already guarantees these, revalidate after derivation.
        if weights.iter().any(|w| *w <= 0.0) || total <= 0.0 {
            return Err(Error::InvalidSpec("derived capacitor weights must be positive".into()));
        }
        Ok(SarDevice { spec, theta_true, weights, total, conversions: AtomicU64::new(0) })
    }

    /// An ideal device with zero mismatch.
    pub fn ideal(spec: DeviceSpec) -> Self {
        let theta = MismatchVector::zeros(spec.bits);
        Self::new(spec, theta).expect("zero mismatch is always valid")
    }

    pub fn spec(&self) -> &DeviceSpec {
        &self.spec
    }

    pub fn theta_true(&self) -> &MismatchVector {
        &self.theta_true
    }

    /// Measurement conversions performed so far.
    pub fn conversions(&self) -> u64 {
        self.conversions.load(Ordering::Relaxed)
    }

    /// DAC level of input word `d` in LSB units, `2^N * D(d) / T`.
    #[cfg(test)]
    fn dac_level(&self, d: u64) -> f64 {
        (1u64 << self.spec.bits) as f64 / self.total * dac_numerator(&self.weights, d)
    }

    /// Core bit-trial search on the shifted input `u = x + 0.5`.
    fn search(&self, u: f64) -> u64 {
        let bits = self.spec.bits;
        let scale = (1u64 << bits) as f64 / self.total;
        let mut code = 0u64;
        let mut kept = 0.0;
        for i in (0..bits).rev() {
            let trial = kept + self.weights[i as usize];
            if u >= scale * trial {
                code |= 1 << i;
                kept = trial;
            }
        }
        code
    }

    /// One measurement conversion of `v_in` volts.
    ///
    /// A single input-referred Gaussian draw of `noise_rms` LSB is added
    /// before the `N` bit trials run MSB to LSB. Inputs outside the
    /// reference range clip to the end codes through the trial logic.
    pub fn convert(&self, v_in: f64, rng: &mut RngStream) -> u64 {
        let x = (v_in - self.spec.v_ref_neg) / self.spec.lsb();
        let u = x + 0.5 + rng.normal(self.spec.noise_rms);
        self.conversions.fetch_add(1, Ordering::Relaxed);
        self.search(u)
    }

    /// Noiseless conversion at position `x` in LSB units. Oracle plumbing,
    /// not counted as a measurement.
    pub fn convert_noiseless(&self, x: f64) -> u64 {
        self.search(x + 0.5)
    }

    /// Ground-truth edge positions found by bisecting the noiseless
    /// transfer curve.
    ///
    /// For each code `c` this locates the smallest `x` producing an output
    /// above `c`, to within `2^-21` LSB. An 8x oversampled probe grid over
    /// `[-1, 2^N + 1]` supplies the brackets and doubles as a monotonicity
    /// check; the greedy bit search makes the transfer non-decreasing even
    /// when mismatch makes the DAC itself non-monotonic, which is exactly
    /// how missing codes appear (two edges collapse onto one input).
    pub fn true_edges(&self) -> TrueEdges {
        let edge_count = self.spec.edge_count();
        let lo = -1.0;
        let points = ((self.spec.code_count() + 2) * 8) as usize + 1;
        let grid_step = 0.125;

        let outputs: Vec<u64> =
            (0..points).map(|i| self.convert_noiseless(lo + grid_step * i as f64)).collect();

        let mut warnings = Vec::new();
        for w in outputs.windows(2) {
            if w[1] < w[0] {
                for c in w[1]..w[0] {
                    warnings.push(c);
                }
            }
        }
        warnings.sort_unstable();
        warnings.dedup();

        let mut edges = Vec::with_capacity(edge_count);
        let mut cursor = 0usize;
        for c in 0..edge_count as u64 {
            while cursor < outputs.len() && outputs[cursor] <= c {
                cursor += 1;
            }
            // The grid covers below code 0 and above the top code, so a
            // bracket always exists.
            let hi_idx = cursor.min(outputs.len() - 1);
            let mut hi = lo + grid_step * hi_idx as f64;
            let mut low = hi - grid_step;
            while hi - low > 0.5f64.powi(21) {
                let mid = 0.5 * (low + hi);
                if self.convert_noiseless(mid) > c {
                    hi = mid;
                } else {
                    low = mid;
                }
            }
            edges.push(0.5 * (low + hi));
        }
        TrueEdges { edges, warnings }
    }
}

/// Draws a mismatch vector with the physical lumped-capacitor law:
/// `theta[i] ~ N(0, sigma_unit^2 / 2^i)`, independent across bits. A
/// `2^i`-unit capacitor averages `2^i` unit deviations, so wider bits are
/// proportionally better matched.
///
/// Components landing outside `(-1, 1)` are redrawn; the redraw count is
/// logged at debug level.
pub fn sample_mismatch(bits: u32, sigma_unit: f64, rng: &mut RngStream) -> Result<MismatchVector> {
    if !sigma_unit.is_finite() || sigma_unit < 0.0 {
        return Err(Error::InvalidSpec(format!("sigma_unit {sigma_unit} must be >= 0")));
    }
    let mut theta = Vec::with_capacity(bits as usize);
    let mut redraws = 0u32;
    for i in 0..bits {
        let std = sigma_unit / ((1u64 << i) as f64).sqrt();
        let mut t = rng.normal(std);
        while t.abs() >= 1.0 {
            redraws += 1;
            t = rng.normal(std);
        }
        theta.push(t);
    }
    if redraws > 0 {
        log::debug!("sample_mismatch redrew {redraws} out-of-range components");
    }
    MismatchVector::new(theta)
}
