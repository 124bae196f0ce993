//! Static linearity metrics: code edges to DNL/INL, report comparison, and
//! the ramp histogram baseline.
//!
//! DNL at code `c` is the deviation of the quantization interval above it
//! from one LSB, `DNL[c] = CE[c+1] - CE[c] - 1`. INL is the deviation of
//! each edge from its ideal position after endpoint correction: the line
//! through the first and last measured edges is removed, which zeroes the
//! INL at both ends and makes the result invariant under offset and gain.

use crate::adc::{bit_weights, MismatchVector, SarDevice};
use crate::rng::RngStream;
use crate::{Error, Result};

/// Edge positions with their derived linearity metrics, all in LSB units.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearityReport {
    /// `2^N - 1` code edge positions.
    pub edges: Vec<f64>,
    /// `2^N - 2` differential nonlinearity values.
    pub dnl: Vec<f64>,
    /// `2^N - 1` endpoint-corrected integral nonlinearity values.
    pub inl: Vec<f64>,
    pub max_abs_dnl: f64,
    pub max_abs_inl: f64,
    /// INL value at the code of largest magnitude, sign preserved. Used for
    /// correlation plots.
    pub max_inl_signed: f64,
    /// Largest INL value (the positive peak; zero if the curve never goes
    /// positive past the endpoints).
    pub inl_peak_positive: f64,
    /// Smallest INL value (the negative peak).
    pub inl_peak_negative: f64,
    /// Codes whose bin width collapsed to zero or below (DNL at or under -1).
    pub missing_codes: Vec<u64>,
}

/// Unvalidated bulk edge evaluation over a raw parameter slice.
pub(crate) fn edges_from_theta_raw(theta: &[f64], bits: u32) -> Vec<f64> {
    let (weights, total) = bit_weights(theta);
    let scale = (1u64 << bits) as f64 / total;
    let words = 1usize << bits;
    // numerators[d] = sum of weights over the set bits of d, built by
    // stripping the lowest set bit; the recursion adds weights MSB first
    // and therefore associates exactly like the per-code closed form.
    let mut numerators = vec![0.0f64; words];
    for d in 1..words {
        numerators[d] = numerators[d & (d - 1)] + weights[d.trailing_zeros() as usize];
    }
    (1..words).map(|d| scale * numerators[d] - 0.5).collect()
}

/// Evaluates the edge function for every code of an `bits`-bit device.
///
/// Costs one add per code via a shared subset-sum table and matches the
/// per-code closed form bit for bit.
pub fn edges_from_theta(theta: &MismatchVector, bits: u32) -> Result<Vec<f64>> {
    if theta.len() != bits as usize {
        return Err(Error::DimensionMismatch(format!(
            "mismatch vector has {} components, device has {bits} bits",
            theta.len()
        )));
    }
    Ok(edges_from_theta_raw(theta.as_slice(), bits))
}

/// Derives DNL and endpoint-corrected INL from a set of code edges.
pub fn linearity(edges: &[f64]) -> Result<LinearityReport> {
    if edges.len() < 2 {
        return Err(Error::DimensionMismatch(format!(
            "need at least 2 edges, got {}",
            edges.len()
        )));
    }
    let dnl: Vec<f64> = edges.windows(2).map(|w| w[1] - w[0] - 1.0).collect();

    // Raw deviation from the ideal edge, then remove the line through the
    // first and last points. The form (raw - raw0) - span * t is exactly
    // zero at both ends.
    let n = edges.len();
    let raw: Vec<f64> = edges.iter().enumerate().map(|(c, e)| e - (c as f64 + 0.5)).collect();
    let span = raw[n - 1] - raw[0];
    let denom = (n - 1) as f64;
    let inl: Vec<f64> =
        raw.iter().enumerate().map(|(c, r)| (r - raw[0]) - span * (c as f64 / denom)).collect();

    let max_abs_dnl = dnl.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let mut max_abs_inl = 0.0f64;
    let mut max_inl_signed = 0.0f64;
    let mut inl_peak_positive = 0.0f64;
    let mut inl_peak_negative = 0.0f64;
    for v in &inl {
        if v.abs() > max_abs_inl {
            max_abs_inl = v.abs();
            max_inl_signed = *v;
        }
        inl_peak_positive = inl_peak_positive.max(*v);
        inl_peak_negative = inl_peak_negative.min(*v);
    }
    let missing_codes: Vec<u64> = dnl
        .iter()
        .enumerate()
        .filter(|(_, d)| **d <= -1.0 + 1e-9)
        .map(|(c, _)| c as u64 + 1)
        .collect();

    Ok(LinearityReport {
        edges: edges.to_vec(),
        dnl,
        inl,
        max_abs_dnl,
        max_abs_inl,
        max_inl_signed,
        inl_peak_positive,
        inl_peak_negative,
        missing_codes,
    })
}

/// Per-code differences between an estimated and a reference report.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub delta_inl_max: f64,
    pub delta_dnl_max: f64,
    pub inl_delta: Vec<f64>,
    pub dnl_delta: Vec<f64>,
}

/// Largest per-code INL and DNL estimation errors between two reports.
pub fn compare(est: &LinearityReport, truth: &LinearityReport) -> Result<Comparison> {
    if est.edges.len() != truth.edges.len() {
        return Err(Error::DimensionMismatch(format!(
            "report sizes differ: {} vs {}",
            est.edges.len(),
            truth.edges.len()
        )));
    }
    let inl_delta: Vec<f64> =
        est.inl.iter().zip(&truth.inl).map(|(a, b)| (a - b).abs()).collect();
    let dnl_delta: Vec<f64> =
        est.dnl.iter().zip(&truth.dnl).map(|(a, b)| (a - b).abs()).collect();
    let delta_inl_max = inl_delta.iter().fold(0.0f64, |m, d| m.max(*d));
    let delta_dnl_max = dnl_delta.iter().fold(0.0f64, |m, d| m.max(*d));
    Ok(Comparison { delta_inl_max, delta_dnl_max, inl_delta, dnl_delta })
}

/// Classic ramp histogram test against an ideal linear stimulus.
///
/// A uniform ramp of `2^N * hits_per_code` points spans half an LSB beyond
/// both ends of the transfer curve, so each interior code ideally collects
/// `hits_per_code` samples. Edges are read off the cumulative histogram,
/// which keeps the unbounded end bins out of the DNL; linearity then follows
/// the same endpoint-corrected path as the model-based estimate.
pub fn ramp_histogram_test(
    device: &SarDevice,
    hits_per_code: u32,
    rng: &mut RngStream,
) -> Result<LinearityReport> {
    if hits_per_code == 0 {
        return Err(Error::InvalidConfig("hits_per_code must be at least 1".into()));
    }
    let spec = device.spec();
    let codes = spec.code_count();
    let total = codes * hits_per_code as u64;
    let lo = -0.5f64;
    let span = codes as f64;

    let mut counts = vec![0u64; codes as usize];
    for j in 0..total {
        let x = lo + (j as f64 + 0.5) * span / total as f64;
        let v = spec.v_ref_neg + x * spec.lsb();
        let y = device.convert(v, rng);
        counts[y as usize] += 1;
    }

    let mut edges = Vec::with_capacity(spec.edge_count());
    let mut cumulative = 0u64;
    for count in counts.iter().take(spec.edge_count()) {
        cumulative += count;
        edges.push(lo + cumulative as f64 / hits_per_code as f64);
    }
    linearity(&edges)
}
