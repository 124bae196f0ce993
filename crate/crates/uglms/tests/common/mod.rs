#![allow(dead_code)]

use uglms::adc::{sample_mismatch, DeviceSpec, MismatchVector, SarDevice};
use uglms::estimator::{run, EkfConfig, JacobianTable, RunOutcome};
use uglms::harness::default_sigma_unit;
use uglms::metrics::{edges_from_theta, linearity, LinearityReport};
use uglms::rng::{RngStream, StreamKind};

pub struct DeviceRun {
    pub outcome: RunOutcome,
    pub truth: LinearityReport,
    pub estimate: LinearityReport,
    pub conversions: u64,
}

pub fn make_device(seed: u64, bits: u32, noise_rms: f64) -> SarDevice {
    let mut rng = RngStream::new(seed, StreamKind::Mismatch, 0);
    let theta = sample_mismatch(bits, default_sigma_unit(bits), &mut rng).unwrap();
    SarDevice::new(DeviceSpec::new(bits, 0.0, 1.0, noise_rms, seed).unwrap(), theta).unwrap()
}

pub fn standard_config(noise_rms: f64, bits: u32, samples: u32, iterations: u32) -> EkfConfig {
    let mut config = EkfConfig::for_device(noise_rms, default_sigma_unit(bits));
    config.samples = samples;
    config.max_iterations = iterations;
    config.measurement_variance =
        uglms::estimator::default_measurement_variance(noise_rms, samples);
    config
}

/// Full estimation run against a freshly drawn device, with bisection
/// ground truth.
pub fn estimate_device(
    seed: u64,
    bits: u32,
    noise_rms: f64,
    samples: u32,
    iterations: u32,
    with_trace: bool,
) -> DeviceRun {
    let device = make_device(seed, bits, noise_rms);
    estimate_given_device(&device, seed, samples, iterations, with_trace)
}

pub fn estimate_given_device(
    device: &SarDevice,
    seed: u64,
    samples: u32,
    iterations: u32,
    with_trace: bool,
) -> DeviceRun {
    let bits = device.spec().bits;
    let truth = linearity(&device.true_edges().edges).unwrap();
    let table = JacobianTable::precompute(bits).unwrap();
    let config = standard_config(device.spec().noise_rms, bits, samples, iterations);
    let mut rng = RngStream::new(seed, StreamKind::Conversion, 0);
    let outcome =
        run(device, &table, &config, &mut rng, if with_trace { Some(&truth) } else { None })
            .unwrap();
    let estimate =
        linearity(&edges_from_theta(&outcome.state.mismatch().unwrap(), bits).unwrap()).unwrap();
    DeviceRun { outcome, truth, estimate, conversions: device.conversions() }
}

/// A 12-bit device engineered to lose exactly one code at the mid-scale
/// boundary: the MSB weight is solved so the modeled DAC step there is
/// `target_step` LSB (negative past -0 means a collapsed bin).
pub fn missing_code_device(seed: u64, bits: u32, noise_rms: f64, target_step: f64) -> SarDevice {
    let mut rng = RngStream::new(seed, StreamKind::Mismatch, 0);
    let sampled = sample_mismatch(bits, default_sigma_unit(bits), &mut rng).unwrap();
    let mut theta = sampled.as_slice().to_vec();
    let mid_edge = (1u64 << (bits - 1)) - 1;
    let step_for = |msb: f64, theta: &[f64]| -> f64 {
        let mut probe = theta.to_vec();
        probe[bits as usize - 1] = msb;
        let probe = MismatchVector::new(probe).unwrap();
        let hi = uglms::adc::model_edge(&probe, bits, mid_edge).unwrap();
        let lo = uglms::adc::model_edge(&probe, bits, mid_edge - 1).unwrap();
        hi - lo
    };
    // step_for is strictly increasing in the MSB weight; bisect for the
    // target.
    let (mut lo, mut hi) = (-0.01f64, 0.01f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if step_for(mid, &theta) < target_step {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    theta[bits as usize - 1] = 0.5 * (lo + hi);
    let theta = MismatchVector::new(theta).unwrap();
    SarDevice::new(DeviceSpec::new(bits, 0.0, 1.0, noise_rms, seed).unwrap(), theta).unwrap()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
