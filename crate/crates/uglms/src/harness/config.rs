//! Experiment configuration: defaults, the flat key=value file format, and
//! resolution of derived parameters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::adc::DeviceSpec;
use crate::estimator::{default_measurement_variance, EkfConfig};
use crate::stimulus::default_sweep_params;
use crate::{Error, Result};

/// Calibration constant for the synthetic mismatch population: the default
/// unit-capacitor sigma is `SIGMA_UNIT_SCALE / 2^(N/2)`, which keeps the
/// population's INL magnitude resolution-independent and its transfer
/// curves monotone across the supported range.
pub const SIGMA_UNIT_SCALE: f64 = 0.15;

/// Default relative unit-capacitor deviation for an `bits`-bit device.
pub fn default_sigma_unit(bits: u32) -> f64 {
    SIGMA_UNIT_SCALE / 2f64.powf(bits as f64 / 2.0)
}

/// Which parameter a grid run varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAxis {
    Resolution,
    Samples,
    Noise,
}

impl GridAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "resolution" => Ok(GridAxis::Resolution),
            "samples" => Ok(GridAxis::Samples),
            "noise" => Ok(GridAxis::Noise),
            other => Err(Error::InvalidConfig(format!(
                "unknown grid axis {other:?} (expected resolution, samples, or noise)"
            ))),
        }
    }
}

/// Full experiment configuration. Optional fields resolve to mode- or
/// device-dependent defaults at run time; see the field accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Device resolution; defaults to 12 bits in single and histogram
    /// comparison modes and 16 bits in Monte Carlo and non-resolution grids.
    pub bits: Option<u32>,
    pub v_ref_neg: f64,
    pub v_ref_pos: f64,
    pub noise_rms: f64,
    /// Unit-capacitor sigma; defaults to [`default_sigma_unit`].
    pub sigma_unit: Option<f64>,
    /// Iteration budget; defaults to 200, grid mode uses 1000.
    pub iterations: Option<u32>,
    /// Conversions per sweep; defaults to 64, Monte Carlo uses 128, bench
    /// follows its per-resolution rule.
    pub samples: Option<u32>,
    /// Sweep half width; defaults via the noise rule.
    pub half_span: Option<f64>,
    pub extra_bits: u32,
    /// Raw measurement variance `R`; defaults to the averaged sample
    /// variance formula.
    pub measurement_variance: Option<f64>,
    /// Prior scale; defaults to twice the resolved sigma_unit.
    pub sigma_prior: Option<f64>,
    pub tau: f64,
    pub alpha: f64,
    pub pipelined: bool,
    pub epsilon_p: Option<f64>,
    /// Monte Carlo device count.
    pub devices: u32,
    /// Ramp histogram hits per code.
    pub hits_per_code: u32,
    /// Monte Carlo pass limit in LSB for the classification counts.
    pub pass_limit: f64,
    pub axis: Option<GridAxis>,
    /// Explicitly configured axis lists; `None` means the built-in default.
    pub resolutions: Option<Vec<u32>>,
    pub sample_counts: Option<Vec<u32>>,
    pub noise_levels: Option<Vec<f64>>,
    /// Samples per second assumed by the analytic acquisition-time model.
    pub acquisition_rate: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            out_dir: PathBuf::from("uglms-out"),
            bits: None,
            v_ref_neg: 0.0,
            v_ref_pos: 1.0,
            noise_rms: 1.0,
            sigma_unit: None,
            iterations: None,
            samples: None,
            half_span: None,
            extra_bits: 4,
            measurement_variance: None,
            sigma_prior: None,
            tau: 9.0,
            alpha: 1.2,
            pipelined: false,
            epsilon_p: None,
            devices: 100,
            hits_per_code: 128,
            pass_limit: 2.0,
            axis: None,
            resolutions: None,
            sample_counts: None,
            noise_levels: None,
            acquisition_rate: 1e6,
        }
    }
}

impl ExperimentConfig {
    /// Reads a flat `key=value` file. Blank lines and `#` comments are
    /// skipped; `auto` resets an optional key to its default.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        config.apply_file(path)?;
        Ok(config)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        for (key, value) in entries {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Sets one configuration key from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::InvalidConfig(format!("key {key}: cannot parse {value:?}"))
            })
        }
        fn opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
            if value == "auto" {
                Ok(None)
            } else {
                num(key, value).map(Some)
            }
        }
        fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<Vec<T>>> {
            if value == "auto" {
                return Ok(None);
            }
            value
                .split(',')
                .map(|v| num(key, v.trim()))
                .collect::<Result<Vec<T>>>()
                .map(Some)
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "bits" => self.bits = opt(key, value)?,
            "v_ref_neg" => self.v_ref_neg = num(key, value)?,
            "v_ref_pos" => self.v_ref_pos = num(key, value)?,
            "noise_rms" => self.noise_rms = num(key, value)?,
            "sigma_unit" => self.sigma_unit = opt(key, value)?,
            "iterations" => self.iterations = opt(key, value)?,
            "samples" => self.samples = opt(key, value)?,
            "half_span" => self.half_span = opt(key, value)?,
            "extra_bits" => self.extra_bits = num(key, value)?,
            "r" => self.measurement_variance = opt(key, value)?,
            "sigma_prior" => self.sigma_prior = opt(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "pipelined" => self.pipelined = num(key, value)?,
            "epsilon_p" => self.epsilon_p = opt(key, value)?,
            "devices" => self.devices = num(key, value)?,
            "hits_per_code" => self.hits_per_code = num(key, value)?,
            "pass_limit" => self.pass_limit = num(key, value)?,
            "axis" => self.axis = Some(GridAxis::parse(value)?),
            "resolutions" => self.resolutions = list(key, value)?,
            "sample_counts" => self.sample_counts = list(key, value)?,
            "noise_levels" => self.noise_levels = list(key, value)?,
            "acquisition_rate" => self.acquisition_rate = num(key, value)?,
            other => {
                return Err(Error::InvalidConfig(format!("unknown configuration key {other:?}")))
            }
        }
        Ok(())
    }

    pub fn resolved_bits(&self, mode_default: u32) -> u32 {
        self.bits.unwrap_or(mode_default)
    }

    pub fn resolved_iterations(&self, mode_default: u32) -> u32 {
        self.iterations.unwrap_or(mode_default)
    }

    pub fn resolved_samples(&self, mode_default: u32) -> u32 {
        self.samples.unwrap_or(mode_default)
    }

    pub fn resolved_sigma_unit(&self, bits: u32) -> f64 {
        self.sigma_unit.unwrap_or_else(|| default_sigma_unit(bits))
    }

    pub fn resolutions(&self) -> Vec<u32> {
        self.resolutions.clone().unwrap_or_else(|| vec![10, 12, 14, 16, 18])
    }

    pub fn sample_counts(&self) -> Vec<u32> {
        self.sample_counts.clone().unwrap_or_else(|| vec![8, 16, 32, 64, 128])
    }

    pub fn noise_levels(&self) -> Vec<f64> {
        self.noise_levels.clone().unwrap_or_else(|| vec![0.25, 0.5, 1.0, 2.0, 5.0])
    }

    pub fn device_spec(&self, bits: u32, noise_rms: f64) -> Result<DeviceSpec> {
        DeviceSpec::new(bits, self.v_ref_neg, self.v_ref_pos, noise_rms, self.seed)
    }

    /// Estimator configuration for one run cell.
    pub fn ekf_config(
        &self,
        bits: u32,
        noise_rms: f64,
        samples: u32,
        iterations: u32,
    ) -> EkfConfig {
        let sigma_unit = self.resolved_sigma_unit(bits);
        let (default_span, _) = default_sweep_params(noise_rms);
        EkfConfig {
            measurement_variance: self
                .measurement_variance
                .unwrap_or_else(|| default_measurement_variance(noise_rms, samples)),
            // Twice the generator scale, floored so a zero-mismatch study
            // still yields a valid prior.
            sigma_prior: self.sigma_prior.unwrap_or((2.0 * sigma_unit).max(1e-6)),
            tau: self.tau,
            alpha: self.alpha,
            samples,
            half_span: self.half_span.unwrap_or(default_span),
            extra_bits: self.extra_bits,
            pipelined: self.pipelined,
            max_iterations: iterations,
            epsilon_p: self.epsilon_p,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_resolve() {
        let config = ExperimentConfig::default();
        assert_eq!(config.resolved_bits(12), 12);
        assert_eq!(config.resolved_iterations(200), 200);
        let sigma = config.resolved_sigma_unit(16);
        assert!((sigma - 0.15 / 256.0).abs() < 1e-12);
        let ekf = config.ekf_config(12, 1.0, 64, 200);
        assert!((ekf.measurement_variance - (1.0 + 1.0 / 12.0) / 64.0).abs() < 1e-12);
        assert!((ekf.half_span - 0.25).abs() < 1e-12);
        assert!((ekf.sigma_prior - 2.0 * config.resolved_sigma_unit(12)).abs() < 1e-15);
    }

    #[test]
    fn file_parsing_and_overrides() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "# comment").unwrap();
        writeln!(file, "bits = 16").unwrap();
        writeln!(file, "noise_rms=0.5").unwrap();
        writeln!(file, "resolutions=10,12").unwrap();
        writeln!(file, "sigma_unit=auto").unwrap();
        writeln!(file).unwrap();
        let mut config = ExperimentConfig::from_file(file.path()).unwrap();
        assert_eq!(config.bits, Some(16));
        assert_eq!(config.noise_rms, 0.5);
        assert_eq!(config.resolutions(), vec![10, 12]);
        assert_eq!(config.sigma_unit, None);
        // Later explicit sets win over the file, mirroring flag precedence.
        config.set("bits", "12").unwrap();
        assert_eq!(config.resolved_bits(16), 12);
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        let mut config = ExperimentConfig::default();
        assert!(matches!(config.set("nope", "1"), Err(Error::InvalidConfig(_))));
        assert!(matches!(config.set("bits", "twelve"), Err(Error::InvalidConfig(_))));
        assert!(matches!(config.set("axis", "sideways"), Err(Error::InvalidConfig(_))));
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "this line has no equals sign").unwrap();
        assert!(ExperimentConfig::from_file(file.path()).is_err());
    }
}
