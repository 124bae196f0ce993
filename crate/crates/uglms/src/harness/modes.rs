//! The five experiment modes behind the CLI subcommands.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use super::config::{ExperimentConfig, GridAxis};
use super::output::{ensure_dir, write_columns, write_lines};
use crate::adc::{sample_mismatch, SarDevice};
use crate::estimator::{self, select_code, EkfState, JacobianTable, TraceRow};
use crate::metrics::{edges_from_theta, linearity, ramp_histogram_test, LinearityReport};
use crate::rng::{RngStream, StreamKind};
use crate::{Error, Result};

/// Everything one estimation run produced.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub bits: u32,
    pub noise_rms: f64,
    pub samples: u32,
    /// One row per executed iteration.
    pub trace: Vec<TraceRow>,
    pub estimate: LinearityReport,
    pub truth: LinearityReport,
    /// Measurement conversions spent, from the device's instrumented
    /// counter.
    pub conversions: u64,
    pub inflations: u64,
    pub selection_time: Duration,
    pub sweep_time: Duration,
    pub wall_time: Duration,
}

impl RunRecord {
    /// Mean wall time of one full-code-range selection scan.
    pub fn selection_mean(&self) -> Duration {
        let iterations = self.trace.len().max(1) as u32;
        self.selection_time / iterations
    }
}

/// Runs the estimator once against a freshly drawn device.
///
/// Streams: the mismatch comes from `(seed, Mismatch, mismatch_index)` and
/// all conversions from `(seed, Conversion, conversion_index)`, so runs
/// sharing indices and parameters are bit-identical across modes.
#[allow(clippy::too_many_arguments)]
fn execute_run(
    config: &ExperimentConfig,
    table: &JacobianTable,
    bits: u32,
    noise_rms: f64,
    samples: u32,
    iterations: u32,
    mismatch_index: u64,
    conversion_index: u64,
    with_deltas: bool,
) -> Result<RunRecord> {
    let sigma_unit = config.resolved_sigma_unit(bits);
    let mut mismatch_rng = RngStream::new(config.seed, StreamKind::Mismatch, mismatch_index);
    let theta = sample_mismatch(bits, sigma_unit, &mut mismatch_rng)?;
    let device = SarDevice::new(config.device_spec(bits, noise_rms)?, theta)?;
    let truth = linearity(&device.true_edges().edges)?;

    let ekf = config.ekf_config(bits, noise_rms, samples, iterations);
    let mut rng = RngStream::new(config.seed, StreamKind::Conversion, conversion_index);
    let started = Instant::now();
    let outcome =
        estimator::run(&device, table, &ekf, &mut rng, if with_deltas { Some(&truth) } else { None })?;
    let wall_time = started.elapsed();

    let estimate = linearity(&edges_from_theta(&outcome.state.mismatch()?, bits)?)?;
    Ok(RunRecord {
        bits,
        noise_rms,
        samples,
        trace: outcome.trace,
        estimate,
        truth,
        conversions: device.conversions(),
        inflations: outcome.state.inflation_count(),
        selection_time: outcome.selection_time,
        sweep_time: outcome.sweep_time,
        wall_time,
    })
}

/// Outcome of [`run_single`].
#[derive(Debug)]
pub struct SingleSummary {
    pub record: RunRecord,
    pub delta_inl_max: f64,
    pub delta_dnl_max: f64,
    pub files: Vec<PathBuf>,
}

/// Single-device run: estimates the device once and writes the true and
/// estimated INL/DNL curves, their absolute deviations, and the
/// per-iteration error traces.
pub fn run_single(config: &ExperimentConfig) -> Result<SingleSummary> {
    let bits = config.resolved_bits(12);
    let iterations = config.resolved_iterations(200);
    let samples = config.resolved_samples(64);
    ensure_dir(&config.out_dir)?;
    let table = JacobianTable::precompute(bits)?;
    let record =
        execute_run(config, &table, bits, config.noise_rms, samples, iterations, 0, 0, true)?;

    let dir = &config.out_dir;
    let indexed = |values: &[f64]| -> Vec<(usize, f64)> {
        values.iter().copied().enumerate().collect()
    };
    let diff = |a: &[f64], b: &[f64]| -> Vec<(usize, f64)> {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).enumerate().collect()
    };
    let mut files = vec![
        write_columns(dir, "true_inl.dat", indexed(&record.truth.inl))?,
        write_columns(dir, "est_inl.dat", indexed(&record.estimate.inl))?,
        write_columns(dir, "diff_inl.dat", diff(&record.estimate.inl, &record.truth.inl))?,
        write_columns(dir, "true_dnl.dat", indexed(&record.truth.dnl))?,
        write_columns(dir, "est_dnl.dat", indexed(&record.estimate.dnl))?,
        write_columns(dir, "diff_dnl.dat", diff(&record.estimate.dnl, &record.truth.dnl))?,
    ];
    files.push(write_columns(
        dir,
        "trace_inl.dat",
        record.trace.iter().map(|row| (row.iteration, row.delta_inl_max.unwrap_or(f64::NAN))),
    )?);
    files.push(write_columns(
        dir,
        "trace_dnl.dat",
        record.trace.iter().map(|row| (row.iteration, row.delta_dnl_max.unwrap_or(f64::NAN))),
    )?);

    let last = record.trace.last();
    let delta_inl_max = last.and_then(|r| r.delta_inl_max).unwrap_or(f64::NAN);
    let delta_dnl_max = last.and_then(|r| r.delta_dnl_max).unwrap_or(f64::NAN);
    println!(
        "single: bits={bits} iterations={} samples={samples} noise={:.2} conversions={} \
         inflations={} max|dINL|={:.4} max|dDNL|={:.4} wall={:.2?} out={}",
        record.trace.len(),
        config.noise_rms,
        record.conversions,
        record.inflations,
        delta_inl_max,
        delta_dnl_max,
        record.wall_time,
        dir.display()
    );
    Ok(SingleSummary { record, delta_inl_max, delta_dnl_max, files })
}

/// One grid cell's convergence result.
#[derive(Debug, Clone)]
pub struct GridCellSummary {
    pub label: String,
    pub bits: u32,
    pub samples: u32,
    pub noise_rms: f64,
    pub final_delta_inl: f64,
    pub final_delta_dnl: f64,
    pub files: Vec<PathBuf>,
}

fn singleton<T: Copy>(name: &str, list: &Option<Vec<T>>) -> Result<Option<T>> {
    match list {
        None => Ok(None),
        Some(values) if values.len() == 1 => Ok(Some(values[0])),
        Some(values) => Err(Error::InvalidConfig(format!(
            "grid mode varies one axis at a time; {name} has {} values",
            values.len()
        ))),
    }
}

/// Sensitivity grid: varies exactly one of resolution, sweep sample count,
/// or noise level, and writes per-iteration worst-case INL/DNL error traces
/// for every cell.
pub fn run_grid(config: &ExperimentConfig) -> Result<Vec<GridCellSummary>> {
    let axis = config.axis.ok_or_else(|| {
        Error::InvalidConfig("grid mode requires axis=resolution, samples, or noise".into())
    })?;
    let iterations = config.resolved_iterations(1000);
    ensure_dir(&config.out_dir)?;

    // (label, bits, samples, noise) per cell; off-axis parameters must not
    // vary.
    let cells: Vec<(String, u32, u32, f64)> = match axis {
        GridAxis::Resolution => {
            let samples =
                singleton("sample_counts", &config.sample_counts)?.unwrap_or(config.resolved_samples(64));
            let noise = singleton("noise_levels", &config.noise_levels)?.unwrap_or(config.noise_rms);
            config
                .resolutions()
                .into_iter()
                .map(|bits| (format!("N{bits}"), bits, samples, noise))
                .collect()
        }
        GridAxis::Samples => {
            let bits = singleton("resolutions", &config.resolutions)?
                .unwrap_or(config.resolved_bits(16));
            let noise = singleton("noise_levels", &config.noise_levels)?.unwrap_or(config.noise_rms);
            config
                .sample_counts()
                .into_iter()
                .map(|samples| (format!("B{samples}"), bits, samples, noise))
                .collect()
        }
        GridAxis::Noise => {
            let bits = singleton("resolutions", &config.resolutions)?
                .unwrap_or(config.resolved_bits(16));
            let samples =
                singleton("sample_counts", &config.sample_counts)?.unwrap_or(config.resolved_samples(64));
            config
                .noise_levels()
                .into_iter()
                .map(|noise| (format!("S{:.0}", noise * 100.0), bits, samples, noise))
                .collect()
        }
    };
    if cells.is_empty() {
        return Err(Error::InvalidConfig("grid axis list is empty".into()));
    }

    let summaries: Result<Vec<GridCellSummary>> = cells
        .into_par_iter()
        .enumerate()
        .map(|(index, (label, bits, samples, noise))| {
            let table = JacobianTable::precompute(bits)?;
            let record = execute_run(
                config,
                &table,
                bits,
                noise,
                samples,
                iterations,
                0,
                index as u64,
                true,
            )?;
            let expect = "grid traces carry deltas";
            let inl_file = write_columns(
                &config.out_dir,
                &format!("inl_deviation_{label}.dat"),
                record.trace.iter().map(|r| (r.iteration, r.delta_inl_max.expect(expect))),
            )?;
            let dnl_file = write_columns(
                &config.out_dir,
                &format!("dnl_deviation_{label}.dat"),
                record.trace.iter().map(|r| (r.iteration, r.delta_dnl_max.expect(expect))),
            )?;
            let last = record.trace.last().expect("at least one iteration");
            Ok(GridCellSummary {
                label,
                bits,
                samples,
                noise_rms: noise,
                final_delta_inl: last.delta_inl_max.expect(expect),
                final_delta_dnl: last.delta_dnl_max.expect(expect),
                files: vec![inl_file, dnl_file],
            })
        })
        .collect();
    let summaries = summaries?;
    for cell in &summaries {
        println!(
            "grid {}: bits={} samples={} noise={:.2} final|dINL|={:.4} final|dDNL|={:.4}",
            cell.label, cell.bits, cell.samples, cell.noise_rms, cell.final_delta_inl,
            cell.final_delta_dnl
        );
    }
    Ok(summaries)
}

/// One Monte Carlo device: reference and estimated INL extremes. The
/// positive peak and the negative peak are compared separately, matching
/// the two plotted series; with near-antisymmetric INL shapes the single
/// signed maximum would flip sign on estimation noise alone.
#[derive(Debug, Clone, Copy)]
pub struct McRow {
    pub device: u32,
    pub reference_positive: f64,
    pub estimate_positive: f64,
    pub reference_negative: f64,
    pub estimate_negative: f64,
}

impl McRow {
    /// Worst error over the device's two extreme comparisons.
    pub fn max_abs_error(&self) -> f64 {
        (self.estimate_positive - self.reference_positive)
            .abs()
            .max((self.estimate_negative - self.reference_negative).abs())
    }
}

/// Monte Carlo aggregate with the correlation rows and the classification
/// against the pass limits.
#[derive(Debug)]
pub struct McSummary {
    pub rows: Vec<McRow>,
    pub max_abs_error: f64,
    pub mean_error: f64,
    pub pass_limit: f64,
    pub both_pass: u32,
    pub yield_loss: u32,
    pub escape: u32,
    pub bad_unit: u32,
    pub files: Vec<PathBuf>,
}

/// Statistical accuracy study over independently drawn devices; each device
/// owns its mismatch and noise streams, so the row set for the first `k`
/// devices does not depend on the configured count.
pub fn run_montecarlo(config: &ExperimentConfig) -> Result<McSummary> {
    if config.devices == 0 {
        return Err(Error::InvalidConfig("montecarlo needs at least one device".into()));
    }
    let bits = config.resolved_bits(16);
    let iterations = config.resolved_iterations(200);
    let samples = config.resolved_samples(128);
    ensure_dir(&config.out_dir)?;
    let table = JacobianTable::precompute(bits)?;

    let rows: Result<Vec<McRow>> = (0..config.devices)
        .into_par_iter()
        .map(|device| {
            let record = execute_run(
                config,
                &table,
                bits,
                config.noise_rms,
                samples,
                iterations,
                device as u64,
                device as u64,
                false,
            )?;
            Ok(McRow {
                device,
                reference_positive: record.truth.inl_peak_positive,
                estimate_positive: record.estimate.inl_peak_positive,
                reference_negative: record.truth.inl_peak_negative,
                estimate_negative: record.estimate.inl_peak_negative,
            })
        })
        .collect();
    let rows = rows?;

    let mut max_abs_error = 0.0f64;
    let mut error_sum = 0.0f64;
    let (mut both_pass, mut yield_loss, mut escape, mut bad_unit) = (0u32, 0u32, 0u32, 0u32);
    for row in &rows {
        max_abs_error = max_abs_error.max(row.max_abs_error());
        error_sum += (row.estimate_positive - row.reference_positive)
            + (row.estimate_negative - row.reference_negative);
        let ref_ok = row.reference_positive.abs().max(row.reference_negative.abs())
            <= config.pass_limit;
        let est_ok =
            row.estimate_positive.abs().max(row.estimate_negative.abs()) <= config.pass_limit;
        match (ref_ok, est_ok) {
            (true, true) => both_pass += 1,
            (true, false) => yield_loss += 1,
            (false, true) => escape += 1,
            (false, false) => bad_unit += 1,
        }
    }
    let mean_error = error_sum / (2 * rows.len()) as f64;

    let dir = &config.out_dir;
    let files = vec![
        write_lines(
            dir,
            "inl_statistic_pos.dat",
            rows.iter().map(|r| format!("{:.6} {:.6}", r.reference_positive, r.estimate_positive)),
        )?,
        write_lines(
            dir,
            "inl_statistic_neg.dat",
            rows.iter().map(|r| format!("{:.6} {:.6}", r.reference_negative, r.estimate_negative)),
        )?,
        write_lines(
            dir,
            "mc_summary.txt",
            [
                format!("devices {}", rows.len()),
                format!("bits {bits}"),
                format!("iterations {iterations}"),
                format!("samples {samples}"),
                format!("max_abs_error {max_abs_error:.6}"),
                format!("mean_error {mean_error:.6}"),
                format!("pass_limit {:.3}", config.pass_limit),
                format!("both_pass {both_pass}"),
                format!("yield_loss {yield_loss}"),
                format!("escape {escape}"),
                format!("bad_unit {bad_unit}"),
            ],
        )?,
    ];
    println!(
        "montecarlo: devices={} bits={bits} max|err|={max_abs_error:.4} mean={mean_error:+.4} \
         pass={both_pass} yield_loss={yield_loss} escape={escape} bad={bad_unit} out={}",
        rows.len(),
        dir.display()
    );
    Ok(McSummary {
        rows,
        max_abs_error,
        mean_error,
        pass_limit: config.pass_limit,
        both_pass,
        yield_loss,
        escape,
        bad_unit,
        files,
    })
}

/// Timing of code selection at one resolution.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub bits: u32,
    pub samples: u32,
    pub iterations: u32,
    /// Mean wall time of one full-code-range selection scan, warmup
    /// excluded.
    pub per_selection: Duration,
    /// `per_selection` scaled to the configured iteration count.
    pub selection_total: Duration,
    /// Analytic sweep acquisition time at the configured sample rate.
    pub acquisition_total: Duration,
    pub total: Duration,
    /// Coefficient of variation of the timed selections.
    pub cv: f64,
    pub file: PathBuf,
}

/// Selection-cost scaling study. Runs the real estimation loop per
/// resolution and times each selection scan; the first five iterations warm
/// caches and are excluded from the statistics. Emitted data files carry
/// the deterministic selection history; measured times go to stdout.
pub fn bench_selection(config: &ExperimentConfig) -> Result<Vec<BenchRow>> {
    let resolutions = config.resolutions();
    if resolutions.is_empty() {
        return Err(Error::InvalidConfig("bench needs a non-empty resolutions list".into()));
    }
    let iterations = config.resolved_iterations(200);
    // At least 50 timed iterations after 5 warmups.
    let executed = iterations.max(55);
    ensure_dir(&config.out_dir)?;

    let mut rows = Vec::new();
    for (index, bits) in resolutions.iter().copied().enumerate() {
        let samples = config.samples.unwrap_or(if bits <= 12 { 64 } else { 128 });
        let sigma_unit = config.resolved_sigma_unit(bits);
        let mut mismatch_rng = RngStream::new(config.seed, StreamKind::Mismatch, 0);
        let theta = sample_mismatch(bits, sigma_unit, &mut mismatch_rng)?;
        let device = SarDevice::new(config.device_spec(bits, config.noise_rms)?, theta)?;
        let table = JacobianTable::precompute(bits)?;
        let ekf = config.ekf_config(bits, config.noise_rms, samples, executed);
        ekf.validate()?;
        let r_eff = ekf.effective_measurement_variance(config.noise_rms);
        let mut rng = RngStream::new(config.seed, StreamKind::Conversion, index as u64);
        let mut state = EkfState::new(bits, ekf.sigma_prior);

        let mut timed = Vec::with_capacity(executed as usize);
        let mut history = Vec::with_capacity(executed as usize);
        for k in 0..executed {
            let started = Instant::now();
            let code = select_code(&state, &table, r_eff);
            let elapsed = started.elapsed();
            if k >= 5 {
                timed.push(elapsed.as_secs_f64());
            }
            history.push((k + 1, code));
            estimator::probe_code(&mut state, &device, &table, &ekf, &mut rng, code)?;
        }
        let mean = timed.iter().sum::<f64>() / timed.len() as f64;
        let var = timed.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / timed.len() as f64;
        let cv = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
        let per_selection = Duration::from_secs_f64(mean);
        let selection_total = Duration::from_secs_f64(mean * iterations as f64);
        let acquisition_total = Duration::from_secs_f64(
            iterations as f64 * samples as f64 / config.acquisition_rate,
        );
        let file = write_lines(
            &config.out_dir,
            &format!("bench_selected_N{bits}.dat"),
            history.iter().map(|(k, c)| format!("{k} {c}")),
        )?;
        rows.push(BenchRow {
            bits,
            samples,
            iterations,
            per_selection,
            selection_total,
            acquisition_total,
            total: selection_total + acquisition_total,
            cv,
            file,
        });
    }

    println!("bench: {} iterations per resolution, timing excludes 5 warmups", iterations);
    println!("resolution samples per_selection selection_total acquisition total cv");
    for row in &rows {
        println!(
            "{:>9}b {:>7} {:>13.1?} {:>15.1?} {:>11.1?} {:>7.1?} {:>5.2}",
            row.bits,
            row.samples,
            row.per_selection,
            row.selection_total,
            row.acquisition_total,
            row.total,
            row.cv
        );
    }
    if let Some(first) = rows.first() {
        let base = first.per_selection.as_secs_f64();
        let ratios: Vec<String> = rows
            .iter()
            .map(|r| format!("t({})/t({})={:.1}", r.bits, first.bits, r.per_selection.as_secs_f64() / base))
            .collect();
        println!("scaling: {}", ratios.join(" "));
    }
    Ok(rows)
}

/// Outcome of [`run_rht_compare`].
#[derive(Debug)]
pub struct RhtSummary {
    pub bits: u32,
    pub adaptive_conversions: u64,
    pub histogram_conversions: u64,
    pub adaptive_delta_inl: f64,
    pub histogram_delta_inl: f64,
    pub adaptive_delta_dnl: f64,
    pub histogram_delta_dnl: f64,
    pub adaptive_wall: Duration,
    pub histogram_wall: Duration,
    pub files: Vec<PathBuf>,
}

/// Runs the adaptive estimator and a full ramp histogram test on the same
/// device and writes both INL/DNL estimates for overlay plotting.
pub fn run_rht_compare(config: &ExperimentConfig) -> Result<RhtSummary> {
    let bits = config.resolved_bits(12);
    let iterations = config.resolved_iterations(200);
    let samples = config.resolved_samples(64);
    ensure_dir(&config.out_dir)?;
    let table = JacobianTable::precompute(bits)?;

    let record =
        execute_run(config, &table, bits, config.noise_rms, samples, iterations, 0, 0, false)?;
    let adaptive_conversions = record.conversions;

    // Same device draw, fresh instance to keep the conversion accounting
    // separate.
    let sigma_unit = config.resolved_sigma_unit(bits);
    let mut mismatch_rng = RngStream::new(config.seed, StreamKind::Mismatch, 0);
    let theta = sample_mismatch(bits, sigma_unit, &mut mismatch_rng)?;
    let device = SarDevice::new(config.device_spec(bits, config.noise_rms)?, theta)?;
    let mut ramp_rng = RngStream::new(config.seed, StreamKind::Ramp, 0);
    let started = Instant::now();
    let histogram = ramp_histogram_test(&device, config.hits_per_code, &mut ramp_rng)?;
    let histogram_wall = started.elapsed();
    let histogram_conversions = device.conversions();

    let truth = &record.truth;
    let adaptive_cmp = crate::metrics::compare(&record.estimate, truth)?;
    let histogram_cmp = crate::metrics::compare(&histogram, truth)?;

    let dir = &config.out_dir;
    let indexed = |values: &[f64]| -> Vec<(usize, f64)> {
        values.iter().copied().enumerate().collect()
    };
    let files = vec![
        write_columns(dir, "est_inl.dat", indexed(&record.estimate.inl))?,
        write_columns(dir, "est_dnl.dat", indexed(&record.estimate.dnl))?,
        write_columns(dir, "hist_est_inl.dat", indexed(&histogram.inl))?,
        write_columns(dir, "hist_est_dnl.dat", indexed(&histogram.dnl))?,
        write_lines(
            dir,
            "rht_summary.txt",
            [
                format!("bits {bits}"),
                format!("adaptive_conversions {adaptive_conversions}"),
                format!("histogram_conversions {histogram_conversions}"),
                format!("adaptive_delta_inl_max {:.6}", adaptive_cmp.delta_inl_max),
                format!("histogram_delta_inl_max {:.6}", histogram_cmp.delta_inl_max),
                format!("adaptive_delta_dnl_max {:.6}", adaptive_cmp.delta_dnl_max),
                format!("histogram_delta_dnl_max {:.6}", histogram_cmp.delta_dnl_max),
            ],
        )?,
    ];
    println!(
        "rht: bits={bits} adaptive {} conversions (|dINL| {:.4}, wall {:.2?}) vs histogram {} \
         conversions (|dINL| {:.4}, wall {:.2?}) out={}",
        adaptive_conversions,
        adaptive_cmp.delta_inl_max,
        record.wall_time,
        histogram_conversions,
        histogram_cmp.delta_inl_max,
        histogram_wall,
        dir.display()
    );
    Ok(RhtSummary {
        bits,
        adaptive_conversions,
        histogram_conversions,
        adaptive_delta_inl: adaptive_cmp.delta_inl_max,
        histogram_delta_inl: histogram_cmp.delta_inl_max,
        adaptive_delta_dnl: adaptive_cmp.delta_dnl_max,
        histogram_delta_dnl: histogram_cmp.delta_dnl_max,
        adaptive_wall: record.wall_time,
        histogram_wall,
        files,
    })
}
