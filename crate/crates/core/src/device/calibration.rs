//! Per-channel calibration: sweep the actuator through a range of positions,
//! record steady-state force and fit `force = k * (position - offset)`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DeviceError, PressureDevice};
use crate::stimulus::ChannelId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("no force registered across the sweep (no contact)")]
    NoContact,
    #[error("sensor saturated across the sweep")]
    Saturated,
    #[error("only {0} usable points; need at least 3")]
    InsufficientData(usize),
    #[error("fitted stiffness {0} N/mm is not positive")]
    NonPositiveStiffness(f64),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSweep {
    pub start_mm: f64,
    pub end_mm: f64,
    pub points: u32,
    pub settle_ms: u32,
    /// Force readings averaged at each point.
    pub samples_per_point: u32,
    /// Readings at or above this are treated as saturated.
    pub saturation_n: f64,
    /// Mean readings at or below this count as no contact (sensor noise).
    pub contact_threshold_n: f64,
}

impl Default for CalibrationSweep {
    fn default() -> Self {
        Self {
            start_mm: 1.0,
            end_mm: 20.0,
            points: 20,
            settle_ms: 1500,
            samples_per_point: 10,
            saturation_n: 44.95,
            contact_threshold_n: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelCalibration {
    pub stiffness_n_per_mm: f64,
    /// Position at which the fitted line crosses zero force.
    pub zero_offset_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub channel: ChannelId,
    pub calibration: ChannelCalibration,
    /// RMS of fit residuals over the used points, N.
    pub residual_rms_n: f64,
    pub points_used: usize,
    /// (position mm, mean force N) for every sweep point.
    pub sweep: Vec<(f64, f64)>,
}

/// Ordinary least squares `y = a + b x`.
fn fit_line(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

/// Sweep `channel`, fit stiffness and zero offset, store them on the device.
/// The device should be idle: other channels keep their targets.
pub fn calibrate_channel(
    device: &mut dyn PressureDevice,
    channel: ChannelId,
    sweep: &CalibrationSweep,
) -> Result<CalibrationReport, CalibrationError> {
    if sweep.points < 2
        || sweep.end_mm.partial_cmp(&sweep.start_mm) != Some(Ordering::Greater)
        || sweep.samples_per_point == 0
    {
        return Err(CalibrationError::InvalidSweep(format!("{sweep:?}")));
    }
    let end = sweep.end_mm.min(device.stroke_mm());
    let mut samples = Vec::with_capacity(sweep.points as usize);
    for i in 0..sweep.points {
        let x = sweep.start_mm + (end - sweep.start_mm) * f64::from(i) / f64::from(sweep.points - 1);
        device.set_target(channel, x)?;
        device.wait_ms(sweep.settle_ms)?;
        let mut total = 0.0;
        for _ in 0..sweep.samples_per_point {
            total += device.read_force(channel)?.force_n;
            device.wait_ms(1)?;
        }
        let pos = device.position(channel)?;
        samples.push((pos, total / f64::from(sweep.samples_per_point)));
    }
    device.set_target(channel, 0.0)?;

    if samples.iter().all(|s| s.1 <= sweep.contact_threshold_n) {
        return Err(CalibrationError::NoContact);
    }
    if samples.iter().all(|s| s.1 >= sweep.saturation_n) {
        return Err(CalibrationError::Saturated);
    }
    let used: Vec<(f64, f64)> =
        samples.iter().copied().filter(|s| s.1 > sweep.contact_threshold_n && s.1 < sweep.saturation_n).collect();
    if used.len() < 3 {
        return Err(CalibrationError::InsufficientData(used.len()));
    }
    let (a, b) = fit_line(&used);
    if b.partial_cmp(&0.0) != Some(Ordering::Greater) {
        return Err(CalibrationError::NonPositiveStiffness(b));
    }
    let ss: f64 = used.iter().map(|(x, y)| (y - (a + b * x)).powi(2)).sum();
    let calibration = ChannelCalibration { stiffness_n_per_mm: b, zero_offset_mm: -a / b };
    device.store_calibration(channel, calibration)?;
    Ok(CalibrationReport {
        channel,
        calibration,
        residual_rms_n: (ss / used.len() as f64).sqrt(),
        points_used: used.len(),
        sweep: samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{DeviceParams, SimDevice, DEFAULT_STIFFNESS_N_PER_MM};

    fn ch0() -> ChannelId {
        ChannelId::new(0).unwrap()
    }

    #[test]
    fn recovers_linear_stiffness() {
        let mut d = SimDevice::new(DeviceParams::default(), 4).unwrap();
        let r = calibrate_channel(&mut d, ch0(), &CalibrationSweep::default()).unwrap();
        let k = r.calibration.stiffness_n_per_mm;
        assert!((k / DEFAULT_STIFFNESS_N_PER_MM - 1.0).abs() < 0.02, "k {k}");
        assert!(r.calibration.zero_offset_mm.abs() < 0.3);
        assert_eq!(d.calibration(ch0()), Some(r.calibration));
    }

    #[test]
    fn offset_is_recovered() {
        let mut p = DeviceParams::default();
        p.tissue.contact_offset_mm = 2.0;
        let mut d = SimDevice::new(p, 4).unwrap();
        let r = calibrate_channel(&mut d, ch0(), &CalibrationSweep::default()).unwrap();
        assert!((r.calibration.zero_offset_mm - 2.0).abs() < 0.3, "{:?}", r.calibration);
    }

    #[test]
    fn no_contact_is_error() {
        let mut p = DeviceParams::default();
        p.tissue.contact_offset_mm = 25.0;
        let mut d = SimDevice::new(p, 4).unwrap();
        assert_eq!(calibrate_channel(&mut d, ch0(), &CalibrationSweep::default()), Err(CalibrationError::NoContact));
    }

    #[test]
    fn saturation_is_error() {
        let mut p = DeviceParams::default();
        p.tissue.site_factor[0] = 200.0;
        let mut d = SimDevice::new(p, 4).unwrap();
        assert_eq!(calibrate_channel(&mut d, ch0(), &CalibrationSweep::default()), Err(CalibrationError::Saturated));
    }

    #[test]
    fn cubic_term_raises_residual() {
        let run = |cubic| {
            let mut p = DeviceParams::default();
            p.tissue.cubic_coeff_n_per_mm3 = cubic;
            let mut d = SimDevice::new(p, 4).unwrap();
            calibrate_channel(&mut d, ch0(), &CalibrationSweep::default()).unwrap().residual_rms_n
        };
        let (linear, cubic) = (run(0.0), run(0.002));
        assert!(cubic > linear, "cubic {cubic} linear {linear}");
    }
}
