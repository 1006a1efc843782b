//! Simulated multi-channel pressure device.
//!
//! Each channel is a position-controlled linear actuator pressing a tactor
//! into tissue. The actuator follows a PD law toward its target through a
//! first-order velocity lag and a speed limit; tissue reaction force is a
//! polynomial in indentation; the sensor adds noise, quantizes and clips.

mod calibration;
mod link;
mod wire;

pub use calibration::{calibrate_channel, CalibrationError, CalibrationReport, CalibrationSweep, ChannelCalibration};
pub use link::{ActorTransport, DeviceActor, LinkError, Loopback, SimPeripheral, Transport, WireClient};
pub use wire::{
    crc8_atm, decode_frame, encode_frame, AckData, Command, Frame, FrameError, NakCode, FORCE_CONTROL_OPCODES,
    MAX_FRAME_LEN, MAX_PAYLOAD, SYNC,
};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SimRng;
use crate::stimulus::{ChannelId, DEFAULT_STROKE_MM, MAX_CHANNELS};

/// Force at the ASR reference divided by its position.
pub const DEFAULT_STIFFNESS_N_PER_MM: f64 = 4.3 / 10.4;
pub const SENSOR_RANGE_N: f64 = 45.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("channel {0} does not exist on this device")]
    UnknownChannel(u8),
    #[error("invalid device parameter {field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("target {0} mm is not a finite non-negative position")]
    InvalidTarget(f64),
    #[error("link error: {0}")]
    Link(String),
    #[error("peripheral rejected command: {0:?}")]
    Rejected(NakCode),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    /// Commanded speed per mm of position error, 1/s.
    pub kp: f64,
    /// Velocity damping, dimensionless.
    pub kd: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self { kp: 20.0, kd: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActuatorParams {
    pub stroke_mm: f64,
    pub max_speed_mm_s: f64,
    pub time_constant_s: f64,
    pub gains: PdGains,
    pub tick_rate_hz: u32,
}

impl Default for ActuatorParams {
    fn default() -> Self {
        Self {
            stroke_mm: DEFAULT_STROKE_MM,
            max_speed_mm_s: 15.0,
            time_constant_s: 0.05,
            gains: PdGains::default(),
            tick_rate_hz: 1000,
        }
    }
}

impl ActuatorParams {
    pub fn dt_s(&self) -> f64 {
        1.0 / f64::from(self.tick_rate_hz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TissueParams {
    pub contact_offset_mm: f64,
    pub linear_stiffness_n_per_mm: f64,
    pub cubic_coeff_n_per_mm3: f64,
    /// Per-channel stiffness multiplier.
    pub site_factor: [f64; MAX_CHANNELS],
}

impl Default for TissueParams {
    fn default() -> Self {
        Self {
            contact_offset_mm: 0.0,
            linear_stiffness_n_per_mm: DEFAULT_STIFFNESS_N_PER_MM,
            cubic_coeff_n_per_mm3: 0.0,
            site_factor: [1.0; MAX_CHANNELS],
        }
    }
}

impl TissueParams {
    /// Reaction force at `position_mm`, before the sensor.
    pub fn force_n(&self, channel: ChannelId, position_mm: f64) -> f64 {
        let d = (position_mm - self.contact_offset_mm).max(0.0);
        self.site_factor[channel.index()]
            * (self.linear_stiffness_n_per_mm * d + self.cubic_coeff_n_per_mm3 * d * d * d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorParams {
    pub resolution_n: f64,
    pub noise_sd_n: f64,
    pub range_n: f64,
}

impl Default for SensorParams {
    fn default() -> Self {
        Self { resolution_n: 0.05, noise_sd_n: 0.05, range_n: SENSOR_RANGE_N }
    }
}

impl SensorParams {
    /// Quantize to the sensor resolution, then clip to the range.
    pub fn condition(&self, force_n: f64) -> f64 {
        let q = (force_n / self.resolution_n).round() * self.resolution_n;
        q.clamp(0.0, self.range_n)
    }
}

/// Two-tactor geometry; stored, not simulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TactorGeometry {
    pub diameter_mm: f64,
    pub edge_gap_mm: f64,
}

impl Default for TactorGeometry {
    fn default() -> Self {
        Self { diameter_mm: 15.0, edge_gap_mm: 6.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceParams {
    pub channels: u8,
    pub actuator: ActuatorParams,
    pub tissue: TissueParams,
    pub sensor: SensorParams,
    pub geometry: TactorGeometry,
}

impl Default for DeviceParams {
    fn default() -> Self {
        Self {
            channels: 2,
            actuator: ActuatorParams::default(),
            tissue: TissueParams::default(),
            sensor: SensorParams::default(),
            geometry: TactorGeometry::default(),
        }
    }
}

impl DeviceParams {
    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |field, message: String| Err(DeviceError::Invalid { field, message });
        if self.channels == 0 || usize::from(self.channels) > MAX_CHANNELS {
            return bad("channels", format!("must lie in 1..={MAX_CHANNELS}, got {}", self.channels));
        }
        let a = &self.actuator;
        for (field, v) in [
            ("stroke_mm", a.stroke_mm),
            ("max_speed_mm_s", a.max_speed_mm_s),
            ("time_constant_s", a.time_constant_s),
            ("gains.kp", a.gains.kp),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(field, format!("must be positive, got {v}"));
            }
        }
        if !(a.gains.kd.is_finite() && a.gains.kd >= 0.0) {
            return bad("gains.kd", format!("must be >= 0, got {}", a.gains.kd));
        }
        if a.tick_rate_hz == 0 {
            return bad("tick_rate_hz", "must be positive".into());
        }
        if a.time_constant_s < a.dt_s() {
            return bad("time_constant_s", format!("must be at least one tick ({} s)", a.dt_s()));
        }
        let t = &self.tissue;
        if !(t.contact_offset_mm >= 0.0 && t.linear_stiffness_n_per_mm >= 0.0 && t.cubic_coeff_n_per_mm3 >= 0.0) {
            return bad("tissue", "offset and coefficients must be >= 0".into());
        }
        if t.linear_stiffness_n_per_mm + t.cubic_coeff_n_per_mm3 <= 0.0 {
            return bad("tissue", "force model must increase beyond contact".into());
        }
        if t.site_factor.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return bad("site_factor", "must be positive".into());
        }
        let s = &self.sensor;
        if !(s.resolution_n > 0.0 && s.noise_sd_n >= 0.0 && s.range_n > 0.0) {
            return bad("sensor", "resolution and range must be positive, noise >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceSample {
    pub channel: ChannelId,
    pub t_ms: u64,
    pub force_n: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub target_mm: f64,
    pub position_mm: f64,
    pub velocity_mm_s: f64,
    pub gains: PdGains,
}

/// Leader-side view of a device: the simulation or a wire-protocol client.
pub trait PressureDevice {
    fn channel_count(&self) -> usize;
    fn stroke_mm(&self) -> f64;
    fn set_target(&mut self, channel: ChannelId, mm: f64) -> Result<(), DeviceError>;
    fn position(&mut self, channel: ChannelId) -> Result<f64, DeviceError>;
    fn read_force(&mut self, channel: ChannelId) -> Result<ForceSample, DeviceError>;
    fn set_gains(&mut self, channel: ChannelId, gains: PdGains) -> Result<(), DeviceError>;
    /// Let `ms` of device time pass.
    fn wait_ms(&mut self, ms: u32) -> Result<(), DeviceError>;
    fn now_ms(&self) -> u64;
    fn store_calibration(&mut self, channel: ChannelId, cal: ChannelCalibration) -> Result<(), DeviceError>;
}

/// Deterministic simulation advanced in logical ticks.
#[derive(Debug, Clone)]
pub struct SimDevice {
    params: DeviceParams,
    channels: Vec<ChannelState>,
    calibration: Vec<Option<ChannelCalibration>>,
    ticks: u64,
    noise: SimRng,
}

impl SimDevice {
    pub fn new(params: DeviceParams, noise_seed: u64) -> Result<Self, DeviceError> {
        params.validate()?;
        let n = usize::from(params.channels);
        let state = ChannelState { target_mm: 0.0, position_mm: 0.0, velocity_mm_s: 0.0, gains: params.actuator.gains };
        Ok(Self {
            channels: vec![state; n],
            calibration: vec![None; n],
            params,
            ticks: 0,
            noise: SimRng::seed_from_u64(noise_seed),
        })
    }

    pub fn params(&self) -> &DeviceParams {
        &self.params
    }

    pub fn channel(&self, channel: ChannelId) -> Result<&ChannelState, DeviceError> {
        self.channels.get(channel.index()).ok_or(DeviceError::UnknownChannel(channel.raw()))
    }

    fn channel_mut(&mut self, channel: ChannelId) -> Result<&mut ChannelState, DeviceError> {
        self.channels.get_mut(channel.index()).ok_or(DeviceError::UnknownChannel(channel.raw()))
    }

    pub fn calibration(&self, channel: ChannelId) -> Option<ChannelCalibration> {
        self.calibration.get(channel.index()).copied().flatten()
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    /// Advance every channel one tick.
    pub fn tick(&mut self) {
        let a = &self.params.actuator;
        let dt = a.dt_s();
        let alpha = dt / a.time_constant_s;
        for ch in &mut self.channels {
            ch.step(a.stroke_mm, a.max_speed_mm_s, alpha, dt);
        }
        self.ticks += 1;
    }

    pub fn run_ticks(&mut self, n: u64) {
        for _ in 0..n {
            self.tick();
        }
    }

    pub fn ticks_for_ms(&self, ms: u32) -> u64 {
        u64::from(ms) * u64::from(self.params.actuator.tick_rate_hz) / 1000
    }

    /// Tissue force at the current position, without sensor effects.
    pub fn true_force_n(&self, channel: ChannelId) -> Result<f64, DeviceError> {
        let pos = self.channel(channel)?.position_mm;
        Ok(self.params.tissue.force_n(channel, pos))
    }

    /// Sensor reading without noise.
    pub fn clean_force_n(&self, channel: ChannelId) -> Result<f64, DeviceError> {
        Ok(self.params.sensor.condition(self.true_force_n(channel)?))
    }

    /// Steady-state sensor reading (noise-free) at a given position.
    pub fn steady_force_n(&self, channel: ChannelId, position_mm: f64) -> Result<f64, DeviceError> {
        self.channel(channel)?;
        let pos = position_mm.clamp(0.0, self.params.actuator.stroke_mm);
        Ok(self.params.sensor.condition(self.params.tissue.force_n(channel, pos)))
    }

    /// Run until every channel is within `band` of its target for `hold_ticks`
    /// consecutive ticks; returns the elapsed time in ms or `None` after
    /// `max_ticks`.
    pub fn settle(&mut self, band_mm: f64, hold_ticks: u64, max_ticks: u64) -> Option<f64> {
        let start = self.ticks;
        let mut inside_since: Option<u64> = None;
        while self.ticks - start < max_ticks {
            self.tick();
            let inside = self.channels.iter().all(|c| {
                let goal = c.target_mm.min(self.params.actuator.stroke_mm);
                (c.position_mm - goal).abs() <= band_mm
            });
            match (inside, inside_since) {
                (true, None) => inside_since = Some(self.ticks),
                (false, _) => inside_since = None,
                _ => {}
            }
            if let Some(since) = inside_since {
                if self.ticks - since + 1 >= hold_ticks {
                    let ticks = since - start;
                    return Some(ticks as f64 * 1000.0 / f64::from(self.params.actuator.tick_rate_hz));
                }
            }
        }
        None
    }
}

impl ChannelState {
    fn step(&mut self, stroke: f64, vmax: f64, alpha: f64, dt: f64) {
        let error = self.target_mm - self.position_mm;
        let wanted = (self.gains.kp * error - self.gains.kd * self.velocity_mm_s).clamp(-vmax, vmax);
        self.velocity_mm_s += (wanted - self.velocity_mm_s) * alpha;
        let next = self.position_mm + self.velocity_mm_s * dt;
        if next >= stroke {
            self.position_mm = stroke;
            self.velocity_mm_s = self.velocity_mm_s.min(0.0);
        } else if next <= 0.0 {
            self.position_mm = 0.0;
            self.velocity_mm_s = self.velocity_mm_s.max(0.0);
        } else {
            self.position_mm = next;
        }
    }
}

impl PressureDevice for SimDevice {
    fn channel_count(&self) -> usize {
        self.channels.len()
    }

    fn stroke_mm(&self) -> f64 {
        self.params.actuator.stroke_mm
    }

    fn set_target(&mut self, channel: ChannelId, mm: f64) -> Result<(), DeviceError> {
        if !(mm.is_finite() && mm >= 0.0) {
            return Err(DeviceError::InvalidTarget(mm));
        }
        self.channel_mut(channel)?.target_mm = mm;
        Ok(())
    }

    fn position(&mut self, channel: ChannelId) -> Result<f64, DeviceError> {
        Ok(self.channel(channel)?.position_mm)
    }

    fn read_force(&mut self, channel: ChannelId) -> Result<ForceSample, DeviceError> {
        let f = self.true_force_n(channel)?;
        let sd = self.params.sensor.noise_sd_n;
        let noisy = if sd > 0.0 { f + sd * self.noise.sample::<f64, _>(StandardNormal) } else { f };
        Ok(ForceSample { channel, t_ms: self.now_ms(), force_n: self.params.sensor.condition(noisy) })
    }

    fn set_gains(&mut self, channel: ChannelId, gains: PdGains) -> Result<(), DeviceError> {
        if !(gains.kp.is_finite() && gains.kp > 0.0 && gains.kd.is_finite() && gains.kd >= 0.0) {
            return Err(DeviceError::Invalid { field: "gains", message: format!("{gains:?}") });
        }
        self.channel_mut(channel)?.gains = gains;
        Ok(())
    }

    fn wait_ms(&mut self, ms: u32) -> Result<(), DeviceError> {
        self.run_ticks(self.ticks_for_ms(ms));
        Ok(())
    }

    fn now_ms(&self) -> u64 {
        self.ticks * 1000 / u64::from(self.params.actuator.tick_rate_hz)
    }

    fn store_calibration(&mut self, channel: ChannelId, cal: ChannelCalibration) -> Result<(), DeviceError> {
        self.channel(channel)?;
        self.calibration[channel.index()] = Some(cal);
        Ok(())
    }
}
