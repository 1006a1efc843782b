//! Leader/peripheral link: a peripheral that serves wire frames from a
//! simulated device, in-memory transports to reach it, and a leader-side
//! client that speaks only bytes.

use std::sync::mpsc;
use std::thread::JoinHandle;

use thiserror::Error;

use super::calibration::{calibrate_channel, CalibrationSweep};
use super::wire::{decode_frame, encode_frame, from_fixed, to_fixed, AckData, Command, Frame, FrameError, NakCode};
use super::{ChannelCalibration, DeviceError, ForceSample, PdGains, PressureDevice, SimDevice};
use crate::stimulus::ChannelId;

const POS_SCALE: f64 = 100.0;
const FORCE_SCALE: f64 = 100.0;
const GAIN_SCALE: f64 = 100.0;
const STIFFNESS_SCALE: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("frame error: {0}")]
    Frame(#[from] FrameError),
    #[error("peripheral disconnected")]
    Disconnected,
    #[error("peripheral NAK for opcode {opcode:#04x}: {code:?}")]
    Nak { opcode: u8, code: NakCode },
    #[error("unexpected reply {0:?}")]
    UnexpectedReply(Command),
    #[error("value {0} not representable on the wire")]
    Unrepresentable(f64),
}

impl From<LinkError> for DeviceError {
    fn from(e: LinkError) -> Self {
        match e {
            LinkError::Nak { code, .. } => DeviceError::Rejected(code),
            other => DeviceError::Link(other.to_string()),
        }
    }
}

/// Moves frames between leader and peripheral.
pub trait Transport {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, LinkError>;
    /// Let `ms` of device time pass.
    fn wait_ms(&mut self, ms: u32) -> Result<(), LinkError>;
}

/// Peripheral firmware stand-in: decodes requests and drives a `SimDevice`.
#[derive(Debug)]
pub struct SimPeripheral {
    device: SimDevice,
    sweep: CalibrationSweep,
}

impl SimPeripheral {
    pub fn new(device: SimDevice) -> Self {
        Self { device, sweep: CalibrationSweep::default() }
    }

    pub fn device(&self) -> &SimDevice {
        &self.device
    }

    pub fn handle(&mut self, request: &[u8]) -> Vec<u8> {
        let frame = match decode_frame(request) {
            Ok(f) => f,
            Err(_) => {
                let channel = request.get(1).copied().unwrap_or(0);
                let opcode = request.get(2).copied().unwrap_or(0);
                return encode_frame(&Frame { channel, command: Command::Nak { opcode, code: NakCode::BadFrame } });
            }
        };
        let opcode = encode_frame(&frame)[2];
        let command = match self.execute(frame) {
            Ok(data) => Command::Ack(data),
            Err(code) => Command::Nak { opcode, code },
        };
        encode_frame(&Frame { channel: frame.channel, command })
    }

    fn execute(&mut self, frame: Frame) -> Result<AckData, NakCode> {
        let channel = ChannelId::new(frame.channel).map_err(|_| NakCode::UnknownChannel)?;
        let nak = |e: DeviceError| match e {
            DeviceError::UnknownChannel(_) => NakCode::UnknownChannel,
            _ => NakCode::InvalidValue,
        };
        match frame.command {
            Command::SetTarget { centi_mm } => {
                self.device.set_target(channel, from_fixed(centi_mm, POS_SCALE)).map_err(nak)?;
                Ok(AckData::SetTarget)
            }
            Command::GetPos => {
                let mm = self.device.position(channel).map_err(nak)?;
                Ok(AckData::Position { centi_mm: to_fixed(mm, POS_SCALE).ok_or(NakCode::InvalidValue)? })
            }
            Command::GetForce => {
                let f = self.device.read_force(channel).map_err(nak)?;
                Ok(AckData::Force { centi_n: to_fixed(f.force_n, FORCE_SCALE).ok_or(NakCode::InvalidValue)? })
            }
            Command::SetGains { kp_centi, kd_centi } => {
                let gains = PdGains { kp: from_fixed(kp_centi, GAIN_SCALE), kd: from_fixed(kd_centi, GAIN_SCALE) };
                self.device.set_gains(channel, gains).map_err(nak)?;
                Ok(AckData::SetGains)
            }
            Command::Calibrate => {
                self.device.channel(channel).map_err(nak)?;
                let report = calibrate_channel(&mut self.device, channel, &self.sweep)
                    .map_err(|_| NakCode::CalibrationFailed)?;
                let c = report.calibration;
                Ok(AckData::Calibrate {
                    stiffness_e4: to_fixed(c.stiffness_n_per_mm, STIFFNESS_SCALE).ok_or(NakCode::InvalidValue)?,
                    offset_centi_mm: to_fixed(c.zero_offset_mm.max(0.0), POS_SCALE).ok_or(NakCode::InvalidValue)?,
                })
            }
            Command::Ack(_) | Command::Nak { .. } => Err(NakCode::BadFrame),
        }
    }
}

/// Direct in-process transport.
#[derive(Debug)]
pub struct Loopback(pub SimPeripheral);

impl Transport for Loopback {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, LinkError> {
        Ok(self.0.handle(request))
    }

    fn wait_ms(&mut self, ms: u32) -> Result<(), LinkError> {
        self.0.device.wait_ms(ms).map_err(|_| LinkError::Disconnected)
    }
}

enum ActorMsg {
    Frame(Vec<u8>, mpsc::Sender<Vec<u8>>),
    Wait(u32, mpsc::Sender<()>),
}

/// A peripheral running on its own thread. Requests are served strictly in
/// arrival order, so per-channel ordering is FIFO.
pub struct DeviceActor {
    tx: Option<mpsc::Sender<ActorMsg>>,
    handle: Option<JoinHandle<SimPeripheral>>,
}

impl DeviceActor {
    pub fn spawn(mut peripheral: SimPeripheral) -> Self {
        let (tx, rx) = mpsc::channel::<ActorMsg>();
        let handle = std::thread::spawn(move || {
            for msg in rx {
                match msg {
                    ActorMsg::Frame(bytes, reply) => {
                        let _ = reply.send(peripheral.handle(&bytes));
                    }
                    ActorMsg::Wait(ms, reply) => {
                        let _ = peripheral.device.wait_ms(ms);
                        let _ = reply.send(());
                    }
                }
            }
            peripheral
        });
        Self { tx: Some(tx), handle: Some(handle) }
    }

    pub fn transport(&self) -> ActorTransport {
        ActorTransport { tx: self.tx.clone().expect("actor running") }
    }

    /// Stop the actor once all transports are dropped; returns its state.
    pub fn join(mut self) -> Option<SimPeripheral> {
        self.tx.take();
        self.handle.take()?.join().ok()
    }
}

impl Drop for DeviceActor {
    fn drop(&mut self) {
        self.tx.take();
    }
}

#[derive(Clone)]
pub struct ActorTransport {
    tx: mpsc::Sender<ActorMsg>,
}

impl Transport for ActorTransport {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, LinkError> {
        let (reply_tx, reply_rx) = mpsc::channel();
        self.tx.send(ActorMsg::Frame(request.to_vec(), reply_tx)).map_err(|_| LinkError::Disconnected)?;
        reply_rx.recv().map_err(|_| LinkError::Disconnected)
    }

    fn wait_ms(&mut self, ms: u32) -> Result<(), LinkError> {
        let (reply_tx, reply_rx) = mpsc::channel();
        self.tx.send(ActorMsg::Wait(ms, reply_tx)).map_err(|_| LinkError::Disconnected)?;
        reply_rx.recv().map_err(|_| LinkError::Disconnected)
    }
}

/// Leader-side device that talks to a peripheral only through frames.
pub struct WireClient<T: Transport> {
    transport: T,
    channels: usize,
    stroke_mm: f64,
    elapsed_ms: u64,
    calibration: Vec<Option<ChannelCalibration>>,
}

impl<T: Transport> WireClient<T> {
    pub fn new(transport: T, channels: usize, stroke_mm: f64) -> Self {
        Self { transport, channels, stroke_mm, elapsed_ms: 0, calibration: vec![None; channels] }
    }

    pub fn request(&mut self, frame: Frame) -> Result<AckData, LinkError> {
        let reply = decode_frame(&self.transport.exchange(&encode_frame(&frame))?)?;
        match reply.command {
            Command::Ack(data) if reply.channel == frame.channel => Ok(data),
            Command::Nak { opcode, code } => Err(LinkError::Nak { opcode, code }),
            other => Err(LinkError::UnexpectedReply(other)),
        }
    }

    /// Ask the peripheral to calibrate one of its channels.
    pub fn calibrate_remote(&mut self, channel: ChannelId) -> Result<ChannelCalibration, DeviceError> {
        match self.request(Frame { channel: channel.raw(), command: Command::Calibrate })? {
            AckData::Calibrate { stiffness_e4, offset_centi_mm } => Ok(ChannelCalibration {
                stiffness_n_per_mm: from_fixed(stiffness_e4, STIFFNESS_SCALE),
                zero_offset_mm: from_fixed(offset_centi_mm, POS_SCALE),
            }),
            other => Err(LinkError::UnexpectedReply(Command::Ack(other)).into()),
        }
    }

    pub fn calibration(&self, channel: ChannelId) -> Option<ChannelCalibration> {
        self.calibration.get(channel.index()).copied().flatten()
    }
}

impl<T: Transport> PressureDevice for WireClient<T> {
    fn channel_count(&self) -> usize {
        self.channels
    }

    fn stroke_mm(&self) -> f64 {
        self.stroke_mm
    }

    fn set_target(&mut self, channel: ChannelId, mm: f64) -> Result<(), DeviceError> {
        let centi_mm = to_fixed(mm, POS_SCALE).ok_or(DeviceError::InvalidTarget(mm))?;
        self.request(Frame { channel: channel.raw(), command: Command::SetTarget { centi_mm } })?;
        Ok(())
    }

    fn position(&mut self, channel: ChannelId) -> Result<f64, DeviceError> {
        match self.request(Frame { channel: channel.raw(), command: Command::GetPos })? {
            AckData::Position { centi_mm } => Ok(from_fixed(centi_mm, POS_SCALE)),
            other => Err(LinkError::UnexpectedReply(Command::Ack(other)).into()),
        }
    }

    fn read_force(&mut self, channel: ChannelId) -> Result<ForceSample, DeviceError> {
        match self.request(Frame { channel: channel.raw(), command: Command::GetForce })? {
            AckData::Force { centi_n } => {
                Ok(ForceSample { channel, t_ms: self.elapsed_ms, force_n: from_fixed(centi_n, FORCE_SCALE) })
            }
            other => Err(LinkError::UnexpectedReply(Command::Ack(other)).into()),
        }
    }

    fn set_gains(&mut self, channel: ChannelId, gains: PdGains) -> Result<(), DeviceError> {
        let kp_centi = to_fixed(gains.kp, GAIN_SCALE).ok_or(LinkError::Unrepresentable(gains.kp))?;
        let kd_centi = to_fixed(gains.kd, GAIN_SCALE).ok_or(LinkError::Unrepresentable(gains.kd))?;
        self.request(Frame { channel: channel.raw(), command: Command::SetGains { kp_centi, kd_centi } })?;
        Ok(())
    }

    fn wait_ms(&mut self, ms: u32) -> Result<(), DeviceError> {
        self.transport.wait_ms(ms)?;
        self.elapsed_ms += u64::from(ms);
        Ok(())
    }

    fn now_ms(&self) -> u64 {
        self.elapsed_ms
    }

    fn store_calibration(&mut self, channel: ChannelId, cal: ChannelCalibration) -> Result<(), DeviceError> {
        let slot = self.calibration.get_mut(channel.index()).ok_or(DeviceError::UnknownChannel(channel.raw()))?;
        *slot = Some(cal);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{DeviceParams, SensorParams};

    fn ch(i: u8) -> ChannelId {
        ChannelId::new(i).unwrap()
    }

    fn quiet_device() -> SimDevice {
        let params = DeviceParams {
            sensor: SensorParams { noise_sd_n: 0.0, ..SensorParams::default() },
            ..DeviceParams::default()
        };
        SimDevice::new(params, 0).unwrap()
    }

    #[test]
    fn loopback_client_drives_sim() {
        let mut client = WireClient::new(Loopback(SimPeripheral::new(quiet_device())), 2, 20.0);
        client.set_target(ch(0), 10.4).unwrap();
        client.wait_ms(3000).unwrap();
        assert_eq!(client.position(ch(0)).unwrap(), 10.4);
        let f = client.read_force(ch(0)).unwrap();
        assert!((f.force_n - 4.3).abs() <= 0.05);
        assert_eq!(f.t_ms, 3000);
    }

    #[test]
    fn unknown_channel_naks() {
        let mut client = WireClient::new(Loopback(SimPeripheral::new(quiet_device())), 2, 20.0);
        assert_eq!(client.read_force(ch(3)), Err(DeviceError::Rejected(NakCode::UnknownChannel)));
        let err = client.request(Frame { channel: 9, command: Command::GetPos }).unwrap_err();
        assert_eq!(err, LinkError::Nak { opcode: 0x02, code: NakCode::UnknownChannel });
    }

    #[test]
    fn corrupt_request_gets_bad_frame_nak() {
        let mut p = SimPeripheral::new(quiet_device());
        let mut bytes = encode_frame(&Frame { channel: 0, command: Command::GetForce });
        bytes[1] ^= 0x40;
        let reply = decode_frame(&p.handle(&bytes)).unwrap();
        assert!(matches!(reply.command, Command::Nak { code: NakCode::BadFrame, .. }));
    }

    #[test]
    fn actor_serves_in_order_and_matches_loopback() {
        let actor = DeviceActor::spawn(SimPeripheral::new(quiet_device()));
        let mut remote = WireClient::new(actor.transport(), 2, 20.0);
        let mut local = WireClient::new(Loopback(SimPeripheral::new(quiet_device())), 2, 20.0);
        for client in [&mut remote as &mut dyn PressureDevice, &mut local] {
            client.set_target(ch(1), 7.0).unwrap();
            client.wait_ms(250).unwrap();
        }
        assert_eq!(remote.position(ch(1)).unwrap(), local.position(ch(1)).unwrap());
        drop(remote);
        let p = actor.join().unwrap();
        assert_eq!(p.device().now_ms(), 250);
    }

    #[test]
    fn remote_calibration_reports_stiffness() {
        let mut client = WireClient::new(Loopback(SimPeripheral::new(quiet_device())), 2, 20.0);
        let cal = client.calibrate_remote(ch(0)).unwrap();
        assert!((cal.stiffness_n_per_mm - 4.3 / 10.4).abs() < 0.01, "{cal:?}");
    }
}
