//! Leader/peripheral byte protocol.
//!
//! ```text
//! 0xAA | channel | opcode | payload (0..=8 bytes) | crc
//! ```
//!
//! The payload length is implied by the opcode (for ACK, by the acked
//! opcode in the first payload byte). Multi-byte fields are little-endian
//! unsigned fixed point: positions in 0.01 mm, forces in 0.01 N, gains in
//! 0.01 units, stiffness in 0.0001 N/mm. The CRC is CRC-8/ATM (poly 0x07,
//! init 0, no reflection, no xorout) over channel..payload.
//! Opcodes 0x10..=0x1F are reserved for force control.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SYNC: u8 = 0xAA;
pub const MAX_PAYLOAD: usize = 8;
pub const MAX_FRAME_LEN: usize = 4 + MAX_PAYLOAD;
pub const FORCE_CONTROL_OPCODES: RangeInclusive<u8> = 0x10..=0x1F;

const OP_SET_TARGET: u8 = 0x01;
const OP_GET_POS: u8 = 0x02;
const OP_GET_FORCE: u8 = 0x03;
const OP_SET_GAINS: u8 = 0x04;
const OP_CALIBRATE: u8 = 0x05;
const OP_ACK: u8 = 0x80;
const OP_NAK: u8 = 0x81;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame too short ({0} bytes)")]
    TooShort(usize),
    #[error("bad sync byte {0:#04x}")]
    BadSync(u8),
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("opcode {0:#04x} is reserved for force control")]
    ReservedOpcode(u8),
    #[error("frame length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("crc {got:#04x}, expected {expected:#04x}")]
    CrcMismatch { expected: u8, got: u8 },
    #[error("invalid NAK code {0:#04x}")]
    BadNakCode(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum NakCode {
    UnknownChannel = 1,
    InvalidValue = 2,
    Busy = 3,
    CalibrationFailed = 4,
    BadFrame = 5,
}

impl NakCode {
    fn from_u8(b: u8) -> Result<Self, FrameError> {
        Ok(match b {
            1 => NakCode::UnknownChannel,
            2 => NakCode::InvalidValue,
            3 => NakCode::Busy,
            4 => NakCode::CalibrationFailed,
            5 => NakCode::BadFrame,
            other => return Err(FrameError::BadNakCode(other)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AckData {
    SetTarget,
    Position { centi_mm: u16 },
    Force { centi_n: u16 },
    SetGains,
    Calibrate { stiffness_e4: u16, offset_centi_mm: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Command {
    SetTarget { centi_mm: u16 },
    GetPos,
    GetForce,
    SetGains { kp_centi: u16, kd_centi: u16 },
    Calibrate,
    Ack(AckData),
    Nak { opcode: u8, code: NakCode },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub channel: u8,
    pub command: Command,
}

/// CRC-8/ATM: polynomial 0x07, init 0x00, MSB first.
pub fn crc8_atm(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0u8, |mut crc, &b| {
        crc ^= b;
        for _ in 0..8 {
            crc = if crc & 0x80 != 0 { (crc << 1) ^ 0x07 } else { crc << 1 };
        }
        crc
    })
}

fn ack_payload_len(acked: u8) -> Option<usize> {
    Some(match acked {
        OP_SET_TARGET | OP_SET_GAINS => 1,
        OP_GET_POS | OP_GET_FORCE => 3,
        OP_CALIBRATE => 5,
        _ => return None,
    })
}

fn payload_len(opcode: u8, first_payload: Option<u8>) -> Result<usize, FrameError> {
    match opcode {
        OP_SET_TARGET => Ok(2),
        OP_GET_POS | OP_GET_FORCE | OP_CALIBRATE => Ok(0),
        OP_SET_GAINS => Ok(4),
        OP_NAK => Ok(2),
        OP_ACK => match first_payload {
            Some(acked) => ack_payload_len(acked).ok_or(FrameError::UnknownOpcode(acked)),
            None => Err(FrameError::TooShort(3)),
        },
        op if FORCE_CONTROL_OPCODES.contains(&op) => Err(FrameError::ReservedOpcode(op)),
        op => Err(FrameError::UnknownOpcode(op)),
    }
}

fn u16le(lo: u8, hi: u8) -> u16 {
    u16::from_le_bytes([lo, hi])
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAX_FRAME_LEN);
    out.push(SYNC);
    out.push(frame.channel);
    match frame.command {
        Command::SetTarget { centi_mm } => {
            out.push(OP_SET_TARGET);
            out.extend(centi_mm.to_le_bytes());
        }
        Command::GetPos => out.push(OP_GET_POS),
        Command::GetForce => out.push(OP_GET_FORCE),
        Command::SetGains { kp_centi, kd_centi } => {
            out.push(OP_SET_GAINS);
            out.extend(kp_centi.to_le_bytes());
            out.extend(kd_centi.to_le_bytes());
        }
        Command::Calibrate => out.push(OP_CALIBRATE),
        Command::Ack(data) => {
            out.push(OP_ACK);
            match data {
                AckData::SetTarget => out.push(OP_SET_TARGET),
                AckData::SetGains => out.push(OP_SET_GAINS),
                AckData::Position { centi_mm } => {
                    out.push(OP_GET_POS);
                    out.extend(centi_mm.to_le_bytes());
                }
                AckData::Force { centi_n } => {
                    out.push(OP_GET_FORCE);
                    out.extend(centi_n.to_le_bytes());
                }
                AckData::Calibrate { stiffness_e4, offset_centi_mm } => {
                    out.push(OP_CALIBRATE);
                    out.extend(stiffness_e4.to_le_bytes());
                    out.extend(offset_centi_mm.to_le_bytes());
                }
            }
        }
        Command::Nak { opcode, code } => {
            out.push(OP_NAK);
            out.push(opcode);
            out.push(code as u8);
        }
    }
    out.push(crc8_atm(&out[1..]));
    out
}

/// Decode exactly one frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    if bytes.len() < 4 {
        return Err(FrameError::TooShort(bytes.len()));
    }
    if bytes[0] != SYNC {
        return Err(FrameError::BadSync(bytes[0]));
    }
    let (channel, opcode) = (bytes[1], bytes[2]);
    let n = payload_len(opcode, bytes.get(3).copied())?;
    let expected = 4 + n;
    if bytes.len() != expected {
        return Err(FrameError::LengthMismatch { expected, got: bytes.len() });
    }
    let crc = crc8_atm(&bytes[1..expected - 1]);
    if crc != bytes[expected - 1] {
        return Err(FrameError::CrcMismatch { expected: crc, got: bytes[expected - 1] });
    }
    let p = &bytes[3..expected - 1];
    let command = match opcode {
        OP_SET_TARGET => Command::SetTarget { centi_mm: u16le(p[0], p[1]) },
        OP_GET_POS => Command::GetPos,
        OP_GET_FORCE => Command::GetForce,
        OP_SET_GAINS => Command::SetGains { kp_centi: u16le(p[0], p[1]), kd_centi: u16le(p[2], p[3]) },
        OP_CALIBRATE => Command::Calibrate,
        OP_NAK => Command::Nak { opcode: p[0], code: NakCode::from_u8(p[1])? },
        OP_ACK => Command::Ack(match p[0] {
            OP_SET_TARGET => AckData::SetTarget,
            OP_SET_GAINS => AckData::SetGains,
            OP_GET_POS => AckData::Position { centi_mm: u16le(p[1], p[2]) },
            OP_GET_FORCE => AckData::Force { centi_n: u16le(p[1], p[2]) },
            OP_CALIBRATE => AckData::Calibrate { stiffness_e4: u16le(p[1], p[2]), offset_centi_mm: u16le(p[3], p[4]) },
            other => return Err(FrameError::UnknownOpcode(other)),
        }),
        other => return Err(FrameError::UnknownOpcode(other)),
    };
    Ok(Frame { channel, command })
}

/// Fixed-point helpers shared by the client and the peripheral.
pub(crate) fn to_fixed(value: f64, scale: f64) -> Option<u16> {
    let v = (value * scale).round();
    (value.is_finite() && (0.0..=f64::from(u16::MAX)).contains(&v)).then_some(v as u16)
}

pub(crate) fn from_fixed(raw: u16, scale: f64) -> f64 {
    f64::from(raw) / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_check_value() {
        assert_eq!(crc8_atm(b"123456789"), 0xF4);
        assert_eq!(crc8_atm(&[]), 0x00);
    }

    #[test]
    fn set_target_layout() {
        let f = Frame { channel: 0, command: Command::SetTarget { centi_mm: to_fixed(10.40, 100.0).unwrap() } };
        let bytes = encode_frame(&f);
        assert_eq!(&bytes[..5], &[0xAA, 0x00, 0x01, 0x10, 0x04]);
        assert_eq!(bytes[5], crc8_atm(&[0x00, 0x01, 0x10, 0x04]));
        assert_eq!(decode_frame(&bytes), Ok(f));
    }

    #[test]
    fn ack_and_nak_round_trip() {
        for command in [
            Command::Ack(AckData::Calibrate { stiffness_e4: 4135, offset_centi_mm: 12 }),
            Command::Ack(AckData::Force { centi_n: 430 }),
            Command::Nak { opcode: OP_GET_FORCE, code: NakCode::UnknownChannel },
        ] {
            let f = Frame { channel: 3, command };
            assert_eq!(decode_frame(&encode_frame(&f)), Ok(f));
        }
    }

    #[test]
    fn rejects_reserved_unknown_and_bad_crc() {
        let mut reserved = vec![SYNC, 0, 0x12, 0];
        reserved[3] = crc8_atm(&reserved[1..3]);
        assert_eq!(decode_frame(&reserved), Err(FrameError::ReservedOpcode(0x12)));
        let mut unknown = vec![SYNC, 0, 0x42, 0];
        unknown[3] = crc8_atm(&unknown[1..3]);
        assert_eq!(decode_frame(&unknown), Err(FrameError::UnknownOpcode(0x42)));
        let mut good = encode_frame(&Frame { channel: 1, command: Command::GetPos });
        *good.last_mut().unwrap() ^= 1;
        assert!(matches!(decode_frame(&good), Err(FrameError::CrcMismatch { .. })));
        assert_eq!(decode_frame(&[SYNC, 0]), Err(FrameError::TooShort(2)));
    }

    #[test]
    fn fixed_point_range() {
        assert_eq!(to_fixed(655.35, 100.0), Some(u16::MAX));
        assert_eq!(to_fixed(655.36, 100.0), None);
        assert_eq!(to_fixed(-0.01, 100.0), None);
        assert_eq!(to_fixed(f64::NAN, 100.0), None);
        assert_eq!(from_fixed(1040, 100.0), 10.4);
    }
}
