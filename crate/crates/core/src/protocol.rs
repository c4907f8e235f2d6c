// SPDX-License-Identifier: Apache-2.0

//! Messages exchanged between the device and the verifier.
//!
//! All integers are big-endian.
//!
//! ```text
//! request   0x00 | app_id(2) | delta(8) | chal(64) | mac(32)
//! report    0x01 | sigma(32) | log_size(4) | log(log_size)
//! response  0x02 | result(1) | chal'(64) | sigma(32)
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{hmac_sha256, hmac_verify, Digest, Key};

pub const CHALLENGE_BYTES: usize = 64;
pub const MAC_BYTES: usize = 32;
pub const REQUEST_BYTES: usize = 1 + 2 + 8 + CHALLENGE_BYTES + MAC_BYTES;
pub const RESPONSE_BYTES: usize = 1 + 1 + CHALLENGE_BYTES + MAC_BYTES;
pub const REPORT_HEADER_BYTES: usize = 1 + MAC_BYTES + 4;

const TYPE_REQUEST: u8 = 0x00;
const TYPE_REPORT: u8 = 0x01;
const TYPE_RESPONSE: u8 = 0x02;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("empty message")]
    Empty,
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("message length {got} does not match expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("log size {0} is not a whole number of entries")]
    LogSize(u32),
    #[error("unknown verifier result {0:#04x}")]
    UnknownResult(u8),
}

/// 512-bit big-endian counter.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Challenge(pub [u8; CHALLENGE_BYTES]);

impl Challenge {
    pub const ZERO: Challenge = Challenge([0; CHALLENGE_BYTES]);

    pub fn from_u64(v: u64) -> Challenge {
        let mut b = [0u8; CHALLENGE_BYTES];
        b[CHALLENGE_BYTES - 8..].copy_from_slice(&v.to_be_bytes());
        Challenge(b)
    }

    /// Successor, wrapping at 2^512.
    pub fn next(&self) -> Challenge {
        let mut b = self.0;
        for byte in b.iter_mut().rev() {
            let (v, carry) = byte.overflowing_add(1);
            *byte = v;
            if !carry {
                break;
            }
        }
        Challenge(b)
    }

    /// Low 64 bits, for display and metrics.
    pub fn low_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[CHALLENGE_BYTES - 8..].try_into().unwrap())
    }
}

impl fmt::Debug for Challenge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0[..CHALLENGE_BYTES - 8].iter().all(|b| *b == 0) {
            write!(f, "Challenge({})", self.low_u64())
        } else {
            write!(f, "Challenge({})", crate::crypto::hex(&self.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VrfResult {
    Exec = 1,
    End = 2,
    Heal = 3,
}

impl VrfResult {
    pub fn from_byte(b: u8) -> Option<VrfResult> {
        match b {
            1 => Some(VrfResult::Exec),
            2 => Some(VrfResult::End),
            3 => Some(VrfResult::Heal),
            _ => None,
        }
    }
}

fn expect_len(bytes: &[u8], expected: usize) -> Result<(), WireError> {
    if bytes.len() != expected {
        return Err(WireError::Length { expected, got: bytes.len() });
    }
    Ok(())
}

fn challenge_at(bytes: &[u8], at: usize) -> Challenge {
    Challenge(bytes[at..at + CHALLENGE_BYTES].try_into().unwrap())
}

fn mac_at(bytes: &[u8], at: usize) -> [u8; MAC_BYTES] {
    bytes[at..at + MAC_BYTES].try_into().unwrap()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestRequest {
    pub app_id: u16,
    pub delta: u64,
    pub chal: Challenge,
    pub mac: [u8; MAC_BYTES],
}

impl AttestRequest {
    pub fn signed(key: &Key, app_id: u16, delta: u64, chal: Challenge) -> Self {
        let mac = hmac_sha256(key, &[&app_id.to_be_bytes(), &delta.to_be_bytes(), &chal.0]);
        AttestRequest { app_id, delta, chal, mac }
    }

    pub fn verify(&self, key: &Key) -> bool {
        hmac_verify(key, &[&self.app_id.to_be_bytes(), &self.delta.to_be_bytes(), &self.chal.0], &self.mac)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(REQUEST_BYTES);
        v.push(TYPE_REQUEST);
        v.extend_from_slice(&self.app_id.to_be_bytes());
        v.extend_from_slice(&self.delta.to_be_bytes());
        v.extend_from_slice(&self.chal.0);
        v.extend_from_slice(&self.mac);
        v
    }

    fn decode_body(bytes: &[u8]) -> Result<Self, WireError> {
        expect_len(bytes, REQUEST_BYTES)?;
        Ok(AttestRequest {
            app_id: u16::from_be_bytes([bytes[1], bytes[2]]),
            delta: u64::from_be_bytes(bytes[3..11].try_into().unwrap()),
            chal: challenge_at(bytes, 11),
            mac: mac_at(bytes, 11 + CHALLENGE_BYTES),
        })
    }
}

/// Runtime report `R_P`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuntimeReport {
    pub sigma: [u8; MAC_BYTES],
    pub log: Vec<u8>,
}

/// `σ_Prv` over `h_pmem | log_size | log | chal`.
pub fn report_mac(key: &Key, h_pmem: &Digest, log: &[u8], chal: &Challenge) -> [u8; MAC_BYTES] {
    hmac_sha256(key, &[h_pmem, &(log.len() as u32).to_be_bytes(), log, &chal.0])
}

impl RuntimeReport {
    pub fn encode(&self) -> Vec<u8> {
        encode_report(&self.sigma, &self.log)
    }

    pub fn verify(&self, key: &Key, h_pmem: &Digest, chal: &Challenge) -> bool {
        hmac_verify(key, &[h_pmem, &(self.log.len() as u32).to_be_bytes(), &self.log, &chal.0], &self.sigma)
    }

    fn decode_body(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < REPORT_HEADER_BYTES {
            return Err(WireError::Length { expected: REPORT_HEADER_BYTES, got: bytes.len() });
        }
        let size = u32::from_be_bytes(bytes[1 + MAC_BYTES..REPORT_HEADER_BYTES].try_into().unwrap());
        if size % 4 != 0 {
            return Err(WireError::LogSize(size));
        }
        expect_len(bytes, REPORT_HEADER_BYTES + size as usize)?;
        Ok(RuntimeReport { sigma: mac_at(bytes, 1), log: bytes[REPORT_HEADER_BYTES..].to_vec() })
    }
}

pub fn encode_report(sigma: &[u8; MAC_BYTES], log: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(REPORT_HEADER_BYTES + log.len());
    v.push(TYPE_REPORT);
    v.extend_from_slice(sigma);
    v.extend_from_slice(&(log.len() as u32).to_be_bytes());
    v.extend_from_slice(log);
    v
}

/// Verifier response `R_V`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifierResponse {
    pub result: VrfResult,
    pub chal: Challenge,
    pub sigma: [u8; MAC_BYTES],
}

impl VerifierResponse {
    pub fn signed(key: &Key, result: VrfResult, chal: Challenge) -> Self {
        let sigma = hmac_sha256(key, &[&chal.0, &[result as u8]]);
        VerifierResponse { result, chal, sigma }
    }

    pub fn verify(&self, key: &Key) -> bool {
        hmac_verify(key, &[&self.chal.0, &[self.result as u8]], &self.sigma)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(RESPONSE_BYTES);
        v.push(TYPE_RESPONSE);
        v.push(self.result as u8);
        v.extend_from_slice(&self.chal.0);
        v.extend_from_slice(&self.sigma);
        v
    }

    fn decode_body(bytes: &[u8]) -> Result<Self, WireError> {
        expect_len(bytes, RESPONSE_BYTES)?;
        Ok(VerifierResponse {
            result: VrfResult::from_byte(bytes[1]).ok_or(WireError::UnknownResult(bytes[1]))?,
            chal: challenge_at(bytes, 2),
            sigma: mac_at(bytes, 2 + CHALLENGE_BYTES),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Request(AttestRequest),
    Report(RuntimeReport),
    Response(VerifierResponse),
}

impl Message {
    pub fn decode(bytes: &[u8]) -> Result<Message, WireError> {
        match bytes.first() {
            None => Err(WireError::Empty),
            Some(&TYPE_REQUEST) => AttestRequest::decode_body(bytes).map(Message::Request),
            Some(&TYPE_REPORT) => RuntimeReport::decode_body(bytes).map(Message::Report),
            Some(&TYPE_RESPONSE) => VerifierResponse::decode_body(bytes).map(Message::Response),
            Some(&t) => Err(WireError::UnknownType(t)),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Message::Request(r) => r.encode(),
            Message::Report(r) => r.encode(),
            Message::Response(r) => r.encode(),
        }
    }
}
