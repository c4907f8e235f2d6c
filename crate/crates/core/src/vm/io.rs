// SPDX-License-Identifier: Apache-2.0

//! Non-Secure I/O services reachable through `nsc_call`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SERVICE_READ_INPUT: u16 = 0;
pub const SERVICE_READ_SENSOR: u16 = 1;
/// Value returned once the input stream is exhausted.
pub const INPUT_EXHAUSTED: u32 = u32::MAX;

/// Input stream and sensor source for the application under audit.
#[derive(Debug, Clone)]
pub struct AppIo {
    input: Vec<u32>,
    cursor: usize,
    seed: u64,
    sensor: ChaCha8Rng,
}

impl AppIo {
    pub fn new(input: Vec<u32>, seed: u64) -> Self {
        AppIo { input, cursor: 0, seed, sensor: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Rewinds both streams, as after a device reset.
    pub fn rewind(&mut self) {
        self.cursor = 0;
        self.sensor = ChaCha8Rng::seed_from_u64(self.seed);
    }

    /// Result placed in `r0` for `service`, or `None` for an unknown service.
    pub fn service(&mut self, service: u16) -> Option<u32> {
        match service {
            SERVICE_READ_INPUT => {
                let v = self.input.get(self.cursor).copied().unwrap_or(INPUT_EXHAUSTED);
                self.cursor += 1;
                Some(v)
            }
            SERVICE_READ_SENSOR => Some(self.sensor.gen_range(0..4096)),
            _ => None,
        }
    }
}
