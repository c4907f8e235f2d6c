// SPDX-License-Identifier: Apache-2.0

//! Seeded lossy transport.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Delay {
    Fixed { cycles: u64 },
    Uniform { min: u64, max: u64 },
}

impl Default for Delay {
    fn default() -> Self {
        Delay::Fixed { cycles: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub loss: f64,
    pub duplicate: f64,
    pub delay: Delay,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig { loss: 0.0, duplicate: 0.0, delay: Delay::default(), seed: 0 }
    }
}

/// One direction of a link. Messages due at the same cycle come out in
/// send order.
#[derive(Debug, Clone)]
pub struct Channel {
    config: ChannelConfig,
    rng: ChaCha8Rng,
    queue: BTreeMap<(u64, u64), Vec<u8>>,
    seq: u64,
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
}

impl Channel {
    pub fn new(config: ChannelConfig) -> Self {
        Channel {
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            queue: BTreeMap::new(),
            seq: 0,
            sent: 0,
            dropped: 0,
            delivered: 0,
        }
    }

    fn delay(&mut self) -> u64 {
        match self.config.delay {
            Delay::Fixed { cycles } => cycles,
            Delay::Uniform { min, max } => self.rng.gen_range(min..=max.max(min)),
        }
    }

    fn enqueue(&mut self, msg: Vec<u8>, at: u64) {
        self.queue.insert((at, self.seq), msg);
        self.seq += 1;
    }

    pub fn send(&mut self, msg: Vec<u8>, at_cycle: u64) {
        self.sent += 1;
        // Draws happen unconditionally so the random stream depends only on
        // the number of sends.
        let lost = self.rng.gen_bool(self.config.loss.clamp(0.0, 1.0));
        let dup = self.rng.gen_bool(self.config.duplicate.clamp(0.0, 1.0));
        let d1 = self.delay();
        let d2 = self.delay();
        if lost {
            self.dropped += 1;
            return;
        }
        if dup {
            self.enqueue(msg.clone(), at_cycle + d2);
        }
        self.enqueue(msg, at_cycle + d1);
    }

    /// Removes and returns every message due by `now`.
    pub fn poll(&mut self, now: u64) -> Vec<Vec<u8>> {
        let later = self.queue.split_off(&(now + 1, 0));
        let due = std::mem::replace(&mut self.queue, later);
        self.delivered += due.len() as u64;
        due.into_values().collect()
    }

    pub fn next_delivery(&self) -> Option<u64> {
        self.queue.keys().next().map(|k| k.0)
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(loss: f64, seed: u64) -> ChannelConfig {
        ChannelConfig { loss, seed, ..Default::default() }
    }

    #[test]
    fn lossless_is_fifo() {
        let mut ch = Channel::new(cfg(0.0, 1));
        assert!(ch.poll(100).is_empty());
        ch.send(vec![1], 0);
        ch.send(vec![2], 0);
        assert_eq!(ch.poll(0), Vec::<Vec<u8>>::new());
        assert_eq!(ch.poll(1), vec![vec![1], vec![2]]);
    }

    #[test]
    fn total_loss_delivers_nothing() {
        let mut ch = Channel::new(cfg(1.0, 1));
        for i in 0..10 {
            ch.send(vec![i], i as u64);
        }
        assert!(ch.poll(u64::MAX - 1).is_empty());
    }

    #[test]
    fn seeded_pattern_reproducible() {
        let run = || {
            let mut ch = Channel::new(cfg(0.5, 42));
            for i in 0..10 {
                ch.send(vec![i], 0);
            }
            ch.poll(10)
        };
        let a = run();
        assert_eq!(a, run());
        assert!(!a.is_empty() && a.len() < 10);
    }

    #[test]
    fn duplicates_and_uniform_delay() {
        let mut ch = Channel::new(ChannelConfig {
            duplicate: 1.0,
            delay: Delay::Uniform { min: 2, max: 5 },
            ..Default::default()
        });
        ch.send(vec![9], 0);
        assert!(ch.poll(1).is_empty());
        assert_eq!(ch.poll(5), vec![vec![9], vec![9]]);
    }
}
