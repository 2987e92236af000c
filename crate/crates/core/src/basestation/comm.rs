//! In-process stand-in for the robot-to-base radio link.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommConfig {
    /// Probability that a message is lost.
    pub drop_probability: f64,
    /// Fixed latency in ticks.
    pub delay: u64,
    /// Extra latency drawn uniformly from `0..=jitter`; reorders messages.
    pub jitter: u64,
    pub seed: u64,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self { drop_probability: 0.0, delay: 0, jitter: 0, seed: 0 }
    }
}

/// Seeded lossy, delaying message queue.
#[derive(Clone, Debug)]
pub struct CommBus {
    cfg: CommConfig,
    rng: ChaCha8Rng,
    queue: BTreeMap<(u64, u64), Vec<u8>>,
    sequence: u64,
    pub sent: usize,
    pub dropped: usize,
}

impl CommBus {
    pub fn new(cfg: CommConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self { cfg, rng, queue: BTreeMap::new(), sequence: 0, sent: 0, dropped: 0 }
    }

    /// Queues `message` at tick `now`. Returns false if it was dropped.
    pub fn send(&mut self, now: u64, message: Vec<u8>) -> bool {
        self.sent += 1;
        if self.cfg.drop_probability > 0.0 && self.rng.random::<f64>() < self.cfg.drop_probability {
            self.dropped += 1;
            return false;
        }
        let jitter = if self.cfg.jitter > 0 { self.rng.random_range(0..=self.cfg.jitter) } else { 0 };
        self.queue.insert((now + self.cfg.delay + jitter, self.sequence), message);
        self.sequence += 1;
        true
    }

    /// Messages due at or before `now`, in arrival order.
    pub fn deliver(&mut self, now: u64) -> Vec<Vec<u8>> {
        let later = self.queue.split_off(&(now + 1, 0));
        std::mem::replace(&mut self.queue, later).into_values().collect()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_link_delivers_in_order() {
        let mut bus = CommBus::new(CommConfig::default());
        for i in 0..5u8 {
            assert!(bus.send(0, vec![i]));
        }
        assert_eq!(bus.deliver(0), (0..5u8).map(|i| vec![i]).collect::<Vec<_>>());
        assert_eq!(bus.pending(), 0);
    }

    #[test]
    fn delay_and_drops_are_seeded() {
        let cfg = CommConfig { drop_probability: 0.3, delay: 2, jitter: 3, seed: 9 };
        let run = || {
            let mut bus = CommBus::new(cfg.clone());
            for i in 0..50u8 {
                bus.send(i as u64, vec![i]);
            }
            assert!(bus.deliver(1).is_empty());
            let mut got = Vec::new();
            for t in 0..100 {
                got.extend(bus.deliver(t));
            }
            (got, bus.dropped)
        };
        let (a, dropped) = run();
        assert_eq!(run(), (a.clone(), dropped));
        assert!(dropped > 5 && dropped < 30, "{dropped}");
        assert_eq!(a.len() + dropped, 50);
        assert!(a.windows(2).any(|w| w[0][0] > w[1][0]), "jitter should reorder some messages");
    }
}
