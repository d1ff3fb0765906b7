//! Periodic broadcast with independent per-link packet loss.
//!
//! Wire layout of a [`Packet`], all little-endian:
//!
//! ```text
//! sender u16 | step u32 | flags u8 | profile N×f64 (flag bit 0) | GP payload 13×f64 (flag bit 1)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpPayload;

const FLAG_PROFILE: u8 = 1;
const FLAG_GP: u8 = 2;
const HEADER_BYTES: usize = 2 + 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    /// Broadcast period `t_c` (s); a multiple of the sampling time.
    pub period: f64,
    /// Delivery probability of each packet on each link.
    pub success_prob: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            period: 0.1,
            success_prob: 1.0,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    /// Broadcast period in samples.
    pub fn period_steps(&self, ts: f64) -> Result<u64> {
        if !(ts > 0.0 && self.period > 0.0) {
            return Err(Error::Config(format!(
                "communication period {} and sample time {ts} must be positive",
                self.period
            )));
        }
        let ratio = self.period / ts;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Config(format!(
                "communication period {} is not a multiple of the sample time {ts}",
                self.period
            )));
        }
        Ok(steps as u64)
    }

    pub fn validate(&self, ts: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&self.success_prob) {
            return Err(Error::Config(format!(
                "success probability must lie in [0, 1], got {}",
                self.success_prob
            )));
        }
        self.period_steps(ts).map(|_| ())
    }
}

/// True when step `k` falls on the broadcast grid.
pub fn is_broadcast_step(k: u64, ts: f64, period: f64) -> bool {
    let cfg = ChannelConfig {
        period,
        ..ChannelConfig::default()
    };
    match cfg.period_steps(ts) {
        Ok(p) => k % p == 0,
        Err(_) => false,
    }
}

/// Loss process. One uniform draw per link per broadcast step, links in
/// ascending order.
#[derive(Debug, Clone)]
pub struct Channel {
    rng: ChaCha8Rng,
    success_prob: f64,
}

impl Channel {
    pub fn new(cfg: &ChannelConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            success_prob: cfg.success_prob,
        }
    }

    pub fn deliver(&mut self) -> bool {
        self.rng.random::<f64>() < self.success_prob
    }

    /// Outcome for links `0..links` in order.
    pub fn deliver_all(&mut self, links: usize) -> Vec<bool> {
        (0..links).map(|_| self.deliver()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub sender: u16,
    pub step: u32,
    /// Predicted accelerations for steps `step..step + N`.
    pub profile: Option<Vec<f64>>,
    pub gp: Option<GpPayload>,
}

impl Packet {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.profile.is_none() && self.gp.is_none() {
            return Err(Error::Wire("packet carries no payload".into()));
        }
        if let Some(p) = &self.profile {
            if p.len() != horizon {
                return Err(Error::Wire(format!("profile has {} values, expected {horizon}", p.len())));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + GpPayload::BYTES);
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let flags = if self.profile.is_some() { FLAG_PROFILE } else { 0 } | if self.gp.is_some() { FLAG_GP } else { 0 };
        out.push(flags);
        if let Some(p) = &self.profile {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(g) = &self.gp {
            out.extend_from_slice(&g.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], horizon: usize) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Wire(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let sender = u16::from_le_bytes([bytes[0], bytes[1]]);
        let step = u32::from_le_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]);
        let flags = bytes[6];
        if flags & !(FLAG_PROFILE | FLAG_GP) != 0 {
            return Err(Error::Wire(format!("unknown flag bits {flags:#04x}")));
        }
        let mut expected = HEADER_BYTES;
        if flags & FLAG_PROFILE != 0 {
            expected += 8 * horizon;
        }
        if flags & FLAG_GP != 0 {
            expected += GpPayload::BYTES;
        }
        if bytes.len() != expected {
            return Err(Error::Wire(format!("expected {expected} bytes, got {}", bytes.len())));
        }
        let mut pos = HEADER_BYTES;
        let profile = (flags & FLAG_PROFILE != 0).then(|| {
            let p = bytes[pos..pos + 8 * horizon]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            pos += 8 * horizon;
            p
        });
        let gp = if flags & FLAG_GP != 0 {
            Some(GpPayload::from_le_bytes(&bytes[pos..])?)
        } else {
            None
        };
        let packet = Self {
            sender,
            step,
            profile,
            gp,
        };
        packet.validate(horizon)?;
        Ok(packet)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn broadcast_schedule() {
        let hits: Vec<u64> = (0..35).filter(|&k| is_broadcast_step(k, 0.1, 1.0)).collect();
        assert_eq!(hits, vec![0, 10, 20, 30]);
        assert!((0..20).all(|k| is_broadcast_step(k, 0.1, 0.1)));
        assert!(!is_broadcast_step(5, 0.1, 1.0));
        assert!(ChannelConfig { period: 0.25, ..Default::default() }.period_steps(0.1).is_err());
    }

    #[test]
    fn extreme_probabilities() {
        let mut always = Channel::new(&ChannelConfig { success_prob: 1.0, ..Default::default() });
        assert!(always.deliver_all(1000).into_iter().all(|d| d));
        let mut never = Channel::new(&ChannelConfig { success_prob: 0.0, ..Default::default() });
        assert!(never.deliver_all(1000).into_iter().all(|d| !d));
    }

    #[test]
    fn empirical_rate() {
        let mut ch = Channel::new(&ChannelConfig {
            success_prob: 0.75,
            seed: 42,
            ..Default::default()
        });
        let hits = ch.deliver_all(10_000).into_iter().filter(|&d| d).count();
        assert!((hits as f64 / 1e4 - 0.75).abs() <= 0.02);
    }

    #[test]
    fn links_are_uncorrelated() {
        let mut ch = Channel::new(&ChannelConfig {
            success_prob: 0.75,
            seed: 7,
            ..Default::default()
        });
        let draws: Vec<Vec<bool>> = (0..10_000).map(|_| ch.deliver_all(2)).collect();
        let a: Vec<f64> = draws.iter().map(|d| d[0] as u8 as f64).collect();
        let b: Vec<f64> = draws.iter().map(|d| d[1] as u8 as f64).collect();
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
        let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        let sb = (b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / b.len() as f64).sqrt();
        assert!((cov / (sa * sb)).abs() < 0.05);
    }

    #[test]
    fn same_seed_same_sequence() {
        let cfg = ChannelConfig {
            success_prob: 0.5,
            seed: 99,
            ..Default::default()
        };
        assert_eq!(Channel::new(&cfg).deliver_all(500), Channel::new(&cfg).deliver_all(500));
    }

    #[test]
    fn wire_rejects_garbage() {
        assert!(Packet::decode(&[0, 1, 2], 7).is_err());
        assert!(Packet::decode(&[0, 0, 0, 0, 0, 0, 0x80], 7).is_err());
        let p = Packet {
            sender: 1,
            step: 2,
            profile: Some(vec![0.0; 7]),
            gp: None,
        };
        let bytes = p.encode();
        assert_eq!(bytes.len(), 7 + 56);
        assert!(Packet::decode(&bytes, 6).is_err());
        assert!(Packet {
            profile: None,
            ..p
        }
        .validate(7)
        .is_err());
    }

    proptest! {
        #[test]
        fn wire_round_trip(
            sender in any::<u16>(),
            step in any::<u32>(),
            profile in prop::option::of(prop::collection::vec(-4.0f64..3.0, 7)),
            gp in prop::collection::vec(-1e3f64..1e3, 13),
        ) {
            let gp = GpPayload::from_array(&gp.try_into().unwrap());
            let p = Packet { sender, step, profile, gp: Some(gp) };
            let back = Packet::decode(&p.encode(), 7).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
