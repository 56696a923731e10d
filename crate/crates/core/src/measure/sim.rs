use std::collections::HashMap;
use std::net::IpAddr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, MeasurementBackend, MeasurementResult, Origin, Probe, Vantage, FIBER_KM_PER_MS};
use crate::geo::{great_circle_km, Coord};

/// Additive per-packet delay, drawn uniformly from `[min_ms, max_ms)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub min_ms: f64,
    pub max_ms: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { min_ms: 0.0, max_ms: 9.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRouter {
    pub ip: IpAddr,
    pub lat: f64,
    pub lon: f64,
    #[serde(default = "yes")]
    pub responsive: bool,
}

fn yes() -> bool {
    true
}

/// Serialized form of a simulated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorldFile {
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub epoch: i64,
    pub routers: Vec<SimRouter>,
}

/// A synthetic network whose true router positions are known. RTTs are
/// the fiber round trip plus seeded uniform noise, so identical inputs
/// always produce identical measurements regardless of call order.
#[derive(Debug, Clone)]
pub struct SimWorld {
    seed: u64,
    noise: NoiseModel,
    epoch: i64,
    routers: HashMap<IpAddr, SimRouter>,
    origins: HashMap<String, Origin>,
}

impl SimWorld {
    pub fn new(file: SimWorldFile, probes: &[Probe], vantages: &[Vantage]) -> Self {
        let mut origins = HashMap::new();
        for p in probes {
            origins.insert(p.probe_id.clone(), Origin::from(p));
        }
        for v in vantages {
            origins.insert(v.name.clone(), Origin::from(v));
        }
        SimWorld {
            seed: file.seed,
            noise: file.noise,
            epoch: file.epoch,
            routers: file.routers.into_iter().map(|r| (r.ip, r)).collect(),
            origins,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    pub fn router(&self, ip: IpAddr) -> Option<&SimRouter> {
        self.routers.get(&ip)
    }

    pub fn router_count(&self) -> usize {
        self.routers.len()
    }

    /// Fiber round-trip time over `distance_km`, rounded up so it never
    /// undershoots the physical bound.
    pub fn propagation_ms(distance_km: f64) -> f64 {
        2.0 * distance_km / FIBER_KM_PER_MS * (1.0 + 4.0 * f64::EPSILON)
    }

    fn packet_rng(&self, origin: &str, target: IpAddr, packet: u32) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(origin.as_bytes());
        h.update([0]);
        h.update(target.to_string().as_bytes());
        h.update(packet.to_le_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    fn noise_ms(&self, origin: &str, target: IpAddr, packet: u32) -> f64 {
        let NoiseModel { min_ms, max_ms } = self.noise;
        if max_ms <= min_ms {
            return min_ms;
        }
        self.packet_rng(origin, target, packet).random_range(min_ms..max_ms)
    }
}

impl MeasurementBackend for SimWorld {
    fn ping(&self, origin: &Origin, target: IpAddr, packets: u32) -> Result<MeasurementResult, BackendError> {
        let known = self
            .origins
            .get(&origin.id)
            .ok_or_else(|| BackendError::UnknownOrigin(origin.id.clone()))?;
        let rtt_ms = self.routers.get(&target).filter(|r| r.responsive).map(|r| {
            let router = Coord::new(r.lat, r.lon).expect("router coordinates are valid");
            let base = Self::propagation_ms(great_circle_km(known.coord(), router));
            (0..packets.max(1))
                .map(|i| (base + self.noise_ms(&known.id, target, i)).max(1e-3))
                .fold(f64::INFINITY, f64::min)
        });
        Ok(MeasurementResult {
            target,
            origin: known.clone(),
            rtt_ms,
            timestamp: self.epoch,
        })
    }
}
