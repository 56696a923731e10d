//! Adapter for an HTTP probe-measurement service with a RIPE-Atlas-shaped
//! API: a paginated probe listing, one-off ping creation and a results
//! endpoint that is polled until the ping completes.

use std::net::IpAddr;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, MeasurementBackend, MeasurementResult, Origin, Probe};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Minimal HTTP surface the adapter needs; swapped for a fake in tests.
pub trait HttpTransport: Send + Sync {
    fn send(&self, method: &str, url: &str, auth: Option<&str>, body: Option<&Value>) -> Result<HttpResponse, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        UreqTransport { agent: config.into() }
    }
}

impl HttpTransport for UreqTransport {
    fn send(&self, method: &str, url: &str, auth: Option<&str>, body: Option<&Value>) -> Result<HttpResponse, String> {
        let auth = auth.map(|k| format!("Key {k}"));
        let result = match (method, body) {
            ("GET", _) => {
                let mut req = self.agent.get(url).header("Accept", "application/json");
                if let Some(a) = &auth {
                    req = req.header("Authorization", a);
                }
                req.call()
            }
            ("POST", Some(b)) => {
                let mut req = self.agent.post(url).header("Accept", "application/json");
                if let Some(a) = &auth {
                    req = req.header("Authorization", a);
                }
                req.send_json(b)
            }
            _ => return Err(format!("unsupported request {method} {url}")),
        };
        let mut resp = result.map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

/// Token bucket that blocks callers until a token is available.
pub struct TokenBucket {
    capacity: f64,
    refill_per_s: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: u32, refill_per_s: f64) -> Self {
        let capacity = f64::from(capacity.max(1));
        TokenBucket {
            capacity,
            refill_per_s: refill_per_s.max(1e-6),
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Takes a token if one is available, else returns the wait needed.
    pub fn try_acquire(&self) -> Result<(), Duration> {
        let mut s = self.state.lock().expect("rate limiter lock");
        let now = Instant::now();
        let elapsed = now.duration_since(s.1).as_secs_f64();
        s.0 = (s.0 + elapsed * self.refill_per_s).min(self.capacity);
        s.1 = now;
        if s.0 >= 1.0 {
            s.0 -= 1.0;
            Ok(())
        } else {
            Err(Duration::from_secs_f64((1.0 - s.0) / self.refill_per_s))
        }
    }

    pub fn acquire(&self) {
        while let Err(wait) = self.try_acquire() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub poll_interval_ms: u64,
    pub max_polls: u32,
    pub max_retries: u32,
    pub rate_capacity: u32,
    pub rate_per_s: f64,
    pub timeout_s: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "https://atlas.ripe.net/api/v2".into(),
            api_key: None,
            poll_interval_ms: 5000,
            max_polls: 60,
            max_retries: 3,
            rate_capacity: 10,
            rate_per_s: 1.0,
            timeout_s: 30,
        }
    }
}

pub struct RemoteBackend<T> {
    cfg: RemoteConfig,
    transport: T,
    limiter: TokenBucket,
}

impl RemoteBackend<UreqTransport> {
    pub fn with_ureq(cfg: RemoteConfig) -> Self {
        let transport = UreqTransport::new(Duration::from_secs(cfg.timeout_s.max(1)));
        RemoteBackend::new(cfg, transport)
    }
}

#[derive(Deserialize)]
struct ProbePage {
    next: Option<String>,
    results: Vec<ProbeEntry>,
}

#[derive(Deserialize)]
struct ProbeEntry {
    id: u64,
    geometry: Option<Geometry>,
    #[serde(default)]
    status: Option<Value>,
}

#[derive(Deserialize)]
struct Geometry {
    coordinates: [f64; 2],
}

#[derive(Deserialize)]
struct ResultEntry {
    prb_id: u64,
    min: Option<f64>,
    #[serde(default)]
    rcvd: Option<u32>,
    timestamp: i64,
}

impl<T: HttpTransport> RemoteBackend<T> {
    pub fn new(cfg: RemoteConfig, transport: T) -> Self {
        let limiter = TokenBucket::new(cfg.rate_capacity, cfg.rate_per_s);
        RemoteBackend { cfg, transport, limiter }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path.trim_start_matches('/'))
    }

    fn call(&self, method: &str, url: &str, body: Option<&Value>) -> Result<Value, BackendError> {
        let mut attempt = 0;
        loop {
            self.limiter.acquire();
            let outcome = self
                .transport
                .send(method, url, self.cfg.api_key.as_deref(), body)
                .map_err(BackendError::Transport)
                .and_then(classify_response);
            match outcome {
                Err(e) if e.is_retryable() && attempt < self.cfg.max_retries => {
                    attempt += 1;
                    tracing::warn!(%url, attempt, error = %e, "retrying request");
                    std::thread::sleep(Duration::from_millis(self.cfg.poll_interval_ms.min(1000) * u64::from(attempt)));
                }
                other => return other,
            }
        }
    }

    /// All connected probes that report a location, following pagination.
    pub fn list_probes(&self) -> Result<Vec<Probe>, BackendError> {
        let mut out = Vec::new();
        let mut next = Some(self.url("probes/?status=1"));
        while let Some(url) = next {
            let page: ProbePage = serde_json::from_value(self.call("GET", &url, None)?)
                .map_err(|e| BackendError::Protocol(e.to_string()))?;
            for p in page.results {
                let Some(g) = p.geometry else { continue };
                let [lon, lat] = g.coordinates;
                if crate::geo::Coord::new(lat, lon).is_err() {
                    continue;
                }
                let active = match &p.status {
                    Some(Value::Object(m)) => m.get("id").and_then(Value::as_u64).is_none_or(|id| id == 1),
                    _ => true,
                };
                out.push(Probe {
                    probe_id: p.id.to_string(),
                    lat,
                    lon,
                    active,
                    framework: "atlas".into(),
                });
            }
            next = page.next;
        }
        Ok(out)
    }

    /// Creates a one-off ping and returns its measurement id.
    pub fn create_ping(&self, origin: &Origin, target: IpAddr, packets: u32) -> Result<u64, BackendError> {
        let probe_id: u64 = origin
            .id
            .parse()
            .map_err(|_| BackendError::UnknownOrigin(origin.id.clone()))?;
        let body = json!({
            "definitions": [{
                "target": target.to_string(),
                "af": if target.is_ipv4() { 4 } else { 6 },
                "type": "ping",
                "packets": packets.max(1),
                "description": format!("hint verification {target}"),
            }],
            "probes": [{"requested": 1, "type": "probes", "value": probe_id.to_string()}],
            "is_oneoff": true,
        });
        let resp = self.call("POST", &self.url("measurements/"), Some(&body)).map_err(|e| match e {
            BackendError::Remote { status: 400, message } if message.to_ascii_lowercase().contains("probe") => {
                BackendError::UnknownOrigin(origin.id.clone())
            }
            other => other,
        })?;
        resp.get("measurements")
            .and_then(Value::as_array)
            .and_then(|a| a.first())
            .and_then(Value::as_u64)
            .ok_or_else(|| BackendError::Protocol(format!("no measurement id in {resp}")))
    }

    /// Polls the results endpoint until the probe reports or polling gives up;
    /// giving up reads as a timeout.
    pub fn await_result(&self, id: u64, origin: &Origin, target: IpAddr) -> Result<MeasurementResult, BackendError> {
        let url = self.url(&format!("measurements/{id}/results/"));
        for poll in 0..self.cfg.max_polls.max(1) {
            let entries: Vec<ResultEntry> = serde_json::from_value(self.call("GET", &url, None)?)
                .map_err(|e| BackendError::Protocol(e.to_string()))?;
            if let Some(e) = entries.iter().find(|e| e.prb_id.to_string() == origin.id) {
                let answered = e.rcvd.is_none_or(|n| n > 0);
                let rtt_ms = e.min.filter(|&m| answered && m >= 0.0);
                return Ok(MeasurementResult {
                    target,
                    origin: origin.clone(),
                    rtt_ms,
                    timestamp: e.timestamp,
                });
            }
            if poll + 1 < self.cfg.max_polls {
                std::thread::sleep(Duration::from_millis(self.cfg.poll_interval_ms));
            }
        }
        tracing::warn!(id, %target, "measurement produced no result; counting as timeout");
        Ok(MeasurementResult {
            target,
            origin: origin.clone(),
            rtt_ms: None,
            timestamp: 0,
        })
    }
}

fn classify_response(r: HttpResponse) -> Result<Value, BackendError> {
    match r.status {
        200..=299 => serde_json::from_str(&r.body).map_err(|e| BackendError::Protocol(e.to_string())),
        429 => Err(BackendError::QuotaExceeded),
        402 => Err(BackendError::QuotaExceeded),
        status => Err(BackendError::Remote {
            status,
            message: r.body.chars().take(500).collect(),
        }),
    }
}

impl<T: HttpTransport> MeasurementBackend for RemoteBackend<T> {
    fn ping(&self, origin: &Origin, target: IpAddr, packets: u32) -> Result<MeasurementResult, BackendError> {
        let id = self.create_ping(origin, target, packets)?;
        self.await_result(id, origin, target)
    }
}
