//! Fixed-width delivery workers and the retry schedule.

use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};
use serde::{Deserialize, Serialize};

use super::transport::Transport;
use super::wire::{WireRequest, WireResponse};

type Job = Box<dyn FnOnce() + Send>;

pub struct DeliveryPool {
    tx: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
}

impl DeliveryPool {
    pub fn new(width: usize) -> Self {
        let width = width.max(1);
        let (tx, rx) = crossbeam_channel::unbounded::<Job>();
        let workers = (0..width)
            .map(|i| {
                let rx: Receiver<Job> = rx.clone();
                std::thread::Builder::new()
                    .name(format!("delivery-{i}"))
                    .spawn(move || {
                        for job in rx {
                            job();
                        }
                    })
                    .expect("spawn delivery worker")
            })
            .collect();
        Self { tx: Some(tx), workers }
    }

    pub fn width(&self) -> usize {
        self.workers.len()
    }

    pub fn submit(&self, job: impl FnOnce() + Send + 'static) {
        self.tx.as_ref().expect("pool running").send(Box::new(job)).expect("workers alive");
    }
}

impl Drop for DeliveryPool {
    fn drop(&mut self) {
        self.tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Exponential backoff: attempt `n` (1-based) waits `base * 2^(n-1)`, capped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
    #[serde(with = "millis")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay: Duration::from_millis(50), max_delay: Duration::from_secs(2) }
    }
}

impl RetryPolicy {
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendError {
    /// Transport failures or 5xx responses on every attempt.
    Unavailable { attempts: u32, last: String },
    /// A definitive 4xx answer; not retried.
    Rejected { attempts: u32, response: WireResponse },
}

/// Sends with retries on transport errors and server errors. `on_retry` sees
/// the number of the attempt about to start.
pub fn send_with_retry(
    transport: &dyn Transport,
    endpoint: &str,
    req: &WireRequest,
    policy: &RetryPolicy,
    mut on_retry: impl FnMut(u32),
) -> Result<(WireResponse, u32), SendError> {
    let max = policy.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 1..=max {
        if attempt > 1 {
            on_retry(attempt);
            std::thread::sleep(policy.delay_after(attempt - 1));
        }
        match transport.send(endpoint, req) {
            Ok(resp) if resp.is_success() => return Ok((resp, attempt)),
            Ok(resp) if resp.status < 500 => return Err(SendError::Rejected { attempts: attempt, response: resp }),
            Ok(resp) => last = format!("status {}", resp.status),
            Err(e) => last = e.to_string(),
        }
        tracing::debug!(endpoint, attempt, %last, "delivery attempt failed");
    }
    Err(SendError::Unavailable { attempts: max, last })
}
