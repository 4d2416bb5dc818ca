// Sliding-window request limiter.
//
// Keeps the issue time of every request still inside the window. A request
// may be issued at `now` only if fewer than `max` requests were issued in
// the half-open window (now - window, now]. Shared by reference across all
// workers of one backend.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use tokio::time::Instant;

pub const RATE_WINDOW: Duration = Duration::from_secs(60);

pub struct RateLimiter {
    window: Duration,
    max: usize,
    issued: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn per_minute(max: u32) -> Self {
        Self::new(max, RATE_WINDOW)
    }

    pub fn new(max: u32, window: Duration) -> Self {
        RateLimiter {
            window,
            max: max.max(1) as usize,
            issued: Mutex::new(VecDeque::new()),
        }
    }

    /// Wait until a slot is free, then record the issue time.
    pub async fn acquire(&self) {
        loop {
            let wait = {
                let now = Instant::now();
                let mut issued = self.issued.lock().unwrap();
                while let Some(&oldest) = issued.front() {
                    if now.duration_since(oldest) >= self.window {
                        issued.pop_front();
                    } else {
                        break;
                    }
                }
                if issued.len() < self.max {
                    issued.push_back(now);
                    None
                } else {
                    let oldest = *issued.front().unwrap();
                    Some((oldest + self.window).duration_since(now))
                }
            };
            match wait {
                None => return,
                Some(d) => tokio::time::sleep(d).await,
            }
        }
    }
}
