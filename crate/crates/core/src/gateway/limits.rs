//! Client-side rate limiting and in-flight caps.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

/// Token bucket: `capacity` tokens, refilled at `per_second`.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: u32, per_second: f64) -> Self {
        assert!(per_second > 0.0, "refill rate must be positive");
        TokenBucket {
            capacity: capacity.max(1) as f64,
            per_second,
            state: Mutex::new((capacity.max(1) as f64, Instant::now())),
        }
    }

    /// Takes one token, sleeping until one is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().expect("token bucket poisoned");
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.per_second;
                st.0 = (st.0 + refill).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.0) / self.per_second)
            };
            std::thread::sleep(wait);
        }
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
pub struct InflightLimiter {
    cap: usize,
    count: Mutex<usize>,
    cv: Condvar,
}

pub struct InflightSlot<'a> {
    limiter: &'a InflightLimiter,
}

impl InflightLimiter {
    pub fn new(cap: usize) -> Self {
        InflightLimiter {
            cap: cap.max(1),
            count: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightSlot<'_> {
        let mut n = self.count.lock().expect("limiter poisoned");
        while *n >= self.cap {
            n = self.cv.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        InflightSlot { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.count.lock().expect("limiter poisoned")
    }
}

impl Drop for InflightSlot<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.count.lock().expect("limiter poisoned");
        *n -= 1;
        self.limiter.cv.notify_one();
    }
}
