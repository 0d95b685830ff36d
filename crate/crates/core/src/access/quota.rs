//! Rolling-window CPU quotas.
//!
//! Each account keeps a ring of per-second buckets holding charged
//! CPU-microseconds plus a running total, so admission is O(1) amortized.
//! The window at second `t` covers seconds `t - window + 1 ..= t`.
//!
//! Admission rule: a call is admitted when fewer than `max_concurrent` calls
//! are in flight and either nothing is charged or reserved in the window, or
//! `charged + reserved + estimate <= budget`. `estimate` is the CPU the call
//! is expected to use (the model's last observed cost), held as a
//! reservation until the call settles with its measured usage.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::{AccessError, QuotaPolicy};
use crate::clock::SharedClock;
use crate::runtime::UsageReport;

pub fn to_micros(cpu_seconds: f64) -> u64 {
    if cpu_seconds.is_finite() && cpu_seconds > 0.0 {
        (cpu_seconds * 1e6).round() as u64
    } else {
        0
    }
}

#[derive(Debug)]
struct Account {
    window: u64,
    ring: Vec<u64>,
    head_sec: u64,
    total: u64,
    in_flight: u32,
    reserved: u64,
}

impl Account {
    fn new(window: u64, now: u64) -> Self {
        Self {
            window,
            ring: vec![0; window as usize],
            head_sec: now,
            total: 0,
            in_flight: 0,
            reserved: 0,
        }
    }

    fn slot(&self, sec: u64) -> usize {
        (sec % self.window) as usize
    }

    fn advance(&mut self, now: u64) {
        if now <= self.head_sec {
            return;
        }
        let steps = (now - self.head_sec).min(self.window);
        for s in (now - steps + 1)..=now {
            let i = self.slot(s);
            self.total -= self.ring[i];
            self.ring[i] = 0;
        }
        self.head_sec = now;
    }

    /// Re-buckets when an account's policy changes its window length.
    fn resize(&mut self, window: u64) {
        if window == self.window {
            return;
        }
        let mut fresh = Account::new(window, self.head_sec);
        fresh.in_flight = self.in_flight;
        fresh.reserved = self.reserved;
        for k in 0..self.window.min(window) {
            let Some(sec) = self.head_sec.checked_sub(k) else {
                break;
            };
            let amount = self.ring[self.slot(sec)];
            let j = fresh.slot(sec);
            fresh.ring[j] += amount;
            fresh.total += amount;
        }
        *self = fresh;
    }

    fn charge(&mut self, now: u64, micros: u64) {
        self.advance(now);
        let i = self.slot(now);
        self.ring[i] += micros;
        self.total += micros;
    }

    fn admit(&mut self, policy: &QuotaPolicy, now: u64, need: u64) -> Result<(), AccessError> {
        self.advance(now);
        if self.in_flight >= policy.max_concurrent {
            return Err(AccessError::QuotaExceeded {
                retry_after_secs: 1,
                reason: format!("{} concurrent calls in flight", self.in_flight),
            });
        }
        let budget = to_micros(policy.cpu_seconds_per_window);
        let used = self.total + self.reserved;
        if used == 0 || used + need <= budget {
            return Ok(());
        }
        Err(AccessError::QuotaExceeded {
            retry_after_secs: self.retry_after(now, need, budget),
            reason: format!(
                "{:.3} of {:.3} cpu-seconds used in the last {}s",
                used as f64 / 1e6,
                budget as f64 / 1e6,
                self.window
            ),
        })
    }

    /// Seconds until enough charged buckets leave the window.
    fn retry_after(&self, now: u64, need: u64, budget: u64) -> u64 {
        let mut remaining = self.total;
        for k in 1..=self.window {
            if let Some(sec) = (now + k).checked_sub(self.window) {
                remaining -= self.ring[self.slot(sec)];
            }
            let used = remaining + self.reserved;
            if used == 0 || used + need <= budget {
                return k;
            }
        }
        self.window
    }
}

/// Per-account quota accounting plus per-model cost estimates.
pub struct QuotaEngine {
    clock: SharedClock,
    accounts: Mutex<HashMap<String, Account>>,
    estimates: Mutex<HashMap<String, u64>>,
}

impl QuotaEngine {
    pub fn new(clock: SharedClock) -> Arc<Self> {
        Arc::new(Self {
            clock,
            accounts: Mutex::new(HashMap::new()),
            estimates: Mutex::new(HashMap::new()),
        })
    }

    fn with_account<R>(
        &self,
        account: &str,
        policy: &QuotaPolicy,
        f: impl FnOnce(&mut Account, u64) -> R,
    ) -> R {
        let now = self.clock.now_secs();
        let mut accounts = self.accounts.lock().unwrap();
        let acc = accounts
            .entry(account.to_owned())
            .or_insert_with(|| Account::new(policy.window.max(1), now));
        acc.resize(policy.window.max(1));
        f(acc, now)
    }

    /// Admits a call and holds a reservation of `estimate_micros` until the
    /// returned guard settles or drops.
    pub fn reserve(
        self: &Arc<Self>,
        account: &str,
        policy: &QuotaPolicy,
        estimate_micros: u64,
    ) -> Result<Reservation, AccessError> {
        self.with_account(account, policy, |acc, now| {
            acc.admit(policy, now, estimate_micros)?;
            acc.in_flight += 1;
            acc.reserved += estimate_micros;
            Ok(())
        })?;
        Ok(Reservation {
            engine: self.clone(),
            account: account.to_owned(),
            policy: *policy,
            reserved: estimate_micros,
            open: true,
        })
    }

    /// Admission check that holds nothing (used for queued async jobs, which
    /// are charged when they finish).
    pub fn check(
        &self,
        account: &str,
        policy: &QuotaPolicy,
        estimate_micros: u64,
    ) -> Result<(), AccessError> {
        self.with_account(account, policy, |acc, now| acc.admit(policy, now, estimate_micros))
    }

    pub fn charge(&self, account: &str, policy: &QuotaPolicy, micros: u64) {
        self.with_account(account, policy, |acc, now| acc.charge(now, micros));
    }

    /// CPU-microseconds charged in the current window.
    pub fn window_usage(&self, account: &str, policy: &QuotaPolicy) -> u64 {
        self.with_account(account, policy, |acc, now| {
            acc.advance(now);
            acc.total
        })
    }

    pub fn in_flight(&self, account: &str) -> u32 {
        self.accounts
            .lock()
            .unwrap()
            .get(account)
            .map(|a| a.in_flight)
            .unwrap_or(0)
    }

    /// Expected CPU cost of one call to `model`: its last measured usage.
    pub fn estimate(&self, model: &str) -> u64 {
        self.estimates.lock().unwrap().get(model).copied().unwrap_or(0)
    }

    pub fn observe(&self, model: &str, usage: &UsageReport) {
        self.estimates
            .lock()
            .unwrap()
            .insert(model.to_owned(), to_micros(usage.cpu_seconds));
    }

    fn release(&self, account: &str, policy: &QuotaPolicy, reserved: u64, charge: Option<u64>) {
        self.with_account(account, policy, |acc, now| {
            acc.in_flight = acc.in_flight.saturating_sub(1);
            acc.reserved = acc.reserved.saturating_sub(reserved);
            if let Some(micros) = charge {
                acc.charge(now, micros);
            }
        });
    }
}

/// An admitted, in-flight call. Dropping it without [`settle`] releases
/// the reservation without charging.
///
/// [`settle`]: Reservation::settle
pub struct Reservation {
    engine: Arc<QuotaEngine>,
    account: String,
    policy: QuotaPolicy,
    reserved: u64,
    open: bool,
}

impl Reservation {
    pub fn settle(mut self, usage: &UsageReport) {
        self.open = false;
        self.engine.release(
            &self.account,
            &self.policy,
            self.reserved,
            Some(to_micros(usage.cpu_seconds)),
        );
    }
}

impl Drop for Reservation {
    fn drop(&mut self) {
        if self.open {
            self.engine
                .release(&self.account, &self.policy, self.reserved, None);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::MockClock;

    fn usage(cpu: f64) -> UsageReport {
        UsageReport {
            cpu_seconds: cpu,
            wall_seconds: cpu,
        }
    }

    fn policy(cpu: f64, window: u64, max_concurrent: u32) -> QuotaPolicy {
        QuotaPolicy {
            cpu_seconds_per_window: cpu,
            window,
            max_concurrent,
        }
    }

    #[test]
    fn third_heavy_call_waits_for_window_slide() {
        let clock = MockClock::new(1_000_000);
        let engine = QuotaEngine::new(Arc::new(clock.clone()));
        let p = policy(10.0, 60, 4);
        let est = to_micros(4.0);
        engine.reserve("a", &p, est).unwrap().settle(&usage(4.0));
        clock.advance_secs(1);
        engine.reserve("a", &p, est).unwrap().settle(&usage(4.0));
        clock.advance_secs(1);
        let err = engine.reserve("a", &p, est).err().unwrap();
        match err {
            AccessError::QuotaExceeded { retry_after_secs, .. } => assert_eq!(retry_after_secs, 58),
            other => panic!("{other:?}"),
        }
        clock.advance_secs(57);
        assert!(engine.reserve("a", &p, est).is_err());
        clock.advance_secs(1);
        assert!(engine.reserve("a", &p, est).is_ok());
    }

    #[test]
    fn concurrency_cap() {
        let engine = QuotaEngine::new(Arc::new(MockClock::new(0)));
        let p = policy(100.0, 60, 1);
        let first = engine.reserve("a", &p, 0).unwrap();
        assert!(matches!(
            engine.reserve("a", &p, 0),
            Err(AccessError::QuotaExceeded { retry_after_secs: 1, .. })
        ));
        drop(first);
        assert_eq!(engine.in_flight("a"), 0);
        assert!(engine.reserve("a", &p, 0).is_ok());
    }

    #[test]
    fn zero_usage_calls_always_admitted() {
        let engine = QuotaEngine::new(Arc::new(MockClock::new(0)));
        let p = policy(0.5, 60, 4);
        engine.reserve("a", &p, 0).unwrap().settle(&usage(0.5));
        for _ in 0..10 {
            engine.reserve("a", &p, 0).unwrap().settle(&usage(0.0));
        }
        assert_eq!(engine.window_usage("a", &p), 500_000);
    }

    #[test]
    fn accounts_are_independent() {
        let engine = QuotaEngine::new(Arc::new(MockClock::new(0)));
        let p = policy(1.0, 60, 4);
        engine.reserve("a", &p, 0).unwrap().settle(&usage(5.0));
        assert!(engine.reserve("a", &p, 1).is_err());
        assert!(engine.reserve("b", &p, 1).is_ok());
    }

    #[test]
    fn window_resize_keeps_recent_charges() {
        let clock = MockClock::new(0);
        let engine = QuotaEngine::new(Arc::new(clock.clone()));
        engine.charge("a", &policy(10.0, 60, 1), 3);
        clock.advance_secs(10);
        engine.charge("a", &policy(10.0, 60, 1), 5);
        assert_eq!(engine.window_usage("a", &policy(10.0, 5, 1)), 5);
        assert_eq!(engine.window_usage("a", &policy(10.0, 60, 1)), 5);
    }
}
