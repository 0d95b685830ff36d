//! Brute-force reference for the rolling-window quota: keeps every charge
//! as a `(second, micros)` event and sums the window on each question.

use std::sync::Arc;

use prism_core::access::{AccessError, QuotaEngine, QuotaPolicy, Reservation};
use prism_core::clock::{Clock, MockClock};
use prism_core::runtime::UsageReport;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub struct Oracle {
    pub policy: QuotaPolicy,
    charges: Vec<(u64, u64)>,
    held: Vec<u64>,
}

impl Oracle {
    pub fn new(policy: QuotaPolicy) -> Self {
        Self {
            policy,
            charges: Vec::new(),
            held: Vec::new(),
        }
    }

    fn charged_at(&self, now: u64) -> u64 {
        self.charges
            .iter()
            .filter(|(s, _)| *s <= now && *s + self.policy.window > now)
            .map(|(_, m)| m)
            .sum()
    }

    fn fits(&self, charged: u64, need: u64) -> bool {
        let used = charged + self.held.iter().sum::<u64>();
        let budget = (self.policy.cpu_seconds_per_window * 1e6).round() as u64;
        used == 0 || used + need <= budget
    }

    /// `Ok(())` or `Err(retry_after_secs)`.
    pub fn admit(&self, now: u64, need: u64) -> Result<(), u64> {
        if self.held.len() as u32 >= self.policy.max_concurrent {
            return Err(1);
        }
        if self.fits(self.charged_at(now), need) {
            return Ok(());
        }
        // Only charges already made can leave the window.
        let past: u64 = (1..=self.policy.window)
            .find(|k| {
                let later = now + k;
                let charged: u64 = self
                    .charges
                    .iter()
                    .filter(|(s, _)| *s + self.policy.window > later)
                    .map(|(_, m)| m)
                    .sum();
                self.fits(charged, need)
            })
            .unwrap_or(self.policy.window);
        Err(past)
    }
}

fn engine_result(r: Result<Reservation, AccessError>) -> Result<Reservation, u64> {
    r.map_err(|e| match e {
        AccessError::QuotaExceeded { retry_after_secs, .. } => retry_after_secs,
        other => panic!("unexpected {other:?}"),
    })
}

/// Runs one random schedule of reserve / settle / drop / check / charge /
/// clock moves against both the engine and the oracle. Returns the number
/// of admission decisions compared and how many of them were rejections,
/// or a description of the first disagreement.
pub fn run_schedule(seed: u64, steps: usize) -> Result<(usize, usize), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let window = [1u64, 2, 5, 10, 60][rng.random_range(0..5)];
    let policy = QuotaPolicy {
        cpu_seconds_per_window: rng.random_range(1..=20) as f64 * 0.1,
        window,
        max_concurrent: rng.random_range(1..=4),
    };
    let clock = MockClock::new(rng.random_range(0..10_000_000));
    let engine = QuotaEngine::new(Arc::new(clock.clone()));
    let mut oracle = Oracle::new(policy);
    let mut held: Vec<Reservation> = Vec::new();
    let mut compared = 0;
    let mut rejected = 0;
    let amount = |rng: &mut StdRng| rng.random_range(0..=8u64) * 100_000;

    for step in 0..steps {
        let now = clock.now_secs();
        match rng.random_range(0..10) {
            0..=3 => {
                let need = amount(&mut rng);
                let expected = oracle.admit(now, need);
                let got = engine_result(engine.reserve("acct", &policy, need));
                compared += 1;
                rejected += usize::from(expected.is_err());
                match (got, expected) {
                    (Ok(r), Ok(())) => {
                        held.push(r);
                        oracle.held.push(need);
                    }
                    (Err(a), Err(b)) if a == b => {}
                    (got, expected) => {
                        return Err(format!(
                            "seed {seed} step {step}: reserve({need}) at {now}: engine {:?}, oracle {expected:?}",
                            got.map(|_| ())
                        ))
                    }
                }
            }
            4 => {
                let need = amount(&mut rng);
                let expected = oracle.admit(now, need);
                let got = engine.check("acct", &policy, need).map_err(|e| match e {
                    AccessError::QuotaExceeded { retry_after_secs, .. } => retry_after_secs,
                    other => panic!("unexpected {other:?}"),
                });
                compared += 1;
                rejected += usize::from(expected.is_err());
                if got != expected {
                    return Err(format!(
                        "seed {seed} step {step}: check({need}) at {now}: engine {got:?}, oracle {expected:?}"
                    ));
                }
            }
            5 | 6 if !held.is_empty() => {
                let i = rng.random_range(0..held.len());
                let r = held.swap_remove(i);
                oracle.held.swap_remove(i);
                let used = amount(&mut rng);
                r.settle(&UsageReport {
                    cpu_seconds: used as f64 / 1e6,
                    wall_seconds: 0.0,
                });
                oracle.charges.push((now, used));
            }
            7 if !held.is_empty() => {
                let i = rng.random_range(0..held.len());
                drop(held.swap_remove(i));
                oracle.held.swap_remove(i);
            }
            8 => {
                let used = amount(&mut rng);
                engine.charge("acct", &policy, used);
                oracle.charges.push((now, used));
            }
            _ => clock.advance_ms(rng.random_range(0..=(window * 1500))),
        }
        let usage = engine.window_usage("acct", &policy);
        if usage != oracle.charged_at(clock.now_secs()) {
            return Err(format!(
                "seed {seed} step {step}: window usage {usage}, oracle {}",
                oracle.charged_at(clock.now_secs())
            ));
        }
    }
    Ok((compared, rejected))
}
