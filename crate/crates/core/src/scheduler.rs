//! In-process worker pool: jobs go out on a shared queue, results come back
//! on a channel and are stored by job index, so the reduction order is the
//! canonical job order whatever the completion order.
//!
//! Faults can be injected deterministically for testing. An injected fault
//! discards the job's result and re-issues the job; the re-issued job
//! recomputes bitwise the same result, because every random stream is a pure
//! function of the job's identity.

use std::sync::atomic::{AtomicBool, Ordering};

use crossbeam_channel::unbounded;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub workers: usize,
    /// Re-issues allowed per job after an injected fault.
    pub retry_budget: u32,
    /// Probability that one attempt of a job is lost.
    pub fault_rate: f64,
    /// Seed of the fault-injection hash.
    pub fault_seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            workers: 1,
            retry_budget: 3,
            fault_rate: 0.0,
            fault_seed: 0,
        }
    }
}

impl PoolConfig {
    pub fn serial() -> Self {
        Self::default()
    }

    pub fn with_workers(workers: usize) -> Self {
        PoolConfig {
            workers,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::InvalidArgument("worker count must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.fault_rate) {
            return Err(Error::InvalidArgument(format!(
                "fault rate {} outside [0, 1)",
                self.fault_rate
            )));
        }
        Ok(())
    }

    /// Whether attempt `attempt` of job `job` is lost.
    pub fn injects_fault(&self, job: usize, attempt: u32) -> bool {
        if self.fault_rate <= 0.0 {
            return false;
        }
        let mut x = self.fault_seed ^ 0x5851_f42d_4c95_7f2d;
        for v in [job as u64, attempt as u64] {
            x = mix(x ^ mix(v));
        }
        ((x >> 11) as f64 / (1u64 << 53) as f64) < self.fault_rate
    }
}

fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStats {
    pub jobs: usize,
    pub attempts: usize,
    pub injected_faults: usize,
}

enum Outcome<R> {
    Done(R),
    Lost,
    Failed(Error),
}

/// Runs `work` on every job and returns the results in job order.
///
/// `label` names a job in error messages. A job whose attempts are all lost
/// to injected faults aborts the run; an error returned by `work` itself
/// aborts immediately, since a deterministic job would fail again.
pub fn schedule_jobs<J, R, W, L>(
    jobs: &[J],
    pool: &PoolConfig,
    work: W,
    label: L,
) -> Result<(Vec<R>, PoolStats)>
where
    J: Sync,
    R: Send,
    W: Fn(&J) -> Result<R> + Sync,
    L: Fn(&J) -> String,
{
    pool.validate()?;
    let mut stats = PoolStats {
        jobs: jobs.len(),
        ..PoolStats::default()
    };
    let mut results: Vec<Option<R>> = jobs.iter().map(|_| None).collect();
    if jobs.is_empty() {
        return Ok((Vec::new(), stats));
    }
    let cancel = AtomicBool::new(false);
    let (job_tx, job_rx) = unbounded::<(usize, u32)>();
    let (res_tx, res_rx) = unbounded::<(usize, u32, Outcome<R>)>();
    for idx in 0..jobs.len() {
        job_tx.send((idx, 0)).expect("queue open");
    }
    let workers = pool.workers.min(jobs.len());
    let outcome = std::thread::scope(|scope| {
        for _ in 0..workers {
            let job_rx = job_rx.clone();
            let res_tx = res_tx.clone();
            let (work, cancel) = (&work, &cancel);
            scope.spawn(move || {
                for (idx, attempt) in job_rx.iter() {
                    if cancel.load(Ordering::Relaxed) {
                        break;
                    }
                    let out = match work(&jobs[idx]) {
                        Ok(_) if pool.injects_fault(idx, attempt) => Outcome::Lost,
                        Ok(r) => Outcome::Done(r),
                        Err(e) => Outcome::Failed(e),
                    };
                    if res_tx.send((idx, attempt, out)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(res_tx);
        let mut remaining = jobs.len();
        let mut failure = None;
        while remaining > 0 {
            let Ok((idx, attempt, out)) = res_rx.recv() else {
                break;
            };
            stats.attempts += 1;
            match out {
                Outcome::Done(r) => {
                    results[idx] = Some(r);
                    remaining -= 1;
                }
                Outcome::Lost => {
                    stats.injected_faults += 1;
                    if attempt >= pool.retry_budget {
                        failure = Some(Error::JobFailed {
                            job: label(&jobs[idx]),
                            attempts: attempt + 1,
                            cause: "injected fault".into(),
                        });
                        break;
                    }
                    job_tx.send((idx, attempt + 1)).expect("queue open");
                }
                Outcome::Failed(e) => {
                    failure = Some(Error::JobFailed {
                        job: label(&jobs[idx]),
                        attempts: attempt + 1,
                        cause: e.to_string(),
                    });
                    break;
                }
            }
        }
        if failure.is_some() {
            cancel.store(true, Ordering::Relaxed);
        }
        drop(job_tx);
        failure
    });
    if let Some(e) = outcome {
        return Err(e);
    }
    let results = results
        .into_iter()
        .map(|r| r.expect("every job completed"))
        .collect();
    Ok((results, stats))
}
