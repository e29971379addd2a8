//! Thread CPU clock for per-iteration timing.

use std::time::Duration;

/// CPU time consumed by the calling thread.
///
/// Chains run one per thread, so thread time is the per-chain analogue of
/// process CPU time.
pub fn thread_cpu_time() -> Duration {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec and the clock id is a
    // constant supported on every Linux/BSD/macOS target.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return Duration::ZERO;
    }
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_is_monotone_under_work() {
        let t0 = thread_cpu_time();
        let mut acc = 0.0f64;
        for i in 0..2_000_000 {
            acc += (i as f64).sqrt();
        }
        assert!(acc > 0.0);
        assert!(thread_cpu_time() >= t0);
    }
}
