//! Multiply-accumulate instrumentation.
//!
//! Every matmul kernel reports `m * n * k` to the active counter of its
//! thread. Counting is thread-local so concurrent sessions never mix their
//! readings.

use std::cell::Cell;

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Accumulates matmul multiply-add counts while alive.
///
/// Exactly one counter may be active per thread; `start` resets the running
/// total. Dropping the counter deactivates instrumentation.
#[derive(Debug)]
pub struct MacCounter {
    _priv: (),
}

impl MacCounter {
    /// Activate counting on this thread, starting from zero.
    ///
    /// Panics if a counter is already active on the thread.
    pub fn start() -> MacCounter {
        ACTIVE.with(|a| {
            assert!(!a.get(), "a MacCounter is already active on this thread");
            a.set(true);
        });
        COUNT.with(|c| c.set(0));
        MacCounter { _priv: () }
    }

    /// Total multiply-adds recorded since `start` (or the last `take`).
    pub fn count(&self) -> u64 {
        COUNT.with(|c| c.get())
    }

    /// Read the running total and reset it to zero.
    ///
    /// Useful for per-phase accounting within one instrumented run.
    pub fn take(&self) -> u64 {
        COUNT.with(|c| {
            let v = c.get();
            c.set(0);
            v
        })
    }
}

impl Drop for MacCounter {
    fn drop(&mut self) {
        ACTIVE.with(|a| a.set(false));
    }
}

/// Called by matmul kernels. No-op unless a counter is active.
#[inline]
pub(crate) fn record(macs: u64) {
    ACTIVE.with(|a| {
        if a.get() {
            COUNT.with(|c| c.set(c.get() + macs));
        }
    });
}
