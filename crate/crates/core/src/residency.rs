//! Instrumentation for the constant-memory aggregation contract.
//!
//! Every full-resolution sample buffer (a [`SampleTensor`](crate::SampleTensor)
//! or the running mean inside an aggregate) holds a [`Resident`] token. The
//! counters are thread-local, so tests running in parallel do not interfere.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Token registering one resident full-resolution buffer on the current thread.
#[derive(Debug)]
pub struct Resident(());

impl Resident {
    pub fn acquire() -> Self {
        LIVE.with(|live| {
            let now = live.get() + 1;
            live.set(now);
            PEAK.with(|peak| peak.set(peak.get().max(now)));
        });
        Resident(())
    }
}

impl Clone for Resident {
    fn clone(&self) -> Self {
        Resident::acquire()
    }
}

impl Drop for Resident {
    fn drop(&mut self) {
        LIVE.with(|live| live.set(live.get().saturating_sub(1)));
    }
}

/// Number of resident buffers currently alive on this thread.
pub fn live() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak() -> usize {
    PEAK.with(Cell::get)
}

/// Resets the high-water mark to the current live count.
pub fn reset_peak() {
    let now = live();
    PEAK.with(|peak| peak.set(now));
}
