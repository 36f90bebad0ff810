//! Live tensor payload accounting.
//!
//! Every graph buffer registers its byte size here on allocation and
//! releases it when the owning graph is dropped. The peak is the desk
//! analogue of accelerator memory usage.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| peak.set(peak.get().max(now)));
    });
}

pub(crate) fn free(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by graphs on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// Highest value of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|peak| peak.set(live));
}
