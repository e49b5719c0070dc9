//! Allocation probe: records the largest tensor buffer created on the
//! current thread while a probe is active.

use std::cell::Cell;

thread_local! {
    static PEAK: Cell<Option<usize>> = const { Cell::new(None) };
}

pub(crate) fn record(numel: usize) {
    PEAK.with(|p| {
        if let Some(peak) = p.get() {
            if numel > peak {
                p.set(Some(numel));
            }
        }
    });
}

/// Runs `f` and returns its result together with the element count of the
/// largest tensor allocated during the call. Nested probes are flattened
/// into the outermost one.
pub fn peak_elements<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let outer = PEAK.with(|p| p.replace(Some(0)));
    let out = f();
    let peak = PEAK.with(|p| p.get().unwrap_or(0));
    PEAK.with(|p| p.set(outer.map(|o| o.max(peak))));
    (out, peak)
}
