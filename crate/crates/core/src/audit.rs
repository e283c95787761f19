//! Runtime audit of ground-truth access.
//!
//! Adaptation runs inside an [`AdaptationScope`]; any read of target ground
//! truth through [`crate::synth::Sample::gt_masks`] on the same thread while
//! a scope is open is counted.

use std::cell::Cell;

thread_local! {
    static DEPTH: Cell<usize> = const { Cell::new(0) };
    static READS: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn record_gt_read() {
    if DEPTH.with(Cell::get) > 0 {
        READS.with(|r| r.set(r.get() + 1));
    }
}

/// Guard marking the current thread as inside the adaptation code path.
pub struct AdaptationScope {
    start: usize,
}

impl AdaptationScope {
    pub fn enter() -> Self {
        DEPTH.with(|d| d.set(d.get() + 1));
        AdaptationScope {
            start: READS.with(Cell::get),
        }
    }

    /// Ground-truth reads observed since this scope was entered.
    pub fn gt_reads(&self) -> usize {
        READS.with(Cell::get) - self.start
    }
}

impl Drop for AdaptationScope {
    fn drop(&mut self) {
        DEPTH.with(|d| d.set(d.get() - 1));
    }
}
