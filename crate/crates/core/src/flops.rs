//! Per-thread floating-point operation counter.
//!
//! Kernels in [`crate::tensor`] and the sketching code report their work here.
//! Multiply and add are counted separately, so a length-`L` dot product is
//! `2L` operations and an `m×k` by `k×p` product is `2mkp`.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub fn add(ops: u64) {
    COUNTER.with(|c| c.set(c.get().wrapping_add(ops)));
}

pub fn current() -> u64 {
    COUNTER.with(Cell::get)
}

/// Runs `f` and returns its result together with the operations it performed
/// on this thread. Counts made outside `f` are preserved.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = current();
    COUNTER.with(|c| c.set(0));
    let out = f();
    let used = current();
    COUNTER.with(|c| c.set(before.wrapping_add(used)));
    (out, used)
}
