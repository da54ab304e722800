//! A counting global allocator used to check that low-rank scoring never
//! materializes an `f×f` buffer.
//!
//! Binaries and test targets opt in with
//! `#[global_allocator] static A: attnpool::alloc_track::TrackingAlloc = TrackingAlloc;`.
//! Tracking is per thread so concurrently running tests do not interfere.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

pub struct TrackingAlloc;

static INSTALLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static LARGEST: Cell<usize> = const { Cell::new(0) };
    static TOTAL: Cell<usize> = const { Cell::new(0) };
}

unsafe impl GlobalAlloc for TrackingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        System.alloc(layout)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        System.alloc_zeroed(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        note(new_size);
        System.realloc(ptr, layout, new_size)
    }
}

#[inline]
fn note(size: usize) {
    INSTALLED.store(true, Ordering::Relaxed);
    // try_with: the thread-local may already be torn down during thread exit.
    let _ = ACTIVE.try_with(|active| {
        if active.get() {
            let _ = LARGEST.try_with(|l| l.set(l.get().max(size)));
            let _ = TOTAL.try_with(|t| t.set(t.get() + size));
        }
    });
}

/// Allocation statistics of one tracked region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocStats {
    /// Largest single allocation request, in bytes.
    pub largest: usize,
    /// Sum of all allocation requests, in bytes.
    pub total: usize,
}

/// Whether [`TrackingAlloc`] is the process's global allocator.
pub fn is_installed() -> bool {
    drop(std::hint::black_box(Box::new(0u8)));
    INSTALLED.load(Ordering::Relaxed)
}

/// Runs `f` while recording allocations made on this thread. Returns `None`
/// for the stats when the tracking allocator is not installed.
pub fn track<R>(f: impl FnOnce() -> R) -> (R, Option<AllocStats>) {
    let installed = is_installed();
    LARGEST.with(|l| l.set(0));
    TOTAL.with(|t| t.set(0));
    ACTIVE.with(|a| a.set(true));
    let out = f();
    ACTIVE.with(|a| a.set(false));
    let stats = AllocStats {
        largest: LARGEST.with(Cell::get),
        total: TOTAL.with(Cell::get),
    };
    (out, installed.then_some(stats))
}
