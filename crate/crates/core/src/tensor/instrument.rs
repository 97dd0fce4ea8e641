//! Per-thread count of multiply-accumulates executed by forward matmuls and
//! convolutions. Used to cross-check the closed-form cost model.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset_macs() {
    MACS.with(|m| m.set(0));
}

pub fn macs() -> u64 {
    MACS.with(|m| m.get())
}

pub(crate) fn add_macs(n: u64) {
    MACS.with(|m| m.set(m.get() + n));
}
