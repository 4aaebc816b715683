//! Per-thread recording of conv/linear layer invocations, used for FLOP
//! estimates and shape traces.

use std::cell::RefCell;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub layer: String,
    pub kind: &'static str,
    pub output: Vec<usize>,
    pub macs: u64,
}

thread_local! {
    static ACTIVE: RefCell<Option<Vec<TraceEntry>>> = const { RefCell::new(None) };
}

pub fn enabled() -> bool {
    ACTIVE.with(|a| a.borrow().is_some())
}

pub fn record(layer: &str, kind: &'static str, output: &[usize], macs: u64) {
    ACTIVE.with(|a| {
        if let Some(entries) = a.borrow_mut().as_mut() {
            entries.push(TraceEntry {
                layer: layer.to_string(),
                kind,
                output: output.to_vec(),
                macs,
            });
        }
    });
}

/// Runs `f` with recording switched on and returns its result with the trace.
/// Nested calls see only their own entries.
pub fn capture<T, E>(f: impl FnOnce() -> Result<T, E>) -> Result<(T, Vec<TraceEntry>), E> {
    let saved = ACTIVE.with(|a| a.borrow_mut().replace(Vec::new()));
    let out = f();
    let entries = ACTIVE.with(|a| {
        let mut slot = a.borrow_mut();
        let entries = slot.take().unwrap_or_default();
        *slot = saved;
        entries
    });
    out.map(|v| (v, entries))
}

/// Total multiply-accumulates of the conv/linear layers executed by `f`.
pub fn count_macs<T, E>(f: impl FnOnce() -> Result<T, E>) -> Result<(T, u64), E> {
    capture(f).map(|(v, e)| (v, e.iter().map(|t| t.macs).sum()))
}
