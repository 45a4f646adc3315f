pub mod eval;
pub mod predict;
pub mod synth;
pub mod train;

/// Worker count for per-image parallel work: `TILEMARK_THREADS` caps it,
/// default is the machine's available parallelism.
pub fn worker_count() -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("TILEMARK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(n) if n >= 1 => n.min(available),
        _ => available,
    }
}
