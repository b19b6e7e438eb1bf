pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod optim;
pub mod trainer;

/// Worker-thread cap from `CCF_THREADS`; unset or unparsable means 1.
/// Tests always run single-worker.
pub fn effective_workers() -> usize {
    if cfg!(test) {
        return 1;
    }
    std::env::var("CCF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
