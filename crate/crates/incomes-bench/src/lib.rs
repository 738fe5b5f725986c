//! Re-exports for the criterion benches.
pub use incomes_core;
