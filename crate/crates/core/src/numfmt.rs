//! Decimal float formatting shared by every text export.
//!
//! All CSV writers print `f64` values with 17 significant digits, which is
//! enough to round-trip any finite double exactly. Keeping the formatter in
//! one place guarantees that writing a value to disk and reading it back
//! yields the identical bit pattern, so file-based pipelines match in-memory
//! ones byte for byte.

/// Format a float with 17 significant digits (exact round trip).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Parse a float previously produced by [`fmt_f64`] (or any decimal literal).
pub fn parse_f64(s: &str) -> Result<f64, std::num::ParseFloatError> {
    s.trim().parse::<f64>()
}
