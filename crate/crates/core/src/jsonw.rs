//! Tiny JSON writing helpers for the canonical artifacts (graph JSON,
//! metric reports). Writing by hand keeps key order and float formatting
//! under our control.

/// Formats a float with 17 significant digits so parsing recovers the exact
/// `f64` bits.
pub fn fmt_f64(v: f64) -> String {
    debug_assert!(v.is_finite(), "refusing to serialize non-finite float");
    format!("{v:.16e}")
}

pub fn fmt_f64_array(vals: &[f64]) -> String {
    let parts: Vec<String> = vals.iter().map(|&v| fmt_f64(v)).collect();
    format!("[{}]", parts.join(","))
}
