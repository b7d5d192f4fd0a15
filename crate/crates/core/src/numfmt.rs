//! Numeric formatting shared by every emitted document.

/// Rounds `value` to 9 significant digits.
///
/// Serializing the result with the shortest round-trip representation then
/// prints at most 9 significant digits.
pub fn round_sig9(value: f64) -> f64 {
    if !value.is_finite() || value == 0.0 {
        return value;
    }
    format!("{value:.8e}").parse().unwrap_or(value)
}

/// Text form of [`round_sig9`].
pub fn sig9(value: f64) -> String {
    let rounded = round_sig9(value);
    if rounded == 0.0 {
        return "0".to_string();
    }
    format!("{rounded}")
}

/// Two-decimal presentation used in ranking tables.
pub fn two_decimals(value: f64) -> String {
    format!("{value:.2}")
}
