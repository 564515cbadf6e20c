//! Full-precision float formatting for text output.
//!
//! All floating output is printed with 17 significant digits so parsing the
//! text back yields the original bits.

/// Formats with 17 significant digits in scientific notation.
pub fn full(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::full;

    #[test]
    fn formatting_round_trips() {
        for &x in &[
            0.0,
            1.0,
            -1.5,
            0.1,
            2.0 / 3.0,
            1e-300,
            6.02214076e23,
            f64::MIN_POSITIVE,
            std::f64::consts::PI,
        ] {
            let parsed: f64 = full(x).parse().unwrap();
            assert_eq!(parsed.to_bits(), x.to_bits(), "{x} -> {}", full(x));
        }
    }

    #[test]
    fn plain_values_look_as_expected() {
        assert_eq!(full(0.5), "5.0000000000000000e-1");
        assert_eq!(full(2.0), "2.0000000000000000e0");
    }
}
