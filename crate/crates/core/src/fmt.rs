//! Number formatting shared by every writer: ten significant digits in
//! scientific notation, `.` as the decimal separator.

pub fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else {
        format!("{x:.9e}")
    }
}

pub fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NaN".to_string(), num)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_significant_digits() {
        assert_eq!(num(0.1), "1.000000000e-1");
        assert_eq!(num(-1234.56789012), "-1.234567890e3");
        assert_eq!(opt(None), "NaN");
        assert_eq!("1.234567890e3".parse::<f64>().unwrap(), 1234.56789);
    }
}
