//! Exact text encoding of `f64` as C99-style hexadecimal floats, e.g.
//! `0x1.8p+1` for 3.0. Only finite values are representable.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HexFloatError {
    #[error("non-finite value cannot be encoded")]
    NonFinite,
    #[error("malformed hexadecimal float {0:?}")]
    Malformed(String),
}

const FRAC_BITS: u32 = 52;
const FRAC_MASK: u64 = (1 << FRAC_BITS) - 1;

pub fn format(v: f64) -> Result<String, HexFloatError> {
    if !v.is_finite() {
        return Err(HexFloatError::NonFinite);
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let biased = ((bits >> FRAC_BITS) & 0x7ff) as i32;
    let frac = bits & FRAC_MASK;
    let (lead, exp) = match (biased, frac) {
        (0, 0) => return Ok(format!("{sign}0x0p+0")),
        (0, _) => (0, -1022),
        _ => (1, biased - 1023),
    };
    let digits = format!("{frac:013x}");
    let digits = digits.trim_end_matches('0');
    let dot = if digits.is_empty() { "" } else { "." };
    Ok(format!("{sign}0x{lead}{dot}{digits}p{exp:+}"))
}

/// Parses the output of [`format`]: an optional sign, `0x`, a leading
/// digit `0` or `1`, up to 13 fraction digits, and a binary exponent.
pub fn parse(s: &str) -> Result<f64, HexFloatError> {
    let bad = || HexFloatError::Malformed(s.to_string());
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let rest = rest.strip_prefix("0x").or_else(|| rest.strip_prefix("0X")).ok_or_else(bad)?;
    let (mantissa, exp) = rest.split_once(['p', 'P']).ok_or_else(bad)?;
    let exp: i32 = exp.parse().map_err(|_| bad())?;
    let (lead, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if frac.len() > 13 || !frac.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(bad());
    }
    let frac = if frac.is_empty() { 0 } else { u64::from_str_radix(&format!("{frac:0<13}"), 16).map_err(|_| bad())? };
    let sign = (neg as u64) << 63;
    let bits = match lead {
        "0" if frac == 0 => 0,
        "0" if exp == -1022 => frac,
        "1" if (-1022..=1023).contains(&exp) => (((exp + 1023) as u64) << FRAC_BITS) | frac,
        _ => return Err(bad()),
    };
    Ok(f64::from_bits(sign | bits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_values() {
        assert_eq!(format(3.0).unwrap(), "0x1.8p+1");
        assert_eq!(format(1.0).unwrap(), "0x1p+0");
        assert_eq!(format(-0.1).unwrap(), "-0x1.999999999999ap-4");
        assert_eq!(format(-0.0).unwrap(), "-0x0p+0");
        assert_eq!(format(f64::MIN_POSITIVE / 4.0).unwrap(), "0x0.4p-1022");
        assert_eq!(parse("0x1.8p+1").unwrap(), 3.0);
        assert_eq!(parse("0x1p-1074"), Err(HexFloatError::Malformed("0x1p-1074".into())));
        assert!(format(f64::NAN).is_err());
        assert!(parse("1.5").is_err() && parse("0x1.8").is_err() && parse("0x2p+0").is_err());
    }

    proptest! {
        #[test]
        fn round_trips_every_finite_bit_pattern(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            let back = parse(&format(v).unwrap()).unwrap();
            prop_assert_eq!(back.to_bits(), bits);
        }
    }
}
