//! Deterministic text formatting for numeric artifacts. Every CSV the
//! toolkit writes goes through [`float`], and every JSON artifact through
//! [`to_json_string`], so reruns are byte-identical.

use serde::Serialize;

/// 17 significant digits: enough to round-trip any f64 exactly.
pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

/// serde_json formatter that writes every float with 17 significant digits.
struct SigDigitFormatter;

impl serde_json::ser::Formatter for SigDigitFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:e}")
    }
}

/// Serialize with full-precision floats. Field order follows the struct
/// definition, so output is deterministic byte for byte.
pub fn to_json_string<T: Serialize>(value: &T) -> crate::error::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigitFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub(crate) fn parse_float(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.is_empty() {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}
