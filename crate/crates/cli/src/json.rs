use std::io::{self, Write};

use serde::Serialize;
use serde_json::ser::{Formatter, Serializer};

/// Compact JSON with every float written to 17 significant digits.
struct Precise;

impl Formatter for Precise {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

pub fn to_string<T: Serialize + ?Sized>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = Serializer::with_formatter(&mut buf, Precise);
    value
        .serialize(&mut ser)
        .expect("serializing plain data cannot fail");
    String::from_utf8(buf).expect("serde_json emits utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_carry_17_digits() {
        assert_eq!(to_string(&0.1f64), "1.0000000000000001e-1");
        assert_eq!(to_string(&[1.0f64, -2.5]), "[1.0000000000000000e0,-2.5000000000000000e0]");
        assert_eq!(to_string(&3u32), "3");
        let v: f64 = serde_json::from_str(&to_string(&std::f64::consts::PI)).unwrap();
        assert_eq!(v, std::f64::consts::PI);
    }
}
