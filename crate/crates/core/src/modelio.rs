//! Shared helpers for the JSON model files.
//!
//! Model files are plain JSON, but files written by numeric tooling often
//! contain bare `NaN` / `Infinity` tokens. Those are rewritten into strings
//! before parsing so the loaders can reject them as non-finite values
//! instead of failing with an opaque syntax error.

use serde::de::{self, Deserializer};
use serde::Deserialize;

/// Quote bare `NaN`, `Infinity` and `-Infinity` tokens that appear outside
/// string literals.
pub(crate) fn quote_nonfinite_literals(text: &str) -> String {
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len() + 16);
    let mut in_string = false;
    let mut escaped = false;
    let mut i = 0;
    while i < bytes.len() {
        let ch = bytes[i];
        if in_string {
            out.push(ch as char);
            if ch >= 0x80 {
                // copy the rest of a multi-byte char verbatim
                let c = text[i..].chars().next().expect("char boundary");
                out.pop();
                out.push(c);
                i += c.len_utf8();
                continue;
            }
            if escaped {
                escaped = false;
            } else if ch == b'\\' {
                escaped = true;
            } else if ch == b'"' {
                in_string = false;
            }
            i += 1;
            continue;
        }
        if ch == b'"' {
            in_string = true;
            out.push('"');
            i += 1;
            continue;
        }
        let rest = &text[i..];
        let token = ["-Infinity", "Infinity", "NaN"]
            .into_iter()
            .find(|t| rest.starts_with(t));
        if let Some(token) = token {
            out.push('"');
            out.push_str(token);
            out.push('"');
            i += token.len();
            continue;
        }
        // Multi-byte UTF-8 can only occur inside strings in valid JSON, but
        // copy whole chars anyway so malformed input still reaches the parser.
        let c = rest.chars().next().expect("non-empty remainder");
        out.push(c);
        i += c.len_utf8();
    }
    out
}

/// A JSON number that may also be spelled as one of the strings
/// `"NaN"`, `"Infinity"` or `"-Infinity"`.
pub(crate) fn lenient_f64<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }
    match Repr::deserialize(deserializer)? {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) => match s.as_str() {
            "NaN" => Ok(f64::NAN),
            "Infinity" => Ok(f64::INFINITY),
            "-Infinity" => Ok(f64::NEG_INFINITY),
            other => Err(de::Error::custom(format!("expected a number, found string {other:?}"))),
        },
    }
}

pub(crate) fn lenient_vec<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    struct Wrapped(#[serde(deserialize_with = "lenient_f64")] f64);
    let v: Vec<Wrapped> = Vec::deserialize(deserializer)?;
    Ok(v.into_iter().map(|w| w.0).collect())
}

pub(crate) fn lenient_matrix<'de, D: Deserializer<'de>>(
    deserializer: D,
) -> Result<Vec<Vec<f64>>, D::Error> {
    #[derive(Deserialize)]
    struct Row(#[serde(deserialize_with = "lenient_vec")] Vec<f64>);
    let v: Vec<Row> = Vec::deserialize(deserializer)?;
    Ok(v.into_iter().map(|r| r.0).collect())
}
