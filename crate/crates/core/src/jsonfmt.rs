//! `serialize_with` helpers that print floats with 17 significant digits.
//!
//! They emit raw JSON tokens and therefore only work with `serde_json`.
//! Non-finite values become `null`.

use serde::ser::Error as _;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

pub(crate) fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".to_string()
    }
}

pub(crate) fn f64_17<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    RawValue::from_string(format_f64(*v))
        .map_err(S::Error::custom)?
        .serialize(s)
}

pub(crate) fn opt_f64_17<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => f64_17(x, s),
        None => s.serialize_none(),
    }
}
