//! Text records for named tensors:
//!
//! ```text
//! <name>
//! <rank> <dim_0> ... <dim_{rank-1}>
//! <value_0> <value_1> ...
//! ```
//!
//! Values are written with 17 significant digits so a round trip is exact.

use crate::error::{invalid, Error, Result};
use crate::tensorops::layers::Parameter;
use crate::tensorops::Tensor;

pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Appends one record to `out`.
pub fn write_record(out: &mut String, name: &str, t: &Tensor) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(invalid(format!(
            "record name `{name}` must be nonempty without whitespace"
        )));
    }
    out.push_str(name);
    out.push('\n');
    out.push_str(&t.rank().to_string());
    for d in t.shape() {
        out.push(' ');
        out.push_str(&d.to_string());
    }
    out.push('\n');
    let values: Vec<String> = t.data().iter().map(|&v| format_value(v)).collect();
    out.push_str(&values.join(" "));
    out.push('\n');
    Ok(())
}

pub fn write_params<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> Result<String> {
    let mut out = String::new();
    for p in params {
        write_record(&mut out, p.name(), &p.value)?;
    }
    Ok(out)
}

/// Parses every record in `text` in order.
pub fn read_records(text: &str) -> Result<Vec<(String, Tensor)>> {
    let lines: Vec<&str> = text.lines().collect();
    if !lines.len().is_multiple_of(3) {
        return Err(Error::Parse(format!(
            "{} lines do not form whole records",
            lines.len()
        )));
    }
    lines
        .chunks(3)
        .map(|rec| {
            let name = rec[0].trim().to_string();
            let mut header = rec[1].split_whitespace().map(|s| {
                s.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("{name}: bad shape entry `{s}`: {e}")))
            });
            let rank = header
                .next()
                .ok_or_else(|| Error::Parse(format!("{name}: missing rank")))??;
            let shape = header.collect::<Result<Vec<usize>>>()?;
            if shape.len() != rank {
                return Err(Error::Parse(format!(
                    "{name}: rank {rank} with {} dims",
                    shape.len()
                )));
            }
            let values = rec[2]
                .split_whitespace()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("{name}: bad value `{s}`: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let t = Tensor::new(shape, values).map_err(|e| Error::Parse(format!("{name}: {e}")))?;
            Ok((name, t))
        })
        .collect()
}

/// Loads record values into `params`, matching by name and shape. Every
/// parameter must be present.
pub fn load_params<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    records: &[(String, Tensor)],
) -> Result<()> {
    for p in params {
        let (_, t) = records
            .iter()
            .find(|(n, _)| n == p.name())
            .ok_or_else(|| Error::Parse(format!("missing parameter `{}`", p.name())))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Parse(format!(
                "parameter `{}` has shape {:?}, expected {:?}",
                p.name(),
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn record_layout() {
        let mut out = String::new();
        write_record(
            &mut out,
            "w",
            &Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(
            out,
            "w\n2 1 2\n5.0000000000000000e-1 -1.0000000000000000e0\n"
        );
        let mut out = String::new();
        write_record(&mut out, "s", &Tensor::scalar(0.995)).unwrap();
        assert!(out.starts_with("s\n0\n"));
        assert!(write_record(&mut String::new(), "has space", &Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn malformed_records_fail() {
        assert!(read_records("w\n2 1 2\n1.0\n").is_err());
        assert!(read_records("w\n2 1\n1.0\n").is_err());
        assert!(read_records("w\n1 1\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let t = Tensor::new(vec![values.len()], values).unwrap();
            let mut out = String::new();
            write_record(&mut out, "x", &t).unwrap();
            let back = read_records(&out).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].1, &t);
        }
    }
}
