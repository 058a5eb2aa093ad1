//! Plain-text formats: two-column tables and node-keyed records.
//!
//! Lines are whitespace or comma separated; `#` starts a comment. Numbers are
//! written with 12 significant digits so files diff cleanly across runs.

use crate::error::{Error, Result};

/// Formats with 12 significant digits in scientific notation.
pub fn fmt12(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    format!("{x:.11e}")
}

fn fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect()
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

fn number(s: &str, line: usize) -> Result<f64> {
    s.parse::<f64>().map_err(|e| Error::Parse { line, msg: format!("{s:?}: {e}") })
}

/// Parses a two-column numeric table. A non-numeric first line is treated as
/// a header.
pub fn parse_two_columns(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (idx, (line, content)) in content_lines(text).enumerate() {
        let f = fields(content);
        if f.len() != 2 {
            return Err(Error::Parse { line, msg: format!("expected 2 columns, got {}", f.len()) });
        }
        if idx == 0 && f[0].parse::<f64>().is_err() {
            continue;
        }
        out.push((number(f[0], line)?, number(f[1], line)?));
    }
    if out.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok(out)
}

pub fn write_two_columns(header: (&str, &str), rows: &[(f64, f64)]) -> String {
    let mut s = format!("{} {}\n", header.0, header.1);
    for (a, b) in rows {
        s.push_str(&format!("{} {}\n", fmt12(*a), fmt12(*b)));
    }
    s
}

/// Parses `key value...` records; `key` is the first field.
pub fn parse_keyed(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    for (line, content) in content_lines(text) {
        let f = fields(content);
        let vals = f[1..].iter().map(|s| number(s, line)).collect::<Result<Vec<_>>>()?;
        out.push((f[0].to_string(), vals));
    }
    Ok(out)
}

pub fn write_keyed(rows: &[(String, Vec<f64>)]) -> String {
    let mut s = String::new();
    for (key, vals) in rows {
        s.push_str(key);
        for v in vals {
            s.push(' ');
            s.push_str(&fmt12(*v));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_digits() {
        assert_eq!(fmt12(11.246291601828), "1.12462916018e1");
        assert_eq!(fmt12(0.0), "0");
        assert_eq!(fmt12(-0.5), "-5.00000000000e-1");
    }

    #[test]
    fn two_columns_with_header_and_comments() {
        let t = "nu g\n# comment\n-1, 2\n0 0 # zero\n1 2\n";
        let rows = parse_two_columns(t).unwrap();
        assert_eq!(rows, vec![(-1.0, 2.0), (0.0, 0.0), (1.0, 2.0)]);
        assert!(parse_two_columns("1 2 3\n").is_err());
        assert!(parse_two_columns("# nothing\n").is_err());
    }

    #[test]
    fn keyed_round_trip() {
        let rows = vec![("ru".to_string(), vec![0.5, 1.25]), ("x".to_string(), vec![3.0])];
        let back = parse_keyed(&write_keyed(&rows)).unwrap();
        assert_eq!(back, rows);
    }
}
