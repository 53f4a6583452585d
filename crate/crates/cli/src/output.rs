//! Artifact writers. Every float is printed as `{:.16e}` (17 significant
//! digits), which round-trips exactly and is stable across platforms.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::config::SCHEMA_VERSION;

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        // NaN / inf / -inf, matching what most CSV readers accept
        format!("{v}")
    }
}

/// Pretty JSON with exponent-form floats.
struct Fmt17<'a>(PrettyFormatter<'a>);

impl Formatter for Fmt17<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(fmt_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn end_object_key<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_key(w)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

#[derive(Serialize)]
struct Versioned<'a, T: Serialize> {
    schema_version: u32,
    kind: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

pub fn to_json<T: Serialize>(kind: &str, body: &T) -> io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Fmt17(PrettyFormatter::new()));
    Versioned {
        schema_version: SCHEMA_VERSION,
        kind,
        body,
    }
    .serialize(&mut ser)
    .map_err(io::Error::other)?;
    buf.push(b'\n');
    Ok(buf)
}

/// Output directory plus the list of files written so far.
pub struct Artifacts {
    dir: PathBuf,
    pub written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn json<T: Serialize>(&mut self, name: &str, kind: &str, body: &T) -> io::Result<()> {
        let bytes = to_json(kind, body)?;
        self.bytes(name, &bytes)
    }

    pub fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> io::Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| io::Error::other(e.to_string()))?;
        self.bytes(name, &bytes)
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.written.push(path);
        Ok(())
    }
}

/// `status=<pass|fail> key=value ...` summary line.
pub struct Summary {
    parts: Vec<String>,
}

impl Summary {
    pub fn new(command: &str, pass: bool) -> Self {
        Summary {
            parts: vec![
                format!("status={}", if pass { "pass" } else { "fail" }),
                format!("command={command}"),
            ],
        }
    }

    pub fn num(mut self, key: &str, v: f64) -> Self {
        self.parts.push(format!("{key}={}", fmt_f64(v)));
        self
    }

    pub fn int(mut self, key: &str, v: impl std::fmt::Display) -> Self {
        self.parts.push(format!("{key}={v}"));
        self
    }

    pub fn line(&self) -> String {
        self.parts.join(" ")
    }
}

/// `prefix_1 .. prefix_n` column names.
pub fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

pub fn nums(values: &[f64]) -> impl Iterator<Item = String> + '_ {
    values.iter().map(|v| fmt_f64(*v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_with_17_digits() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, 0.0, f64::MIN_POSITIVE] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
            let mantissa = s.trim_start_matches('-').split('e').next().unwrap();
            assert_eq!(mantissa.chars().filter(|c| c.is_ascii_digit()).count(), 17, "{s}");
        }
    }

    #[test]
    fn json_uses_exponent_floats_and_parses_back() {
        #[derive(Serialize)]
        struct Body {
            x: f64,
            v: Vec<f64>,
        }
        let bytes = to_json("probe", &Body { x: 0.1, v: vec![1.0, -2.0] }).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.contains("\"x\": 1.0000000000000001e-1"), "{text}");
        let back: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["schema_version"], 1);
        assert_eq!(back["kind"], "probe");
        assert_eq!(back["v"][1].as_f64(), Some(-2.0));
    }

    #[test]
    fn summary_line_format() {
        let s = Summary::new("solve", true).num("y0_1", 0.5).int("paths", 10).line();
        assert_eq!(s, "status=pass command=solve y0_1=5.0000000000000000e-1 paths=10");
    }
}
