//! ASCII point-cloud files: one `x y z [r g b]` point per line, `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};

pub fn parse_cloud(text: &str) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let values = trimmed
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("not a number: {tok:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != 3 && values.len() != 6 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 or 6 values, found {}", values.len()),
            });
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {w} values like earlier lines, found {}", values.len()),
                })
            }
            _ => {}
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse { line: line_no, message: "non-finite value".into() });
        }
        positions.push([values[0], values[1], values[2]]);
        if values.len() == 6 {
            let c = [values[3], values[4], values[5]];
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Parse { line: line_no, message: "color channel outside [0, 1]".into() });
            }
            colors.push(c);
        }
    }
    let colors = (width == Some(6)).then_some(colors);
    Ok(PointCloud { positions, colors })
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    parse_cloud(&std::fs::read_to_string(path)?)
}

/// Formats a cloud; `f64` display is shortest round-trip, so parsing the
/// output reproduces the cloud exactly.
pub fn format_cloud(cloud: &PointCloud, header: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        for line in h.lines() {
            let _ = writeln!(out, "# {line}");
        }
    }
    for (i, p) in cloud.positions.iter().enumerate() {
        let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
        if let Some(c) = &cloud.colors {
            let _ = write!(out, " {} {} {}", c[i][0], c[i][1], c[i][2]);
        }
        out.push('\n');
    }
    out
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud, header: Option<&str>) -> Result<()> {
    std::fs::write(path, format_cloud(cloud, header))?;
    Ok(())
}
