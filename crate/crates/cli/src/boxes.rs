//! Plain-text detection and ground-truth records.
//!
//! One record per line: `class conf x_min y_min x_max y_max` for detections
//! and `class x_min y_min x_max y_max` for ground truth. Blank lines and
//! `#` comments are ignored.

use std::path::Path;

use cca_core::{BBox, DetectionBox, GroundTruthBox};

use crate::error::{CliError, Result};

fn records<'a>(
    text: &'a str,
    context: &'a str,
    fields: usize,
) -> impl Iterator<Item = Result<(usize, Vec<&'a str>)>> + 'a {
    text.lines().enumerate().filter_map(move |(i, raw)| {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        Some(if parts.len() == fields {
            Ok((i + 1, parts))
        } else {
            Err(CliError::Parse {
                context: context.to_string(),
                line: i + 1,
                message: format!("expected {fields} fields, got {}", parts.len()),
            })
        })
    })
}

fn field<V: std::str::FromStr>(context: &str, line: usize, name: &str, raw: &str) -> Result<V> {
    raw.parse().map_err(|_| CliError::Parse {
        context: context.to_string(),
        line,
        message: format!("invalid {name} `{raw}`"),
    })
}

fn bbox(context: &str, line: usize, parts: &[&str]) -> Result<BBox> {
    let v: Vec<f64> = parts
        .iter()
        .map(|p| field(context, line, "coordinate", p))
        .collect::<Result<_>>()?;
    BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| CliError::Parse {
        context: context.to_string(),
        line,
        message: e.to_string(),
    })
}

pub fn parse_detections(text: &str, context: &str) -> Result<Vec<DetectionBox>> {
    records(text, context, 6)
        .map(|r| {
            let (line, p) = r?;
            let confidence: f64 = field(context, line, "confidence", p[1])?;
            if !confidence.is_finite() {
                return Err(CliError::Parse {
                    context: context.to_string(),
                    line,
                    message: "confidence must be finite".into(),
                });
            }
            Ok(DetectionBox {
                class_id: field(context, line, "class", p[0])?,
                confidence,
                bbox: bbox(context, line, &p[2..])?,
            })
        })
        .collect()
}

pub fn parse_ground_truth(text: &str, context: &str) -> Result<Vec<GroundTruthBox>> {
    records(text, context, 5)
        .map(|r| {
            let (line, p) = r?;
            Ok(GroundTruthBox {
                class_id: field(context, line, "class", p[0])?,
                bbox: bbox(context, line, &p[1..])?,
            })
        })
        .collect()
}

pub fn format_detections(dets: &[DetectionBox]) -> String {
    dets.iter()
        .map(|d| {
            let b = d.bbox;
            format!("{} {} {} {} {} {}\n", d.class_id, d.confidence, b.x_min, b.y_min, b.x_max, b.y_max)
        })
        .collect()
}

pub fn format_ground_truth(gts: &[GroundTruthBox]) -> String {
    gts.iter()
        .map(|g| {
            let b = g.bbox;
            format!("{} {} {} {} {}\n", g.class_id, b.x_min, b.y_min, b.x_max, b.y_max)
        })
        .collect()
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionBox>> {
    parse_detections(&read(path)?, &path.display().to_string())
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruthBox>> {
    parse_ground_truth(&read(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let text = "# dets\n0 0.9 0 0 10 10\n\n3 0.25 1.5 2 4 8.25\n";
        let dets = parse_detections(text, "d").unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[1].class_id, 3);
        assert_eq!(parse_detections(&format_detections(&dets), "d").unwrap(), dets);
        let gts = parse_ground_truth("1 0 0 5 5\n", "g").unwrap();
        assert_eq!(parse_ground_truth(&format_ground_truth(&gts), "g").unwrap(), gts);
    }

    #[test]
    fn errors_name_the_line() {
        for (text, line) in [("0 0.5 0 0 1\n", 1), ("0 0.5 0 0 1 1\n1 x 0 0 1 1\n", 2), ("\n0 0.5 5 5 1 1\n", 2)] {
            match parse_detections(text, "d") {
                Err(CliError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
