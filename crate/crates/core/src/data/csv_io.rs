//! CSV import and export of labeled corpora.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::{Dataset, LabeledSample, Payload};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayloadLayout {
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
    Vector {
        dim: usize,
    },
}

impl PayloadLayout {
    pub fn len(&self) -> usize {
        match *self {
            PayloadLayout::Image {
                height,
                width,
                channels,
            } => height * width * channels,
            PayloadLayout::Vector { dim } => dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Header-based schema. With `value_columns` unset every non-label column
/// is a value, in file order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    pub value_columns: Option<Vec<String>>,
    pub layout: PayloadLayout,
}

impl CsvSchema {
    pub fn image(height: usize, width: usize, channels: usize) -> Self {
        Self {
            label_column: "label".into(),
            value_columns: None,
            layout: PayloadLayout::Image {
                height,
                width,
                channels,
            },
        }
    }

    pub fn vector(dim: usize) -> Self {
        Self {
            label_column: "label".into(),
            value_columns: None,
            layout: PayloadLayout::Vector { dim },
        }
    }
}

fn format_err(line: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        line,
        detail: detail.into(),
    }
}

/// Reads a labeled CSV. Image values in `[0,255]` with a maximum above 1
/// are rescaled to `[0,1]`; anything else outside `[0,1]` is rejected.
/// Vector values are taken as is. Labels must be non-negative integers.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| format_err(0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| format_err(1, e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| format_err(1, format!("missing column {name:?}")))
    };
    let label_idx = col(&schema.label_column)?;
    let value_idx: Vec<usize> = match &schema.value_columns {
        Some(names) => names.iter().map(|n| col(n)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != label_idx).collect(),
    };
    if value_idx.len() != schema.layout.len() {
        return Err(format_err(
            1,
            format!(
                "schema expects {} values per row, header provides {}",
                schema.layout.len(),
                value_idx.len()
            ),
        ));
    }

    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| format_err(line, e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(format_err(
                line,
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        let label_str = rec[label_idx].trim();
        let label: usize = label_str.parse().map_err(|_| {
            format_err(
                line,
                format!("label {label_str:?} is not a non-negative integer"),
            )
        })?;
        let values = value_idx
            .iter()
            .map(|&i| {
                let s = rec[i].trim();
                let v: f64 = s.parse().map_err(|_| {
                    format_err(
                        line,
                        format!("value {s:?} in column {} is not a number", &headers[i]),
                    )
                })?;
                if !v.is_finite() {
                    return Err(format_err(
                        line,
                        format!("non-finite value in column {}", &headers[i]),
                    ));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((label, values));
    }
    if rows.is_empty() {
        return Err(format_err(1, "no data rows"));
    }

    let scale = match schema.layout {
        PayloadLayout::Vector { .. } => 1.0,
        PayloadLayout::Image { .. } => {
            let mut max = f64::NEG_INFINITY;
            for (k, (_, vals)) in rows.iter().enumerate() {
                for &v in vals {
                    if v < 0.0 {
                        return Err(format_err(k + 2, format!("negative pixel value {v}")));
                    }
                    max = max.max(v);
                }
            }
            if max > 255.0 {
                let line = rows
                    .iter()
                    .position(|(_, r)| r.iter().any(|&v| v > 255.0))
                    .unwrap()
                    + 2;
                return Err(format_err(
                    line,
                    format!("pixel value {max} fits neither [0,1] nor [0,255]"),
                ));
            }
            if max > 1.0 {
                1.0 / 255.0
            } else {
                1.0
            }
        }
    };

    let num_classes = rows.iter().map(|(l, _)| l + 1).max().unwrap_or(0);
    let mut present = vec![false; num_classes];
    rows.iter().for_each(|(l, _)| present[*l] = true);
    if num_classes < 2 || present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::DegenerateLabels);
    }

    let samples = rows
        .into_iter()
        .enumerate()
        .map(|(i, (label, vals))| {
            let payload = match schema.layout {
                PayloadLayout::Vector { .. } => Payload::Vector(vals),
                PayloadLayout::Image {
                    height,
                    width,
                    channels,
                } => Payload::Image(Image::new(
                    height,
                    width,
                    channels,
                    vals.into_iter().map(|v| v * scale).collect(),
                )?),
            };
            Ok(LabeledSample {
                payload,
                label,
                id: i as u64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, num_classes)
}

/// Writes `label,v0,v1,...` rows readable by [`ingest_csv`] with the
/// returned schema. Values are written in shortest round-trip form.
pub fn export_csv(data: &Dataset, path: &Path) -> Result<CsvSchema> {
    let layout = match &data.samples[0].payload {
        Payload::Vector(v) => PayloadLayout::Vector { dim: v.len() },
        Payload::Image(i) => PayloadLayout::Image {
            height: i.height,
            width: i.width,
            channels: i.channels,
        },
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let prefix = if matches!(layout, PayloadLayout::Image { .. }) {
        "p"
    } else {
        "x"
    };
    let mut header = vec!["label".to_string()];
    header.extend((0..layout.len()).map(|i| format!("{prefix}{i}")));
    w.write_record(&header)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for s in &data.samples {
        let vals = match &s.payload {
            Payload::Vector(v) => v,
            Payload::Image(i) => &i.pixels,
        };
        let mut rec = vec![s.label.to_string()];
        rec.extend(vals.iter().map(|v| v.to_string()));
        w.write_record(&rec)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(CsvSchema {
        label_column: "label".into(),
        value_columns: None,
        layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_blobs, gen_shapes};

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("d.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn round_trips_are_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        let blobs = gen_blobs(3, 5, 10, 0.2, 1).unwrap();
        let schema = export_csv(&blobs, &p).unwrap();
        assert_eq!(ingest_csv(&p, &schema).unwrap().samples, blobs.samples);
        let shapes = gen_shapes(12, 12, 1).unwrap();
        let schema = export_csv(&shapes, &p).unwrap();
        assert_eq!(ingest_csv(&p, &schema).unwrap().samples, shapes.samples);
    }

    #[test]
    fn rescales_byte_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "label,p0,p1\n0,0,255\n1,51,102\n");
        let d = ingest_csv(&p, &CsvSchema::image(1, 2, 1)).unwrap();
        let Payload::Image(img) = &d.samples[1].payload else {
            panic!()
        };
        assert!((img.pixels[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("label,p0,p1\n0,0.1,0.2\n1,0.3\n", 3),
            ("label,p0,p1\n0,0.1,0.2\n1,-0.3,0.1\n", 3),
            ("label,p0,p1\n0,0.1,0.2\n1,300,0.1\n", 3),
            ("label,p0,p1\nx,0.1,0.2\n1,0.3,0.1\n", 2),
        ];
        for (body, want) in cases {
            let p = write(&dir, body);
            match ingest_csv(&p, &CsvSchema::image(1, 2, 1)) {
                Err(Error::Format { line, .. }) => assert_eq!(line, want, "{body}"),
                other => panic!("{body}: {other:?}"),
            }
        }
    }

    #[test]
    fn single_class_is_degenerate() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "label,p0\n1,0.1\n1,0.2\n");
        assert!(matches!(
            ingest_csv(&p, &CsvSchema::image(1, 1, 1)),
            Err(Error::DegenerateLabels)
        ));
    }
}
