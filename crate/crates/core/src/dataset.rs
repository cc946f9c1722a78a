//! Annotation and detection file formats.
//!
//! Annotations: one face per line, `image_file x1 y1 w h` (corner plus size,
//! pixels); body boxes live in a parallel file with identical ordering.
//! Detections: one per line, `image_file score x1 y1 w h`. `#` starts a
//! comment in both.

use crate::boxes::Bbox;
use crate::error::{Error, Result};
use crate::eval::Detection;
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image: String,
    pub bbox: Bbox,
}

fn parse_fields(path: &Path, lineno: usize, line: &str, want: usize) -> Result<Vec<String>> {
    let fields: Vec<String> = line.split_whitespace().map(str::to_string).collect();
    if fields.len() != want {
        return Err(Error::ParseLine {
            path: path.to_path_buf(),
            line: lineno,
            detail: format!("expected {want} fields, got {}", fields.len()),
        });
    }
    Ok(fields)
}

fn parse_f32(path: &Path, lineno: usize, field: &str) -> Result<f32> {
    field.parse().map_err(|_| Error::ParseLine {
        path: path.to_path_buf(),
        line: lineno,
        detail: format!("not a number: '{field}'"),
    })
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f = parse_fields(path, i + 1, line, 5)?;
        let x1 = parse_f32(path, i + 1, &f[1])?;
        let y1 = parse_f32(path, i + 1, &f[2])?;
        let w = parse_f32(path, i + 1, &f[3])?;
        let h = parse_f32(path, i + 1, &f[4])?;
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::ParseLine {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("non-positive box extents {w}x{h}"),
            });
        }
        out.push(Annotation {
            image: f[0].clone(),
            bbox: Bbox::from_corners(x1, y1, x1 + w, y1 + h),
        });
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut text = String::new();
    for a in annotations {
        let (x1, y1, x2, y2) = a.bbox.corners();
        text.push_str(&format!(
            "{} {:.2} {:.2} {:.2} {:.2}\n",
            a.image,
            x1,
            y1,
            x2 - x1,
            y2 - y1
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn annotations_by_image(annotations: &[Annotation]) -> HashMap<String, Vec<Bbox>> {
    let mut map: HashMap<String, Vec<Bbox>> = HashMap::new();
    for a in annotations {
        map.entry(a.image.clone()).or_default().push(a.bbox);
    }
    map
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f = parse_fields(path, i + 1, line, 6)?;
        let score = parse_f32(path, i + 1, &f[1])?;
        let x1 = parse_f32(path, i + 1, &f[2])?;
        let y1 = parse_f32(path, i + 1, &f[3])?;
        let w = parse_f32(path, i + 1, &f[4])?;
        let h = parse_f32(path, i + 1, &f[5])?;
        if !score.is_finite() {
            return Err(Error::ParseLine {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("non-finite score '{}'", f[1]),
            });
        }
        out.push(Detection {
            image_id: f[0].clone(),
            bbox: Bbox::from_corners(x1, y1, x1 + w, y1 + h),
            score,
        });
    }
    Ok(out)
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let mut text = String::from("# image score x1 y1 w h\n");
    for d in detections {
        let (x1, y1, x2, y2) = d.bbox.corners();
        text.push_str(&format!(
            "{} {:.6} {:.2} {:.2} {:.2} {:.2}\n",
            d.image_id,
            d.score,
            x1,
            y1,
            x2 - x1,
            y2 - y1
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("faces.txt");
        let anns = vec![
            Annotation {
                image: "img_0.pgm".into(),
                bbox: Bbox::from_corners(1.0, 2.0, 11.0, 14.0),
            },
            Annotation {
                image: "img_1.pgm".into(),
                bbox: Bbox::from_corners(5.5, 6.25, 9.5, 9.25),
            },
        ];
        write_annotations(&path, &anns).unwrap();
        let back = read_annotations(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in anns.iter().zip(&back) {
            assert_eq!(a.image, b.image);
            assert!((a.bbox.cx - b.bbox.cx).abs() < 0.01);
            assert!((a.bbox.w - b.bbox.w).abs() < 0.01);
        }
    }

    #[test]
    fn malformed_annotation_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("faces.txt");
        std::fs::write(&path, "img.pgm 1 2 3 4\nimg.pgm 1 2 3\n").unwrap();
        let err = read_annotations(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "got: {err}");
        assert!(err.contains("faces.txt"), "got: {err}");
    }

    #[test]
    fn detection_round_trip_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.txt");
        let dets = vec![Detection {
            image_id: "img_0.pgm".into(),
            bbox: Bbox::from_corners(2.0, 3.0, 10.0, 12.0),
            score: 0.875,
        }];
        write_detections(&path, &dets).unwrap();
        let back = read_detections(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].image_id, "img_0.pgm");
        assert!((back[0].score - 0.875).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_positive_extents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("faces.txt");
        std::fs::write(&path, "img.pgm 1 2 0 4\n").unwrap();
        assert!(read_annotations(&path).is_err());
    }
}
