//! Polygon annotations in level-0 pixel coordinates.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Result, SlideError};

/// Sub-grid resolution per axis for [`coverage_fraction`].
pub const COVERAGE_SUBSAMPLES: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "ROI")]
    Roi,
    #[serde(rename = "EXCLUDE")]
    Exclude,
}

impl Label {
    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "ROI" => Some(Label::Roi),
            "EXCLUDE" => Some(Label::Exclude),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Region {
    pub label: Label,
    pub polygon: Vec<[f64; 2]>,
    #[serde(skip)]
    bbox: [f64; 4],
}

impl Region {
    pub fn new(label: Label, polygon: Vec<[f64; 2]>) -> Result<Region> {
        if polygon.len() < 3 {
            return Err(SlideError::Parse(format!(
                "polygon needs at least 3 vertices, got {}",
                polygon.len()
            )));
        }
        if polygon
            .iter()
            .any(|p| !(p[0].is_finite() && p[1].is_finite() && p[0] >= 0.0 && p[1] >= 0.0))
        {
            return Err(SlideError::Parse("polygon vertices must be finite and non-negative".into()));
        }
        let area = shoelace(&polygon);
        if area.abs() < 1e-12 {
            return Err(SlideError::Parse("polygon has zero area".into()));
        }
        let mut bbox = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in &polygon {
            bbox[0] = bbox[0].min(p[0]);
            bbox[1] = bbox[1].min(p[1]);
            bbox[2] = bbox[2].max(p[0]);
            bbox[3] = bbox[3].max(p[1]);
        }
        Ok(Region { label, polygon, bbox })
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        if x < self.bbox[0] || x > self.bbox[2] || y < self.bbox[1] || y > self.bbox[3] {
            return false;
        }
        let pts = &self.polygon;
        let mut inside = false;
        let mut j = pts.len() - 1;
        for i in 0..pts.len() {
            let (xi, yi) = (pts[i][0], pts[i][1]);
            let (xj, yj) = (pts[j][0], pts[j][1]);
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    fn overlaps(&self, rect: [f64; 4]) -> bool {
        !(rect[2] < self.bbox[0] || rect[0] > self.bbox[2] || rect[3] < self.bbox[1] || rect[1] > self.bbox[3])
    }
}

fn shoelace(p: &[[f64; 2]]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let a = p[i];
        let b = p[(i + 1) % p.len()];
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s
}

/// The pathologist annotations of one slide.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    pub regions: Vec<Region>,
}

impl AnnotationSet {
    pub fn has_label(&self, label: Label) -> bool {
        self.regions.iter().any(|r| r.label == label)
    }

    pub fn push(&mut self, region: Region) {
        self.regions.push(region);
    }

    /// Serializes to the on-disk annotation format.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.regions).expect("annotations serialize")
    }
}

/// Parses annotation JSON: an array of `{label, polygon: [[x, y], ...]}`.
pub fn parse_annotations(text: &str) -> Result<AnnotationSet> {
    let root: Value = serde_json::from_str(text).map_err(|e| SlideError::Parse(e.to_string()))?;
    let items = root
        .as_array()
        .ok_or_else(|| SlideError::Parse("annotation file must be a JSON array".into()))?;
    let mut regions = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let label = item
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| SlideError::Parse(format!("region {i}: missing string label")))?;
        let label = Label::parse(label).ok_or_else(|| SlideError::UnknownLabel(label.to_string()))?;
        let poly = item
            .get("polygon")
            .and_then(Value::as_array)
            .ok_or_else(|| SlideError::Parse(format!("region {i}: missing polygon array")))?;
        let mut pts = Vec::with_capacity(poly.len());
        for v in poly {
            let pair = v.as_array().filter(|a| a.len() == 2);
            let xy = pair.and_then(|a| Some([a[0].as_f64()?, a[1].as_f64()?]));
            pts.push(xy.ok_or_else(|| SlideError::Parse(format!("region {i}: vertex must be [x, y]")))?);
        }
        // a repeated closing vertex is allowed
        if pts.len() > 3 && pts.first() == pts.last() {
            pts.pop();
        }
        regions.push(Region::new(label, pts).map_err(|e| match e {
            SlideError::Parse(m) => SlideError::Parse(format!("region {i}: {m}")),
            other => other,
        })?);
    }
    Ok(AnnotationSet { regions })
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SlideError::io(path, e))?;
    parse_annotations(&text)
}

/// Fraction of the level-0 rectangle `(x, y, w, h)` covered by the union of
/// `label` polygons, sampled at the centres of a 16x16 sub-grid.
pub fn coverage_fraction(ann: &AnnotationSet, label: Label, rect: (f64, f64, f64, f64)) -> f64 {
    let (x, y, w, h) = rect;
    let bounds = [x, y, x + w, y + h];
    let regions: Vec<&Region> = ann
        .regions
        .iter()
        .filter(|r| r.label == label && r.overlaps(bounds))
        .collect();
    if regions.is_empty() || w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let n = COVERAGE_SUBSAMPLES;
    let mut hits = 0u32;
    for j in 0..n {
        let py = y + (j as f64 + 0.5) * h / n as f64;
        for i in 0..n {
            let px = x + (i as f64 + 0.5) * w / n as f64;
            if regions.iter().any(|r| r.contains(px, py)) {
                hits += 1;
            }
        }
    }
    hits as f64 / (n * n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(label: Label, x0: f64, y0: f64, x1: f64, y1: f64) -> Region {
        Region::new(label, vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]).unwrap()
    }

    #[test]
    fn parses_one_roi_square() {
        let ann = parse_annotations(r#"[{"label":"ROI","polygon":[[0,0],[10,0],[10,10],[0,10]]}]"#).unwrap();
        assert_eq!(ann.regions.len(), 1);
        assert_eq!(ann.regions[0].label, Label::Roi);
    }

    #[test]
    fn rejects_bad_input() {
        let two = r#"[{"label":"ROI","polygon":[[0,0],[10,0]]}]"#;
        assert!(matches!(parse_annotations(two), Err(SlideError::Parse(_))));
        let tumor = r#"[{"label":"Tumor","polygon":[[0,0],[10,0],[10,10]]}]"#;
        assert!(matches!(parse_annotations(tumor), Err(SlideError::UnknownLabel(l)) if l == "Tumor"));
        let flat = r#"[{"label":"ROI","polygon":[[0,0],[5,5],[10,10]]}]"#;
        assert!(matches!(parse_annotations(flat), Err(SlideError::Parse(_))));
        let neg = r#"[{"label":"ROI","polygon":[[-1,0],[5,0],[5,5]]}]"#;
        assert!(matches!(parse_annotations(neg), Err(SlideError::Parse(_))));
        assert!(matches!(parse_annotations("{}"), Err(SlideError::Parse(_))));
    }

    #[test]
    fn closing_vertex_is_dropped() {
        let ann =
            parse_annotations(r#"[{"label":"EXCLUDE","polygon":[[0,0],[4,0],[4,4],[0,4],[0,0]]}]"#).unwrap();
        assert_eq!(ann.regions[0].polygon.len(), 4);
    }

    #[test]
    fn coverage_examples() {
        let mut ann = AnnotationSet::default();
        ann.push(square(Label::Roi, 0.0, 0.0, 100.0, 100.0));
        assert_eq!(coverage_fraction(&ann, Label::Roi, (10.0, 10.0, 50.0, 50.0)), 1.0);
        assert_eq!(coverage_fraction(&ann, Label::Exclude, (10.0, 10.0, 50.0, 50.0)), 0.0);

        let mut half = AnnotationSet::default();
        half.push(square(Label::Roi, 0.0, 0.0, 512.0, 1024.0));
        let f = coverage_fraction(&half, Label::Roi, (0.0, 0.0, 1024.0, 1024.0));
        assert!((f - 0.5).abs() <= 1.0 / 16.0);
    }

    #[test]
    fn roundtrips_through_json() {
        let mut ann = AnnotationSet::default();
        ann.push(square(Label::Roi, 1.0, 2.0, 30.0, 40.0));
        ann.push(square(Label::Exclude, 5.0, 5.0, 6.0, 6.0));
        let back = parse_annotations(&ann.to_json()).unwrap();
        assert_eq!(back, ann);
    }
}
