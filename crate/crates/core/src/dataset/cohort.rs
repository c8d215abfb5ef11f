//! Patient metadata (`patients.csv`) and per-cohort summary statistics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetManifest, Result};
use crate::tiler::ClassLabel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub cohort: ClassLabel,
    pub age_years: u32,
    pub n_biopsies: u32,
    pub screening_interval_days: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub n: usize,
    pub median_age: f64,
    pub age_range: (u32, u32),
    pub mean_biopsies: f64,
    pub mean_interval_days: f64,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn median(sorted: &[u32]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    }
}

/// Summary of one cohort's patients.
pub fn summarize_cohort(patients: &[PatientRecord]) -> Result<CohortStats> {
    if patients.is_empty() {
        return Err(DatasetError::EmptyCohort);
    }
    let n = patients.len();
    let mut ages: Vec<u32> = patients.iter().map(|p| p.age_years).collect();
    ages.sort_unstable();
    let biopsies: u64 = patients.iter().map(|p| p.n_biopsies as u64).sum();
    let interval: u64 = patients.iter().map(|p| p.screening_interval_days as u64).sum();
    Ok(CohortStats {
        n,
        median_age: median(&ages),
        age_range: (ages[0], ages[n - 1]),
        mean_biopsies: round2(biopsies as f64 / n as f64),
        mean_interval_days: round2(interval as f64 / n as f64),
    })
}

/// Per-cohort summaries for every cohort present in `patients`.
pub fn cohort_summary(patients: &[PatientRecord]) -> Result<BTreeMap<ClassLabel, CohortStats>> {
    if patients.is_empty() {
        return Err(DatasetError::EmptyCohort);
    }
    let mut groups: BTreeMap<ClassLabel, Vec<PatientRecord>> = BTreeMap::new();
    for p in patients {
        groups.entry(p.cohort).or_default().push(p.clone());
    }
    groups
        .into_iter()
        .map(|(c, ps)| Ok((c, summarize_cohort(&ps)?)))
        .collect()
}

fn validate(p: &PatientRecord) -> Result<()> {
    if p.n_biopsies < 1 {
        return Err(DatasetError::Patient {
            patient_id: p.patient_id.clone(),
            message: "n_biopsies must be at least 1".into(),
        });
    }
    Ok(())
}

pub fn read_patients_csv(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    let path = path.as_ref();
    let err = |m: String| DatasetError::Format {
        path: path.to_path_buf(),
        message: m,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let rec: PatientRecord = row.map_err(|e| err(e.to_string()))?;
        validate(&rec)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_patients_csv(path: impl AsRef<Path>, patients: &[PatientRecord]) -> Result<()> {
    let path = path.as_ref();
    let err = |m: String| DatasetError::Format {
        path: path.to_path_buf(),
        message: m,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(e.to_string()))?;
    for p in patients {
        w.serialize(p).map_err(|e| err(e.to_string()))?;
    }
    w.flush().map_err(|e| err(e.to_string()))
}

impl DatasetManifest {
    /// Every tile's label must equal its patient's cohort.
    pub fn check_cohorts(&self, patients: &[PatientRecord]) -> Result<()> {
        let by_id: BTreeMap<&str, ClassLabel> = patients.iter().map(|p| (p.patient_id.as_str(), p.cohort)).collect();
        for e in &self.entries {
            match by_id.get(e.patient_id.as_str()) {
                Some(&c) if c == e.label => {}
                Some(_) => {
                    return Err(DatasetError::Patient {
                        patient_id: e.patient_id.clone(),
                        message: format!("cohort disagrees with label of tile in {}", e.slide_id),
                    })
                }
                None => {
                    return Err(DatasetError::Patient {
                        patient_id: e.patient_id.clone(),
                        message: "no patient record".into(),
                    })
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patient(id: &str, cohort: ClassLabel, age: u32, b: u32, days: u32) -> PatientRecord {
        PatientRecord {
            patient_id: id.into(),
            cohort,
            age_years: age,
            n_biopsies: b,
            screening_interval_days: days,
        }
    }

    #[test]
    fn single_patient() {
        let s = summarize_cohort(&[patient("a", ClassLabel::Progressor, 61, 2, 400)]).unwrap();
        assert_eq!(s.median_age, 61.0);
        assert_eq!(s.age_range, (61, 61));
        assert_eq!(s.mean_biopsies, 2.0);
        assert_eq!(s.mean_interval_days, 400.0);
    }

    #[test]
    fn even_median_and_rounding() {
        let ps = [
            patient("a", ClassLabel::NonProgressor, 60, 1, 0),
            patient("b", ClassLabel::NonProgressor, 71, 2, 10),
            patient("c", ClassLabel::NonProgressor, 64, 2, 11),
        ];
        let s = summarize_cohort(&ps).unwrap();
        assert_eq!(s.median_age, 64.0);
        assert_eq!(s.mean_biopsies, 1.67);
        assert_eq!(s.mean_interval_days, 7.0);
        let s = summarize_cohort(&ps[..2]).unwrap();
        assert_eq!(s.median_age, 65.5);
        assert!(matches!(summarize_cohort(&[]), Err(DatasetError::EmptyCohort)));
        assert!(matches!(cohort_summary(&[]), Err(DatasetError::EmptyCohort)));
    }

    #[test]
    fn csv_roundtrip() {
        let ps = vec![
            patient("a", ClassLabel::NonProgressor, 60, 1, 0),
            patient("b", ClassLabel::Progressor, 71, 3, 1000),
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("patients.csv");
        write_patients_csv(&p, &ps).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("patient_id,cohort,age_years,n_biopsies,screening_interval_days\n"));
        assert_eq!(read_patients_csv(&p).unwrap(), ps);
    }
}
