//! Per-cohort demographics from a patients.csv.
//!
//! cargo run --example cohort_summary [patients.csv]

use tileforge::dataset::{cohort_summary, read_patients_csv, PatientRecord};
use tileforge::ClassLabel;

fn demo() -> Vec<PatientRecord> {
    let rows = [
        (ClassLabel::Progressor, 81, 1, 0),
        (ClassLabel::Progressor, 77, 3, 1210),
        (ClassLabel::Progressor, 66, 2, 640),
        (ClassLabel::NonProgressor, 58, 2, 1500),
        (ClassLabel::NonProgressor, 71, 3, 1825),
        (ClassLabel::NonProgressor, 69, 2, 1402),
        (ClassLabel::NonProgressor, 74, 2, 1960),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, &(cohort, age, b, days))| PatientRecord {
            patient_id: format!("PT-{i:03}"),
            cohort,
            age_years: age,
            n_biopsies: b,
            screening_interval_days: days,
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let patients = match std::env::args().nth(1) {
        Some(path) => read_patients_csv(path)?,
        None => demo(),
    };
    for (cohort, s) in cohort_summary(&patients)? {
        println!(
            "{cohort:?}: n {}, median age {:.1} (range {}-{}), mean biopsies {:.2}, mean interval {:.0} days",
            s.n, s.median_age, s.age_range.0, s.age_range.1, s.mean_biopsies, s.mean_interval_days
        );
    }
    Ok(())
}
