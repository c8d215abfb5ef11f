//! `manifest.jsonl`: a header line followed by one entry per line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassCounts, DatasetError, DatasetManifest, ManifestEntry, Provenance, Result, Split};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    seed: u64,
    fractions: [f64; 3],
    provenance: Provenance,
    counts: BTreeMap<Split, ClassCounts>,
}

fn format_err(path: &Path, message: impl ToString) -> DatasetError {
    DatasetError::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

pub fn write_manifest(path: impl AsRef<Path>, m: &DatasetManifest) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        kind: "tileforge-manifest".into(),
        seed: m.seed,
        fractions: m.fractions,
        provenance: m.provenance.clone(),
        counts: m.counts(),
    };
    let tmp = path.with_extension("jsonl.tmp");
    let res = File::create(&tmp).and_then(|f| {
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for e in &m.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    });
    res.and_then(|_| std::fs::rename(&tmp, path)).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        format_err(path, e)
    })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(|e| format_err(path, e))?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| format_err(path, "empty file"))?
        .map_err(|e| format_err(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| format_err(path, format!("header: {e}")))?;
    if header.kind != "tileforge-manifest" {
        return Err(format_err(path, format!("unexpected header kind {:?}", header.kind)));
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| format_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 2)))?;
        entries.push(e);
    }
    let m = DatasetManifest {
        entries,
        seed: header.seed,
        fractions: header.fractions,
        provenance: header.provenance,
    };
    if m.counts() != header.counts {
        return Err(format_err(path, "header counts do not match entries"));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn manifest_roundtrips(p in 1usize..6, n in 1usize..6, per in 1usize..5, seed in any::<u64>()) {
            let mut e = synthetic_entries(ClassLabel::Progressor, p, per, "P");
            e.extend(synthetic_entries(ClassLabel::NonProgressor, n, per, "N"));
            let m = balance_undersample(DatasetManifest::from_entries(e, seed), seed).unwrap();
            let m = stratified_split(m, [0.6, 0.25, 0.15], seed).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("manifest.jsonl");
            write_manifest(&path, &m).unwrap();
            prop_assert_eq!(read_manifest(&path).unwrap(), m);
        }
    }
}
