use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};

const REQUIRED: [&str; 4] = ["candidate_id", "case_id", "bag_id", "label"];

/// Reads a comma-separated dataset with header
/// `candidate_id,case_id,bag_id,label,<feature...>`.
pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::data(format!("unreadable header: {e}")))?
        .clone();
    for (pos, name) in REQUIRED.iter().enumerate() {
        if header.get(pos) != Some(*name) {
            return Err(Error::data(format!(
                "missing required column `{name}` at position {pos}"
            )));
        }
    }
    let feature_names: Vec<String> = header
        .iter()
        .skip(REQUIRED.len())
        .map(str::to_owned)
        .collect();

    let mut samples = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 2;
        let record = record
            .map_err(|e| Error::data(format!("line {line}: ragged or malformed row ({e})")))?;
        let candidate_id = record[0].trim().parse::<u64>().map_err(|_| {
            Error::data(format!(
                "line {line}: invalid candidate_id `{}`",
                &record[0]
            ))
        })?;
        let case_id = record[1].to_owned();
        let bag_id = (!record[2].is_empty()).then(|| record[2].to_owned());
        let label = match record[3].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(Error::data(format!("line {line}: invalid label `{other}`"))),
        };
        let features = record
            .iter()
            .skip(REQUIRED.len())
            .zip(&feature_names)
            .map(|(cell, name)| {
                cell.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Error::data(format!(
                            "line {line}: non-numeric value `{cell}` in feature `{name}`"
                        ))
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample {
            candidate_id,
            case_id,
            bag_id,
            label,
            features,
        });
    }
    Dataset::new(feature_names, samples)
}

/// Canonical text form: shortest round-trip decimal for every value, `\n`
/// line endings, minimal quoting.
pub fn to_csv(ds: &Dataset) -> String {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let header: Vec<&str> = REQUIRED
        .iter()
        .copied()
        .chain(ds.feature_names().iter().map(String::as_str))
        .collect();
    writer.write_record(&header).expect("in-memory write");
    for s in ds.samples() {
        let mut row = Vec::with_capacity(REQUIRED.len() + s.features.len());
        row.push(s.candidate_id.to_string());
        row.push(s.case_id.clone());
        row.push(s.bag_id.clone().unwrap_or_default());
        row.push(s.label.to_string());
        row.extend(s.features.iter().map(|v| v.to_string()));
        writer.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

pub fn save(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(ds)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "candidate_id,case_id,bag_id,label,f1,f2\n\
                         1,p1,,0,0.5,-1\n\
                         2,p1,L1,1,1.25,3\n\
                         3,p2,,0,0,7.125\n";

    #[test]
    fn parses_three_rows() {
        let ds = parse_csv(SMALL).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_features(), 2);
        assert_eq!(ds.samples()[1].bag_id.as_deref(), Some("L1"));
        assert_eq!(ds.samples()[0].bag_id, None);
        assert_eq!(ds.n_positive(), 1);
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let ds = parse_csv(SMALL).unwrap();
        assert_eq!(to_csv(&ds), SMALL);
    }

    #[test]
    fn rejects_bad_label() {
        let text = "candidate_id,case_id,bag_id,label,f\n1,a,,2,0.1\n";
        let err = parse_csv(text).unwrap_err().to_string();
        assert!(err.contains("invalid label"), "{err}");
    }

    #[test]
    fn rejects_malformed_inputs() {
        let missing = "candidate_id,case_id,label,f\n1,a,0,0.1\n";
        assert!(parse_csv(missing)
            .unwrap_err()
            .to_string()
            .contains("missing required column"));
        let ragged = "candidate_id,case_id,bag_id,label,f\n1,a,,0,0.1,9\n";
        assert!(parse_csv(ragged).is_err());
        let text_cell = "candidate_id,case_id,bag_id,label,f\n1,a,,0,abc\n";
        assert!(parse_csv(text_cell)
            .unwrap_err()
            .to_string()
            .contains("non-numeric"));
        let nan_cell = "candidate_id,case_id,bag_id,label,f\n1,a,,0,NaN\n";
        assert!(parse_csv(nan_cell).is_err());
        let dup = "candidate_id,case_id,bag_id,label,f\n1,a,,0,1\n1,b,,0,2\n";
        assert!(parse_csv(dup)
            .unwrap_err()
            .to_string()
            .contains("duplicate"));
    }
}
