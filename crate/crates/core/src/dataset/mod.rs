//! MCQ records, JSONL ingestion and label aggregation.

pub mod synthetic;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DISTRACTORS: usize = 4;
pub const MAX_RATING: i64 = 5;

/// Component labels in the fixed order used by every 7-row representation.
pub const COMPONENT_LABELS: [&str; 7] = ["S", "A", "D1", "D2", "D3", "D4", "E"];

/// One multiple-choice question and its ratings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McqRecord {
    pub id: String,
    pub stem: String,
    pub answer: String,
    pub distractors: Vec<String>,
    #[serde(default)]
    pub explanation: String,
    /// Individual ratings on the 0..=5 scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratings: Option<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub average_rating: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating_count: Option<usize>,
}

impl McqRecord {
    /// Distractor `i` (0-based), empty when absent.
    pub fn distractor(&self, i: usize) -> &str {
        self.distractors.get(i).map_or("", String::as_str)
    }

    /// `[stem, answer, D1, D2, D3, D4, explanation]`
    pub fn components(&self) -> [&str; 7] {
        [
            &self.stem,
            &self.answer,
            self.distractor(0),
            self.distractor(1),
            self.distractor(2),
            self.distractor(3),
            &self.explanation,
        ]
    }

    pub fn present_distractors(&self) -> usize {
        self.distractors
            .iter()
            .filter(|d| !d.trim().is_empty())
            .count()
    }

    pub fn rating_count(&self) -> usize {
        match (&self.ratings, self.rating_count) {
            (Some(r), _) => r.len(),
            (None, Some(n)) => n,
            (None, None) => 0,
        }
    }

    /// Ground-truth label: the mean of the ratings, or the stored average.
    pub fn label(&self) -> Option<f64> {
        match &self.ratings {
            Some(r) if !r.is_empty() => Some(r.iter().sum::<i64>() as f64 / r.len() as f64),
            _ => self.average_rating,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("record `{}`: {msg}", self.id)));
        if self.id.trim().is_empty() {
            return Err(Error::Validation("record with empty id".into()));
        }
        if self.answer.trim().is_empty() {
            return fail("answer must not be empty".into());
        }
        if self.distractors.len() > MAX_DISTRACTORS {
            return fail(format!(
                "at most {MAX_DISTRACTORS} distractors allowed, got {}",
                self.distractors.len()
            ));
        }
        if self.present_distractors() == 0 {
            return fail("at least one distractor is required".into());
        }
        if let Some(ratings) = &self.ratings {
            if let Some(bad) = ratings.iter().find(|r| !(0..=MAX_RATING).contains(*r)) {
                return fail(format!("rating {bad} outside the 0..=5 scale"));
            }
            if let Some(n) = self.rating_count {
                if n != ratings.len() {
                    return fail(format!(
                        "rating_count {n} disagrees with {} listed ratings",
                        ratings.len()
                    ));
                }
            }
        }
        if let Some(avg) = self.average_rating {
            if !(0.0..=MAX_RATING as f64).contains(&avg) {
                return fail(format!("average_rating {avg} outside [0, 5]"));
            }
            if let Some(r) = &self.ratings {
                if !r.is_empty() {
                    let mean = r.iter().sum::<i64>() as f64 / r.len() as f64;
                    if (mean - avg).abs() > 1e-9 {
                        return fail(format!(
                            "average_rating {avg} inconsistent with ratings mean {mean}"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityDataset {
    pub course: String,
    pub records: Vec<McqRecord>,
    pub provenance: String,
}

impl QualityDataset {
    pub fn new(course: impl Into<String>, records: Vec<McqRecord>, provenance: impl Into<String>) -> Result<Self> {
        let ds = Self {
            course: course.into(),
            records,
            provenance: provenance.into(),
        };
        ds.check_unique_ids()?;
        for r in &ds.records {
            r.validate()?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Labels of every record; errors when any record is unlabeled.
    pub fn labels(&self) -> Result<Vec<f64>> {
        self.records
            .iter()
            .map(|r| {
                r.label()
                    .ok_or_else(|| Error::Validation(format!("record `{}` has no rating", r.id)))
            })
            .collect()
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate id `{}`", r.id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LoadMode {
    #[default]
    Strict,
    Lenient,
}

/// A line rejected in lenient mode.
#[derive(Clone, Debug, PartialEq)]
pub struct LineIssue {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct LoadReport {
    pub dataset: QualityDataset,
    pub skipped: Vec<LineIssue>,
}

/// Read one record per line. Blank lines are ignored; the course name is the
/// file stem.
pub fn load_jsonl(path: &Path, mode: LoadMode) -> Result<LoadReport> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = HashSet::new();

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<McqRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string()));
        match parsed {
            Ok(record) => {
                if !seen.insert(record.id.clone()) {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        message: format!("duplicate id `{}`", record.id),
                    });
                }
                records.push(record);
            }
            Err(message) => match mode {
                LoadMode::Strict => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        message,
                    })
                }
                LoadMode::Lenient => {
                    log::warn!("{}:{line_no}: skipping record: {message}", path.display());
                    skipped.push(LineIssue {
                        line: line_no,
                        message,
                    });
                }
            },
        }
    }

    let course = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(LoadReport {
        dataset: QualityDataset {
            course,
            records,
            provenance: format!("loaded from {}", path.display()),
        },
        skipped,
    })
}

pub fn save_jsonl(dataset: &QualityDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in &dataset.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Keep records with at least `min_ratings` ratings and store each label as
/// `average_rating`.
pub fn filter_and_label(dataset: &QualityDataset, min_ratings: usize) -> Result<QualityDataset> {
    let records: Vec<McqRecord> = dataset
        .records
        .iter()
        .filter(|r| r.rating_count() >= min_ratings && r.label().is_some())
        .map(|r| {
            let mut r = r.clone();
            r.average_rating = r.label();
            r
        })
        .collect();
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no question in `{}` has at least {min_ratings} ratings",
            dataset.course
        )));
    }
    Ok(QualityDataset {
        course: dataset.course.clone(),
        records,
        provenance: format!("{}; filtered to >= {min_ratings} ratings", dataset.provenance),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, ratings: Vec<i64>) -> McqRecord {
        McqRecord {
            id: id.into(),
            stem: "What is two plus two?".into(),
            answer: "Four".into(),
            distractors: vec!["Three".into(), "Five".into()],
            explanation: "Basic arithmetic.".into(),
            ratings: Some(ratings),
            average_rating: None,
            rating_count: None,
        }
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_valid_file() {
        let lines: Vec<String> = (0..3)
            .map(|i| serde_json::to_string(&record(&format!("q{i}"), vec![3, 4])).unwrap())
            .collect();
        let f = write_lines(&lines);
        let report = load_jsonl(f.path(), LoadMode::Strict).unwrap();
        assert_eq!(report.dataset.len(), 3);
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn missing_answer_aborts_strict_and_skips_lenient() {
        let good = serde_json::to_string(&record("q0", vec![3])).unwrap();
        let bad = r#"{"id":"q1","stem":"s","distractors":["x"]}"#.to_string();
        let f = write_lines(&[good, bad]);
        match load_jsonl(f.path(), LoadMode::Strict) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("answer"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let report = load_jsonl(f.path(), LoadMode::Lenient).unwrap();
        assert_eq!(report.dataset.len(), 1);
        assert_eq!(report.skipped[0].line, 2);
    }

    #[test]
    fn rating_out_of_scale_rejected() {
        assert!(matches!(record("q", vec![6]).validate(), Err(Error::Validation(_))));
        assert!(record("q", vec![0, 5]).validate().is_ok());
    }

    #[test]
    fn duplicate_id_rejected() {
        let line = serde_json::to_string(&record("dup", vec![3])).unwrap();
        let f = write_lines(&[line.clone(), line]);
        assert!(matches!(
            load_jsonl(f.path(), LoadMode::Lenient),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn inconsistent_average_rejected() {
        let mut r = record("q", vec![2, 4]);
        r.average_rating = Some(3.0);
        assert!(r.validate().is_ok());
        r.average_rating = Some(3.1);
        assert!(r.validate().is_err());
    }

    #[test]
    fn filter_threshold_and_mean() {
        let ds = QualityDataset::new(
            "c",
            vec![record("nine", vec![3; 9]), record("ten", vec![4; 10])],
            "test",
        )
        .unwrap();
        let f = filter_and_label(&ds, 10).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.records[0].id, "ten");

        let ds = QualityDataset::new("c", vec![record("q", vec![2, 3, 4])], "test").unwrap();
        let f = filter_and_label(&ds, 1).unwrap();
        assert_eq!(f.records[0].label(), Some(3.0));
        assert_eq!(f.records[0].average_rating, Some(3.0));
    }

    #[test]
    fn filter_to_empty_is_an_error() {
        let ds = QualityDataset::new("c", vec![record("q", vec![3])], "test").unwrap();
        assert!(matches!(filter_and_label(&ds, 10), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn filter_is_idempotent() {
        let ds = QualityDataset::new(
            "c",
            vec![record("a", vec![1; 12]), record("b", vec![5, 4]), record("c", vec![2; 10])],
            "test",
        )
        .unwrap();
        let once = filter_and_label(&ds, 10).unwrap();
        let twice = filter_and_label(&once, 10).unwrap();
        assert_eq!(once.records, twice.records);
    }

    #[test]
    fn aggregate_only_records_are_accepted() {
        let line = r#"{"id":"q","stem":"s","answer":"a","distractors":["b"],"average_rating":2.71,"rating_count":12}"#;
        let r: McqRecord = serde_json::from_str(line).unwrap();
        r.validate().unwrap();
        assert_eq!(r.label(), Some(2.71));
        assert_eq!(r.rating_count(), 12);
    }
}
