//! Tab-separated dataset manifests and split validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    L,
    R,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::L => "L",
            Side::R => "R",
        })
    }
}

impl FromStr for Side {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "L" => Ok(Side::L),
            "R" => Ok(Side::R),
            _ => Err(format!("side must be L or R, got `{s}`")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("split must be train, val or test, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    /// Relative paths resolve against the manifest's directory.
    pub image_path: String,
    pub subject_id: String,
    pub side: Side,
    pub kl_grade: u8,
    pub pixel_spacing_mm: f64,
    pub split: Split,
}

impl DatasetRecord {
    /// File stem of the image path, used as the sample identifier.
    pub fn id(&self) -> String {
        Path::new(&self.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.clone())
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        if self.kl_grade as usize >= NUM_CLASSES {
            return Err(format!("kl_grade {} outside 0..=4", self.kl_grade));
        }
        if !(self.pixel_spacing_mm > 0.0 && self.pixel_spacing_mm.is_finite()) {
            return Err(format!("pixel spacing {} must be positive", self.pixel_spacing_mm));
        }
        for (name, v) in [("image_path", &self.image_path), ("subject_id", &self.subject_id)] {
            if v.is_empty() || v.contains(['\t', '\n', '\r']) {
                return Err(format!("{name} `{v}` is empty or contains a tab/newline"));
            }
        }
        Ok(())
    }
}

pub const MANIFEST_HEADER: &str = "# image_path\tsubject_id\tside\tkl_grade\tpixel_spacing_mm\tsplit";

pub fn parse_manifest(text: &str) -> Result<Vec<DatasetRecord>> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Manifest { line: line_no, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 tab-separated fields, found {}", fields.len())));
        }
        let record = DatasetRecord {
            image_path: fields[0].to_string(),
            subject_id: fields[1].to_string(),
            side: fields[2].parse().map_err(err)?,
            kl_grade: fields[3].parse().map_err(|_| err(format!("bad kl_grade `{}`", fields[3])))?,
            pixel_spacing_mm: fields[4]
                .parse()
                .map_err(|_| err(format!("bad pixel spacing `{}`", fields[4])))?,
            split: fields[5].parse().map_err(err)?,
        };
        record.check().map_err(err)?;
        records.push(record);
    }
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    parse_manifest(&fs::read_to_string(path)?)
}

pub fn render_manifest(records: &[DatasetRecord]) -> Result<String> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for (i, r) in records.iter().enumerate() {
        r.check().map_err(|message| Error::Manifest { line: i + 2, message })?;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.image_path, r.subject_id, r.side, r.kl_grade, r.pixel_spacing_mm, r.split
        ));
    }
    Ok(out)
}

pub fn write_manifest(records: &[DatasetRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, render_manifest(records)?)?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitReport {
    /// Records per split and grade.
    pub grade_counts: BTreeMap<Split, [usize; NUM_CLASSES]>,
    pub subjects: BTreeMap<Split, usize>,
}

impl SplitReport {
    pub fn records(&self, split: Split) -> usize {
        self.grade_counts.get(&split).map_or(0, |c| c.iter().sum())
    }
}

/// Checks grades and that no subject spans two splits.
pub fn validate_splits(records: &[DatasetRecord]) -> Result<SplitReport> {
    let mut splits_of: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    let mut report = SplitReport::default();
    for (i, r) in records.iter().enumerate() {
        r.check().map_err(|message| Error::Manifest { line: i + 1, message })?;
        splits_of.entry(&r.subject_id).or_default().insert(r.split);
        report.grade_counts.entry(r.split).or_insert([0; NUM_CLASSES])[r.kl_grade as usize] += 1;
    }
    let leaking: Vec<String> =
        splits_of.iter().filter(|(_, s)| s.len() > 1).map(|(id, _)| id.to_string()).collect();
    if !leaking.is_empty() {
        return Err(Error::SplitLeakage { subjects: leaking });
    }
    for splits in splits_of.values() {
        for &s in splits {
            *report.subjects.entry(s).or_insert(0) += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(subject: &str, split: Split, grade: u8) -> DatasetRecord {
        DatasetRecord {
            image_path: format!("img/{subject}_{split}.pgm"),
            subject_id: subject.into(),
            side: Side::R,
            kl_grade: grade,
            pixel_spacing_mm: 0.4,
            split,
        }
    }

    #[test]
    fn leakage_names_the_subject() {
        let recs = vec![rec("s1", Split::Train, 0), rec("s2", Split::Train, 1), rec("s1", Split::Test, 0)];
        match validate_splits(&recs) {
            Err(Error::SplitLeakage { subjects }) => assert_eq!(subjects, vec!["s1".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_manifest_is_valid() {
        let recs = parse_manifest("# only a comment\n\n").unwrap();
        assert!(recs.is_empty());
        assert_eq!(validate_splits(&recs).unwrap(), SplitReport::default());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{MANIFEST_HEADER}\na.pgm\ts\tR\t2\t0.4\ttrain\nb.pgm\ts\tX\t2\t0.4\ttrain\n");
        match parse_manifest(&text) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_manifest("a\tb\tR\t5\t0.4\ttrain").is_err());
        assert!(parse_manifest("a\tb\tR\t1\t-1\ttrain").is_err());
        assert!(parse_manifest("a\tb\tR\t1\t0.4").is_err());
    }

    #[test]
    fn report_counts() {
        let recs = vec![rec("a", Split::Train, 0), rec("a", Split::Train, 4), rec("b", Split::Val, 4)];
        let r = validate_splits(&recs).unwrap();
        assert_eq!(r.grade_counts[&Split::Train], [1, 0, 0, 0, 1]);
        assert_eq!(r.subjects[&Split::Train], 1);
        assert_eq!(r.records(Split::Val), 1);
        assert_eq!(r.records(Split::Test), 0);
    }
}
