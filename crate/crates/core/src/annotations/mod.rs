//! Annotation records, manifests, boundary extraction and leakage-safe splits.
//!
//! One JSON object per performance version:
//!
//! ```text
//! {"piece_id": "K331-1", "version_id": "v03", "duration_s": 612.4,
//!  "segments": [{"level": "structure", "label": "E", "start_s": 0.0, "end_s": 180.2}, ...]}
//! ```
//!
//! A manifest is a JSON array of `{"annotation": path, "audio": path}` entries,
//! paths resolved relative to the manifest file.

mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

pub use split::{split_dataset, SplitAssignment, SplitRatios, Subset};
pub use synth::{synth_fixture, write_fixture, FixtureFormat, SynthFixture, SynthItem};

/// Endpoint slack for contiguity checks, in seconds.
pub const CONTIGUITY_TOLERANCE_S: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnnotationError {
    #[error("malformed annotation: {0}")]
    Syntax(String),
    #[error("{level} segments overlap at {at_s:.3} s")]
    Overlap { level: Level, at_s: f64 },
    #[error("{level} segments leave a gap of {gap_s:.3} s at {at_s:.3} s")]
    Gap { level: Level, at_s: f64, gap_s: f64 },
    #[error("label {label:?} is not part of the {level} vocabulary")]
    Vocabulary { level: Level, label: String },
    #[error("segment [{start_s}, {end_s}] out of range for duration {duration_s}")]
    Range {
        start_s: f64,
        end_s: f64,
        duration_s: f64,
    },
    #[error("record has no {0} segments")]
    EmptyLevel(Level),
}

/// Structural level of a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Structure,
    Thematic,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Structure => f.write_str("structure"),
            Level::Thematic => f.write_str("thematic"),
        }
    }
}

/// Exposition, development, recapitulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StructureLabel {
    E,
    D,
    R,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThematicLabel {
    S1,
    TR,
    S2,
    C,
    DEV,
}

impl StructureLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            StructureLabel::E => "E",
            StructureLabel::D => "D",
            StructureLabel::R => "R",
        }
    }
}

impl FromStr for StructureLabel {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "E" => Ok(StructureLabel::E),
            "D" => Ok(StructureLabel::D),
            "R" => Ok(StructureLabel::R),
            _ => Err(()),
        }
    }
}

impl ThematicLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ThematicLabel::S1 => "S1",
            ThematicLabel::TR => "TR",
            ThematicLabel::S2 => "S2",
            ThematicLabel::C => "C",
            ThematicLabel::DEV => "DEV",
        }
    }
}

impl FromStr for ThematicLabel {
    type Err = ();
    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "S1" => Ok(ThematicLabel::S1),
            "TR" => Ok(ThematicLabel::TR),
            "S2" => Ok(ThematicLabel::S2),
            "C" => Ok(ThematicLabel::C),
            "DEV" => Ok(ThematicLabel::DEV),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Structure(StructureLabel),
    Thematic(ThematicLabel),
}

impl Label {
    pub fn level(self) -> Level {
        match self {
            Label::Structure(_) => Level::Structure,
            Label::Thematic(_) => Level::Thematic,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Structure(l) => l.as_str(),
            Label::Thematic(l) => l.as_str(),
        }
    }

    fn parse(level: Level, s: &str) -> std::result::Result<Self, AnnotationError> {
        let parsed = match level {
            Level::Structure => s.parse().map(Label::Structure),
            Level::Thematic => s.parse().map(Label::Thematic),
        };
        parsed.map_err(|_| AnnotationError::Vocabulary {
            level,
            label: s.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub label: Label,
    pub start_s: f64,
    pub end_s: f64,
}

impl Segment {
    pub fn level(&self) -> Level {
        self.label.level()
    }
}

/// One annotated performance version.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub piece_id: String,
    pub version_id: String,
    pub duration_s: f64,
    pub segments: Vec<Segment>,
    /// Auxiliary labels (onset noise, instrumentation, ...) carried through untouched.
    pub auxiliary: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct RawSegment {
    level: Level,
    label: String,
    start_s: f64,
    end_s: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    piece_id: String,
    version_id: String,
    duration_s: f64,
    segments: Vec<RawSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    auxiliary: Option<serde_json::Value>,
}

impl AnnotationRecord {
    /// Segments at one level, in file order.
    pub fn segments_at(&self, level: Level) -> impl Iterator<Item = &Segment> + '_ {
        self.segments.iter().filter(move |s| s.level() == level)
    }

    pub fn key(&self) -> (String, String) {
        (self.piece_id.clone(), self.version_id.clone())
    }

    /// Every invariant violation in the record, in a stable order.
    pub fn violations(&self) -> Vec<AnnotationError> {
        let mut found = Vec::new();
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            found.push(AnnotationError::Range {
                start_s: 0.0,
                end_s: 0.0,
                duration_s: self.duration_s,
            });
            return found;
        }
        for level in [Level::Structure, Level::Thematic] {
            let segs: Vec<&Segment> = self.segments_at(level).collect();
            if segs.is_empty() {
                continue;
            }
            for s in &segs {
                if !(s.start_s >= 0.0)
                    || !(s.end_s > s.start_s)
                    || s.end_s > self.duration_s + CONTIGUITY_TOLERANCE_S
                {
                    found.push(AnnotationError::Range {
                        start_s: s.start_s,
                        end_s: s.end_s,
                        duration_s: self.duration_s,
                    });
                }
            }
            if segs[0].start_s > CONTIGUITY_TOLERANCE_S {
                found.push(AnnotationError::Gap {
                    level,
                    at_s: 0.0,
                    gap_s: segs[0].start_s,
                });
            }
            for pair in segs.windows(2) {
                let (prev, next) = (pair[0], pair[1]);
                let delta = next.start_s - prev.end_s;
                if delta > CONTIGUITY_TOLERANCE_S {
                    found.push(AnnotationError::Gap {
                        level,
                        at_s: prev.end_s,
                        gap_s: delta,
                    });
                } else if delta < -CONTIGUITY_TOLERANCE_S {
                    found.push(AnnotationError::Overlap {
                        level,
                        at_s: next.start_s,
                    });
                }
            }
            let last_end = segs[segs.len() - 1].end_s;
            if last_end < self.duration_s - CONTIGUITY_TOLERANCE_S {
                found.push(AnnotationError::Gap {
                    level,
                    at_s: last_end,
                    gap_s: self.duration_s - last_end,
                });
            }
        }
        found
    }

    pub fn validate(&self) -> std::result::Result<(), AnnotationError> {
        match self.violations().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        let raw = RawRecord {
            piece_id: self.piece_id.clone(),
            version_id: self.version_id.clone(),
            duration_s: self.duration_s,
            segments: self
                .segments
                .iter()
                .map(|s| RawSegment {
                    level: s.level(),
                    label: s.label.as_str().to_string(),
                    start_s: s.start_s,
                    end_s: s.end_s,
                })
                .collect(),
            auxiliary: self.auxiliary.clone(),
        };
        serde_json::to_string_pretty(&raw).expect("annotation serialization is infallible")
    }
}

/// Parses a record without checking the contiguity/range invariants.
pub fn parse_annotation_unchecked(text: &str) -> std::result::Result<AnnotationRecord, AnnotationError> {
    let raw: RawRecord =
        serde_json::from_str(text).map_err(|e| AnnotationError::Syntax(e.to_string()))?;
    let segments = raw
        .segments
        .into_iter()
        .map(|s| {
            Ok(Segment {
                label: Label::parse(s.level, &s.label)?,
                start_s: s.start_s,
                end_s: s.end_s,
            })
        })
        .collect::<std::result::Result<Vec<_>, AnnotationError>>()?;
    Ok(AnnotationRecord {
        piece_id: raw.piece_id,
        version_id: raw.version_id,
        duration_s: raw.duration_s,
        segments,
        auxiliary: raw.auxiliary,
    })
}

/// Parses and validates one annotation record.
pub fn parse_annotation(text: &str) -> std::result::Result<AnnotationRecord, AnnotationError> {
    let record = parse_annotation_unchecked(text)?;
    record.validate()?;
    Ok(record)
}

/// Strictly increasing internal boundary times, in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoundarySet {
    times_s: Vec<f64>,
}

impl BoundarySet {
    /// Builds a set from arbitrary times, sorting and dropping exact duplicates.
    pub fn from_unsorted(mut times_s: Vec<f64>) -> Self {
        times_s.retain(|t| t.is_finite());
        times_s.sort_by(|a, b| a.total_cmp(b));
        times_s.dedup();
        BoundarySet { times_s }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn times(&self) -> &[f64] {
        &self.times_s
    }

    pub fn len(&self) -> usize {
        self.times_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_s.is_empty()
    }
}

/// Internal transition times at `level`: segment starts, excluding the piece start.
pub fn boundaries_of(record: &AnnotationRecord, level: Level) -> std::result::Result<BoundarySet, AnnotationError> {
    boundaries_with_edges(record, level, false)
}

/// Like [`boundaries_of`], optionally adding the piece start and end.
pub fn boundaries_with_edges(
    record: &AnnotationRecord,
    level: Level,
    include_edges: bool,
) -> std::result::Result<BoundarySet, AnnotationError> {
    let segs: Vec<&Segment> = record.segments_at(level).collect();
    if segs.is_empty() {
        return Err(AnnotationError::EmptyLevel(level));
    }
    let mut times: Vec<f64> = segs.iter().skip(1).map(|s| s.start_s).collect();
    if include_edges {
        times.insert(0, 0.0);
        times.push(record.duration_s);
    }
    Ok(BoundarySet::from_unsorted(times))
}

/// A record paired with the audio (or cached feature) file it annotates.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub record: AnnotationRecord,
    pub audio: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFileEntry {
    pub annotation: PathBuf,
    pub audio: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Syntax,
    Duplicate,
    Overlap,
    Gap,
    Vocabulary,
    Range,
    MissingStructure,
}

/// One invariant violation found by [`validate_manifest`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub piece_id: String,
    pub version_id: String,
    pub kind: FindingKind,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}: {:?}: {}",
            self.piece_id, self.version_id, self.kind, self.message
        )
    }
}

fn finding_kind(e: &AnnotationError) -> FindingKind {
    match e {
        AnnotationError::Syntax(_) => FindingKind::Syntax,
        AnnotationError::Overlap { .. } => FindingKind::Overlap,
        AnnotationError::Gap { .. } => FindingKind::Gap,
        AnnotationError::Vocabulary { .. } => FindingKind::Vocabulary,
        AnnotationError::Range { .. } => FindingKind::Range,
        AnnotationError::EmptyLevel(_) => FindingKind::MissingStructure,
    }
}

impl Manifest {
    pub fn records(&self) -> impl Iterator<Item = &AnnotationRecord> + '_ {
        self.entries.iter().map(|e| &e.record)
    }

    pub fn piece_ids(&self) -> BTreeSet<String> {
        self.records().map(|r| r.piece_id.clone()).collect()
    }

    /// Reads a manifest and every annotation it references, validating each record.
    pub fn load(path: &Path) -> Result<Manifest> {
        let (manifest, findings) = Self::load_lenient(path)?;
        if let Some(f) = findings.into_iter().next() {
            return Err(Error::InvalidInput(f.to_string()));
        }
        Ok(manifest)
    }

    /// Reads a manifest, reporting (rather than failing on) records that do not parse.
    pub fn load_lenient(path: &Path) -> Result<(Manifest, Vec<Finding>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let items: Vec<ManifestFileEntry> = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut entries = Vec::with_capacity(items.len());
        let mut findings = Vec::new();
        for item in items {
            let ann_path = base.join(&item.annotation);
            let text = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
            match parse_annotation_unchecked(&text) {
                Ok(record) => entries.push(ManifestEntry {
                    record,
                    audio: base.join(&item.audio),
                }),
                Err(e) => findings.push(Finding {
                    piece_id: ann_path.display().to_string(),
                    version_id: String::new(),
                    kind: finding_kind(&e),
                    message: e.to_string(),
                }),
            }
        }
        let manifest = Manifest { entries };
        findings.extend(validate_manifest(&manifest));
        Ok((manifest, findings))
    }

    /// Subset of entries whose piece is assigned to `subset`.
    pub fn subset(&self, split: &SplitAssignment, subset: Subset) -> Manifest {
        Manifest {
            entries: self
                .entries
                .iter()
                .filter(|e| split.get(&e.record.piece_id) == Some(subset))
                .cloned()
                .collect(),
        }
    }
}

/// Lists every invariant violation, tagged with the offending record.
pub fn validate_manifest(manifest: &Manifest) -> Vec<Finding> {
    let mut findings = Vec::new();
    let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
    for record in manifest.records() {
        let count = seen.entry(record.key()).or_insert(0);
        *count += 1;
        if *count == 2 {
            findings.push(Finding {
                piece_id: record.piece_id.clone(),
                version_id: record.version_id.clone(),
                kind: FindingKind::Duplicate,
                message: "duplicated (piece_id, version_id)".into(),
            });
        }
        if record.segments_at(Level::Structure).next().is_none() {
            findings.push(Finding {
                piece_id: record.piece_id.clone(),
                version_id: record.version_id.clone(),
                kind: FindingKind::MissingStructure,
                message: AnnotationError::EmptyLevel(Level::Structure).to_string(),
            });
        }
        for v in record.violations() {
            findings.push(Finding {
                piece_id: record.piece_id.clone(),
                version_id: record.version_id.clone(),
                kind: finding_kind(&v),
                message: v.to_string(),
            });
        }
    }
    findings
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edr_json(d_start: f64) -> String {
        format!(
            r#"{{"piece_id":"p","version_id":"v","duration_s":300.0,"segments":[
            {{"level":"structure","label":"E","start_s":0.0,"end_s":100.0}},
            {{"level":"structure","label":"D","start_s":{d_start},"end_s":180.0}},
            {{"level":"structure","label":"R","start_s":180.0,"end_s":300.0}}]}}"#
        )
    }

    pub(crate) fn record(labels: &[(&str, f64, f64)], duration: f64) -> AnnotationRecord {
        AnnotationRecord {
            piece_id: "p".into(),
            version_id: "v".into(),
            duration_s: duration,
            segments: labels
                .iter()
                .map(|(l, s, e)| Segment {
                    label: Label::Structure(l.parse().unwrap()),
                    start_s: *s,
                    end_s: *e,
                })
                .collect(),
            auxiliary: None,
        }
    }

    #[test]
    fn parses_valid_edr() {
        let r = parse_annotation(&edr_json(100.0)).unwrap();
        assert_eq!(r.segments.len(), 3);
        assert_eq!(r.duration_s, 300.0);
    }

    #[test]
    fn gap_is_rejected() {
        let text = r#"{"piece_id":"p","version_id":"v","duration_s":180.0,"segments":[
            {"level":"structure","label":"E","start_s":0.0,"end_s":100.0},
            {"level":"structure","label":"D","start_s":120.0,"end_s":180.0}]}"#;
        assert!(matches!(
            parse_annotation(text),
            Err(AnnotationError::Gap { .. })
        ));
    }

    #[test]
    fn small_slack_is_tolerated() {
        assert!(parse_annotation(&edr_json(100.04)).is_ok());
        assert!(matches!(
            parse_annotation(&edr_json(99.9)),
            Err(AnnotationError::Overlap { .. })
        ));
    }

    #[test]
    fn thematic_label_at_structure_level() {
        let text = r#"{"piece_id":"p","version_id":"v","duration_s":10.0,"segments":[
            {"level":"structure","label":"S1","start_s":0.0,"end_s":10.0}]}"#;
        assert!(matches!(
            parse_annotation(text),
            Err(AnnotationError::Vocabulary { .. })
        ));
    }

    #[test]
    fn end_beyond_duration() {
        let r = record(&[("E", 0.0, 100.0), ("R", 100.0, 320.0)], 300.0);
        assert!(matches!(r.validate(), Err(AnnotationError::Range { .. })));
    }

    #[test]
    fn malformed_json() {
        assert!(matches!(
            parse_annotation("{not json"),
            Err(AnnotationError::Syntax(_))
        ));
    }

    #[test]
    fn boundaries_of_edr() {
        let r = record(&[("E", 0.0, 100.0), ("D", 100.0, 180.0), ("R", 180.0, 300.0)], 300.0);
        assert_eq!(boundaries_of(&r, Level::Structure).unwrap().times(), &[100.0, 180.0]);
        assert_eq!(
            boundaries_with_edges(&r, Level::Structure, true).unwrap().times(),
            &[0.0, 100.0, 180.0, 300.0]
        );
    }

    #[test]
    fn boundaries_of_single_segment() {
        let r = record(&[("E", 0.0, 300.0)], 300.0);
        assert!(boundaries_of(&r, Level::Structure).unwrap().is_empty());
    }

    #[test]
    fn boundaries_of_edrdr() {
        let r = record(
            &[
                ("E", 0.0, 90.0),
                ("D", 90.0, 150.0),
                ("R", 150.0, 210.0),
                ("D", 210.0, 270.0),
                ("R", 270.0, 330.0),
            ],
            330.0,
        );
        assert_eq!(
            boundaries_of(&r, Level::Structure).unwrap().times(),
            &[90.0, 150.0, 210.0, 270.0]
        );
    }

    #[test]
    fn boundaries_of_missing_level() {
        let r = record(&[("E", 0.0, 300.0)], 300.0);
        assert!(matches!(
            boundaries_of(&r, Level::Thematic),
            Err(AnnotationError::EmptyLevel(Level::Thematic))
        ));
    }

    fn manifest_of(records: Vec<AnnotationRecord>) -> Manifest {
        Manifest {
            entries: records
                .into_iter()
                .map(|record| ManifestEntry {
                    record,
                    audio: PathBuf::from("x.wav"),
                })
                .collect(),
        }
    }

    #[test]
    fn validate_manifest_findings() {
        let good = record(&[("E", 0.0, 100.0), ("R", 100.0, 300.0)], 300.0);
        assert!(validate_manifest(&manifest_of(vec![good.clone()])).is_empty());

        let dup = validate_manifest(&manifest_of(vec![good.clone(), good.clone()]));
        assert_eq!(dup.len(), 1);
        assert_eq!(dup[0].kind, FindingKind::Duplicate);

        let mut bad = good.clone();
        bad.version_id = "w".into();
        bad.segments[1].end_s = 320.0;
        let range = validate_manifest(&manifest_of(vec![good, bad]));
        assert_eq!(range.len(), 1);
        assert_eq!(range[0].kind, FindingKind::Range);
        assert_eq!(range[0].version_id, "w");
    }

    #[test]
    fn auxiliary_labels_survive_round_trip() {
        let text = r#"{"piece_id":"p","version_id":"v","duration_s":10.0,"segments":[
            {"level":"structure","label":"E","start_s":0.0,"end_s":10.0}],
            "auxiliary":{"onset_noise_s":0.4,"instrumentation":"piano"}}"#;
        let r = parse_annotation(text).unwrap();
        assert_eq!(parse_annotation(&r.to_json()).unwrap(), r);
    }
}
