use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::FeatureDims;
use crate::error::{Error, Result};
use crate::objective::{Component, Rating};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLabels {
    pub nature: Rating,
    pub questioning: Rating,
    pub explanations: Rating,
}

impl SegmentLabels {
    pub fn get(&self, c: Component) -> Rating {
        match c {
            Component::Nature => self.nature,
            Component::Questioning => self.questioning,
            Component::Explanations => self.explanations,
        }
    }

    pub fn set(&mut self, c: Component, r: Rating) {
        match c {
            Component::Nature => self.nature = r,
            Component::Questioning => self.questioning = r,
            Component::Explanations => self.explanations = r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub segment_id: String,
    pub teacher_id: String,
    pub lesson_id: String,
    /// Feature file path relative to the dataset root.
    pub features: String,
    pub labels: SegmentLabels,
    #[serde(default)]
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterRecord {
    pub segment_id: String,
    pub rater_id: String,
    pub component: Component,
    /// Integer score on the raw 1..=4 scale.
    pub score: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentRecord {
    pub student_id: String,
    pub teacher_id: String,
    pub test_score: f64,
    pub interest: f64,
    pub self_efficacy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    TestScore,
    Interest,
    SelfEfficacy,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::TestScore, Outcome::Interest, Outcome::SelfEfficacy];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::TestScore => "test_score",
            Outcome::Interest => "interest",
            Outcome::SelfEfficacy => "self_efficacy",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Outcome::TestScore => "Test score",
            Outcome::Interest => "Interest",
            Outcome::SelfEfficacy => "Self-efficacy",
        }
    }

    pub fn of(self, s: &StudentRecord) -> f64 {
        match self {
            Outcome::TestScore => s.test_score,
            Outcome::Interest => s.interest,
            Outcome::SelfEfficacy => s.self_efficacy,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Outcome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "test_score" | "test" => Ok(Outcome::TestScore),
            "interest" => Ok(Outcome::Interest),
            "self_efficacy" => Ok(Outcome::SelfEfficacy),
            other => Err(Error::usage(format!("unknown outcome '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub dims: FeatureDims,
    pub segments: Vec<SegmentEntry>,
    #[serde(default)]
    pub rater_records: Vec<RaterRecord>,
    #[serde(default)]
    pub student_records: Vec<StudentRecord>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Structural checks: unique ids, and when rater records are present,
    /// exactly two distinct raters per segment and component whose mean is
    /// the stored label.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for s in &self.segments {
            if s.segment_id.is_empty() || s.teacher_id.is_empty() || s.lesson_id.is_empty() {
                return Err(Error::data(format!("segment '{}' has an empty identifier", s.segment_id)));
            }
            if !ids.insert(s.segment_id.as_str()) {
                return Err(Error::data(format!("duplicate segment id {}", s.segment_id)));
            }
        }
        if !self.rater_records.is_empty() {
            let by_key = self.ratings_by_segment()?;
            for s in &self.segments {
                for c in Component::ALL {
                    let scores = by_key.get(&(s.segment_id.as_str(), c)).map(Vec::as_slice).unwrap_or(&[]);
                    let mean = super::aggregate::mean_of_two(scores, &s.segment_id, c)?;
                    if mean != s.labels.get(c) {
                        return Err(Error::data(format!(
                            "segment {}: {c} label {} disagrees with rater mean {mean}",
                            s.segment_id,
                            s.labels.get(c)
                        )));
                    }
                }
            }
        }
        let teachers: BTreeSet<&str> = self.segments.iter().map(|s| s.teacher_id.as_str()).collect();
        for st in &self.student_records {
            if !teachers.contains(st.teacher_id.as_str()) {
                return Err(Error::data(format!("student {} refers to unknown teacher {}", st.student_id, st.teacher_id)));
            }
            if !(st.test_score.is_finite() && st.interest.is_finite() && st.self_efficacy.is_finite()) {
                return Err(Error::data(format!("student {} has a non-finite outcome", st.student_id)));
            }
        }
        Ok(())
    }

    /// `(segment, component) -> [(rater, score)]`, checking references and
    /// score range.
    fn ratings_by_segment(&self) -> Result<BTreeMap<(&str, Component), Vec<(&str, u8)>>> {
        let ids: BTreeSet<&str> = self.segments.iter().map(|s| s.segment_id.as_str()).collect();
        let mut map: BTreeMap<(&str, Component), Vec<(&str, u8)>> = BTreeMap::new();
        for r in &self.rater_records {
            if !ids.contains(r.segment_id.as_str()) {
                return Err(Error::data(format!("rater record for unknown segment {}", r.segment_id)));
            }
            if !(1..=4).contains(&r.score) {
                return Err(Error::data(format!(
                    "rater {} gave score {} on segment {} (must be 1..4)",
                    r.rater_id, r.score, r.segment_id
                )));
            }
            map.entry((r.segment_id.as_str(), r.component))
                .or_default()
                .push((r.rater_id.as_str(), r.score));
        }
        Ok(map)
    }

    pub fn teachers(&self) -> BTreeSet<String> {
        self.segments.iter().map(|s| s.teacher_id.clone()).collect()
    }

    pub fn segment(&self, id: &str) -> Option<&SegmentEntry> {
        self.segments.iter().find(|s| s.segment_id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, teacher: &str, n: f64) -> SegmentEntry {
        let r = Rating::from_value(n).unwrap();
        SegmentEntry {
            segment_id: id.into(),
            teacher_id: teacher.into(),
            lesson_id: format!("{teacher}_l1"),
            features: format!("features/{id}.dfx"),
            labels: SegmentLabels {
                nature: r,
                questioning: r,
                explanations: r,
            },
            duration_s: 960.0,
        }
    }

    fn records(id: &str, a: u8, b: u8) -> Vec<RaterRecord> {
        Component::ALL
            .iter()
            .flat_map(|&c| {
                [("r1", a), ("r2", b)].map(|(rater, score)| RaterRecord {
                    segment_id: id.into(),
                    rater_id: rater.into(),
                    component: c,
                    score,
                })
            })
            .collect()
    }

    #[test]
    fn json_round_trip() {
        let m = DatasetManifest {
            dims: FeatureDims::default(),
            segments: vec![entry("s1", "t1", 3.5)],
            rater_records: records("s1", 3, 4),
            student_records: vec![StudentRecord {
                student_id: "p1".into(),
                teacher_id: "t1".into(),
                test_score: 0.5,
                interest: 2.0,
                self_efficacy: -1.25,
            }],
        };
        m.validate().unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"nature\":3.5"), "{text}");
        let back: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn label_must_match_rater_mean() {
        let m = DatasetManifest {
            dims: FeatureDims::default(),
            segments: vec![entry("s1", "t1", 3.0)],
            rater_records: records("s1", 3, 4),
            student_records: vec![],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn three_ratings_rejected() {
        let mut recs = records("s1", 3, 4);
        recs.push(RaterRecord {
            segment_id: "s1".into(),
            rater_id: "r3".into(),
            component: Component::Nature,
            score: 2,
        });
        let m = DatasetManifest {
            dims: FeatureDims::default(),
            segments: vec![entry("s1", "t1", 3.5)],
            rater_records: recs,
            student_records: vec![],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let m = DatasetManifest {
            dims: FeatureDims::default(),
            segments: vec![entry("s1", "t1", 2.0), entry("s1", "t2", 2.0)],
            rater_records: vec![],
            student_records: vec![],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn off_label_set_rejected_at_parse() {
        let text = r#"{"segments":[{"segment_id":"s","teacher_id":"t","lesson_id":"l","features":"f",
            "labels":{"nature":2.25,"questioning":2,"explanations":2}}]}"#;
        assert!(serde_json::from_str::<DatasetManifest>(text).is_err());
    }
}
