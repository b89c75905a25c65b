//! Annotation curation pipeline: classify each raw annotation by action
//! count, eliminate multi-action clips, re-annotate the keepers with the
//! caption template, and summarize the curated corpus.
//!
//! Classification goes through a pluggable [`AnnotationClassifier`]: a remote
//! chat-completion endpoint, or the shipped deterministic lexicon oracle for
//! offline runs and tests. Verdicts are idempotent: re-running the pipeline
//! over already-classified records changes nothing.

pub mod oracle;
pub mod remote;

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{make_caption, Split, Triplet, Vocabularies};

pub use oracle::OfflineOracle;
pub use remote::RemoteClassifier;

/// Classifier output for one annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Analysis {
    pub action_count: usize,
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
    pub subject: String,
}

/// Anything that can answer the action-count question for one annotation.
pub trait AnnotationClassifier: Sync {
    fn classify(&self, raw_text: &str) -> Result<Analysis>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Kept,
    Eliminated,
    Pending,
}

/// One annotation and what curation decided about it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub path: String,
    pub num_frames: usize,
    pub raw_text: String,
    pub verdict: Verdict,
    pub analysis: Option<Analysis>,
    pub generated_caption: Option<String>,
    /// Failure note for eliminated/pending records (audit trail).
    pub note: Option<String>,
}

impl AnnotationRecord {
    pub fn new(video_id: impl Into<String>, path: impl Into<String>, num_frames: usize, raw_text: impl Into<String>) -> Self {
        AnnotationRecord {
            video_id: video_id.into(),
            path: path.into(),
            num_frames,
            raw_text: raw_text.into(),
            verdict: Verdict::Pending,
            analysis: None,
            generated_caption: None,
            note: None,
        }
    }

    /// Invariants: kept implies a single-action analysis and a caption.
    pub fn check(&self) -> Result<()> {
        match self.verdict {
            Verdict::Kept => {
                let a = self.analysis.as_ref().ok_or_else(|| {
                    Error::InvalidAnnotation(format!("{}: kept without analysis", self.video_id))
                })?;
                if a.action_count != 1 {
                    return Err(Error::InvalidAnnotation(format!(
                        "{}: kept with action_count {}",
                        self.video_id, a.action_count
                    )));
                }
                if self.generated_caption.is_none() {
                    return Err(Error::InvalidAnnotation(format!(
                        "{}: kept without generated caption",
                        self.video_id
                    )));
                }
            }
            Verdict::Eliminated => {
                let multi = self
                    .analysis
                    .as_ref()
                    .map(|a| a.action_count >= 2)
                    .unwrap_or(false);
                if !multi && self.note.is_none() {
                    return Err(Error::InvalidAnnotation(format!(
                        "{}: eliminated without multi-action analysis or failure note",
                        self.video_id
                    )));
                }
            }
            Verdict::Pending => {}
        }
        Ok(())
    }
}

/// Manifest line for curation input/output: the dataset record keys plus
/// verdict and action count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurationLine {
    pub video_id: String,
    pub path: String,
    pub num_frames: usize,
    pub caption: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Classify one annotation. The raw text must be non-empty after trimming.
pub fn classify_annotation(
    raw_text: &str,
    client: &dyn AnnotationClassifier,
) -> Result<Analysis> {
    if raw_text.trim().is_empty() {
        return Err(Error::InvalidAnnotation("empty annotation text".into()));
    }
    client.classify(raw_text)
}

/// Classify every pending record (up to `concurrency` requests in flight),
/// keep single-action records with regenerated captions, eliminate the rest,
/// and leave records whose classifier kept failing as pending. Already-
/// classified records pass through untouched, so the operation is idempotent.
/// Output is sorted by video id.
pub fn filter_and_reannotate(
    mut records: Vec<AnnotationRecord>,
    client: &dyn AnnotationClassifier,
    concurrency: usize,
) -> Result<Vec<AnnotationRecord>> {
    let pending: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.verdict == Verdict::Pending)
        .map(|(i, _)| i)
        .collect();

    let results: Mutex<Vec<(usize, Result<Analysis>)>> = Mutex::new(Vec::new());
    let workers = concurrency.max(1).min(pending.len().max(1));
    let queue = Mutex::new(pending.into_iter());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().unwrap().next();
                let Some(i) = next else { break };
                let outcome = classify_annotation(&records[i].raw_text, client);
                results.lock().unwrap().push((i, outcome));
            });
        }
    });

    for (i, outcome) in results.into_inner().unwrap() {
        let rec = &mut records[i];
        match outcome {
            Ok(analysis) => {
                if analysis.action_count == 1 {
                    rec.verdict = Verdict::Kept;
                    rec.analysis = Some(analysis);
                } else {
                    rec.note = if analysis.action_count == 0 {
                        Some("no recognizable action".to_string())
                    } else {
                        None
                    };
                    rec.verdict = Verdict::Eliminated;
                    rec.analysis = Some(analysis);
                }
            }
            Err(Error::ClassifierUnavailable(msg)) => {
                rec.verdict = Verdict::Pending;
                rec.note = Some(format!("classifier unavailable: {msg}"));
            }
            Err(e) => {
                rec.verdict = Verdict::Eliminated;
                rec.note = Some(format!("analysis failure: {e}"));
            }
        }
    }

    // Kept records that lack an extractable object are analysis failures.
    for rec in &mut records {
        if rec.verdict == Verdict::Kept && rec.generated_caption.is_none() {
            let ok = rec
                .analysis
                .as_ref()
                .map(|a| !a.verbs.is_empty() && !a.objects.is_empty())
                .unwrap_or(false);
            if !ok {
                rec.verdict = Verdict::Eliminated;
                rec.note = Some("single action but no extractable object".to_string());
            }
        }
    }

    // Build vocabularies over the kept extractions, then caption them.
    let vocab = kept_vocabularies(&records);
    for rec in &mut records {
        if rec.verdict == Verdict::Kept && rec.generated_caption.is_none() {
            let a = rec.analysis.as_ref().expect("kept implies analysis");
            let triplet = vocab
                .triplet_of(&a.subject, &a.verbs[0], &a.objects[0])
                .expect("kept extraction is in the derived vocabulary");
            rec.generated_caption = Some(make_caption(triplet, &vocab)?);
        }
    }

    records.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    for rec in &records {
        rec.check()?;
    }
    Ok(records)
}

/// Vocabularies derived from kept extractions (sorted, deduplicated).
pub fn kept_vocabularies(records: &[AnnotationRecord]) -> Vocabularies {
    let mut subjects = BTreeSet::new();
    let mut actions = BTreeSet::new();
    let mut objects = BTreeSet::new();
    for r in records {
        if r.verdict != Verdict::Kept {
            continue;
        }
        if let Some(a) = &r.analysis {
            if !a.verbs.is_empty() && !a.objects.is_empty() {
                subjects.insert(a.subject.clone());
                actions.insert(a.verbs[0].clone());
                objects.insert(a.objects[0].clone());
            }
        }
    }
    Vocabularies {
        subjects: subjects.into_iter().collect(),
        actions: actions.into_iter().collect(),
        objects: objects.into_iter().collect(),
    }
}

/// Extract the (subject, action, object) names a caption encodes, via the
/// offline oracle. Used for round-trip label checks.
pub fn extract_caption_names(caption: &str) -> Result<(String, String, String)> {
    let a = OfflineOracle::analyze(caption)?;
    if a.verbs.is_empty() || a.objects.is_empty() {
        return Err(Error::InvalidAnnotation(format!(
            "caption {caption:?} has no extractable verb/object"
        )));
    }
    Ok((a.subject.clone(), a.verbs[0].clone(), a.objects[0].clone()))
}

/// Corpus statistics over kept records. A "task" is a distinct
/// (action, object) pair; that definition is an artifact choice and is
/// flagged in emitted summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub total_videos: usize,
    pub unique_tasks: usize,
    pub distinct_atomic_actions: usize,
    pub total_frames: usize,
}

/// Scale of the full curated source corpus this pipeline targets, documented
/// for reference; desk-scale runs do not reproduce it.
pub const SOURCE_CORPUS_REFERENCE: DatasetSummary = DatasetSummary {
    total_videos: 199_797,
    unique_tasks: 143,
    distinct_atomic_actions: 52,
    total_frames: 63_922_209,
};

/// Exact counts over the kept records of a curated manifest.
pub fn summarize(records: &[AnnotationRecord]) -> DatasetSummary {
    let mut tasks: BTreeSet<(String, String)> = BTreeSet::new();
    let mut actions: BTreeSet<String> = BTreeSet::new();
    let mut total_videos = 0usize;
    let mut total_frames = 0usize;
    for r in records {
        if r.verdict != Verdict::Kept {
            continue;
        }
        total_videos += 1;
        total_frames += r.num_frames;
        if let Some(a) = &r.analysis {
            if let (Some(v), Some(o)) = (a.verbs.first(), a.objects.first()) {
                tasks.insert((v.clone(), o.clone()));
                actions.insert(v.clone());
            }
        }
    }
    DatasetSummary {
        total_videos,
        unique_tasks: tasks.len(),
        distinct_atomic_actions: actions.len(),
        total_frames,
    }
}

fn record_to_line(rec: &AnnotationRecord) -> CurationLine {
    let (caption, subject, action, object) = match (&rec.verdict, &rec.analysis) {
        (Verdict::Kept, Some(a)) => (
            rec.generated_caption.clone().unwrap_or_else(|| rec.raw_text.clone()),
            Some(a.subject.clone()),
            a.verbs.first().cloned(),
            a.objects.first().cloned(),
        ),
        _ => (rec.raw_text.clone(), None, None, None),
    };
    CurationLine {
        video_id: rec.video_id.clone(),
        path: rec.path.clone(),
        num_frames: rec.num_frames,
        caption,
        subject,
        action,
        object,
        split: None,
        verdict: Some(rec.verdict),
        action_count: rec.analysis.as_ref().map(|a| a.action_count),
        note: rec.note.clone(),
    }
}

fn line_to_record(line: CurationLine) -> AnnotationRecord {
    let verdict = line.verdict.unwrap_or(Verdict::Pending);
    let analysis = match (&verdict, &line.action, &line.object, line.action_count) {
        (Verdict::Kept, Some(a), Some(o), _) => Some(Analysis {
            action_count: 1,
            verbs: vec![a.clone()],
            objects: vec![o.clone()],
            subject: line.subject.clone().unwrap_or_else(|| "robot".into()),
        }),
        (_, _, _, Some(n)) => Some(Analysis {
            action_count: n,
            verbs: Vec::new(),
            objects: Vec::new(),
            subject: line.subject.clone().unwrap_or_else(|| "robot".into()),
        }),
        _ => None,
    };
    AnnotationRecord {
        video_id: line.video_id,
        path: line.path,
        num_frames: line.num_frames,
        raw_text: line.caption.clone(),
        verdict,
        generated_caption: match verdict {
            Verdict::Kept => Some(line.caption),
            _ => None,
        },
        analysis,
        note: line.note,
    }
}

/// Read a curation manifest (JSONL). Lines that fail to parse report their
/// line number.
pub fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CurationLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(line_to_record(parsed));
    }
    Ok(out)
}

/// Write a curated manifest (JSONL, sorted by the caller).
pub fn write_records(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, &record_to_line(rec))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Template check for generated captions (exact Algorithm-1 shape).
pub fn caption_matches_template(caption: &str) -> bool {
    // "<Subject> <action> <object>, Action is <action>, Object is <object>"
    let Some((head, tail)) = caption.split_once(", Action is ") else {
        return false;
    };
    let Some((action, object)) = tail.split_once(", Object is ") else {
        return false;
    };
    let head_parts: Vec<&str> = head.split(' ').collect();
    if head_parts.len() != 3 {
        return false;
    }
    let (subj, act_h, obj_h) = (head_parts[0], head_parts[1], head_parts[2]);
    let lower = |s: &str| s.chars().all(|c| c.is_ascii_lowercase());
    subj.chars().next().map(|c| c.is_ascii_uppercase()).unwrap_or(false)
        && subj.chars().skip(1).all(|c| c.is_ascii_lowercase())
        && lower(act_h)
        && lower(obj_h)
        && act_h == action
        && obj_h == object
        && lower(action)
        && lower(object)
}

/// Triplet for a kept record against explicit vocabularies.
pub fn kept_triplet(rec: &AnnotationRecord, vocab: &Vocabularies) -> Result<Triplet> {
    let a = rec
        .analysis
        .as_ref()
        .ok_or_else(|| Error::InvalidAnnotation(format!("{}: no analysis", rec.video_id)))?;
    vocab
        .triplet_of(&a.subject, &a.verbs[0], &a.objects[0])
        .ok_or_else(|| {
            Error::InvalidTriplet(format!("{}: extraction not in vocabulary", rec.video_id))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, text: &str) -> AnnotationRecord {
        AnnotationRecord::new(id, format!("clips/{id}.racv"), 10, text)
    }

    #[test]
    fn batch_with_one_multi_action_keeps_two() {
        let records = vec![
            rec("a", "Robot opens the drawer"),
            rec("b", "pick up the cup and place it on the plate"),
            rec("c", "Human lifts the bottle"),
        ];
        let out = filter_and_reannotate(records, &OfflineOracle, 2).unwrap();
        let kept: Vec<_> = out.iter().filter(|r| r.verdict == Verdict::Kept).collect();
        let eliminated: Vec<_> = out
            .iter()
            .filter(|r| r.verdict == Verdict::Eliminated)
            .collect();
        assert_eq!(kept.len(), 2);
        assert_eq!(eliminated.len(), 1);
        assert_eq!(eliminated[0].video_id, "b");
        for k in kept {
            let caption = k.generated_caption.as_ref().unwrap();
            assert!(caption_matches_template(caption), "{caption}");
        }
    }

    #[test]
    fn all_single_action_all_kept() {
        let records = vec![
            rec("a", "Robot opens the drawer"),
            rec("b", "Robot closes the drawer"),
        ];
        let out = filter_and_reannotate(records, &OfflineOracle, 1).unwrap();
        assert!(out.iter().all(|r| r.verdict == Verdict::Kept));
        assert_eq!(
            out[0].generated_caption.as_deref(),
            Some("Robot open drawer, Action is open, Object is drawer")
        );
    }

    #[test]
    fn rerun_is_idempotent() {
        let records = vec![
            rec("a", "Robot opens the drawer"),
            rec("b", "pick the cup and place it"),
            rec("c", "Human waits patiently"),
        ];
        let once = filter_and_reannotate(records, &OfflineOracle, 4).unwrap();
        let twice = filter_and_reannotate(once.clone(), &OfflineOracle, 4).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn empty_annotation_is_eliminated_with_note() {
        let records = vec![rec("a", "   ")];
        let out = filter_and_reannotate(records, &OfflineOracle, 1).unwrap();
        assert_eq!(out[0].verdict, Verdict::Eliminated);
        assert!(out[0].note.as_ref().unwrap().contains("analysis failure"));
    }

    #[test]
    fn classifier_outage_leaves_records_pending() {
        struct Flaky;
        impl AnnotationClassifier for Flaky {
            fn classify(&self, _: &str) -> Result<Analysis> {
                Err(Error::ClassifierUnavailable("down".into()))
            }
        }
        let out = filter_and_reannotate(vec![rec("a", "Robot opens the drawer")], &Flaky, 1)
            .unwrap();
        assert_eq!(out[0].verdict, Verdict::Pending);
    }

    #[test]
    fn summary_counts_kept_records_exactly() {
        let mut records = vec![
            rec("a", "Robot opens the drawer"),
            rec("b", "Robot opens the box"),
            rec("c", "Robot opens the drawer"),
            rec("d", "push the plate and pull the tray"),
        ];
        records[0].num_frames = 10;
        records[1].num_frames = 20;
        records[2].num_frames = 30;
        records[3].num_frames = 999;
        let out = filter_and_reannotate(records, &OfflineOracle, 1).unwrap();
        let s = summarize(&out);
        assert_eq!(s.total_videos, 3);
        assert_eq!(s.unique_tasks, 2); // (open,drawer), (open,box)
        assert_eq!(s.distinct_atomic_actions, 1);
        assert_eq!(s.total_frames, 60);
        // empty manifest
        let empty = summarize(&[]);
        assert_eq!(empty.total_videos, 0);
        assert_eq!(empty.total_frames, 0);
    }

    #[test]
    fn manifest_round_trip_preserves_verdicts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curated.jsonl");
        let records = vec![
            rec("a", "Robot opens the drawer"),
            rec("b", "pick the cup and place it on the plate"),
        ];
        let out = filter_and_reannotate(records, &OfflineOracle, 1).unwrap();
        write_records(&path, &out).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].verdict, Verdict::Kept);
        assert_eq!(back[1].verdict, Verdict::Eliminated);
        // idempotence through the file round trip
        let again = filter_and_reannotate(back, &OfflineOracle, 1).unwrap();
        write_records(&dir.path().join("curated2.jsonl"), &again).unwrap();
        let a = std::fs::read(&path).unwrap();
        // kept captions and verdicts are unchanged
        let b = std::fs::read(dir.path().join("curated2.jsonl")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"video_id\": \"a\", \"path\": \"p\", \"num_frames\": 1, \"caption\": \"x\"}\nnot json\n").unwrap();
        let err = read_records(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn source_corpus_reference_is_documented() {
        assert_eq!(SOURCE_CORPUS_REFERENCE.total_videos, 199_797);
        assert_eq!(SOURCE_CORPUS_REFERENCE.unique_tasks, 143);
        assert_eq!(SOURCE_CORPUS_REFERENCE.distinct_atomic_actions, 52);
        assert_eq!(SOURCE_CORPUS_REFERENCE.total_frames, 63_922_209);
    }
}
