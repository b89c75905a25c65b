//! Run the curation pipeline offline over the bundled 50-annotation fixture:
//! classify by action count, eliminate multi-action clips, re-annotate the
//! keepers, and print the corpus summary.
//!
//! ```bash
//! cargo run --example curate_annotations
//! ```

use triad::curation::{filter_and_reannotate, read_records, summarize, OfflineOracle, Verdict};

fn main() -> triad::Result<()> {
    let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/annotations50.jsonl");
    let records = read_records(std::path::Path::new(fixture))?;
    println!("loaded {} annotations", records.len());

    let curated = filter_and_reannotate(records, &OfflineOracle, 4)?;
    let kept = curated.iter().filter(|r| r.verdict == Verdict::Kept).count();
    let eliminated = curated
        .iter()
        .filter(|r| r.verdict == Verdict::Eliminated)
        .count();
    println!("kept {kept}, eliminated {eliminated}");

    for rec in curated.iter().take(3) {
        println!(
            "  {}: {:?} -> {:?}",
            rec.video_id,
            rec.raw_text,
            rec.generated_caption.as_deref().unwrap_or("(eliminated)")
        );
    }
    if let Some(multi) = curated.iter().find(|r| r.verdict == Verdict::Eliminated) {
        println!(
            "  {}: {:?} eliminated (action_count = {})",
            multi.video_id,
            multi.raw_text,
            multi.analysis.as_ref().map(|a| a.action_count).unwrap_or(0)
        );
    }

    let summary = summarize(&curated);
    println!(
        "summary: {} videos, {} tasks (distinct action-object pairs), {} atomic actions, {} frames",
        summary.total_videos,
        summary.unique_tasks,
        summary.distinct_atomic_actions,
        summary.total_frames
    );
    Ok(())
}
