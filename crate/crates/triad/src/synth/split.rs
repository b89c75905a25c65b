//! Compositional splitting: hold out whole triplets for test_unseen while
//! keeping every class represented in train, then split the remaining clips
//! 80/10/10 into train/val/test_seen.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use super::{DatasetManifest, Split, Triplet};

/// Select `ceil(holdout_fraction * #triplets)` whole triplets into
/// test_unseen, greedily in seeded order, refusing any pick that would remove
/// the last remaining occurrence of a class. Remaining clips are shuffled and
/// split 80/10/10, with a repair pass that keeps every class present in train.
pub fn split_compositional(
    mut manifest: DatasetManifest,
    holdout_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::Config("holdout_fraction: must be in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let triplets: BTreeSet<Triplet> = manifest
        .records
        .iter()
        .map(|r| manifest.triplet_of(r))
        .collect::<Result<_>>()?;
    let mut order: Vec<Triplet> = triplets.iter().copied().collect();
    order.shuffle(&mut rng);

    let target = (holdout_fraction * triplets.len() as f64).ceil() as usize;

    // occurrence counts per class over not-yet-held-out triplets
    let mut subj_count: BTreeMap<usize, usize> = BTreeMap::new();
    let mut act_count: BTreeMap<usize, usize> = BTreeMap::new();
    let mut obj_count: BTreeMap<usize, usize> = BTreeMap::new();
    for t in &triplets {
        *subj_count.entry(t.subject).or_default() += 1;
        *act_count.entry(t.action).or_default() += 1;
        *obj_count.entry(t.object).or_default() += 1;
    }

    let mut held: BTreeSet<Triplet> = BTreeSet::new();
    for t in order {
        if held.len() == target {
            break;
        }
        if subj_count[&t.subject] > 1 && act_count[&t.action] > 1 && obj_count[&t.object] > 1 {
            *subj_count.get_mut(&t.subject).unwrap() -= 1;
            *act_count.get_mut(&t.action).unwrap() -= 1;
            *obj_count.get_mut(&t.object).unwrap() -= 1;
            held.insert(t);
        }
    }
    if held.len() < target {
        return Err(Error::InfeasibleSplit(format!(
            "cannot hold out {target} of {} triplets without removing a class from train",
            triplets.len()
        )));
    }

    // Assign held-out clips, then shuffle the rest into 80/10/10.
    let mut unseen_idx: Vec<usize> = Vec::new();
    let mut rest_idx: Vec<usize> = Vec::new();
    for (i, rec) in manifest.records.iter().enumerate() {
        let t = manifest.triplet_of(rec)?;
        if held.contains(&t) {
            unseen_idx.push(i);
        } else {
            rest_idx.push(i);
        }
    }
    rest_idx.shuffle(&mut rng);
    let n = rest_idx.len();
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;

    for &i in &unseen_idx {
        manifest.records[i].split = Split::TestUnseen;
    }
    for (pos, &i) in rest_idx.iter().enumerate() {
        manifest.records[i].split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::TestSeen
        };
    }

    repair_class_coverage(&mut manifest)?;
    Ok(manifest)
}

/// Move one clip per missing class from val/test_seen into train so that
/// every class occurring outside test_unseen also occurs in train.
fn repair_class_coverage(manifest: &mut DatasetManifest) -> Result<()> {
    loop {
        let mut train_s = BTreeSet::new();
        let mut train_a = BTreeSet::new();
        let mut train_o = BTreeSet::new();
        let mut avail_s: BTreeMap<usize, usize> = BTreeMap::new();
        let mut avail_a: BTreeMap<usize, usize> = BTreeMap::new();
        let mut avail_o: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, rec) in manifest.records.iter().enumerate() {
            let t = manifest.triplet_of(rec)?;
            match rec.split {
                Split::Train => {
                    train_s.insert(t.subject);
                    train_a.insert(t.action);
                    train_o.insert(t.object);
                }
                Split::Val | Split::TestSeen => {
                    avail_s.entry(t.subject).or_insert(i);
                    avail_a.entry(t.action).or_insert(i);
                    avail_o.entry(t.object).or_insert(i);
                }
                Split::TestUnseen => {}
            }
        }
        let missing = avail_s
            .iter()
            .find(|(s, _)| !train_s.contains(s))
            .or_else(|| avail_a.iter().find(|(a, _)| !train_a.contains(a)))
            .or_else(|| avail_o.iter().find(|(o, _)| !train_o.contains(o)))
            .map(|(_, &i)| i);
        match missing {
            Some(i) => manifest.records[i].split = Split::Train,
            None => return Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{ManifestRecord, Vocabularies};

    fn toy_manifest(clips_per_triplet: usize) -> DatasetManifest {
        let vocab = Vocabularies::default();
        let (ks, ka, ko) = vocab.sizes();
        let mut records = Vec::new();
        for s in 0..ks {
            for a in 0..ka {
                for o in 0..ko {
                    for c in 0..clips_per_triplet {
                        let id = format!("s{s:02}a{a:02}o{o:02}c{c:02}");
                        records.push(ManifestRecord {
                            video_id: id.clone(),
                            path: format!("clips/{id}.racv"),
                            num_frames: 24,
                            caption: crate::synth::make_caption(
                                Triplet::new(s, a, o),
                                &vocab,
                            )
                            .unwrap(),
                            subject: vocab.subjects[s].clone(),
                            action: vocab.actions[a].clone(),
                            object: vocab.objects[o].clone(),
                            split: Split::Train,
                        });
                    }
                }
            }
        }
        DatasetManifest {
            records,
            vocab,
            seed: 1,
        }
    }

    /// Exhaustive soundness check over a produced split.
    fn assert_sound(m: &DatasetManifest, expected_unseen_triplets: usize) {
        m.validate().unwrap();
        let mut unseen: BTreeSet<Triplet> = BTreeSet::new();
        let mut train_s = BTreeSet::new();
        let mut train_a = BTreeSet::new();
        let mut train_o = BTreeSet::new();
        for rec in &m.records {
            let t = m.triplet_of(rec).unwrap();
            if rec.split == Split::TestUnseen {
                unseen.insert(t);
            }
            if rec.split == Split::Train {
                train_s.insert(t.subject);
                train_a.insert(t.action);
                train_o.insert(t.object);
            }
        }
        assert_eq!(unseen.len(), expected_unseen_triplets);
        assert_eq!(train_s.len(), m.vocab.subjects.len(), "subjects in train");
        assert_eq!(train_a.len(), m.vocab.actions.len(), "actions in train");
        assert_eq!(train_o.len(), m.vocab.objects.len(), "objects in train");
    }

    #[test]
    fn holds_out_fifteen_of_144_triplets_at_fraction_01() {
        let m = split_compositional(toy_manifest(2), 0.1, 42).unwrap();
        assert_sound(&m, 15);
    }

    #[test]
    fn fraction_zero_leaves_no_unseen() {
        let m = split_compositional(toy_manifest(1), 0.0, 3).unwrap();
        assert_sound(&m, 0);
    }

    #[test]
    fn single_action_vocabulary_stays_feasible() {
        let mut manifest = toy_manifest(1);
        // collapse to one action: keep only records with action "open"
        manifest.records.retain(|r| r.action == "open");
        manifest.vocab.actions = vec!["open".to_string()];
        let m = split_compositional(manifest, 0.1, 5).unwrap();
        // 3 subjects x 1 action x 8 objects = 24 triplets, ceil(2.4) = 3 held
        assert_sound(&m, 3);
    }

    #[test]
    fn impossible_holdout_is_an_error() {
        let mut manifest = toy_manifest(1);
        manifest.records.retain(|r| r.subject == "robot" && r.action == "open");
        manifest.vocab.subjects = vec!["robot".to_string()];
        manifest.vocab.actions = vec!["open".to_string()];
        // 8 triplets, each the only occurrence of its object: nothing can be
        // held out without dropping an object class from train.
        let err = split_compositional(manifest, 0.5, 5).unwrap_err();
        assert!(matches!(err, Error::InfeasibleSplit(_)));
    }
}
