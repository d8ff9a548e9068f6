//! Subject-level cross-validation splits and the semi-supervised
//! labeled/unlabeled sampling protocol.

use rand::seq::SliceRandom;

use super::Subject;
use crate::data::{Image, SegmentationMask};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// A rotating 70/15/15 partition of subjects for one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub fold: usize,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
    pub labeled_subject_count: usize,
    pub unlabeled_pool_size: usize,
}

/// Partition subject ids 70/15/15 by subject, rotating with the fold so the
/// three test sets are pairwise disjoint. Validation and test sizes are
/// floored at one subject.
pub fn make_split(subject_ids: &[u32], fold: usize) -> Result<SplitPlan> {
    let n = subject_ids.len();
    if n < 3 {
        return Err(Error::InvalidConfig(format!(
            "need at least 3 subjects for a split, got {n}"
        )));
    }
    if fold > 2 {
        return Err(Error::InvalidConfig(format!("fold must be 0..=2, got {fold}")));
    }
    let n_test = ((n as f64 * 0.15).floor() as usize).max(1);
    let n_val = n_test;
    let rot = |i: usize| subject_ids[(fold * n_test + i) % n];
    let test: Vec<u32> = (0..n_test).map(rot).collect();
    let val: Vec<u32> = (n_test..n_test + n_val).map(rot).collect();
    let train: Vec<u32> = (n_test + n_val..n).map(rot).collect();
    Ok(SplitPlan {
        fold,
        train,
        val,
        test,
        labeled_subject_count: 0,
        unlabeled_pool_size: 0,
    })
}

/// The assembled pools of one semi-supervised run.
#[derive(Debug, Clone)]
pub struct SemiSupervisedSets {
    /// Annotated-phase image/mask pairs of the labeled subjects.
    pub labeled: Vec<(Image, SegmentationMask)>,
    /// Images from non-annotated phases of all training subjects.
    pub unlabeled: Vec<Image>,
    /// Real masks for the adversarial pathway (masks of the labeled set).
    pub real_masks: Vec<SegmentationMask>,
}

/// Select `ceil(fraction * |train|)` whole subjects as the labeled set and
/// build the fixed unlabeled pool from the remaining cardiac phases of all
/// training subjects.
pub fn sample_semi_supervised(
    plan: &SplitPlan,
    subjects: &[Subject],
    labeled_fraction: f64,
    pool_size: usize,
    seed: u64,
) -> Result<(SplitPlan, SemiSupervisedSets)> {
    if !(0.0..=1.0).contains(&labeled_fraction) {
        return Err(Error::InvalidConfig(
            "labeled_fraction must be in [0, 1]".into(),
        ));
    }
    let k = (labeled_fraction * plan.train.len() as f64).ceil() as usize;
    if k == 0 {
        return Err(Error::InvalidConfig(
            "labeled_fraction selects zero subjects".into(),
        ));
    }
    let by_id = |id: u32| -> Result<&Subject> {
        subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown subject id {id}")))
    };

    let labeled_ids: Vec<u32> = plan.train.iter().take(k).cloned().collect();
    let mut labeled = Vec::new();
    for &id in &labeled_ids {
        let s = by_id(id)?;
        for (img, mask) in s.images.iter().zip(s.masks.iter()) {
            if let Some(m) = mask {
                labeled.push((img.clone(), m.clone()));
            }
        }
    }

    let mut candidates: Vec<Image> = Vec::new();
    for &id in &plan.train {
        let s = by_id(id)?;
        for (img, mask) in s.images.iter().zip(s.masks.iter()) {
            if mask.is_none() {
                candidates.push(img.clone());
            }
        }
    }
    let mut rng = rng::stream(seed, Stream::Other(0x51));
    candidates.shuffle(&mut rng);
    candidates.truncate(pool_size);

    let real_masks = labeled.iter().map(|(_, m)| m.clone()).collect();
    let mut plan = plan.clone();
    plan.labeled_subject_count = k;
    plan.unlabeled_pool_size = candidates.len();
    Ok((
        plan,
        SemiSupervisedSets {
            labeled,
            unlabeled: candidates,
            real_masks,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, PhantomConfig};
    use std::collections::BTreeSet;

    #[test]
    fn twenty_subjects_split_14_3_3() {
        let ids: Vec<u32> = (0..20).collect();
        let plan = make_split(&ids, 0).unwrap();
        assert_eq!(plan.train.len(), 14);
        assert_eq!(plan.val.len(), 3);
        assert_eq!(plan.test.len(), 3);
    }

    #[test]
    fn splits_partition_and_folds_disjoint() {
        let ids: Vec<u32> = (0..20).collect();
        let mut test_union = BTreeSet::new();
        for fold in 0..3 {
            let plan = make_split(&ids, fold).unwrap();
            let all: BTreeSet<u32> = plan
                .train
                .iter()
                .chain(plan.val.iter())
                .chain(plan.test.iter())
                .cloned()
                .collect();
            assert_eq!(all.len(), 20, "partition covers everything exactly once");
            for t in &plan.test {
                assert!(test_union.insert(*t), "fold {fold}: test subject {t} reused");
            }
        }
    }

    #[test]
    fn split_is_deterministic() {
        let ids: Vec<u32> = (0..11).collect();
        assert_eq!(make_split(&ids, 1).unwrap(), make_split(&ids, 1).unwrap());
    }

    #[test]
    fn too_few_subjects_rejected() {
        assert!(make_split(&[1, 2], 0).is_err());
    }

    fn dataset() -> (Vec<crate::phantom::Subject>, SplitPlan) {
        let cfg = PhantomConfig {
            image_size: 32,
            num_subjects: 10,
            slices_per_subject: 2,
            phases_per_subject: 6,
            seed: 3,
            ..PhantomConfig::default()
        };
        let subjects = generate_dataset(&cfg).unwrap();
        let ids: Vec<u32> = subjects.iter().map(|s| s.id).collect();
        let plan = make_split(&ids, 0).unwrap();
        (subjects, plan)
    }

    #[test]
    fn full_fraction_takes_every_annotated_train_image() {
        let (subjects, plan) = dataset();
        let (plan, sets) = sample_semi_supervised(&plan, &subjects, 1.0, 50, 7).unwrap();
        assert_eq!(plan.labeled_subject_count, plan.train.len());
        // 2 annotated phases x 2 slices per subject
        assert_eq!(sets.labeled.len(), plan.train.len() * 4);
        assert_eq!(sets.real_masks.len(), sets.labeled.len());
    }

    #[test]
    fn one_subject_fraction() {
        let (subjects, plan) = dataset();
        let frac = 1.0 / plan.train.len() as f64;
        let (plan2, sets) = sample_semi_supervised(&plan, &subjects, frac, 50, 7).unwrap();
        assert_eq!(plan2.labeled_subject_count, 1);
        let subj: BTreeSet<u32> = sets.labeled.iter().map(|(i, _)| i.subject).collect();
        assert_eq!(subj.len(), 1);
        assert_eq!(sets.labeled.len(), 4);
    }

    #[test]
    fn unlabeled_pool_size_honored_and_from_unannotated_phases() {
        let (subjects, plan) = dataset();
        let (plan2, sets) = sample_semi_supervised(&plan, &subjects, 1.0, 20, 7).unwrap();
        assert_eq!(sets.unlabeled.len(), 20);
        assert_eq!(plan2.unlabeled_pool_size, 20);
        let annotated = &subjects[0].annotated_phases;
        for img in &sets.unlabeled {
            assert!(!annotated.contains(&img.phase));
            assert!(plan.train.contains(&img.subject));
        }
    }

    #[test]
    fn zero_subject_fraction_rejected() {
        let (subjects, plan) = dataset();
        assert!(sample_semi_supervised(&plan, &subjects, 0.0, 50, 7).is_err());
    }
}
