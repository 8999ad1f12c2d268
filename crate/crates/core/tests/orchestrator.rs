mod common;

use std::fs;

use bam_core::checkpoint::{load_checkpoint, save_checkpoint};
use bam_core::merge::{AngleScope, MergeMethod};
use bam_core::orchestrator::{
    line_search_c, resume, run_bam, run_bam_with, run_sequential, BamError, LedgerRecord, RunLedger, RunOptions,
};
use common::{mock_plan, vector_checkpoint, with_dir, MockTrainer};

fn merge_iterations(ledger: &RunLedger) -> Vec<(usize, Vec<usize>)> {
    ledger
        .records
        .iter()
        .filter_map(|r| match r {
            LedgerRecord::Merge { after_position, slices, .. } => Some((*after_position, slices.clone())),
            _ => None,
        })
        .collect()
}

#[test]
fn merge_schedule_n8_k2() {
    let dir = tempfile::tempdir().unwrap();
    let plan = mock_plan(dir.path(), 8, 2, MergeMethod::Slerp);
    let out = run_bam(&plan, &MockTrainer::default()).unwrap();
    assert_eq!(out.ledger.merge_positions(), vec![2, 4, 6, 8]);
    assert_eq!(merge_iterations(&out.ledger), vec![(2, vec![1, 2]), (4, vec![3, 4]), (6, vec![5, 6]), (8, vec![7, 8])]);
    assert!(out.complete);
    assert_eq!(out.ledger.final_hash(), Some(out.checkpoint.content_hash().as_str()));
}

#[test]
fn final_partial_group_returns_lone_branch() {
    let dir = tempfile::tempdir().unwrap();
    let plan = mock_plan(dir.path(), 5, 2, MergeMethod::Slerp);
    let out = run_bam(&plan, &MockTrainer::default()).unwrap();
    assert_eq!(out.ledger.merge_positions(), vec![2, 4, 5]);
    let branch5 = out
        .ledger
        .records
        .iter()
        .find_map(|r| match r {
            LedgerRecord::Branch { position: 5, hash, .. } => Some(hash.clone()),
            _ => None,
        })
        .unwrap();
    let last_merge = out
        .ledger
        .records
        .iter()
        .rev()
        .find_map(|r| match r {
            LedgerRecord::Merge { hash, .. } => Some(hash.clone()),
            _ => None,
        })
        .unwrap();
    assert_eq!(branch5, last_merge);
}

#[test]
fn k1_matches_sequential_and_n1_is_single_training() {
    let dir = tempfile::tempdir().unwrap();
    let plan = mock_plan(dir.path(), 4, 1, MergeMethod::Linear);
    let bam = run_bam(&with_dir(&plan, dir.path().join("bam")), &MockTrainer::default()).unwrap();
    let mut k3 = plan.clone();
    k3.k = 3;
    let seq = run_sequential(&with_dir(&k3, dir.path().join("seq")), &MockTrainer::default()).unwrap();
    assert_eq!(bam.ledger, seq.ledger);
    assert_eq!(fs::read(&bam.ledger_path).unwrap(), fs::read(&seq.ledger_path).unwrap());
    assert_eq!(seq.ledger.merge_positions(), vec![1, 2, 3, 4]);

    let one = mock_plan(&dir.path().join("one"), 1, 1, MergeMethod::Slerp);
    let trainer = MockTrainer::default();
    let out = run_bam(&one, &trainer).unwrap();
    assert_eq!(trainer.calls(), 1);
    let base = load_checkpoint(&one.base).unwrap();
    let direct = bam_core::orchestrator::Trainer::train(
        &trainer,
        &base,
        &bam_core::slice::load_manifest(&one.slices[0]).unwrap(),
        &one.trainer_config,
        bam_core::orchestrator::branch_seed(one.seed, 1, 0),
    )
    .unwrap();
    assert_eq!(out.checkpoint.content_hash(), direct.content_hash());
}

#[test]
fn rebasing_and_data_conservation() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = mock_plan(dir.path(), 7, 3, MergeMethod::ModelStock);
    plan.slice_order = vec![3, 1, 7, 2, 6, 4, 5];
    let out = run_bam(&plan, &MockTrainer::default()).unwrap();
    let mut trained = out.ledger.trained_slices();
    assert_eq!(trained, vec![3, 1, 7, 2, 6, 4, 5]);
    trained.sort_unstable();
    assert_eq!(trained, (1..=7).collect::<Vec<_>>());

    let mut base_hash = load_checkpoint(&plan.base).unwrap().content_hash();
    for r in &out.ledger.records {
        match r {
            LedgerRecord::Branch { base_hash: b, .. } => assert_eq!(*b, base_hash),
            LedgerRecord::Merge { hash, .. } => base_hash = hash.clone(),
            _ => {}
        }
    }
    assert_eq!(out.ledger.merge_positions(), vec![3, 6, 7]);
}

#[test]
fn same_plan_same_hash_and_ledger_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let plan = mock_plan(dir.path(), 6, 3, MergeMethod::Slerp);
    let a = run_bam(&with_dir(&plan, dir.path().join("a")), &MockTrainer::default()).unwrap();
    let b = run_bam(&with_dir(&plan, dir.path().join("b")), &MockTrainer::default()).unwrap();
    assert_eq!(a.checkpoint.content_hash(), b.checkpoint.content_hash());
    assert_eq!(fs::read(a.ledger_path).unwrap(), fs::read(b.ledger_path).unwrap());

    let mut other = plan.clone();
    other.seed += 1;
    let c = run_bam(&with_dir(&other, dir.path().join("c")), &MockTrainer::default()).unwrap();
    assert_ne!(a.checkpoint.content_hash(), c.checkpoint.content_hash());
}

#[test]
fn resume_after_interrupt_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let plan = mock_plan(dir.path(), 8, 2, MergeMethod::Slerp);
    let full = run_bam(&with_dir(&plan, dir.path().join("full")), &MockTrainer::default()).unwrap();

    let part = with_dir(&plan, dir.path().join("part"));
    let stopped =
        run_bam_with(&part, &MockTrainer::default(), RunOptions { stop_after_merges: Some(2), ..Default::default() })
            .unwrap();
    assert!(!stopped.complete);
    assert_eq!(stopped.ledger.merge_positions(), vec![2, 4]);

    let trainer = MockTrainer::default();
    let resumed = resume(&part, &trainer).unwrap();
    assert_eq!(trainer.calls(), 4, "only slices 5..=8 are trained again");
    assert_eq!(resumed.checkpoint.content_hash(), full.checkpoint.content_hash());
    assert_eq!(fs::read(&resumed.ledger_path).unwrap(), fs::read(&full.ledger_path).unwrap());

    let again = MockTrainer::default();
    let noop = resume(&part, &again).unwrap();
    assert_eq!(again.calls(), 0);
    assert!(noop.complete);
    assert_eq!(noop.checkpoint.content_hash(), full.checkpoint.content_hash());
}

#[test]
fn resume_reuses_branches_of_an_aborted_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let plan = mock_plan(dir.path(), 4, 2, MergeMethod::Linear);
    let full = run_bam(&with_dir(&plan, dir.path().join("full")), &MockTrainer::default()).unwrap();

    let part = with_dir(&plan, dir.path().join("part"));
    let failing = MockTrainer { fail_on: Some(4.0), ..Default::default() };
    let err = run_bam(&part, &failing).unwrap_err();
    assert!(matches!(err, BamError::Trainer { position: 4, slice: 4, .. }), "{err}");
    let ledger = RunLedger::load(part.ledger_path()).unwrap();
    assert!(!ledger.is_complete());
    assert!(matches!(ledger.records.last(), Some(LedgerRecord::Aborted { position: 4, .. })));

    let trainer = MockTrainer::default();
    let resumed = resume(&part, &trainer).unwrap();
    assert_eq!(trainer.calls(), 1);
    assert_eq!(resumed.checkpoint.content_hash(), full.checkpoint.content_hash());
}

#[test]
fn tampered_files_and_plans_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let plan = mock_plan(dir.path(), 4, 2, MergeMethod::Slerp);
    run_bam_with(&plan, &MockTrainer::default(), RunOptions { stop_after_merges: Some(1), ..Default::default() })
        .unwrap();

    assert!(matches!(run_bam(&plan, &MockTrainer::default()), Err(BamError::LedgerExists(_))));

    let mut changed = plan.clone();
    changed.c = 0.25;
    assert!(matches!(resume(&changed, &MockTrainer::default()), Err(BamError::PlanMismatch { .. })));

    let branch = plan.checkpoint_dir.join("branch_001.ckpt");
    save_checkpoint(&vector_checkpoint(&[9.0; 8]), &branch).unwrap();
    let err = resume(&plan, &MockTrainer::default()).unwrap_err();
    assert!(matches!(&err, BamError::HashMismatch { file, .. } if file == &branch), "{err}");

    let fresh = tempfile::tempdir().unwrap();
    assert!(matches!(
        resume(&with_dir(&plan, fresh.path().to_path_buf()), &MockTrainer::default()),
        Err(BamError::NoLedger(_))
    ));
}

#[test]
fn invalid_plans_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = mock_plan(dir.path(), 4, 2, MergeMethod::Slerp);
    plan.k = 0;
    assert!(matches!(run_bam(&plan, &MockTrainer::default()), Err(BamError::InvalidPlan(_))));
    plan.k = 2;
    plan.slice_order = vec![1, 1, 2, 3];
    assert!(matches!(run_bam(&plan, &MockTrainer::default()), Err(BamError::InvalidPlan(_))));
}

#[test]
fn ledger_records_norms_and_evals() {
    let dir = tempfile::tempdir().unwrap();
    let plan = mock_plan(dir.path(), 4, 2, MergeMethod::Linear);
    let out = run_bam(&plan, &MockTrainer::default()).unwrap();
    let base = load_checkpoint(&plan.base).unwrap();
    let mut prev = base.clone();
    for r in out.ledger.merges() {
        let LedgerRecord::Merge {
            checkpoint,
            weight_change_from_iteration_base,
            weight_change_from_original,
            eval,
            ..
        } = r
        else {
            unreachable!()
        };
        let merged = load_checkpoint(plan.checkpoint_dir.join(checkpoint)).unwrap();
        let from_prev = bam_core::merge::weight_change_norm(&merged, &prev).unwrap().global;
        let from_base = bam_core::merge::weight_change_norm(&merged, &base).unwrap().global;
        assert_eq!(*weight_change_from_iteration_base, from_prev);
        assert_eq!(*weight_change_from_original, from_base);
        assert!(eval.contains_key("mock"));
        prev = merged;
    }
}

#[test]
fn line_search_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let eval = dir.path().join("eval.txt");
    fs::write(&eval, "1.0").unwrap();
    let trainer = MockTrainer::default();
    let base = vector_checkpoint(&[0.0; 4]);
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];

    let a = vector_checkpoint(&[0.5; 4]);
    let same =
        line_search_c(&[&a, &a], &base, MergeMethod::Slerp, AngleScope::PerTensor, &grid, &eval, &trainer).unwrap();
    assert!(same.table.iter().all(|r| r.nll == same.table[0].nll));
    assert_eq!(same.best_c, 0.0);

    let near = vector_checkpoint(&[0.9; 4]);
    let far = vector_checkpoint(&[2.5; 4]);
    let ends =
        line_search_c(&[&far, &near], &base, MergeMethod::Linear, AngleScope::PerTensor, &[1.0, 0.0], &eval, &trainer)
            .unwrap();
    assert_eq!(ends.best_c, 1.0);
    assert_eq!(ends.table.iter().map(|r| r.c).collect::<Vec<_>>(), vec![0.0, 1.0]);

    // Optimum of (1 - c)·0.5 + c·2.5 = 1 lies at c = 0.25.
    let low = vector_checkpoint(&[0.5; 4]);
    let interior =
        line_search_c(&[&low, &far], &base, MergeMethod::Linear, AngleScope::PerTensor, &grid, &eval, &trainer)
            .unwrap();
    assert_eq!(interior.best_c, 0.25);
    assert!(interior.best_nll < 1e-20);

    assert!(matches!(
        line_search_c(
            &[&a, &a],
            &base,
            MergeMethod::Linear,
            AngleScope::PerTensor,
            &grid,
            &dir.path().join("missing"),
            &trainer
        ),
        Err(BamError::EvalSetMissing(_))
    ));
    assert!(line_search_c(&[&a, &a], &base, MergeMethod::Linear, AngleScope::PerTensor, &[], &eval, &trainer).is_err());
    assert!(
        line_search_c(&[&a, &a], &base, MergeMethod::Linear, AngleScope::PerTensor, &[1.5], &eval, &trainer).is_err()
    );
    assert!(
        line_search_c(&[&a, &a, &a], &base, MergeMethod::Slerp, AngleScope::PerTensor, &grid, &eval, &trainer).is_err()
    );
}
