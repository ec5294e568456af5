mod common;

use common::flow::small_backbone;
use common::stage1::stage1_run;
use preprune::pipeline::{Pipeline, PipelineConfig};
use preprune::scenes::generate_clip;
use preprune::train::*;

#[test]
fn distillation_lowers_the_loss_and_ranks_held_out_tokens() {
    let run = stage1_run(0, 200);
    assert!(run.last < run.initial);
    assert!(run.last >= run.floor - 1e-12);
    assert!(run.excess_drop() > 0.5, "excess drop {}", run.excess_drop());
    assert!(run.spearman > 0.5, "spearman {}", run.spearman);
}

fn small_run(schedule: Schedule) -> (Vec<LossRecord>, Vec<EvalMetrics>) {
    let cfg = PipelineConfig { scorer_hidden: 8, restore_width: 8, restore_heads: 2, ..Default::default() };
    let mut p = Pipeline::<f64>::new(small_backbone(), cfg, 3, 3).unwrap();
    let clips: Vec<_> = (0..2).map(|i| ClipCache::build(&p, &generate_clip(i, 3, 4, 4).unwrap()).unwrap()).collect();
    calibrate_heads(&mut p, &clips, 20).unwrap();
    let tc = TrainConfig { stage1_steps: 5, stage2_steps: 5, ..Default::default() };
    let hist = run_schedule(&mut p, &clips, schedule, &tc).unwrap();
    let ev = clips.iter().map(|c| evaluate(&p, c).unwrap()).collect();
    (hist, ev)
}

#[test]
fn schedules_run_for_the_same_total_steps() {
    for s in Schedule::ALL {
        let (hist, ev) = small_run(s);
        assert_eq!(hist.len(), 10, "{s}");
        assert!(hist.iter().all(|r| r.total.is_finite()));
        assert!(ev.iter().all(|m| m.restore_mse.is_finite() && m.spearman.is_finite()));
        let stages: Vec<&str> = hist.iter().map(|r| r.stage.as_str()).collect();
        match s {
            Schedule::Stage1Only => assert!(stages.iter().all(|&x| x == "1")),
            Schedule::TwoStage => assert_eq!(stages, ["1", "1", "1", "1", "1", "2", "2", "2", "2", "2"]),
            Schedule::Stage2Only => assert!(hist.iter().all(|r| r.stage == "2" && r.total == r.restore + 0.1 * (r.camera + r.depth + r.pmap))),
            Schedule::Joint => assert!(stages.iter().all(|&x| x == "joint")),
        }
    }
}

#[test]
fn training_is_bit_reproducible() {
    for s in [Schedule::TwoStage, Schedule::Joint] {
        let a = small_run(s);
        let b = small_run(s);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
