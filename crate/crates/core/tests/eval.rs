mod common;

use geode_core::arms::Arm;
use geode_core::dataset::Split;
use geode_core::drh::{parse_text_answer, Answer};
use geode_core::eval::{
    chance_level, compare_paired, evaluate, mca_registry, score_answer, score_box, score_na, EvalReport, Predictor,
    SampleOutcome,
};
use geode_core::nn::Dims;
use geode_core::pipeline::{Lab, CHECKPOINT};
use geode_core::qa::{AnswerKind, QaSample, TaskKind};
use geode_core::stats::binomial_ci;
use geode_core::trainer;
use geode_core::vocab::Vocab;
use geode_tensor::checkpoint;
use proptest::prelude::*;

fn scalar_sample(task: TaskKind, target: f64) -> QaSample {
    QaSample {
        scene_id: 0,
        task,
        question: "q".into(),
        answer_kind: AnswerKind::Scalar,
        choices: None,
        rationale: String::new(),
        target_scalar: Some(target),
        target_box: None,
        answer_text: target.to_string(),
    }
}

fn mca_sample(n: usize, answer: usize) -> QaSample {
    let choices: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
    QaSample {
        scene_id: 0,
        task: TaskKind::RelDist,
        question: "q".into(),
        answer_kind: AnswerKind::Mca,
        answer_text: ["A", "B", "C", "D"][answer].into(),
        choices: Some(choices),
        rationale: String::new(),
        target_scalar: None,
        target_box: None,
    }
}

#[test]
fn na_score_reference_values() {
    assert_eq!(score_na(3.0, 3.0), Some(1.0));
    assert_eq!(score_na(6.0, 3.0), Some(0.0));
    // 10% off clears thresholds 0.50..0.85
    assert!((score_na(2.2, 2.0).unwrap() - 0.8).abs() < 1e-12);
    assert_eq!(score_na(1.0, 0.0), None);
    assert_eq!(score_na(1.0, -2.0), None);
    assert_eq!(score_na(f64::NAN, 2.0), Some(0.0));
}

proptest! {
    #[test]
    fn na_score_falls_with_relative_error(target in 0.1f64..50.0, e1 in 0.0f64..1.5, e2 in 0.0f64..1.5, sign in prop::bool::ANY) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let s = if sign { 1.0 } else { -1.0 };
        let near = score_na(target * (1.0 + s * lo), target).unwrap();
        let far = score_na(target * (1.0 + s * hi), target).unwrap();
        prop_assert!(near >= far);
        prop_assert!((0.0..=1.0).contains(&near));
    }

    #[test]
    fn box_score_is_perfect_on_exact_boxes(c in prop::array::uniform7(0.1f64..5.0)) {
        prop_assert_eq!(score_box(&c, &c), Some(1.0));
    }
}

#[test]
fn spaced_digits_parse() {
    let s = scalar_sample(TaskKind::AbsDist, 12.5);
    assert_eq!(parse_text_answer(&s, "1 2 . 5"), Answer::Scalar(12.5));
    assert_eq!(parse_text_answer(&s, "- 0 . 2"), Answer::Scalar(-0.2));
    assert!(matches!(parse_text_answer(&s, "1 2 chair"), Answer::Unparseable(_)));
    assert!(matches!(parse_text_answer(&s, ""), Answer::Unparseable(_)));
}

#[test]
fn mca_answers_parse_and_score() {
    let s = mca_sample(3, 1);
    assert_eq!(parse_text_answer(&s, "B"), Answer::Choice(1));
    assert!(matches!(parse_text_answer(&s, "D"), Answer::Unparseable(_)));
    assert!(matches!(parse_text_answer(&s, "A B"), Answer::Unparseable(_)));
    assert_eq!(score_answer(&s, &Answer::Choice(1)), (Some(1.0), false));
    assert_eq!(score_answer(&s, &Answer::Choice(2)), (Some(0.0), false));
    assert_eq!(score_answer(&s, &Answer::Unparseable("x".into())), (Some(0.0), true));
}

#[test]
fn unparseable_numeric_scores_zero_and_is_flagged() {
    let s = scalar_sample(TaskKind::ObjSize, 1.2);
    assert_eq!(score_answer(&s, &Answer::Unparseable("?".into())), (Some(0.0), true));
    assert_eq!(score_answer(&s, &Answer::Choice(0)), (Some(0.0), true));
    let zero = scalar_sample(TaskKind::AbsDist, 0.0);
    assert_eq!(score_answer(&zero, &Answer::Scalar(1.0)), (None, false));
}

fn outcome(index: usize, task: TaskKind, score: f64) -> SampleOutcome {
    SampleOutcome {
        index,
        task,
        score: Some(score),
        unparseable: false,
        answer: Answer::Scalar(0.0),
    }
}

#[test]
fn report_averages_tasks_then_kinds() {
    let outs = vec![
        outcome(0, TaskKind::AbsDist, 1.0),
        outcome(1, TaskKind::AbsDist, 0.5),
        outcome(2, TaskKind::ObjCount, 0.0),
        outcome(3, TaskKind::RelDist, 1.0),
        outcome(4, TaskKind::Locate, 0.3),
    ];
    let r = EvalReport::from_outcomes("full", 3, &outs);
    assert_eq!(r.tasks["abs_dist"], 0.75);
    assert_eq!(r.counts["abs_dist"], 2);
    assert!((r.na_mean - 0.375).abs() < 1e-12);
    assert_eq!(r.mca_mean, 1.0);
    assert!(!r.tasks.contains_key("locate"));
    assert_eq!(r.locate, Some(0.3));
    r.check().unwrap();
}

#[test]
fn paired_comparison_uses_numeric_pairs_only() {
    let a = vec![outcome(0, TaskKind::AbsDist, 1.0), outcome(1, TaskKind::ObjSize, 0.5), outcome(2, TaskKind::RelDist, 1.0)];
    let b = vec![outcome(0, TaskKind::AbsDist, 0.5), outcome(1, TaskKind::ObjSize, 0.5), outcome(2, TaskKind::RelDist, 0.0)];
    let p = compare_paired(&a, &b);
    assert_eq!(p.n, 2);
    assert!((p.mean_diff - 0.25).abs() < 1e-12);
    assert_eq!((p.sign.positive, p.sign.ties), (1, 1));
}

/// Untrained full-arm stage-2 store for `lab`'s config.
fn untrained_store(lab: &Lab) -> geode_tensor::ParamStore {
    let lm = trainer::init_lm_store(&lab.cfg, Vocab::base().len());
    let s1 = trainer::init_stage1(&lab.cfg, &lm);
    trainer::init_stage2(&lab.cfg, Arm::Full, &lm, &s1, Vocab::extended().len()).unwrap()
}

#[test]
fn untrained_model_answers_mca_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config();
    cfg.data.tasks = vec!["rel_dist".into(), "rel_dir".into(), "appear_order".into()];
    cfg.data.train_scenes = 1;
    cfg.data.eval_scenes = 480;
    let lab = Lab::new(cfg, tmp.path()).unwrap();
    lab.gen_data().unwrap();
    let heldout = Split::load(&lab.data_dir(), "eval").unwrap();
    let mca: Vec<_> = heldout
        .records
        .iter()
        .filter(|r| r.sample.answer_kind == AnswerKind::Mca)
        .cloned()
        .collect();
    assert!(mca.len() >= 1000, "only {} MCA samples", mca.len());

    let store = untrained_store(&lab);
    let dims = Dims::from_config(&lab.cfg);
    let inputs = trainer::scene_inputs(&heldout, lab.cfg.data.patch).unwrap();
    let features = trainer::all_prefix_features(&store, &inputs, Arm::Full, &dims).unwrap();
    let vocab = Vocab::extended();
    let p = Predictor {
        store: &store,
        arm: Arm::Full,
        vocab: &vocab,
        scales: &heldout.manifest.scales,
        dims: &dims,
        features: &features,
        max_tokens: lab.cfg.eval.max_answer_tokens,
    };
    let outs = evaluate(&p, mca_registry().get("constrained").unwrap().as_ref(), &mca).unwrap();
    let correct = outs.iter().filter(|o| o.score == Some(1.0)).count() as u64;
    let chance = chance_level(&mca.iter().map(|r| &r.sample).collect::<Vec<_>>());
    let (lo, hi) = binomial_ci(correct, outs.len() as u64, 0.01);
    assert!(
        lo <= chance && chance <= hi,
        "accuracy {correct}/{} vs chance {chance:.3}: 99% CI [{lo:.3}, {hi:.3}]",
        outs.len()
    );
}

#[test]
fn identical_checkpoints_score_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config();
    cfg.train.arm = "full".into();
    let mut reports = Vec::new();
    let mut lab = Lab::new(cfg.clone(), tmp.path()).unwrap();
    lab.gen_data().unwrap();
    let store = untrained_store(&lab);
    for seed in [7, 8] {
        cfg.seed = seed;
        lab = Lab::new(cfg.clone(), tmp.path()).unwrap();
        std::fs::create_dir_all(lab.stage2_dir()).unwrap();
        checkpoint::save(lab.stage2_dir().join(CHECKPOINT), &store).unwrap();
        reports.push(lab.evaluate("full").unwrap());
    }
    let (a, b) = (&reports[0], &reports[1]);
    assert_eq!(a.1, b.1);
    assert_eq!((&a.0.tasks, a.0.overall, a.0.locate), (&b.0.tasks, b.0.overall, b.0.locate));
    assert_eq!(a.0.seed, 7);
    assert_eq!(b.0.seed, 8);
}

#[test]
fn free_and_constrained_decoders_are_registered() {
    let names: Vec<&str> = mca_registry().names().collect();
    assert!(names.contains(&"constrained") && names.contains(&"free"));
    assert!(mca_registry().get("beam").is_err());
}
