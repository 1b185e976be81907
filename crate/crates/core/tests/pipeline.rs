use incner::contrastive::ContrastiveMode;
use incner::corpus::{build_task_stream, synthesize_corpus, Lexicon, SynthConfig, TaskStream, TaskStreamOptions};
use incner::encoder::EncoderConfig;
use incner::protocol::{run_step, run_stream, RunConfig, RunState};
use incner::relabel::RelabelStrategy;
use incner::Error;

fn fixture(tasks: usize) -> (TaskStream, Lexicon) {
    let synth = synthesize_corpus(&SynthConfig {
        class_count: 3 * tasks,
        tokens_per_class: 40,
        dim: 8,
        seed: 12,
        ..SynthConfig::default()
    })
    .unwrap();
    let stream = build_task_stream(&synth.corpus, tasks, 3, 12, TaskStreamOptions::default()).unwrap();
    (stream, synth.lexicon)
}

fn config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder = EncoderConfig {
        embedding_dim: 8,
        window: 1,
        hidden_dim: 16,
        rep_dim: 12,
        proj_hidden_dim: 8,
        proj_dim: 8,
    };
    cfg.train.schedule.total_epochs = 4;
    cfg.train.schedule.warmup_epochs = 2;
    cfg
}

#[test]
fn identical_runs_serialize_identically() {
    let (stream, lexicon) = fixture(2);
    let a = run_stream(&stream, &config(), Some(&lexicon)).unwrap();
    let b = run_stream(&stream, &config(), Some(&lexicon)).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn relabeling_ignores_later_training() {
    let (stream, lexicon) = fixture(2);
    let cfg = config();
    let mut base = RunState::new(&cfg, Some(&lexicon)).unwrap();
    run_step(&mut base, &stream.tasks[0], &cfg).unwrap();

    let mut reports = Vec::new();
    for lr in [0.05, 0.5] {
        let mut step_cfg = cfg.clone();
        step_cfg.train.learning_rate = lr;
        let mut state = RunState {
            params: base.params.clone(),
            snapshot: None,
            memory: base.memory.clone(),
            learnt: base.learnt.clone(),
            history: Vec::new(),
        };
        let report = run_step(&mut state, &stream.tasks[1], &step_cfg).unwrap();
        reports.push((report.relabel.clone().unwrap(), state.params.clone()));
    }
    assert_eq!(reports[0].0, reports[1].0);
    assert_ne!(reports[0].1, reports[1].1, "the two steps should train differently");
}

#[test]
fn first_step_ignores_later_tasks() {
    let (stream, lexicon) = fixture(3);
    let mut cfg = config();
    cfg.relabel.strategy = RelabelStrategy::None;
    cfg.train.mode = ContrastiveMode::NormalSclNoO;
    cfg.memory.rehearsal = false;
    let full = run_stream(&stream, &cfg, Some(&lexicon)).unwrap();
    let single = run_stream(&stream.truncated(1), &cfg, Some(&lexicon)).unwrap();
    assert_eq!(full.steps[0], single.steps[0]);
}

#[test]
fn learnt_classes_grow_by_one_task() {
    let (stream, lexicon) = fixture(3);
    let cfg = config();
    let mut state = RunState::new(&cfg, Some(&lexicon)).unwrap();
    for (t, task) in stream.tasks.iter().enumerate() {
        run_step(&mut state, task, &cfg).unwrap();
        assert_eq!(state.learnt.iter().flatten().count(), 3 * (t + 1));
        assert_eq!(state.snapshot.as_ref().map(|s| s.step()), t.checked_sub(1));
    }
}

#[test]
fn out_of_order_tasks_are_rejected() {
    let (stream, lexicon) = fixture(2);
    let cfg = config();
    let mut state = RunState::new(&cfg, Some(&lexicon)).unwrap();
    let err = run_step(&mut state, &stream.tasks[1], &cfg).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}
