use proptest::prelude::*;
use sovmas::checkpoint::Checkpoint;
use sovmas::corpus::{load_corpus, write_corpus};
use sovmas::run::few_shot_continue;
use sovmas_core::data::{synth_corpus, Corpus, SynthSpec};
use sovmas_core::model::{Model, ModelConfig};
use sovmas_core::tensor::LrSchedule;
use sovmas_core::train::{evaluate, Decoding, TrainConfig, TrainMode, Trainer};

fn spec(n: usize) -> SynthSpec {
    SynthSpec {
        languages: vec![("en".into(), n)],
        vocab_size: 32,
        classes: 4,
        n_images: 2,
        regions: 2,
        d_visual: 16,
        topics: 4,
        fillers: 10,
        article_len: 5,
        ..SynthSpec::default()
    }
}

fn trained() -> (Corpus, Trainer<'static, f32>) {
    let corpus: &'static Corpus = Box::leak(Box::new(synth_corpus(9, &spec(24)).unwrap()));
    let cfg = TrainConfig {
        mode: TrainMode::Monolingual,
        batch_size: 4,
        schedule: LrSchedule::inverse_sqrt(3e-3, 5),
        ..TrainConfig::default()
    };
    let idx: Vec<usize> = (0..24).collect();
    let mut t = Trainer::new(Model::new(ModelConfig::tiny(), 1).unwrap(), corpus, &idx, cfg).unwrap();
    t.run(5, |_| Ok(None)).unwrap();
    (corpus.clone(), t)
}

#[test]
fn save_load_evaluate_is_bit_exact() {
    let (corpus, t) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sovm");
    Checkpoint::from_model(&t.model, Some(&t.optimizer), t.step_count()).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.step, 5);
    assert_eq!(back.optimizer.as_ref(), Some(&t.optimizer));
    let idx: Vec<usize> = (0..8).collect();
    let dec = Decoding::default();
    let before = evaluate(&t.model, &corpus, &idx, &dec).unwrap();
    let after = evaluate(&back.model().unwrap(), &corpus, &idx, &dec).unwrap();
    assert_eq!(before, after);
}

#[test]
fn zero_step_continuation_is_identity() {
    let (corpus, t) = trained();
    let ck = Checkpoint::from_model(&t.model, Some(&t.optimizer), t.step_count());
    let (out, metrics, warnings) = few_shot_continue(&ck, &corpus, &[0, 1, 2], &TrainConfig::default(), 0).unwrap();
    assert_eq!(out, ck);
    assert!(metrics.steps.is_empty() && warnings.is_empty());
}

#[test]
fn continuation_extends_the_step_counter() {
    let (corpus, t) = trained();
    let ck = Checkpoint::from_model(&t.model, Some(&t.optimizer), t.step_count());
    let cfg = TrainConfig { mode: TrainMode::Monolingual, batch_size: 2, ..TrainConfig::default() };
    let (out, metrics, warnings) = few_shot_continue(&ck, &corpus, &[3, 4, 5], &cfg, 3).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(metrics.steps.iter().map(|m| m.step).collect::<Vec<_>>(), vec![6, 7, 8]);
    assert_eq!(out.step, 8);
    assert_eq!(out.optimizer.unwrap().step, 8);

    let bare = Checkpoint { optimizer: None, ..ck };
    let (out, _, warnings) = few_shot_continue(&bare, &corpus, &[3, 4, 5], &cfg, 1).unwrap();
    assert_eq!(warnings.len(), 1);
    assert_eq!(out.optimizer.unwrap().step, 1);
}

fn arb_spec() -> impl Strategy<Value = (u64, SynthSpec)> {
    (any::<u64>(), 1usize..6, 1usize..4, 1usize..4, 0.0f64..=1.0, 0.0f64..0.5).prop_map(|(seed, n, images, regions, info, smooth)| {
        let s = SynthSpec {
            languages: vec![("en".into(), n), ("ja".into(), 1 + n / 2)],
            vocab_size: 64,
            classes: 5,
            n_images: images,
            regions,
            d_visual: 3,
            informativeness: info,
            topics: 5,
            fillers: 6,
            article_len: 4,
            class_smoothing: smooth,
            ..SynthSpec::default()
        };
        (seed, s)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn corpus_files_round_trip((seed, s) in arb_spec()) {
        let corpus = synth_corpus(seed, &s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("c.jsonl");
        write_corpus(&corpus, &m).unwrap();
        prop_assert_eq!(load_corpus(&m, Some(64)).unwrap(), corpus);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), step in any::<u64>(), with_opt in any::<bool>()) {
        let model = Model::<f32>::new(ModelConfig::tiny(), seed).unwrap();
        let mut opt = sovmas_core::tensor::OptimizerState::new(&model.params);
        opt.step = step / 3;
        opt.first_moment[1][0] = (seed % 1000) as f32 * 1e-3;
        let ck = Checkpoint::from_model(&model, with_opt.then_some(&opt), step);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        prop_assert_eq!(Checkpoint::read_from(&mut buf.as_slice()).unwrap(), ck);
    }
}
