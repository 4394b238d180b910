use super::*;
use crate::data::{synth_toy_dataset, Dataset, Split, SplitSpec, TextKind};
use crate::encoders::{speech_input, EncoderConfig};
use crate::nn::Graph;
use crate::seq2seq::{greedy_decode, Feed};

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        image_dim: 256,
        conv_channels: 4,
        conv_kernel: 3,
        conv_stride: 1,
        speech_hidden: 8,
        speech_layers: 1,
        char_embed: 4,
        text_hidden: 8,
        text_layers: 1,
        asr_hidden: 8,
        asr_layers: 1,
        decoder_hidden: 8,
        decoder_embed: 4,
        mtl_asr_hidden: 8,
        mtl_asr_layers: (1, 1, 1),
        mtl_match_hidden: 8,
        mtl_match_layers: (1, 1),
        ..EncoderConfig::toy()
    }
}

fn tiny(strategy: Strategy) -> TrainRunConfig {
    TrainRunConfig {
        epochs: 2,
        asr_epochs: None,
        batch_size: 4,
        encoder: tiny_encoder(),
        beam_width: 2,
        split: Some(SplitSpec { n_val_images: 2, n_test_images: 0, seed: 0 }),
        ..TrainRunConfig::toy(strategy)
    }
}

fn tiny_data() -> Dataset {
    synth_toy_dataset(6, 2, 6, 3)
}

#[test]
fn every_strategy_runs_end_to_end() {
    let ds = tiny_data();
    for s in Strategy::ALL {
        let cfg = TrainRunConfig { text_fraction: 0.5, ..tiny(s) };
        let out = train(&cfg, &ds).unwrap_or_else(|e| panic!("{s}: {e}"));
        assert_eq!(out.retrieval.queries, 4, "{s}");
        assert_eq!(out.retrieval.gallery, 2, "{s}");
        let stages: usize = if s.is_pipeline() { 2 } else { 1 };
        assert_eq!(out.history.len(), stages * cfg.epochs, "{s}");
        assert!(out.history.iter().all(|m| m.loss.is_finite()));
        if s.is_mtl() {
            assert!(out.history.iter().all(|m| m.secondary_loss.is_some()), "{s}");
        }
    }
}

#[test]
fn sequential_pipeline_trains_on_all_training_speech() {
    let ds = tiny_data();
    for (fraction, mode, expect) in [(0.25, Strategy::PipeSeq, 8), (0.25, Strategy::PipeInd, 2), (1.0, Strategy::PipeInd, 8)] {
        let cfg = TrainRunConfig { text_fraction: fraction, epochs: 1, ..tiny(mode) };
        assert_eq!(train(&cfg, &ds).unwrap().nlu_train_texts, Some(expect), "{mode} at {fraction}");
    }
}

#[test]
fn identical_seeds_give_identical_histories() {
    let ds = tiny_data();
    let cfg = tiny(Strategy::MtlTranscribe);
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    assert_eq!(metrics_csv(&a.history).unwrap(), metrics_csv(&b.history).unwrap());
    let c = train(&TrainRunConfig { seed: 9, ..cfg }, &ds).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn mtl_without_text_is_retrieval_only_training() {
    let ds = tiny_data();
    for (s, kind) in [(Strategy::MtlTranscribe, ArchKind::MtlSeq2Seq), (Strategy::MtlMatch, ArchKind::MtlMatch)] {
        let cfg = TrainRunConfig { text_fraction: 0.0, ..tiny(s) };
        let p = Prepared::new(&ds, &cfg).unwrap();
        let mtl = train_prepared(&cfg, &p).unwrap();
        let model = Model::new(kind, &cfg.encoder, p.vocab.clone(), cfg.seed).unwrap();
        let solo = train_grounded_model(model, &cfg, &p, Pairing::SpeechImage).unwrap();
        assert_eq!(mtl.retrieval, solo.retrieval);
        assert!(mtl.history.iter().all(|m| m.secondary_loss.is_none()));
        assert_eq!(mtl.history, solo.history);
    }
}

#[test]
fn shared_trunk_moves_under_both_tasks() {
    let ds = tiny_data();
    let cfg = tiny(Strategy::MtlTranscribe);
    let p = Prepared::new(&ds, &cfg).unwrap();
    let model = Model::new(ArchKind::MtlSeq2Seq, &cfg.encoder, p.vocab.clone(), 0).unwrap();
    let Secondary::Seq2Seq { speech, targets, .. } = mtl_secondary(&cfg, &p, MtlVariant::Seq2Seq).unwrap() else { unreachable!() };
    let trunk: Vec<_> = model.store.iter().filter(|(_, q)| q.name.starts_with("mtl.shared")).map(|(id, _)| id).collect();
    assert!(!trunk.is_empty());

    let g = Graph::new();
    let loss = model.retrieval_loss(&g, &p, &[&Query::Speech(speech[0]), &Query::Speech(speech[3])], &[&p.record(speech[0]).image_id, &p.record(speech[3]).image_id], 0.2).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(trunk.iter().all(|id| grads.param(*id).is_some_and(|t| t.sq_norm() > 0.0)));
    assert!(model.store.iter().filter(|(_, q)| q.name.starts_with("decoder")).all(|(id, _)| grads.param(id).is_none()));

    let g = Graph::new();
    let loss = model.seq2seq_loss(&g, &p, &speech[..2], &[&targets[0], &targets[1]], Feed::TeacherForcing).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(trunk.iter().all(|id| grads.param(*id).is_some_and(|t| t.sq_norm() > 0.0)));
    assert!(model.store.iter().filter(|(_, q)| q.name.starts_with("mtl.retrieval") || q.name.starts_with("image")).all(|(id, _)| grads.param(id).is_none()));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ds = tiny_data();
    let cfg = TrainRunConfig { epochs: 1, ..tiny(Strategy::MtlMatch) };
    let out = train(&cfg, &ds).unwrap();
    let trained = &out.models[0];
    let ck = Checkpoint::from_trained(trained, &cfg.encoder, &cfg.content_hash());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert!(!back.adam.state.is_empty());
    let model = back.model().unwrap();
    let p = Prepared::new(&ds, &cfg).unwrap();
    let q: Vec<Query> = p.indices(Split::Val).into_iter().map(Query::Speech).collect();
    let a = trained.model.query_matrix(&p, &q, 4).unwrap();
    let b = model.query_matrix(&p, &q, 4).unwrap();
    assert_eq!(a.data(), b.data());

    let mut bytes = ck.to_bytes().unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(Checkpoint::from_bytes(&bytes, &path).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint", &path).is_err());
}

#[test]
fn metrics_csv_round_trip_and_empty_header() {
    let ds = tiny_data();
    let out = train(&TrainRunConfig { epochs: 1, ..tiny(Strategy::PipeInd) }, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics_csv(&path, &out.history).unwrap();
    assert_eq!(read_metrics_csv(&path).unwrap(), out.history);
    assert!(metrics_csv(&[]).unwrap().starts_with("stage,epoch,lr,loss"));
}

#[test]
fn run_seeds_reports_each_seed_and_the_mean() {
    let ds = tiny_data();
    let cfg = TrainRunConfig { epochs: 1, seed: 5, ..tiny(Strategy::SpeechImage) };
    let one = run_seeds(&cfg, &ds, 1).unwrap();
    assert_eq!(one.per_seed.len(), 1);
    assert_eq!(one.mean, one.per_seed[0].1);
    assert_eq!(one.per_seed[0].1, train(&cfg, &ds).unwrap().retrieval);
    let three = run_seeds(&cfg, &ds, 3).unwrap();
    assert_eq!(three.per_seed.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![5, 6, 7]);
    let mean_r10 = three.per_seed.iter().map(|(_, r)| r.r10).sum::<f64>() / 3.0;
    assert!((three.mean.r10 - mean_r10).abs() < 1e-15);
    assert!(run_seeds(&cfg, &ds, 0).is_err());
}

#[test]
fn invalid_combinations_fail_before_training() {
    let mut ds = tiny_data();
    for r in &mut ds.records {
        r.translation = None;
    }
    assert!(matches!(train(&tiny(Strategy::MtlTranslate), &ds), Err(crate::Error::Validation(_))));
    let translate_pipe = TrainRunConfig { text_kind: TextKind::Translation, ..tiny(Strategy::PipeSeq) };
    assert!(train(&translate_pipe, &ds).is_err());
}

/// One utterance, many steps: the loss collapses and greedy decoding
/// reproduces the training string.
#[test]
fn seq2seq_overfits_a_single_utterance() {
    let ds = synth_toy_dataset(1, 1, 3, 11);
    let cfg = TrainRunConfig {
        split: None,
        encoder: EncoderConfig { asr_hidden: 16, decoder_hidden: 16, decoder_embed: 8, ..tiny_encoder() },
        ..TrainRunConfig::toy(Strategy::PipeInd)
    };
    let p = Prepared::new(&ds, &cfg).unwrap();
    let vocab = p.vocab().unwrap().clone();
    let text = p.record(0).transcription.clone().unwrap();
    let target = vocab.encode(&text).unwrap();
    let mut model = Model::new(ArchKind::Seq2Seq, &cfg.encoder, Some(vocab.clone()), 0).unwrap();
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    let mut losses = Vec::new();
    for _ in 0..800 {
        let g = Graph::new();
        let loss = model.seq2seq_loss(&g, &p, &[0], &[&target], Feed::TeacherForcing).unwrap();
        losses.push(g.value(loss).item());
        let grads = g.backward(loss).unwrap().into_params();
        adam.step(&mut model.store, &grads, 1e-2).unwrap();
    }
    assert!(losses[49] <= 0.5 * losses[0], "{} → {}", losses[0], losses[49]);
    assert!(*losses.last().unwrap() < 1e-3, "final loss {}", losses.last().unwrap());

    let g = Graph::new();
    let x = speech_input(&g, &[&p.features[0]]).unwrap();
    let h = model.encode_sequence(&g, &x).unwrap();
    let dec = model.decoder().unwrap();
    let mem = dec.memories(&g, &model.store, &h).unwrap().pop().unwrap();
    let hyp = greedy_decode(&dec.stepper(&model.store, &mem), 200).unwrap();
    assert_eq!(vocab.decode(&hyp.tokens), text);
    let decoded = model.decode_text(&p, &[0], 10, true, 1).unwrap();
    assert_eq!(decoded[0].0, text);
    assert_eq!(text_score(TextKind::Transcription, &[&text], &[&decoded[0].0]).unwrap(), 0.0);
}

#[test]
fn re_evaluation_matches_the_training_report() {
    let ds = tiny_data();
    for s in [Strategy::SpeechImage, Strategy::TextImage, Strategy::PipeSeq, Strategy::MtlMatch] {
        let cfg = TrainRunConfig { epochs: 1, asr_epochs: Some(1), ..tiny(s) };
        let p = Prepared::new(&ds, &cfg).unwrap();
        let out = train_prepared(&cfg, &p).unwrap();
        let models: Vec<(&str, &Model)> = out.models.iter().map(|m| (m.role.as_str(), &m.model)).collect();
        let (r, text) = evaluate_models(&cfg, &p, &models, Split::Val).unwrap();
        assert_eq!(r, out.retrieval, "{s}");
        assert_eq!(text, out.text_metric, "{s}");
        assert!(evaluate_models(&cfg, &p, &[], Split::Val).is_err());
    }
}
