mod support;

use prunelab::groups::{build_group, PruneSpace, Selection};
use prunelab::io::checkpoint::{self, Checkpoint};
use prunelab::io::corpus::synthetic_corpus;
use prunelab::io::report::{self, ArchRow};
use prunelab::io::{evaluate_perplexity, trace, Corpus};
use prunelab::model::{ModelConfig, TransformerModel};
use prunelab::numerics::Rng;
use prunelab::trainer::{AdamWConfig, BatchSampler, LrSchedule, TrainConfig, Trainer};
use prunelab::Error;
use support::{reference_forward, Mask};

fn toy(seed: u64) -> TransformerModel<f32> {
    let cfg = ModelConfig::uniform(257, 16, 2, 4, 2, 4, 24, 32).unwrap();
    TransformerModel::init(cfg, 0.02, &mut Rng::new(seed)).unwrap()
}

/// A trained, pruned GQA model with optimizer and sampler state.
fn trained_checkpoint() -> (Checkpoint, prunelab::trainer::PruneTrace, Vec<prunelab::trainer::StepMetrics>) {
    let data = synthetic_corpus(40_000, 5);
    let model = toy(5);
    let cfg = TrainConfig {
        target_params: model.parameter_count() * 3 / 5,
        seq_len: 16,
        batch_size: 4,
        warmup_steps: 5,
        prune_warmup: 5,
        max_steps: 20,
        ..TrainConfig::default()
    };
    let mut s = BatchSampler::new(&data, 16, 4, Rng::new(9)).unwrap();
    let mut t = Trainer::new(model, cfg).unwrap();
    t.run(&mut s, |_| {}).unwrap();
    let ck = Checkpoint {
        model: t.model.clone(),
        step: t.step,
        tokens: t.tokens,
        rng: Some(s.rng().state()),
        optimizer: Some(t.optimizer.clone()),
    };
    (ck, t.trace, t.metrics)
}

#[test]
fn zero_model_is_uniform() {
    let mut model = toy(0);
    model.params_mut().scale(0.0);
    let text = synthetic_corpus(3000, 1);
    let ppl = evaluate_perplexity(&model, &text, 32, None).unwrap();
    assert!((ppl - 257.0).abs() < 1e-3, "{ppl}");
}

#[test]
fn perplexity_matches_reference_forward() {
    let model = toy(1).cast::<f64>();
    let text = synthetic_corpus(700, 2);
    let seq_len = 32;
    // windows read tokens i·L ..= (i+1)·L; the last one may be short
    let mut nll = 0.0;
    let mut n = 0usize;
    let mut start = 0;
    while start + 1 < text.len() {
        let end = (start + seq_len + 1).min(text.len());
        let seq: Vec<u32> = text[start..end].iter().map(|&b| b as u32).collect();
        let (_, loss) = reference_forward(model.config(), model.params(), &Mask::all(model.config()), &[seq]);
        nll += loss * (end - start - 1) as f64;
        n += end - start - 1;
        start += seq_len;
    }
    assert_eq!(n, text.len() - 1);
    let want = (nll / n as f64).exp();
    let got = evaluate_perplexity(&model, &text, seq_len, None).unwrap();
    assert!((got - want).abs() / want < 1e-10, "{got} vs {want}");
}

#[test]
fn overfit_batch_beats_untrained_and_eval_is_deterministic() {
    let text = synthetic_corpus(5000, 4);
    let batch: Vec<Vec<u32>> = text[..4 * 33].chunks(33).map(|c| c.iter().map(|&b| b as u32).collect()).collect();
    let untrained = toy(2);
    let cfg = TrainConfig {
        prune_steps: 0,
        warmup_steps: 0,
        schedule: LrSchedule::Constant,
        optimizer: AdamWConfig {
            lr: 1e-2,
            ..AdamWConfig::default()
        },
        seq_len: 32,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(untrained.clone(), cfg).unwrap();
    for _ in 0..60 {
        t.gd_step(&batch).unwrap();
    }
    let seen = &text[..4 * 33];
    let before = evaluate_perplexity(&untrained, seen, 32, None).unwrap();
    let after = evaluate_perplexity(&t.model, seen, 32, None).unwrap();
    assert!(after < before, "{after} !< {before}");
    assert_eq!(after.to_bits(), evaluate_perplexity(&t.model, seen, 32, None).unwrap().to_bits());
    assert!(matches!(evaluate_perplexity(&t.model, &text[..1], 32, None), Err(Error::EmptySplit)));
}

#[test]
fn checkpoint_file_roundtrip_is_bit_exact() {
    let (ck, trace, _) = trained_checkpoint();
    assert!(!trace.is_empty());
    let cfg = ck.model.config();
    assert!(cfg.heads.iter().any(|&h| h < 4) || cfg.ffn.iter().any(|&n| n < 24) || cfg.hidden < 16);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&ck, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.model.config().kv_maps, cfg.kv_maps);
    assert_eq!(back.model.config().stem_ids, cfg.stem_ids);
    for (id, m) in ck.model.params().tensors() {
        let b = back.model.params().get(id).unwrap();
        assert!(m.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    // save → load → save is byte-stable
    assert_eq!(checkpoint::to_bytes(&back), std::fs::read(&path).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    let header_len = bytes.windows(10).position(|w| w == b"header_end").unwrap();
    let header = String::from_utf8(bytes[..header_len].to_vec()).unwrap();
    let mut bumped = header.replacen("format_version=1", "format_version=7", 1).into_bytes();
    bumped.extend_from_slice(&bytes[header_len..]);
    assert!(matches!(checkpoint::from_bytes(&bumped), Err(Error::UnsupportedVersion(7))));
}

#[test]
fn trace_exports_roundtrip() {
    let (_, trace, metrics) = trained_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("trace.csv");
    trace::export(&trace, &csv).unwrap();
    assert_eq!(trace::import(&csv).unwrap(), trace);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("step,tokens,s_attn,s_ffn,s_stem,chosen,m,mean_h,mean_n,params,"));
    assert_eq!(text.lines().count(), trace.len() + 1);

    let json = dir.path().join("trace.json");
    trace::save_json(&trace, &json).unwrap();
    assert_eq!(trace::load_json(&json).unwrap(), trace);

    let mut buf = Vec::new();
    trace::write_metrics(&metrics, &mut buf).unwrap();
    let lines: Vec<_> = String::from_utf8(buf).unwrap().lines().map(str::to_string).collect();
    assert_eq!(lines[0], "step,tokens,loss,lr,params");
    assert_eq!(lines.len(), metrics.len() + 1);
}

#[test]
fn published_rows_roundtrip() {
    // name, hidden, ffn, heads, head dim, layers
    let rows = [
        ("A-134M", 757, 966, 5, 64, 32),
        ("A-469M", 1195, 3006, 19, 64, 24),
        ("A-1.1B", 2048, 4870, 24, 64, 24),
    ];
    let csv: String = std::iter::once("name,hidden,ffn,heads,head_dim,layers,params".to_string())
        .chain(rows.iter().map(|(n, m, f, h, d, l)| format!("{n},{m},{f},{h},{d},{l},")))
        .collect::<Vec<_>>()
        .join("\n");
    let parsed = report::read_csv(&csv).unwrap();
    for (row, &(name, m, f, h, d, l)) in parsed.iter().zip(&rows) {
        assert_eq!(row.name, name);
        assert_eq!((row.hidden, row.head_dim, row.layers, row.params), (m, d, l, None));
        assert_eq!(row.ffn, vec![f; l]);
        assert_eq!(row.heads, vec![h; l]);
    }
    assert_eq!(report::read_csv(&report::to_csv(&parsed).unwrap()).unwrap(), parsed);
    assert_eq!(report::parse_table(&report::render_table(&parsed)).unwrap(), parsed);
}

#[test]
fn stem_prune_moves_only_hidden() {
    let cfg = ModelConfig::uniform(257, 32, 2, 4, 4, 8, 64, 16).unwrap();
    let mut model = TransformerModel::<f32>::init(cfg.clone(), 0.02, &mut Rng::new(0)).unwrap();
    let before = ArchRow::from_config("before", &cfg);
    assert_eq!((before.hidden, before.ffn.clone(), before.heads.clone()), (32, vec![64, 64], vec![4, 4]));
    assert_eq!((before.head_dim, before.layers), (8, 2));
    let group = build_group(&model, &PruneSpace::for_config(&cfg), Selection::Stem(13)).unwrap();
    prunelab::groups::apply_prune(&mut model, &group).unwrap();
    let after = ArchRow::from_config("before", model.config());
    assert_eq!(after.hidden, before.hidden - 1);
    assert_eq!(
        ArchRow {
            hidden: before.hidden,
            params: before.params,
            ..after.clone()
        },
        before
    );
    assert_eq!(after.params, Some(before.params.unwrap() - group.size()));
}

#[test]
fn corpus_split_is_positional_and_deterministic() {
    let bytes = synthetic_corpus(10_000, 8);
    assert_eq!(bytes, synthetic_corpus(10_000, 8));
    let c = Corpus::from_bytes(bytes.clone(), 0.02).unwrap();
    assert_eq!(c.split_offset(), 9800);
    assert_eq!([c.train(), c.heldout()].concat(), bytes);
}
