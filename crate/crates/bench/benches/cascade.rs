use cascade_core::corpus::LabelSpace;
use cascade_core::ensemble::summarize;
use cascade_core::eval::{full_metrics, is_metrics, OosOnInScope};
use cascade_core::llm_client::{StubClient, StubLatency, StubMode, StubOracle};
use cascade_core::lsr::reduce_label_space;
use cascade_core::prompting::{parse_verdict, render_prompt, PromptSpec};
use cascade_core::router::{run_bert_only, run_routed, RouterConfig};
use cascade_core::synth::{generate, SynthConfig};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn lsr_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("reduce_label_space");
    for m in [8, 30, 200] {
        let labels = LabelSpace::with_default_oos((0..m).map(|i| format!("l{i}"))).unwrap();
        // Geometric decay, normalized.
        let raw: Vec<f64> = (0..m).map(|i| 0.8f64.powi(i)).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        group.bench_with_input(BenchmarkId::from_parameter(m), &probs, |b, probs| {
            b.iter(|| reduce_label_space(black_box(probs), &labels, 0.85).unwrap())
        });
    }
    group.finish();
}

fn ensemble_bench(c: &mut Criterion) {
    let out = generate(&SynthConfig::default()).unwrap();
    let records: Vec<_> = out.log.values().cloned().collect();
    c.bench_function("summarize/768x5", |b| {
        b.iter(|| records.iter().map(summarize).map(|s| s.uncertainty).sum::<f64>())
    });
}

fn prompt_bench(c: &mut Criterion) {
    let spec = PromptSpec {
        labels: (1..=30).map(|i| format!("intent_{i}")).collect(),
        oos_token: "UNK".into(),
        history_lines: vec!["hello there".into(), "can we move the meeting".into(), "sure".into()],
        utterance: "what time works for everyone?".into(),
    };
    c.bench_function("render_prompt/30", |b| b.iter(|| render_prompt(black_box(&spec)).unwrap()));
    let offered = spec.labels.clone();
    let reply = "<think>the user asks about time, maybe {\"intent\": \"intent_3\"}</think>\n```json\n{\"intent\": \"intent_7\"}\n```";
    c.bench_function("parse_verdict/reasoning", |b| {
        b.iter(|| parse_verdict(black_box(reply), &offered, "UNK"))
    });
}

fn pipeline_bench(c: &mut Criterion) {
    let out = generate(&SynthConfig::default()).unwrap();
    let ls = &out.label_space;
    let golds: Vec<&str> = out.corpus.utterances().map(|u| u.gold_intent.as_str()).collect();
    let stub = StubClient::new(
        StubOracle::from_corpus(&out.corpus, &StubMode::AlwaysGoldIfOffered),
        StubLatency::default(),
        0,
    );
    let config = RouterConfig::default();
    c.bench_function("pipeline/bert-only/768", |b| {
        b.iter(|| run_bert_only(&out.corpus, &out.log, ls, config.sigma).unwrap())
    });
    c.bench_function("pipeline/routed-lsr/768", |b| {
        b.iter(|| run_routed(&out.corpus, &out.log, &stub, ls, &config, true).unwrap())
    });
    let decisions = run_routed(&out.corpus, &out.log, &stub, ls, &config, true).unwrap().decisions;
    let preds: Vec<&str> = decisions.iter().map(|d| d.final_label.as_str()).collect();
    c.bench_function("metrics/768", |b| {
        b.iter(|| {
            let (ip, ig): (Vec<&str>, Vec<&str>) = preds
                .iter()
                .zip(&golds)
                .filter(|(_, g)| !ls.is_oos(g))
                .map(|(p, g)| (*p, *g))
                .unzip();
            (
                is_metrics(&ip, &ig, ls, OosOnInScope::CountAsError).unwrap(),
                full_metrics(&preds, &golds, ls).unwrap(),
            )
        })
    });
}

criterion_group!(benches, lsr_bench, ensemble_bench, prompt_bench, pipeline_bench);
criterion_main!(benches);
