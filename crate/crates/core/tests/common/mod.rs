#![allow(dead_code)]

use cascade_core::corpus::{parse_corpus, Corpus, CorpusRecord, LabelSpace, UtteranceKey};
use cascade_core::ensemble::{EnsembleLog, EnsembleRecord};
use cascade_core::llm_client::{StubClient, StubLatency, StubMode, StubOracle};

pub fn label_space(m: usize) -> LabelSpace {
    LabelSpace::with_default_oos((0..m).map(|i| format!("l{i}"))).unwrap()
}

/// One utterance of a hand-built fixture: gold label and ensemble runs.
pub struct Item {
    pub gold: String,
    pub runs: Vec<Vec<f64>>,
}

pub fn confident(gold: &str, peak: usize, m: usize, runs: usize) -> Item {
    let mut probs = vec![0.1 / (m - 1) as f64; m];
    probs[peak] = 0.9;
    Item {
        gold: gold.into(),
        runs: vec![probs; runs],
    }
}

/// Five runs split 3/2 between `first` and `second`; vote-label std ~0.33.
pub fn uncertain(gold: &str, first: usize, second: usize, m: usize) -> Item {
    let rest = m - 2;
    let fill = |p: f64, q: f64| {
        let mut v = vec![(1.0 - p - q) / rest as f64; m];
        v[first] = p;
        v[second] = q;
        v
    };
    Item {
        gold: gold.into(),
        runs: vec![fill(0.9, 0.05), fill(0.9, 0.05), fill(0.9, 0.05), fill(0.3, 0.6), fill(0.3, 0.6)],
    }
}

/// Corpus of dialogues of `per_dialogue` turns plus its ensemble log.
pub fn fixture(items: &[Item], per_dialogue: usize, ls: &LabelSpace) -> (Corpus, EnsembleLog) {
    let mut lines = Vec::new();
    let mut log = EnsembleLog::new();
    for (n, item) in items.iter().enumerate() {
        let key = UtteranceKey::new(format!("d{:03}", n / per_dialogue), n % per_dialogue);
        lines.push(
            serde_json::to_string(&CorpusRecord {
                dialogue_id: key.dialogue_id.clone(),
                turn_index: key.turn_index,
                speaker: if n % 2 == 0 { "A".into() } else { "B".into() },
                text: format!("utterance number {n}"),
                intent: item.gold.clone(),
            })
            .unwrap(),
        );
        let record = EnsembleRecord::with_latencies(key.clone(), item.runs.clone(), vec![0.01; item.runs.len()]).unwrap();
        log.insert(key, record);
    }
    (parse_corpus(&lines.join("\n"), ls).unwrap(), log)
}

pub fn stub(corpus: &Corpus, mode: StubMode) -> StubClient {
    StubClient::new(StubOracle::from_corpus(corpus, &mode), StubLatency::default(), 7)
}
