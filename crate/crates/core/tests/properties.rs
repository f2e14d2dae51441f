use std::collections::BTreeSet;

use proptest::prelude::*;

use adrcm_core::adrcm::{build_adrcm_dataset, export_finetune, ExportOptions, Hyperparams};
use adrcm_core::corpus::{enumerate_candidate_pairs, load_corpus, parse_pubtator, save_corpus};
use adrcm_core::eval::{compute_report, Averaging};
use adrcm_core::inference::{load_predictions, parse_relation_output, save_predictions, DEFAULT_INFERENCE_INSTRUCTION};
use adrcm_core::kb::{
    build_index, chunk_text, cosine, load_index, retrieve, save_index, ChunkParams, KbDocument, KbSource,
    RetrievalOptions, ScopeMode, MIN_TAIL_TOKENS,
};
use adrcm_core::llm::HashEmbedder;
use adrcm_core::{Corpus, Entity, EntityType, Prediction, RelationSchema, SyntheticRecord};

/// Per document: chemical count, disease count, annotated pair mask.
type DocSpec = (usize, usize, Vec<bool>);

fn doc_spec() -> impl Strategy<Value = DocSpec> {
    (1usize..4, 1usize..4).prop_flat_map(|(c, d)| (Just(c), Just(d), prop::collection::vec(any::<bool>(), c * d)))
}

/// Builds a PubTator file; the second sentence of each body names the last
/// disease so some pairs straddle sentences.
fn pubtator(specs: &[DocSpec]) -> String {
    let mut out = String::new();
    for (n, (chems, diss, mask)) in specs.iter().enumerate() {
        let id = 500 + n;
        let title = format!("Case {id}.");
        let mut body = String::new();
        let mut lines = Vec::new();
        let offset = title.len() + 1;
        let mut put = |body: &mut String, word: String, kind: &str, ident: String| {
            let start = offset + body.len();
            body.push_str(&word);
            lines.push(format!("{id}\t{start}\t{}\t{word}\t{kind}\t{ident}", start + word.len()));
        };
        for c in 0..*chems {
            put(&mut body, format!("chem{c}x"), "Chemical", format!("C{id}{c}"));
            body.push(' ');
        }
        for d in 0..diss - 1 {
            put(&mut body, format!("dis{d}x"), "Disease", format!("D{id}{d}"));
            body.push(' ');
        }
        body.push_str("were seen. Later ");
        put(&mut body, format!("dis{}x", diss - 1), "Disease", format!("D{id}{}", diss - 1));
        body.push_str(" followed.");
        out.push_str(&format!("{id}|t|{title}\n{id}|a|{body}\n"));
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
        for (i, _) in mask.iter().enumerate().filter(|(_, on)| **on) {
            out.push_str(&format!("{id}\tCID\tC{id}{}\tD{id}{}\n", i / diss, i % diss));
        }
        out.push('\n');
    }
    out
}

fn corpus(specs: &[DocSpec]) -> Corpus {
    let parsed = parse_pubtator(&pubtator(specs), &RelationSchema::cdr()).unwrap();
    assert!(parsed.violations.is_empty(), "{:?}", parsed.violations);
    parsed.corpus
}

fn predictions(corpus: &Corpus, picks: &[u8]) -> Vec<Prediction> {
    let mut out = Vec::new();
    let mut i = 0;
    for s in corpus.samples() {
        for p in enumerate_candidate_pairs(s, corpus.schema()) {
            let label = if picks.get(i).copied().unwrap_or(0) % 2 == 0 { "CID" } else { "None" };
            i += 1;
            out.push(Prediction {
                doc_id: s.doc_id().into(),
                head_id: p.head_id,
                tail_id: p.tail_id,
                label: label.into(),
                raw_output: label.into(),
                snippets_used: Vec::new(),
                unparseable: false,
            });
        }
    }
    out
}

const VOCAB: [&str; 6] = ["alpha", "beta", "gamma", "delta", "liver", "renal"];

fn kb_docs() -> impl Strategy<Value = Vec<KbDocument>> {
    prop::collection::vec((0usize..6, 0usize..3, prop::collection::vec(0usize..6, 1..8)), 1..60).prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (cui, src, words))| KbDocument {
                cui: format!("C{:07}", cui),
                source: [KbSource::Wikipedia, KbSource::NcbiMesh, KbSource::NcbiGene][src],
                title: format!("T{i}"),
                text: words.iter().map(|w| VOCAB[*w]).collect::<Vec<_>>().join(" "),
            })
            .collect()
    })
}

fn entity(id: &str, cui: usize) -> Entity {
    Entity {
        entity_id: id.into(),
        cui: Some(format!("C{:07}", cui)),
        etype: EntityType::Chemical,
        canonical_name: id.into(),
        mentions: Vec::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunk_windows_cover_tokens(n in 0usize..400, size in 2usize..64, overlap_frac in 0.0f64..1.0) {
        let overlap = ((size as f64) * overlap_frac) as usize % size;
        let tokens: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let windows = chunk_text(&tokens.join("  "), size, overlap).unwrap();
        if n == 0 {
            prop_assert!(windows.is_empty());
            return Ok(());
        }
        prop_assert_eq!(windows[0].0 .0, 0);
        prop_assert_eq!(windows.last().unwrap().0 .1, n);
        for w in windows.windows(2) {
            prop_assert_eq!(w[1].0 .0 - w[0].0 .0, size - overlap);
            prop_assert_eq!(w[0].0 .1 - w[0].0 .0, size);
        }
        let last = windows.last().unwrap().0;
        prop_assert!(last.1 - last.0 <= size + MIN_TAIL_TOKENS);
        for ((s, e), text) in &windows {
            prop_assert_eq!(text, &tokens[*s..*e].join(" "));
        }
    }

    #[test]
    fn corpus_round_trips(specs in prop::collection::vec(doc_spec(), 1..6)) {
        let c = corpus(&specs);
        let back = load_corpus(&save_corpus(&c), &RelationSchema::cdr()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn dataset_size_is_originals_plus_accepted(specs in prop::collection::vec(doc_spec(), 1..6), keep in any::<u64>()) {
        let c = corpus(&specs);
        let mut accepted = Vec::new();
        for (i, (s, t)) in c.samples().iter().flat_map(|s| s.triplets.iter().map(move |t| (s, t))).enumerate() {
            if keep >> (i % 64) & 1 == 1 {
                accepted.push(SyntheticRecord {
                    summary: format!("summary {i}"),
                    triplet: t.clone(),
                    source_doc_id: s.doc_id().into(),
                    iterations_used: 1,
                    failures: Vec::new(),
                    confirmations: vec!["CID".into()],
                });
            }
        }
        let dataset = build_adrcm_dataset(&c, &accepted).unwrap();
        prop_assert_eq!(dataset.len(), c.triplet_count() + accepted.len());
        for a in &accepted {
            prop_assert!(dataset.iter().any(|r| r.text == a.summary && r.triplet == a.triplet));
        }
    }

    #[test]
    fn export_is_seed_deterministic(specs in prop::collection::vec(doc_spec(), 1..5), seed in any::<u64>(), ratio in 0.0f64..3.0) {
        let c = corpus(&specs);
        let dataset = build_adrcm_dataset(&c, &[]).unwrap();
        let h = Hyperparams::preset("cdr").unwrap();
        let options = ExportOptions { negative_ratio: ratio, seed, beta: 3 };
        let a = export_finetune(&dataset, &c, DEFAULT_INFERENCE_INSTRUCTION, &h, &options).unwrap();
        let b = export_finetune(&dataset, &c, DEFAULT_INFERENCE_INSTRUCTION, &h, &options).unwrap();
        prop_assert_eq!(a.to_jsonl(), b.to_jsonl());
        let pool: usize = c.samples().iter()
            .map(|s| enumerate_candidate_pairs(s, c.schema()).iter().filter(|p| p.gold == "None").count())
            .sum();
        prop_assert!(a.sidecar.negative_rows <= pool);
        prop_assert_eq!(a.sidecar.rows, a.sidecar.original_rows + a.sidecar.negative_rows);
        prop_assert!(a.rows.iter().filter(|r| r.output == "None").count() == a.sidecar.negative_rows);
    }

    #[test]
    fn report_ignores_prediction_order(specs in prop::collection::vec(doc_spec(), 1..5), picks in prop::collection::vec(any::<u8>(), 64), rot in 0usize..64) {
        let c = corpus(&specs);
        let preds = predictions(&c, &picks);
        let mut shuffled = preds.clone();
        shuffled.reverse();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        let a = compute_report(&preds, &c, Averaging::Micro).unwrap();
        let b = compute_report(&shuffled, &c, Averaging::Micro).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
        prop_assert_eq!(a.counts.intra_gold + a.counts.inter_gold, a.counts.gold_positives);
        for v in [a.precision, a.recall, a.f1, a.intra_f1, a.inter_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn predictions_round_trip(specs in prop::collection::vec(doc_spec(), 1..4), picks in prop::collection::vec(any::<u8>(), 32)) {
        let preds = predictions(&corpus(&specs), &picks);
        prop_assert_eq!(load_predictions(&save_predictions(&preds)).unwrap(), preds);
    }

    #[test]
    fn retrieval_is_ranked_and_scoped(docs in kb_docs(), h in 0usize..6, t in 0usize..6, k in 1usize..12, q in prop::collection::vec(0usize..6, 1..4)) {
        let index = build_index(&docs, &HashEmbedder, ChunkParams::default()).unwrap();
        let query = q.iter().map(|w| VOCAB[*w]).collect::<Vec<_>>().join(" ");
        let (head, tail) = (entity("H", h), entity("T", t));
        let options = RetrievalOptions { k, scope: ScopeMode::Cui, per_entity_quota: None };
        let got = retrieve(&index, &head, &tail, &query, &HashEmbedder, &options).unwrap();
        let scope: BTreeSet<String> = [head.cui.clone().unwrap(), tail.cui.clone().unwrap()].into();
        let in_scope = index.chunks().filter(|c| scope.contains(&c.cui)).count();
        prop_assert_eq!(got.snippets.len(), k.min(in_scope));
        prop_assert_eq!(got.empty_scope, in_scope == 0);
        for s in &got.snippets {
            prop_assert!(scope.contains(&s.chunk.cui));
        }
        for w in got.snippets.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].chunk.chunk_id < w[1].chunk.chunk_id));
        }
        if let Some(last) = got.snippets.last() {
            let qv = HashEmbedder::embed(&query);
            for c in index.chunks().filter(|c| scope.contains(&c.cui)) {
                if !got.snippets.iter().any(|s| s.chunk.chunk_id == c.chunk_id) {
                    let score = cosine(&c.vector, &qv).unwrap();
                    prop_assert!(score < last.score || (score == last.score && c.chunk_id > last.chunk.chunk_id));
                }
            }
        }
        let unscoped = RetrievalOptions { scope: ScopeMode::Unscoped, ..options };
        let all = retrieve(&index, &head, &tail, &query, &HashEmbedder, &unscoped).unwrap();
        prop_assert_eq!(all.snippets.len(), k.min(index.chunk_count()));
    }

    #[test]
    fn index_round_trips(docs in kb_docs()) {
        let index = build_index(&docs, &HashEmbedder, ChunkParams { size: 4, overlap: 1 }).unwrap();
        prop_assert_eq!(load_index(&save_index(&index)).unwrap(), index);
    }

    #[test]
    fn cosine_is_bounded(a in prop::collection::vec(-1e6f64..1e6, 1..16), b in prop::collection::vec(-1e6f64..1e6, 1..16)) {
        let n = a.len().min(b.len());
        if let Ok(c) = cosine(&a[..n], &b[..n]) {
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn labels_survive_decoration(pre in "[ \n]{0,3}", post in "[ .\n]{0,3}", upper in any::<bool>(), which in 0usize..9) {
        let schema = RelationSchema::biored();
        let label = &schema.labels()[which % schema.labels().len()];
        let shown = if upper { label.to_uppercase() } else { label.clone() };
        let parsed = parse_relation_output(&format!("{pre}{shown}{post}"), &schema);
        prop_assert_eq!(&parsed.label, label);
        prop_assert!(!parsed.unparseable);
    }
}

#[test]
fn generator_produces_inter_sentence_pairs() {
    let c = corpus(&[(2, 2, vec![true, true, true, true])]);
    let preds = predictions(&c, &[0; 4]);
    let report = compute_report(&preds, &c, Averaging::Micro).unwrap();
    assert_eq!(report.counts.gold_positives, 4);
    assert_eq!(report.counts.inter_gold, 2);
}
