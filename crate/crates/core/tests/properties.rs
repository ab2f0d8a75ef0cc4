use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use kriss::evaluation::{lenient_surface_accuracy, predicted_surfaces, strict_accuracy, topk_oracle_accuracy};
use kriss::mention_gen::{at_word_boundary, Matcher, MentionExample, MentionSource};
use kriss::ontology::{Entity, EntityCatalog};
use kriss::prototype_index::{vectors, Candidate, LinkResult, SearchOptions, VectorIndex};
use kriss::reranker::rerank_with;
use kriss::trainer::TrainConfig;

fn example(entity_id: &str, mention: &str, doc: usize) -> MentionExample {
    MentionExample {
        doc_id: format!("d{doc}"),
        entity_id: entity_id.to_string(),
        mention: mention.to_string(),
        start_char: 0,
        end_char: mention.chars().count(),
        ctx_l: Vec::new(),
        ctx_r: Vec::new(),
        source: MentionSource::SelfSupervised,
    }
}

fn id(i: usize) -> String {
    format!("E{i:03}")
}

fn catalog(n: usize) -> EntityCatalog {
    EntityCatalog::from_entities((0..n).map(|i| {
        Entity::new(id(i), format!("name {i}")).with_aliases([format!("alias {}", i / 2)])
    }))
    .unwrap()
}

fn result(query: MentionExample, ids: &[usize]) -> LinkResult {
    LinkResult {
        query,
        candidates: ids
            .iter()
            .enumerate()
            .map(|(r, &e)| Candidate {
                entity_id: id(e),
                score: -(r as f64),
                prototype: Some(r),
            })
            .collect(),
    }
}

fn ranking(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #[test]
    fn vector_file_round_trip(dim in 1usize..9, raw in prop::collection::vec(-1e6f32..1e6, 0..64)) {
        let rows: Vec<f64> = raw.iter().take(raw.len() / dim * dim).map(|&x| x as f64).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        vectors::write(&path, dim, &rows).unwrap();
        let (d, back) = vectors::read(&path).unwrap();
        prop_assert_eq!(d, dim);
        prop_assert_eq!(back, rows);
    }

    #[test]
    fn train_config_text_round_trip(
        n in 1usize..64,
        tau in 0.01f64..2.0,
        alpha in 0.0f64..3.0,
        p_mask in 0.0f64..1.0,
        steps in 0usize..10_000,
        seed in any::<u64>(),
        heads in 1usize..4,
        descriptions in any::<bool>(),
    ) {
        let config = TrainConfig {
            n,
            tau,
            alpha,
            p_mask,
            steps,
            seed,
            heads,
            dim: heads * 8,
            descriptions,
            ..TrainConfig::default()
        };
        prop_assert_eq!(TrainConfig::parse(&config.to_text()).unwrap(), config);
    }

    #[test]
    fn rerank_keeps_the_candidate_set(
        order in ranking(12),
        scores in prop::collection::vec(prop::option::of(-5i32..5), 12),
    ) {
        let before = result(example("E000", "q", 0), &order);
        let after = rerank_with(&before, |c| Ok(scores[c.prototype.unwrap()].map(f64::from))).unwrap();
        let mut a: Vec<_> = before.candidates.iter().map(|c| c.entity_id.clone()).collect();
        let mut b: Vec<_> = after.candidates.iter().map(|c| c.entity_id.clone()).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);

        let scored = scores.iter().filter(|s| s.is_some()).count();
        for w in after.candidates[..scored].windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for c in &after.candidates[scored..] {
            prop_assert!(scores[c.prototype.unwrap()].is_none());
        }
    }

    #[test]
    fn topk_accuracy_grows_with_k(rankings in prop::collection::vec((ranking(20), 0usize..20), 1..30)) {
        let gold: Vec<MentionExample> = rankings.iter().enumerate().map(|(i, (_, g))| example(&id(*g), "q", i)).collect();
        let preds: Vec<LinkResult> = rankings.iter().zip(&gold).map(|((r, _), g)| result(g.clone(), r)).collect();
        let ks = [1, 2, 3, 5, 8, 13, 20];
        let acc = topk_oracle_accuracy(&preds, &gold, &ks).unwrap();
        let values: Vec<f64> = ks.iter().map(|k| acc[k]).collect();
        for w in values.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert_eq!(values[0], strict_accuracy(&preds, &gold).unwrap());
        prop_assert_eq!(*values.last().unwrap(), 1.0);
    }

    #[test]
    fn lenient_never_below_strict(picks in prop::collection::vec((0usize..10, 0usize..10), 1..40)) {
        let catalog = catalog(10);
        let gold: Vec<MentionExample> = picks.iter().enumerate().map(|(i, (g, _))| example(&id(*g), "q", i)).collect();
        let preds: Vec<LinkResult> = picks.iter().zip(&gold).map(|((_, p), g)| result(g.clone(), &[*p])).collect();
        let strict = strict_accuracy(&preds, &gold).unwrap();
        let surfaces = predicted_surfaces(&preds, &catalog).unwrap();
        let lenient = lenient_surface_accuracy(&surfaces, &gold, &catalog).unwrap();
        prop_assert!(lenient >= strict);
    }

    #[test]
    fn adding_a_prototype_never_lowers_a_score(
        rows in prop::collection::vec((0usize..6, prop::collection::vec(-4i8..4, 3)), 1..20),
        extra in (0usize..6, prop::collection::vec(-4i8..4, 3)),
        query in prop::collection::vec(-4i8..4, 3),
    ) {
        let mut index = VectorIndex::new(3, (0..6).map(id), false);
        for (i, (e, v)) in rows.iter().enumerate() {
            index.push(example(&id(*e), "m", i), v.iter().map(|&x| x as f64).collect()).unwrap();
        }
        let opts = SearchOptions { top_k: 6, ..SearchOptions::default() };
        let q: Vec<f64> = query.iter().map(|&x| x as f64).collect();
        let scores = |index: &VectorIndex| -> BTreeMap<String, f64> {
            index.search(&q, &opts).unwrap().into_iter().map(|c| (c.entity_id, c.score)).collect()
        };
        let before = scores(&index);
        index.push(example(&id(extra.0), "m", 99), extra.1.iter().map(|&x| x as f64).collect()).unwrap();
        let after = scores(&index);
        for (e, s) in &before {
            prop_assert!(after[e] >= *s);
        }
    }

    #[test]
    fn scan_spans_are_disjoint_and_exact(
        words in prop::collection::vec(prop::sample::select(vec!["ab", "abc", "b", "cé", "ab cé", "x", "é"]), 0..40),
        seps in prop::collection::vec(prop::sample::select(vec![" ", "", ",", "-"]), 40),
    ) {
        let mut text = String::new();
        for (w, s) in words.iter().zip(&seps) {
            text.push_str(w);
            text.push_str(s);
        }
        let surfaces: BTreeMap<String, String> = ["ab", "abc", "cé", "ab cé", "é"]
            .iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), id(i)))
            .collect();
        let matcher = Matcher::new(&surfaces).unwrap();
        let chars: Vec<char> = text.chars().collect();
        let mut last_end = 0;
        let mut starts = BTreeSet::new();
        for m in matcher.scan(&text) {
            prop_assert!(m.start_char >= last_end);
            last_end = m.end_char;
            starts.insert(m.start_char);
            let slice: String = chars[m.start_char..m.end_char].iter().collect();
            prop_assert_eq!(&slice, &m.surface);
            prop_assert_eq!(&surfaces[&m.surface], &m.entity_id);
            let start = chars[..m.start_char].iter().map(|c| c.len_utf8()).sum::<usize>();
            prop_assert!(at_word_boundary(&text, start, start + slice.len()));
        }
    }
}
