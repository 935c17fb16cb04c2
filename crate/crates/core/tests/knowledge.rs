mod common;

use common::policies::*;
use oel::knowledge::scripted::ScriptedExtractor;
use oel::knowledge::*;
use oel::policy::scripted::ConstantPolicy;
use oel::policy::{Policy, Vocab};
use proptest::prelude::*;

fn unstructured(n: usize, l_max: usize) -> ExtractionConfig {
    ExtractionConfig { format: KnowledgeFormat::Unstructured, n, l_max, k: 1, ..ExtractionConfig::default() }
}

#[test]
fn hand_simulated_truncation() {
    // Five 40-token items under a 100-token cap. Item 1 (40) and item 2
    // (40 + separator = 81 in total) fit; item 3 brings the total to 122, so
    // 18 of its tokens survive; items 4 and 5 are cut away entirely.
    let items: Vec<String> = ['a', 'b', 'c', 'd', 'e'].iter().map(|&c| c.to_string().repeat(40)).collect();
    let vocab = Vocab::standard();
    assert!(items.iter().all(|i| vocab.count_tokens(i) == 40));
    assert_eq!(vocab.count_tokens("\n"), 1);
    let steps = accumulate_steps(&trajectories(5), &Sequence::new(items.clone()), &unstructured(5, 100), 0).unwrap();
    let expect = format!("{}\n{}\n{}", items[0], items[1], "c".repeat(18));
    assert_eq!(steps[4].body, expect);
    assert_eq!(steps[4].token_count, 100);
    assert_eq!(steps[2].body, expect);
    assert_eq!(steps[1].body, format!("{}\n{}", items[0], items[1]));
    let counts: Vec<usize> = steps.iter().map(|s| s.token_count).collect();
    assert_eq!(counts, [40, 81, 100, 100, 100]);
}

#[test]
fn single_step_structured_body() {
    let cfg = ExtractionConfig { format: KnowledgeFormat::Structured, n: 1, k: 1, ..ExtractionConfig::default() };
    let e = accumulate(&trajectories(1), &ConstantPolicy::new("- EXPERIENCE ITEM: X"), &cfg, 0).unwrap();
    assert_eq!(e.body, "- EXPERIENCE ITEM: X");
}

#[test]
fn structured_bodies_hold_only_marker_lines() {
    let replies = vec![
        "preamble\n- EXPERIENCE ITEM: move toward the goal\nrambling".to_string(),
        "<think>- EXPERIENCE ITEM: hidden</think>- EXPERIENCE ITEM: shown".to_string(),
        "nothing useful".to_string(),
        "- EXPERIENCE ITEM: a\nprose\n- EXPERIENCE ITEM: b".to_string(),
    ];
    let cfg = ExtractionConfig { format: KnowledgeFormat::Structured, n: 4, k: 1, ..ExtractionConfig::default() };
    let steps = accumulate_steps(&trajectories(4), &Sequence::new(replies), &cfg, 0).unwrap();
    assert_eq!(
        steps[3].body,
        "- EXPERIENCE ITEM: move toward the goal\n- EXPERIENCE ITEM: shown\n- EXPERIENCE ITEM: a\n- EXPERIENCE ITEM: b"
    );
    // An extraction with no items leaves the body unchanged.
    assert_eq!(steps[2].body, steps[1].body);
    assert!(steps[3].body.lines().all(|l| l.starts_with(ITEM_MARKER)));
    assert_eq!(items_of(&steps[3].body, "t").len(), 4);
}

#[test]
fn deterministic_extractor_gives_identical_seeds() {
    let trajs = trajectories(15);
    let cfg = ExtractionConfig { n: 15, k: 10, ..ExtractionConfig::default() };
    let set = build_knowledge_set(&trajs, &ConstantPolicy::new("Avoid the holes."), &cfg, 1).unwrap();
    assert_eq!(set.entries.len(), 10);
    assert!(set.entries.iter().all(|e| e.body == set.entries[0].body));

    let scripted = ScriptedExtractor::new();
    let a = build_knowledge_set(&trajs, &scripted, &cfg, 1).unwrap();
    let b = build_knowledge_set(&trajs, &scripted, &cfg, 1).unwrap();
    assert_eq!(a, b);
    let seeds: Vec<u64> = a.entries.iter().map(|e| e.seed).collect();
    assert_eq!(seeds, (0..10).collect::<Vec<_>>());

    let one = ExtractionConfig { k: 1, ..cfg };
    let single = build_knowledge_set(&trajs, &scripted, &one, 1).unwrap();
    assert_eq!(single.entries, vec![accumulate(&trajs, &scripted, &one, 0).unwrap()]);
}

#[test]
fn extraction_prompts() {
    let t = &trajectories(1)[0];
    let s = build_extraction_prompt(t, "", KnowledgeFormat::Structured);
    assert!(s.contains("- EXPERIENCE ITEM: ..."));
    let u = build_extraction_prompt(t, "old", KnowledgeFormat::Unstructured);
    assert!(u.trim_end().ends_with("output the final additional experience."));
    assert!(u.contains("old"));
    assert_eq!(u, build_extraction_prompt(t, "old", KnowledgeFormat::Unstructured));
}

#[test]
fn wrong_trajectory_count_is_rejected() {
    let err = accumulate_steps(&trajectories(2), &ConstantPolicy::new("x"), &unstructured(3, 10), 0).unwrap_err();
    assert!(matches!(err, KnowledgeError::WrongTrajectoryCount { expected: 3, got: 2 }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prefix_and_cap_properties(seed in any::<u64>(), l_max in 1usize..120, max_len in 0usize..40, n in 1usize..8) {
        let trajs = trajectories(n);
        let ext = SeededLetters { max_len, vocab: Vocab::standard() };
        let steps = accumulate_steps(&trajs, &ext, &unstructured(n, l_max), seed).unwrap();
        let vocab = Vocab::standard();
        let mut truncated = false;
        let mut prev = String::new();
        let mut prev_count = 0;
        for (i, e) in steps.iter().enumerate() {
            prop_assert_eq!(e.accumulation_step, i + 1);
            prop_assert!(e.token_count <= l_max);
            prop_assert_eq!(e.token_count, vocab.count_tokens(&e.body));
            prop_assert!(e.token_count >= prev_count);
            // Untruncated concatenation of the previous body and this step's reply.
            let reply = ext.sample_response("", 0.0, 0, oel::util::mix_seed(seed, i as u64)).unwrap().text;
            let full = match (prev.is_empty(), reply.is_empty()) {
                (_, true) => prev.clone(),
                (true, false) => reply.clone(),
                (false, false) => format!("{prev}\n{reply}"),
            };
            if vocab.count_tokens(&full) > l_max {
                truncated = true;
            }
            if !truncated {
                prop_assert!(e.body.starts_with(&prev));
                prop_assert_eq!(&e.body, &full);
            } else {
                // Oldest content is kept: the new body is a head of `full`.
                prop_assert!(full.starts_with(&e.body));
            }
            prev = e.body.clone();
            prev_count = e.token_count;
        }
    }

    #[test]
    fn truncate_to_keeps_a_head_within_cap(text in "[a-z \n\\[\\]]{0,200}", l_max in 0usize..80) {
        let cut = truncate_to(&text, l_max);
        prop_assert!(text.starts_with(&cut));
        prop_assert!(Vocab::standard().count_tokens(&cut) <= l_max);
    }
}
