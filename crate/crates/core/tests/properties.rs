mod common;

use proptest::prelude::*;
use vlngen_core::dataset::{read_records, write_records};
use vlngen_core::gateway::{NOISE_CHARS, TEMPLATE_FRAGMENTS};
use vlngen_core::pretext::*;
use vlngen_core::prompt::{build_generation_prompt, parse_triplet_block, steps_from_lines, TemplateSet};
use vlngen_core::render::{render_instruction, steps_of};
use vlngen_core::verify::*;
use vlngen_core::*;

fn granularity() -> impl Strategy<Value = Granularity> {
    prop::sample::select(Granularity::ALL.to_vec())
}

/// Faithful render with debris spliced in at word boundaries.
fn noisy_text() -> impl Strategy<Value = String> {
    let debris = prop_oneof![
        prop::collection::vec(prop::sample::select(NOISE_CHARS.to_vec()), 1..6).prop_map(|v| v.into_iter().collect::<String>()),
        prop::sample::select(TEMPLATE_FRAGMENTS.to_vec()).prop_map(String::from),
        Just("  ".to_string()),
    ];
    (any::<u64>(), 2usize..=7, granularity(), prop::collection::vec((any::<prop::sample::Index>(), debris), 0..4)).prop_map(
        |(seed, k, g, inserts)| {
            let t = common::random_trajectory(&mut common::rng(seed), "t", k);
            let text = render_instruction(&steps_of(&t).unwrap(), g);
            let mut words: Vec<String> = text.split(' ').map(String::from).collect();
            for (at, d) in inserts {
                let i = at.index(words.len() + 1);
                words.insert(i, d);
            }
            words.join(" ")
        },
    )
}

fn verified_pair(seed: u64, k: usize, g: Granularity, text: &str) -> PathInstructionPair {
    let traj = common::random_trajectory(&mut common::rng(seed), &format!("traj-{seed:x}"), k);
    let truth = all_pairs(&traj).unwrap();
    let instruction = Instruction::new(text, g, "mock-faithful", 1, Vec::new()).unwrap();
    let record = VerificationRecord {
        extracted: truth[..truth.len() - 1].to_vec(),
        verdict: Verdict::Pass,
        attempts_used: 1,
        extractor: ExtractorKind::RuleBased,
        template_version: "t0".into(),
    };
    PathInstructionPair::new(traj, instruction, record, PairStatus::Verified).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn normalize_is_idempotent(text in noisy_text()) {
        let rules = RuleSet::builtin();
        let once = normalize(&text, &rules).unwrap();
        let twice = normalize(&once.text, &rules).unwrap();
        prop_assert_eq!(&twice.text, &once.text);
        prop_assert!(twice.edits.is_empty());
    }

    #[test]
    fn normalize_fixes_faithful_renders(seed: u64, k in 2usize..=7, g in granularity()) {
        let t = common::random_trajectory(&mut common::rng(seed), "t", k);
        let text = render_instruction(&steps_of(&t).unwrap(), g);
        let n = normalize(&text, &RuleSet::builtin()).unwrap();
        prop_assert_eq!(n.text, text);
        prop_assert!(n.edits.is_empty());
    }

    #[test]
    fn consistency_identity_passes(seed: u64, k in 2usize..=7) {
        let t = common::random_trajectory(&mut common::rng(seed), "t", k);
        let truth = ground_truth_pairs(&t).unwrap();
        prop_assert_eq!(check_consistency(&truth, &truth), Verdict::Pass);
    }

    #[test]
    fn consistency_flags_every_substitution(seed: u64, k in 2usize..=7, at: prop::sample::Index, room_side: bool, pick: prop::sample::Index) {
        let t = common::random_trajectory(&mut common::rng(seed), "t", k);
        let truth = ground_truth_pairs(&t).unwrap();
        let i = at.index(truth.len());
        let mut altered = truth.clone();
        if room_side {
            let rooms: Vec<_> = RoomLexicon::builtin().rooms().iter().filter(|r| **r != truth[i].room_type).cloned().collect();
            altered[i].room_type = pick.get(&rooms).clone();
        } else {
            let moves: Vec<_> = Action::MOVES.iter().filter(|a| **a != truth[i].action).copied().collect();
            altered[i].action = *pick.get(&moves);
        }
        match check_consistency(&altered, &truth) {
            Verdict::Mismatch(ms) => {
                prop_assert_eq!(ms.len(), 1);
                prop_assert_eq!(ms[0].index, i);
                prop_assert_eq!(ms[0].expected.as_ref(), Some(&truth[i]));
                prop_assert_eq!(ms[0].got.as_ref(), Some(&altered[i]));
            }
            other => prop_assert!(false, "expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn consistency_flags_length_changes(seed: u64, k in 3usize..=7, drop_last: bool) {
        let t = common::random_trajectory(&mut common::rng(seed), "t", k);
        let truth = ground_truth_pairs(&t).unwrap();
        let mut altered = truth.clone();
        if drop_last {
            altered.pop();
        } else {
            altered.push(truth[0].clone());
        }
        prop_assert!(!check_consistency(&altered, &truth).is_pass());
    }

    #[test]
    fn rule_extraction_recovers_faithful_renders(seed: u64, k in 2usize..=7, g in granularity()) {
        let t = common::random_trajectory(&mut common::rng(seed), "t", k);
        let text = render_instruction(&steps_of(&t).unwrap(), g);
        let vocab = Vocabulary::builtin();
        prop_assert_eq!(extract_rule_based(&text, &vocab).unwrap(), ground_truth_pairs(&t).unwrap());
        let last = all_pairs(&t).unwrap().pop().unwrap();
        prop_assert_eq!(check_destination(&text, &last.room_type, k, &vocab.rooms), None);
    }

    #[test]
    fn prompt_triplets_round_trip(seed: u64, k in 2usize..=7, g in granularity()) {
        let t = common::random_trajectory(&mut common::rng(seed), "t", k);
        let p = build_generation_prompt(&t, g, &TemplateSet::builtin()).unwrap();
        let lines = parse_triplet_block(&p.user_text);
        prop_assert_eq!(lines.len(), t.nodes().len());
        prop_assert_eq!(p.images.len(), t.nodes().len());
        prop_assert_eq!(steps_from_lines(&lines), steps_of(&t));
        prop_assert_eq!(p.granularity(), Some(g));
    }

    #[test]
    fn layout_invariants(k in 1usize..=7, n in 0usize..=40, words in prop::collection::vec("[a-z]{1,8}", 0..60)) {
        let nodes: Vec<_> = (0..k as u32).map(|i| FrameRef::new("v", i, 0.0)).collect();
        let seq = MultimodalSequence::layout(nodes, n, words.clone());
        prop_assert!(seq.check_layout().is_ok());
        prop_assert_eq!(seq.visual_tokens.len(), k * (n + 1));
        prop_assert_eq!(seq.text_tokens.len(), words.len() + 2);
        prop_assert_eq!(seq.words(), words);
    }

    #[test]
    fn masking_spares_markers(k in 2usize..=7, n in 1usize..=12, words in prop::collection::vec("[a-z]{1,8}", 1..40), seed: u64, p in 0.05f64..0.95) {
        let nodes: Vec<_> = (0..k as u32).map(|i| FrameRef::new("v", i, 0.0)).collect();
        let seq = MultimodalSequence::layout(nodes, n, words);
        let feats = StubFeatures { regions: n, dim: 4, seed };
        let mlm = make_mlm(&seq, "s", p, seed).unwrap();
        let mvm = make_mvm(&seq, "s", &feats, p, seed).unwrap();
        prop_assert!(mlm.sequence.check_layout().is_ok());
        prop_assert!(mvm.sequence.check_layout().is_ok());
        let PretextTask::Mlm { positions, originals } = &mlm.task else { unreachable!() };
        prop_assert!(!positions.is_empty());
        for (&i, w) in positions.iter().zip(originals) {
            prop_assert_eq!(&seq.text_tokens[i], &TextToken::Word(w.clone()));
            prop_assert_eq!(&mlm.sequence.text_tokens[i], &TextToken::Mask);
        }
        let PretextTask::Mvm { positions, originals } = &mvm.task else { unreachable!() };
        prop_assert!(!positions.is_empty());
        for (&i, orig) in positions.iter().zip(originals) {
            let VisualToken::Region { node, region } = seq.visual_tokens[i] else {
                return Err(TestCaseError::fail(format!("masked non-region at {i}")));
            };
            prop_assert_eq!(&feats.features(&seq.nodes[node]).unwrap()[region], orig);
        }
    }

    #[test]
    fn pij_and_pr_differ_from_gold(k in 2usize..=7, seed: u64, repeat_first: bool) {
        let mut nodes: Vec<_> = (0..k as u32).map(|i| FrameRef::new("v", i, 0.0)).collect();
        if repeat_first && k > 2 {
            nodes[k - 1] = nodes[0].clone();
        }
        let seq = MultimodalSequence::layout(nodes, 2, vec!["go".into()]);
        let (pos, neg) = make_pij(&seq, "s", seed).unwrap();
        prop_assert_eq!(&pos.sequence, &seq);
        prop_assert_ne!(neg.sequence.node_keys(), seq.node_keys());
        prop_assert!(neg.sequence.check_layout().is_ok());

        let other = MultimodalSequence::layout((100..105).map(|i| FrameRef::new("w", i, 0.0)).collect(), 2, vec![]);
        let kinds = [DistractorKind::Shuffle, DistractorKind::Truncate, DistractorKind::Substitute];
        let pr = make_pr(&seq, "s", &[&seq, &other], 4, &kinds, seed).unwrap();
        let PretextTask::Pr { candidates, gold_index } = &pr.task else { unreachable!() };
        prop_assert_eq!(candidates.len(), 4);
        prop_assert_eq!(&candidates[*gold_index], &seq.nodes);
        let keys = |v: &[FrameRef]| v.iter().map(FrameRef::key).collect::<Vec<_>>();
        for (i, c) in candidates.iter().enumerate() {
            if i != *gold_index {
                prop_assert_ne!(keys(c), keys(&seq.nodes));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn records_round_trip(specs in prop::collection::vec((any::<u64>(), 2usize..=7, granularity()), 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let pairs: Vec<_> = specs
            .iter()
            .map(|&(seed, k, g)| {
                let t = common::random_trajectory(&mut common::rng(seed), "t", k);
                let text = render_instruction(&steps_of(&t).unwrap(), g);
                verified_pair(seed, k, g, &text)
            })
            .collect();
        write_records(&path, &pairs).unwrap();
        prop_assert_eq!(read_records(&path).unwrap(), pairs);
    }

    #[test]
    fn pretext_store_round_trip(seed: u64, k in 2usize..=5) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let t = common::random_trajectory(&mut common::rng(seed), "t", k);
        let text = render_instruction(&steps_of(&t).unwrap(), Granularity::Coarse);
        let pair = verified_pair(seed, k, Granularity::Coarse, &text);
        let feats = StubFeatures { regions: 3, dim: 5, seed };
        let seq = assemble(&pair, &feats, &WordTokenizer).unwrap();
        let examples = vec![
            make_mlm(&seq, "s", 0.3, seed).unwrap(),
            make_mvm(&seq, "s", &feats, 0.3, seed).unwrap(),
        ];
        write_pretext(&path, &examples).unwrap();
        prop_assert_eq!(read_pretext(&path).unwrap(), examples);
    }
}
