use comve_core::backends::{LinearChoiceScorer, Markers};
use comve_core::choice::ChoiceSet;
use comve_core::corpus::{tokenize_reference, wrap_special};
use comve_core::metrics::{bleu_from_stats, corpus_bleu, ngram_stats, NgramStats};
use comve_core::training::{fine_tune, labeled_choice_sets, lr_at_step, TrainingConfig};
use proptest::prelude::*;

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "the", "cat"]), 1..8).prop_map(|w| w.join(" "))
}

fn example() -> impl Strategy<Value = (String, Vec<String>)> {
    (sentence(), prop::collection::vec(sentence(), 1..4))
}

proptest! {
    #[test]
    fn bleu_is_bounded_and_order_free(mut corpus in prop::collection::vec(example(), 1..8), seed in any::<u64>()) {
        let (c, r): (Vec<_>, Vec<_>) = corpus.iter().cloned().unzip();
        let score = corpus_bleu(&c, &r).unwrap().score;
        prop_assert!((0.0..=100.0).contains(&score));

        let n = corpus.len();
        corpus.rotate_left((seed as usize) % n);
        let (c2, r2): (Vec<_>, Vec<_>) = corpus.into_iter().unzip();
        prop_assert_eq!(score, corpus_bleu(&c2, &r2).unwrap().score);
    }

    #[test]
    fn duplicate_references_change_nothing((cand, refs) in example()) {
        let mut doubled = refs.clone();
        doubled.extend(refs.iter().cloned());
        prop_assert_eq!(
            corpus_bleu(&[&cand], &[refs]).unwrap(),
            corpus_bleu(&[&cand], &[doubled]).unwrap()
        );
    }

    #[test]
    fn corpus_score_comes_from_summed_statistics(corpus in prop::collection::vec(example(), 1..6)) {
        let mut total = NgramStats::default();
        for (c, rs) in &corpus {
            let refs: Vec<Vec<String>> = rs.iter().map(|r| tokenize_reference(r).unwrap()).collect();
            total += ngram_stats(&tokenize_reference(c).unwrap(), &refs).unwrap();
        }
        let (c, r): (Vec<_>, Vec<_>) = corpus.into_iter().unzip();
        prop_assert_eq!(bleu_from_stats(&total).unwrap(), corpus_bleu(&c, &r).unwrap());
    }

    #[test]
    fn a_candidate_equal_to_a_reference_scores_100((cand, mut refs) in example(), at in 0usize..4) {
        prop_assume!(tokenize_reference(&cand).unwrap().len() >= 4);
        let i = at % (refs.len() + 1);
        refs.insert(i, cand.clone());
        prop_assert_eq!(corpus_bleu(&[&cand], &[refs]).unwrap().score, 100.0);
    }

    #[test]
    fn schedule_stays_within_bounds(peak in 1e-7f64..1.0, warmup in 1usize..50, extra in 1usize..200) {
        let cfg = TrainingConfig {
            learning_rate: peak,
            warmup_steps: warmup,
            max_steps: warmup + extra,
            ..TrainingConfig::default()
        };
        for step in 0..=cfg.max_steps {
            let lr = lr_at_step(step, &cfg).unwrap();
            prop_assert!((0.0..=peak).contains(&lr));
        }
        prop_assert_eq!(lr_at_step(warmup, &cfg).unwrap(), peak);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn training_is_reproducible(
        items in prop::collection::vec((sentence(), sentence(), 0usize..2), 1..6),
        seed in any::<u64>(),
        batch in 1usize..4,
    ) {
        let m = Markers::default();
        let sets: Vec<ChoiceSet> = items
            .iter()
            .enumerate()
            .map(|(i, (a, b, gold))| {
                let cands = [a, b].iter().map(|s| wrap_special(s.split_whitespace().map(String::from).collect(), &m).unwrap()).collect();
                ChoiceSet::new(i.to_string(), cands, Some(*gold)).unwrap()
            })
            .collect();
        let data = labeled_choice_sets(sets.clone()).unwrap();
        let cfg = TrainingConfig {
            batch_size: batch,
            learning_rate: 0.05,
            num_train_epochs: 3,
            max_steps: 12,
            warmup_steps: 2,
            seed,
            ..TrainingConfig::default()
        };
        let (_, h1) = fine_tune(LinearChoiceScorer::for_choice_sets(&sets), &data, &cfg).unwrap();
        let (_, h2) = fine_tune(LinearChoiceScorer::for_choice_sets(&sets), &data, &cfg).unwrap();
        let steps = (items.len().div_ceil(batch) * 3).min(12);
        prop_assert_eq!(h1.records.len(), steps);
        prop_assert_eq!(h1, h2);
    }
}
