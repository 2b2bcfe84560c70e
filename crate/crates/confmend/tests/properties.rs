//! Randomized invariants for the confidence signal, threshold
//! calibration, voting, and seed derivation.

use proptest::prelude::*;

use confmend::confidence::{
    calibrate_threshold, select_top_k, token_confidence, trajectory_min_group, ConfidenceSeries,
    TokenEvent,
};
use confmend::eval::majority_vote;
use confmend::orchestrator::request_seed;

/// Per-step confidence paired with "start a fresh window before this push".
fn conf_stream() -> impl Strategy<Value = (Vec<(f64, bool)>, usize)> {
    (
        prop::collection::vec((-10.0..-1e-3f64, any::<bool>()), 1..200),
        1usize..=16,
    )
}

/// From-scratch window mean honouring epoch starts.
fn recompute(confs: &[f64], epoch_starts: &[usize], window: usize, i: usize) -> (f64, usize) {
    let epoch = epoch_starts
        .iter()
        .copied()
        .filter(|s| *s <= i)
        .max()
        .unwrap_or(0);
    let start = epoch.max((i + 1).saturating_sub(window));
    let slice = &confs[start..=i];
    (slice.iter().sum::<f64>() / slice.len() as f64, slice.len())
}

proptest! {
    #[test]
    fn streaming_group_confidence_matches_recompute_with_resets(
        (stream, window) in conf_stream()
    ) {
        let mut series = ConfidenceSeries::new(window);
        let mut confs = Vec::new();
        let mut epoch_starts = Vec::new();
        let mut expected_resets = Vec::new();
        for (conf, reset) in &stream {
            if *reset && !series.is_empty() {
                series.reset_window();
                epoch_starts.push(confs.len());
                expected_resets.push(confs.len() + 1);
            }
            series.push(*conf);
            confs.push(*conf);
        }
        prop_assert_eq!(series.resets(), expected_resets.as_slice());
        for i in 0..confs.len() {
            let (want_group, want_basis) = recompute(&confs, &epoch_starts, window, i);
            prop_assert!(
                (series.group_conf()[i] - want_group).abs() <= 1e-9,
                "step {}: {} vs {}", i + 1, series.group_conf()[i], want_group
            );
            prop_assert_eq!(series.window_basis()[i], want_basis);
        }
    }

    #[test]
    fn top_k_selection_ignores_input_order_and_shrinks_with_k(
        distribution in prop::collection::vec(-12.0..0.0f64, 1..10)
            .prop_map(|lps| {
                lps.into_iter()
                    .enumerate()
                    .map(|(i, lp)| (format!("tok{i}"), lp))
                    .collect::<Vec<_>>()
            }),
        shuffle_seed in any::<u64>(),
        k in 1usize..=8,
    ) {
        let mut shuffled = distribution.clone();
        // Deterministic Fisher-Yates driven by the generated seed.
        let mut state = shuffle_seed | 1;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(
            select_top_k(&distribution, k).unwrap(),
            select_top_k(&shuffled, k).unwrap()
        );

        let conf_at = |k: usize| {
            let event = TokenEvent {
                token_text: "t".into(),
                chosen_logprob: distribution[0].1,
                top_logprobs: select_top_k(&distribution, k).unwrap(),
                position: 1,
            };
            token_confidence(&event, k).unwrap()
        };
        let mut previous = conf_at(1);
        for k in 2..=distribution.len() {
            let current = conf_at(k);
            prop_assert!(
                current <= previous + 1e-12,
                "widening top-{k} raised the mean: {current} > {previous}"
            );
            previous = current;
        }
    }

    #[test]
    fn calibrated_threshold_is_the_smallest_value_reaching_the_percentile(
        minima in prop::collection::vec(-50.0..-1e-6f64, 1..=64),
        p in 1u32..=100,
    ) {
        let result = calibrate_threshold(&minima, p as f64).unwrap();
        let mut sorted = minima.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = minima.len() as u64;
        let expected = sorted
            .iter()
            .copied()
            .find(|v| {
                let at_or_below = sorted.iter().filter(|m| *m <= v).count() as u64;
                100 * at_or_below >= u64::from(p) * n
            })
            .unwrap();
        prop_assert_eq!(result.threshold_s, expected);
        prop_assert!(minima.contains(&result.threshold_s));
    }

    #[test]
    fn uniform_shifts_move_thresholds_and_confidences_by_the_shift(
        minima in prop::collection::vec(-50.0..-1e-6f64, 1..=64),
        p in 1u32..=100,
        shift in -5.0..5.0f64,
        lps in prop::collection::vec(-12.0..0.0f64, 1..10),
        k in 1usize..=8,
    ) {
        let base = calibrate_threshold(&minima, p as f64).unwrap().threshold_s;
        let shifted_minima: Vec<f64> = minima.iter().map(|m| m + shift).collect();
        let shifted = calibrate_threshold(&shifted_minima, p as f64).unwrap().threshold_s;
        prop_assert!((shifted - (base + shift)).abs() <= 1e-9);

        let top: Vec<(String, f64)> = lps
            .iter()
            .enumerate()
            .map(|(i, lp)| (format!("tok{i}"), *lp))
            .collect();
        let event = |top: Vec<(String, f64)>| TokenEvent {
            token_text: "t".into(),
            chosen_logprob: top[0].1,
            top_logprobs: select_top_k(&top, k).unwrap(),
            position: 1,
        };
        let base_conf = token_confidence(&event(top.clone()), k).unwrap();
        let shifted_top: Vec<(String, f64)> =
            top.iter().map(|(t, lp)| (t.clone(), lp + shift)).collect();
        let shifted_conf = token_confidence(&event(shifted_top), k).unwrap();
        prop_assert!((shifted_conf - (base_conf + shift)).abs() <= 1e-9);
    }

    #[test]
    fn trajectory_minimum_equals_minimum_of_the_group_series(
        (stream, window) in conf_stream()
    ) {
        let mut series = ConfidenceSeries::new(window);
        for (conf, reset) in &stream {
            if *reset && !series.is_empty() {
                series.reset_window();
            }
            series.push(*conf);
        }
        let expected = series
            .group_conf()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        prop_assert_eq!(trajectory_min_group(&series).unwrap(), expected);
    }

    #[test]
    fn recorded_series_reconstruct_and_continue_identically(
        (stream, window) in conf_stream(),
        continuation in prop::collection::vec(-10.0..-1e-3f64, 1..10),
    ) {
        let mut original = ConfidenceSeries::new(window);
        for (conf, reset) in &stream {
            if *reset && !original.is_empty() {
                original.reset_window();
            }
            original.push(*conf);
        }
        let mut restored = ConfidenceSeries::from_recorded(
            window,
            original.token_conf().to_vec(),
            original.group_conf().to_vec(),
            original.window_basis().to_vec(),
            original.resets().to_vec(),
        )
        .unwrap();
        prop_assert_eq!(restored.group_conf(), original.group_conf());
        prop_assert_eq!(restored.window_basis(), original.window_basis());
        for conf in &continuation {
            let a = original.push(*conf);
            let b = restored.push(*conf);
            prop_assert!(
                (a - b).abs() <= 1e-9,
                "continuations diverged: {a} vs {b}"
            );
        }
    }

    #[test]
    fn majority_vote_picks_the_earliest_maximal_candidate(
        answers in prop::collection::vec("[a-e]", 0..30),
    ) {
        let vote = majority_vote(&answers);
        prop_assert_eq!(vote.is_none(), answers.is_empty());
        if let Some((winner, count)) = vote {
            let occurrences =
                |a: &str| answers.iter().filter(|x| x.as_str() == a).count();
            prop_assert_eq!(count, occurrences(&winner));
            for candidate in &answers {
                prop_assert!(occurrences(candidate) <= count);
            }
            let first_maximal = answers
                .iter()
                .find(|a| occurrences(a) == count)
                .unwrap();
            prop_assert_eq!(&winner, first_maximal);
            prop_assert_eq!(majority_vote(&answers), Some((winner, count)));
        }
    }

    #[test]
    fn request_seeds_decode_back_to_path_ordinals(
        base in any::<u64>(),
        path_ordinal in 0usize..10_000,
        request_ordinal in 0usize..=1_000,
    ) {
        let seed = request_seed(base, path_ordinal, request_ordinal);
        let decoded = seed.wrapping_sub(base) % 10_000;
        prop_assert_eq!(decoded, path_ordinal as u64);
    }
}
