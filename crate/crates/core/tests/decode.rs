use cfvsr::decode_metrics::{cer, ctc_beam_decode, ctc_greedy_decode, frame_argmax, BLANK};
use cfvsr::diffcore::Array;
use cfvsr::verify::oracles::{best_labeling, edit_distance, labeling_distribution};
use proptest::prelude::*;

fn logits_strategy(max_t: usize, max_k: usize) -> impl Strategy<Value = Array> {
    (1..=max_t, 2..=max_k).prop_flat_map(|(t, k)| {
        prop::collection::vec(-3.0f64..3.0, t * k).prop_map(move |d| Array::new(&[t, k], d).unwrap())
    })
}

proptest! {
    #[test]
    fn full_beam_finds_the_best_labeling(logits in logits_strategy(4, 3)) {
        let hyps = ctc_beam_decode(&logits, usize::MAX);
        let (best, p) = best_labeling(&logits);
        prop_assert_eq!(&hyps[0].tokens, &best);
        prop_assert!((hyps[0].score.exp() - p).abs() < 1e-10);
        let dist = labeling_distribution(&logits);
        prop_assert_eq!(hyps.len(), dist.len());
        for h in &hyps {
            prop_assert!((h.score.exp() - dist[&h.tokens]).abs() < 1e-10);
        }
    }

    #[test]
    fn narrow_beam_is_sorted(logits in logits_strategy(6, 4)) {
        let hyps = ctc_beam_decode(&logits, 4);
        prop_assert!(!hyps.is_empty() && hyps.len() <= 4);
        for w in hyps.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn greedy_output_is_a_collapse(logits in logits_strategy(10, 5)) {
        let frames = frame_argmax(&logits);
        let out = ctc_greedy_decode(&logits);
        prop_assert!(out.iter().all(|&t| t != BLANK));
        // each emitted token starts a new non-blank run
        let starts = frames
            .iter()
            .enumerate()
            .filter(|&(i, &c)| c != BLANK && (i == 0 || frames[i - 1] != c))
            .count();
        prop_assert_eq!(out.len(), starts);
    }

    #[test]
    fn cer_matches_edit_distance(
        a in prop::collection::vec(0u8..5, 1..=12),
        b in prop::collection::vec(0u8..5, 0..=12),
    ) {
        let r = cer(&a, &b).unwrap();
        prop_assert_eq!(r.edits(), edit_distance(&a, &b));
        prop_assert!(r.substitutions + r.deletions <= r.ref_len);
        prop_assert_eq!(r.ref_len, a.len());
        prop_assert_eq!(r.cer, r.edits() as f64 / a.len() as f64);
        prop_assert_eq!(r.ref_len + r.insertions, b.len() + r.deletions);
        prop_assert_eq!(cer(&a, &a).unwrap().cer, 0.0);
        if !b.is_empty() {
            let s = cer(&b, &a).unwrap();
            prop_assert!((r.cer * a.len() as f64 - s.cer * b.len() as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn cer_is_not_clamped() {
    let r = cer(&[1], &[2, 3, 4]).unwrap();
    assert_eq!(r.cer, 3.0);
    let r = cer(&[1, 2, 3], &[] as &[i32]).unwrap();
    assert_eq!((r.deletions, r.cer), (3, 1.0));
}
