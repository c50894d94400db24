use proptest::prelude::*;

use volflow::metrics::{
    auroc, evaluate, f1_accuracy, roc_curve, select_threshold, Label, LabeledScore, ThresholdSweep,
};

fn labeled() -> impl Strategy<Value = Vec<LabeledScore>> {
    prop::collection::vec((0u32..40, any::<bool>()), 2..120).prop_map(|v| {
        let mut s: Vec<LabeledScore> = v
            .into_iter()
            .enumerate()
            .map(|(i, (score, ab))| {
                let label = if ab { Label::Abnormal } else { Label::Normal };
                LabeledScore::new(format!("p{i}"), score as f64 * 0.5, label)
            })
            .collect();
        s[0].label = Label::Abnormal;
        s[1].label = Label::Normal;
        s
    })
}

/// Youden's J as an exact fraction `(numerator, P·N)`.
fn youden_oracle(s: &[LabeledScore], t: f64) -> (i64, i64) {
    let pos = s.iter().filter(|x| x.label == Label::Abnormal).count() as i64;
    let neg = s.len() as i64 - pos;
    let tp = s.iter().filter(|x| x.label == Label::Abnormal && x.score > t).count() as i64;
    let tn = s.iter().filter(|x| x.label == Label::Normal && x.score <= t).count() as i64;
    (tp * neg + tn * pos - pos * neg, pos * neg)
}

proptest! {
    #[test]
    fn auroc_invariant_under_monotone_maps(s in labeled()) {
        let base = auroc(&s).unwrap();
        for f in [|x: f64| x.exp(), |x: f64| 3.0 * x - 7.0, |x: f64| x.powi(3)] {
            let mapped: Vec<LabeledScore> = s.iter().map(|x| LabeledScore::new(x.id.clone(), f(x.score), x.label)).collect();
            prop_assert_eq!(auroc(&mapped).unwrap(), base);
        }
    }

    #[test]
    fn f1_and_accuracy_ignore_ids(s in labeled(), t in 0.0f64..20.0) {
        let renamed: Vec<LabeledScore> = s.iter().rev().enumerate()
            .map(|(i, x)| LabeledScore::new(format!("other{i}"), x.score, x.label)).collect();
        prop_assert_eq!(f1_accuracy(&s, t).unwrap(), f1_accuracy(&renamed, t).unwrap());
    }

    #[test]
    fn roc_is_anchored_and_monotone(s in labeled()) {
        let r = roc_curve(&s).unwrap();
        let (first, last) = (r.first().unwrap(), r.last().unwrap());
        prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        prop_assert!(r.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
    }

    #[test]
    fn threshold_selection_matches_exhaustive_youden(s in labeled()) {
        let sweep = ThresholdSweep::default();
        let (t, j) = select_threshold(&s, &sweep).unwrap();
        let mut best = (f64::NAN, i64::MIN, 1);
        for k in 0..40 {
            let cand = 0.5 + 0.5 * k as f64;
            let (num, den) = youden_oracle(&s, cand);
            if num > best.1 {
                best = (cand, num, den);
            }
        }
        prop_assert_eq!(t, best.0);
        prop_assert!((j - best.1 as f64 / best.2 as f64).abs() < 1e-12);
        let m = evaluate(&s, t).unwrap();
        prop_assert_eq!(m.chosen_t, t);
    }
}
