use fcheck::metrics::{bleu, fleiss_kappa, kripp_alpha, rouge_l, rouge_n, AlphaLevel};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn self_overlap_is_perfect(x in "[a-d]{1,3}( [a-d]{1,3}){0,12}") {
        prop_assert_eq!(rouge_n(&x, &x, 1).f1, 1.0);
        prop_assert_eq!(rouge_l(&x, &x).f1, 1.0);
        if x.split_whitespace().count() >= 2 {
            prop_assert_eq!(rouge_n(&x, &x, 2).f1, 1.0);
        }
    }

    #[test]
    fn scores_stay_in_unit_interval(a in "[a-c ]{0,30}", b in "[a-c ]{0,30}") {
        for v in [rouge_n(&a, &b, 1).f1, rouge_n(&a, &b, 2).f1, rouge_l(&a, &b).f1, bleu(&a, &[&b])] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn perfect_agreement_is_exactly_one(
        cats in prop::collection::vec(0usize..4, 2..12),
        raters in 2usize..6,
    ) {
        prop_assume!(cats.iter().any(|&c| c != cats[0]));
        let counts: Vec<Vec<usize>> = cats
            .iter()
            .map(|&c| (0..4).map(|k| if k == c { raters } else { 0 }).collect())
            .collect();
        prop_assert_eq!(fleiss_kappa(&counts).unwrap(), 1.0);
        let table: Vec<Vec<Option<f64>>> =
            cats.iter().map(|&c| vec![Some(c as f64 + 1.0); raters]).collect();
        prop_assert_eq!(kripp_alpha(&table, AlphaLevel::Nominal).unwrap(), 1.0);
        prop_assert_eq!(kripp_alpha(&table, AlphaLevel::Ordinal).unwrap(), 1.0);
    }
}
