use proptest::prelude::*;

use picert::certificates::{remark3_compare, LinearGainBundle};
use picert::compfn::{invert, ComparisonFn};
use picert::pi::{run_pi, Policy, DEFAULT_RESIDUAL_TOL};
use picert::report::{CheckKind, MarginTracker, Witness};
use picert::system::FiniteProblem;
use picert::verify::check_lemma2;

proptest! {
    #[test]
    fn gamma_star_below_earlier_thresholds(
        a_w in 1e-3f64..50.0,
        a_w_bar in 0.0f64..50.0,
        a_vs in 1e-3f64..50.0,
        m in 1e-3f64..10.0,
        a in 0.0f64..4.0,
    ) {
        let lg = LinearGainBundle::new(a_w, a_w_bar, a_vs, m, a).unwrap();
        let r = remark3_compare(&lg);
        prop_assert!(r.holds, "{r:?}");
    }

    #[test]
    fn inverse_round_trip(c1 in 0.01f64..20.0, c2 in 0.01f64..20.0, p in 0.2f64..4.0, y in 1e-8f64..1e6) {
        let f = ComparisonFn::linear(c1).plus(&ComparisonFn::power(c2, p));
        let s = invert(&f, y).unwrap();
        prop_assert!((f.eval(s).unwrap() - y).abs() <= 1e-10 * y.max(1.0));
    }

    #[test]
    fn policy_iteration_values_never_increase(seed in 0u64..1_000, gamma in 0.05f64..0.99) {
        let p = FiniteProblem::random(25, 4, gamma, seed).unwrap();
        let run = run_pi(&p, Policy::Table(vec![0; 25]), None, DEFAULT_RESIDUAL_TOL).unwrap();
        prop_assert!(check_lemma2(&run, 1e-9).unwrap().passed);
    }

    #[test]
    fn split_trackers_match_serial(margins in prop::collection::vec(-1.0f64..1.0, 1..60), cut in 0usize..60) {
        let base = MarginTracker::new(CheckKind::Cor1Envelope, "split", 0.5, 1e-3).slack(0.2);
        let mut serial = base.fork();
        for (j, m) in margins.iter().enumerate() {
            serial.observe(0.0, *m, || Witness::at(j.to_string()));
        }
        let cut = cut.min(margins.len());
        let (mut left, mut right) = (base.fork(), base.fork());
        for (j, m) in margins.iter().enumerate() {
            let t = if j < cut { &mut left } else { &mut right };
            t.observe(0.0, *m, || Witness::at(j.to_string()));
        }
        left.merge(right);
        prop_assert_eq!(serial.finish(), left.finish());
    }
}
