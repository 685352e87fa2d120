mod common;

use common::checks::{probs_of, routing_contracts, scan_top_k};
use dsmoe::numerics::softmax;
use dsmoe::routing::{choose_k, ranking, select_top_k, Thresholds, K_MAX, K_MIN};
use proptest::prelude::*;

const CASES: u32 = 10_000;

/// Router weights and a feature row: `m` in 2..=12, `f` in 1..=10.
fn router_case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (2usize..=12, 1usize..=10).prop_flat_map(|(m, f)| {
        (Just(m), prop::collection::vec(-5.0f64..5.0, m * f), prop::collection::vec(-3.0f64..3.0, f))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn probabilities_lie_on_the_simplex((m, w, phi) in router_case()) {
        let p = probs_of(&w, m, &phi);
        prop_assert_eq!(p.len(), m);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn top_k_is_exact_and_dominant((m, w, phi) in router_case(), k in K_MIN..=K_MAX) {
        let p = probs_of(&w, m, &phi);
        let k = k.min(m);
        let sel = select_top_k(&p, k).unwrap();
        prop_assert_eq!(sel.len(), k);
        let mut dedup = sel.clone();
        dedup.sort_unstable();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), k);
        let floor = sel.iter().map(|&j| p[j]).fold(f64::INFINITY, f64::min);
        for j in (0..m).filter(|j| !sel.contains(j)) {
            prop_assert!(p[j] <= floor);
        }
        prop_assert!(sel.windows(2).all(|w| p[w[0]] >= p[w[1]]));
    }

    #[test]
    fn ties_break_to_the_lower_id(levels in prop::collection::vec(0u8..4, 2..12), k in 1usize..=12) {
        // few distinct values, so ties are common
        let p: Vec<f64> = levels.iter().map(|&l| l as f64 * 0.25).collect();
        let k = k.min(p.len());
        prop_assert_eq!(select_top_k(&p, k).unwrap(), scan_top_k(&p, k));
        prop_assert_eq!(ranking(&p), scan_top_k(&p, p.len()));
    }

    #[test]
    fn argmax_survives_positive_scaling((m, w, phi) in router_case(), c in 0.05f64..20.0) {
        let logits: Vec<f64> = (0..m).map(|j| (0..phi.len()).map(|i| w[j * phi.len() + i] * phi[i]).sum()).collect();
        let mut sorted = logits.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        // a near-tie can flip under rounding; such cases say nothing about the rule
        prop_assume!(sorted[0] - sorted[1] > 1e-9 * (1.0 + sorted[0].abs()));
        let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
        let a = ranking(&probs_of(&w, m, &phi))[0];
        let b = ranking(&probs_of(&scaled, m, &phi))[0];
        prop_assert_eq!(a, b);
        let top = ranking(&softmax(&logits).unwrap())[0];
        prop_assert_eq!(a, top);
    }

    #[test]
    fn chain_length_is_monotone_in_score(
        mut cuts in prop::collection::vec(-10.0f64..10.0, 3),
        a in -20.0f64..20.0,
        b in -20.0f64..20.0,
    ) {
        cuts.sort_by(f64::total_cmp);
        let t = Thresholds { t1: cuts[0], t2: cuts[1], t3: cuts[2] };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (kl, kh) = (choose_k(lo, Some(&t)).unwrap(), choose_k(hi, Some(&t)).unwrap());
        prop_assert!(kl <= kh);
        prop_assert!((K_MIN..=K_MAX).contains(&kl) && (K_MIN..=K_MAX).contains(&kh));
    }

    #[test]
    fn calibrated_cuts_are_ordered(scores in prop::collection::vec(-50.0f64..50.0, 1..200)) {
        let t = Thresholds::calibrate(&scores).unwrap();
        prop_assert!(t.t1 <= t.t2 && t.t2 <= t.t3);
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= t.t1 && t.t3 <= hi);
    }
}

#[test]
fn seeded_contract_sweep() {
    routing_contracts(CASES as usize, 77).unwrap();
}
