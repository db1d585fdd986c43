use advsig::{lp_norm, project_lp_ball, snr_db, NormOrder, ThreatModel};
use proptest::prelude::*;

fn soft(v: &[f64], t: f64) -> Vec<f64> {
    v.iter().map(|&x| x.signum() * (x.abs() - t).max(0.0)).collect()
}

fn bisect(mut lo: f64, mut hi: f64, too_big: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if too_big(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Lagrangian forms of the Euclidean projection, solved by bisection on the
/// multiplier; the L∞ case uses the Moreau identity `v - prox_{eps |.|_1}(v)`.
fn oracle(v: &[f64], p: NormOrder, eps: f64) -> Vec<f64> {
    let norm = |u: &[f64], q: NormOrder| match q {
        NormOrder::L1 => u.iter().map(|x| x.abs()).sum::<f64>(),
        NormOrder::L2 => u.iter().map(|x| x * x).sum::<f64>().sqrt(),
        _ => u.iter().fold(0.0f64, |m, x| m.max(x.abs())),
    };
    if norm(v, p) <= eps {
        return v.to_vec();
    }
    match p {
        NormOrder::Linf => v.iter().zip(soft(v, eps)).map(|(a, b)| a - b).collect(),
        NormOrder::L2 => {
            let mu = bisect(0.0, 1e12, |mu| norm(v, p) / (1.0 + mu) > eps);
            v.iter().map(|x| x / (1.0 + mu)).collect()
        }
        NormOrder::L1 => {
            let top = norm(v, NormOrder::Linf);
            let tau = bisect(0.0, top, |t| norm(&soft(v, t), p) > eps);
            soft(v, tau)
        }
        NormOrder::L0 => unreachable!(),
    }
}

fn order() -> impl Strategy<Value = NormOrder> {
    prop_oneof![Just(NormOrder::L1), Just(NormOrder::L2), Just(NormOrder::Linf)]
}

fn vector() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-2.0f32..2.0, 1..=32)
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_matches_lagrangian_oracle(v in vector(), p in order(), eps in 0.01f64..3.0) {
        let got = project_lp_ball(&v, &ThreatModel::new(p, eps).unwrap()).unwrap();
        let want = oracle(&v.iter().map(|&x| x as f64).collect::<Vec<_>>(), p, eps);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((*g as f64 - w).abs() < 1e-6, "{g} vs {w}");
        }
        prop_assert!(lp_norm(&got, p) <= eps * (1.0 + 1e-6));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn projection_is_idempotent(v in vector(), p in order(), eps in 0.01f64..3.0) {
        let tm = ThreatModel::new(p, eps).unwrap();
        let once = project_lp_ball(&v, &tm).unwrap();
        let twice = project_lp_ball(&once, &tm).unwrap();
        prop_assert!(l2(&once, &twice) <= 1e-6);
    }

    #[test]
    fn projection_is_non_expansive(
        ab in (1usize..=32).prop_flat_map(|n| (prop::collection::vec(-2.0f32..2.0, n), prop::collection::vec(-2.0f32..2.0, n))),
        p in order(),
        eps in 0.01f64..3.0,
    ) {
        let tm = ThreatModel::new(p, eps).unwrap();
        let (pa, pb) = (project_lp_ball(&ab.0, &tm).unwrap(), project_lp_ball(&ab.1, &tm).unwrap());
        prop_assert!(l2(&pa, &pb) <= l2(&ab.0, &ab.1) + 1e-6);
    }

    #[test]
    fn feasible_points_are_fixed(v in vector(), p in order()) {
        let eps = lp_norm(&v, p) * 1.01 + 1e-3;
        let got = project_lp_ball(&v, &ThreatModel::new(p, eps).unwrap()).unwrap();
        prop_assert_eq!(got, v);
    }

    #[test]
    fn snr_is_scale_invariant(v in prop::collection::vec(0.01f32..1.0, 4..64), k in 0.1f32..10.0) {
        let d: Vec<f32> = v.iter().map(|x| x * 0.01).collect();
        let kv: Vec<f32> = v.iter().map(|x| x * k).collect();
        let kd: Vec<f32> = d.iter().map(|x| x * k).collect();
        prop_assert!((snr_db(&v, &d).unwrap() - snr_db(&kv, &kd).unwrap()).abs() < 1e-3);
    }
}
