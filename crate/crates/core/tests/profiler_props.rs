use proptest::prelude::*;
use s2tdpt::profiler::{attention_memory_footprint, energy_estimate, LayerCostRecord, LayerKind, E_AC_PJ, E_MAC_PJ};

fn layers() -> impl Strategy<Value = (u64, Vec<(u64, f64)>)> {
    (1u64..5_000_000, prop::collection::vec((0u64..50_000_000, 0.0f64..=1.0), 1..12))
}

fn records(first: u64, rated: &[(u64, f64)], t: usize) -> Vec<LayerCostRecord> {
    let mut v = vec![LayerCostRecord::encoding("stem", LayerKind::Conv, first)];
    for (i, &(flops, f)) in rated.iter().enumerate() {
        v.push(LayerCostRecord::rated(format!("l{i}"), LayerKind::Linear, flops, f, t).unwrap());
    }
    v
}

proptest! {
    #[test]
    fn sops_follow_the_rounded_formula((first, rated) in layers(), t in 1usize..9) {
        let r = energy_estimate(&records(first, &rated, t), t, 0).unwrap();
        for (rec, &(flops, f)) in r.layers[1..].iter().zip(&rated) {
            prop_assert_eq!(rec.sops, (f * t as f64 * flops as f64).round() as u64);
            prop_assert!((0.0..=1.0).contains(&rec.firing_rate));
        }
        let ac = E_AC_PJ * r.total_sops;
        prop_assert!(((ac + E_MAC_PJ * first as f64) * 1e-9 - r.energy_mj_snn).abs() <= 1e-12 * r.energy_mj_snn.max(1e-30));
        let all: u64 = first + rated.iter().map(|l| l.0).sum::<u64>();
        prop_assert_eq!(r.energy_mj_ann, E_MAC_PJ * all as f64 * 1e-9);
    }

    #[test]
    fn doubling_timesteps_doubles_sop_terms((first, rated) in layers(), t in 1usize..9) {
        let recs = records(first, &rated, t);
        let a = energy_estimate(&recs, t, 0).unwrap();
        let b = energy_estimate(&recs, 2 * t, 0).unwrap();
        prop_assert_eq!(b.total_sops, 2.0 * a.total_sops);
        prop_assert_eq!(E_AC_PJ * b.total_sops, 2.0 * (E_AC_PJ * a.total_sops));
        for (x, y) in a.layers[1..].iter().zip(&b.layers[1..]) {
            // Per-layer counts are rounded; twice a rounded value is off by at most one.
            prop_assert!((y.sops as i64 - 2 * x.sops as i64).abs() <= 1);
        }
        prop_assert_eq!(b.first_layer_flops, a.first_layer_flops);
    }

    #[test]
    fn raising_a_rate_never_lowers_energy((first, rated) in layers(), t in 1usize..9, pick in any::<prop::sample::Index>(), bump in 0.0f64..1.0) {
        let base = energy_estimate(&records(first, &rated, t), t, 0).unwrap();
        let mut higher = rated.clone();
        let i = pick.index(higher.len());
        higher[i].1 = higher[i].1 + bump * (1.0 - higher[i].1);
        let up = energy_estimate(&records(first, &higher, t), t, 0).unwrap();
        prop_assert!(up.energy_mj_snn >= base.energy_mj_snn);
    }

    #[test]
    fn ann_dominates_when_accumulates_are_cheap((first, rated) in layers(), t in 1usize..9) {
        // f * T * 0.9 <= 46 holds for every rate in [0, 1] up to T = 51.
        let r = energy_estimate(&records(first, &rated, t), t, 0).unwrap();
        prop_assert!(r.energy_mj_ann >= r.energy_mj_snn);
    }

    #[test]
    fn footprint_is_quadratic(n in 1usize..1 << 20, bytes in 1usize..9) {
        prop_assert_eq!(attention_memory_footprint(2 * n, bytes).unwrap(), 4 * attention_memory_footprint(n, bytes).unwrap());
    }
}
