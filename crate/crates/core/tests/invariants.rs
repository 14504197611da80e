//! Cross-module properties checked through the public API.

use std::sync::OnceLock;

use polaris_core::metrics::{kl_divergence_hist, spearman_rho};
use polaris_core::optimizer::{ignore_lines, run_codesign, run_sw_dse, satisfies_constraints, BoConfig, RunHistory};
use polaris_core::oracle::{evaluate_high, evaluate_low, CostModel, HighOracle};
use polaris_core::sampling::lattice::LATTICE_DIM;
use polaris_core::sampling::{collect_dataset, lattice_map, TargetKind};
use polaris_core::starlight::{DklConfig, StarlightModel};
use polaris_core::workload::{
    bundled_workload, encode_features, micro_hw, micro_layer, unique_layers, validate_fit, HwConfig, Workload,
    HW_SPACE_SIZE,
};
use proptest::prelude::*;

fn unit_point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, LATTICE_DIM)
}

fn scratch_model() -> &'static StarlightModel {
    static M: OnceLock<StarlightModel> = OnceLock::new();
    M.get_or_init(|| {
        let w = bundled_workload("resnet-like").unwrap();
        let ds = collect_dataset(&HighOracle::default(), &unique_layers(&[w]), 48, 5).unwrap();
        let mut m = StarlightModel::init_scratch(&ds.samples, TargetKind::Edp, DklConfig::default(), 0).unwrap();
        m.train_joint(20, 1e-3, 1e-2, None, 0).unwrap();
        m
    })
}

fn small_bo(seed: u64) -> BoConfig {
    BoConfig {
        n_outer: 2,
        m_inner: 3,
        sw_pool_size: 64,
        hw_score_mappings: 2,
        refit_steps: 1,
        m_inner_fixed_hw: 4,
        seed,
        ..BoConfig::default()
    }
}

fn check_run(h: &RunHistory, expected_evals: usize) {
    assert_eq!(h.evaluations.len(), expected_evals);
    assert!(h.cummin_is_non_increasing());
    let layers = &bundled_workload(&h.header.workload)
        .map(|w| w.layers)
        .unwrap_or_else(|| vec![micro_layer()]);
    for e in &h.evaluations {
        let dp = polaris_core::workload::DesignPoint {
            hw: e.hw,
            sw: e.sw,
            layer: layers[e.layer],
        };
        assert!(satisfies_constraints(&dp), "evaluation {} breaks a mapping constraint", e.index);
    }
    let inc = h.incumbent.as_ref().expect("incumbent");
    assert_eq!(Some(inc.total_edp), h.final_edp());
    assert_eq!(inc.layers.len(), layers.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn feasible_lattice_points_encode_into_the_unit_cube(u in unit_point()) {
        let layer = bundled_workload("unet-like").unwrap().layers[2];
        let dp = lattice_map(&u, &layer);
        prop_assume!(validate_fit(&dp));
        let f = encode_features(&dp).unwrap();
        prop_assert!(f.0.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn oracles_share_energy_and_high_is_never_faster(u in unit_point(), which in 0usize..6) {
        let layer = bundled_workload("bert-like").unwrap().layers[which];
        let dp = lattice_map(&u, &layer);
        prop_assume!(validate_fit(&dp));
        let cm = CostModel::default();
        let (lo, hi) = (evaluate_low(&dp, &cm).unwrap(), evaluate_high(&dp, &cm).unwrap());
        prop_assert!(hi.delay_cycles >= lo.delay_cycles);
        prop_assert!((hi.energy_pj - lo.energy_pj).abs() <= 1e-9 * lo.energy_pj);
        prop_assert!(lo.edp > 0.0 && lo.edp.is_finite());
    }

    #[test]
    fn hw_space_index_round_trips(i in 0usize..HW_SPACE_SIZE) {
        let hw = HwConfig::from_space_index(i);
        prop_assert!(hw.is_valid());
        prop_assert_eq!(hw.space_index(), Some(i));
        let text = format!("{},{},{}", hw.array_dim, hw.acc_kb, hw.spad_kb);
        prop_assert_eq!(text.parse::<HwConfig>().unwrap(), hw);
    }

    #[test]
    fn spearman_is_bounded_and_symmetric(
        pairs in prop::collection::vec((-1e3..1e3f64, -1e3..1e3f64), 3..40)
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assume!(a.iter().any(|x| *x != a[0]) && b.iter().any(|x| *x != b[0]));
        let r = spearman_rho(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        prop_assert!((r - spearman_rho(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn histogram_kl_is_nonnegative(
        p in prop::collection::vec(0.0..10.0f64, 20..60),
        q in prop::collection::vec(0.0..10.0f64, 20..60),
    ) {
        prop_assert!(kl_divergence_hist(&p, &q, 8).unwrap() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn codesign_keeps_budget_constraints_and_monotone_incumbent(seed in 0u64..1000) {
        let w = bundled_workload("resnet-like").unwrap();
        let h = run_codesign(&small_bo(seed), &w, &mut scratch_model().clone(), &HighOracle::default(), &mut ignore_lines)
            .unwrap();
        check_run(&h, 2 * 3 * w.layers.len());
    }
}

#[test]
fn software_dse_stays_on_the_fixed_hw() {
    let w = Workload {
        name: "micro".into(),
        layers: vec![micro_layer()],
    };
    let cfg = BoConfig {
        fix_hw: Some(micro_hw()),
        ..small_bo(3)
    };
    let h = run_sw_dse(&cfg, &w, &mut scratch_model().clone(), &HighOracle::default(), &mut ignore_lines).unwrap();
    check_run(&h, 4);
    assert!(h.evaluations.iter().all(|e| e.hw == micro_hw()));
    assert_eq!(h.trials.len(), 1);
}

#[test]
fn identical_seeds_give_identical_histories() {
    let w = bundled_workload("retinanet-like").unwrap();
    let run = || {
        run_codesign(&small_bo(11), &w, &mut scratch_model().clone(), &HighOracle::default(), &mut ignore_lines)
            .unwrap()
            .to_bytes()
    };
    assert_eq!(run(), run());
}
