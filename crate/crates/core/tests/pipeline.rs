use afs_lab_core::afs::{afs_grid_2comp_auto, true_coords};
use afs_lab_core::factor::{ssq, truncated_svd};
use afs_lab_core::mcr::{initial_estimate, match_spectra, mcr_als, InitMethod, McrOptions};
use afs_lab_core::norms::norm_surface;
use afs_lab_core::simkit::Scenario;
use afs_lab_core::solvers::PenaltySpec;

fn plain() -> PenaltySpec {
    PenaltySpec { lambda: 0.0, alpha: 1.0, x_exponent: 1.0 }
}

#[test]
fn simulated_truths_fall_in_distinct_regions() {
    for sc in [Scenario::TwoCompPlain, Scenario::TwoCompOverlap] {
        let ds = sc.dataset::<f64>(0.0, 0).unwrap();
        let factor = truncated_svd(&ds.d, 2).unwrap();
        let grid = afs_grid_2comp_auto(&factor, 101, 1e-6).unwrap();
        let regions = grid.regions();
        assert_eq!(regions.count(), 2, "{}", sc.tag());

        let labels: Vec<_> = true_coords(&factor, &ds.c_true)
            .unwrap()
            .into_iter()
            .map(|(a, b)| {
                let (ib, ia) = grid.nearest_cell(a, b).expect("truth inside the box");
                regions.label_near(ib, ia).expect("truth next to a feasible cell")
            })
            .collect();
        assert_ne!(labels[0], labels[1], "{}", sc.tag());
    }
}

#[test]
fn l1_surface_is_defined_on_every_feasible_cell() {
    let ds = Scenario::TwoCompPlain.dataset::<f64>(0.0, 0).unwrap();
    let factor = truncated_svd(&ds.d, 2).unwrap();
    let grid = afs_grid_2comp_auto(&factor, 61, 1e-6).unwrap();
    let l1 = norm_surface(&grid, 1.0, 1e-6).unwrap();
    assert_eq!(l1.present_count(), grid.feasible_count());
}

#[test]
fn mcr_from_purest_rows_reproduces_the_data() {
    let ds = Scenario::ThreeCompPlain.dataset::<f64>(0.0, 0).unwrap();
    let s0 = initial_estimate(&ds.d, 3, &InitMethod::PurestRows, 0).unwrap();
    let res = mcr_als(&ds.d, &s0, &plain(), &McrOptions::default()).unwrap();
    let recon = &res.c * &res.s;
    let rel = ssq(&ds.d, &recon).unwrap() / ds.d.norm_squared();
    assert!(rel < 1e-3, "relative residual {rel}");
    assert!(res.c.iter().chain(res.s.iter()).all(|v| *v >= 0.0));
}

#[test]
fn single_precision_pipeline_runs() {
    let ds = Scenario::TwoCompPlain.dataset::<f32>(0.0, 0).unwrap();
    let s0 = ds.s_true.clone();
    let res = mcr_als(&ds.d, &s0, &plain(), &McrOptions { epsilon: 1e-5, max_iter: 50 }).unwrap();
    let cos = match_spectra(&res.s, &ds.s_true).unwrap();
    assert!(cos.iter().all(|c| *c > 0.999), "{cos:?}");
}
