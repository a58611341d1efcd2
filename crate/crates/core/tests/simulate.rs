//! Designs, studies and power curves.

use mwiv::simulate::{
    build_cache, power_curve, run_study, strength, Ak91StyleDesign, Design, DesignSpec, FirstStage, GroupDesign,
    GroupInstance, Method, SimulationSpec, AK91_SCALES,
};

fn group(n: usize, k: usize, fs: FirstStage) -> GroupInstance {
    GroupInstance::new(GroupDesign::new(n, k, 0.2, fs).unwrap()).unwrap()
}

#[test]
fn schooling_first_stage_matches_analytic_moments() {
    let inst = Ak91StyleDesign::synthetic(AK91_SCALES[3]).build().unwrap();
    let m = inst.moments();
    let n = inst.n();
    let reps = 1500;
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    for rep in 0..reps {
        let (_, x) = inst.draw(17, rep);
        for i in 0..n {
            sum[i] += x[i];
            sq[i] += x[i] * x[i];
        }
    }
    let r = reps as f64;
    let mut ratio = 0.0;
    for i in 0..n {
        let mean = sum[i] / r;
        let var = sq[i] / r - mean * mean;
        ratio += var / m.varsigma2[i];
        let se = (m.varsigma2[i] / r).sqrt();
        assert!((mean - m.pi[i]).abs() < 5.0 * se, "obs {i}: {mean} vs {}", m.pi[i]);
    }
    ratio /= n as f64;
    assert!((ratio - 1.0).abs() < 0.03, "variance ratio {ratio}");
}

#[test]
fn schooling_instrument_count_after_filtering() {
    let inst = Ak91StyleDesign::synthetic(AK91_SCALES[0]).build().unwrap();
    assert!((inst.k() as i64 - 154).abs() <= 10, "K = {}", inst.k());
    let c = build_cache(&inst).unwrap();
    assert!(c.delta_max() < 1.0);
}

#[test]
fn study_is_deterministic_and_counts_failures() {
    let mut spec = SimulationSpec::new(
        DesignSpec::Group(GroupDesign::new(200, 40, 0.2, FirstStage::Strength(2.5)).unwrap()),
        300,
        5,
    );
    spec.ci = true;
    let a = run_study(&spec).unwrap();
    let b = run_study(&spec).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    for m in &a.methods {
        assert_eq!(m.reps_ok + m.failures, 300);
        if let Some(r) = m.rejection {
            assert!((0.0..=1.0).contains(&r.rate));
            assert!((r.se - (r.rate * (1.0 - r.rate) / r.total as f64).sqrt()).abs() < 1e-15);
        }
    }
    assert!((a.strength.mu2_over_sqrt_k - 2.5).abs() < 1e-9);
}

#[test]
fn monte_carlo_error_shrinks_with_reps() {
    let design = DesignSpec::Group(GroupDesign::new(200, 40, 0.2, FirstStage::Dense).unwrap());
    let se: Vec<f64> = [250, 1000, 4000]
        .iter()
        .map(|&reps| {
            let mut spec = SimulationSpec::new(design.clone(), reps, 11);
            spec.methods = vec![Method::JackknifeArCrossfit];
            let r = run_study(&spec).unwrap();
            r.method(Method::JackknifeArCrossfit).unwrap().rejection.unwrap().se * (reps as f64).sqrt()
        })
        .collect();
    for w in se.windows(2) {
        assert!((w[1] / w[0] - 1.0).abs() < 0.3, "{se:?}");
    }
}

#[test]
fn power_curve_size_point() {
    let d = group(200, 40, FirstStage::Sparse);
    let c = build_cache(&d).unwrap();
    let t = power_curve(&d, &c, &[0.0], 0.05, 1000, 2).unwrap();
    let r = t.rows[0];
    assert!((0.03..=0.07).contains(&r.crossfit_rate), "{r:?}");
    assert!((0.03..=0.07).contains(&r.naive_rate), "{r:?}");
    assert!(power_curve(&d, &c, &[f64::NAN], 0.05, 10, 2).is_err());
}

#[test]
fn naive_shift_stabilizes() {
    let d = group(200, 40, FirstStage::Sparse);
    let c = build_cache(&d).unwrap();
    let st = strength(&c, &d.moments());
    let deltas = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
    let t = power_curve(&d, &c, &deltas, 0.05, 500, 8).unwrap();
    let bound = st.mu2_over_sqrt_k * (1.0 / st.naive_shift_c).sqrt() * 1.1;
    let shifts: Vec<f64> = t.rows.iter().map(|r| r.mean_naive_shift).collect();
    for w in shifts.windows(2) {
        assert!(w[1] >= w[0] * 0.99, "{shifts:?}");
    }
    assert!(shifts.iter().all(|&s| s <= bound), "{shifts:?} vs {bound}");
}
