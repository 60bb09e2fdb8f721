use elastic_sim::cost::CostModel;
use elastic_sim::metrics::{slo_capacity, RateBounds};
use elastic_sim::par::Exec;
use elastic_sim::scheduler::SchedulerPolicy;
use elastic_sim::sim::{LoadMode, Scenario};
use elastic_sim::workload::{ArrivalProcess, ModelVariant, Moments};
use elastic_sim::Error;

const D: f64 = 0.010;
const N: f64 = 100.0;

/// AR decoding on a flat 10 ms iteration with fixed lengths. Each arrival
/// costs one prefill iteration that stalls everyone in flight, so in steady
/// state TPOT = d / (1 - rate * d) and the capacity knee at `slo` sits at
/// rate = 1/d - 1/slo.
fn flat_ar(requests: usize) -> Scenario {
    let load = LoadMode::OpenLoop { rate: 1.0, requests, arrival: ArrivalProcess::Uniform };
    let mut sc = Scenario::preset("sharegpt", ModelVariant::Sdar8b, SchedulerPolicy::Autoregressive, load).unwrap();
    sc.cost_model = CostModel::from_breakpoints(D, [0.0; 3], [128.0, 512.0]).unwrap();
    sc.dataset.prompt = Moments { mean: 16.0, std: 0.0 };
    sc.dataset.output = Moments { mean: N, std: 0.0 };
    sc.max_batch = 1024;
    sc
}

#[test]
fn knee_matches_prefill_interference_formula() {
    let sc = flat_ar(600);
    let bounds = RateBounds { low: 1.0, high: 95.0 };
    for slo in [0.0125, 0.025] {
        let expect = 1.0 / D - 1.0 / slo;
        let got = slo_capacity(&sc, slo, bounds, &[1], Exec::Parallel).unwrap().rate;
        assert!((got / expect - 1.0).abs() < 0.06, "slo {slo}: capacity {got}, analytic {expect}");
    }
}

#[test]
fn slo_below_bare_iteration_is_infeasible() {
    let sc = flat_ar(50);
    let bounds = RateBounds { low: 1.0, high: 95.0 };
    match slo_capacity(&sc, 0.9 * D, bounds, &[1], Exec::Sequential) {
        Err(Error::SloInfeasible { rate, .. }) => assert_eq!(rate, 1.0),
        other => panic!("expected SloInfeasible, got {other:?}"),
    }
}

#[test]
fn infinite_slo_returns_upper_bound_without_probing() {
    let sc = flat_ar(50);
    let r = slo_capacity(&sc, f64::INFINITY, RateBounds { low: 1.0, high: 42.0 }, &[1], Exec::Sequential).unwrap();
    assert_eq!(r.rate, 42.0);
    assert!(r.probes.is_empty());
}

#[test]
fn loose_slo_saturates_at_upper_bound() {
    let sc = flat_ar(50);
    let r = slo_capacity(&sc, 1.0, RateBounds { low: 1.0, high: 20.0 }, &[1], Exec::Sequential).unwrap();
    assert_eq!(r.rate, 20.0);
}

#[test]
fn executors_give_identical_probes() {
    let sc = flat_ar(200);
    let bounds = RateBounds { low: 4.0, high: 95.0 };
    let a = slo_capacity(&sc, 0.02, bounds, &[1, 2, 3], Exec::Sequential).unwrap();
    let b = slo_capacity(&sc, 0.02, bounds, &[1, 2, 3], Exec::Parallel).unwrap();
    assert_eq!(a, b);
}
