use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use sonoscan_core::robot_sim::{
    execute_api, replay, reset, task_success, ArgKind, BodyRegion, ProbeType, ScanPattern,
    API_SURFACE,
};
use sonoscan_core::{ApiCall, ScanTask};

fn random_call(rng: &mut StdRng) -> ApiCall {
    let (name, params) = API_SURFACE.choose(rng).unwrap();
    let mut call = ApiCall::new(*name);
    for (param, kind) in params.iter() {
        call = match kind {
            ArgKind::Region => call.arg(param, BodyRegion::ALL.choose(rng).unwrap().as_str()),
            ArgKind::Probe => call.arg(param, ProbeType::ALL.choose(rng).unwrap().as_str()),
            ArgKind::Pattern => call.arg(param, ScanPattern::ALL.choose(rng).unwrap().as_str()),
            ArgKind::Number => call.arg(param, rng.random_range(-80.0..80.0)),
        };
    }
    call
}

#[test]
fn random_sequences_preserve_invariants() {
    let mut rng = StdRng::seed_from_u64(2024);
    for _ in 0..10_000 {
        let mut state = reset();
        let len = rng.random_range(1..=25);
        for _ in 0..len {
            let call = random_call(&mut rng);
            let (next, obs) = execute_api(&state, &call).unwrap();
            next.check_invariants()
                .unwrap_or_else(|e| panic!("{e} after {call:?}"));
            if !obs.ok {
                assert_eq!(next, state, "failed {call:?} changed state");
            }
            assert_eq!(obs.state_digest, next.digest());
            state = next;
        }
    }
}

#[test]
fn thyroid_sequence_succeeds() {
    let calls = vec![
        ApiCall::new("select_probe").arg("probe_type", "linear"),
        ApiCall::new("apply_gel").arg("region", "neck"),
        ApiCall::new("move_probe").arg("region", "neck"),
        ApiCall::new("set_contact_force").arg("newtons", 5),
        ApiCall::new("start_scan").arg("pattern", "linear_sweep"),
        ApiCall::new("capture_image"),
        ApiCall::new("stop_scan"),
    ];
    let (state, observations) = replay(&calls).unwrap();
    assert!(observations.iter().all(|o| o.ok));
    assert_eq!(state.coverage_of(BodyRegion::Neck), 0.9);
    let task = ScanTask {
        instruction: "scan the patient's thyroid".into(),
        region: BodyRegion::Neck,
    };
    assert!(task_success(&state, &task, false));
    assert!(!task_success(&state, &task, true));
}
