use evector_core::attack::{classify, gen_message, MutationMode};
use evector_core::model::{battery_step, BatteryState};
use evector_core::ocpp::{decode_frame, encode_frame, OcppFrame};
use evector_core::telemetry::{RecordKind, Source};
use evector_core::{run, EvConfig, EvseConfig, OcppAction, Scenario, SimDriver, TelemetryRecord, TelemetryStore};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn one_ev(seed: u64, soc: f64, cap: f64, rate: f64, evse_kw: f64, plug: f64) -> Scenario {
    let mut s = Scenario::empty(3600.0);
    s.seed = seed;
    s.evses.push(EvseConfig::new("A", evse_kw));
    s.evs.push(EvConfig {
        id: "EV".into(),
        battery_capacity_kwh: cap,
        initial_soc: soc,
        max_charge_rate_kw: rate,
        plug_in_time_s: plug,
        target_evse: "A".into(),
        interrupt_at_s: None,
    });
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn battery_step_is_monotone_and_bounded(soc in 0.0..1.0f64, cap in 1.0..200.0f64, kw in 0.0..350.0f64, dt in 0.01..60.0f64) {
        let after = battery_step(BatteryState::new(soc, cap), kw, dt);
        prop_assert!(after.soc >= soc);
        prop_assert!(after.soc <= 1.0);
    }

    #[test]
    fn telemetry_jsonl_round_trips(gaps in prop::collection::vec(0.0..10.0f64, 1..40)) {
        let mut store = TelemetryStore::new();
        let mut t = 0.0;
        for (i, g) in gaps.iter().enumerate() {
            t += g;
            store.append(TelemetryRecord::new(t, Source::Csms, RecordKind::Error, json!({"i": i}))).unwrap();
        }
        let text = store.to_jsonl();
        let back = TelemetryStore::read_jsonl(text.as_bytes()).unwrap();
        prop_assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn generated_messages_always_classify(seed in any::<u64>(), action in 0usize..10, mode in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let action = OcppAction::ALL[action];
        let bytes = gen_message(action, MutationMode::ALL[mode], &mut rng);
        for response in [None, Some(OcppFrame::result("x", json!({})))] {
            for alive in [true, false] {
                prop_assert!(classify(&bytes, response.as_ref(), 0.0, alive).is_ok());
            }
        }
        if mode == 0 {
            let frame = decode_frame(&bytes).unwrap();
            prop_assert_eq!(decode_frame(&encode_frame(&frame)).unwrap(), frame);
        }
    }

}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn single_ev_runs_are_deterministic_and_soc_never_falls(
        seed in any::<u64>(),
        soc in 0.0..0.99f64,
        cap in 10.0..100.0f64,
        rate in 3.0..50.0f64,
        evse_kw in 3.0..150.0f64,
        plug in 0.0..100.0f64,
    ) {
        let s = one_ev(seed, soc, cap, rate, evse_kw, plug);
        let a = run(&s, SimDriver::Linked).unwrap();
        let b = run(&s, SimDriver::Linked).unwrap();
        prop_assert_eq!(a.store.to_jsonl(), b.store.to_jsonl());
        let socs: Vec<f64> = a
            .store
            .records()
            .iter()
            .filter_map(|r| r.payload.get("soc").and_then(|v| v.as_f64()))
            .collect();
        prop_assert!(socs.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        let ts: Vec<f64> = a.store.records().iter().map(|r| r.ts).collect();
        prop_assert!(ts.windows(2).all(|w| w[1] >= w[0]));
    }
}
