use std::collections::HashSet;
use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;

use gwaudit_core::client::{
    collect, Backoff, CallRecord, CollectPlan, GatewayClient, GatewayProfile, KeySource,
    RequestParams, VirtualClock,
};
use gwaudit_core::probe::{load_suite, ProbeSuite};
use gwaudit_sim::{MockGateway, Scenario, Substitution};

fn suite() -> ProbeSuite {
    let full = load_suite(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../data/probes/sample_suite.json"
    ))
    .unwrap();
    ProbeSuite::new("small", full.probes.into_iter().take(6).collect()).unwrap()
}

fn serve(scenario: Scenario, suite: &ProbeSuite) -> (Vec<CallRecord>, u64) {
    let clock = Arc::new(VirtualClock::new());
    let gw = Arc::new(MockGateway::new(scenario.clone(), Some(suite), clock.clone()).unwrap());
    let client = GatewayClient::new(gw.clone(), clock, KeySource::fixed("SIM_KEY", "k"));
    let profile = GatewayProfile {
        name: "sim".into(),
        base_url: "http://unused".into(),
        auth_env_var: "SIM_KEY".into(),
        models: Vec::new(),
        max_concurrency: 1,
        pricing_ref: None,
    };
    let mut params = RequestParams::new("unused");
    params.repetition_spacing = Duration::ZERO;
    params.backoff = Backoff::none();
    let models = vec![scenario.personas[0].name.clone()];
    let done = HashSet::new();
    let plan = CollectPlan {
        profile: &profile,
        models: &models,
        suite,
        params: &params,
        repetitions: 3,
        done: &done,
    };
    let mut out: Vec<CallRecord> = Vec::new();
    collect(&client, &plan, &mut out).unwrap();
    (out, gw.stats().substituted)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn same_seed_same_replies(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let suite = suite();
        let mut scenario = Scenario::clean("sim", seed);
        let target = scenario.personas[1].name.clone();
        scenario.misbehavior.substitution = Some(Substitution { target, probability: p });
        let (a, na) = serve(scenario.clone(), &suite);
        let (b, nb) = serve(scenario, &suite);
        prop_assert_eq!(na, nb);
        prop_assert!(na <= a.len() as u64);
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.raw_text, &y.raw_text);
            prop_assert_eq!(&x.usage, &y.usage);
        }
    }

    #[test]
    fn reported_usage_is_consistent(seed in any::<u64>()) {
        let suite = suite();
        let (records, _) = serve(Scenario::clean("sim", seed), &suite);
        prop_assert_eq!(records.len(), 18);
        for r in &records {
            prop_assert!(r.succeeded());
            prop_assert!(r.usage.cached_tokens <= r.usage.prompt_tokens);
            prop_assert!(r.usage.prompt_tokens > 0 && r.usage.completion_tokens > 0);
        }
    }
}
