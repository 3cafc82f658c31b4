use std::collections::HashMap;
use std::process::Command;

use fcheck::backend::{
    cache_key, cached_complete, complete, BackendParams, CompletionRequest, Message, MockBackend, MockFallback,
    ResponseCache,
};
use proptest::prelude::*;

fn request(system: &str, user: &str, model: &str, temperature: f64, max_tokens: u32) -> CompletionRequest {
    CompletionRequest::new(
        vec![Message::system(system), Message::user(user)],
        BackendParams {
            model_name: model.into(),
            temperature,
            max_tokens,
            seed: None,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cached_text_equals_direct_text(users in prop::collection::vec("[a-z ]{1,20}", 1..8)) {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let mock = MockBackend::new("m", MockFallback::Digest);
        for u in &users {
            let req = request("sys", u, "model", 0.001, 512);
            let direct = complete(&mock, &req).unwrap().text;
            let first = cached_complete(&mock, &req, &cache).unwrap();
            let second = cached_complete(&mock, &req, &cache).unwrap();
            prop_assert_eq!(&first.text, &direct);
            prop_assert_eq!(&second.text, &direct);
            prop_assert!(second.cache_hit);
        }
        // reopening rebuilds the same index from disk
        let reopened = ResponseCache::open(dir.path()).unwrap();
        for u in &users {
            let req = request("sys", u, "model", 0.001, 512);
            let hit = cached_complete(&mock, &req, &reopened).unwrap();
            prop_assert!(hit.cache_hit);
        }
    }

    #[test]
    fn cache_key_is_injective_over_the_tuple(
        a in ("[ab]{0,3}", "[ab]{1,3}", "[ab]{1,2}", 0usize..3, 1u32..3, "[xy]{1,2}"),
        b in ("[ab]{0,3}", "[ab]{1,3}", "[ab]{1,2}", 0usize..3, 1u32..3, "[xy]{1,2}"),
    ) {
        let temps = [0.001, 0.0010000000000000002, 0.5];
        let ra = request(&a.0, &a.1, &a.2, temps[a.3], a.4);
        let rb = request(&b.0, &b.1, &b.2, temps[b.3], b.4);
        let same = a == b;
        prop_assert_eq!(cache_key(&a.5, &ra) == cache_key(&b.5, &rb), same);
    }
}

#[test]
fn seed_does_not_enter_the_key() {
    let mut a = request("s", "u", "m", 0.001, 512);
    let b = a.clone();
    a.params.seed = Some(42);
    assert_eq!(cache_key("x", &a), cache_key("x", &b));
}

#[test]
fn many_distinct_requests_give_distinct_keys() {
    let mut seen = HashMap::new();
    for i in 0..5000 {
        let req = request("sys", &format!("user {i}"), "m", 0.001, 512);
        assert!(seen.insert(cache_key("b", &req), i).is_none());
    }
}

const PROBE_ENV: &str = "FCHECK_MOCK_PROBE";

fn probe_outputs() -> Vec<String> {
    let mock = MockBackend::new("probe", MockFallback::Digest).rule(Some("stance"), "rain", "supporting");
    ["it will rain", "sunny day", "cloudy"]
        .iter()
        .map(|u| complete(&mock, &request("Task: evidence stance.", u, "m", 0.001, 512)).unwrap().text)
        .collect()
}

#[test]
fn mock_probe_child() {
    if std::env::var(PROBE_ENV).is_ok() {
        for line in probe_outputs() {
            println!("PROBE {line}");
        }
    }
}

#[test]
fn mock_outputs_survive_process_restarts() {
    let exe = std::env::current_exe().unwrap();
    let run = || {
        let out = Command::new(&exe)
            .args(["--exact", "mock_probe_child", "--nocapture", "--test-threads=1"])
            .env(PROBE_ENV, "1")
            .output()
            .unwrap();
        String::from_utf8(out.stdout)
            .unwrap()
            .lines()
            .filter_map(|l| l.find("PROBE ").map(|i| l[i + 6..].to_string()))
            .collect::<Vec<_>>()
    };
    let first = run();
    assert_eq!(first.len(), 3);
    assert_eq!(first, run());
    assert_eq!(first, probe_outputs());
    assert_eq!(first[0], "supporting");
}
