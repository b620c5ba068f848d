mod common;

use alphaloop::bandit::Action;
use alphaloop_gateway::{schema, Gateway, GatewayConfig, GatewayError, Message, ReplayMode, ReplayStore};
use common::{completion, dead_endpoint, last_message, serve};
use serde_json::json;

const HYPOTHESIS: &str = r#"Here you go:
```json
{"action": "factor", "statement": "short-term reversal", "rationale": "losers bounce",
 "tasks": [{"name": "rev5", "description": "5-day reversal", "formulation": "Ref($close, 5)/$close - 1"}]}
```"#;

fn live(url: &str) -> GatewayConfig {
    GatewayConfig {
        endpoint: Some(url.to_string()),
        backoff_secs: 0.0,
        timeout_secs: 5.0,
        ..GatewayConfig::default()
    }
}

fn ask() -> Vec<Message> {
    vec![Message::system("Role: hypothesis"), Message::user("propose a factor")]
}

fn ask_hypothesis(g: &Gateway) -> alphaloop_gateway::Result<alphaloop::research::Hypothesis> {
    g.structured(ask(), |v| schema::hypothesis(v, Action::Factor, 3))
}

#[test]
fn live_reply_parses_into_hypothesis() {
    let server = serve(|_, _| (200, completion(HYPOTHESIS)));
    let g = Gateway::new(live(&server.url)).unwrap();
    let h = ask_hypothesis(&g).unwrap();
    assert_eq!(h.id, 3);
    assert_eq!(h.tasks[0].formulation.as_deref(), Some("Ref($close, 5)/$close - 1"));
    assert_eq!(g.tokens_used(), 10);
    let body = &server.requests()[0];
    assert_eq!(body["model"], "gpt-4o-mini");
    assert_eq!(body["temperature"], 0.8);
    assert_eq!(body["messages"][1]["role"], "user");
}

#[test]
fn bearer_token_read_from_named_variable() {
    let server = serve(|_, _| (200, completion(HYPOTHESIS)));
    // unique variable name so parallel tests cannot interfere
    let var = "ALPHALOOP_TEST_TOKEN_7F3A";
    unsafe { std::env::set_var(var, "sekrit") };
    let g = Gateway::new(GatewayConfig {
        token_env: var.into(),
        ..live(&server.url)
    })
    .unwrap();
    g.chat(&ask()).unwrap();
    assert_eq!(server.auth.lock().unwrap()[0].as_deref(), Some("Bearer sekrit"));
}

#[test]
fn recorded_reply_replays_without_network() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve(|_, _| (200, completion(HYPOTHESIS)));
    let rec = Gateway::new(GatewayConfig {
        mode: ReplayMode::Record,
        replay_dir: Some(dir.path().to_path_buf()),
        ..live(&server.url)
    })
    .unwrap();
    let recorded = ask_hypothesis(&rec).unwrap();

    let replay = Gateway::new(GatewayConfig {
        mode: ReplayMode::Replay,
        replay_dir: Some(dir.path().to_path_buf()),
        endpoint: None,
        ..GatewayConfig::default()
    })
    .unwrap();
    assert_eq!(ask_hypothesis(&replay).unwrap(), recorded);
    assert_eq!(replay.requests_sent(), 0);
    let other = vec![Message::user("something else")];
    assert!(matches!(replay.chat(&other), Err(GatewayError::ReplayMiss(_))));
}

#[test]
fn missing_action_is_malformed_after_one_reformat() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GatewayConfig {
        mode: ReplayMode::Replay,
        replay_dir: Some(dir.path().to_path_buf()),
        ..GatewayConfig::default()
    };
    let g = Gateway::new(cfg).unwrap();
    let store = ReplayStore::new(dir.path());
    let bad = r#"{"statement": "s", "tasks": [{"name": "a", "description": "d", "formulation": "$close"}]}"#;
    store.put(&g.request_body(&ask()), bad).unwrap();
    let mut retry = ask();
    retry.push(Message::assistant(bad));
    retry.push(Message::user(g.prompts().render("reformat", &[("error", "missing \"action\" key".into())])));
    store.put(&g.request_body(&retry), bad).unwrap();
    match ask_hypothesis(&g) {
        Err(GatewayError::MalformedReply { raw, reason }) => {
            assert_eq!(raw, bad);
            assert!(reason.contains("action"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn reformat_request_recovers() {
    let server = serve(|_, k| (200, completion(if k == 0 { "I think momentum works." } else { HYPOTHESIS })));
    let g = Gateway::new(live(&server.url)).unwrap();
    assert!(ask_hypothesis(&g).is_ok());
    let reqs = server.requests();
    assert_eq!(reqs.len(), 2);
    assert_eq!(reqs[1]["messages"].as_array().unwrap().len(), 4);
    assert!(last_message(&reqs[1]).contains("no JSON object"));
}

#[test]
fn unparseable_formula_is_a_schema_violation() {
    let reply = r#"{"action": "factor", "statement": "s", "tasks": [{"name": "a", "description": "d", "formulation": "Mean($close,"}]}"#;
    let server = serve(move |_, _| (200, completion(reply)));
    let g = Gateway::new(live(&server.url)).unwrap();
    assert!(matches!(ask_hypothesis(&g), Err(GatewayError::MalformedReply { .. })));
    assert_eq!(server.requests().len(), 2);
}

#[test]
fn unreachable_endpoint_gives_up_after_retries() {
    let g = Gateway::new(GatewayConfig {
        retries: 2,
        ..live(&dead_endpoint())
    })
    .unwrap();
    match g.chat(&ask()) {
        Err(GatewayError::GatewayUnavailable { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
    assert_eq!(g.requests_sent(), 3);
}

#[test]
fn server_errors_are_retried() {
    let server = serve(|_, k| if k < 2 { (503, "{}".into()) } else { (200, completion(HYPOTHESIS)) });
    let g = Gateway::new(live(&server.url)).unwrap();
    assert!(ask_hypothesis(&g).is_ok());
    assert_eq!(server.requests().len(), 3);

    let server = serve(|_, _| (500, json!({"error": "boom"}).to_string()));
    let g = Gateway::new(GatewayConfig { retries: 1, ..live(&server.url) }).unwrap();
    assert!(matches!(g.chat(&ask()), Err(GatewayError::GatewayUnavailable { attempts: 2, .. })));
}

#[test]
fn config_is_checked_up_front() {
    let no_endpoint = GatewayConfig::default();
    assert!(matches!(Gateway::new(no_endpoint), Err(GatewayError::Config(_))));
    let zero_timeout = GatewayConfig {
        timeout_secs: 0.0,
        ..live("http://127.0.0.1:9")
    };
    assert!(matches!(Gateway::new(zero_timeout), Err(GatewayError::Config(_))));
    let replay_without_dir = GatewayConfig {
        mode: ReplayMode::Replay,
        ..GatewayConfig::default()
    };
    assert!(matches!(Gateway::new(replay_without_dir), Err(GatewayError::Config(_))));
}

#[test]
fn prompt_dir_overrides_bundled_templates() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("reformat.txt"), "fix: {{error}}").unwrap();
    let g = Gateway::new(GatewayConfig {
        prompt_dir: Some(dir.path().to_path_buf()),
        ..live("http://127.0.0.1:9")
    })
    .unwrap();
    assert_eq!(g.prompts().render("reformat", &[("error", "x".into())]), "fix: x");
    assert!(g.prompts().render("schedule_user", &[]).contains("Current state"));
}
