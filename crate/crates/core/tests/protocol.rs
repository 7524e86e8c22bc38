use std::io::Cursor;
use std::sync::Arc;

use gridflow_core::action_field::action_encoding;
use gridflow_core::features::{FeatureTensor, NUM_CHANNELS};
use gridflow_core::grid::{Cell, GridMap};
use gridflow_core::mapf::Instance;
use gridflow_core::sim::{
    builtin_policy, init_message, run_episode, serve, EndReason, EngineMessage, EpisodeConfig, EpisodeTrace, Mode,
    ScriptedPolicy,
};
use serde_json::{json, Value};

fn instance() -> Instance {
    let map = Arc::new(GridMap::from_rows(&["....", ".##.", "...."]).unwrap());
    Instance::new(
        "p",
        map,
        vec![Cell::new(0, 0), Cell::new(2, 3)],
        vec![Cell::new(2, 0), Cell::new(0, 3)],
    )
    .unwrap()
}

#[test]
fn init_message_has_the_documented_fields() {
    let inst = instance();
    let config = EpisodeConfig {
        send_features: true,
        ..EpisodeConfig::default()
    };
    let v = serde_json::to_value(EngineMessage::Init(init_message(&inst, &config))).unwrap();
    assert_eq!(v["type"], "init");
    assert_eq!(v["mode"], "mapf");
    assert_eq!(v["height"], 3);
    assert_eq!(v["width"], 4);
    assert_eq!(v["map"], "....".to_string() + ".##." + "....");
    assert_eq!(v["num_agents"], 2);
    assert_eq!(v["k"], NUM_CHANNELS);
    assert_eq!(v["features"], true);
    let enc: Vec<(String, u8)> = serde_json::from_value(v["action_encoding"].clone()).unwrap();
    let expected: Vec<(String, u8)> = action_encoding().into_iter().map(|(n, i)| (n.to_string(), i)).collect();
    assert_eq!(enc, expected);
}

#[test]
fn serve_answers_each_observation_and_stops_at_end() {
    let inst = instance();
    let init = serde_json::to_string(&EngineMessage::Init(init_message(&inst, &EpisodeConfig::default()))).unwrap();
    let obs = json!({"type": "obs", "t": 0, "agents": [
        {"id": 0, "r": 0, "c": 0, "gr": 2, "gc": 0},
        {"id": 1, "r": 2, "c": 3, "gr": 0, "gc": 3}
    ]});
    let end = json!({"type": "end", "t": 1, "success": false, "reason": "max_steps"});
    let input = format!("{init}\n{obs}\n{end}\n");
    let mut out = Vec::new();
    let mut policy = builtin_policy("greedy_gradient").unwrap();
    serve(policy.as_mut(), Cursor::new(input), &mut out).unwrap();
    let lines: Vec<Value> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["type"], "act");
    assert_eq!(lines[0]["t"], 0);
    assert_eq!(lines[0]["actions"], json!([2, 1]));
}

#[test]
fn features_on_the_wire_decode_to_a_tensor() {
    use base64::Engine as _;
    let inst = instance();
    let config = EpisodeConfig {
        send_features: true,
        ..EpisodeConfig::default()
    };
    struct Capture(Vec<Option<String>>);
    impl gridflow_core::sim::Policy for Capture {
        fn init(&mut self, _: &gridflow_core::sim::InitMessage) -> Result<(), gridflow_core::sim::SimError> {
            Ok(())
        }
        fn act(
            &mut self,
            obs: &gridflow_core::sim::ObsMessage,
        ) -> Result<gridflow_core::sim::ActMessage, gridflow_core::sim::SimError> {
            self.0.push(obs.features.clone());
            Ok(gridflow_core::sim::ActMessage::with_actions(obs.t, &[gridflow_core::grid::Action::Wait; 2]))
        }
    }
    let mut cap = Capture(Vec::new());
    let trace = run_episode(
        &inst,
        &mut cap,
        "capture",
        &EpisodeConfig {
            max_steps: Some(2),
            ..config
        },
    )
    .unwrap();
    assert_eq!(trace.summary.end_reason, EndReason::MaxSteps);
    let encoded = cap.0[0].as_ref().unwrap();
    let bytes = base64::engine::general_purpose::STANDARD.decode(encoded).unwrap();
    let tensor = FeatureTensor::from_le_bytes(3, 4, NUM_CHANNELS, &bytes).unwrap();
    assert_eq!(tensor.get(0, 0, 1), 1.0);
    assert_eq!(tensor.get(2, 3, 1), 2.0);
    assert_eq!(tensor.get(1, 1, 0), 1.0);
}

#[test]
fn traces_round_trip_through_jsonl() {
    let inst = instance();
    let mut p = builtin_policy("pibt_step").unwrap();
    let config = EpisodeConfig {
        mode: Mode::Lmapf,
        max_steps: Some(30),
        ..EpisodeConfig::default()
    };
    let trace = run_episode(&inst, p.as_mut(), "builtin:pibt_step", &config).unwrap();
    let mut buf = Vec::new();
    trace.write_jsonl(&mut buf).unwrap();
    assert_eq!(EpisodeTrace::read_jsonl(Cursor::new(buf)).unwrap(), trace);
    assert!(trace.summary.completions > 0);
}

#[test]
fn scripted_policy_that_stalls_hits_the_step_limit() {
    let inst = instance();
    let mut p = ScriptedPolicy { fields: Vec::new() };
    let trace = run_episode(&inst, &mut p, "scripted", &EpisodeConfig::default()).unwrap();
    assert!(!trace.summary.success);
    assert_eq!(trace.summary.end_reason, EndReason::MaxSteps);
    assert_eq!(trace.steps.len(), 4 * (3 + 4));
}
