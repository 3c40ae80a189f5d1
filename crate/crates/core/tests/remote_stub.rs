//! Remote localizer and reasoner driven end to end against a loopback stub.

mod common;

use std::sync::Arc;

use graspbench_core::episode::{run_episode, EpisodeSettings, Localizer, SceneAssets, StopSetting};
use graspbench_core::localization::remote_localize;
use graspbench_core::prompting::{render_marks, MarkStyle};
use graspbench_core::reasoning::{DecisionContext, ReasonError, Reasoner, RemoteReasoner};
use graspbench_core::remote::{EndpointConfig, RemoteClient, RemoteError, StubServer};
use graspbench_core::ObjectId;
use serde_json::{json, Value};

fn client(url: String) -> Arc<RemoteClient> {
    let mut cfg = EndpointConfig::new(url);
    cfg.model = Some("stub-model".into());
    cfg.retry_backoff_ms = 1;
    cfg.timeout_secs = 5.0;
    Arc::new(RemoteClient::new(cfg).unwrap())
}

fn chat(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

#[test]
fn localize_then_decide_over_http() {
    let scene = Arc::new(common::strip(&["t", "a", "b"], &[(2, 1, 0.3), (1, 0, 0.3)]));
    let assets = SceneAssets::load(&scene);
    let points =
        StubServer::start(|_, _| (200, r#"<point x="9.5" y="1.5">b</point> <point x="-2" y="1.5">t</point>"#.into()))
            .unwrap();
    let pc = client(points.url("/point"));
    let mut log = Vec::new();
    let loc = remote_localize(&graspbench_core::prompting::encode_png(&assets.rgb), 12, 5, &pc, &mut log).unwrap();
    assert_eq!(loc.keypoints.len(), 2);
    assert_eq!(loc.clamped, vec![1]);
    assert_eq!(loc.keypoints[0].point.u, 0.0);
    let req: Value = serde_json::from_str(&points.requests()[0].body).unwrap();
    assert_eq!(req["model"], "stub-model");
    assert!(req["prompt"].as_str().unwrap().contains("point"));
    assert!(!req["image"].as_str().unwrap().is_empty());

    let reasoner_srv = StubServer::start(|_, _| {
        (200, chat("Label 2 sits on top.\n{\"id\": 2, \"class\": \"b\", \"is_target\": false}"))
    })
    .unwrap();
    let mut r = RemoteReasoner::new(client(reasoner_srv.url("/chat")));
    let (annotated, registry) =
        render_marks(&assets.rgb, &loc.keypoints, &MarkStyle { radius: 1, ..Default::default() }).unwrap();
    let ctx = DecisionContext {
        annotated: &annotated,
        registry: &registry,
        instruction: "the t",
        history: &[],
        ground_truth: None,
    };
    let d = r.decide(&ctx).unwrap();
    assert_eq!((d.mark_id, d.class_name.as_str(), d.is_target), (2, "b", false));
    assert_eq!(r.take_exchanges().len(), 1);
    let body: Value = serde_json::from_str(&reasoner_srv.requests()[0].body).unwrap();
    assert_eq!(body["temperature"], 0.0);
    let content = &body["messages"][0]["content"];
    assert_eq!(content[0]["type"], "text");
    assert!(content[0]["text"].as_str().unwrap().contains("\"the t\""));
    assert!(content[1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
}

#[test]
fn hallucinated_mark_and_garbage_replies() {
    let scene = Arc::new(common::strip(&["t", "a"], &[]));
    let assets = SceneAssets::load(&scene);
    let kps = graspbench_core::localization::gt_localize(&graspbench_core::SceneState::new(scene.clone())).unwrap();
    let (img, reg) = render_marks(&assets.rgb, &kps, &MarkStyle { radius: 1, ..Default::default() }).unwrap();
    let ctx = DecisionContext { annotated: &img, registry: &reg, instruction: "t", history: &[], ground_truth: None };

    let srv = StubServer::start(|_, _| (200, chat(r#"{"id": 7, "class": "t", "is_target": true}"#))).unwrap();
    let err = RemoteReasoner::new(client(srv.url("/"))).decide(&ctx).unwrap_err();
    assert!(matches!(
        err,
        ReasonError::Prompt(graspbench_core::prompting::PromptError::UnknownMark { mark_id: 7, count: 2 })
    ));

    let srv = StubServer::start(|_, _| (200, "{\"nope\": 1}".into())).unwrap();
    let err = RemoteReasoner::new(client(srv.url("/"))).decide(&ctx).unwrap_err();
    assert!(matches!(err, ReasonError::Remote(RemoteError::Protocol { attempts: 3, .. })));
    assert_eq!(srv.requests().len(), 3);
}

#[test]
fn remote_pipeline_episode() {
    let scene = Arc::new(common::strip(&["t", "a", "b"], &[(2, 1, 0.3), (1, 0, 0.3)]));
    let scenario = common::scenario(&scene, 0, &["the t"]);
    let assets = SceneAssets::load(&scene);
    // the pointing stub reports every object still present, the chat stub
    // always names the top of the stack by class
    let centers = [(1.5, 1.5), (5.5, 1.5), (9.5, 1.5)];
    let removed = Arc::new(std::sync::Mutex::new(0usize));
    let removed_p = removed.clone();
    let points = StubServer::start(move |_, _| {
        let k = *removed_p.lock().unwrap();
        let pts: Vec<[f64; 2]> = centers[..3 - k].iter().map(|c| [c.0, c.1]).collect();
        (200, json!({ "points": pts }).to_string())
    })
    .unwrap();
    let removed_c = removed.clone();
    let chat_srv = StubServer::start(move |_, _| {
        let mut k = removed_c.lock().unwrap();
        let (mark, class, target) = [(3, "b", false), (2, "a", false), (1, "t", true)][*k];
        *k += 1;
        (200, chat(&json!({"id": mark, "class": class, "is_target": target}).to_string()))
    })
    .unwrap();
    let mut reasoner = RemoteReasoner::new(client(chat_srv.url("/v1/chat/completions")));
    let settings = EpisodeSettings { stop: StopSetting::Spm, ..Default::default() };
    let rec = run_episode(
        &scenario,
        0,
        &scene,
        &assets,
        &Localizer::Remote(client(points.url("/point"))),
        &mut reasoner,
        &settings,
        3,
    )
    .unwrap();
    assert!(rec.success, "{rec:?}");
    assert_eq!(rec.p, 3);
    let grasped: Vec<_> = rec.steps.iter().map(|s| s.grasped_id).collect();
    assert_eq!(grasped, vec![Some(ObjectId(2)), Some(ObjectId(1)), Some(ObjectId(0))]);
    assert!(rec.steps.iter().all(|s| s.exchanges.len() == 2 && s.localization.ap == 1.0));
}
