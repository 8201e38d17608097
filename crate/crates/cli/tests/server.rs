use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crosswalk_cli::server::{start, RunningServer, ServeConfig};
use crosswalk_core::dataset::{load_manifest, save_manifest};
use crosswalk_core::synth::{generate_dataset, SynthConfig};
use crosswalk_core::vision::Viewpoint;

fn dataset(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    generate_dataset(&data, &SynthConfig::new(3, 11)).unwrap();
    // strip the second front frame from one item so flow is unavailable
    let path = data.join("manifest.json");
    let mut m = load_manifest(&path).unwrap();
    m.item_mut("item-0002").unwrap().images.get_mut(&Viewpoint::Front).unwrap().truncate(1);
    save_manifest(&m, &path).unwrap();
    path
}

fn boot(manifest: &Path, ui: Option<PathBuf>) -> (RunningServer, String) {
    let s = start(&ServeConfig {
        host: "127.0.0.1".into(),
        port: 0,
        manifest: manifest.to_path_buf(),
        ui_dir: ui,
        threads: 2,
        render: Default::default(),
    })
    .unwrap();
    let base = format!("http://{}", s.addr);
    (s, base)
}

fn get(url: &str) -> (u16, Value) {
    match ureq::get(url).call() {
        Ok(r) => (r.status(), r.into_json().unwrap()),
        Err(ureq::Error::Status(code, r)) => (code, r.into_json().unwrap()),
        Err(e) => panic!("{e}"),
    }
}

fn post(url: &str, body: &Value) -> (u16, Value) {
    match ureq::post(url).send_json(body.clone()) {
        Ok(r) => (r.status(), r.into_json().unwrap()),
        Err(ureq::Error::Status(code, r)) => (code, r.into_json().unwrap()),
        Err(e) => panic!("{e}"),
    }
}

fn attrs(car: &str, light: &str, signal: &str, ped: &str) -> Value {
    json!({"moving_car": car, "traffic_light": light, "pedestrian_signal": signal, "crossing_pedestrian": ped})
}

#[test]
fn annotation_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let (server, base) = boot(&manifest, None);

    let (code, items) = get(&format!("{base}/api/items"));
    assert_eq!(code, 200);
    assert_eq!(items["items"].as_array().unwrap().len(), 3);
    assert_eq!(items["items"][2]["variants"]["flow"], false);

    let url = format!("{base}/api/items/item-0000/annotations");
    let (code, r) = post(&url, &json!({"annotator_id": "a1", "attributes": attrs("no", "green", "go", "yes")}));
    assert_eq!(code, 200, "{r}");
    assert_eq!(r["derived_score"]["level"], 2);
    assert_eq!(r["consensus"]["score"]["level"], 2);
    let rev = r["revision"].as_u64().unwrap();

    // identical repeat: same state, no revision bump
    let (code, again) = post(&url, &json!({"annotator_id": "a1", "attributes": attrs("no", "green", "go", "yes")}));
    assert_eq!(code, 200);
    assert_eq!(again["changed"], false);
    assert_eq!(again["revision"].as_u64().unwrap(), rev);
    let (_, item) = get(&format!("{base}/api/items/item-0000"));
    assert_eq!(item["annotations"].as_array().unwrap().len(), 1);

    let (code, r) = post(&url, &json!({"annotator_id": "a2", "score": 1, "base_revision": rev + 5}));
    assert_eq!(code, 409, "{r}");
    assert_eq!(r["retryable"], true);

    let (code, r) = post(&url, &json!({"annotator_id": "a2", "attributes": {"moving_car": "perhaps"}}));
    assert_eq!(code, 422);
    assert!(r["pointer"].as_str().unwrap().starts_with("/attributes"), "{r}");
    let (code, r) = post(&url, &json!({"annotator_id": "a2", "score": 7}));
    assert_eq!(code, 422);
    assert_eq!(r["pointer"], "/score");
    let (code, _) = post(&format!("{base}/api/items/nope/annotations"), &json!({"annotator_id": "a", "score": 0}));
    assert_eq!(code, 404);

    let (_, a) = get(&format!("{base}/api/agreement"));
    assert!(a["kappa"].is_null());
    assert_eq!(a["status"], "insufficient data");

    // three annotators agree on every item
    for id in ["item-0000", "item-0001", "item-0002"] {
        for (who, level) in [("a1", -1), ("a2", -1), ("a3", -1)] {
            let level = if id == "item-0001" { 0 } else { level };
            let (code, r) = post(&format!("{base}/api/items/{id}/annotations"), &json!({"annotator_id": who, "score": level}));
            assert_eq!(code, 200, "{r}");
        }
    }
    let (_, a) = get(&format!("{base}/api/agreement"));
    assert_eq!(a["kappa"], 1.0, "{a}");
    assert_eq!(a["raters"], 3);

    let (_, c) = get(&format!("{base}/api/items/item-0001/consensus"));
    assert_eq!(c["consensus"]["score"]["level"], 0);
    assert_eq!(c["consensus"]["method"], "majority");

    let snapshot: Vec<Value> = ["/api/items", "/api/items/item-0000", "/api/items/item-0001/consensus", "/api/agreement"]
        .iter()
        .map(|p| get(&format!("{base}{p}")).1)
        .collect();
    server.shutdown();

    let (server, base) = boot(&manifest, None);
    let after: Vec<Value> = ["/api/items", "/api/items/item-0000", "/api/items/item-0001/consensus", "/api/agreement"]
        .iter()
        .map(|p| get(&format!("{base}{p}")).1)
        .collect();
    assert_eq!(snapshot, after);
    server.shutdown();
}

#[test]
fn images_rules_and_routing() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<html>ui</html>").unwrap();
    let (server, base) = boot(&manifest, Some(ui));

    let r = ureq::get(&format!("{base}/api/items/item-0000/image?variant=flow")).call().unwrap();
    assert_eq!(r.content_type(), "image/png");
    let mut png = Vec::new();
    std::io::Read::read_to_end(&mut r.into_reader(), &mut png).unwrap();
    assert_eq!(&png[1..4], b"PNG");
    // cached response is byte-identical
    let mut again = Vec::new();
    std::io::Read::read_to_end(
        &mut ureq::get(&format!("{base}/api/items/item-0000/image?variant=flow")).call().unwrap().into_reader(),
        &mut again,
    )
    .unwrap();
    assert_eq!(png, again);

    let (code, r) = get(&format!("{base}/api/items/item-0002/image?variant=flow"));
    assert_eq!(code, 422);
    assert!(r["reason"].as_str().unwrap().contains("frame"), "{r}");
    let (code, _) = get(&format!("{base}/api/items/item-0000/image?variant=sparkles"));
    assert_eq!(code, 422);
    let (code, _) = get(&format!("{base}/api/items/nope/image"));
    assert_eq!(code, 404);

    let (code, r) = get(&format!("{base}/api/rules/classify?car=yes&light=green&signal=go&ped=yes"));
    assert_eq!(code, 200);
    assert_eq!(r["level"], -2);
    assert_eq!(r["fallback"], false);
    let (_, r) = get(&format!("{base}/api/rules/classify?car=no&light=red&signal=not_visible&ped=no"));
    assert_eq!((r["level"].as_i64(), r["fallback"].as_bool()), (Some(-1), Some(true)));
    let (code, r) = get(&format!("{base}/api/rules/classify?car=no&light=red"));
    assert_eq!(code, 422);
    assert_eq!(r["pointer"], "signal");

    let (code, spec) = get(&format!("{base}/api/spec"));
    assert_eq!(code, 200);
    assert_eq!(spec["openapi"], "3.0.3");

    let (code, _) = get(&format!("{base}/api/nothing"));
    assert_eq!(code, 404);
    let code = match ureq::delete(&format!("{base}/api/items")).call() {
        Err(ureq::Error::Status(c, _)) => c,
        other => panic!("{other:?}"),
    };
    assert_eq!(code, 405);

    let body = ureq::get(&format!("{base}/")).call().unwrap().into_string().unwrap();
    assert_eq!(body, "<html>ui</html>");
    let code = match ureq::get(&format!("{base}/../Cargo.toml")).call() {
        Err(ureq::Error::Status(c, _)) => c,
        Ok(r) => panic!("served {:?}", r.into_string()),
        Err(e) => panic!("{e}"),
    };
    assert_eq!(code, 404);
    server.shutdown();
}
