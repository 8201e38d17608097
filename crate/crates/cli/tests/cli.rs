use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crosswalk_cli::main_with_args;

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["crosswalk"];
    argv.extend_from_slice(args);
    let code = main_with_args(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                files.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    files
}

#[test]
fn classify_prints_level() {
    let (code, out, _) = run(&["rules", "--classify", "car=yes,light=green,signal=go,ped=yes"]);
    assert_eq!((code, out.as_str()), (0, "-2\n"));
    let (code, out, _) = run(&["rules", "--classify", "car=no,light=green,signal=go,ped=yes"]);
    assert_eq!((code, out.as_str()), (0, "2\n"));
}

#[test]
fn enumerate_counts_all_combinations() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("rules.csv");
    let (code, out, _) = run(&["rules", "--enumerate", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.starts_with("combinations: 108\n"), "{out}");
    assert!(out.contains("conservative fallback: 16"), "{out}");
    assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 109);
}

#[test]
fn exit_codes_and_json_errors() {
    let (code, _, err) = run(&["frobnicate"]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"), "{err}");

    let (code, _, err) = run(&["--json", "rules", "--classify", "car=maybe,light=red,signal=go,ped=no"]);
    assert_eq!(code, 1);
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"]["kind"], "validation");
    assert_eq!(v["error"]["exit_code"], 1);

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let (code, _, err) = run(&["--json", "metrics", "--records", missing.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(serde_json::from_str::<serde_json::Value>(err.trim()).is_ok(), "{err}");

    let bad = dir.path().join("manifest.json");
    fs::write(&bad, "{").unwrap();
    let (code, _, _) = run(&["compose", "--manifest", bad.to_str().unwrap(), "--item", "x", "--out", "x.png"]);
    assert_eq!(code, 1);

    // output directory blocked by a regular file: valid request, failed work
    let blocker = dir.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let (code, _, err) = run(&["--json", "synth", "--n", "1", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"]["kind"], "runtime");

    let (code, out, _) = run(&["--version"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("crosswalk"));
}

#[test]
fn prompt_text_matches_library() {
    let (code, out, _) = run(&["prompt", "--cot", "--hint"]);
    assert_eq!(code, 0);
    let cfg = crosswalk_core::prompt::PromptConfig {
        include_cot: true,
        structured_output_hint: true,
        ..Default::default()
    };
    assert_eq!(out, crosswalk_core::prompt::prompt_text(&cfg));
}

#[test]
fn synth_twice_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let (code, _, err) = run(&["synth", "--n", "10", "--seed", "7", "--out", d.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), tb.len());
    assert!(ta.len() > 10);
    assert!(ta == tb);
}

#[test]
fn mock_eval_then_metrics_and_compose() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out_dir = dir.path().join("eval");
    let (code, _, err) = run(&[
        "synth", "--n", "6", "--seed", "3", "--mix=-2:1,-1:1,0:1,1:1,2:1", "--out", data.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let manifest = data.join("manifest.json");
    let (code, out, err) = run(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--backend",
        "mock",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let md = fs::read_to_string(out_dir.join("report.md")).unwrap();
    for name in ["Baseline", "+ CoT", "+ bbx", "+ mask", "+ flow"] {
        assert!(md.contains(&format!("| {name} | 1.0000 | 1.0000 |")), "{md}");
    }
    assert!(out.contains("| Baseline | 1.0000 | 1.0000 |"));

    let records = out_dir.join("records.jsonl");
    let (code, recomputed, _) = run(&["metrics", "--records", records.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.starts_with(&recomputed), "{out}\n---\n{recomputed}");

    // CLI artifacts equal the library output byte for byte
    let png = dir.path().join("flow.png");
    let (code, _, err) = run(&[
        "overlay", "--kind", "flow", "--manifest", manifest.to_str().unwrap(), "--item", "item-0000", "--out",
        png.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let m = crosswalk_core::dataset::load_manifest(&manifest).unwrap();
    let lib = crosswalk_core::pipeline::render_item_variant(
        &m,
        m.item("item-0000").unwrap(),
        crosswalk_core::vision::Variant::Flow,
        &Default::default(),
    )
    .unwrap();
    assert_eq!(fs::read(&png).unwrap(), lib.image.raster.encode_png().unwrap());
}
