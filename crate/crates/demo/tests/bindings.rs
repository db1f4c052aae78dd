use sgfield_demo::{audit_json, decompose_json, render_rgba};

#[test]
fn renders_opaque_rgba() {
    let px = render_rgba(20.0, 10.0, 0.8, "scene", 16, 24).unwrap();
    assert_eq!(px.len(), 16 * 16 * 4);
    assert!(px.chunks(4).all(|p| p[3] == 255));
    // the center of the view sees a sphere, the corner sees the white background
    let center = &px[(8 * 16 + 8) * 4..][..3];
    assert!(center.iter().any(|&c| c < 240), "{center:?}");
    assert_eq!(&px[..3], &[255, 255, 255]);
}

#[test]
fn object_modes_differ() {
    let a = render_rgba(0.0, 0.0, 0.9, "object0", 12, 24).unwrap();
    let b = render_rgba(0.0, 0.0, 0.9, "object1", 12, 24).unwrap();
    assert_ne!(a, b);
    assert!(render_rgba(0.0, 0.0, 0.9, "object7", 12, 24).is_err());
    assert!(render_rgba(0.0, 0.0, 0.9, "scene", 0, 24).is_err());
}

#[test]
fn overlap_vanishes_when_apart() {
    let near: serde_json::Value = serde_json::from_str(&audit_json(0.3, 20_000, 1)).unwrap();
    let far: serde_json::Value = serde_json::from_str(&audit_json(1.2, 20_000, 1)).unwrap();
    assert!(near["overlap_volume"].as_f64().unwrap() > 0.01);
    assert_eq!(far["overlap_volume"].as_f64().unwrap(), 0.0);
}

#[test]
fn decomposes_graphs() {
    let g = r#"{"global_prompt": "a cat on a mat", "nodes": [{"name": "cat"}, {"name": "mat"}], "edges": [{"subject": 0, "object": 1, "relation": "on"}]}"#;
    let v: serde_json::Value = serde_json::from_str(&decompose_json(g, true, 3).unwrap()).unwrap();
    assert_eq!(v["plan"], serde_json::json!(["object0+edge0", "object1+edge0", "global"]));
    assert_eq!(v["prompts"]["edges"][0]["prompt"], "cat on mat");
    assert!(decompose_json("{", false, 3).is_err());
}
