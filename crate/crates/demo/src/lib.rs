//! Browser bindings over `sgfield`: render two analytic spheres in any
//! composite mode, audit their overlap, and decompose a scene graph.

use sgfield::exporter::audit_decomposition;
use sgfield::field::AnalyticScene;
use sgfield::graph::{decompose_prompts, parse_graph, plan_sequence, EdgePromptStyle};
use sgfield::render::{render_images, Camera, RenderSettings, RenderTag};
use sgfield::space::{Aabb, Sphere};
use sgfield::trainer::kind_label;
use wasm_bindgen::prelude::*;

/// A red and a blue sphere whose centers are `separation` apart along x.
pub fn spheres(separation: f64) -> AnalyticScene {
    let h = separation / 2.0;
    AnalyticScene::new(
        vec![Sphere::new([-h, 0.0, 0.0], 0.35), Sphere::new([h, 0.05, 0.0], 0.3)],
        vec![[0.85, 0.2, 0.15], [0.15, 0.3, 0.8]],
        80.0,
    )
}

pub fn parse_mode(mode: &str) -> Result<RenderTag, String> {
    match mode {
        "scene" => Ok(RenderTag::Scene),
        "object0" => Ok(RenderTag::Object { object: 0 }),
        "object1" => Ok(RenderTag::Object { object: 1 }),
        "edge" => Ok(RenderTag::edge(0, 1)),
        other => Err(format!("unknown mode {other:?}")),
    }
}

/// RGBA8 pixels, row-major from the top, of a `size`×`size` orbit view.
pub fn render_rgba(azimuth: f64, elevation: f64, separation: f64, mode: &str, size: usize, samples: usize) -> Result<Vec<u8>, String> {
    let tag = parse_mode(mode)?;
    if !(1..=512).contains(&size) || samples < 2 {
        return Err("size must be in 1..=512 and samples at least 2".into());
    }
    let camera = Camera::orbit(azimuth, elevation, 2.6, 40.0, size, size);
    let settings = RenderSettings {
        samples_per_ray: samples,
        background: [1.0; 3],
    };
    let img = render_images::<f64>(&spheres(separation), &camera, &Aabb::default(), &settings, &[tag]).remove(0);
    let mut out = Vec::with_capacity(size * size * 4);
    for px in img.rgb.chunks(3) {
        out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out.push(255);
    }
    Ok(out)
}

/// Monte-Carlo overlap and penetration histogram as JSON.
pub fn audit_json(separation: f64, samples: usize, seed: u64) -> String {
    let report = audit_decomposition(&spheres(separation), &Aabb::default(), samples, seed, None);
    serde_json::json!({
        "overlap_volume": report.pairs[0].overlap_volume,
        "overlap_fraction": report.pairs[0].overlap_fraction,
        "volumes": report.objects.iter().map(|o| o.occupancy_volume).collect::<Vec<_>>(),
        "histogram": report.penetration_histogram,
        "naive_penetration_loss": report.naive_penetration_loss,
    })
    .to_string()
}

/// Prompts and the first `steps` planned steps of a scene graph, as JSON.
pub fn decompose_json(graph: &str, bare: bool, steps: u64) -> Result<String, String> {
    let g = parse_graph(graph).map_err(|e| e.to_string())?;
    let style = if bare { EdgePromptStyle::BareNames } else { EdgePromptStyle::Full };
    let prompts = decompose_prompts(&g, style);
    let plan: Vec<String> = plan_sequence(&g, steps).iter().map(|p| kind_label(&p.kind)).collect();
    Ok(serde_json::json!({
        "objects": g.num_objects(),
        "edges": g.num_edges(),
        "prompts": prompts,
        "plan": plan,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn render(azimuth: f64, elevation: f64, separation: f64, mode: &str, size: usize, samples: usize) -> Result<Vec<u8>, JsValue> {
    render_rgba(azimuth, elevation, separation, mode, size, samples).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn audit(separation: f64, samples: usize, seed: u64) -> String {
    audit_json(separation, samples, seed)
}

#[wasm_bindgen]
pub fn decompose(graph: &str, bare: bool, steps: u64) -> Result<String, JsValue> {
    decompose_json(graph, bare, steps).map_err(|e| JsValue::from_str(&e))
}
