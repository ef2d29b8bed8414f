//! Browser bindings for sirlab. Every export returns a JSON string.

use serde_json::{json, Value};
use sirlab::bdconst::{bd_series, bd_series_terms, bd_value};
use sirlab::engine::{run_coupled, VariantId};
use sirlab::genealogy::{generate_with, GenerateOptions};
use sirlab::kernels::{prob_box, LazyWalkStep};
use sirlab::lattice::make_config;
use sirlab::rng::{derive_seed, purpose, seeded};
use sirlab::stats::{initial_sites, InitMode};
use wasm_bindgen::prelude::*;

/// Keeps a browser tab responsive.
const DEMO_EVENT_CAP: u64 = 3_000_000;
const PATH_POINTS: usize = 400;

fn fail(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Mass paths of the four coupled processes for one replicate, thinned to
/// at most `PATH_POINTS` points each.
#[wasm_bindgen]
pub fn coupled_paths(d: usize, n: u64, theta: f64, t_max: f64, x0: f64, seed: u64) -> Result<String, JsValue> {
    coupled_paths_json(d, n, theta, t_max, x0, seed).map(|v| v.to_string()).map_err(fail)
}

pub fn coupled_paths_json(d: usize, n: u64, theta: f64, t_max: f64, x0: f64, seed: u64) -> Result<Value, String> {
    let cfg = make_config(d, n, theta).map_err(|e| e.to_string())?;
    let init = initial_sites(&cfg, x0, InitMode::Box, &mut seeded(derive_seed(seed, 0, purpose::INITIAL_SITES)))
        .map_err(|e| e.to_string())?;
    let log = generate_with(
        &cfg,
        &init,
        t_max,
        derive_seed(seed, 0, purpose::GENEALOGY),
        GenerateOptions { event_cap: DEMO_EVENT_CAP },
    )
    .map_err(|e| e.to_string())?;
    let run = run_coupled(&log, &VariantId::ALL, &[], &[]).map_err(|e| e.to_string())?;
    let mut variants = serde_json::Map::new();
    for (id, traj) in &run.trajectories {
        let path = traj.mass_path();
        let stride = path.len().div_ceil(PATH_POINTS).max(1);
        let mut pts: Vec<[f64; 2]> = path.iter().step_by(stride).map(|&(t, m)| [t, m]).collect();
        let last = traj.mass_at(t_max).map_err(|e| e.to_string())?;
        pts.push([t_max, last]);
        let end = traj.points.last().expect("initial point");
        variants.insert(
            id.name().to_string(),
            json!({ "path": pts, "blocked": end.blocked, "visited": end.visited }),
        );
    }
    Ok(json!({
        "config": cfg.echo(),
        "events": log.events.len(),
        "variants": variants,
    }))
}

/// The certified bracket for `b_d` on a ladder of term counts, plus the converged value.
#[wasm_bindgen]
pub fn bd_bracket(d: usize, tol: f64) -> Result<String, JsValue> {
    bd_bracket_json(d, tol).map(|v| v.to_string()).map_err(fail)
}

pub fn bd_bracket_json(d: usize, tol: f64) -> Result<Value, String> {
    if d == 4 {
        return Ok(json!({ "d": 4, "value": bd_value(4).map_err(|e| e.to_string())?, "ladder": [] }));
    }
    let ladder: Vec<Value> = [60usize, 120, 240, 480, 960, 1920]
        .iter()
        .map(|&k| {
            bd_series_terms(d, k)
                .map(|s| json!({ "terms": s.terms, "partial": s.partial_sum, "lower": s.lower, "upper": s.upper }))
                .map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    let s = bd_series(d, tol).map_err(|e| e.to_string())?;
    Ok(json!({ "d": d, "value": s.value, "tail_bound": s.tail_bound, "terms": s.terms, "ladder": ladder }))
}

/// `(1+n)^{d/2} P(V_n ∈ [-1,1]^d)` for the continuum lazy walk on `n = 0..=n_max`,
/// with the Gaussian prediction `2^d (2π/6)^{-d/2} ((1+n)/n)^{d/2}`.
#[wasm_bindgen]
pub fn box_curve(d: usize, n_max: u64, samples: u64, seed: u64) -> Result<String, JsValue> {
    box_curve_json(d, n_max, samples, seed).map(|v| v.to_string()).map_err(fail)
}

pub fn box_curve_json(d: usize, n_max: u64, samples: u64, seed: u64) -> Result<Value, String> {
    let step = LazyWalkStep::Continuum { d };
    let mut rng = seeded(derive_seed(seed, 0, purpose::KERNEL));
    let x = vec![0.0; d];
    let df = d as f64;
    let gauss = 2f64.powf(df) * (2.0 * std::f64::consts::PI / 6.0).powf(-df / 2.0);
    let rows: Vec<Value> = (0..=n_max)
        .map(|n| {
            let (p, se) = prob_box(&step, n, &x, samples, &mut rng).map_err(|e| e.to_string())?;
            let scale = (1.0 + n as f64).powf(df / 2.0);
            let clt = if n == 0 { Value::Null } else { json!(gauss * ((1.0 + n as f64) / n as f64).powf(df / 2.0)) };
            Ok(json!({ "n": n, "p": p, "se": se, "scaled": p * scale, "scaled_se": se * scale, "gaussian": clt }))
        })
        .collect::<Result<_, String>>()?;
    Ok(json!({ "d": d, "samples": samples, "rows": rows }))
}
