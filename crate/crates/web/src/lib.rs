//! Browser bindings. Each export returns a JSON string; the plain functions
//! behind them are usable (and tested) natively.

use oirl::discriminator::{cross_entropy, d_prob, extract_reward, Source};
use oirl::grid::{build_flower_maze, build_lava_crossing, compile_grid, sink, Side};
use oirl::mdp::{TabularMdp, Transition};
use oirl::options::{discounted_option_return, env_reward_table, option_kernel, TabularOptions};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn side(name: &str) -> Result<Side, String> {
    match name {
        "m" | "middle" => Ok(Side::Middle),
        "r" | "right" => Ok(Side::Right),
        "t" | "top" => Ok(Side::Top),
        other => Err(format!("unknown side {other:?}")),
    }
}

/// Grid layout, expert state values at step 0 and the greedy path from the
/// start. `kind` is `lava_crossing` or `flower_maze`.
pub fn grid_field(kind: &str, side_name: &str, size: usize, slip: f64) -> Result<Value, String> {
    let side = side(side_name)?;
    let mut spec = match kind {
        "lava_crossing" => build_lava_crossing(side, size),
        "flower_maze" => build_flower_maze(side, size),
        other => return Err(format!("unknown grid {other:?}")),
    }
    .map_err(|e| e.to_string())?;
    spec.slip_prob = slip;
    let grid = compile_grid(&spec).map_err(|e| e.to_string())?;
    let values = grid.mdp.value_iteration(1e-10, 100_000).map_err(|e| e.to_string())?;

    let mut cells = Vec::new();
    let mut field = Vec::new();
    for y in 0..spec.height {
        for x in 0..spec.width {
            let c = (x, y);
            let kind = if spec.walls.contains(&c) {
                "wall"
            } else if spec.lava.contains(&c) {
                "lava"
            } else if spec.goal.contains(&c) {
                "goal"
            } else {
                "floor"
            };
            cells.push(kind);
            let open = kind == "floor";
            field.push(if open { Some(values.v[grid.state(0, c)]) } else { None });
        }
    }

    // Follow greedy actions along the most likely successor.
    let mut path = vec![[spec.start.0, spec.start.1]];
    let mut s = grid.state(0, spec.start);
    let mut outcome = "timeout";
    for _ in 0..spec.n_max {
        let a = values.greedy(s);
        let next = grid
            .mdp
            .row(s, a)
            .iter()
            .max_by(|x, y| x.prob.total_cmp(&y.prob))
            .map(|t| t.next)
            .ok_or("empty transition row")?;
        match grid.decode(next) {
            Some((_, c)) => path.push([c.0, c.1]),
            None => {
                outcome = if next == grid.sink(sink::GOAL) {
                    "goal"
                } else if next == grid.sink(sink::LAVA) {
                    "lava"
                } else {
                    "timeout"
                };
                if outcome == "goal" {
                    let g = spec.goal[0];
                    path.push([g.0, g.1]);
                }
                break;
            }
        }
        s = next;
    }
    let start_value = values.v[grid.state(0, spec.start)];
    Ok(json!({
        "width": spec.width,
        "height": spec.height,
        "cells": cells,
        "values": field,
        "path": path,
        "outcome": outcome,
        "start_value": start_value,
        "shortest_path": spec.shortest_path(),
    }))
}

/// `D`, the extracted reward and both cross-entropies as functions of `f`
/// for a fixed action probability.
pub fn discriminator_curve(pi: f64, points: usize) -> Result<Value, String> {
    if !(pi > 0.0 && pi <= 1.0) {
        return Err("pi must lie in (0, 1]".into());
    }
    let n = points.max(2);
    let log_pi = pi.ln();
    let f: Vec<f64> = (0..n)
        .map(|i| log_pi + 6.0 * (2.0 * i as f64 / (n - 1) as f64 - 1.0))
        .collect();
    Ok(json!({
        "log_pi": log_pi,
        "f": f,
        "d": f.iter().map(|&x| d_prob(log_pi, x)).collect::<Vec<_>>(),
        "reward": f.iter().map(|&x| extract_reward(log_pi, x)).collect::<Vec<_>>(),
        "loss_expert": f.iter().map(|&x| cross_entropy(Source::Expert, log_pi, x).0).collect::<Vec<_>>(),
        "loss_novice": f.iter().map(|&x| cross_entropy(Source::Novice, log_pi, x).0).collect::<Vec<_>>(),
    }))
}

/// A corridor of `n` cells with reward 1 for acting in the right end and
/// two options, "go left" and "go right", each followed with probability
/// `1 - noise`. Returns `R(s, ω)`, `R_Ω(s)` and the option kernel out of the
/// middle cell under the right-going option.
pub fn option_chain(n: usize, beta: f64, gamma: f64, noise: f64) -> Result<Value, String> {
    if n < 2 {
        return Err("corridor needs at least two cells".into());
    }
    let (beta, noise) = (beta.clamp(0.0, 1.0), noise.clamp(0.0, 1.0));
    let mut rows = Vec::new();
    for s in 0..n {
        let reward = if s == n - 1 { 1.0 } else { 0.0 };
        for a in 0..2 {
            let next = if a == 0 { s.saturating_sub(1) } else { (s + 1).min(n - 1) };
            rows.push(vec![Transition { next, prob: 1.0, reward }]);
        }
    }
    let mdp = TabularMdp::new(n, 2, rows, gamma, vec![false; n], vec![1.0 / n as f64; n], 1.0)
        .map_err(|e| e.to_string())?;
    let mut opts = TabularOptions::uniform(n, 2, 2, beta);
    for s in 0..n {
        for w in 0..2 {
            for a in 0..2 {
                opts.actions[(s * 2 + w) * 2 + a] = if a == w { 1.0 - noise / 2.0 } else { noise / 2.0 };
            }
        }
    }
    let r = discounted_option_return(&mdp, &opts, &env_reward_table(&mdp, 2)).map_err(|e| e.to_string())?;
    let mid = n / 2;
    let kernel = option_kernel(&mdp, &opts, mid, 1);
    Ok(json!({
        "states": n,
        "left": (0..n).map(|s| r.sw(s, 0)).collect::<Vec<_>>(),
        "right": (0..n).map(|s| r.sw(s, 1)).collect::<Vec<_>>(),
        "master": r.by_state,
        "kernel_from": mid,
        "kernel": (0..n).map(|s| [kernel[s * 2], kernel[s * 2 + 1]]).collect::<Vec<_>>(),
        "iterations": r.iterations,
    }))
}

fn to_js(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = gridField)]
pub fn grid_field_js(kind: &str, side: &str, size: usize, slip: f64) -> Result<String, JsError> {
    to_js(grid_field(kind, side, size, slip))
}

#[wasm_bindgen(js_name = discriminatorCurve)]
pub fn discriminator_curve_js(pi: f64, points: usize) -> Result<String, JsError> {
    to_js(discriminator_curve(pi, points))
}

#[wasm_bindgen(js_name = optionChain)]
pub fn option_chain_js(n: usize, beta: f64, gamma: f64, noise: f64) -> Result<String, JsError> {
    to_js(option_chain(n, beta, gamma, noise))
}
