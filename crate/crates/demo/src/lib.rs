//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers or strings and returns a JSON string, so
//! the page needs no generated type glue. Failures come back as
//! `{"error": "..."}` instead of exceptions.

use puelab::corpus::PatternSet;
use puelab::efficiency::{flops_per_method, REFERENCE_DP_RATIO, REFERENCE_LORA_RATIO};
use puelab::finetune::{lr_schedule, Method};
use puelab::model::ModelConfig;
use puelab::tokenize::align_spans_to_mask;
use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

/// Most points returned by [`lr_curve`]; longer schedules are subsampled.
pub const MAX_CURVE_POINTS: u64 = 600;

fn error(msg: impl std::fmt::Display) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

fn render(result: Result<Value, String>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => error(e),
    }
}

/// Learning rate at every step of a run of `epochs * steps_per_epoch`
/// updates: `{"steps": [...], "lr": [...], "total_steps": n}`.
#[wasm_bindgen]
pub fn lr_curve(base_lr: f64, warmup: u32, epochs: u32, steps_per_epoch: u32) -> String {
    render((|| {
        if !(base_lr > 0.0) || epochs == 0 || steps_per_epoch == 0 {
            return Err("learning rate, epochs and steps per epoch must be positive".to_string());
        }
        let total = epochs as u64 * steps_per_epoch as u64;
        let stride = total.div_ceil(MAX_CURVE_POINTS).max(1);
        let mut steps: Vec<u64> = (0..=total).step_by(stride as usize).collect();
        if steps.last() != Some(&total) {
            steps.push(total);
        }
        let lr: Vec<f64> = steps.iter().map(|&s| lr_schedule(s, total, base_lr, warmup as u64)).collect();
        Ok(json!({ "steps": steps, "lr": lr, "total_steps": total }))
    })())
}

/// Per-step compute and resident memory of the three methods for a model
/// shape, a LoRA rank on all four attention projections, a batch size and a
/// sequence length.
#[wasm_bindgen]
pub fn cost_model(d_model: u32, n_layers: u32, n_heads: u32, d_ff: u32, rank: u32, batch: u32, seq_len: u32) -> String {
    render((|| {
        let config = ModelConfig {
            d_model: d_model as usize,
            n_layers: n_layers as usize,
            n_heads: n_heads as usize,
            d_ff: d_ff as usize,
            ..ModelConfig::default()
        };
        config.validate().map_err(|e| e.to_string())?;
        if rank == 0 || rank > d_model {
            return Err(format!("rank must lie in 1..={d_model}"));
        }
        if batch == 0 || seq_len == 0 {
            return Err("batch size and sequence length must be positive".into());
        }
        let n = config.n_params() as f64;
        let n_adapter = (n_layers as usize * 4 * 2 * d_model as usize * rank as usize) as f64;
        let tokens = batch as f64 * seq_len as f64;
        let methods: Vec<Value> = [Method::Fft, Method::Dp, Method::Lora]
            .into_iter()
            .map(|m| {
                let est = flops_per_method(m, tokens, n, n_adapter, batch as usize);
                json!({
                    "method": m.as_str(),
                    "flops_per_step": est.flops_per_step,
                    "memory_values": est.memory_values,
                    "relative_to_fft": est.relative_to_fft,
                })
            })
            .collect();
        Ok(json!({
            "n_params": n,
            "n_adapter": n_adapter,
            "adapter_fraction": n_adapter / n,
            "tokens_per_step": tokens,
            "methods": methods,
            "reference": { "dp": REFERENCE_DP_RATIO, "lora": REFERENCE_LORA_RATIO },
        }))
    })())
}

/// Splits `text` into plain and sensitive segments with the default rules:
/// `{"segments": [{"text", "kind"}...], "n_targets", "n_sensitive"}`.
/// Token counts follow the byte tokenizer with a leading BOS.
#[wasm_bindgen]
pub fn annotate(text: &str) -> String {
    render((|| {
        let annotator = PatternSet::default().compile().map_err(|e| e.to_string())?;
        let spans = annotator.annotate(text);
        let mut segments = Vec::new();
        let mut at = 0;
        for s in &spans {
            if s.start > at {
                segments.push(json!({ "text": &text[at..s.start], "kind": null }));
            }
            segments.push(json!({ "text": &text[s.start..s.end], "kind": s.kind.as_str() }));
            at = s.end;
        }
        if at < text.len() {
            segments.push(json!({ "text": &text[at..], "kind": null }));
        }
        let mask = align_spans_to_mask(text, &spans).map_err(|e| e.to_string())?;
        Ok(json!({
            "segments": segments,
            "n_targets": mask.len() - 1,
            "n_sensitive": mask[1..].iter().filter(|&&m| m).count(),
        }))
    })())
}
