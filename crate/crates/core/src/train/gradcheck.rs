use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{Component, Model, ModelConfig, ModelParameters};
use crate::text::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Relative finite-difference step, scaled by `max(1, |θ|)`.
    pub step: f64,
    /// Maximum relative error for a pass.
    pub tolerance: f64,
    /// Absolute differences at or below this always pass.
    pub abs_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-3,
            abs_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub component: Component,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinates left out because the perturbation changed which regions
    /// feed the score.
    pub skipped: usize,
    /// `tensor[index]` of the largest relative error.
    pub worst: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub components: Vec<ComponentReport>,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `objective` for every
/// scalar parameter of `model`.
pub fn compare_gradients(
    model: &Model,
    analytic: &ModelParameters,
    objective: impl Fn(&Model) -> f64,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    compare_at_smooth_points(model, analytic, |m| (objective(m), Vec::new()), cfg)
}

/// Like [`compare_gradients`], but `objective` also reports the discrete
/// selection behind its value. Coordinates whose `±h` probes disagree with
/// the unperturbed selection sit on a kink and are skipped.
fn compare_at_smooth_points(
    model: &Model,
    analytic: &ModelParameters,
    objective: impl Fn(&Model) -> (f64, Vec<Option<usize>>),
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let base = objective(model).1;
    let mut probe = model.clone();
    let meta: Vec<(String, Component, usize)> = model
        .params
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.component, t.data.len()))
        .collect();
    let analytic: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data.to_vec()).collect();
    let mut by_component: BTreeMap<Component, ComponentReport> = BTreeMap::new();
    for (ti, (name, component, len)) in meta.iter().enumerate() {
        let entry = by_component.entry(*component).or_insert_with(|| ComponentReport {
            component: *component,
            checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            skipped: 0,
            worst: String::new(),
            passed: true,
        });
        for j in 0..*len {
            let original = probe.params.tensors_mut()[ti][j];
            let h = cfg.step * original.abs().max(1.0);
            probe.params.tensors_mut()[ti][j] = original + h;
            let (plus, plus_sel) = objective(&probe);
            probe.params.tensors_mut()[ti][j] = original - h;
            let (minus, minus_sel) = objective(&probe);
            probe.params.tensors_mut()[ti][j] = original;
            if plus_sel != base || minus_sel != base {
                entry.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti][j];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale > cfg.abs_tolerance { abs / scale } else { 0.0 };
            entry.checked += 1;
            entry.max_abs_error = entry.max_abs_error.max(abs);
            if rel > entry.max_rel_error || entry.worst.is_empty() {
                entry.max_rel_error = entry.max_rel_error.max(rel);
                entry.worst = format!("{name}[{j}]");
            }
            if !(abs <= cfg.abs_tolerance || rel < cfg.tolerance) {
                entry.passed = false;
            }
        }
    }
    let components: Vec<ComponentReport> = by_component.into_values().collect();
    let passed = components.iter().all(|c| c.passed);
    GradCheckReport { components, passed }
}

/// A randomly initialised model over `vocab_size` tokens with salience,
/// saturation weights and gate moved away from their initial values, plus a
/// random query and document.
pub fn probe_model(
    config: ModelConfig,
    vocab_size: usize,
    query_len: usize,
    doc_len: usize,
    seed: u64,
) -> Result<(Model, Vec<u32>, Vec<u32>)> {
    let vocab = Vocabulary::from_tokens((0..vocab_size).map(|i| format!("t{i}")));
    let mut model = Model::new(config, vocab, None, None, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for v in model.params.salience.iter_mut().skip(1) {
        *v = rng.random_range(0.5..3.0);
    }
    for v in model.params.saturation.weights.iter_mut() {
        *v = rng.random_range(-0.2..0.2);
    }
    for v in model.params.gate.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let top = model.vocab.len() as u32;
    let query = (0..query_len.max(1)).map(|_| rng.random_range(2..top)).collect();
    let doc_len = doc_len.max(1);
    // Distinct tokens when possible: repeated tokens inside one window get
    // identical vectors and tie neighbouring regions.
    let doc = if doc_len < top as usize {
        sample(&mut rng, top as usize - 1, doc_len).into_iter().map(|i| i as u32 + 1).collect()
    } else {
        (0..doc_len).map(|_| rng.random_range(1..top)).collect()
    };
    Ok((model, query, doc))
}

/// Finite-difference check of the end-to-end score gradient for one pair.
pub fn gradient_check(model: &Model, query: &[u32], doc: &[u32], cfg: &GradCheckConfig) -> GradCheckReport {
    let mut grads = model.params.zeros_like();
    model.score_with_gradient(query, doc, 1.0, &mut grads);
    let objective = |m: &Model| match m.score_document(query, doc) {
        Ok(s) => (s.score, s.sources),
        Err(_) => (f64::NAN, Vec::new()),
    };
    compare_at_smooth_points(model, &grads, objective, cfg)
}
