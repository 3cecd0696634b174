//! Closed-form communication volume, memory overhead and buffer counts of the
//! replicated one-sided multiplication.

use serde::Serialize;
use thiserror::Error;

use crate::gridplan::{exact_sqrt, validate_l, ProcessGrid, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("panel sizes must be finite and non-negative")]
    BadSizes,
    #[error("memory increase is defined relative to L = 1 and needs L > 1")]
    NeedsReplication,
    #[error("A and B panels are both empty")]
    EmptyPanels,
    #[error("scaling fit needs at least 3 points with distinct positive P*L and bytes, got {0}")]
    Degenerate(usize),
}

/// Average transfer sizes in bytes: `s_a`, `s_b` per A/B fetch and `s_c` per C panel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PanelSizes {
    pub s_a: f64,
    pub s_b: f64,
    pub s_c: f64,
}

impl PanelSizes {
    pub fn new(s_a: f64, s_b: f64, s_c: f64) -> Result<Self, ModelError> {
        if [s_a, s_b, s_c].iter().all(|x| x.is_finite() && *x >= 0.0) {
            Ok(Self { s_a, s_b, s_c })
        } else {
            Err(ModelError::BadSizes)
        }
    }

    pub fn uniform(s: f64) -> Result<Self, ModelError> {
        Self::new(s, s, s)
    }
}

fn sqrt_l(t: &Topology) -> f64 {
    exact_sqrt(t.l()).map_or_else(|| (t.l() as f64).sqrt(), |r| r as f64)
}

/// Bytes requested per rank: `(V / sqrt L)(S_A + S_B) + (L - 1) S_C`.
pub fn comm_volume(t: &Topology, s: &PanelSizes) -> f64 {
    t.v() as f64 / sqrt_l(t) * (s.s_a + s.s_b) + (t.l() - 1) as f64 * s.s_c
}

/// Factor by which temporary-buffer memory grows compared with `L = 1`.
pub fn mem_increase(t: &Topology, s: &PanelSizes) -> Result<f64, ModelError> {
    if t.l() <= 1 {
        return Err(ModelError::NeedsReplication);
    }
    let ab = s.s_a + s.s_b;
    if ab <= 0.0 {
        return Err(ModelError::EmptyPanels);
    }
    let c_term = s.s_c * t.l() as f64 / (3.0 * ab);
    Ok(if t.is_square() {
        c_term + (sqrt_l(t) + 4.0) / 6.0
    } else {
        c_term + 1.0
    })
}

/// Temporary buffers per rank: 6, `L + 6` (non-square) or `L + sqrt L + 4` (square).
pub fn buffer_count(t: &Topology) -> usize {
    let l = t.l();
    if l == 1 {
        6
    } else if t.is_square() {
        l + t.l_r() + 4
    } else {
        l + 6
    }
}

/// Least-squares slope of `ln(bytes)` against `ln(P * L)`.
pub fn scaling_check(points: &[(usize, usize, f64)]) -> Result<f64, ModelError> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(p, l, b)| *p > 0 && *l > 0 && *b > 0.0 && b.is_finite())
        .map(|&(p, l, b)| (((p * l) as f64).ln(), b.ln()))
        .collect();
    if pts.len() < 3 || pts.len() != points.len() {
        return Err(ModelError::Degenerate(pts.len()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(ModelError::Degenerate(pts.len()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

/// Model values for one topology.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelReport {
    pub p_rows: usize,
    pub p_cols: usize,
    pub l: usize,
    pub v: usize,
    pub comm_volume_bytes: f64,
    /// Undefined for `L = 1`.
    pub mem_increase_factor: Option<f64>,
    pub buffer_count: usize,
}

pub fn model_report(t: &Topology, s: &PanelSizes) -> ModelReport {
    ModelReport {
        p_rows: t.p_rows(),
        p_cols: t.p_cols(),
        l: t.l(),
        v: t.v(),
        comm_volume_bytes: comm_volume(t, s),
        mem_increase_factor: mem_increase(t, s).ok(),
        buffer_count: buffer_count(t),
    }
}

/// Model rows for every valid `L` in `ls` on every grid of `grids`.
pub fn model_table(grids: &[ProcessGrid], ls: &[usize], s: &PanelSizes) -> Vec<ModelReport> {
    grids
        .iter()
        .flat_map(|g| {
            ls.iter()
                .filter_map(move |&l| validate_l(g.p_rows(), g.p_cols(), l).ok())
                .map(|t| model_report(&t, s))
        })
        .collect()
}

/// CSV with header `P_R,P_C,L,V,comm_bytes,mem_factor,buffers`.
pub fn model_csv(rows: &[ModelReport]) -> String {
    let mut out = String::from("P_R,P_C,L,V,comm_bytes,mem_factor,buffers\n");
    for r in rows {
        let mem = r
            .mem_increase_factor
            .map(|m| format!("{m}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.p_rows, r.p_cols, r.l, r.v, r.comm_volume_bytes, mem, r.buffer_count
        ));
    }
    out
}
