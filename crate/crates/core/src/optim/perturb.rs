//! Ascent directions of the SAM family. All act on the φ-block only.

use crate::tensor::TensorError;
use crate::Result;

/// Gradient norms below this give a zero perturbation.
pub const ZERO_GRAD_THRESHOLD: f64 = 1e-12;

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `ρ g / ‖g‖`.
pub fn perturb_sam(g: &[f64], rho: f64, threshold: f64) -> Vec<f64> {
    let n = norm(g.iter().copied());
    if n < threshold {
        return vec![0.0; g.len()];
    }
    g.iter().map(|gi| rho * gi / n).collect()
}

/// `ρ (w² g) / ‖w g‖` with `w = |φ|`.
pub fn perturb_asam(phi: &[f64], g: &[f64], rho: f64, threshold: f64) -> Vec<f64> {
    let wg: Vec<f64> = phi.iter().zip(g).map(|(p, gi)| p.abs() * gi).collect();
    let n = norm(wg.iter().copied());
    if n < threshold {
        return vec![0.0; g.len()];
    }
    phi.iter().zip(&wg).map(|(p, x)| rho * (p.abs() * x) / n).collect()
}

/// `ρ F⁻¹g / √(gᵀF⁻¹g)` for diagonal `F`.
pub fn perturb_fsam(g: &[f64], fisher: &[f64], rho: f64, threshold: f64) -> Result<Vec<f64>> {
    if let Some(i) = fisher.iter().position(|f| !(*f > 0.0)) {
        return Err(TensorError::invalid("perturb_fsam", format!("fisher entry {i} is {}", fisher[i])).into());
    }
    if fisher.len() != g.len() {
        return Err(TensorError::ShapeMismatch {
            op: "perturb_fsam",
            lhs: vec![g.len()],
            rhs: vec![fisher.len()],
        }
        .into());
    }
    let fg: Vec<f64> = g.iter().zip(fisher).map(|(gi, f)| gi / f).collect();
    let s = g.iter().zip(&fg).map(|(a, b)| a * b).sum::<f64>().sqrt();
    if s < threshold {
        return Ok(vec![0.0; g.len()]);
    }
    Ok(fg.iter().map(|x| rho * x / s).collect())
}

/// `F_i = 1 + γ g_i²`.
pub fn estimate_fisher_diag(g: &[f64], gamma: f64) -> Vec<f64> {
    g.iter().map(|gi| 1.0 + gamma * gi * gi).collect()
}
