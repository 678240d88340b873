use patchfm_tensor::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::preprocess::WindowedSample;

/// Masked pinball loss of one sample in normalized space.
///
/// `q_norm` is a row-major `[T × K]` grid. Only positions that are predicted,
/// observed and not padding contribute; the sum is divided by their count.
pub fn pinball_loss(
    q_norm: &[f64],
    targets_norm: &[f64],
    m_pred: &[bool],
    m_miss: &[bool],
    m_pad: &[bool],
    levels: &[f64],
) -> Result<f64> {
    let t = targets_norm.len();
    let k = levels.len();
    if q_norm.len() != t * k || m_pred.len() != t || m_miss.len() != t || m_pad.len() != t {
        return Err(Error::Shape(format!(
            "pinball loss over T={t}, K={k} got {} predictions and masks of {}/{}/{}",
            q_norm.len(),
            m_pred.len(),
            m_miss.len(),
            m_pad.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ti in 0..t {
        if !(m_pred[ti] && !m_miss[ti] && !m_pad[ti]) {
            continue;
        }
        count += 1;
        let x = targets_norm[ti];
        for (ki, tau) in levels.iter().enumerate() {
            let q = q_norm[ti * k + ki];
            let ind = if x <= q { 1.0 } else { 0.0 };
            total += (x - q) * (tau - ind);
        }
    }
    if count == 0 {
        return Err(Error::Data("no observed prediction targets in sample".into()));
    }
    Ok(total / count as f64)
}

/// Batch loss on a graph: the mean over samples of [`pinball_loss`].
///
/// The piecewise-linear indicator is evaluated at the current predictions and
/// enters as a constant, so the graph is `sum(-w ⊙ (q - x))` with `w` zero at
/// every position outside the loss.
pub fn pinball_loss_graph(g: &mut Graph, q_norm: Var, samples: &[&WindowedSample], levels: &[f64]) -> Result<Var> {
    let k = levels.len();
    let t = samples.first().map(|s| s.len()).unwrap_or(0);
    let b = samples.len();
    if g.shape(q_norm) != [b * t, k] {
        return Err(Error::Shape(format!(
            "predictions {:?} do not match {b} samples of length {t} with {k} levels",
            g.shape(q_norm)
        )));
    }
    let mut targets = vec![0.0; b * t];
    let mut neg_w = vec![0.0; b * t * k];
    let q = g.value(q_norm).data();
    for (si, s) in samples.iter().enumerate() {
        let eligible: Vec<usize> = s.masks.loss_positions().collect();
        if eligible.is_empty() {
            return Err(Error::Data(format!("sample {si} has no observed prediction targets")));
        }
        let scale = 1.0 / (eligible.len() as f64 * b as f64);
        let tn = s.targets_norm();
        for ti in eligible {
            let row = si * t + ti;
            let x = tn[ti];
            targets[row] = x;
            for (ki, tau) in levels.iter().enumerate() {
                let ind = if x <= q[row * k + ki] { 1.0 } else { 0.0 };
                neg_w[row * k + ki] = -scale * (tau - ind);
            }
        }
    }
    let x = g.constant(Tensor::new(vec![b * t, 1], targets)?);
    let w = g.constant(Tensor::new(vec![b * t, k], neg_w)?);
    let diff = g.sub(q_norm, x)?;
    let weighted = g.mul(diff, w)?;
    Ok(g.sum(weighted))
}
