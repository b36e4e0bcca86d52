use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComboParams {
    /// Weight of the cross-entropy term.
    pub alpha: f64,
    /// Weight of positive voxels inside the cross-entropy.
    pub beta: f64,
    pub smooth: f64,
    pub clip: f64,
}

impl Default for ComboParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            smooth: 1.0,
            clip: 1e-7,
        }
    }
}

/// `alpha * mCE - (1 - alpha) * DSC` over matching probability/target grids.
pub fn combo_loss(pred: &[f32], target: &[f32], params: ComboParams) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "combo loss: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("combo loss input"));
    }
    let ComboParams { alpha, beta, smooth, clip } = params;
    let (mut ce, mut inter, mut sum_t, mut sum_p) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        let p = (p as f64).clamp(clip, 1.0 - clip);
        let t = t as f64;
        ce += beta * t * p.ln() + (1.0 - beta) * (1.0 - t) * (1.0 - p).ln();
        inter += t * p;
        sum_t += t;
        sum_p += p;
    }
    let mce = -ce / pred.len() as f64;
    let dsc = (2.0 * inter + smooth) / (sum_t + sum_p + smooth);
    Ok(alpha * mce - (1.0 - alpha) * dsc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let t: Vec<f32> = (0..1000).map(|i| (i % 3 == 0) as u8 as f32).collect();
        let l = combo_loss(&t, &t, ComboParams::default()).unwrap();
        assert!((l + 0.5).abs() < 1e-3, "{l}");
    }

    #[test]
    fn half_prediction_on_positive_target() {
        let n = 1_000_000;
        let l = combo_loss(&vec![0.5; n], &vec![1.0; n], ComboParams::default()).unwrap();
        let expected = 0.25 * 2f64.ln() - 0.5 * (2.0 / 3.0);
        assert!((l - expected).abs() < 1e-5);
        assert!((l + 0.1600).abs() < 5e-4);
    }

    #[test]
    fn alpha_one_is_weighted_ce() {
        let p = [0.2f32, 0.9, 0.6];
        let t = [0.0f32, 1.0, 1.0];
        let params = ComboParams { alpha: 1.0, ..Default::default() };
        let ce: f64 = -(0.5 * 0.8f64.ln() + 0.5 * (0.9f64.ln() + 0.6f64.ln())) / 3.0;
        assert!((combo_loss(&p, &t, params).unwrap() - ce).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        assert!(combo_loss(&[0.5], &[1.0, 0.0], ComboParams::default()).is_err());
    }
}
