//! Training objectives: the prior-alignment loss (token cross-entropy plus
//! latent feature matching) and the restoration loss (fidelity plus a frozen
//! perceptual feature distance).

use ndarray::ArrayD;

use crate::error::{Result, VarError};
use crate::graph::Var;
use crate::msvq::{ScaleSchedule, TokenMap};
use crate::nn::{kaiming_conv, rng_for, streams, Session};
use crate::scalar::Scalar;

/// Seed root for the perceptual stack; a crate constant so the metric is
/// identical across every run and configuration.
const PSI_ROOT: u64 = 0x7073_695f_6669_7865; // "psi_fixe"

/// Frozen three-stage conv feature extractor ψ. Weights are drawn once from
/// a fixed seed, held privately, and entered into every graph as constants,
/// so nothing can ever train or mutate them.
pub struct PerceptualExtractor<F: Scalar> {
    /// Per stage: conv weight `(c_out, c_in, 3, 3)`, bias `(c_out)`, stride.
    stages: Vec<(ArrayD<F>, ArrayD<F>, usize)>,
}

impl<F: Scalar> PerceptualExtractor<F> {
    pub fn fixed() -> Self {
        let mut rng = rng_for(PSI_ROOT, streams::PERCEPTUAL);
        let plan = [(3usize, 8usize, 1usize), (8, 16, 2), (16, 16, 2)];
        let stages = plan
            .iter()
            .map(|&(c_in, c_out, stride)| {
                let w = kaiming_conv::<F>(&mut rng, c_out, c_in, 3, 3);
                let b = ArrayD::zeros(ndarray::IxDyn(&[c_out]));
                (w, b, stride)
            })
            .collect();
        PerceptualExtractor { stages }
    }

    /// Feature map of `(3, H, W)` input; differentiable w.r.t. the input
    /// only.
    pub fn features(&self, s: &mut Session<F>, image: Var) -> Var {
        let mut x = image;
        for (w, b, stride) in &self.stages {
            let wv = s.g.constant(w.clone());
            let bv = s.g.constant(b.clone());
            let c = s.g.conv2d(x, wv, *stride, 1);
            let c = s.g.add_bias(c, bv, 0);
            x = s.g.silu(c);
        }
        x
    }
}

/// Prior-alignment loss terms; every field is a `[1]`-shaped graph node.
pub struct FemaOut {
    pub total: Var,
    pub ce: Var,
    pub align: Var,
}

/// Cross-entropy of next-scale predictions summed over all scale positions,
/// plus `align_weight · ‖f_a − sg(f_e_gt_q)‖²`. The clean quantized target
/// is stop-gradient: no gradient ever reaches it.
pub fn fema_loss<F: Scalar>(
    s: &mut Session<F>,
    schedule: &ScaleSchedule,
    logits: Var,
    gt_tokens: &[TokenMap],
    f_a: Var,
    f_e_gt_q: Var,
    align_weight: f64,
) -> Result<FemaOut> {
    if gt_tokens.len() != schedule.k() {
        return Err(VarError::shape(format!(
            "want {} token maps, got {}",
            schedule.k(),
            gt_tokens.len()
        )));
    }
    let mut targets = Vec::with_capacity(schedule.total_tokens());
    for (i, tm) in gt_tokens.iter().enumerate() {
        if tm.scale_index != i + 1 || tm.indices.dim() != schedule.size(i + 1) {
            return Err(VarError::shape(format!("token map {} mislabeled or missized", i + 1)));
        }
        targets.extend(tm.flat());
    }
    let ls = s.g.shape(logits).to_vec();
    if ls.len() != 2 || ls[0] != targets.len() {
        return Err(VarError::shape(format!(
            "logits {ls:?} do not cover {} positions",
            targets.len()
        )));
    }
    if s.g.shape(f_a) != s.g.shape(f_e_gt_q) {
        return Err(VarError::shape("adapter output and quantized target disagree in shape"));
    }

    let ce = s.g.cross_entropy_sum(logits, targets);
    let sg = s.g.detach(f_e_gt_q);
    let diff = s.g.sub(f_a, sg);
    let align = s.g.sum_sq(diff);
    let weighted = s.g.scale(align, align_weight);
    let total = s.g.add(ce, weighted);
    Ok(FemaOut { total, ce, align })
}

/// Restoration loss terms; every field is a `[1]`-shaped graph node.
pub struct RecOut {
    pub total: Var,
    pub neg_psnr: Var,
    pub perceptual: Var,
}

/// `−PSNR(gt, rec) + perceptual_weight · ‖ψ(gt) − ψ(rec)‖²`, with the PSNR
/// capped at 100 dB (mean-square floor 1e-10) exactly like the evaluation
/// metric.
pub fn rec_loss<F: Scalar>(
    s: &mut Session<F>,
    psi: &PerceptualExtractor<F>,
    gt: Var,
    rec: Var,
    perceptual_weight: f64,
) -> Result<RecOut> {
    let gs = s.g.shape(gt).to_vec();
    if gs != s.g.shape(rec) {
        return Err(VarError::shape(format!(
            "image shapes disagree: {:?} vs {:?}",
            gs,
            s.g.shape(rec)
        )));
    }
    if gs.len() != 3 || gs[0] != 3 {
        return Err(VarError::shape(format!("images must be (3, H, W), got {gs:?}")));
    }

    // −10·log10(1/mse) = 10·ln(mse)/ln(10), floored so the cap is 100 dB
    let mse = s.g.mse(gt, rec);
    let floored = s.g.max_scalar(mse, 1e-10);
    let ln = s.g.ln(floored);
    let neg_psnr = s.g.scale(ln, 10.0 / std::f64::consts::LN_10);

    let fg = psi.features(s, gt);
    let fr = psi.features(s, rec);
    let diff = s.g.sub(fg, fr);
    let perceptual = s.g.sum_sq(diff);
    let weighted = s.g.scale(perceptual, perceptual_weight);
    let total = s.g.add(neg_psnr, weighted);
    Ok(RecOut {
        total,
        neg_psnr,
        perceptual,
    })
}

/// Read a `[1]`-shaped loss node as `f64`.
pub fn loss_value<F: Scalar>(s: &Session<F>, v: Var) -> f64 {
    s.g.value(v)[ndarray::IxDyn(&[0])].as_f64()
}
