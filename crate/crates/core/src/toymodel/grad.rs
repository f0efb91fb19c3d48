//! Analytic gradients with respect to the trainable blocks.
//!
//! Every loss in the crate is a function of unit-norm tower outputs, so the
//! losses only need to supply `∂L/∂z` per encoded item; [`GradAccumulator`]
//! pushes those back through the normalization, the optional bridge and the
//! low-rank factorization.

use super::{normalize, BlockName, Encoder, ModelError, ModelSnapshot, PairRef};
use crate::linalg::{dot, Matrix, ShapeError};

/// Intermediates of one tower forward pass.
#[derive(Debug, Clone)]
pub struct TowerTrace {
    /// Tower input (image features or mean token embedding).
    pub input: Vec<f64>,
    /// `(W + ΔW) · input`.
    pub hidden: Vec<f64>,
    /// Pre-normalization vector (bridge applied for the image tower).
    pub pre: Vec<f64>,
    pub pre_norm: f64,
    /// Unit-norm output.
    pub z: Vec<f64>,
}

impl TowerTrace {
    pub(super) fn finish(input: Vec<f64>, hidden: Vec<f64>, pre: Vec<f64>) -> Result<Self, ModelError> {
        let (z, pre_norm) = normalize(&pre)?;
        Ok(Self {
            input,
            hidden,
            pre,
            pre_norm,
            z,
        })
    }

    /// `∂L/∂pre` given `∂L/∂z` for `z = pre / ‖pre‖`.
    fn pre_grad(&self, grad_z: &[f64]) -> Vec<f64> {
        let proj = dot(&self.z, grad_z);
        grad_z
            .iter()
            .zip(&self.z)
            .map(|(g, z)| (g - z * proj) / self.pre_norm)
            .collect()
    }
}

/// Partial derivatives for the trainable blocks of one snapshot. Frozen
/// weights have no slot here.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub vision_a: Matrix,
    pub vision_b: Matrix,
    pub text_a: Matrix,
    pub text_b: Matrix,
    pub bridge: Option<Matrix>,
}

impl GradientSet {
    pub fn zeros_for(snapshot: &ModelSnapshot) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            vision_a: z(&snapshot.vision.adapter.a),
            vision_b: z(&snapshot.vision.adapter.b),
            text_a: z(&snapshot.text.adapter.a),
            text_b: z(&snapshot.text.adapter.b),
            bridge: snapshot.bridge.as_ref().map(z),
        }
    }

    pub fn get(&self, name: BlockName) -> Option<&Matrix> {
        match name {
            BlockName::VisionA => Some(&self.vision_a),
            BlockName::VisionB => Some(&self.vision_b),
            BlockName::TextA => Some(&self.text_a),
            BlockName::TextB => Some(&self.text_b),
            BlockName::Bridge => self.bridge.as_ref(),
        }
    }

    pub fn get_mut(&mut self, name: BlockName) -> Option<&mut Matrix> {
        match name {
            BlockName::VisionA => Some(&mut self.vision_a),
            BlockName::VisionB => Some(&mut self.vision_b),
            BlockName::TextA => Some(&mut self.text_a),
            BlockName::TextB => Some(&mut self.text_b),
            BlockName::Bridge => self.bridge.as_mut(),
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = (BlockName, &Matrix)> {
        BlockName::ALL
            .into_iter()
            .filter_map(move |b| self.get(b).map(|m| (b, m)))
    }

    /// Checks block-for-block shape agreement with a snapshot.
    pub fn matches(&self, snapshot: &ModelSnapshot) -> Result<(), ShapeError> {
        for b in BlockName::ALL {
            match (self.get(b), snapshot.block(b)) {
                (Some(g), Some(p)) if g.same_shape(p) => {}
                (None, None) => {}
                (g, p) => {
                    return Err(ShapeError::Mismatch {
                        op: b.as_str(),
                        left: g.map_or((0, 0), Matrix::shape),
                        right: p.map_or((0, 0), Matrix::shape),
                    })
                }
            }
        }
        Ok(())
    }

    /// `self += w · other`.
    pub fn add_scaled(&mut self, w: f64, other: &GradientSet) -> Result<(), ShapeError> {
        if self.bridge.is_some() != other.bridge.is_some() {
            return Err(ShapeError::Mismatch {
                op: "bridge presence",
                left: self.bridge.as_ref().map_or((0, 0), Matrix::shape),
                right: other.bridge.as_ref().map_or((0, 0), Matrix::shape),
            });
        }
        for b in BlockName::ALL {
            if let (Some(dst), Some(src)) = (self.get_mut(b), other.get(b)) {
                dst.add_scaled(w, src)?;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().all(|(_, m)| m.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .flat_map(|(_, m)| m.as_slice().iter().copied())
            .fold(0.0, |acc, x| acc.max(x.abs()))
    }
}

/// Accumulates `∂L/∂W_eff` (and `∂L/∂bridge`) across encoded items, then
/// converts to adapter-factor gradients.
pub struct GradAccumulator<'a> {
    enc: &'a Encoder<'a>,
    g_wv: Matrix,
    g_wt: Matrix,
    g_bridge: Option<Matrix>,
}

impl<'a> GradAccumulator<'a> {
    pub fn new(enc: &'a Encoder<'a>) -> Self {
        let s = enc.snapshot();
        Self {
            enc,
            g_wv: Matrix::zeros(s.d_emb(), s.d_v()),
            g_wt: Matrix::zeros(s.d_emb(), s.d_t()),
            g_bridge: s.bridge.as_ref().map(|b| Matrix::zeros(b.rows(), b.cols())),
        }
    }

    pub fn add_image(&mut self, trace: &TowerTrace, grad_z: &[f64]) {
        let g_pre = trace.pre_grad(grad_z);
        let g_hidden = match (&self.enc.snapshot().bridge, &mut self.g_bridge) {
            (Some(bridge), Some(g_bridge)) => {
                g_bridge.add_outer(1.0, &g_pre, &trace.hidden);
                bridge.tmatvec(&g_pre).expect("bridge is square d_emb")
            }
            _ => g_pre,
        };
        self.g_wv.add_outer(1.0, &g_hidden, &trace.input);
    }

    pub fn add_text(&mut self, trace: &TowerTrace, grad_z: &[f64]) {
        let g_pre = trace.pre_grad(grad_z);
        self.g_wt.add_outer(1.0, &g_pre, &trace.input);
    }

    pub fn finish(self) -> GradientSet {
        let s = self.enc.snapshot();
        let (ga_v, gb_v) = factor_grads(&self.g_wv, &s.vision.adapter);
        let (ga_t, gb_t) = factor_grads(&self.g_wt, &s.text.adapter);
        GradientSet {
            vision_a: ga_v,
            vision_b: gb_v,
            text_a: ga_t,
            text_b: gb_t,
            bridge: self.g_bridge,
        }
    }
}

/// For `W_eff = W + s·B·A`: `∂L/∂A = s·Bᵀ·G`, `∂L/∂B = s·G·Aᵀ`.
fn factor_grads(g_w: &Matrix, adapter: &super::AdapterPair) -> (Matrix, Matrix) {
    let s = adapter.scaling();
    let ga = adapter.b.transpose().matmul(g_w).expect("shapes").scale(s);
    let gb = g_w.matmul(&adapter.a.transpose()).expect("shapes").scale(s);
    (ga, gb)
}

/// Symmetric InfoNCE over the batch (image→text and text→image
/// cross-entropy, averaged) with the snapshot's temperature.
pub fn contrastive_loss_and_grads(snapshot: &ModelSnapshot, batch: &[PairRef<'_>]) -> Result<(f64, GradientSet), ModelError> {
    let n = batch.len();
    if n < 2 {
        return Err(ModelError::Batch(n));
    }
    let enc = snapshot.encoder();
    let mut img = Vec::with_capacity(n);
    let mut txt = Vec::with_capacity(n);
    for (x, tokens) in batch {
        img.push(enc.trace_image(x)?);
        txt.push(enc.trace_text(tokens)?);
    }
    let tau = snapshot.temperature;
    let logits: Vec<Vec<f64>> = img
        .iter()
        .map(|vi| txt.iter().map(|tj| dot(&vi.z, &tj.z) / tau).collect())
        .collect();

    // Row-wise (image→text) and column-wise (text→image) softmax.
    let mut loss_rows = 0.0;
    let mut p_row = vec![vec![0.0; n]; n];
    for i in 0..n {
        let m = logits[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits[i].iter().map(|l| (l - m).exp()).sum();
        let lse = m + sum.ln();
        loss_rows += lse - logits[i][i];
        for j in 0..n {
            p_row[i][j] = (logits[i][j] - lse).exp();
        }
    }
    let mut loss_cols = 0.0;
    let mut p_col = vec![vec![0.0; n]; n];
    for j in 0..n {
        let m = (0..n).map(|i| logits[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n).map(|i| (logits[i][j] - m).exp()).sum();
        let lse = m + sum.ln();
        loss_cols += lse - logits[j][j];
        for i in 0..n {
            p_col[i][j] = (logits[i][j] - lse).exp();
        }
    }
    let nf = n as f64;
    let loss = 0.5 * (loss_rows / nf + loss_cols / nf);
    if !loss.is_finite() {
        return Err(ModelError::Numeric("contrastive loss".into()));
    }

    // ∂L/∂logit_ij
    let d = enc.snapshot().d_emb();
    let mut g_zv = vec![vec![0.0; d]; n];
    let mut g_zt = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            let g = 0.5 / nf * ((p_row[i][j] - delta) + (p_col[i][j] - delta)) / tau;
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                g_zv[i][k] += g * txt[j].z[k];
                g_zt[j][k] += g * img[i].z[k];
            }
        }
    }

    let mut acc = GradAccumulator::new(&enc);
    for i in 0..n {
        acc.add_image(&img[i], &g_zv[i]);
        acc.add_text(&txt[i], &g_zt[i]);
    }
    Ok((loss, acc.finish()))
}

/// Plain gradient descent on the adapters and bridge. Frozen weights are
/// shared, not copied, and the version is left alone.
pub fn sgd_step(snapshot: &ModelSnapshot, grads: &GradientSet, lr: f64) -> Result<ModelSnapshot, ModelError> {
    grads.matches(snapshot)?;
    if !grads.is_finite() {
        return Err(ModelError::Numeric("gradient".into()));
    }
    if !lr.is_finite() {
        return Err(ModelError::Numeric("learning rate".into()));
    }
    let mut next = snapshot.clone();
    for name in snapshot.block_names() {
        let g = grads.get(name).expect("matched above");
        next.block_mut(name)
            .expect("block listed by snapshot")
            .add_scaled(-lr, g)?;
    }
    Ok(next)
}
