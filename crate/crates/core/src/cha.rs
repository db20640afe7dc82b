//! Cross-modal hierarchical alignment: transport losses between grid levels
//! and text granularities, and the fusion of the three grid levels into one
//! token sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::{matmul, matmul_nt, matmul_tn};
use crate::numerics::Tensor;
use crate::ot::{
    cost_matrix, exact_ot, ot_grad_both, sinkhorn, Histogram, Metric, SinkhornConfig, TransportPlan,
};
use crate::text::TextFeatures;
use crate::visual::FeaturePyramid;

/// Weights of the paragraph, sentence and word losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for AlignmentWeights {
    fn default() -> Self {
        AlignmentWeights { alpha: 0.5, gamma: 0.2, beta: 0.3 }
    }
}

impl AlignmentWeights {
    pub const ZERO: AlignmentWeights = AlignmentWeights { alpha: 0.0, gamma: 0.0, beta: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("alignment weights must be >= 0 (got {self:?})")));
        }
        Ok(())
    }

    /// In level order paragraph, sentence, word.
    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha, self.gamma, self.beta]
    }

    pub fn is_zero(&self) -> bool {
        self.as_array().iter().all(|&w| w == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisualLevel {
    Shallow,
    Middle,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextLevel {
    Paragraph,
    Sentence,
    Word,
}

/// Loss terms in report order: coarsest grid with the paragraph, middle grid
/// with sentences, finest grid with keywords.
pub const LEVEL_PAIRS: [(VisualLevel, TextLevel); 3] = [
    (VisualLevel::High, TextLevel::Paragraph),
    (VisualLevel::Middle, TextLevel::Sentence),
    (VisualLevel::Shallow, TextLevel::Word),
];

fn visual_level(pyr: &FeaturePyramid, l: VisualLevel) -> &Tensor {
    match l {
        VisualLevel::Shallow => &pyr.v_s,
        VisualLevel::Middle => &pyr.v_m,
        VisualLevel::High => &pyr.v_h,
    }
}

fn visual_level_mut(pyr: &mut FeaturePyramid, l: VisualLevel) -> &mut Tensor {
    match l {
        VisualLevel::Shallow => &mut pyr.v_s,
        VisualLevel::Middle => &mut pyr.v_m,
        VisualLevel::High => &mut pyr.v_h,
    }
}

fn text_level(t: &TextFeatures, l: TextLevel) -> &Tensor {
    match l {
        TextLevel::Paragraph => &t.paragraph,
        TextLevel::Sentence => &t.sentences,
        TextLevel::Word => &t.words,
    }
}

fn text_level_mut(t: &mut TextFeatures, l: TextLevel) -> &mut Tensor {
    match l {
        TextLevel::Paragraph => &mut t.paragraph,
        TextLevel::Sentence => &mut t.sentences,
        TextLevel::Word => &mut t.words,
    }
}

/// How one level's visual and text sets are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// Transport cost under an L2 ground cost.
    #[default]
    Wasserstein,
    /// Metric distance between the mean-pooled sets.
    L1,
    L2,
    Cosine,
    Kl,
}

impl Distance {
    pub const ALL: [Distance; 5] =
        [Distance::Wasserstein, Distance::L1, Distance::L2, Distance::Cosine, Distance::Kl];

    pub fn label(self) -> &'static str {
        match self {
            Distance::Wasserstein => "Wasserstein",
            Distance::L1 => "L1",
            Distance::L2 => "L2",
            Distance::Cosine => "Cosine",
            Distance::Kl => "KL",
        }
    }

    fn pooled_metric(self) -> Option<Metric> {
        match self {
            Distance::Wasserstein => None,
            Distance::L1 => Some(Metric::L1),
            Distance::L2 => Some(Metric::L2),
            Distance::Cosine => Some(Metric::Cosine),
            Distance::Kl => Some(Metric::Kl),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Sinkhorn,
    Exact,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignOptions {
    pub distance: Distance,
    pub solver: Solver,
    pub sinkhorn: SinkhornConfig,
    /// Scale every feature row to unit length before the cost.
    pub unit_features: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentLossReport {
    pub l_p: f64,
    pub l_s: f64,
    pub l_w: f64,
    pub total: f64,
    /// Weights actually applied after skipping empty text levels.
    pub effective: AlignmentWeights,
    /// Paragraph, sentence, word levels skipped for lack of text units.
    pub skipped: [bool; 3],
    /// Plans in level order; `None` for terms that were not evaluated.
    pub plans: [Option<TransportPlan>; 3],
}

impl AlignmentLossReport {
    pub fn losses(&self) -> [f64; 3] {
        [self.l_p, self.l_s, self.l_w]
    }
}

/// Feature gradients of the total alignment loss.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentGrads {
    pub visual: FeaturePyramid,
    pub text: TextFeatures,
}

fn transport(x: &Tensor, y: &Tensor, opts: &AlignOptions) -> Result<(TransportPlan, Tensor, Tensor)> {
    if !opts.unit_features {
        return transport_raw(x, y, opts);
    }
    let (ux, nx) = unit_rows(x);
    let (uy, ny) = unit_rows(y);
    let (plan, gx, gy) = transport_raw(&ux, &uy, opts)?;
    Ok((plan, unit_rows_backward(&ux, &nx, &gx), unit_rows_backward(&uy, &ny, &gy)))
}

const UNIT_EPS: f64 = 1e-12;

/// Rows divided by their norms, plus the norms.
pub fn unit_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(UNIT_EPS);
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

/// Gradient through `unit_rows`: `(g − (g·u)u) / ‖x‖` per row.
pub fn unit_rows_backward(unit: &Tensor, norms: &[f64], g: &Tensor) -> Tensor {
    let mut out = g.clone();
    for (i, n) in norms.iter().enumerate() {
        let u = unit.row(i);
        let dot: f64 = g.row(i).iter().zip(u).map(|(a, b)| a * b).sum();
        for (o, uv) in out.row_mut(i).iter_mut().zip(u) {
            *o = (*o - dot * uv) / n;
        }
    }
    out
}

fn transport_raw(x: &Tensor, y: &Tensor, opts: &AlignOptions) -> Result<(TransportPlan, Tensor, Tensor)> {
    match opts.distance.pooled_metric() {
        None => {
            let c = cost_matrix(x, y, Metric::L2)?;
            let (a, b) = (Histogram::uniform(x.rows()), Histogram::uniform(y.rows()));
            let plan = match opts.solver {
                Solver::Sinkhorn => sinkhorn(&a, &b, &c, &opts.sinkhorn)?,
                Solver::Exact => exact_ot(&a, &b, &c)?,
            };
            let (gx, gy) = ot_grad_both(x, y, &plan.plan, Metric::L2)?;
            Ok((plan, gx, gy))
        }
        Some(metric) => {
            let (px, py) = (x.mean_rows(), y.mean_rows());
            let c = cost_matrix(&px, &py, metric)?;
            let one = Tensor::filled(&[1, 1], 1.0);
            let (gpx, gpy) = ot_grad_both(&px, &py, &one, metric)?;
            let spread = |g: &Tensor, n: usize| {
                let row: Vec<f64> = g.row(0).iter().map(|v| v / n as f64).collect();
                Tensor::from_rows(&vec![row; n]).expect("rows")
            };
            let plan = TransportPlan {
                cost: c.values.get(0, 0),
                plan: one,
                marginal_violation: 0.0,
                iterations: 0,
                converged: true,
            };
            Ok((plan, spread(&gpx, x.rows()), spread(&gpy, y.rows())))
        }
    }
}

/// Weighted sum of the three level losses, with gradients for both sides.
///
/// Text features must already live in the visual feature space. Zero-weight
/// terms are not evaluated and report 0. A text level without units is
/// skipped and the remaining weights are rescaled to keep their sum.
pub fn alignment_loss(
    pyr: &FeaturePyramid,
    text: &TextFeatures,
    w: &AlignmentWeights,
    opts: &AlignOptions,
) -> Result<(AlignmentLossReport, AlignmentGrads)> {
    w.validate()?;
    let d = pyr.dim();
    for (_, tl) in LEVEL_PAIRS {
        let t = text_level(text, tl);
        if t.rows() > 0 && t.cols() != d {
            return Err(Error::Dimension(format!(
                "text features of width {} vs visual width {d}",
                t.cols()
            )));
        }
    }
    let weights = w.as_array();
    let skipped = LEVEL_PAIRS.map(|(_, tl)| text_level(text, tl).rows() == 0);
    let kept: f64 = (0..3).filter(|&l| !skipped[l]).map(|l| weights[l]).sum();
    let all: f64 = weights.iter().sum();
    let eff: [f64; 3] = std::array::from_fn(|l| {
        if skipped[l] || kept == 0.0 {
            0.0
        } else if skipped.iter().any(|&s| s) {
            weights[l] * all / kept
        } else {
            weights[l]
        }
    });

    let mut losses = [0.0; 3];
    let mut plans: [Option<TransportPlan>; 3] = [None, None, None];
    let mut gv = pyr.zeros_like();
    let mut gt = TextFeatures {
        paragraph: Tensor::zeros(text.paragraph.shape()),
        sentences: Tensor::zeros(text.sentences.shape()),
        words: Tensor::zeros(text.words.shape()),
    };
    for (l, &(vl, tl)) in LEVEL_PAIRS.iter().enumerate() {
        if eff[l] == 0.0 {
            continue;
        }
        let (plan, gx, gy) = transport(visual_level(pyr, vl), text_level(text, tl), opts)?;
        losses[l] = plan.cost;
        visual_level_mut(&mut gv, vl).add_scaled(&gx, eff[l]);
        text_level_mut(&mut gt, tl).add_scaled(&gy, eff[l]);
        plans[l] = Some(plan);
    }
    let total = eff[0] * losses[0] + eff[1] * losses[1] + eff[2] * losses[2];
    let report = AlignmentLossReport {
        l_p: losses[0],
        l_s: losses[1],
        l_w: losses[2],
        total,
        effective: AlignmentWeights { alpha: eff[0], gamma: eff[1], beta: eff[2] },
        skipped,
        plans,
    };
    Ok((report, AlignmentGrads { visual: gv, text: gt }))
}

/// Wasserstein alignment with Sinkhorn plans.
pub fn hierarchical_alignment_loss(
    pyr: &FeaturePyramid,
    text: &TextFeatures,
    w: &AlignmentWeights,
    cfg: &SinkhornConfig,
) -> Result<AlignmentLossReport> {
    let opts = AlignOptions { sinkhorn: *cfg, ..Default::default() };
    alignment_loss(pyr, text, w, &opts).map(|(r, _)| r)
}

/// Finest-grid token sequence fed to the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub tokens: Tensor,
}

fn upsample_index(g_fine: usize, g_coarse: usize, cell: usize) -> usize {
    let (r, c) = (cell / g_fine, cell % g_fine);
    (r * g_coarse / g_fine) * g_coarse + c * g_coarse / g_fine
}

/// Per finest cell, `[v_s ; v_m ; v_h]` of the cells covering it.
fn stacked(pyr: &FeaturePyramid) -> Tensor {
    let [gs, gm, gh] = pyr.grids();
    let d = pyr.dim();
    let n = gs * gs;
    let mut out = Tensor::zeros(&[n, 3 * d]);
    for cell in 0..n {
        let row = out.row_mut(cell);
        row[..d].copy_from_slice(pyr.v_s.row(cell));
        row[d..2 * d].copy_from_slice(pyr.v_m.row(upsample_index(gs, gm, cell)));
        row[2 * d..].copy_from_slice(pyr.v_h.row(upsample_index(gs, gh, cell)));
    }
    out
}

/// Nearest-neighbour upsampling of the coarser levels to the finest grid,
/// channel concatenation and a `3D × D` projection.
pub fn fuse(pyr: &FeaturePyramid, proj: &Tensor) -> Result<FusedFeatures> {
    let d = pyr.dim();
    if proj.rows() != 3 * d {
        return Err(Error::Dimension(format!("fusion projection has {} rows, expected {}", proj.rows(), 3 * d)));
    }
    Ok(FusedFeatures { tokens: matmul(&stacked(pyr), proj)? })
}

/// Gradients of the pyramid and of the fusion projection.
pub fn fuse_backward(pyr: &FeaturePyramid, proj: &Tensor, dtokens: &Tensor) -> Result<(FeaturePyramid, Tensor)> {
    let [gs, gm, gh] = pyr.grids();
    let d = pyr.dim();
    let dproj = matmul_tn(&stacked(pyr), dtokens)?;
    let dstack = matmul_nt(dtokens, proj)?;
    let mut g = pyr.zeros_like();
    for cell in 0..gs * gs {
        let row = dstack.row(cell);
        for (o, v) in g.v_s.row_mut(cell).iter_mut().zip(&row[..d]) {
            *o += v;
        }
        for (o, v) in g.v_m.row_mut(upsample_index(gs, gm, cell)).iter_mut().zip(&row[d..2 * d]) {
            *o += v;
        }
        for (o, v) in g.v_h.row_mut(upsample_index(gs, gh, cell)).iter_mut().zip(&row[2 * d..]) {
            *o += v;
        }
    }
    Ok((g, dproj))
}

/// Coarsest level only, through the rows of the fusion projection that act on it.
pub fn fuse_coarse(pyr: &FeaturePyramid, proj: &Tensor) -> Result<FusedFeatures> {
    let d = pyr.dim();
    let block = coarse_block(proj, d)?;
    Ok(FusedFeatures { tokens: matmul(&pyr.v_h, &block)? })
}

fn coarse_block(proj: &Tensor, d: usize) -> Result<Tensor> {
    if proj.rows() != 3 * d {
        return Err(Error::Dimension(format!("fusion projection has {} rows, expected {}", proj.rows(), 3 * d)));
    }
    Tensor::matrix(d, proj.cols(), proj.data()[2 * d * proj.cols()..].to_vec())
}

pub fn fuse_coarse_backward(pyr: &FeaturePyramid, proj: &Tensor, dtokens: &Tensor) -> Result<(FeaturePyramid, Tensor)> {
    let d = pyr.dim();
    let block = coarse_block(proj, d)?;
    let mut g = pyr.zeros_like();
    g.v_h = matmul_nt(dtokens, &block)?;
    let dblock = matmul_tn(&pyr.v_h, dtokens)?;
    let mut dproj = Tensor::zeros(proj.shape());
    dproj.data_mut()[2 * d * proj.cols()..].copy_from_slice(dblock.data());
    Ok((g, dproj))
}
