//! Lightweight residual-refinement saliency network.
//!
//! A three-stage conv backbone yields `f1` (H/2), `f2` (H/4) and `f3` (H/8).
//! The low group `{f1, f2}` and the high group `{f3}` are fused separately,
//! an initial map `S0` is predicted from the high branch, and a residual
//! predicted from `Cat(S0, F_low)` refines it into `S1`. Maps are logits.

use crate::config::ModelConfig;
use crate::error::{Result, SanError};
use crate::layers::{conv3x3, conv3x3_prelu};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{kernels, Graph, Tensor, Var};

pub const PREFIX: &str = "saliency.";

/// Resolution tag of a saliency map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapKind {
    /// Full input resolution `H×W` (S1).
    Full,
    /// Region-grid resolution `X×Y` (S2).
    Grid,
}

/// A saliency logit map with its resolution tag.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub grid: Tensor,
    pub kind: MapKind,
}

impl SaliencyMap {
    /// Per-pixel probabilities `sigmoid(logit)`.
    pub fn probabilities(&self) -> Tensor {
        self.grid.map(kernels::sigmoid)
    }
}

pub fn init_params(cfg: &ModelConfig, init: &mut Initializer<'_>) {
    let [c1, c2, c3] = cfg.backbone_channels;
    let fw = cfg.fusion_width;
    for (i, (cin, cout)) in [(3, c1), (c1, c2), (c2, c3)].into_iter().enumerate() {
        let name = format!("saliency.backbone.conv{}", i + 1);
        init.conv(&name, cin, cout, 3);
        init.prelu(&format!("{name}.prelu"), cout);
    }
    init.conv("saliency.fuse_low", c1 + c2, fw, 3);
    init.prelu("saliency.fuse_low.prelu", fw);
    init.conv("saliency.fuse_high", c3, fw, 3);
    init.prelu("saliency.fuse_high.prelu", fw);
    init.conv("saliency.s0", fw, 1, 3);
    init.conv("saliency.rrb.conv1", fw + 1, cfg.rrb_hidden, 3);
    init.prelu("saliency.rrb.conv1.prelu", cfg.rrb_hidden);
    init.conv("saliency.rrb.conv2", cfg.rrb_hidden, 1, 3);
}

/// One stage: 3×3 conv + PReLU, then 2×2 average pooling.
pub(crate) fn downsampling_stage(g: &mut Graph, ps: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let y = conv3x3_prelu(g, ps, name, x)?;
    g.avg_pool2d(y, 2, 2)
}

/// Backbone feature pyramid `(f1, f2, f3)` at H/2, H/4, H/8.
pub fn backbone_forward(g: &mut Graph, ps: &ParamStore, image: Var) -> Result<(Var, Var, Var)> {
    let shape = g.shape(image).to_vec();
    match shape[..] {
        [3, h, w] if h % 8 == 0 && w % 8 == 0 => {}
        _ => {
            return Err(SanError::Config(format!(
                "saliency backbone needs a 3×H×W image with H, W divisible by 8, got {shape:?}"
            )))
        }
    }
    let f1 = downsampling_stage(g, ps, "saliency.backbone.conv1", image)?;
    let f2 = downsampling_stage(g, ps, "saliency.backbone.conv2", f1)?;
    let f3 = downsampling_stage(g, ps, "saliency.backbone.conv3", f2)?;
    Ok((f1, f2, f3))
}

/// `F_low = g_c(Cat(f1, up2(f2)))` at f1's resolution.
pub fn fuse_low(g: &mut Graph, ps: &ParamStore, f1: Var, f2: Var) -> Result<Var> {
    let (s1, s2) = (g.shape(f1).to_vec(), g.shape(f2).to_vec());
    if s1.len() != 3 || s2.len() != 3 || s1[1] != 2 * s2[1] || s1[2] != 2 * s2[2] {
        return Err(SanError::shape("fuse_low", &s1, &s2));
    }
    let up = g.upsample_nearest(f2, 2, 2)?;
    let cat = g.concat(&[f1, up])?;
    conv3x3_prelu(g, ps, "saliency.fuse_low", cat)
}

/// `F_high = g_c(f3)`, upsampled to `target` spatial size.
pub fn fuse_high(g: &mut Graph, ps: &ParamStore, f3: Var, target: (usize, usize)) -> Result<Var> {
    let fused = conv3x3_prelu(g, ps, "saliency.fuse_high", f3)?;
    let s = g.shape(fused).to_vec();
    if target.0 % s[1] != 0 || target.1 % s[2] != 0 {
        return Err(SanError::shape("fuse_high", &s, &[target.0, target.1]));
    }
    g.upsample_nearest(fused, target.0 / s[1], target.1 / s[2])
}

/// Outputs of the refinement block.
pub struct RrbOutput {
    /// Initial prediction at the fusion resolution, `[1×h×w]`.
    pub s0: Var,
    /// Refined prediction upsampled to the input resolution, `[H×W]`.
    pub s1: Var,
}

/// `S0 = conv(F_high)`, `residue = Φ(Cat(S0, F_low))`, `S1 = residue + S0`,
/// upsampled to `out_size`.
pub fn rrb(g: &mut Graph, ps: &ParamStore, f_low: Var, f_high: Var, out_size: (usize, usize)) -> Result<RrbOutput> {
    let (sl, sh) = (g.shape(f_low).to_vec(), g.shape(f_high).to_vec());
    if sl.len() != 3 || sh.len() != 3 || sl[1..] != sh[1..] {
        return Err(SanError::shape("rrb", &sl, &sh));
    }
    let (h, w) = (sl[1], sl[2]);
    if out_size.0 % h != 0 || out_size.1 % w != 0 {
        return Err(SanError::shape("rrb", &sl, &[out_size.0, out_size.1]));
    }
    let s0 = conv3x3(g, ps, "saliency.s0", f_high)?;
    let cat = g.concat(&[s0, f_low])?;
    let hidden = conv3x3_prelu(g, ps, "saliency.rrb.conv1", cat)?;
    let residue = conv3x3(g, ps, "saliency.rrb.conv2", hidden)?;
    let refined = g.add(residue, s0)?;
    let up = g.upsample_nearest(refined, out_size.0 / h, out_size.1 / w)?;
    let s1 = g.reshape(up, &[out_size.0, out_size.1])?;
    Ok(RrbOutput { s0, s1 })
}

/// Full network: image `[3×H×W]` to the refined map `S1` `[H×W]`.
pub fn forward(g: &mut Graph, ps: &ParamStore, image: Var) -> Result<RrbOutput> {
    let [_, h, w] = *g.shape(image) else {
        return Err(SanError::Config("saliency input must be 3×H×W".into()));
    };
    let (f1, f2, f3) = backbone_forward(g, ps, image)?;
    let f_low = fuse_low(g, ps, f1, f2)?;
    let hw = (g.shape(f_low)[1], g.shape(f_low)[2]);
    let f_high = fuse_high(g, ps, f3, hw)?;
    rrb(g, ps, f_low, f_high, (h, w))
}

/// Mean per-pixel binary cross-entropy between `sigmoid(S1)` and a binary
/// mask, in the stable `softplus(x) − y·x` form.
pub fn saliency_loss(g: &mut Graph, s1: Var, mask: &Tensor) -> Result<Var> {
    g.bce_with_logits(s1, mask)
}

/// Inference helper returning `S1` as a tagged map for an image in `[0,1]`.
pub fn predict(ps: &ParamStore, image: &Tensor) -> Result<SaliencyMap> {
    let mut g = Graph::new();
    let x = g.constant(crate::model::prepare_image(image));
    let out = forward(&mut g, ps, x)?;
    Ok(SaliencyMap {
        grid: g.value(out.s1).clone(),
        kind: MapKind::Full,
    })
}

/// Micro-averaged pixel F1 of `sigmoid(S1) ≥ 0.5` against binary masks,
/// pooled over all `(image, mask)` pairs.
pub fn pixel_f1(ps: &ParamStore, pairs: &[(&Tensor, &Tensor)]) -> Result<f64> {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (image, mask) in pairs {
        let pred = predict(ps, image)?.grid;
        if pred.shape() != mask.shape() {
            return Err(SanError::shape("pixel_f1", pred.shape(), mask.shape()));
        }
        for (&p, &m) in pred.data().iter().zip(mask.data()) {
            match (p >= 0.0, m > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}
