//! Visual side: region features, the global feature `v^(g)`, the
//! saliency-weighted feature `v^(s)` and their fusion `v`.

use crate::config::ModelConfig;
use crate::error::{Result, SanError};
use crate::layers::linear;
use crate::params::{Initializer, ParamStore};
use crate::saliency::downsampling_stage;
use crate::tensor::{Graph, Var};

pub fn init_params(cfg: &ModelConfig, init: &mut Initializer<'_>) {
    let [c1, c2] = cfg.encoder_channels;
    let d = cfg.feature_dim;
    for (i, (cin, cout)) in [(3, c1), (c1, c2), (c2, d)].into_iter().enumerate() {
        let name = format!("visual.encoder.conv{}", i + 1);
        init.conv(&name, cin, cout, 3);
        init.prelu(&format!("{name}.prelu"), cout);
    }
    init.linear("visual.proj_global", d, cfg.joint_dim);
    init.linear("visual.proj_salient", d, cfg.joint_dim);
}

/// Encodes `[3×H×W]` into `M = X·Y` region features, returned as an `[M×d]`
/// matrix whose rows are the regions in row-major grid order.
pub fn encode_image(g: &mut Graph, ps: &ParamStore, image: Var) -> Result<Var> {
    let shape = g.shape(image).to_vec();
    match shape[..] {
        [3, h, w] if h % 8 == 0 && w % 8 == 0 => {}
        _ => {
            return Err(SanError::Config(format!(
                "feature encoder needs a 3×H×W image with H, W divisible by 8, got {shape:?}"
            )))
        }
    }
    let mut x = image;
    for i in 1..=3 {
        x = downsampling_stage(g, ps, &format!("visual.encoder.conv{i}"), x)?;
    }
    let [d, gx, gy] = *g.shape(x) else { unreachable!() };
    let flat = g.reshape(x, &[d, gx * gy])?;
    g.transpose(flat)
}

/// `v^(g) = P_g · mean_i(v_i) + b`.
pub fn global_visual(g: &mut Graph, ps: &ParamStore, regions: Var) -> Result<Var> {
    let mean = g.mean_axis(regions, 0)?;
    linear(g, ps, "visual.proj_global", mean)
}

/// Block-mean pooling of `S1 [H×W]` down to the `X×Y` region grid.
pub fn downsample_saliency(g: &mut Graph, s1: Var, x: usize, y: usize) -> Result<Var> {
    let [h, w] = *g.shape(s1) else {
        return Err(SanError::Config(format!(
            "saliency map must be H×W, got {:?}",
            g.shape(s1)
        )));
    };
    if x == 0 || y == 0 || h % x != 0 || w % y != 0 {
        return Err(SanError::Config(format!(
            "region grid {x}×{y} does not divide saliency map {h}×{w}"
        )));
    }
    g.avg_pool2d(s1, h / x, w / y)
}

/// `a_v = sigmoid(S2) / Σ sigmoid(S2)`, flattened row-major to length `M`.
pub fn saliency_weights(g: &mut Graph, s2: Var) -> Result<Var> {
    let m = g.value(s2).len();
    let flat = g.reshape(s2, &[m])?;
    let s = g.sigmoid(flat);
    g.normalize_sum(s)
}

/// `v^(s) = P_s · Σ_i a_{v,i} v_i + b`.
pub fn sva(g: &mut Graph, ps: &ParamStore, regions: Var, weights: Var) -> Result<Var> {
    let m = g.shape(regions)[0];
    if g.shape(weights) != [m] {
        return Err(SanError::shape("sva", g.shape(regions), g.shape(weights)));
    }
    let rt = g.transpose(regions)?;
    let pooled = g.matvec(rt, weights)?;
    linear(g, ps, "visual.proj_salient", pooled)
}

/// `v = (v^(g) + v^(s)) / 2`.
pub fn fuse_visual(g: &mut Graph, v_global: Var, v_salient: Var) -> Result<Var> {
    g.average(v_global, v_salient)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut ps = ParamStore::new();
        for (n, t) in entries {
            ps.insert(n, t.clone());
        }
        ps
    }

    #[test]
    fn encoder_shape_and_zero_propagation() {
        let cfg = ModelConfig::default();
        let mut ps = ParamStore::new();
        init_params(&cfg, &mut Initializer { seed: 4, store: &mut ps });
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 32, 32]));
        let v = encode_image(&mut g, &ps, x).unwrap();
        assert_eq!(g.shape(v), &[16, 32]);
        assert!(g.value(v).data().iter().all(|&z| z == 0.0));

        let bad = g.constant(Tensor::zeros(&[3, 12, 12]));
        assert!(matches!(encode_image(&mut g, &ps, bad), Err(SanError::Config(_))));
    }

    #[test]
    fn global_visual_mean_then_identity() {
        let ps = store_with(&[
            ("visual.proj_global.w", Tensor::identity(2)),
            ("visual.proj_global.b", Tensor::zeros(&[2])),
        ]);
        let mut g = Graph::new();
        let v = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[3.0, 2.0]]).unwrap());
        let out = global_visual(&mut g, &ps, v).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 1.0]);
    }

    #[test]
    fn downsample_cases() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::full(&[4, 4], 0.7));
        let d = downsample_saliency(&mut g, s, 2, 2).unwrap();
        assert_eq!(g.value(d), &Tensor::full(&[2, 2], 0.7));
        let s = g.constant(Tensor::matrix(&[&[1.0, 3.0], &[5.0, 7.0]]).unwrap());
        let d = downsample_saliency(&mut g, s, 1, 1).unwrap();
        assert_eq!(g.value(d).data(), &[4.0]);
        let s = g.constant(Tensor::zeros(&[6, 6]));
        assert!(matches!(downsample_saliency(&mut g, s, 4, 4), Err(SanError::Config(_))));
    }

    #[test]
    fn weights_cases() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::vector(&[0.0, 0.0]).reshape(&[1, 2]).unwrap());
        let w = saliency_weights(&mut g, s).unwrap();
        assert_eq!(g.value(w).data(), &[0.5, 0.5]);

        let s = g.constant(Tensor::matrix(&[&[3f64.ln(), 0.0]]).unwrap());
        let w = saliency_weights(&mut g, s).unwrap();
        let got = g.value(w).data();
        assert!((got[0] - 0.6).abs() < 1e-15 && (got[1] - 0.4).abs() < 1e-15, "{got:?}");
    }

    #[test]
    fn sva_one_hot_selects_region() {
        let w = Tensor::matrix(&[&[1.0, 2.0], &[0.0, -1.0], &[0.5, 0.5]]).unwrap();
        let ps = store_with(&[
            ("visual.proj_salient.w", w.clone()),
            ("visual.proj_salient.b", Tensor::vector(&[0.1, 0.2, 0.3])),
        ]);
        let mut g = Graph::new();
        let regions = g.constant(Tensor::matrix(&[&[1.0, 1.0], &[2.0, -3.0], &[0.0, 4.0]]).unwrap());
        let a = g.constant(Tensor::vector(&[0.0, 1.0, 0.0]));
        let out = sva(&mut g, &ps, regions, a).unwrap();
        // P_s · [2, -3] + b
        assert_eq!(g.value(out).data(), &[2.0 - 6.0 + 0.1, 3.0 + 0.2, 1.0 - 1.5 + 0.3]);
        let short = g.constant(Tensor::vector(&[1.0, 0.0]));
        assert!(sva(&mut g, &ps, regions, short).is_err());
    }

    #[test]
    fn fuse_visual_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(&[2.0, 0.0]));
        let b = g.constant(Tensor::vector(&[0.0, 2.0]));
        let f = fuse_visual(&mut g, a, b).unwrap();
        assert_eq!(g.value(f).data(), &[1.0, 1.0]);
        let neg = g.constant(Tensor::vector(&[-2.0, -0.0]));
        let z = fuse_visual(&mut g, a, neg).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
        let same = fuse_visual(&mut g, a, a).unwrap();
        assert_eq!(g.value(same).data(), &[2.0, 0.0]);
        let short = g.constant(Tensor::vector(&[1.0]));
        assert!(fuse_visual(&mut g, a, short).is_err());
    }
}
