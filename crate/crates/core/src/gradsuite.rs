//! Finite-difference self-test over every differentiable component, on tiny
//! random instances.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Result, SanError};
use crate::evaluation::Variant;
use crate::model::{batch_loss, image_features, SanModel};
use crate::objective::{MarginConfig, NegativeMode};
use crate::params::{named_rng, ParamStore};
use crate::saliency;
use crate::sta;
use crate::tensor::{gradcheck, GradcheckOptions, GradcheckReport, Graph, Tensor, Var};
use crate::text::{self, Vocabulary};

pub const TOLERANCE: f64 = 1e-4;

/// Instances with a ReLU/PReLU input or hinge argument closer than this to
/// its kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;
const MAX_ATTEMPTS: u64 = 50;

pub const MODULES: [&str; 7] = [
    "tensor",
    "saliency_net",
    "visual_path",
    "text_path",
    "sta",
    "objective",
    "end_to_end",
];

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Coordinates probed per parameter tensor.
    pub max_coords: Option<usize>,
    /// Deliberately wrong tanh adjoint, for checking that the suite fails.
    pub faulty_tanh: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 1,
            max_coords: Some(6),
            faulty_tanh: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModuleResult {
    pub module: &'static str,
    pub report: GradcheckReport,
}

impl ModuleResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= TOLERANCE
    }
}

/// Runs the named modules (all when `modules` is empty).
pub fn run_suite(modules: &[String], opts: &SuiteOptions) -> Result<Vec<ModuleResult>> {
    let selected: Vec<&'static str> = if modules.is_empty() {
        MODULES.to_vec()
    } else {
        modules
            .iter()
            .map(|m| {
                MODULES
                    .iter()
                    .copied()
                    .find(|k| *k == m.as_str())
                    .ok_or_else(|| SanError::Usage(format!("unknown module {m:?}; expected one of {}", MODULES.join(", "))))
            })
            .collect::<Result<_>>()?
    };
    selected
        .into_iter()
        .map(|module| {
            for attempt in 0..MAX_ATTEMPTS {
                let seed = opts.seed.wrapping_add(attempt * 7919);
                if let Some(report) = check_module(module, seed, opts)? {
                    return Ok(ModuleResult { module, report });
                }
            }
            Err(SanError::Numeric(format!(
                "{module}: no instance away from activation kinks in {MAX_ATTEMPTS} attempts"
            )))
        })
        .collect()
}

fn uniform(seed: u64, name: &str, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut rng = named_rng(seed, name);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

/// Moves every parameter away from its initial value so biases are nonzero
/// and PReLU slopes differ between channels.
fn jitter(ps: &mut ParamStore, seed: u64) {
    let names: Vec<String> = ps.names().map(String::from).collect();
    for name in names {
        let t = ps.get_mut(&name).expect("listed name");
        let noise = uniform(seed, &format!("jitter.{name}"), t.shape(), -0.2, 0.2);
        t.axpy(1.0, &noise).expect("same shape");
    }
}

/// `Σ r ⊙ x` for a fixed random `r`, turning any node into a scalar.
fn project(g: &mut Graph, x: Var, seed: u64, tag: &str) -> Result<Var> {
    let r = uniform(seed, &format!("project.{tag}"), g.shape(x), -1.0, 1.0);
    let r = g.constant(r);
    let p = g.mul(x, r)?;
    Ok(g.sum(p))
}

/// Doubles the saliency kernels and pushes PReLU slopes towards 1.
fn amplify_saliency(ps: &mut ParamStore) {
    let names: Vec<String> = ps.names().filter(|n| n.starts_with(saliency::PREFIX)).map(String::from).collect();
    for name in names {
        let t = ps.get_mut(&name).expect("listed name");
        if name.ends_with(".w") {
            t.data_mut().iter_mut().for_each(|v| *v *= SCALE);
        } else if name.ends_with(".prelu") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.5 + *v);
        }
    }
}

const SCALE: f64 = 2.0;

fn model_params(cfg: &ModelConfig, vocab_len: usize, seed: u64) -> ParamStore {
    let mut ps = SanModel::initial_params(cfg, vocab_len, seed);
    jitter(&mut ps, seed);
    ps
}

fn run(params: &ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>, opts: &SuiteOptions) -> Result<Option<GradcheckReport>> {
    let mut g = Graph::new();
    f(&mut g, params)?;
    if g.kink_margin() < KINK_MARGIN {
        return Ok(None);
    }
    gradcheck(
        params,
        f,
        &GradcheckOptions {
            max_coords: opts.max_coords,
            seed: opts.seed,
            faulty_tanh: opts.faulty_tanh,
            ..GradcheckOptions::default()
        },
    )
    .map(Some)
}

fn vocab() -> Vocabulary {
    Vocabulary::build(["a red circle and a blue square", "the green triangle"], 1)
}

fn check_module(module: &str, seed: u64, opts: &SuiteOptions) -> Result<Option<GradcheckReport>> {
    let cfg = ModelConfig::tiny();
    let s = cfg.image_size;
    let image = uniform(seed, "image", &[3, s, s], 0.0, 1.0);
    match module {
        "tensor" => {
            let mut ps = ParamStore::new();
            ps.insert("a", uniform(seed, "a", &[3, 4], -1.0, 1.0));
            ps.insert("b", uniform(seed, "b", &[4, 2], -1.0, 1.0));
            ps.insert("x", uniform(seed, "x", &[2, 4, 4], -1.0, 1.0));
            ps.insert("k", uniform(seed, "k", &[3, 2, 3, 3], -0.5, 0.5));
            ps.insert("kb", uniform(seed, "kb", &[3], -0.5, 0.5));
            ps.insert("slope", uniform(seed, "slope", &[3], 0.1, 0.4));
            ps.insert("e", uniform(seed, "e", &[3, 5], -1.0, 1.0));
            run(
                &ps,
                |g, ps| {
                    let a = g.param(ps, "a")?;
                    let b = g.param(ps, "b")?;
                    let ab = g.matmul(a, b)?;
                    let t = g.tanh(ab);
                    let sm = g.softmax(t, 1)?;
                    let l1 = project(g, sm, seed, "softmax")?;

                    let x = g.param(ps, "x")?;
                    let k = g.param(ps, "k")?;
                    let kb = g.param(ps, "kb")?;
                    let c = g.conv2d(x, k, Some(kb), 1, 1)?;
                    let slope = g.param(ps, "slope")?;
                    let c = g.prelu(c, slope)?;
                    let p = g.avg_pool2d(c, 2, 2)?;
                    let u = g.upsample_nearest(p, 2, 2)?;
                    let cat = g.concat(&[u, c])?;
                    let l2 = project(g, cat, seed, "conv")?;
                    let valid = g.conv2d(x, k, None, 1, 0)?;
                    let l3 = project(g, valid, seed, "valid")?;

                    let e = g.param(ps, "e")?;
                    let cols = g.gather_columns(e, &[4, 0, 4])?;
                    let r0 = g.row(cols, 0)?;
                    let r1 = g.row(cols, 1)?;
                    let cos = g.cosine(r0, r1)?;
                    let m = g.mean_axis(cols, 0)?;
                    let sg = g.sigmoid(m);
                    let n = g.normalize_sum(sg)?;
                    let st = g.stack(&[cos, cos])?;
                    let l4 = project(g, n, seed, "normalize")?;
                    let l5 = project(g, st, seed, "stack")?;
                    let ct = g.transpose(cols)?;
                    let mv = g.matvec(ct, n)?;
                    let mask = Tensor::vector(&[1.0, 0.0, 1.0]);
                    let bce = g.bce_with_logits(mv, &mask)?;
                    let mut total = g.add(l1, l2)?;
                    for l in [l3, l4, l5, bce] {
                        total = g.add(total, l)?;
                    }
                    Ok(total)
                },
                opts,
            )
        }
        "saliency_net" => {
            let ps = model_params(&cfg, 3, seed).subset(saliency::PREFIX);
            let mask = uniform(seed, "mask", &[s, s], 0.0, 1.0).map(|v| if v < 0.4 { 1.0 } else { 0.0 });
            run(
                &ps,
                |g, ps| {
                    let x = g.constant(image.clone());
                    let out = saliency::forward(g, ps, x)?;
                    let bce = saliency::saliency_loss(g, out.s1, &mask)?;
                    let p = project(g, out.s0, seed, "s0")?;
                    g.add(bce, p)
                },
                opts,
            )
        }
        "visual_path" => {
            let all = model_params(&cfg, 3, seed);
            let mut ps = all.subset("visual.");
            for (name, t) in all.subset(saliency::PREFIX).iter() {
                ps.insert(name, t.clone());
            }
            run(
                &ps,
                |g, ps| {
                    let f = image_features(g, ps, &cfg, &image, Variant::FULL)?;
                    let sal = f.saliency.as_ref().expect("saliency branch");
                    let a = project(g, sal.weights, seed, "a_v")?;
                    let v = project(g, f.v_fused.expect("fused"), seed, "v")?;
                    let vs = project(g, f.v_salient.expect("salient"), seed, "v_s")?;
                    let t = g.add(a, v)?;
                    g.add(t, vs)
                },
                opts,
            )
        }
        "text_path" => {
            let vocab = vocab();
            let ps = model_params(&cfg, vocab.len(), seed).subset("text.");
            let tokens = text::tokenize("a red circle and a square", &vocab, cfg.max_len)?;
            run(
                &ps,
                |g, ps| {
                    let e = text::embed(g, ps, &tokens)?;
                    let words = text::bigru(g, ps, e)?;
                    let global = text::global_textual(g, words)?;
                    let a = project(g, words, seed, "words")?;
                    let b = project(g, global, seed, "global")?;
                    g.add(a, b)
                },
                opts,
            )
        }
        "sta" => {
            let k = cfg.joint_dim;
            let mut ps = model_params(&cfg, 3, seed).subset(sta::PREFIX);
            ps.insert("input.v", uniform(seed, "v", &[k], -1.0, 1.0));
            ps.insert("input.words", uniform(seed, "words", &[4, k], -1.0, 1.0));
            run(
                &ps,
                |g, ps| {
                    let v = g.param(ps, "input.v")?;
                    let words = g.param(ps, "input.words")?;
                    let tg = g.mean_axis(words, 0)?;
                    let m_f = sta::gated_fusion(g, ps, v, tg)?;
                    let keys = sta::word_keys(g, ps, words)?;
                    let att = sta::textual_attention(g, ps, m_f, words, keys)?;
                    let t = sta::fuse_textual(g, tg, att.attended)?;
                    let a = project(g, att.weights, seed, "a_t")?;
                    let b = project(g, t, seed, "t")?;
                    let c = g.cosine(v, t)?;
                    let ab = g.add(a, b)?;
                    g.add(ab, c)
                },
                opts,
            )
        }
        "objective" => objective_check(seed, opts),
        "end_to_end" => {
            let vocab = vocab();
            let mut model = SanModel::new(cfg.clone(), vocab, seed)?;
            jitter(&mut model.params, seed);
            amplify_saliency(&mut model.params);
            let images = [image.clone(), uniform(seed, "image2", &[3, s, s], 0.0, 1.0)];
            let caps = [
                model.tokenize("a red circle and a blue square")?,
                model.tokenize("the green triangle")?,
            ];
            let loss = MarginConfig {
                margin: 0.2,
                negative_mode: NegativeMode::SumAll,
            };
            let params = model.params.clone();
            let batch = |g: &mut Graph, ps: &ParamStore| {
                let m = SanModel {
                    config: model.config.clone(),
                    vocab: model.vocab.clone(),
                    params: ps.clone(),
                };
                batch_loss(g, &m, &[&images[0], &images[1]], &[&caps[0], &caps[1]], Variant::FULL, &loss)
            };
            let mut g = Graph::new();
            let (_, sim) = batch(&mut g, &params)?;
            let s = g.value(sim);
            let near_hinge = (0..2).any(|i| {
                let j = 1 - i;
                (loss.margin - s.at(&[i, i]) + s.at(&[i, j])).abs() < KINK_MARGIN
                    || (loss.margin - s.at(&[i, i]) + s.at(&[j, i])).abs() < KINK_MARGIN
            });
            if near_hinge {
                return Ok(None);
            }
            run(
                &params,
                |g, ps| Ok(batch(g, ps)?.0),
                opts,
            )
        }
        other => Err(SanError::Usage(format!("unknown module {other:?}"))),
    }
}

/// Cosine similarities of random embeddings into the ranking loss, in both
/// negative modes.
fn objective_check(seed: u64, opts: &SuiteOptions) -> Result<Option<GradcheckReport>> {
    let margin = 0.2;
    let mut ps = ParamStore::new();
    ps.insert("img", uniform(seed, "objective.img", &[3, 4], -1.0, 1.0));
    ps.insert("txt", uniform(seed, "objective.txt", &[3, 4], -1.0, 1.0));
    let build = |g: &mut Graph, ps: &ParamStore| -> Result<(Var, Var)> {
        let img = g.param(ps, "img")?;
        let txt = g.param(ps, "txt")?;
        let mut sims = Vec::new();
        for i in 0..3 {
            let a = g.row(img, i)?;
            for j in 0..3 {
                let b = g.row(txt, j)?;
                sims.push(g.cosine(a, b)?);
            }
        }
        let flat = g.stack(&sims)?;
        let sim = g.reshape(flat, &[3, 3])?;
        let sum_all = g.triplet_loss(sim, margin, NegativeMode::SumAll)?;
        let hardest = g.triplet_loss(sim, margin, NegativeMode::Hardest)?;
        Ok((sim, g.add(sum_all, hardest)?))
    };
    let mut g = Graph::new();
    let (sim, _) = build(&mut g, &ps)?;
    let s = g.value(sim);
    let off: Vec<(usize, usize)> = (0..3).flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    let near_kink = off.iter().any(|&(i, j)| {
        (margin - s.at(&[i, i]) + s.at(&[i, j])).abs() < KINK_MARGIN
            || (margin - s.at(&[i, i]) + s.at(&[j, i])).abs() < KINK_MARGIN
    });
    let hardest_tie = (0..3).any(|i| {
        let row: Vec<f64> = (0..3).filter(|&j| j != i).map(|j| s.at(&[i, j])).collect();
        let col: Vec<f64> = (0..3).filter(|&j| j != i).map(|j| s.at(&[j, i])).collect();
        (row[0] - row[1]).abs() < KINK_MARGIN || (col[0] - col[1]).abs() < KINK_MARGIN
    });
    if near_kink || hardest_tie {
        return Ok(None);
    }
    run(&ps, |g, ps| Ok(build(g, ps)?.1), opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_is_usage_error() {
        let r = run_suite(&["nope".into()], &SuiteOptions::default());
        assert!(matches!(r, Err(SanError::Usage(_))));
    }

    #[test]
    fn sta_module_passes() {
        let r = run_suite(&["sta".into()], &SuiteOptions::default()).unwrap();
        assert!(r[0].passed(), "{:?}", r[0].report);
    }
}
