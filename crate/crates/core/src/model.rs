//! The full matching network: wiring of the visual path, the saliency
//! network, the text path and the textual attention under an ablation
//! variant.

use crate::config::ModelConfig;
use crate::error::{Result, SanError};
use crate::evaluation::{TextualRepr, Variant, VisualRepr};
use crate::objective::MarginConfig;
use crate::params::{Initializer, ParamStore};
use crate::saliency;
use crate::sta::{self, Attention};
use crate::tensor::{Graph, Tensor, Var};
use crate::text::{self, TokenSequence, Vocabulary};
use crate::visual;

#[derive(Clone, Debug, PartialEq)]
pub struct SanModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

impl SanModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Self::initial_params(&config, vocab.len(), seed);
        Ok(SanModel {
            config,
            vocab,
            params,
        })
    }

    /// Freshly initialized parameters for the given dimensions.
    pub fn initial_params(config: &ModelConfig, vocab_len: usize, seed: u64) -> ParamStore {
        let mut params = ParamStore::new();
        let mut init = Initializer {
            seed,
            store: &mut params,
        };
        saliency::init_params(config, &mut init);
        visual::init_params(config, &mut init);
        text::init_params(config, vocab_len, &mut init);
        sta::init_params(config, &mut init);
        params
    }

    pub fn tokenize(&self, sentence: &str) -> Result<TokenSequence> {
        text::tokenize(sentence, &self.vocab, self.config.max_len)
    }

    /// Cosine similarity of every image against every caption, `[N×T]`.
    /// Captions are encoded once; each image gets its own graph. Work is split
    /// over up to `threads` scoped threads, results are position-stable.
    pub fn similarity_matrix(&self, images: &[&Tensor], captions: &[TokenSequence], variant: Variant, threads: usize) -> Result<Tensor> {
        if images.is_empty() || captions.is_empty() {
            return Err(SanError::Usage("similarity over an empty gallery".into()));
        }
        let encoded = captions
            .iter()
            .map(|c| EncodedCaption::new(self, c, variant))
            .collect::<Result<Vec<_>>>()?;
        let rows = parallel_map(images, threads, |img| self.similarity_row(img, &encoded, variant))?;
        let data = rows.into_iter().flatten().collect();
        Tensor::new(vec![images.len(), captions.len()], data)
    }

    fn similarity_row(&self, image: &Tensor, captions: &[EncodedCaption], variant: Variant) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let feats = image_features(&mut g, &self.params, &self.config, image, variant)?;
        let vis = feats.embedding(variant);
        captions
            .iter()
            .map(|c| {
                let tf = c.import(&mut g);
                let (txt, _) = textual_embedding(&mut g, &self.params, vis, &tf, variant)?;
                let s = g.cosine(vis, txt)?;
                g.value(s).item()
            })
            .collect()
    }

    /// Intermediate maps for one image-caption pair, for visualization.
    pub fn inspect(&self, image: &Tensor, caption: &TokenSequence, variant: Variant) -> Result<Inspection> {
        let mut g = Graph::new();
        let feats = image_features(&mut g, &self.params, &self.config, image, Variant::FULL)?;
        let sal = feats.saliency.as_ref().expect("full variant computes saliency");
        let vis = feats.embedding(variant);
        let tf = text_features(&mut g, &self.params, caption, true)?;
        let (txt, att) = textual_embedding(&mut g, &self.params, vis, &tf, variant)?;
        let att = match att {
            Some(a) => Some(a),
            None => {
                let m_f = sta::gated_fusion(&mut g, &self.params, vis, tf.global)?;
                let keys = tf.keys.expect("keys requested");
                Some(sta::textual_attention(&mut g, &self.params, m_f, tf.words, keys)?)
            }
        };
        let sim = g.cosine(vis, txt)?;
        Ok(Inspection {
            s1: g.value(sal.s1).clone(),
            visual_weights: g.value(sal.weights).clone(),
            text_weights: g.value(att.expect("attention computed").weights).clone(),
            similarity: g.value(sim).item()?,
        })
    }
}

/// Values exported for one image-caption pair.
#[derive(Clone, Debug)]
pub struct Inspection {
    /// Refined saliency logits `[H×W]`.
    pub s1: Tensor,
    /// Region weights `a_v` `[M]`.
    pub visual_weights: Tensor,
    /// Word weights `a_t` `[L]`.
    pub text_weights: Tensor,
    pub similarity: f64,
}

/// Images in `[0,1]` are centred before entering either conv stack.
pub fn prepare_image(image: &Tensor) -> Tensor {
    image.map(|v| v - 0.5)
}

pub struct SaliencyNodes {
    pub s1: Var,
    pub s2: Var,
    pub weights: Var,
}

pub struct ImageFeatures {
    pub regions: Var,
    pub v_global: Var,
    pub saliency: Option<SaliencyNodes>,
    pub v_salient: Option<Var>,
    pub v_fused: Option<Var>,
}

impl ImageFeatures {
    /// The visual embedding the variant compares against text.
    pub fn embedding(&self, variant: Variant) -> Var {
        match variant.visual {
            VisualRepr::Global => self.v_global,
            VisualRepr::Salient => self.v_salient.expect("saliency branch built for SV"),
            VisualRepr::Fused => self.v_fused.expect("saliency branch built for FV"),
        }
    }
}

/// Builds the visual side. The saliency branch is only added to the graph
/// when the variant reads `v^(s)`.
pub fn image_features(g: &mut Graph, ps: &ParamStore, cfg: &ModelConfig, image: &Tensor, variant: Variant) -> Result<ImageFeatures> {
    let x = g.constant(prepare_image(image));
    let regions = visual::encode_image(g, ps, x)?;
    let v_global = visual::global_visual(g, ps, regions)?;
    let mut feats = ImageFeatures {
        regions,
        v_global,
        saliency: None,
        v_salient: None,
        v_fused: None,
    };
    if variant.visual != VisualRepr::Global {
        let s1 = saliency::forward(g, ps, x)?.s1;
        let grid = cfg.grid();
        let s2 = visual::downsample_saliency(g, s1, grid, grid)?;
        let weights = visual::saliency_weights(g, s2)?;
        let v_s = visual::sva(g, ps, regions, weights)?;
        feats.v_fused = Some(visual::fuse_visual(g, v_global, v_s)?);
        feats.v_salient = Some(v_s);
        feats.saliency = Some(SaliencyNodes { s1, s2, weights });
    }
    Ok(feats)
}

pub struct TextFeatures {
    /// `[L×k]` word features.
    pub words: Var,
    pub global: Var,
    /// `tanh(W_t1 t_j)` rows, present when attention is in use.
    pub keys: Option<Var>,
}

pub fn text_features(g: &mut Graph, ps: &ParamStore, tokens: &TokenSequence, with_keys: bool) -> Result<TextFeatures> {
    let e = text::embed(g, ps, tokens)?;
    let words = text::bigru(g, ps, e)?;
    let global = text::global_textual(g, words)?;
    let keys = if with_keys {
        Some(sta::word_keys(g, ps, words)?)
    } else {
        None
    };
    Ok(TextFeatures { words, global, keys })
}

/// The textual embedding for a pair. With attention enabled the guidance
/// `m_f` fuses the variant's visual embedding with `t^(g)`.
pub fn textual_embedding(g: &mut Graph, ps: &ParamStore, visual: Var, text: &TextFeatures, variant: Variant) -> Result<(Var, Option<Attention>)> {
    if variant.textual == TextualRepr::Global {
        return Ok((text.global, None));
    }
    let keys = text
        .keys
        .ok_or_else(|| SanError::Usage("attention variant needs word keys".into()))?;
    let m_f = sta::gated_fusion(g, ps, visual, text.global)?;
    let att = sta::textual_attention(g, ps, m_f, text.words, keys)?;
    let t = match variant.textual {
        TextualRepr::Attended => att.attended,
        _ => sta::fuse_textual(g, text.global, att.attended)?,
    };
    Ok((t, Some(att)))
}

/// Caption features frozen as plain tensors so they can be re-imported into
/// per-image inference graphs.
struct EncodedCaption {
    words: Tensor,
    global: Tensor,
    keys: Option<Tensor>,
}

impl EncodedCaption {
    fn new(model: &SanModel, tokens: &TokenSequence, variant: Variant) -> Result<Self> {
        let mut g = Graph::new();
        let tf = text_features(&mut g, &model.params, tokens, variant.uses_attention())?;
        Ok(EncodedCaption {
            words: g.value(tf.words).clone(),
            global: g.value(tf.global).clone(),
            keys: tf.keys.map(|k| g.value(k).clone()),
        })
    }

    fn import(&self, g: &mut Graph) -> TextFeatures {
        TextFeatures {
            words: g.constant(self.words.clone()),
            global: g.constant(self.global.clone()),
            keys: self.keys.as_ref().map(|k| g.constant(k.clone())),
        }
    }
}

/// Bidirectional triplet loss over a batch of aligned pairs. Returns the
/// loss node and the `[B×B]` similarity node.
pub fn batch_loss(
    g: &mut Graph,
    model: &SanModel,
    images: &[&Tensor],
    captions: &[&TokenSequence],
    variant: Variant,
    loss: &MarginConfig,
) -> Result<(Var, Var)> {
    if images.len() != captions.len() {
        return Err(SanError::Usage(format!(
            "{} images but {} captions in batch",
            images.len(),
            captions.len()
        )));
    }
    let ps = &model.params;
    let visuals = images
        .iter()
        .map(|img| Ok(image_features(g, ps, &model.config, img, variant)?.embedding(variant)))
        .collect::<Result<Vec<_>>>()?;
    let texts = captions
        .iter()
        .map(|c| text_features(g, ps, c, variant.uses_attention()))
        .collect::<Result<Vec<_>>>()?;
    let mut sims = Vec::with_capacity(images.len() * captions.len());
    for &vis in &visuals {
        for tf in &texts {
            let (t, _) = textual_embedding(g, ps, vis, tf, variant)?;
            sims.push(g.cosine(vis, t)?);
        }
    }
    let b = images.len();
    let flat = g.stack(&sims)?;
    let sim = g.reshape(flat, &[b, b])?;
    let l = g.triplet_loss(sim, loss.margin, loss.negative_mode)?;
    Ok((l, sim))
}

/// Applies `f` to every item using up to `threads` scoped threads; output
/// order matches input order.
pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
