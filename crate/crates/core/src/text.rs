//! Sentence side: tokenization, word embedding, bi-directional GRU and the
//! global textual feature `t^(g)`.

use std::collections::BTreeMap;

use crate::config::ModelConfig;
use crate::error::{Result, SanError};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const RESERVED: [&str; 2] = ["<pad>", "<unk>"];

/// Token ↔ id mapping. Ids 0 and 1 are reserved for padding and unknown
/// tokens; the rest are assigned in lexicographic token order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary keeping every token that occurs at least
    /// `min_count` times.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in sentences {
            for t in split_words(s) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let kept = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .map(|(t, _)| t);
        Self::from_tokens(kept)
    }

    /// Vocabulary with the reserved ids followed by `tokens` in the given
    /// order. Duplicates are skipped.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocabulary {
            ids: BTreeMap::new(),
            tokens: Vec::new(),
        };
        for t in RESERVED.iter().map(|s| s.to_string()).chain(tokens) {
            if !v.ids.contains_key(&t) {
                v.ids.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tokens in id order, reserved entries included.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Serialized form: one `token\tid` line per entry, ascending id.
    pub fn to_text(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| SanError::Data(format!("vocabulary line {}: missing tab", n + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| SanError::Data(format!("vocabulary line {}: bad id {id:?}", n + 1)))?;
            if id != n {
                return Err(SanError::Data(format!(
                    "vocabulary line {}: ids must be dense and ascending, got {id}",
                    n + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..2] != RESERVED {
            return Err(SanError::Data("vocabulary is missing reserved tokens".into()));
        }
        let v = Vocabulary::from_tokens(tokens.iter().skip(2).cloned());
        if v.len() != tokens.len() {
            return Err(SanError::Data("vocabulary contains duplicate tokens".into()));
        }
        Ok(v)
    }
}

/// Lowercased words, split on whitespace and punctuation.
pub fn split_words(sentence: &str) -> Vec<String> {
    sentence
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// A tokenized sentence: ids plus the surface tokens they came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Tokens joined by single spaces.
    pub fn detokenize(&self) -> String {
        self.tokens.join(" ")
    }
}

pub fn tokenize(sentence: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    let mut tokens = split_words(sentence);
    if tokens.is_empty() {
        return Err(SanError::Data(format!("empty sentence {sentence:?}")));
    }
    tokens.truncate(max_len.max(1));
    let ids = tokens.iter().map(|t| vocab.id(t)).collect();
    Ok(TokenSequence { ids, tokens })
}

const GATES: [&str; 3] = ["z", "r", "h"];

pub fn init_params(cfg: &ModelConfig, vocab_len: usize, init: &mut Initializer<'_>) {
    let (e, k) = (cfg.embed_dim, cfg.joint_dim);
    init.matrix("text.embed", e, vocab_len);
    for dir in ["fwd", "bwd"] {
        for gate in GATES {
            init.matrix(&format!("text.gru_{dir}.w{gate}"), k, e);
            init.matrix(&format!("text.gru_{dir}.u{gate}"), k, k);
            init.zeros(&format!("text.gru_{dir}.b{gate}"), &[k]);
        }
    }
}

/// Word embeddings `[L×e]`; row `j` is column `ids[j]` of `W_e`.
pub fn embed(g: &mut Graph, ps: &ParamStore, tokens: &TokenSequence) -> Result<Var> {
    let w = g.param(ps, "text.embed")?;
    g.gather_columns(w, &tokens.ids)
}

/// Which parameter set a GRU direction reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn prefix(self) -> &'static str {
        match self {
            Direction::Forward => "text.gru_fwd",
            Direction::Backward => "text.gru_bwd",
        }
    }
}

struct GruCell {
    w: [Var; 3],
    u: [Var; 3],
    b: [Var; 3],
    ones: Var,
}

impl GruCell {
    fn register(g: &mut Graph, ps: &ParamStore, prefix: &str) -> Result<Self> {
        let mut get = |kind: &str| -> Result<[Var; 3]> {
            let mut out = [None; 3];
            for (slot, gate) in out.iter_mut().zip(GATES) {
                *slot = Some(g.param(ps, &format!("{prefix}.{kind}{gate}"))?);
            }
            Ok(out.map(|v| v.expect("filled")))
        };
        let (w, u, b) = (get("w")?, get("u")?, get("b")?);
        let k = g.shape(b[0])[0];
        let ones = g.constant(Tensor::ones(&[k]));
        Ok(GruCell { w, u, b, ones })
    }

    fn gate(&self, g: &mut Graph, i: usize, x: Var, h: Var) -> Result<Var> {
        let wx = g.matvec(self.w[i], x)?;
        let uh = g.matvec(self.u[i], h)?;
        let s = g.add(wx, uh)?;
        g.add(s, self.b[i])
    }

    /// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
    /// `h̃ = tanh(W_h x + U_h (r⊙h) + b_h)`, `h' = (1−z)⊙h + z⊙h̃`.
    fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let pz = self.gate(g, 0, x, h)?;
        let z = g.sigmoid(pz);
        let pr = self.gate(g, 1, x, h)?;
        let r = g.sigmoid(pr);
        let rh = g.mul(r, h)?;
        let pc = self.gate(g, 2, x, rh)?;
        let cand = g.tanh(pc);
        let keep = g.sub(self.ones, z)?;
        let old = g.mul(keep, h)?;
        let new = g.mul(z, cand)?;
        g.add(old, new)
    }
}

/// Runs one GRU direction over the rows of `[L×e]` from a zero state and
/// returns the hidden states in position order.
pub fn gru_pass(g: &mut Graph, ps: &ParamStore, embeddings: Var, dir: Direction, reversed: bool) -> Result<Vec<Var>> {
    let cell = GruCell::register(g, ps, dir.prefix())?;
    let l = g.shape(embeddings)[0];
    let k = g.shape(cell.b[0])[0];
    let mut h = g.constant(Tensor::zeros(&[k]));
    let mut states = vec![None; l];
    let order: Vec<usize> = if reversed { (0..l).rev().collect() } else { (0..l).collect() };
    for j in order {
        let x = g.row(embeddings, j)?;
        h = cell.step(g, x, h)?;
        states[j] = Some(h);
    }
    Ok(states.into_iter().map(|s| s.expect("every position visited")).collect())
}

/// `t_j = (h^f_j + h^b_j) / 2`, stacked into `[L×k]`.
pub fn bigru(g: &mut Graph, ps: &ParamStore, embeddings: Var) -> Result<Var> {
    bigru_with(g, ps, embeddings, Direction::Forward, Direction::Backward)
}

/// Bi-GRU with explicit parameter sets for the left-to-right and
/// right-to-left passes.
pub fn bigru_with(g: &mut Graph, ps: &ParamStore, embeddings: Var, left_to_right: Direction, right_to_left: Direction) -> Result<Var> {
    if g.shape(embeddings).len() != 2 {
        return Err(SanError::Config("bigru expects an [L×e] matrix".into()));
    }
    let fwd = gru_pass(g, ps, embeddings, left_to_right, false)?;
    let bwd = gru_pass(g, ps, embeddings, right_to_left, true)?;
    let words = fwd
        .into_iter()
        .zip(bwd)
        .map(|(f, b)| g.average(f, b))
        .collect::<Result<Vec<_>>>()?;
    g.stack(&words)
}

/// `t^(g) = (1/L) Σ_j t_j`.
pub fn global_textual(g: &mut Graph, words: Var) -> Result<Var> {
    g.mean_axis(words, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["a", "red", "circle"].map(String::from))
    }

    #[test]
    fn tokenize_direct_lookup_and_unk() {
        let v = vocab();
        assert_eq!(tokenize("A red circle.", &v, 16).unwrap().ids, vec![2, 3, 4]);
        assert_eq!(tokenize("a blue circle", &v, 16).unwrap().ids, vec![2, UNK, 4]);
        assert!(matches!(tokenize("  ?! ", &v, 16), Err(SanError::Data(_))));
    }

    #[test]
    fn tokenize_truncates_and_round_trips() {
        let v = vocab();
        let t = tokenize("a red, red circle; a circle!", &v, 4).unwrap();
        assert_eq!(t.len(), 4);
        let again = tokenize(&t.detokenize(), &v, 4).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn vocabulary_text_round_trip() {
        let v = Vocabulary::build(["The blue square", "a red circle", "the red square"], 1);
        assert_eq!(v.token(0), Some("<pad>"));
        assert_eq!(v.token(1), Some("<unk>"));
        assert_eq!(v.id("blue"), 3);
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_text("x\t0\n").is_err());
    }

    #[test]
    fn identity_embedding_gives_basis_vectors() {
        let mut ps = ParamStore::new();
        ps.insert("text.embed", Tensor::identity(5));
        let mut g = Graph::new();
        let seq = tokenize("red circle red", &vocab(), 16).unwrap();
        let e = embed(&mut g, &ps, &seq).unwrap();
        let m = g.value(e);
        assert_eq!(&m.data()[0..5], &[0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(&m.data()[5..10], &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(&m.data()[0..5], &m.data()[10..15]);
    }

    #[test]
    fn zero_gru_gives_zero_features() {
        let cfg = ModelConfig::tiny();
        let mut ps = ParamStore::new();
        init_params(&cfg, 5, &mut Initializer { seed: 0, store: &mut ps });
        for (name, t) in ps.iter_mut() {
            if name.starts_with("text.gru") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let seq = tokenize("a red circle", &vocab(), 16).unwrap();
        let e = embed(&mut g, &ps, &seq).unwrap();
        let t = bigru(&mut g, &ps, e).unwrap();
        assert_eq!(g.shape(t), &[3, cfg.joint_dim]);
        assert!(g.value(t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn global_textual_cases() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::matrix(&[&[0.3, -0.7]]).unwrap());
        let m = global_textual(&mut g, one).unwrap();
        assert_eq!(g.value(m).data(), &[0.3, -0.7]);
        let two = g.constant(Tensor::matrix(&[&[2.0, 0.0], &[0.0, 2.0]]).unwrap());
        let m = global_textual(&mut g, two).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 1.0]);
    }
}
