//! Bidirectional retrieval metrics, ablation variants and the ablation runner.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::datasets::Sample;
use crate::error::{Result, SanError};
use crate::model::SanModel;
use crate::objective::cosine;
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::training::{train_stage1, train_stage2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VisualRepr {
    /// `v^(g)`
    Global,
    /// `v^(s)`
    Salient,
    /// `v`
    Fused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TextualRepr {
    /// `t^(g)`
    Global,
    /// `t^(s)`
    Attended,
    /// `t`
    Fused,
}

/// Which visual and textual embeddings feed the similarity. Written as
/// `GV+GT`, `SV+ST`, `FV+FT(G-S)` and so on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Variant {
    pub visual: VisualRepr,
    pub textual: TextualRepr,
}

impl Variant {
    pub const FULL: Variant = Variant {
        visual: VisualRepr::Fused,
        textual: TextualRepr::Fused,
    };
    pub const BASELINE: Variant = Variant {
        visual: VisualRepr::Global,
        textual: TextualRepr::Global,
    };

    pub fn all() -> Vec<Variant> {
        let vs = [VisualRepr::Global, VisualRepr::Salient, VisualRepr::Fused];
        let ts = [TextualRepr::Global, TextualRepr::Attended, TextualRepr::Fused];
        vs.iter()
            .flat_map(|&visual| ts.iter().map(move |&textual| Variant { visual, textual }))
            .collect()
    }

    pub fn uses_attention(&self) -> bool {
        self.textual != TextualRepr::Global
    }

    pub fn uses_saliency(&self) -> bool {
        self.visual != VisualRepr::Global
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = match self.visual {
            VisualRepr::Global => "GV",
            VisualRepr::Salient => "SV",
            VisualRepr::Fused => "FV",
        };
        let t = match self.textual {
            TextualRepr::Global => "GT",
            TextualRepr::Attended => "ST",
            TextualRepr::Fused => "FT(G-S)",
        };
        write!(f, "{v}+{t}")
    }
}

impl FromStr for Variant {
    type Err = SanError;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || SanError::Usage(format!("unknown variant {s:?}; expected e.g. GV+GT or FV+FT(G-S)"));
        let (v, t) = s.trim().split_once('+').ok_or_else(unknown)?;
        let visual = match v.trim().to_ascii_uppercase().as_str() {
            "GV" => VisualRepr::Global,
            "SV" => VisualRepr::Salient,
            "FV" => VisualRepr::Fused,
            _ => return Err(unknown()),
        };
        let textual = match t.trim().to_ascii_uppercase().as_str() {
            "GT" => TextualRepr::Global,
            "ST" => TextualRepr::Attended,
            "FT" | "FT(G-S)" => TextualRepr::Fused,
            _ => return Err(unknown()),
        };
        Ok(Variant { visual, textual })
    }
}

impl TryFrom<String> for Variant {
    type Error = SanError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

/// 1-based ranks of the ground truth in both retrieval directions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ranking {
    /// Per image query: best rank among its captions.
    pub sentence: Vec<usize>,
    /// Per caption query: rank of the image it describes.
    pub image: Vec<usize>,
}

/// Gallery order for one query: indices sorted by descending score, ties
/// broken towards the lower index.
pub fn ranked_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Ranks both directions of an `[N×T]` similarity matrix, where caption `j`
/// belongs to image `caption_owner[j]`.
pub fn rank_all(sim: &Tensor, caption_owner: &[usize]) -> Result<Ranking> {
    let &[n, t] = sim.shape() else {
        return Err(SanError::Usage("similarity must be an [images×captions] matrix".into()));
    };
    if caption_owner.len() != t {
        return Err(SanError::shape("rank_all", sim.shape(), &[caption_owner.len()]));
    }
    if let Some(&o) = caption_owner.iter().find(|&&o| o >= n) {
        return Err(SanError::Data(format!("caption owner {o} out of range for {n} images")));
    }
    if !sim.is_finite() {
        return Err(SanError::Numeric("non-finite similarity".into()));
    }
    let s = sim.data();
    let mut sentence = Vec::with_capacity(n);
    for i in 0..n {
        let order = ranked_order(&s[i * t..(i + 1) * t]);
        let best = order
            .iter()
            .position(|&j| caption_owner[j] == i)
            .map(|p| p + 1)
            .ok_or_else(|| SanError::Data(format!("image {i} has no caption")))?;
        sentence.push(best);
    }
    let mut image = Vec::with_capacity(t);
    let mut column = vec![0.0; n];
    for (j, &owner) in caption_owner.iter().enumerate() {
        for (i, c) in column.iter_mut().enumerate() {
            *c = s[i * t + j];
        }
        let order = ranked_order(&column);
        image.push(order.iter().position(|&i| i == owner).expect("owner in range") + 1);
    }
    Ok(Ranking { sentence, image })
}

/// Cosine matrix of raw embeddings followed by [`rank_all`].
pub fn rank_embeddings(images: &[Tensor], texts: &[Tensor], caption_owner: &[usize]) -> Result<(Tensor, Ranking)> {
    if images.is_empty() || texts.is_empty() {
        return Err(SanError::Usage("ranking over an empty gallery".into()));
    }
    let mut data = Vec::with_capacity(images.len() * texts.len());
    for v in images {
        for t in texts {
            data.push(cosine(v, t)?);
        }
    }
    let sim = Tensor::new(vec![images.len(), texts.len()], data)?;
    let ranking = rank_all(&sim, caption_owner)?;
    Ok((sim, ranking))
}

/// Fraction of queries whose rank is at most `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub sentence_r1: f64,
    pub sentence_r5: f64,
    pub sentence_r10: f64,
    pub image_r1: f64,
    pub image_r5: f64,
    pub image_r10: f64,
    pub mean_recall: f64,
}

pub const REPORT_COLUMNS: [&str; 7] = ["sR@1", "sR@5", "sR@10", "iR@1", "iR@5", "iR@10", "mR"];

/// Mean of the six recalls of a report.
pub fn mean_recall(r: &RetrievalReport) -> f64 {
    r.recalls().iter().sum::<f64>() / 6.0
}

impl RetrievalReport {
    pub fn from_recalls(recalls: [f64; 6]) -> Self {
        let mut r = RetrievalReport {
            sentence_r1: recalls[0],
            sentence_r5: recalls[1],
            sentence_r10: recalls[2],
            image_r1: recalls[3],
            image_r5: recalls[4],
            image_r10: recalls[5],
            mean_recall: 0.0,
        };
        r.mean_recall = mean_recall(&r);
        r
    }

    pub fn from_ranking(ranking: &Ranking) -> Self {
        let s = &ranking.sentence;
        let i = &ranking.image;
        Self::from_recalls([
            recall_at_k(s, 1),
            recall_at_k(s, 5),
            recall_at_k(s, 10),
            recall_at_k(i, 1),
            recall_at_k(i, 5),
            recall_at_k(i, 10),
        ])
    }

    pub fn recalls(&self) -> [f64; 6] {
        [
            self.sentence_r1,
            self.sentence_r5,
            self.sentence_r10,
            self.image_r1,
            self.image_r5,
            self.image_r10,
        ]
    }

    fn values(&self) -> [f64; 7] {
        let r = self.recalls();
        [r[0], r[1], r[2], r[3], r[4], r[5], self.mean_recall]
    }

    pub fn csv_header() -> String {
        format!("variant,{}", REPORT_COLUMNS.join(","))
    }

    pub fn csv_row(&self, label: &str) -> String {
        let vals: Vec<String> = self.values().iter().map(|v| format!("{v:.6}")).collect();
        format!("{label},{}", vals.join(","))
    }
}

/// Human-readable table, one row per labelled report, values in percent.
pub fn format_table(rows: &[(String, RetrievalReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("variant".len());
    let mut out = format!("{:<width$}", "variant");
    for c in REPORT_COLUMNS {
        out.push_str(&format!(" {c:>7}"));
    }
    out.push('\n');
    for (label, r) in rows {
        out.push_str(&format!("{label:<width$}"));
        for v in r.values() {
            out.push_str(&format!(" {:>7.2}", 100.0 * v));
        }
        out.push('\n');
    }
    out
}

/// Scores every image of `samples` against every caption of `samples`.
pub fn evaluate(model: &SanModel, samples: &[Sample], variant: Variant, threads: usize) -> Result<(RetrievalReport, Ranking)> {
    if samples.is_empty() {
        return Err(SanError::Usage("evaluation over an empty gallery".into()));
    }
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let mut captions = Vec::new();
    let mut owner = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for c in &s.captions {
            captions.push(model.tokenize(c)?);
            owner.push(i);
        }
    }
    let sim = model.similarity_matrix(&images, &captions, variant, threads)?;
    let ranking = rank_all(&sim, &owner)?;
    Ok((RetrievalReport::from_ranking(&ranking), ranking))
}

/// Splits `samples` into `folds` contiguous galleries of equal size, scores
/// each on its own and averages the six recalls. Leftover samples after the
/// last full fold are not scored.
pub fn evaluate_folds(model: &SanModel, samples: &[Sample], variant: Variant, folds: usize, threads: usize) -> Result<RetrievalReport> {
    if folds == 0 || samples.len() < folds {
        return Err(SanError::Usage(format!(
            "cannot cut {} samples into {folds} folds",
            samples.len()
        )));
    }
    let size = samples.len() / folds;
    let mut sums = [0.0; 6];
    for fold in samples.chunks_exact(size).take(folds) {
        let (r, _) = evaluate(model, fold, variant, threads)?;
        for (s, v) in sums.iter_mut().zip(r.recalls()) {
            *s += v;
        }
    }
    Ok(RetrievalReport::from_recalls(sums.map(|s| s / folds as f64)))
}

/// Per-seed and seed-averaged reports of an ablation run.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    /// `(variant, seed, report)` in variant-major order.
    pub runs: Vec<(Variant, u64, RetrievalReport)>,
}

impl AblationTable {
    pub fn variants(&self) -> Vec<Variant> {
        let mut out: Vec<Variant> = Vec::new();
        for (v, _, _) in &self.runs {
            if !out.contains(v) {
                out.push(*v);
            }
        }
        out
    }

    /// Report whose entries are the per-seed means for `variant`.
    pub fn mean(&self, variant: Variant) -> Option<RetrievalReport> {
        let reports: Vec<_> = self.runs.iter().filter(|r| r.0 == variant).map(|r| r.2).collect();
        if reports.is_empty() {
            return None;
        }
        let mut acc = [0.0; 6];
        for r in &reports {
            for (a, v) in acc.iter_mut().zip(r.recalls()) {
                *a += v;
            }
        }
        Some(RetrievalReport::from_recalls(acc.map(|a| a / reports.len() as f64)))
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("variant,seed,{}\n", REPORT_COLUMNS.join(","));
        for (v, seed, r) in &self.runs {
            let row = r.csv_row(&format!("{v},{seed}"));
            out.push_str(&row);
            out.push('\n');
        }
        for v in self.variants() {
            let row = self.mean(v).expect("variant has runs").csv_row(&format!("{v},mean"));
            out.push_str(&row);
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let rows: Vec<_> = self
            .variants()
            .into_iter()
            .map(|v| (v.to_string(), self.mean(v).expect("variant has runs")))
            .collect();
        format_table(&rows)
    }
}

/// Trains and evaluates every variant under every seed. Stage 1 does not
/// depend on the variant, so it runs once per seed and is shared.
pub fn run_ablation(
    config: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    train: &[Sample],
    test: &[Sample],
    threads: usize,
    progress: &mut dyn FnMut(&str),
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(SanError::Usage("ablation needs at least one variant and one seed".into()));
    }
    let vocab = Vocabulary::build(train.iter().flat_map(|s| s.captions.iter().map(String::as_str)), 1);
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            ..config.clone()
        };
        let mut base = SanModel::new(cfg.model.clone(), vocab.clone(), seed)?;
        let log = train_stage1(&cfg, &mut base, train)?;
        progress(&format!(
            "seed {seed}: stage 1 final loss {:.4}",
            log.last().copied().unwrap_or(f64::NAN)
        ));
        let mut reports = Vec::new();
        for &variant in variants {
            let cfg = TrainConfig {
                variant,
                ..cfg.clone()
            };
            let mut model = base.clone();
            train_stage2(&cfg, &mut model, train, &[], threads, &mut |_| true)?;
            let (report, _) = evaluate(&model, test, variant, threads)?;
            progress(&format!("seed {seed}: {variant} mR {:.4}", report.mean_recall));
            reports.push((variant, seed, report));
        }
        per_seed.push(reports);
    }
    let mut runs = Vec::new();
    for (vi, _) in variants.iter().enumerate() {
        for reports in &per_seed {
            runs.push(reports[vi]);
        }
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        runs,
    })
}
