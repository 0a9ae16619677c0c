//! End-to-end acceptance criteria. Each test prints one `PASS`/`FAIL` line
//! straight to stdout so the verdicts show up even when output is captured.
//! The tests take a shared lock so the timed runs do not compete for CPU.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;

use san::checkpoint::Checkpoint;
use san::config::{ModelConfig, TrainConfig};
use san::datasets::{generate_corpus, split, CorpusParams, Sample};
use san::evaluation::{evaluate, rank_all, recall_at_k, run_ablation, RetrievalReport, Variant};
use san::gradsuite::{run_suite, SuiteOptions, TOLERANCE};
use san::model::SanModel;
use san::objective::{triplet_loss, MarginConfig};
use san::params::{named_rng, Initializer, ParamStore};
use san::tensor::{Graph, Tensor};
use san::text::Vocabulary;
use san::training::{train_stage1, train_stage2};
use san::{saliency, sta, visual};

static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    let line = format!(
        "acceptance {id} {name}: {} ({detail})\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(ok, "{}", line.trim_end());
}

fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn vocab_of(samples: &[Sample]) -> Vocabulary {
    Vocabulary::build(samples.iter().flat_map(|s| s.captions.iter().map(String::as_str)), 1)
}

#[test]
fn c1_gradient_suite() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let results = run_suite(&[], &SuiteOptions::default()).unwrap();
    let elapsed = t.elapsed();
    let worst = results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.module).collect();
    let ok = failed.is_empty() && results.len() == 7 && elapsed <= Duration::from_secs(120);
    verdict(
        1,
        "gradient suite",
        ok,
        &format!("{} modules, worst rel error {worst:.2e} <= {TOLERANCE:e}, failed {failed:?}, {elapsed:.1?}", results.len()),
    );
}

#[test]
fn c2_attention_weights_normalize() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = ModelConfig::tiny();
    let words: Vec<String> = ["a", "red", "blue", "circle", "square", "left", "of", "the", "triangle"]
        .map(String::from)
        .to_vec();
    let vocab = Vocabulary::from_tokens(words.clone());
    let mut rng = named_rng(2, "acceptance.normalization");
    let (mut worst_v, mut worst_t) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let mut model = SanModel::new(cfg.clone(), vocab.clone(), i).unwrap();
        let scale = rng.gen_range(0.5..4.0);
        for (_, p) in model.params.iter_mut() {
            *p = p.map(|v| v * scale);
        }
        let image = random(&mut rng, &[3, 16, 16], 0.5).map(|v| v + 0.5);
        let len = rng.gen_range(1..=cfg.max_len);
        let sentence: Vec<&str> = (0..len).map(|_| words[rng.gen_range(0..words.len())].as_str()).collect();
        let tokens = model.tokenize(&sentence.join(" ")).unwrap();
        let ins = model.inspect(&image, &tokens, Variant::FULL).unwrap();
        worst_v = worst_v.max((ins.visual_weights.sum() - 1.0).abs());
        worst_t = worst_t.max((ins.text_weights.sum() - 1.0).abs());
    }
    verdict(
        2,
        "attention normalization",
        worst_v <= 1e-9 && worst_t <= 1e-12,
        &format!("1000 instances each, max |sum a_v - 1| {worst_v:.1e}, max |sum a_t - 1| {worst_t:.1e}"),
    );
}

#[test]
fn c3_triplet_loss_oracle() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = MarginConfig::default();
    let mut rng = named_rng(3, "acceptance.loss");
    let mut mismatches = 0;
    for _ in 0..100 {
        let s = random(&mut rng, &[4, 4], 1.0);
        let mut want = 0.0;
        for i in 0..4 {
            for j in (0..4).filter(|&j| j != i) {
                want += f64::max(0.0, cfg.margin - s.at(&[i, i]) + s.at(&[j, i]));
            }
            for j in (0..4).filter(|&j| j != i) {
                want += f64::max(0.0, cfg.margin - s.at(&[i, i]) + s.at(&[i, j]));
            }
        }
        mismatches += usize::from(triplet_loss(&s, &cfg).unwrap() != want);
    }
    let worked = triplet_loss(&Tensor::matrix(&[&[0.5, 0.1], &[0.6, 0.9]]).unwrap(), &cfg).unwrap();
    verdict(
        3,
        "triplet loss",
        mismatches == 0 && worked == 0.3,
        &format!("{mismatches}/100 mismatches, worked example {worked}"),
    );
}

#[test]
fn c4_metric_oracle() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = named_rng(4, "acceptance.metrics");
    let mut bad = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..30);
        let per = rng.gen_range(1..4);
        let t = n * per;
        let owner: Vec<usize> = (0..t).map(|j| j / per).collect();
        let sim = Tensor::new(vec![n, t], (0..n * t).map(|_| rng.gen_range(0..8) as f64 / 7.0).collect()).unwrap();
        let ranking = rank_all(&sim, &owner).unwrap();
        let sorted_rank = |scores: Vec<(f64, usize)>, hit: &dyn Fn(usize) -> bool| {
            let mut s = scores;
            s.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            s.iter().position(|&(_, j)| hit(j)).unwrap() + 1
        };
        let sentence: Vec<usize> = (0..n)
            .map(|i| sorted_rank((0..t).map(|j| (sim.at(&[i, j]), j)).collect(), &|j| owner[j] == i))
            .collect();
        let image: Vec<usize> = (0..t)
            .map(|j| sorted_rank((0..n).map(|i| (sim.at(&[i, j]), i)).collect(), &|i| i == owner[j]))
            .collect();
        let hits = |r: &[usize], k: usize| r.iter().filter(|&&x| x <= k).count() as f64 / r.len() as f64;
        let six = [
            hits(&sentence, 1),
            hits(&sentence, 5),
            hits(&sentence, 10),
            hits(&image, 1),
            hits(&image, 5),
            hits(&image, 10),
        ];
        let report = RetrievalReport::from_ranking(&ranking);
        let ok = ranking.sentence == sentence
            && ranking.image == image
            && report.recalls() == six
            && recall_at_k(&image, 10) == six[5]
            && report.mean_recall == six.iter().sum::<f64>() / 6.0;
        bad += usize::from(!ok);
    }
    verdict(4, "retrieval metrics", bad == 0, &format!("{bad}/100 rankings disagree with the sort oracle"));
}

#[test]
fn c5_overfit_sixteen_samples() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let samples = generate_corpus(&CorpusParams {
        seed: 0,
        n_samples: 16,
        ..CorpusParams::default()
    })
    .unwrap();
    let mut cfg = TrainConfig::default();
    cfg.stage2.epochs = 500;
    let mut model = SanModel::new(cfg.model.clone(), vocab_of(&samples), cfg.seed).unwrap();
    train_stage1(&cfg, &mut model, &samples).unwrap();
    let log = train_stage2(&cfg, &mut model, &samples, &samples, 1, &mut |r| {
        let rep = r.report.expect("monitored");
        !(rep.sentence_r1 == 1.0 && rep.image_r1 == 1.0)
    })
    .unwrap();
    let elapsed = t.elapsed();
    let last = log.last().unwrap();
    let rep = last.report.unwrap();
    let ok = rep.sentence_r1 == 1.0 && rep.image_r1 == 1.0 && elapsed <= Duration::from_secs(300);
    verdict(
        5,
        "overfit",
        ok,
        &format!(
            "train R@1 sentence {:.3} image {:.3} after {} stage-2 epochs, {elapsed:.1?}",
            rep.sentence_r1,
            rep.image_r1,
            last.epoch + 1
        ),
    );
}

#[test]
fn c6_saliency_learnability() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let samples = generate_corpus(&CorpusParams {
        seed: 5,
        n_samples: 250,
        ..CorpusParams::default()
    })
    .unwrap();
    let (train, test) = samples.split_at(200);
    let cfg = TrainConfig::default();
    let mut model = SanModel::new(cfg.model.clone(), vocab_of(train), cfg.seed).unwrap();
    train_stage1(&cfg, &mut model, train).unwrap();
    let pairs: Vec<(&Tensor, &Tensor)> = test.iter().map(|s| (&s.image, &s.mask)).collect();
    let f1 = saliency::pixel_f1(&model.params, &pairs).unwrap();
    let elapsed = t.elapsed();
    verdict(
        6,
        "saliency learnability",
        f1 >= 0.7 && elapsed <= Duration::from_secs(300),
        &format!("pixel F1 {f1:.4} on 50 held-out samples after {} iterations, {elapsed:.1?}", cfg.stage1.iterations),
    );
}

#[test]
fn c7_ablation_direction() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t = Instant::now();
    let samples = generate_corpus(&CorpusParams {
        seed: 0,
        n_samples: 250,
        ..CorpusParams::default()
    })
    .unwrap();
    let parts = split(samples.len(), [0.8, 0.0, 0.2], 0).unwrap();
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (train, test) = (pick(&parts.train), pick(&parts.test));
    let variants: Vec<Variant> = ["GV+GT", "SV+GT", "FV+FT(G-S)"].iter().map(|v| v.parse().unwrap()).collect();
    let table = run_ablation(&TrainConfig::default(), &variants, &[0, 1, 2], &train, &test, 1, &mut |_| {}).unwrap();
    let elapsed = t.elapsed();
    let mr = |v: Variant| table.mean(v).unwrap().mean_recall;
    let (gv, sv, fv) = (mr(variants[0]), mr(variants[1]), mr(variants[2]));
    let holds = |x: f64| x >= gv - 0.01;
    let ties: Vec<&str> = [("SV+GT", sv), ("FV+FT(G-S)", fv)]
        .into_iter()
        .filter(|&(_, x)| x < gv && holds(x))
        .map(|(n, _)| n)
        .collect();
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(table.to_table().as_bytes());
    drop(out);
    verdict(
        7,
        "ablation direction",
        holds(sv) && holds(fv) && elapsed <= Duration::from_secs(1800),
        &format!(
            "{} train / {} test, mean mR GV+GT {gv:.4}, SV+GT {sv:.4}, FV+FT(G-S) {fv:.4}, ties within 0.01 {ties:?}, {elapsed:.1?}",
            train.len(),
            test.len()
        ),
    );
}

#[test]
fn c8_reductions() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = ModelConfig::default();
    let mut rng = named_rng(8, "acceptance.reductions");

    let mut ps = ParamStore::new();
    visual::init_params(&cfg, &mut Initializer { seed: 8, store: &mut ps });
    ps.insert("visual.proj_global.b", random(&mut rng, &[cfg.joint_dim], 0.3));
    for part in ["w", "b"] {
        let t = ps.get(&format!("visual.proj_global.{part}")).unwrap().clone();
        ps.insert(&format!("visual.proj_salient.{part}"), t);
    }
    let mut g = Graph::new();
    let regions = g.constant(random(&mut rng, &[16, cfg.feature_dim], 1.0));
    let s2 = g.constant(Tensor::full(&[4, 4], 0.37));
    let a_v = visual::saliency_weights(&mut g, s2).unwrap();
    let v_s = visual::sva(&mut g, &ps, regions, a_v).unwrap();
    let v_g = visual::global_visual(&mut g, &ps, regions).unwrap();
    let sva_gap = g.value(v_s).max_abs_diff(g.value(v_g));

    let mut ps = ParamStore::new();
    sta::init_params(&cfg, &mut Initializer { seed: 8, store: &mut ps });
    let mut g = Graph::new();
    let t1 = random(&mut rng, &[1, cfg.joint_dim], 1.0);
    let words = g.constant(t1.clone());
    let m_f = g.constant(random(&mut rng, &[cfg.joint_dim], 1.0));
    let keys = sta::word_keys(&mut g, &ps, words).unwrap();
    let att = sta::textual_attention(&mut g, &ps, m_f, words, keys).unwrap();
    let sta_exact = g.value(att.attended).data() == t1.data() && g.value(att.weights).data() == [1.0];

    let mut ps = ParamStore::new();
    saliency::init_params(&cfg, &mut Initializer { seed: 8, store: &mut ps });
    for name in ["saliency.rrb.conv2.w", "saliency.rrb.conv2.b"] {
        let z = Tensor::zeros(ps.get(name).unwrap().shape());
        ps.insert(name, z);
    }
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, &[3, 32, 32], 0.5));
    let out = saliency::forward(&mut g, &ps, x).unwrap();
    let up = g.upsample_nearest(out.s0, 2, 2).unwrap();
    let up = g.reshape(up, &[32, 32]).unwrap();
    let rrb_exact = g.value(up) == g.value(out.s1);

    verdict(
        8,
        "reductions",
        sva_gap <= 1e-12 && sta_exact && rrb_exact,
        &format!("SVA vs global max gap {sva_gap:.1e}, STA with L=1 exact {sta_exact}, zero residual S1 = up(S0) exact {rrb_exact}"),
    );
}

fn short_run(samples: &[Sample]) -> (Vec<u8>, String) {
    let mut cfg = TrainConfig::default();
    cfg.seed = 9;
    cfg.stage1.iterations = 20;
    cfg.stage2.epochs = 3;
    let mut model = SanModel::new(cfg.model.clone(), vocab_of(samples), cfg.seed).unwrap();
    train_stage1(&cfg, &mut model, samples).unwrap();
    train_stage2(&cfg, &mut model, samples, &[], 1, &mut |_| true).unwrap();
    let (report, _) = evaluate(&model, samples, cfg.variant, 1).unwrap();
    let text = format!("{}\n{}\n", RetrievalReport::csv_header(), report.csv_row(&cfg.variant.to_string()));
    (Checkpoint::of(&model).to_bytes(), text)
}

#[test]
fn c9_determinism_and_persistence() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let samples = generate_corpus(&CorpusParams {
        seed: 9,
        n_samples: 16,
        ..CorpusParams::default()
    })
    .unwrap();
    let (ck_a, rep_a) = short_run(&samples);
    let (ck_b, rep_b) = short_run(&samples);
    let runs_equal = ck_a == ck_b && rep_a == rep_b;

    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    std::fs::write(&first, &ck_a).unwrap();
    let model = Checkpoint::load(&first).unwrap().into_model(ModelConfig::default()).unwrap();
    Checkpoint::of(&model).save(&second).unwrap();
    let round_trip = std::fs::read(&second).unwrap() == ck_a;

    verdict(
        9,
        "determinism and persistence",
        runs_equal && round_trip,
        &format!("repeat runs byte-identical {runs_equal}, save-load-save byte-identical {round_trip}"),
    );
}
