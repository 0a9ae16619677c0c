//! `san`: data generation, two-stage training, retrieval evaluation,
//! attention export and the gradient self-test.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use san::checkpoint::Checkpoint;
use san::config::TrainConfig;
use san::datasets::{self, netpbm, CorpusParams, Sample};
use san::evaluation::{evaluate, evaluate_folds, format_table, ranked_order, run_ablation, RetrievalReport, Variant};
use san::gradsuite::{run_suite, SuiteOptions, TOLERANCE};
use san::model::SanModel;
use san::tensor::Tensor;
use san::text::Vocabulary;
use san::{Result, SanError};

#[derive(Parser)]
#[command(name = "san", version, about = "Saliency-guided attention network for image-sentence matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes corpus with masks and captions.
    GenData(GenDataArgs),
    /// Run stage 1 (saliency) and/or stage 2 (full model).
    Train(TrainArgs),
    /// Retrieval report on a data split, or the variant ablation grid.
    Eval(EvalArgs),
    /// Rank the corpus images for a free-text query.
    Retrieve(RetrieveArgs),
    /// Write the saliency heatmap and both attention distributions of a sample.
    ExportAttention(ExportArgs),
    /// Finite-difference check of every backward rule.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config: training hyperparameters plus optional `data`, `out`,
    /// `checkpoint` and `split` entries. Flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding `manifest.jsonl`, or the manifest itself.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ablation variant such as GV+GT or FV+FT(G-S).
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Largest number of shapes per image (1 or 2).
    #[arg(long, default_value_t = 2)]
    max_shapes: usize,
    #[arg(long, default_value_t = 2)]
    captions: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Run only this stage (1 or 2). Stage 2 alone starts from `--checkpoint`
    /// or `<out>/stage1.ckpt`.
    #[arg(long)]
    stage: Option<u8>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Train and evaluate every variant instead of scoring one checkpoint.
    #[arg(long)]
    ablate: bool,
    /// Seeds for `--ablate`, comma separated.
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Restrict `--ablate` to these variants, comma separated.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    /// Which split to score: train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Average the report over this many equal contiguous galleries.
    #[arg(long, default_value_t = 1)]
    folds: usize,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    /// Sample id from the manifest.
    #[arg(long)]
    sample: String,
    /// Which of the sample's captions to attend over.
    #[arg(long, default_value_t = 0)]
    caption: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict to these modules (repeatable).
    #[arg(long)]
    module: Vec<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Coordinates probed per parameter tensor; 0 probes every coordinate.
    #[arg(long, default_value_t = 6)]
    coords: usize,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// Everything a command needs after merging the config file and flags.
#[derive(Debug)]
struct Resolved {
    train: TrainConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    split: [f64; 3],
}

const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.0, 0.2];

impl Resolved {
    fn load(common: &Common) -> Result<Self> {
        let mut obj = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| SanError::io(path, e))?;
                match serde_json::from_str::<Value>(&text) {
                    Ok(Value::Object(m)) => m,
                    Ok(_) => return Err(SanError::Config(format!("{}: expected a JSON object", path.display()))),
                    Err(e) => return Err(SanError::Config(format!("{}: {e}", path.display()))),
                }
            }
            None => Map::new(),
        };
        let path_entry = |obj: &mut Map<String, Value>, key: &str| -> Result<Option<PathBuf>> {
            match obj.remove(key) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
                Some(other) => Err(SanError::Config(format!("{key} must be a string, got {other}"))),
            }
        };
        let data = path_entry(&mut obj, "data")?;
        let out = path_entry(&mut obj, "out")?;
        let checkpoint = path_entry(&mut obj, "checkpoint")?;
        let split = match obj.remove("split") {
            None => DEFAULT_SPLIT,
            Some(v) => serde_json::from_value(v).map_err(|e| SanError::Config(format!("split: {e}")))?,
        };
        let mut train: TrainConfig =
            serde_json::from_value(Value::Object(obj)).map_err(|e| SanError::Config(e.to_string()))?;
        if let Some(seed) = common.seed {
            train.seed = seed;
        }
        if let Some(v) = &common.variant {
            train.variant = v.parse()?;
        }
        Ok(Resolved {
            train,
            data: common.data.clone().or(data),
            out: common.out.clone().or(out),
            checkpoint: common.checkpoint.clone().or(checkpoint),
            split,
        })
    }

    fn to_json(&self) -> String {
        let mut v = serde_json::to_value(&self.train).expect("serializable config");
        let m = v.as_object_mut().expect("config is an object");
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(Value::Null, |p| Value::from(p.display().to_string()));
        m.insert("data".into(), path(&self.data));
        m.insert("out".into(), path(&self.out));
        m.insert("checkpoint".into(), path(&self.checkpoint));
        m.insert("split".into(), serde_json::to_value(self.split).expect("floats"));
        serde_json::to_string_pretty(&v).expect("serializable") + "\n"
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let out = self
            .out
            .clone()
            .ok_or_else(|| SanError::Usage("--out is required".into()))?;
        fs::create_dir_all(&out).map_err(|e| SanError::io(&out, e))?;
        Ok(out)
    }

    fn echo_config(&self, out: &Path) -> Result<()> {
        write_file(&out.join("config.json"), &self.to_json())
    }

    fn samples(&self) -> Result<Vec<Sample>> {
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| SanError::Usage("--data is required".into()))?;
        let manifest = if data.is_dir() { data.join(datasets::MANIFEST) } else { data.clone() };
        if !manifest.exists() {
            return Err(SanError::Data(format!("no corpus at {}", manifest.display())));
        }
        datasets::load_manifest(&manifest)
    }

    /// Samples of one named split part.
    fn part(&self, samples: &[Sample], which: &str) -> Result<Vec<Sample>> {
        let s = datasets::split(samples.len(), self.split, self.train.seed)?;
        let idx = match which {
            "train" => s.train,
            "val" => s.val,
            "test" => s.test,
            "all" => (0..samples.len()).collect(),
            other => return Err(SanError::Usage(format!("unknown split {other:?}"))),
        };
        Ok(idx.into_iter().map(|i| samples[i].clone()).collect())
    }

    fn load_model(&self) -> Result<SanModel> {
        let path = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| SanError::Usage("--checkpoint is required".into()))?;
        Checkpoint::load(path)?.into_model(self.train.model.clone())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| SanError::io(path, e))
}

fn threads() -> usize {
    std::env::var("SAN_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1)
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let out = args
        .out
        .as_ref()
        .ok_or_else(|| SanError::Usage("--out is required".into()))?;
    let params = CorpusParams {
        seed: args.seed,
        n_samples: args.n,
        image_size: args.image_size,
        max_shapes: args.max_shapes,
        captions_per_image: args.captions,
        ..CorpusParams::default()
    };
    let samples = datasets::generate_corpus(&params)?;
    let manifest = datasets::write_corpus(out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), manifest.display());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = Resolved::load(&args.common)?;
    if let Some(n) = args.iterations {
        cfg.train.stage1.iterations = n;
    }
    if let Some(n) = args.epochs {
        cfg.train.stage2.epochs = n;
    }
    cfg.train.validate()?;
    let (run1, run2) = match args.stage {
        None => (true, true),
        Some(1) => (true, false),
        Some(2) => (false, true),
        Some(s) => return Err(SanError::Usage(format!("--stage must be 1 or 2, got {s}"))),
    };
    let samples = cfg.samples()?;
    let out = cfg.out_dir()?;
    cfg.echo_config(&out)?;
    let train_set = cfg.part(&samples, "train")?;
    let val_set = cfg.part(&samples, "val")?;
    let tc = &cfg.train;

    let mut model = if run1 {
        let vocab = Vocabulary::build(train_set.iter().flat_map(|s| s.captions.iter().map(String::as_str)), 1);
        let mut model = SanModel::new(tc.model.clone(), vocab, tc.seed)?;
        let losses = san::training::train_stage1(tc, &mut model, &train_set)?;
        let mut csv = String::from("iteration,loss\n");
        for (i, l) in losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l:.8}\n"));
        }
        write_file(&out.join("stage1_loss.csv"), &csv)?;
        Checkpoint::of(&model).save(&out.join("stage1.ckpt"))?;
        if let Some(l) = losses.last() {
            eprintln!("stage 1: {} iterations, final loss {l:.4}", losses.len());
        }
        model
    } else {
        let path = cfg.checkpoint.clone().unwrap_or_else(|| out.join("stage1.ckpt"));
        Checkpoint::load(&path)?.into_model(tc.model.clone())?
    };

    if run2 {
        let mut csv = String::from("epoch,loss,val_sR@1,val_iR@1\n");
        let log = san::training::train_stage2(tc, &mut model, &train_set, &val_set, threads(), &mut |rec| {
            match &rec.report {
                Some(r) => eprintln!(
                    "epoch {}: loss {:.4}, val R@1 sentence {:.3} image {:.3}",
                    rec.epoch, rec.mean_loss, r.sentence_r1, r.image_r1
                ),
                None => eprintln!("epoch {}: loss {:.4}", rec.epoch, rec.mean_loss),
            }
            true
        })?;
        for rec in &log {
            let (s, i) = rec
                .report
                .map_or((String::new(), String::new()), |r| (format!("{:.6}", r.sentence_r1), format!("{:.6}", r.image_r1)));
            csv.push_str(&format!("{},{:.8},{s},{i}\n", rec.epoch, rec.mean_loss));
        }
        write_file(&out.join("stage2_log.csv"), &csv)?;
        Checkpoint::of(&model).save(&out.join("stage2.ckpt"))?;
        let (report, _) = evaluate(&model, &train_set, tc.variant, threads())?;
        println!(
            "train R@1: sentence {:.3} image {:.3}",
            report.sentence_r1, report.image_r1
        );
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = Resolved::load(&args.common)?;
    cfg.train.validate()?;
    let samples = cfg.samples()?;
    let out = cfg.out_dir()?;
    cfg.echo_config(&out)?;
    if args.ablate {
        let variants = if args.variants.is_empty() {
            Variant::all()
        } else {
            args.variants.iter().map(|v| v.parse()).collect::<Result<_>>()?
        };
        let train_set = cfg.part(&samples, "train")?;
        let test_set = cfg.part(&samples, args.split.as_str())?;
        let table = run_ablation(&cfg.train, &variants, &args.seeds, &train_set, &test_set, threads(), &mut |m| {
            eprintln!("{m}")
        })?;
        write_file(&out.join("ablation.csv"), &table.to_csv())?;
        let text = table.to_table();
        write_file(&out.join("ablation.txt"), &text)?;
        print!("{text}");
        return Ok(());
    }
    let model = cfg.load_model()?;
    let set = cfg.part(&samples, args.split.as_str())?;
    let variant = cfg.train.variant;
    let report = if args.folds > 1 {
        evaluate_folds(&model, &set, variant, args.folds, threads())?
    } else {
        evaluate(&model, &set, variant, threads())?.0
    };
    let label = variant.to_string();
    let csv = format!("{}\n{}\n", RetrievalReport::csv_header(), report.csv_row(&label));
    write_file(&out.join("report.csv"), &csv)?;
    let text = format_table(&[(label, report)]);
    write_file(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn retrieve(args: &RetrieveArgs) -> Result<()> {
    let cfg = Resolved::load(&args.common)?;
    let model = cfg.load_model()?;
    let samples = cfg.samples()?;
    let tokens = model.tokenize(&args.query)?;
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let sim = model.similarity_matrix(&images, &[tokens], cfg.train.variant, threads())?;
    let scores = sim.data();
    for (rank, i) in ranked_order(scores).into_iter().take(args.top).enumerate() {
        println!("{}\t{}\t{:.6}", rank + 1, samples[i].id, scores[i]);
    }
    Ok(())
}

fn export_attention(args: &ExportArgs) -> Result<()> {
    let cfg = Resolved::load(&args.common)?;
    let model = cfg.load_model()?;
    let samples = cfg.samples()?;
    let sample = samples
        .iter()
        .find(|s| s.id == args.sample)
        .ok_or_else(|| SanError::Data(format!("no sample with id {:?}", args.sample)))?;
    let caption = sample.captions.get(args.caption).ok_or_else(|| {
        SanError::Usage(format!("sample {} has {} captions", sample.id, sample.captions.len()))
    })?;
    let tokens = model.tokenize(caption)?;
    let ins = model.inspect(&sample.image, &tokens, cfg.train.variant)?;
    let out = cfg.out_dir()?;

    let heat = ins.s1.map(san::tensor::kernels::sigmoid);
    netpbm::write(&out.join(format!("{}_saliency.pgm", sample.id)), &datasets::gray_bytes(&heat))?;

    let grid = model.config.grid();
    let mut av = String::new();
    for row in ins.visual_weights.data().chunks(grid) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
        av.push_str(&cells.join(","));
        av.push('\n');
    }
    write_file(&out.join(format!("{}_av.csv", sample.id)), &av)?;

    let mut at = String::new();
    for (tok, w) in tokens.tokens.iter().zip(ins.text_weights.data()) {
        at.push_str(&format!("{tok},{w:.12e}\n"));
    }
    write_file(&out.join(format!("{}_at.csv", sample.id)), &at)?;
    println!("{:?}: similarity {:.6}", caption, ins.similarity);
    Ok(())
}

/// Returns whether every module passed.
fn gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let opts = SuiteOptions {
        seed: args.seed,
        max_coords: (args.coords > 0).then_some(args.coords),
        faulty_tanh: args.inject_fault,
    };
    let results = run_suite(&args.module, &opts)?;
    let mut ok = true;
    for r in &results {
        let worst = r
            .report
            .worst
            .as_ref()
            .map_or(String::from("-"), |(n, i)| format!("{n}[{i}]"));
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        let (a, n) = r.report.worst_values;
        println!(
            "{:<14} max_rel_error {:.3e}  coords {:>5}  worst {worst} (analytic {a:.6e}, numeric {n:.6e})  {verdict}",
            r.module, r.report.max_rel_error, r.report.coordinates
        );
        ok &= r.passed();
    }
    println!("tolerance {TOLERANCE:e}: {}", if ok { "pass" } else { "FAIL" });
    Ok(ok)
}

fn exit_code(e: &SanError) -> u8 {
    match e {
        SanError::Usage(_) | SanError::Config(_) => 1,
        SanError::Data(_) | SanError::Io { .. } | SanError::Checkpoint(_) => 2,
        SanError::Numeric(_) | SanError::Shape { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Retrieve(a) => retrieve(a).map(|_| true),
        Command::ExportAttention(a) => export_attention(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
