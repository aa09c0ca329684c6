use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use beaa::config::RunConfig;
use beaa::data::Split;
use beaa::inference::{self, OpTimings};
use beaa::model::{ActivationKind, ModelWeights};
use beaa::report::{self, EvalRecord};
use beaa::store::{self, Checkpoint, InputNorm};
use beaa::{packing, pipeline, training};
use ckks::{CkksContext, HeBackend};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "beaa", version, about = "Element-wise polynomial CNNs over CKKS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; unspecified fields take defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// HE preset: desk, large, or toy-<N>-<levels>.
    #[arg(long)]
    preset: Option<String>,
    /// Topology: squeezenet, desk, or a JSON file.
    #[arg(long)]
    topology: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Images per ciphertext batch.
    #[arg(long = "batch-size", short = 'm')]
    batch_size: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(d) = &self.out_dir {
            c.out_dir = d.clone();
        }
        if let Some(p) = &self.preset {
            c.he.preset = p.clone();
        }
        if let Some(t) = &self.topology {
            c.topology = t.clone();
        }
        if let Some(e) = self.epochs {
            c.train.epochs = e;
        }
        if let Some(m) = self.batch_size {
            c.he.batch_size = m;
        }
        c.validate()?;
        c.write_resolved(&c.out_dir)?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the ReLU teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Train the polynomial student, optionally distilling from a teacher.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// e.g. poly-layer, poly-channel, poly-element.
        #[arg(long)]
        activation: Option<String>,
        /// Output file name inside the run directory.
        #[arg(long, default_value = "student.beaa")]
        name: String,
    },
    /// Generate parameters and keys into a directory.
    Keygen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keys: PathBuf,
        /// Rotation steps to generate keys for.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        rotations: Vec<i64>,
    },
    /// Encrypt the first M test images, sharded per channel.
    Encrypt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run a model on an encrypted batch using public keys only.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decrypt an encrypted result into a logits CSV.
    Decrypt {
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Plaintext accuracy of a model on a split.
    EvalPlain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write logits for the first M images of the split.
        #[arg(long)]
        logits: Option<PathBuf>,
    },
    /// Time encrypted inference across batch sizes.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Model to compile; a random initialization of the topology if absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Utilization, counts, depth, modelled costs, and collected accuracies.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::TrainTeacher { common } => train_teacher(&common.resolve()?),
        Command::TrainStudent {
            common,
            teacher,
            activation,
            name,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(a) = activation {
                cfg.activation = a;
                cfg.write_resolved(&cfg.out_dir)?;
            }
            train_student(&cfg, teacher.as_deref(), &name)
        }
        Command::Keygen {
            common,
            keys,
            rotations,
        } => keygen(&common.resolve()?, &keys, &rotations),
        Command::Encrypt { common, keys, output } => encrypt(&common.resolve()?, &keys, &output),
        Command::Infer {
            common,
            model,
            keys,
            input,
            output,
        } => {
            common.resolve()?;
            infer(&model, &keys, &input, &output)
        }
        Command::Decrypt { keys, input, output } => decrypt(&keys, &input, &output),
        Command::EvalPlain {
            common,
            model,
            split,
            logits,
        } => eval_plain(&common.resolve()?, &model, &split, logits.as_deref()),
        Command::Benchmark { common, model, sizes } => benchmark(&common.resolve()?, model.as_deref(), &sizes),
        Command::Report { common } => report(&common.resolve()?),
    }
}

fn norm_of(ds: &beaa::data::Dataset) -> InputNorm {
    InputNorm {
        mean: ds.mean.clone(),
        std: ds.std.clone(),
    }
}

fn write_metrics(path: &Path, metrics: &[training::EpochMetrics]) -> Result<()> {
    training::write_metrics_csv(fs::File::create(path)?, metrics)?;
    Ok(())
}

fn train_teacher(cfg: &RunConfig) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let spec = cfg.topology(ds.image_shape(), ds.num_classes, ActivationKind::Relu)?;
    let out = training::train_teacher(&spec, &ds, &cfg.train_config())?;
    write_metrics(&cfg.out_dir.join("metrics_teacher.csv"), &out.metrics)?;
    let path = cfg.out_dir.join("teacher.beaa");
    store::save_checkpoint(
        &Checkpoint {
            spec,
            weights: out.weights,
            norm: norm_of(&ds),
        },
        &path,
    )?;
    println!("teacher written to {}", path.display());
    Ok(())
}

fn train_student(cfg: &RunConfig, teacher: Option<&Path>, name: &str) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let act = ActivationKind::parse(&cfg.activation)?;
    if act == ActivationKind::Relu {
        bail!("the student needs a polynomial activation");
    }
    let spec = cfg.topology(ds.image_shape(), ds.num_classes, act)?;
    let teacher = teacher.map(store::load_checkpoint).transpose()?;
    let out = training::train_student(
        &spec,
        &ds,
        &cfg.train_config(),
        teacher.as_ref().map(|t| (&t.spec, &t.weights)),
    )?;
    let stem = name.trim_end_matches(".beaa");
    write_metrics(&cfg.out_dir.join(format!("metrics_{stem}.csv")), &out.metrics)?;
    let path = cfg.out_dir.join(name);
    store::save_checkpoint(
        &Checkpoint {
            spec,
            weights: out.weights,
            norm: norm_of(&ds),
        },
        &path,
    )?;
    println!("student written to {}", path.display());
    Ok(())
}

fn keygen(cfg: &RunConfig, dir: &Path, rotations: &[i64]) -> Result<()> {
    let ctx = CkksContext::new(cfg.he.params()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let keys = ckks::keygen(&ctx, rotations, &mut rng);
    pipeline::save_keys(dir, &ctx, &keys)?;
    println!("keys written to {}", dir.display());
    Ok(())
}

fn encrypt(cfg: &RunConfig, keys: &Path, output: &Path) -> Result<()> {
    let he = pipeline::load_backend(keys, false)?;
    let ds = cfg.load_dataset()?;
    let idx: Vec<usize> = ds.indices(Split::Test).into_iter().take(cfg.he.batch_size).collect();
    if idx.is_empty() {
        bail!("the test split is empty");
    }
    let (x, labels) = ds.gather(&idx);
    let packed = packing::pack_elementwise(&x, he.slot_count())?;
    // encryption randomness is derived from the master seed
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let enc = packing::encrypt_packed(&he, &packed, &mut rng)?;
    let m = pipeline::write_encrypted(output, he.context(), &enc, &labels)?;
    println!(
        "{} images in {} shards written to {}",
        m.batch,
        m.shards.len(),
        output.display()
    );
    Ok(())
}

fn infer(model: &Path, keys: &Path, input: &Path, output: &Path) -> Result<()> {
    let he = pipeline::load_backend(keys, false)?;
    let ck = store::load_checkpoint(model)?;
    let plan = pipeline::plan_for(&ck, he.params())?;
    let (manifest, ct) = pipeline::read_encrypted(input, he.context())?;
    let t = std::time::Instant::now();
    let out = inference::execute(&plan, &he, &ct)?;
    let secs = t.elapsed().as_secs_f64();
    pipeline::write_encrypted(output, he.context(), &out, &manifest.labels)?;
    println!(
        "inferred {} images in {secs:.2} s ({:.4} s per image), depth {}",
        manifest.batch,
        secs / manifest.batch as f64,
        plan.depth
    );
    Ok(())
}

fn write_logits(path: &Path, logits: &ndarray::Array2<f64>, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = logits.ncols();
    let mut header = vec!["index".to_string(), "label".to_string(), "argmax".to_string()];
    header.extend((0..k).map(|c| format!("logit_{c}")));
    w.write_record(&header)?;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let argmax = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
            .0;
        let mut rec = vec![
            i.to_string(),
            labels.get(i).map_or(String::new(), |l| l.to_string()),
            argmax.to_string(),
        ];
        rec.extend(row.iter().map(|v| format!("{v:.9e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn decrypt(keys: &Path, input: &Path, output: &Path) -> Result<()> {
    let he = pipeline::load_backend(keys, true)?;
    let (manifest, ct) = pipeline::read_encrypted(input, he.context())?;
    let plain = packing::decrypt_packed(&he, &ct)?;
    let out = packing::unpack_elementwise(&plain, manifest.batch)?;
    let logits = beaa::model::flatten_logits(out);
    write_logits(output, &logits, &manifest.labels)?;
    println!("logits for {} images written to {}", manifest.batch, output.display());
    Ok(())
}

fn eval_plain(cfg: &RunConfig, model: &Path, split: &str, logits_out: Option<&Path>) -> Result<()> {
    let ck = store::load_checkpoint(model)?;
    let ds = cfg.load_dataset()?;
    let sp = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split {other:?}"),
    };
    let acc = training::evaluate(&ck.spec, &ck.weights, &ds, sp)?;
    let activation = match ck.spec.activations().next() {
        Some(ActivationKind::Poly { granularity }) => format!("poly-{granularity}"),
        _ => "relu".into(),
    };
    let stem = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let rec = EvalRecord {
        model: model.display().to_string(),
        activation,
        distilled: stem.contains("kd"),
        seed: cfg.seed,
        split: split.into(),
        accuracy: acc,
    };
    fs::write(
        cfg.out_dir.join(format!("eval_{stem}_{split}.json")),
        serde_json::to_string_pretty(&rec)?,
    )?;
    if let Some(p) = logits_out {
        let idx: Vec<usize> = ds.indices(sp).into_iter().take(cfg.he.batch_size).collect();
        let (x, labels) = ds.gather(&idx);
        write_logits(p, &training::predict(&ck.spec, &ck.weights, &x, 256)?, &labels)?;
    }
    println!("{split} accuracy {:.4}", acc);
    Ok(())
}

fn benchmark(cfg: &RunConfig, model: Option<&Path>, sizes: &[usize]) -> Result<()> {
    let sizes = if sizes.is_empty() {
        cfg.bench.batch_sizes.clone()
    } else {
        sizes.to_vec()
    };
    let ck = match model {
        Some(p) => store::load_checkpoint(p)?,
        None => {
            let ds = cfg.load_dataset()?;
            let act = ActivationKind::parse(&cfg.activation)?;
            let spec = cfg.topology(ds.image_shape(), ds.num_classes, act)?;
            let weights = ModelWeights::init(&spec, cfg.train.coeff_noise, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            Checkpoint {
                spec,
                weights,
                norm: InputNorm::default(),
            }
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let he = ckks::CkksBackend::generate(cfg.he.params()?, &[], &mut rng)?;
    let plan = pipeline::plan_for(&ck, he.params())?;
    let rows = inference::benchmark(&plan, &he, &sizes, &mut rng)?;
    let path = cfg.out_dir.join("benchmark.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
        println!(
            "M={:>5} total {:.3} s, amortized {:.5} s",
            r.m, r.total_s, r.amortized_s
        );
    }
    w.flush()?;
    println!("written to {}", path.display());
    Ok(())
}

fn report(cfg: &RunConfig) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let act = ActivationKind::parse(&cfg.activation)?;
    let spec = cfg.topology(ds.image_shape(), ds.num_classes, act)?;
    let params = cfg.he.params()?;
    let timings = if params.ring_degree <= 8192 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let he = ckks::CkksBackend::generate(params.clone(), &[1], &mut rng)?;
        OpTimings::measure(&he, cfg.bench.reps, &mut rng)?
    } else {
        OpTimings::default()
    };
    let r = report::build(&spec, &params, cfg.he.batch_size, &timings)?;
    let mut records = Vec::new();
    for entry in fs::read_dir(&cfg.out_dir)? {
        let p = entry?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("eval_") && name.ends_with(".json") {
            records.push(serde_json::from_str::<EvalRecord>(&fs::read_to_string(&p)?)?);
        }
    }
    let groups = report::accuracy_groups(&records);
    let json = serde_json::json!({
        "summary": r,
        "timings": timings,
        "accuracy_groups": groups
            .iter()
            .map(|(a, d, acc, n)| serde_json::json!({"activation": a, "distilled": d, "mean_accuracy": acc, "runs": n}))
            .collect::<Vec<_>>(),
    });
    let path = cfg.out_dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&json)?)?;
    println!(
        "N={} slots={} depth={} (chain {}), utilization channel-wise {:.2}% element-wise {:.2}% at M={}",
        r.ring_degree,
        r.slots,
        r.depth,
        r.max_level,
        100.0 * r.channelwise_utilization,
        100.0 * r.elementwise_utilization,
        r.batch_size
    );
    for (a, d, acc, n) in &groups {
        println!(
            "{a}{} mean accuracy {acc:.4} over {n} runs",
            if *d { " +kd" } else { "" }
        );
    }
    println!("written to {}", path.display());
    Ok(())
}
