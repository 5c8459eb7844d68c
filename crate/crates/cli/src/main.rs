use std::path::{Path, PathBuf};
use std::process::ExitCode;

use a3gan_core::checkpoint::Checkpoint;
use a3gan_core::config::{RunConfig, Variant};
use a3gan_core::data::{export_dataset, load_manifest, synth_generate, AgeGroup, Dataset, SynthOracle, NUM_WORKERS_ENV};
use a3gan_core::embedder::EmbedderSource;
use a3gan_core::evaluation::{emit_attention, emit_grid, evaluate_synthetic, EvalReport};
use a3gan_core::generator::{AttributeVector, Generator, Profile};
use a3gan_core::image::{load_image, save_png, FaceImage};
use a3gan_core::run::build_trainer;
use a3gan_core::training::{generator_from_checkpoint, train, Trainer};
use a3gan_core::wpt::{wpt_decompose, wpt_reconstruct, FilterPair};
use a3gan_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Axis;

#[derive(Parser)]
#[command(name = "a3gan", version, about = "Attribute-aware attentive face aging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as PNGs plus manifest.csv.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        per_group: Option<usize>,
    },
    /// Train a model.
    Train(TrainArgs),
    /// Age images with a trained generator.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Image file or directory; defaults to young synthetic faces.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Comma-separated attribute values, e.g. `1,0`.
        #[arg(long)]
        attrs: Option<String>,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Score a trained generator against the synthetic oracles.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        max_samples: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Wavelet packet decomposition of one image.
    Wpt {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        levels: usize,
        #[arg(long, default_value = "haar")]
        filter: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one of the ablation variants.
    Ablate(TrainArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse::<Profile>)]
    profile: Option<Profile>,
    #[arg(long, value_parser = parse::<AgeGroup>)]
    target_group: Option<AgeGroup>,
    /// `fixed:<seed>` or `file:<checkpoint>`.
    #[arg(long, value_parser = parse::<EmbedderSource>)]
    embedder: Option<EmbedderSource>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = parse::<Variant>)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Directory holding manifest.csv; defaults to synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from a checkpoint written by `train`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData {
            common,
            identities,
            per_group,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(n) = identities {
                cfg.synth.n_identities = n;
            }
            if let Some(k) = per_group {
                cfg.synth.samples_per_identity_per_group = k;
            }
            cfg.validate()?;
            let (data, _) = synth_generate(&cfg.synth)?;
            let manifest = export_dataset(&data, &common.out)?;
            cfg.save(&common.out.join("config.json"))?;
            println!("{} samples, manifest {}", data.len(), manifest.display());
            Ok(())
        }
        Command::Train(args) => train_cmd(args, None),
        Command::Ablate(args) => {
            let variant = args
                .variant
                .ok_or_else(|| Error::Validation("ablate needs --variant (baseline, no-fae, no-wmd, no-am)".into()))?;
            train_cmd(args, Some(variant))
        }
        Command::Generate {
            common,
            ckpt,
            input,
            attrs,
            count,
        } => generate_cmd(&common, &ckpt, input.as_deref(), attrs.as_deref(), count),
        Command::Eval {
            common,
            ckpt,
            max_samples,
            threshold,
        } => eval_cmd(&common, &ckpt, max_samples, threshold),
        Command::Wpt {
            input,
            levels,
            filter,
            size,
            out,
        } => wpt_cmd(&input, levels, &filter, size, out.as_deref()),
    }
}

/// Config file (or profile defaults) with the common flags applied.
fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::for_profile(c.profile.unwrap_or(Profile::Desk64), 2),
    };
    if let Some(p) = c.profile.filter(|&p| p != cfg.train.profile) {
        let fresh = RunConfig::for_profile(p, cfg.generator.attr_dim).with_variant(cfg.variant);
        cfg.generator = fresh.generator;
        cfg.discriminator = fresh.discriminator;
        cfg.synth.image_size = fresh.synth.image_size;
        cfg.train.batch_size = fresh.train.batch_size;
        cfg.train.profile = p;
    }
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(t) = c.target_group {
        cfg = cfg.with_target(t);
    }
    if let Some(e) = &c.embedder {
        cfg.embedder = e.clone();
    }
    if c.deterministic {
        cfg.deterministic = true;
    }
    if cfg.deterministic {
        std::env::set_var(NUM_WORKERS_ENV, "1");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig, dir: Option<&Path>) -> Result<(Dataset, Option<SynthOracle>)> {
    match dir {
        Some(d) => Ok((load_manifest(d, &d.join("manifest.csv"), cfg.generator.image_size)?, None)),
        None => synth_generate(&cfg.synth).map(|(d, o)| (d, Some(o))),
    }
}

fn train_cmd(args: TrainArgs, ablation: Option<Variant>) -> Result<()> {
    let out = args.common.out.clone();
    let mut cfg = resolve(&args.common)?;
    if let Some(v) = ablation.or(args.variant) {
        cfg = cfg.with_variant(v);
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
        cfg.train.iterations = None;
    }
    if let Some(i) = args.iterations {
        cfg.train.iterations = Some(i);
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(k) = args.checkpoint_every {
        cfg.train.checkpoint_every = k;
    }
    cfg.validate()?;
    let (data, oracle) = load_data(&cfg, args.data.as_deref())?;
    let mut trainer: Trainer<f32> = match &args.resume {
        Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path)?, &data)?,
        None => build_trainer(&cfg, &data)?,
    };
    cfg.save(&out.join("config.json"))?;
    log::info!(
        "training {} for {} iterations ({} done)",
        cfg.variant,
        trainer.total_iterations(),
        trainer.state.step
    );
    train(&mut trainer, &data, Some(&out), &serde_json::to_value(&cfg)?)?;
    let gen = &trainer.state.generator;
    write_samples(gen, &data, cfg.train.target_group, 8, &out.join("samples"))?;
    if let Some(oracle) = oracle {
        let mut report = EvalReport::default();
        *report.group_mut(cfg.train.target_group)? = evaluate_synthetic(
            gen,
            &data,
            &oracle,
            cfg.train.target_group,
            cfg.eval.threshold,
            cfg.eval.max_samples,
        )?;
        write_report(&report, &out)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    let path = out.join("report.json");
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    std::fs::write(&path, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(&path, e))?;
    print!("{}", report.to_table());
    Ok(())
}

/// Input/output grid and attention panel for the first `n` young faces.
fn write_samples(gen: &Generator<f32>, data: &Dataset, target: AgeGroup, n: usize, dir: &Path) -> Result<()> {
    let young: Vec<_> = data.group(AgeGroup::Under31).take(n).collect();
    if young.is_empty() {
        return Ok(());
    }
    let inputs: Vec<FaceImage> = young.iter().map(|s| s.image.clone()).collect();
    let alphas: Vec<AttributeVector> = young.iter().map(|s| s.attributes.clone()).collect();
    let outs = gen.generate_batch(&inputs, &alphas, 16)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows: Vec<_> = inputs.iter().zip(&outs).map(|(i, o)| (i.clone(), vec![o.output.clone()])).collect();
    emit_grid(&rows, &dir.join(format!("grid_{}.png", target.label())))?;
    let masks: Option<Vec<_>> = outs.iter().map(|o| o.mask.clone()).collect();
    if let Some(masks) = masks {
        let outputs: Vec<_> = outs.iter().map(|o| o.output.clone()).collect();
        emit_attention(&inputs, &masks, &outputs, &dir.join("attention.png"))?;
    }
    Ok(())
}

fn run_config_of(ck: &Checkpoint, common: &Common) -> Result<RunConfig> {
    if common.config.is_some() {
        return resolve(common);
    }
    let mut cfg: RunConfig = match ck.metadata.get("run").filter(|v| !v.is_null()) {
        Some(v) => serde_json::from_value(v.clone())?,
        None => return resolve(common),
    };
    if let Some(seed) = common.seed {
        cfg.synth.seed = seed;
    }
    if let Some(t) = common.target_group {
        cfg = cfg.with_target(t);
    }
    Ok(cfg)
}

fn parse_attrs(s: &str, n: usize) -> Result<AttributeVector> {
    let values = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Validation(format!("bad attribute value `{v}`"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != n {
        return Err(Error::Validation(format!("{} attribute values given, model expects {n}", values.len())));
    }
    AttributeVector::new(values)
}

fn image_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn generate_cmd(common: &Common, ckpt: &Path, input: Option<&Path>, attrs: Option<&str>, count: usize) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let gen: Generator<f32> = generator_from_checkpoint(&ck)?;
    let (size, n_attr) = (gen.config.image_size, gen.config.attr_dim);
    let override_attrs = attrs.map(|a| parse_attrs(a, n_attr)).transpose()?;
    let (names, inputs, alphas): (Vec<String>, Vec<FaceImage>, Vec<AttributeVector>) = match input {
        Some(path) => {
            let files = image_files(path)?;
            if files.is_empty() {
                return Err(Error::Data(format!("no images under {}", path.display())));
            }
            let alpha = override_attrs.clone().unwrap_or_else(|| AttributeVector::zeros(n_attr));
            let mut names = Vec::new();
            let mut images = Vec::new();
            for f in &files {
                names.push(f.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string());
                images.push(load_image(f, size)?);
            }
            let alphas = vec![alpha; images.len()];
            (names, images, alphas)
        }
        None => {
            let cfg = run_config_of(&ck, common)?;
            let (data, _) = synth_generate(&cfg.synth)?;
            let young: Vec<_> = data.group(AgeGroup::Under31).take(count).collect();
            (
                young.iter().enumerate().map(|(i, s)| format!("young{i:03}_id{}", s.identity)).collect(),
                young.iter().map(|s| s.image.clone()).collect(),
                young
                    .iter()
                    .map(|s| override_attrs.clone().unwrap_or_else(|| s.attributes.clone()))
                    .collect(),
            )
        }
    };
    let outs = gen.generate_batch(&inputs, &alphas, 16)?;
    let dir = common.out.join("samples");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (name, o) in names.iter().zip(&outs) {
        save_png(&o.output, &dir.join(format!("{name}_aged.png")))?;
    }
    let rows: Vec<_> = inputs.iter().zip(&outs).map(|(i, o)| (i.clone(), vec![o.output.clone()])).collect();
    emit_grid(&rows, &dir.join("grid.png"))?;
    let masks: Option<Vec<_>> = outs.iter().map(|o| o.mask.clone()).collect();
    if let Some(masks) = masks {
        let outputs: Vec<_> = outs.iter().map(|o| o.output.clone()).collect();
        emit_attention(&inputs, &masks, &outputs, &dir.join("attention.png"))?;
    }
    println!("{} images written to {}", outs.len(), dir.display());
    Ok(())
}

fn eval_cmd(common: &Common, ckpt: &Path, max_samples: Option<usize>, threshold: Option<f64>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let gen: Generator<f32> = generator_from_checkpoint(&ck)?;
    let mut cfg = run_config_of(&ck, common)?;
    if let Some(m) = max_samples {
        cfg.eval.max_samples = m;
    }
    if let Some(t) = threshold {
        cfg.eval.threshold = t;
    }
    cfg.validate()?;
    let (data, oracle) = synth_generate(&cfg.synth)?;
    let target = cfg.train.target_group;
    let mut report = EvalReport::default();
    *report.group_mut(target)? =
        evaluate_synthetic(&gen, &data, &oracle, target, cfg.eval.threshold, cfg.eval.max_samples)?;
    write_report(&report, &common.out)
}

/// Channel planes of one level, each rescaled to [-1, 1], as grayscale tiles.
fn level_tiles(level: &FaceImage) -> Vec<FaceImage> {
    let (h, w, c) = level.dim();
    (0..c)
        .map(|ch| {
            let plane = level.index_axis(Axis(2), ch);
            let max = plane.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            FaceImage::from_shape_fn((h, w, 3), |(i, j, _)| plane[[i, j]] / max)
        })
        .collect()
}

fn wpt_cmd(input: &Path, levels: usize, filter: &str, size: usize, out: Option<&Path>) -> Result<()> {
    let f = FilterPair::by_name(filter)?;
    let img = load_image(input, size)?;
    let p = wpt_decompose(&img, levels, &f)?;
    let back = wpt_reconstruct(&p, &f)?;
    let err = (&back - &img).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let energy = p.energy_per_level();
    let summary = serde_json::json!({
        "filter": f.name,
        "subband_order": ["LL", "LH", "HL", "HH"],
        "levels": p.levels.iter().zip(&energy).map(|(l, e)| serde_json::json!({"shape": l.dim(), "energy": e})).collect::<Vec<_>>(),
        "reconstruction_max_abs_error": err,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, level) in p.levels.iter().enumerate().skip(1) {
            let tiles = level_tiles(level);
            let per_row = 1usize << k;
            let rows: Vec<_> = tiles
                .chunks(per_row * 3)
                .map(|c| (c[0].clone(), c[1..].to_vec()))
                .collect();
            emit_grid(&rows, &dir.join(format!("level{k}.png")))?;
        }
        let path = dir.join("wpt.json");
        std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
