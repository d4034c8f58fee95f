//! Command-line front end: toy training, attribution, evaluation, layer
//! comparison, sanity checks, and ablation sweeps.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 I/O.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use coiba::attribution::{
    attribute_batch, attribute_iba_star, save_map, AttributionMap,
};
use coiba::bottleneck::{BottleneckMode, BottleneckSpec};
use coiba::config::{load_config, RunConfig};
use coiba::data::{atomic_write, derive_seed, generate_dataset, load_image, SyntheticSample};
use coiba::attribution::normalize01;
use coiba::eval::{
    confidence_binned_report, ehr, insertion_deletion, road, sanity_check, ssim, RoadOrder,
    SampleMetrics,
};
use coiba::vit::{
    accuracy, argmax, checkpoint_digest, forward, init_model, load_checkpoint,
    save_checkpoint, softmax_prob, train_toy, ModelCheckpoint, RandomizeMode,
};
use coiba::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "coiba", version, about = "Information-bottleneck attribution for a toy ViT")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed, overriding the config value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; falls back to $COIBA_OUT_DIR, then ".".
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for per-image parallelism; never changes outputs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Iba,
    IbaStar,
    Coiba,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    Beta,
    Layers,
    UniformChannel,
    Readout,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Cumulative,
    Independent,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy transformer on the synthetic glyph dataset.
    TrainToy {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write one attribution map (PGM + JSON sidecar) per input image.
    Attribute {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// PGM/PPM input images; mutually exclusive with --synthetic.
        #[arg(long)]
        image: Vec<PathBuf>,
        /// Generate this many held-out synthetic samples instead.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, value_enum, default_value_t = MethodArg::Coiba)]
        method: MethodArg,
        #[arg(long)]
        s_layer: Option<usize>,
        #[arg(long)]
        e_layer: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Target class; defaults to the predicted class per image.
        #[arg(long)]
        target: Option<usize>,
    },
    /// Faithfulness metrics over held-out synthetic samples.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        samples: usize,
    },
    /// Per-layer IBA maps: pairwise SSIM matrix and best-layer histogram.
    CompareLayers {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
    },
    /// Parameter-randomization sanity check.
    SanityCheck {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::Cumulative)]
        mode: ModeArg,
    },
    /// Sweep one axis with everything else fixed.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, value_enum)]
        axis: AxisArg,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            let code = match e {
                Error::Config(_) => 2,
                Error::Io(_) | Error::Parse { .. } => 4,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    out_dir: PathBuf,
    jobs: usize,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        let out_dir = cli
            .out_dir
            .clone()
            .or_else(|| std::env::var_os("COIBA_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&out_dir)?;
        cfg.validate()?;
        let ctx = Ctx { cfg, out_dir, jobs: cli.jobs.max(1) };
        ctx.echo_config()?;
        Ok(ctx)
    }

    /// Every run leaves its resolved configuration and digest in out-dir.
    fn echo_config(&self) -> Result<()> {
        let body = serde_json::json!({
            "digest": self.cfg.digest(),
            "config": self.cfg,
        });
        let text = serde_json::to_vec_pretty(&body).expect("config serializes");
        atomic_write(&self.out_dir.join("resolved_config.json"), &text)
    }

    fn checkpoint_path(&self, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone().unwrap_or_else(|| self.out_dir.join("model.cibt"))
    }

    fn spec(&self) -> Result<BottleneckSpec> {
        self.cfg.spec()
    }
}

// Seed streams keeping the synthetic splits disjoint.
const S_TRAIN: u64 = 1;
const S_HOLDOUT: u64 = 2;

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli)?;
    match &cli.command {
        Command::TrainToy { epochs } => cmd_train_toy(&ctx, *epochs),
        Command::Attribute {
            checkpoint,
            image,
            synthetic,
            method,
            s_layer,
            e_layer,
            beta,
            iterations,
            target,
        } => cmd_attribute(
            &ctx, checkpoint, image, *synthetic, *method, *s_layer, *e_layer, *beta, *iterations,
            *target,
        ),
        Command::Evaluate { checkpoint, samples } => cmd_evaluate(&ctx, checkpoint, *samples),
        Command::CompareLayers { checkpoint, samples } => {
            cmd_compare_layers(&ctx, checkpoint, *samples)
        }
        Command::SanityCheck { checkpoint, samples, mode } => {
            cmd_sanity_check(&ctx, checkpoint, *samples, *mode)
        }
        Command::Ablate { checkpoint, samples, axis } => {
            cmd_ablate(&ctx, checkpoint, *samples, *axis)
        }
    }
}

fn dataset(ctx: &Ctx, n: usize, stream: u64) -> Result<Vec<SyntheticSample>> {
    generate_dataset(
        n,
        ctx.cfg.train.classes,
        ctx.cfg.model.image_size,
        ctx.cfg.model.patch_size,
        ctx.cfg.model.channels,
        derive_seed(ctx.cfg.seed, stream),
    )
}

fn cmd_train_toy(ctx: &Ctx, epochs: Option<usize>) -> Result<()> {
    let tc = &ctx.cfg.train;
    let train = dataset(ctx, tc.train_samples, S_TRAIN)?;
    let holdout = dataset(ctx, tc.holdout_samples, S_HOLDOUT)?;
    let init = init_model(&ctx.cfg.model)?;
    let epochs = epochs.unwrap_or(tc.epochs);
    let (trained, log) =
        train_toy(&init, &train, &holdout, epochs, tc.learning_rate, tc.batch_size, ctx.cfg.seed)?;
    let acc = accuracy(&trained, &holdout)?;

    let ckpt_path = ctx.out_dir.join("model.cibt");
    save_checkpoint(&trained, &ckpt_path)?;
    let mut csv = String::from("epoch,train_loss,holdout_accuracy\n");
    for e in &log {
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.holdout_accuracy));
    }
    atomic_write(&ctx.out_dir.join("training_log.csv"), csv.as_bytes())?;
    println!("checkpoint={}", ckpt_path.display());
    println!("checkpoint_digest={}", checkpoint_digest(&trained));
    println!("holdout_accuracy={:.4}", acc);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_attribute(
    ctx: &Ctx,
    checkpoint: &Option<PathBuf>,
    images: &[PathBuf],
    synthetic: Option<usize>,
    method: MethodArg,
    s_layer: Option<usize>,
    e_layer: Option<usize>,
    beta: Option<f64>,
    iterations: Option<usize>,
    target: Option<usize>,
) -> Result<()> {
    let ckpt = load_checkpoint(&ctx.checkpoint_path(checkpoint))?;
    let mut spec = ctx.spec()?;
    if let Some(s) = s_layer {
        spec.s = s;
    }
    if let Some(e) = e_layer {
        spec.e = e;
    }
    if let Some(b) = beta {
        spec.beta = b;
    }
    if let Some(i) = iterations {
        spec.iterations = i;
    }
    spec.mode = match method {
        MethodArg::Iba => BottleneckMode::Iba,
        MethodArg::IbaStar => BottleneckMode::IbaStar,
        MethodArg::Coiba => spec.mode,
    };
    if method == MethodArg::Iba {
        // Single-layer method: an explicit --s-layer selects the layer,
        // otherwise hook the arrival layer only.
        let layer = s_layer.unwrap_or(spec.e);
        spec.s = layer;
        spec.e = e_layer.unwrap_or(layer);
    }
    spec.validate(ckpt.config.depth)?;

    let inputs: Vec<(Tensor, usize)> = if !images.is_empty() {
        if synthetic.is_some() {
            return Err(Error::Config("--image and --synthetic are mutually exclusive".into()));
        }
        let mut v = Vec::with_capacity(images.len());
        for p in images {
            let img = load_image(p)?;
            let t = match target {
                Some(t) => t,
                None => {
                    let (logits, _) = forward(&ckpt, &img, None)?;
                    argmax(&logits.data)
                }
            };
            v.push((img, t));
        }
        v
    } else {
        let n = synthetic.unwrap_or(4);
        dataset(ctx, n, S_HOLDOUT)?
            .into_iter()
            .map(|s| {
                let t = target.unwrap_or(s.label);
                (s.image, t)
            })
            .collect()
    };

    let maps: Vec<AttributionMap> = if method == MethodArg::IbaStar {
        inputs
            .iter()
            .enumerate()
            .map(|(i, (img, t))| {
                let mut s = spec.clone();
                s.seed = derive_seed(spec.seed, i as u64);
                attribute_iba_star(&ckpt, img, *t, &s, None)
            })
            .collect::<Result<_>>()?
    } else {
        attribute_batch(&ckpt, &inputs, &spec, ctx.jobs)?
    };
    for (i, map) in maps.iter().enumerate() {
        let pgm = ctx.out_dir.join(format!("map_{:04}.pgm", i));
        let json = ctx.out_dir.join(format!("map_{:04}.json", i));
        save_map(map, &pgm, &json)?;
        println!(
            "map={} method={} layers={}..{} runtime_ms={:.1}",
            pgm.display(),
            map.method,
            map.layers.0,
            map.layers.1,
            map.runtime_ms
        );
    }
    Ok(())
}

fn cmd_evaluate(ctx: &Ctx, checkpoint: &Option<PathBuf>, samples: usize) -> Result<()> {
    let ckpt = load_checkpoint(&ctx.checkpoint_path(checkpoint))?;
    let spec = ctx.spec()?;
    let set = dataset(ctx, samples, S_HOLDOUT)?;
    let inputs: Vec<(Tensor, usize)> = set.iter().map(|s| (s.image.clone(), s.label)).collect();
    let maps = attribute_batch(&ckpt, &inputs, &spec, ctx.jobs)?;

    let ev = &ctx.cfg.eval;
    let mut rows = Vec::with_capacity(set.len());
    for (i, (sample, map)) in set.iter().zip(&maps).enumerate() {
        let confidence = {
            let (logits, _) = forward(&ckpt, &sample.image, None)?;
            softmax_prob(&logits.data, sample.label)
        };
        let (ins, del) = insertion_deletion(
            &ckpt, &sample.image, &map.pixel_map, sample.label, ev.step_fraction,
        )?;
        let seed = derive_seed(ctx.cfg.seed, 0x0ad + i as u64);
        let morf = road(
            &ckpt, &sample.image, &map.pixel_map, sample.label, &ev.road_fractions,
            RoadOrder::Morf, ev.sigma_road, seed,
        )?;
        let lerf = road(
            &ckpt, &sample.image, &map.pixel_map, sample.label, &ev.road_fractions,
            RoadOrder::Lerf, ev.sigma_road, seed,
        )?;
        rows.push(SampleMetrics {
            id: i,
            confidence,
            ins_auc: ins.auc,
            del_auc: del.auc,
            road_morf: morf.mean,
            road_lerf: lerf.mean,
            ehr: ehr(&map.pixel_map, &sample.gt_mask)?,
        });
    }

    let mut csv = String::from("id,confidence,ins_auc,del_auc,road_morf,road_lerf,ehr\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.id, r.confidence, r.ins_auc, r.del_auc, r.road_morf, r.road_lerf, r.ehr
        ));
    }
    atomic_write(&ctx.out_dir.join("results.csv"), csv.as_bytes())?;

    let report = confidence_binned_report(&rows)?;
    let n = rows.len() as f64;
    let summary = serde_json::json!({
        "config_digest": ctx.cfg.digest(),
        "samples": rows.len(),
        "mean_delta_insdel": rows.iter().map(|r| r.delta_insdel()).sum::<f64>() / n,
        "mean_delta_road": rows.iter().map(|r| r.delta_road()).sum::<f64>() / n,
        "mean_ehr": rows.iter().map(|r| r.ehr).sum::<f64>() / n,
        "bins": report,
    });
    atomic_write(
        &ctx.out_dir.join("summary.json"),
        &serde_json::to_vec_pretty(&summary).expect("summary serializes"),
    )?;
    println!(
        "samples={} mean_delta_insdel={:.4} mean_delta_road={:.4} mean_ehr={:.4}",
        rows.len(),
        summary["mean_delta_insdel"].as_f64().unwrap(),
        summary["mean_delta_road"].as_f64().unwrap(),
        summary["mean_ehr"].as_f64().unwrap(),
    );
    Ok(())
}

/// Per-layer single-layer maps for one image set.
fn per_layer_maps(
    ctx: &Ctx,
    ckpt: &ModelCheckpoint,
    inputs: &[(Tensor, usize)],
    spec: &BottleneckSpec,
) -> Result<Vec<Vec<AttributionMap>>> {
    let depth = ckpt.config.depth;
    let mut per_layer = Vec::with_capacity(depth);
    for l in 1..=depth {
        let mut s = spec.clone();
        s.mode = BottleneckMode::Iba;
        s.s = l;
        s.e = l;
        per_layer.push(attribute_batch(ckpt, inputs, &s, ctx.jobs)?);
    }
    Ok(per_layer)
}

fn cmd_compare_layers(ctx: &Ctx, checkpoint: &Option<PathBuf>, samples: usize) -> Result<()> {
    let ckpt = load_checkpoint(&ctx.checkpoint_path(checkpoint))?;
    let spec = ctx.spec()?;
    let set = dataset(ctx, samples, S_HOLDOUT)?;
    let inputs: Vec<(Tensor, usize)> = set.iter().map(|s| (s.image.clone(), s.label)).collect();
    let per_layer = per_layer_maps(ctx, &ckpt, &inputs, &spec)?;
    let depth = ckpt.config.depth;

    let mut matrix = vec![vec![0.0f64; depth]; depth];
    for a in 0..depth {
        for b in 0..depth {
            let mut acc = 0.0;
            for i in 0..inputs.len() {
                acc += ssim(
                    &normalize01(&per_layer[a][i].pixel_map),
                    &normalize01(&per_layer[b][i].pixel_map),
                )?;
            }
            matrix[a][b] = acc / inputs.len() as f64;
        }
    }

    let ev = &ctx.cfg.eval;
    let mut histogram = vec![0usize; depth];
    for (i, sample) in set.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (l, maps) in per_layer.iter().enumerate() {
            let (ins, del) = insertion_deletion(
                &ckpt, &sample.image, &maps[i].pixel_map, sample.label, ev.step_fraction,
            )?;
            let delta = ins.auc - del.auc;
            if delta > best.1 {
                best = (l, delta);
            }
        }
        histogram[best.0] += 1;
    }

    let body = serde_json::json!({
        "config_digest": ctx.cfg.digest(),
        "ssim_matrix": matrix,
        "best_layer_histogram": histogram,
    });
    atomic_write(
        &ctx.out_dir.join("compare_layers.json"),
        &serde_json::to_vec_pretty(&body).expect("serializes"),
    )?;
    for (l, row) in matrix.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{:.3}", v)).collect();
        println!("ssim layer {}: {}", l + 1, cells.join(" "));
    }
    println!(
        "best_layer_histogram={}",
        histogram.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
    );
    Ok(())
}

fn cmd_sanity_check(
    ctx: &Ctx,
    checkpoint: &Option<PathBuf>,
    samples: usize,
    mode: ModeArg,
) -> Result<()> {
    let ckpt = load_checkpoint(&ctx.checkpoint_path(checkpoint))?;
    let spec = ctx.spec()?;
    let set = dataset(ctx, samples, S_HOLDOUT)?;
    let inputs: Vec<(Tensor, usize)> = set.iter().map(|s| (s.image.clone(), s.label)).collect();
    let mode = match mode {
        ModeArg::Cumulative => RandomizeMode::Cumulative,
        ModeArg::Independent => RandomizeMode::Independent,
    };
    let mut indices: Vec<Option<usize>> = vec![None];
    let limit = match mode {
        RandomizeMode::Cumulative => ckpt.config.depth + 1,
        RandomizeMode::Independent => ckpt.config.depth,
    };
    indices.extend((0..limit).map(Some));
    let table = sanity_check(&ckpt, &inputs, &spec, mode, &indices, ctx.cfg.seed)?;
    let mut csv = String::from("layer_index,mean_ssim\n");
    for (li, s) in &table {
        let label = li.map(|v| v.to_string()).unwrap_or_else(|| "none".into());
        println!("randomize={} mean_ssim={:.4}", label, s);
        csv.push_str(&format!("{},{}\n", label, s));
    }
    atomic_write(&ctx.out_dir.join("sanity_check.csv"), csv.as_bytes())?;
    Ok(())
}

fn mean_delta_insdel(
    ctx: &Ctx,
    ckpt: &ModelCheckpoint,
    set: &[SyntheticSample],
    maps: &[AttributionMap],
) -> Result<f64> {
    let ev = &ctx.cfg.eval;
    let mut acc = 0.0;
    for (s, m) in set.iter().zip(maps) {
        let (ins, del) =
            insertion_deletion(ckpt, &s.image, &m.pixel_map, s.label, ev.step_fraction)?;
        acc += ins.auc - del.auc;
    }
    Ok(acc / set.len() as f64)
}

fn bottleneck_accuracy(set: &[SyntheticSample], maps: &[AttributionMap]) -> f64 {
    let hits = set
        .iter()
        .zip(maps)
        .filter(|(s, m)| argmax(&m.eval_logits) == s.label)
        .count();
    hits as f64 / set.len() as f64
}

fn cmd_ablate(
    ctx: &Ctx,
    checkpoint: &Option<PathBuf>,
    samples: usize,
    axis: AxisArg,
) -> Result<()> {
    let ckpt = load_checkpoint(&ctx.checkpoint_path(checkpoint))?;
    let base = ctx.spec()?;
    let set = dataset(ctx, samples, S_HOLDOUT)?;
    let inputs: Vec<(Tensor, usize)> = set.iter().map(|s| (s.image.clone(), s.label)).collect();

    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    let mut eval_setting = |label: String, spec: &BottleneckSpec| -> Result<()> {
        let maps = attribute_batch(&ckpt, &inputs, spec, ctx.jobs)?;
        let delta = mean_delta_insdel(ctx, &ckpt, &set, &maps)?;
        let acc = bottleneck_accuracy(&set, &maps);
        println!("setting={} delta_insdel={:.4} bottleneck_accuracy={:.4}", label, delta, acc);
        rows.push((label, delta, acc));
        Ok(())
    };

    let axis_name = match axis {
        AxisArg::Beta => {
            for beta in [0.01, 0.1, 1.0, 10.0, 100.0] {
                let mut s = base.clone();
                s.beta = beta;
                eval_setting(format!("beta={}", beta), &s)?;
            }
            "beta"
        }
        AxisArg::Layers => {
            // Departure sweep at fixed arrival, plus the single-layer IBA
            // point s = e for reference.
            for dep in 1..=ckpt.config.depth {
                let mut s = base.clone();
                s.s = dep;
                s.e = ckpt.config.depth;
                eval_setting(format!("s={},e={}", s.s, s.e), &s)?;
            }
            let mut s = base.clone();
            s.mode = BottleneckMode::Iba;
            s.s = ckpt.config.depth;
            s.e = ckpt.config.depth;
            eval_setting(format!("iba,s=e={}", s.e), &s)?;
            "layers"
        }
        AxisArg::UniformChannel => {
            for per_channel in [false, true] {
                let mut s = base.clone();
                s.per_channel = per_channel;
                let label = if per_channel { "per_channel" } else { "uniform" };
                eval_setting(label.to_string(), &s)?;
            }
            "uniform-channel"
        }
        AxisArg::Readout => {
            for raw in [false, true] {
                let mut s = base.clone();
                s.raw_lambda_scores = raw;
                let label = if raw { "raw_lambda" } else { "capacity" };
                eval_setting(label.to_string(), &s)?;
            }
            "readout"
        }
    };

    let mut csv = String::from("setting,delta_insdel,bottleneck_accuracy\n");
    for (label, delta, acc) in &rows {
        csv.push_str(&format!("{},{},{}\n", label, delta, acc));
    }
    atomic_write(&ctx.out_dir.join(format!("ablate_{}.csv", axis_name)), csv.as_bytes())?;
    Ok(())
}
