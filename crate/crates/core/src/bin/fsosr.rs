use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fsosr::format::{
    export_heatmap, mask_sidecar_path, read_dataset, read_masks, write_dataset, write_masks,
};
use fsosr::gradcheck::DEFAULT_TOLERANCE;
use fsosr::pipeline::OUTPUT_DIR_ENV;
use fsosr::{
    build_known_prototypes, generate_synthetic, procam, run_eval, run_gradcheck, spatial_avg_pool,
    EpisodeSpec, FinetuneConfig, GradcheckConfig, InitKind, NormKind, ProCamConfig, RunConfig,
    ScoreKind, SyntheticConfig,
};

#[derive(Parser)]
#[command(
    name = "fsosr",
    version,
    about = "Few-shot open-set recognition toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic feature-map dataset with ground-truth masks.
    GenSynthetic(GenArgs),
    /// Run the episodic evaluation and write a results bundle.
    Eval(EvalArgs),
    /// Export progressive CAM masks of one dataset item as PGM images.
    Heatmap(HeatmapArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradArgs),
    /// Print a summary of a dataset file.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Benchmark,
    Small,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "benchmark")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    items_per_class: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    signal_strength: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    MinMax,
    SpatialSoftmax,
}

impl From<Norm> for NormKind {
    fn from(n: Norm) -> Self {
        match n {
            Norm::MinMax => NormKind::MinMax,
            Norm::SpatialSoftmax => NormKind::SpatialSoftmax,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Random,
    AvgBackground,
    Global,
}

#[derive(Clone, Copy, ValueEnum)]
enum Score {
    Margin,
    NegMaxKnown,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 5)]
    k_shot: usize,
    #[arg(long, default_value_t = 15)]
    n_query: usize,
    #[arg(long, default_value_t = 5)]
    n_open_classes: usize,
    #[arg(long, default_value_t = 15)]
    n_open_query: usize,
    #[arg(long, default_value_t = 4)]
    tau: usize,
    #[arg(long, value_enum, default_value = "min-max")]
    norm_kind: Norm,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.002)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.05)]
    lambda_bkg: f64,
    #[arg(long, default_value_t = 10.0)]
    temperature: f64,
    /// Assign background pseudo-labels once instead of every epoch.
    #[arg(long)]
    fixed_pseudo_labels: bool,
    #[arg(long)]
    freeze_known: bool,
    #[arg(long, value_enum, default_value = "random")]
    init: Init,
    #[arg(long, default_value_t = 2)]
    num_background: usize,
    #[arg(long, default_value_t = 600)]
    num_episodes: usize,
    #[arg(long)]
    no_background_classes: bool,
    #[arg(long)]
    no_procam_finetune: bool,
    #[arg(long, value_enum, default_value = "margin")]
    score_kind: Score,
    #[arg(long)]
    pooled_auroc: bool,
    #[arg(long)]
    keep_banks: bool,
    #[arg(long, default_value_t = 0)]
    master_seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
}

impl EvalArgs {
    fn config(&self) -> RunConfig {
        RunConfig {
            dataset: Some(self.dataset.clone()),
            episode: EpisodeSpec {
                n_way: self.n_way,
                k_shot: self.k_shot,
                n_query: self.n_query,
                n_open_classes: self.n_open_classes,
                n_open_query: self.n_open_query,
                seed: 0,
            },
            procam: ProCamConfig {
                tau: self.tau,
                norm_kind: self.norm_kind.into(),
                include_trace: false,
            },
            finetune: FinetuneConfig {
                epochs: self.epochs,
                learning_rate: self.learning_rate,
                lambda_bkg: self.lambda_bkg,
                lambda_episodic: None,
                temperature: self.temperature,
                reassign_each_epoch: !self.fixed_pseudo_labels,
                freeze_known: self.freeze_known,
            },
            init: match self.init {
                Init::Random => InitKind::Random,
                Init::AvgBackground => InitKind::AvgBackground,
                Init::Global => InitKind::Global,
            },
            num_background: self.num_background,
            num_episodes: self.num_episodes,
            use_background_classes: !self.no_background_classes,
            use_procam_finetune: !self.no_procam_finetune,
            score_kind: match self.score_kind {
                Score::Margin => ScoreKind::Margin,
                Score::NegMaxKnown => ScoreKind::NegMaxKnown,
            },
            pooled_auroc: self.pooled_auroc,
            keep_banks: self.keep_banks,
            master_seed: self.master_seed,
            workers: self.workers,
            output_dir: self.output_dir.clone(),
        }
    }
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    item: usize,
    /// Items of the same class averaged into the class weight.
    #[arg(long, default_value_t = 5)]
    shots: usize,
    #[arg(long, default_value_t = 4)]
    tau: usize,
    #[arg(long, value_enum, default_value = "min-max")]
    norm_kind: Norm,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args)]
struct InspectArgs {
    dataset: PathBuf,
}

fn gen_synthetic(a: &GenArgs) -> fsosr::Result<()> {
    let mut cfg = match a.preset {
        Preset::Benchmark => SyntheticConfig::benchmark(a.seed),
        Preset::Small => SyntheticConfig {
            seed: a.seed,
            ..SyntheticConfig::default()
        },
    };
    if let Some(n) = a.items_per_class {
        cfg.items_per_class = n;
    }
    if let Some(s) = a.noise_sigma {
        cfg.noise_sigma = s;
    }
    if let Some(s) = a.signal_strength {
        cfg.signal_strength = s;
    }
    let syn = generate_synthetic(&cfg)?;
    write_dataset(&syn.dataset, &a.out)?;
    write_masks(&syn.masks, &a.out)?;
    let (h, w, d) = syn.dataset.shape();
    println!(
        "wrote {} items, {} classes, {h}x{w}x{d} to {}",
        syn.dataset.len(),
        syn.dataset.num_classes(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> fsosr::Result<()> {
    let cfg = a.config();
    let bundle = run_eval(&cfg)?;
    let g = &bundle.aggregate;
    println!(
        "episodes {}  accuracy {:.4} +- {:.4}  auroc {:.4} +- {:.4}",
        g.n_episodes, g.mean_accuracy, g.ci95_accuracy, g.mean_auroc, g.ci95_auroc
    );
    if let Some(p) = bundle.pooled_auroc {
        println!("pooled auroc {p:.4}");
    }
    println!("bundle written to {}", cfg.resolved_output_dir().display());
    Ok(())
}

fn heatmap(a: &HeatmapArgs) -> fsosr::Result<()> {
    let ds = read_dataset(&a.dataset)?;
    let (f, label) = ds.items().get(a.item).ok_or_else(|| {
        fsosr::Error::InvalidConfig(format!(
            "item {} out of range for {} items",
            a.item,
            ds.len()
        ))
    })?;
    let members = ds.class_items(*label);
    let shots = a.shots.clamp(1, members.len());
    let support: Vec<_> = members[..shots]
        .iter()
        .map(|&i| (spatial_avg_pool(&ds.items()[i].0), 0))
        .collect();
    let bank = build_known_prototypes(&support, 1, shots)?;
    let cfg = ProCamConfig {
        tau: a.tau,
        norm_kind: a.norm_kind.into(),
        include_trace: true,
    };
    let result = procam(f, &bank.known_weights()[0], &cfg)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| fsosr::Error::io(&a.out_dir, e))?;
    for (i, m) in result.per_iteration_masks.iter().flatten().enumerate() {
        export_heatmap(m, &a.out_dir.join(format!("iter_{}.pgm", i + 1)))?;
    }
    export_heatmap(&result.final_mask, &a.out_dir.join("final.pgm"))?;
    if mask_sidecar_path(&a.dataset).exists() {
        let truth = &read_masks(&a.dataset)?[a.item];
        export_heatmap(truth, &a.out_dir.join("truth.pgm"))?;
        let iou = fsosr::mask_iou(&result.final_mask, truth, 0.5)?;
        println!("iou {iou:.4}");
    }
    println!("wrote {} maps to {}", a.tau + 1, a.out_dir.display());
    Ok(())
}

fn gradcheck(a: &GradArgs) -> fsosr::Result<bool> {
    let cfg = GradcheckConfig {
        seed: a.seed,
        instances: a.instances,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    let mut worst = std::collections::BTreeMap::<&str, f64>::new();
    for c in &report.cases {
        let e = worst.entry(c.component.as_str()).or_insert(0.0);
        *e = e.max(c.max_rel_error);
    }
    for (name, err) in &worst {
        println!("{name:<28} max rel error {err:.3e}");
    }
    let ok = report.passed(a.tolerance);
    println!(
        "{} cases, worst {:.3e}, tolerance {:.0e}: {}",
        report.cases.len(),
        report.max_rel_error(),
        a.tolerance,
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(ok)
}

fn inspect(a: &InspectArgs) -> fsosr::Result<()> {
    let ds = read_dataset(&a.dataset)?;
    let (h, w, d) = ds.shape();
    println!("items    {}", ds.len());
    println!("shape    {h}x{w}x{d}");
    println!("classes  {}", ds.num_classes());
    for (c, name) in ds.class_names().iter().enumerate() {
        println!("  {c:>4}  {name:<20} {}", ds.class_items(c).len());
    }
    let masks = mask_sidecar_path(&a.dataset);
    if masks.exists() {
        println!("masks    {}", masks.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a).map(|()| true),
        Command::Eval(a) => eval(a).map(|()| true),
        Command::Heatmap(a) => heatmap(a).map(|()| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Inspect(a) => inspect(a).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
