//! `vastopo`: phantom generation, vascular topology encoding, gradient
//! checking, toy training, inference, evaluation, and the ablation driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vastopo_core::edt::exact_edt_threaded;
use vastopo_core::pipeline::{
    ablate, ablate_rows_to_csv, infer, load_model, load_phantom_files, pipeline_grad_check,
    train_toy, write_phantom_files, BackboneConfig, Fusion, TopoConfig, TrainConfig,
};
use vastopo_core::scl::{DenominatorMode, MemoryStrategy, SclConfig};
use vastopo_core::tensor::MlpParams;
use vastopo_core::vasgraph::{build_knn, graph_to_json, init_node_features, normalize_adjacency};
use vastopo_core::volume::{load_rvol, save_rvol, PhantomSpec, Volume};
use vastopo_core::{evaluate, rng, sample_keypoints, skeletonize, Result};

#[derive(Parser)]
#[command(name = "vastopo", version, about = "Vascular topology encoding and toy segmentation pipeline")]
struct Cli {
    /// Master seed; every component derives its own sub-seed from it.
    #[arg(global = true, long, default_value_t = 7)]
    seed: u64,

    /// Worker-thread cap for volume passes (results are thread-count
    /// invariant; 1 keeps timings reproducible).
    #[arg(global = true, long, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FusionArg {
    None,
    Concat,
    #[value(name = "distance_bias", alias = "distance-bias")]
    DistanceBias,
    #[value(name = "cross_attention", alias = "cross-attention")]
    CrossAttention,
    /// Gradcheck only: run every variant.
    All,
}

impl FusionArg {
    fn to_fusion(self) -> Option<Fusion> {
        match self {
            FusionArg::None => Some(Fusion::None),
            FusionArg::Concat => Some(Fusion::Concat),
            FusionArg::DistanceBias => Some(Fusion::DistanceBias),
            FusionArg::CrossAttention => Some(Fusion::CrossAttention),
            FusionArg::All => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SclArg {
    None,
    Fifo,
    Cats,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DenomArg {
    #[value(name = "paper_literal", alias = "paper-literal")]
    PaperLiteral,
    #[value(name = "with_positive", alias = "with-positive")]
    WithPositive,
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected nx,ny,nz, got {s:?}"));
    }
    let mut d = [0usize; 3];
    for (slot, p) in d.iter_mut().zip(&parts) {
        *slot = p.parse().map_err(|_| format!("bad dimension {p:?}"))?;
    }
    Ok((d[0], d[1], d[2]))
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom triple (<prefix>.{ct,vessel,labels}.rvol).
    Phantom {
        #[arg(long, value_parser = parse_dims, default_value = "32,32,32")]
        dims: (usize, usize, usize),
        #[arg(long, default_value_t = 2)]
        branches: usize,
        #[arg(long, default_value_t = 1.5)]
        radius_min: f64,
        #[arg(long, default_value_t = 2.5)]
        radius_max: f64,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long)]
        out_prefix: String,
    },

    /// Exact Euclidean distance transform of a binary mask (f32 RVOL out).
    Edt {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },

    /// Skeletonize a vessel mask, sample keypoints, and write the kNN graph.
    Encode {
        #[arg(long)]
        mask: PathBuf,
        /// Keypoints to sample.
        #[arg(long, default_value_t = 256)]
        n: usize,
        /// Neighbors per keypoint.
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Node feature width.
        #[arg(long, default_value_t = 32)]
        d0: usize,
        #[arg(long)]
        out: PathBuf,
    },

    /// Finite-difference check of end-to-end gradients on a small phantom.
    Gradcheck {
        /// Cubic phantom edge length.
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long, value_enum, default_value_t = FusionArg::All)]
        fusion: FusionArg,
        /// Failure threshold on the max relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },

    /// Train the toy model on a phantom triple.
    Train {
        #[arg(long)]
        phantom_prefix: String,
        #[arg(long, value_enum, default_value_t = FusionArg::CrossAttention)]
        fusion: FusionArg,
        #[arg(long, value_enum, default_value_t = SclArg::Cats)]
        scl: SclArg,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV loss log (iter,ce,scl,total).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0.02)]
        lr: f64,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long, value_enum, default_value_t = DenomArg::PaperLiteral)]
        denominator: DenomArg,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 256)]
        n_keypoints: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
    },

    /// Predict labels with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ct: PathBuf,
        #[arg(long)]
        vessel: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },

    /// Score a prediction against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Optional JSON report path.
        #[arg(long)]
        json: Option<PathBuf>,
    },

    /// Train and score every fusion x SCL combination (12 rows of CSV).
    Ablate {
        #[arg(long)]
        phantom_prefix: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        iters: usize,
    },
}

#[allow(clippy::too_many_arguments)]
fn train_config(
    seed: u64,
    fusion: Fusion,
    scl: SclArg,
    iters: usize,
    lr: f64,
    lambda: f64,
    tau: f64,
    denominator: DenomArg,
    classes: usize,
    n_keypoints: usize,
    k: usize,
) -> TrainConfig {
    let scl_cfg = match scl {
        SclArg::None => None,
        SclArg::Fifo | SclArg::Cats => Some(SclConfig {
            temperature: tau,
            strategy: if scl == SclArg::Fifo { MemoryStrategy::Fifo } else { MemoryStrategy::Cats },
            denominator_mode: match denominator {
                DenomArg::PaperLiteral => DenominatorMode::PaperLiteral,
                DenomArg::WithPositive => DenominatorMode::WithPositive,
            },
            ..SclConfig::default()
        }),
    };
    TrainConfig {
        backbone: BackboneConfig {
            fusion,
            lambda_scl: lambda,
            lr,
            iterations: iters,
            seed,
            class_count: classes,
            ..BackboneConfig::default()
        },
        topo: TopoConfig { n_keypoints, knn_k: k, ..TopoConfig::default() },
        scl: scl_cfg,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Phantom { dims, branches, radius_min, radius_max, classes, out_prefix } => {
            let spec = PhantomSpec {
                dims,
                seed: cli.seed,
                branch_count: branches,
                tube_radius_range: (radius_min, radius_max),
                class_count: classes,
            };
            write_phantom_files(&out_prefix, &spec)?;
            eprintln!("wrote {out_prefix}.{{ct,vessel,labels}}.rvol");
        }
        Cmd::Edt { mask, out } => {
            let mask = load_rvol(mask)?.into_u8()?;
            let field = exact_edt_threaded(&mask, cli.threads)?;
            let mut dist: Volume<f32> = Volume::new(field.dims(), 0.0);
            for (o, &d) in dist.data_mut().iter_mut().zip(field.dist.data()) {
                *o = d as f32;
            }
            save_rvol(&dist, out)?;
        }
        Cmd::Encode { mask, n, k, d0, out } => {
            let mask = load_rvol(mask)?.into_u8()?;
            let field = exact_edt_threaded(&mask, cli.threads)?;
            let sk = skeletonize(&mask)?;
            let kp = sample_keypoints(&sk, &field, n)?;
            let mut graph = build_knn(&kp, k)?;
            normalize_adjacency(&mut graph);
            let mlp = MlpParams::init(&[7, d0], rng::component_seed(cli.seed, "encode-mlp"))?;
            init_node_features(&mut graph, &mlp)?;
            std::fs::write(out, graph_to_json(&graph)?)?;
            eprintln!("graph: {} keypoints, {} edges", graph.node_count(), graph.edges().len());
        }
        Cmd::Gradcheck { scale, fusion, tolerance } => {
            let targets: Vec<Fusion> = match fusion.to_fusion() {
                Some(f) => vec![f],
                None => Fusion::ALL.to_vec(),
            };
            let mut worst = 0.0f64;
            for f in targets {
                let err = pipeline_grad_check(f, scale, cli.seed)?;
                println!("{} {err:e}", f.as_str());
                worst = worst.max(err);
            }
            if worst > tolerance {
                return Err(vastopo_core::Error::Config(format!(
                    "gradient check failed: max relative error {worst:e} exceeds {tolerance:e}"
                )));
            }
        }
        Cmd::Train {
            phantom_prefix,
            fusion,
            scl,
            iters,
            out,
            log,
            lr,
            lambda,
            tau,
            denominator,
            classes,
            n_keypoints,
            k,
        } => {
            let fusion = fusion.to_fusion().ok_or_else(|| {
                vastopo_core::Error::Config("fusion=all is only valid for gradcheck".into())
            })?;
            let cfg = train_config(
                cli.seed, fusion, scl, iters, lr, lambda, tau, denominator, classes, n_keypoints, k,
            );
            let result = train_toy(&phantom_prefix, &cfg, &out, log.as_deref())?;
            let last = result.log.last().expect("at least one iteration");
            eprintln!(
                "trained {} iterations: ce={:.6} scl={:.6} total={:.6}",
                result.log.len(),
                last.ce,
                last.scl,
                last.total
            );
        }
        Cmd::Infer { ckpt, ct, vessel, out } => {
            let model = load_model(ckpt)?;
            let ct = load_rvol(ct)?.into_f32()?;
            let vessel = load_rvol(vessel)?.into_u8()?;
            let pred = infer(&model.cfg, &model.store, &ct, &vessel)?;
            save_rvol(&pred, out)?;
        }
        Cmd::Eval { pred, gt, json } => {
            let pred = load_rvol(pred)?.into_u8()?;
            let gt = load_rvol(gt)?.into_u8()?;
            let report = evaluate(&pred, &gt, None)?;
            println!(
                "macro dsc={:.4} miou={:.4} rvd={:.4} classes_in_gt={}",
                report.macro_dsc, report.macro_miou, report.mean_rvd, report.classes_in_gt
            );
            if let Some(path) = json {
                std::fs::write(path, report.to_json())?;
            }
        }
        Cmd::Ablate { phantom_prefix, out, iters } => {
            let (ct, vessel, labels) = load_phantom_files(&phantom_prefix)?;
            let base = train_config(
                cli.seed,
                Fusion::CrossAttention,
                SclArg::Cats,
                iters,
                0.02,
                0.1,
                0.1,
                DenomArg::PaperLiteral,
                3,
                256,
                8,
            );
            let rows = ablate(&ct, &vessel, &labels, &base)?;
            std::fs::write(out, ablate_rows_to_csv(&rows))?;
            for r in &rows {
                eprintln!(
                    "{},{}: dsc={:.2} miou={:.2} rvd={:.2}",
                    r.fusion.as_str(),
                    r.scl.map_or("none", MemoryStrategy::as_str),
                    r.dsc,
                    r.miou,
                    r.rvd
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
