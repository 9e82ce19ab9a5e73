use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ribscan::classifier::{self, NetworkParams, Optimizer, TrainConfig};
use ribscan::config::KeyValues;
use ribscan::eval::{self, LabelSource, LineSetParams, ScenarioConfig, TemplateContext};
use ribscan::phantom::{sample_template_pc, PhantomModel};
use ribscan::registration::{apply_transform, cpd_rigid, load_transform};
use ribscan::scanplan::{paths_from_csv, paths_to_csv, ScanPathTemplate};
use ribscan::tactile_pc::downsample;
use ribscan::tactsim::{load_windows, save_windows, traces_to_csv};
use ribscan::{CloudKind, PointCloud};

#[derive(Parser)]
#[command(name = "ribscan", about = "Tactile rib mapping and intercostal path transfer on synthetic phantoms")]
struct Cli {
    /// key=value file with `phantom.*`, `scenario.*` and `train.*` entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Phantom artifacts.
    Phantom {
        #[command(subcommand)]
        action: PhantomCmd,
    },
    /// Scan template lines on randomly placed phantoms.
    Simulate {
        #[arg(long, default_value_t = 6)]
        placements: usize,
    },
    /// Train the bone classifier on saved windows.
    Train {
        #[arg(long)]
        windows: PathBuf,
        #[arg(long)]
        lines: Option<usize>,
    },
    /// Label saved windows with a trained model.
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        windows: PathBuf,
    },
    /// One trial up to the flattened tactile cloud.
    Cluster {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Rigid CPD of a source cloud onto a target cloud.
    Register {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Apply a saved transform to a path CSV.
    Transfer {
        #[arg(long)]
        transform: PathBuf,
        #[arg(long)]
        paths: PathBuf,
    },
    /// Run all trials of the scenario.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Summarize a report CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Write the phantom spec, template and template cloud.
    Gen,
}

fn load_config(path: &Option<PathBuf>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(KeyValues::new()),
    }
}

fn scenario(kv: &KeyValues, seed: Option<u64>) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::from_config(kv)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn train_config(kv: &KeyValues, seed: Option<u64>) -> Result<TrainConfig> {
    let t = kv.section("train");
    let mut cfg = TrainConfig::default();
    t.apply("learning_rate", &mut cfg.learning_rate)?;
    t.apply("batch_size", &mut cfg.batch_size)?;
    t.apply("epochs", &mut cfg.epochs)?;
    t.apply("seed", &mut cfg.seed)?;
    if let Some(o) = t.get_str("optimizer") {
        cfg.optimizer = Optimizer::parse(o)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn model_or_labels(cfg: &mut ScenarioConfig, model: &Option<PathBuf>) -> Result<Option<NetworkParams>> {
    match model {
        Some(p) => Ok(Some(classifier::load_model(p)?)),
        None => {
            if cfg.labels == LabelSource::Classifier {
                log::warn!("no model given; using simulator labels");
                cfg.labels = LabelSource::Simulator;
            }
            Ok(None)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let kv = load_config(&cli.config)?;
    fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match cli.cmd {
        Command::Phantom { action: PhantomCmd::Gen } => {
            let cfg = scenario(&kv, cli.seed)?;
            let model = PhantomModel::new(cfg.phantom.clone())?;
            cfg.phantom.to_config().save(out.join("phantom.txt"))?;
            ScanPathTemplate::for_phantom(&model)?.save(out.join("template.csv"))?;
            let pc = sample_template_pc(&model, cfg.template_density)?.cloud;
            downsample(&pc, cfg.downsample_cell)?.save(out.join("template_pc.csv"))?;
            if model.target().is_some() {
                model.target_gt_cloud(cfg.gt_spacing)?.save(out.join("target_gt.csv"))?;
            }
            println!("phantom written to {}", out.display());
        }
        Command::Simulate { placements } => {
            let cfg = scenario(&kv, cli.seed)?;
            let p = LineSetParams {
                spec: cfg.phantom.clone(),
                placements,
                seed: cfg.seed,
                displacement: cfg.displacement,
                corner_noise: cfg.corner_noise,
                scan: cfg.scan,
            };
            let lines = eval::simulate_line_set(&p)?;
            let traces: Vec<_> = lines.iter().map(|l| l.trace.clone()).collect();
            let windows: Vec<_> = lines.iter().map(|l| l.window.clone()).collect();
            write(&out.join("traces.csv"), &traces_to_csv(&traces))?;
            save_windows(out.join("windows.twin"), &windows)?;
            println!("{} lines simulated", lines.len());
        }
        Command::Train { windows, lines } => {
            let mut data = load_windows(&windows)?;
            if let Some(n) = lines {
                data.truncate(n);
            }
            let cfg = train_config(&kv, cli.seed)?;
            let trained = classifier::train(&data, &cfg)?;
            classifier::save_model(out.join("model.tnet"), &trained.params)?;
            write(&out.join("train_log.csv"), &trained.log_csv())?;
            if let Some(last) = trained.log.last() {
                println!("epoch {} loss {:.5} accuracy {:.4}", last.epoch, last.loss, last.accuracy);
            }
        }
        Command::Segment { model, windows } => {
            let params = classifier::load_model(&model)?;
            let data = load_windows(&windows)?;
            let mut csv = String::from("path_id,frame,label\n");
            let mut acc = Vec::new();
            for w in &data {
                let labels = classifier::segment(&classifier::forward(w, &params)?);
                for (i, l) in labels.iter().enumerate() {
                    csv.push_str(&format!("{},{},{}\n", w.path_id, i, l.as_str()));
                }
                let truth = w
                    .labels
                    .iter()
                    .map(|&c| ribscan::tactsim::TraceLabel::from_class_id(c))
                    .collect::<ribscan::Result<Vec<_>>>()?;
                let m = classifier::detection_metrics(&labels, &truth, w.spacing())?;
                acc.push(m.accuracy.unwrap_or(0.0));
            }
            write(&out.join("segments.csv"), &csv)?;
            let mean = acc.iter().sum::<f64>() / acc.len().max(1) as f64;
            println!("{} windows, mean accuracy {:.2}%", data.len(), mean);
        }
        Command::Cluster { model, trial } => {
            let mut cfg = scenario(&kv, cli.seed)?;
            cfg.reconstruct = false;
            let params = model_or_labels(&mut cfg, &model)?;
            let ctx = TemplateContext::new(&cfg)?;
            let (row, art) = eval::run_trial(&cfg, &ctx, params.as_ref(), trial)?;
            art.dense.save(out.join("tactile_dense.csv"))?;
            art.tactile.save(out.join("tactile_flat.csv"))?;
            ctx.cloud.save(out.join("template_pc.csv"))?;
            write(&out.join("sternum_paths.csv"), &paths_to_csv(&art.sternum_paths))?;
            println!(
                "{} dense points, {} downsampled; registration error {:.3} mm / {:.3} deg",
                art.dense.len(),
                art.tactile.len(),
                row.reg_dist,
                row.reg_ang
            );
        }
        Command::Register { source, target } => {
            let cfg = scenario(&kv, cli.seed)?;
            let src = PointCloud::load(&source, CloudKind::TactileDense)?;
            let tgt = PointCloud::load(&target, CloudKind::TemplateUs)?;
            let res = cpd_rigid(&src, &tgt, &cfg.cpd)?;
            write(&out.join("transform.txt"), &res.to_text())?;
            apply_transform(&src, &res.transform)?.save(out.join("registered.csv"))?;
            println!(
                "angle {:.4} deg, translation ({:.3}, {:.3}) mm after {} iterations",
                res.transform.angle_deg(),
                res.transform.translation_vec().x,
                res.transform.translation_vec().y,
                res.iterations
            );
        }
        Command::Transfer { transform, paths } => {
            let t = load_transform(&transform)?;
            let text = fs::read_to_string(&paths).with_context(|| format!("reading {}", paths.display()))?;
            let moved: Vec<_> = paths_from_csv(&text)?
                .iter()
                .map(|p| ribscan::pathtransfer::transfer_path(p, &t))
                .collect();
            write(&out.join("transferred.csv"), &paths_to_csv(&moved))?;
            println!("{} paths transferred", moved.len());
        }
        Command::Evaluate { model } => {
            let mut cfg = scenario(&kv, cli.seed)?;
            let params = model_or_labels(&mut cfg, &model)?;
            let report = eval::run_experiment(&cfg, params.as_ref())?;
            report.save(out)?;
            print!("{}", report.summary().to_text());
        }
        Command::Report { input } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let summary = summarize_csv(&text)?;
            write(&out.join("summary.txt"), &summary.to_text())?;
            print!("{}", summary.to_text());
        }
    }
    Ok(())
}

/// Mean and sample sd of every numeric column.
fn summarize_csv(text: &str) -> Result<KeyValues> {
    let mut rows = text.lines().filter(|l| !l.trim().is_empty());
    let Some(header) = rows.next() else {
        bail!("empty report");
    };
    let names: Vec<&str> = header.split(',').collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut n = 0;
    for row in rows {
        n += 1;
        for (i, field) in row.split(',').enumerate().take(names.len()) {
            if let Ok(v) = field.parse::<f64>() {
                cols[i].push(v);
            }
        }
    }
    let mut kv = KeyValues::new();
    kv.set("rows", n);
    for (name, vals) in names.iter().zip(&cols) {
        if vals.is_empty() || *name == "trial" {
            continue;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = if vals.len() > 1 {
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        kv.set(format!("mean_{name}"), format!("{m:.6}"));
        kv.set(format!("sd_{name}"), format!("{sd:.6}"));
    }
    Ok(kv)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
