//! `mpgen`: dataset synthesis, tokenizer and generator training, fine-tuning,
//! evaluation, ablations and plotting.

mod config;

use std::collections::BTreeMap;
use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Parser, Subcommand, ValueEnum};
use mpgen_core::data::{samples_from_manifest, Sample, Stage2Data};
use mpgen_core::fusion::ProviderRegistry;
use mpgen_core::harness::{ablate, ablation_table_csv, emit_plots, few_shot_sweep, run_eval, AblationFlags, EvalReport, FewShotPoint};
use mpgen_core::model::{FinetuneMode, FinetunePolicy, Stage2Model};
use mpgen_core::tokenizer::{init_codebook_from, stack_rasters, Discriminator, Tokenizer};
use mpgen_core::train::{finetune, train_stage1, train_stage2, Denominator};
use mpgen_io::{Checkpoint, DatasetManifest, Raster};
use mpgen_synth::{build_scene, sweep_trajectory, ScenarioKind, SweepOptions, Trajectory};
use rand_free_shuffle::seeded_order;

use crate::config::RunConfig;

type Res<T> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "mpgen", version, about = "Sensing-to-multipath map generation toolkit")]
struct Cli {
    /// JSON run configuration; omitted keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Crossroad,
    WideLane,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    TaskWiseOnly,
    NewTask,
}

impl From<Mode> for FinetuneMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => FinetuneMode::Full,
            Mode::TaskWiseOnly => FinetuneMode::TaskWiseOnly,
            Mode::NewTask => FinetuneMode::NewTask,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum Denom {
    Prediction,
    Target,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a trajectory sweep into a manifest dataset.
    Synth {
        #[arg(long, value_enum)]
        scenario: Scenario,
        #[arg(long, value_delimiter = ',', required = true)]
        altitudes: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        freqs: Vec<f64>,
    },
    /// Train an image tokenizer (`--domain image`) or a map tokenizer (`--domain <param>`).
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: String,
        /// Tokenizer checkpoint whose codebook initializes this one.
        #[arg(long)]
        init_codebook: Option<PathBuf>,
    },
    /// Train fusion and mapper against frozen tokenizers.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding `tokenizer_<domain>.ckpt` files; defaults to `--out`.
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on a sample budget, or sweep budgets and seeds.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "full")]
        mode: Mode,
        #[arg(long)]
        budget: Option<usize>,
        /// Few-shot sweep budgets; requires `--test`.
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value = "finetune")]
        method: String,
    },
    /// Per-dataset, per-task NMSE report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
        #[arg(long, value_enum)]
        denominator: Option<Denom>,
        #[arg(long, default_value = "eval")]
        name: String,
    },
    /// Train and evaluate structural ablations with identical seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        /// Any of full, no_semantic, no_routed, no_shared, no_freq.
        #[arg(long, value_delimiter = ',', default_value = "full,no_semantic,no_routed,no_shared,no_freq")]
        variants: Vec<String>,
    },
    /// Per-path NMSE for the first N dominant paths.
    Topn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        n: u32,
    },
    /// Add an output parameter to a trained checkpoint.
    AddParam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// Map tokenizer checkpoint; defaults to `<artifacts>/tokenizer_<task>.ckpt`.
        #[arg(long)]
        decoder: Option<PathBuf>,
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
    /// Bar charts and few-shot curves from report JSON files.
    Plot {
        #[arg(long, value_delimiter = ',')]
        reports: Vec<PathBuf>,
        #[arg(long)]
        few_shot: Option<PathBuf>,
    },
}

mod rand_free_shuffle {
    /// Deterministic permutation of `0..n`: indices sorted by a keyed hash.
    pub fn seeded_order(n: usize, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by_key(|&i| splitmix(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        idx
    }

    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

fn tokenizer_path(dir: &Path, domain: &str) -> PathBuf {
    dir.join(format!("tokenizer_{domain}.ckpt"))
}

fn load_tokenizer(path: &Path) -> Res<Tokenizer> {
    Ok(Tokenizer::from_checkpoint(&Checkpoint::read(path).map_err(|e| format!("{}: {e}", path.display()))?)?)
}

fn load_samples(dir: &Path) -> Res<Vec<Sample>> {
    let path = dir.join("manifest.json");
    let manifest = DatasetManifest::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(samples_from_manifest(dir, &manifest)?)
}

fn build_data(dir: &Path, tasks: &[String], artifacts: &Path, cfg: &RunConfig, path_index: bool) -> Res<Stage2Data> {
    let image_tok = load_tokenizer(&tokenizer_path(artifacts, "image"))?;
    let registry = ProviderRegistry::with_defaults()?;
    let provider = registry.get(&cfg.stage2.fusion.provider_id)?;
    let mut data = Stage2Data::build(&load_samples(dir)?, tasks, &image_tok, provider)?;
    data.use_path_index = path_index;
    Ok(data)
}

fn load_model(path: &Path) -> Res<Stage2Model> {
    Ok(Stage2Model::from_checkpoint(&Checkpoint::read(path).map_err(|e| format!("{}: {e}", path.display()))?)?)
}

fn write(path: &Path, text: &str) -> Res<()> {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_report(out: &Path, name: &str, report: &EvalReport) -> Res<()> {
    let (csv, md) = report.write(out, name)?;
    write(&out.join(format!("{name}.json")), &serde_json::to_string_pretty(report)?)?;
    println!("wrote {}\nwrote {}", csv.display(), md.display());
    print!("{}", report.to_table());
    Ok(())
}

fn print_trainable(model: &Stage2Model) {
    for mode in [FinetuneMode::Full, FinetuneMode::TaskWiseOnly, FinetuneMode::NewTask] {
        let (t, n) = model.parameter_counts(mode);
        println!("trainable under {mode:?}: {t} / {n} ({:.2}%)", 100.0 * t as f64 / n.max(1) as f64);
    }
}

fn default_trajectory(kind: ScenarioKind) -> Trajectory {
    match kind {
        ScenarioKind::Crossroad => Trajectory { start: (0.0, 60.0), end: (0.0, -60.0), velocity: (0.0, -4.0) },
        ScenarioKind::WideLane => Trajectory { start: (-150.0, 0.0), end: (150.0, 0.0), velocity: (10.0, 0.0) },
    }
}

fn run(cli: Cli) -> Res<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    let seed = cfg.train.seed;
    let out = cli.out;
    fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    let artifacts_or = |a: Option<PathBuf>| a.unwrap_or_else(|| out.clone());
    match cli.cmd {
        Cmd::Synth { scenario, altitudes, freqs } => {
            let kind = match scenario {
                Scenario::Crossroad => ScenarioKind::Crossroad,
                Scenario::WideLane => ScenarioKind::WideLane,
            };
            let s = &cfg.synth;
            let traj = match s.trajectory {
                Some((start, end, velocity)) => Trajectory { start, end, velocity },
                None => default_trajectory(kind),
            };
            let opts = SweepOptions {
                image_size: s.image_size,
                map_size: s.map_size,
                max_paths: s.max_paths,
                path_indices: s.path_indices.clone(),
                params: s.params.clone(),
                fov_deg: s.fov_deg,
            };
            let manifest = sweep_trajectory(&build_scene(seed, kind), &traj, &altitudes, &freqs, &out, &opts)?;
            println!("wrote {} snapshots to {}", manifest.snapshots.len(), out.display());
        }
        Cmd::TrainStage1 { data, domain, init_codebook } => {
            let samples = load_samples(&data)?;
            let (tcfg, rasters): (_, Vec<&Raster>) = if domain == "image" {
                (cfg.image_tokenizer.clone(), samples.iter().map(|s| &s.image).collect())
            } else {
                let maps = samples
                    .iter()
                    .map(|s| s.maps.get(&domain).ok_or_else(|| format!("snapshot {} has no {domain} map", s.id)))
                    .collect::<Result<Vec<_>, _>>()?;
                (cfg.map_tokenizer.clone(), maps)
            };
            let tok = Tokenizer::new(tcfg.clone(), seed, DType::F32)?;
            if let Some(p) = init_codebook {
                tok.set_codebook(&init_codebook_from(&load_tokenizer(&p)?.codebook()?, &tcfg)?)?;
            }
            let disc = Discriminator::new(tcfg.channels, tcfg.disc_channels, seed.wrapping_add(1), DType::F32)?;
            let x = stack_rasters(&rasters, DType::F32, tok.device())?;
            let report = train_stage1(&tok, &disc, &x, &cfg.train)?;
            tok.to_checkpoint()?.write(&tokenizer_path(&out, &domain))?;
            println!("wrote {}", tokenizer_path(&out, &domain).display());
            write(&out.join(format!("stage1_{domain}_curves.csv")), &report.curves.to_csv())?;
            println!("{} steps, final total loss {:?}", report.steps, report.curves.last("total"));
        }
        Cmd::TrainStage2 { data, artifacts } => {
            let artifacts = artifacts_or(artifacts);
            let tasks = cfg.stage2.mapper.tasks.clone();
            let mut decoders = BTreeMap::new();
            for t in &tasks {
                decoders.insert(t.clone(), load_tokenizer(&tokenizer_path(&artifacts, t))?);
            }
            let mut model = Stage2Model::new(cfg.stage2.clone(), decoders, seed, DType::F32)?;
            model.freeze_decoders = cfg.train.freeze_decoders;
            let d = build_data(&data, &tasks, &artifacts, &cfg, cfg.stage2.mapper.path_table > 0)?;
            let report = train_stage2(&model, &d, &cfg.train, FinetuneMode::Full)?;
            let ck = out.join("stage2.ckpt");
            model.to_checkpoint()?.write(&ck)?;
            println!("wrote {}", ck.display());
            write(&out.join("stage2_curves.csv"), &report.curves.to_csv())?;
            for (t, v) in report.final_train_nmse() {
                println!("train NMSE {t}: {v:.6}");
            }
        }
        Cmd::Finetune { checkpoint, data, artifacts, mode, budget, budgets, seeds, test, method } => {
            let artifacts = artifacts_or(artifacts);
            let model = load_model(&checkpoint)?;
            let tasks = model.tasks().to_vec();
            let path_index = model.cfg.mapper.path_table > 0;
            let pool = build_data(&data, &tasks, &artifacts, &cfg, path_index)?;
            if !budgets.is_empty() {
                let test = test.ok_or("--budgets needs --test")?;
                let test = build_data(&test, &tasks, &artifacts, &cfg, path_index)?;
                let ck = Checkpoint::read(&checkpoint)?;
                let points = few_shot_sweep(&ck, &method, mode.into(), &pool, &test, &budgets, &seeds, &cfg.train)?;
                let mut csv = String::from("method,budget,seed,nmse\n");
                for p in &points {
                    csv.push_str(&format!("{},{},{},{}\n", p.method, p.budget, p.seed, p.nmse));
                }
                write(&out.join(format!("{method}_few_shot.csv")), &csv)?;
                write(&out.join(format!("{method}_few_shot.json")), &serde_json::to_string_pretty(&points)?)?;
            } else {
                let budget = budget.unwrap_or(pool.len()).min(pool.len());
                let mut idx = seeded_order(pool.len(), seed);
                idx.truncate(budget);
                let subset = pool.subset(&idx)?;
                let mut model = model;
                model.freeze_decoders = cfg.train.freeze_decoders;
                print_trainable(&model);
                let report = finetune(&model, &FinetunePolicy { mode: mode.into(), sample_budget: budget }, &subset, &cfg.train)?;
                let ck = out.join("finetuned.ckpt");
                model.to_checkpoint()?.write(&ck)?;
                println!("wrote {}", ck.display());
                write(&out.join("finetune_curves.csv"), &report.curves.to_csv())?;
            }
        }
        Cmd::Eval { checkpoint, data, artifacts, split, denominator, name } => {
            let artifacts = artifacts_or(artifacts);
            let model = load_model(&checkpoint)?;
            let tasks = model.tasks().to_vec();
            let all = build_data(&data, &tasks, &artifacts, &cfg, model.cfg.mapper.path_table > 0)?;
            let (train, val) = all.split(cfg.train.val_fraction);
            let d = match split {
                Split::All => all,
                Split::Train => all.subset(&train)?,
                Split::Val => all.subset(&val)?,
            };
            let denom = match denominator {
                Some(Denom::Target) => Denominator::Target,
                Some(Denom::Prediction) => Denominator::Prediction,
                None => cfg.train.loss_denominator,
            };
            let report = run_eval(&model, &d, &tasks, denom, seed, &checkpoint.display().to_string())?;
            write_report(&out, &name, &report)?;
        }
        Cmd::Ablate { data, test, artifacts, variants } => {
            let artifacts = artifacts_or(artifacts);
            let tasks = cfg.stage2.mapper.tasks.clone();
            let flags = variants
                .iter()
                .map(|v| {
                    AblationFlags::all_variants()
                        .into_iter()
                        .find(|f| f.name() == v)
                        .ok_or_else(|| format!("unknown ablation variant {v}"))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let path_index = cfg.stage2.mapper.path_table > 0;
            let train = build_data(&data, &tasks, &artifacts, &cfg, path_index)?;
            let test = match test {
                Some(t) => build_data(&t, &tasks, &artifacts, &cfg, path_index)?,
                None => train.clone(),
            };
            let decoders = || -> mpgen_core::Result<BTreeMap<String, Tokenizer>> {
                tasks
                    .iter()
                    .map(|t| {
                        let ck = Checkpoint::read(&tokenizer_path(&artifacts, t))?;
                        Ok((t.clone(), Tokenizer::from_checkpoint(&ck)?))
                    })
                    .collect()
            };
            let results = ablate(&flags, &cfg.stage2, &decoders, &train, &test, &cfg.train)?;
            for r in &results {
                write_report(&out, &format!("ablation_{}", r.variant), &r.report)?;
            }
            let table = ablation_table_csv(&results);
            write(&out.join("ablation.csv"), &table)?;
            print!("{table}");
        }
        Cmd::Topn { checkpoint, data, artifacts, n } => {
            let artifacts = artifacts_or(artifacts);
            let model = load_model(&checkpoint)?;
            let tasks = model.tasks().to_vec();
            let all = build_data(&data, &tasks, &artifacts, &cfg, model.cfg.mapper.path_table > 0)?;
            let d = all.filter(|i| all.path_index[i] <= n)?;
            let report = run_eval(&model, &d, &tasks, cfg.train.loss_denominator, seed, &checkpoint.display().to_string())?;
            write_report(&out, "topn", &report)?;
            for (p, v) in report.path_averages() {
                println!("path {p}: {v:.6}");
            }
            for f in emit_plots(&[("topn".to_string(), report)], &[], &out)? {
                println!("wrote {}", f.display());
            }
        }
        Cmd::AddParam { checkpoint, task, decoder, artifacts } => {
            let artifacts = artifacts_or(artifacts);
            let mut model = load_model(&checkpoint)?;
            let dec = load_tokenizer(&decoder.unwrap_or_else(|| tokenizer_path(&artifacts, &task)))?;
            model.add_task(&task, dec)?;
            print_trainable(&model);
            let ck = out.join(format!("stage2_with_{task}.ckpt"));
            model.to_checkpoint()?.write(&ck)?;
            println!("wrote {}", ck.display());
        }
        Cmd::Plot { reports, few_shot } => {
            let mut loaded = Vec::new();
            for p in &reports {
                let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
                loaded.push((name, serde_json::from_str::<EvalReport>(&text)?));
            }
            let points: Vec<FewShotPoint> = match few_shot {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?)?,
                None => Vec::new(),
            };
            for f in emit_plots(&loaded, &points, &out)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
