//! Evaluation protocols, ablations and report/plot emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use mpgen_io::Raster;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Stage2Data;
use crate::error::{CoreError, Result};
use crate::model::{FinetuneMode, FinetunePolicy, Stage2Config, Stage2Model};
use crate::tokenizer::Tokenizer;
use crate::train::{dataset_nmse, finetune, mean, median, train_stage2, Denominator, TrainConfig};

/// `||M - M_hat||^2 / ||D||^2` over all entries, `D` chosen by `denominator`.
pub fn nmse(target: &Raster, pred: &Raster, denominator: Denominator) -> Result<f64> {
    if target.dims() != pred.dims() {
        return Err(CoreError::Shape(format!("nmse of {:?} vs {:?}", target.dims(), pred.dims())));
    }
    let num: f64 = target.data.iter().zip(&pred.data).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    let d = match denominator {
        Denominator::Prediction => &pred.data,
        Denominator::Target => &target.data,
    };
    let den: f64 = d.iter().map(|v| (*v as f64).powi(2)).sum();
    if den == 0.0 {
        return Err(CoreError::DegenerateDenominator);
    }
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub task: String,
    pub path_index: u32,
    pub nmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub denominator: Denominator,
    pub seed: u64,
    pub checkpoint: String,
    /// Averaging convention of `dataset_averages` and `overall`.
    pub averaging: String,
}

pub const AVERAGING: &str = "mean over tasks and path indices per dataset, then mean over datasets";

impl EvalReport {
    pub fn datasets(&self) -> Vec<String> {
        let mut d: Vec<String> = self.rows.iter().map(|r| r.dataset.clone()).collect();
        d.dedup();
        d.sort();
        d.dedup();
        d
    }

    pub fn tasks(&self) -> Vec<String> {
        let mut t: Vec<String> = self.rows.iter().map(|r| r.task.clone()).collect();
        t.sort();
        t.dedup();
        t
    }

    pub fn dataset_averages(&self) -> BTreeMap<String, f64> {
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(r.dataset.clone()).or_default().push(r.nmse);
        }
        groups.into_iter().map(|(k, v)| (k, mean(&v))).collect()
    }

    pub fn task_averages(&self) -> BTreeMap<String, f64> {
        let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(r.task.clone()).or_default().push(r.nmse);
        }
        groups.into_iter().map(|(k, v)| (k, mean(&v))).collect()
    }

    /// Mean NMSE per path index over datasets and tasks.
    pub fn path_averages(&self) -> BTreeMap<u32, f64> {
        let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry(r.path_index).or_default().push(r.nmse);
        }
        groups.into_iter().map(|(k, v)| (k, mean(&v))).collect()
    }

    pub fn overall(&self) -> f64 {
        mean(&self.dataset_averages().into_values().collect::<Vec<_>>())
    }

    pub fn get(&self, dataset: &str, task: &str, path_index: u32) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.dataset == dataset && r.task == task && r.path_index == path_index)
            .map(|r| r.nmse)
    }

    /// Rows sorted by (dataset, task, path index), then per-dataset and overall averages.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,task,path_index,nmse,denominator,seed,checkpoint\n");
        let tail = format!("{},{},{}", self.denominator.as_str(), self.seed, self.checkpoint);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{tail}", r.dataset, r.task, r.path_index, r.nmse);
        }
        for (d, v) in self.dataset_averages() {
            let _ = writeln!(s, "{d},average,,{v},{tail}");
        }
        let _ = writeln!(s, "all,average,,{},{tail}", self.overall());
        s
    }

    /// Datasets as rows, tasks as columns, with an average column and row.
    pub fn to_table(&self) -> String {
        let tasks = self.tasks();
        let mut s = format!("| dataset | {} | average |\n", tasks.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(tasks.len() + 2));
        let avgs = self.dataset_averages();
        for d in self.datasets() {
            let cells: Vec<String> = tasks
                .iter()
                .map(|t| {
                    let v: Vec<f64> = self.rows.iter().filter(|r| r.dataset == d && &r.task == t).map(|r| r.nmse).collect();
                    if v.is_empty() {
                        "-".into()
                    } else {
                        format!("{:.4}", mean(&v))
                    }
                })
                .collect();
            let _ = writeln!(s, "| {d} | {} | {:.4} |", cells.join(" | "), avgs[&d]);
        }
        let tavg = self.task_averages();
        let cells: Vec<String> = tasks.iter().map(|t| format!("{:.4}", tavg[t])).collect();
        let _ = writeln!(s, "| average | {} | {:.4} |", cells.join(" | "), self.overall());
        s
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let csv = dir.join(format!("{name}.csv"));
        let md = dir.join(format!("{name}.md"));
        fs::write(&csv, self.to_csv()).map_err(|e| CoreError::io(&csv, e))?;
        fs::write(&md, self.to_table()).map_err(|e| CoreError::io(&md, e))?;
        Ok((csv, md))
    }
}

/// Per-(condition tag, task, path index) NMSE of `model` on `data`.
pub fn run_eval(
    model: &Stage2Model,
    data: &Stage2Data,
    tasks: &[String],
    denominator: Denominator,
    seed: u64,
    checkpoint: &str,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(CoreError::EmptyDataset("evaluation split".into()));
    }
    for t in tasks {
        if !model.tasks().contains(t) {
            return Err(CoreError::UnknownTask(t.clone()));
        }
        if !data.targets.contains_key(t) {
            return Err(CoreError::IncompleteSnapshot { id: data.ids[0].clone(), task: t.clone() });
        }
    }
    let mut groups: BTreeMap<(String, u32), Vec<usize>> = BTreeMap::new();
    for i in 0..data.len() {
        groups.entry((data.tags[i].clone(), data.path_index[i])).or_default().push(i);
    }
    let mut rows = Vec::new();
    for ((tag, path), idx) in groups {
        let part = data.subset(&idx)?;
        let per_task = dataset_nmse(model, &part, tasks, denominator, false)?;
        for t in tasks {
            rows.push(EvalRow { dataset: tag.clone(), task: t.clone(), path_index: path, nmse: per_task[t] });
        }
    }
    rows.sort_by(|a, b| (&a.dataset, &a.task, a.path_index).cmp(&(&b.dataset, &b.task, b.path_index)));
    Ok(EvalReport { rows, denominator, seed, checkpoint: checkpoint.to_string(), averaging: AVERAGING.to_string() })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub no_semantic: bool,
    pub no_routed: bool,
    pub no_shared: bool,
    pub no_freq: bool,
}

impl AblationFlags {
    pub fn all_variants() -> Vec<AblationFlags> {
        let base = AblationFlags::default();
        vec![
            base,
            AblationFlags { no_semantic: true, ..base },
            AblationFlags { no_routed: true, ..base },
            AblationFlags { no_shared: true, ..base },
            AblationFlags { no_freq: true, ..base },
        ]
    }

    pub fn name(&self) -> &'static str {
        match (self.no_semantic, self.no_routed, self.no_shared, self.no_freq) {
            (false, false, false, false) => "full",
            (true, false, false, false) => "no_semantic",
            (false, true, false, false) => "no_routed",
            (false, false, true, false) => "no_shared",
            (false, false, false, true) => "no_freq",
            _ => "contradictory",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = [self.no_semantic, self.no_routed, self.no_shared, self.no_freq].iter().filter(|b| **b).count();
        if n > 1 {
            return Err(CoreError::Config(format!("contradictory ablation flags {self:?}: at most one per variant")));
        }
        Ok(())
    }

    /// The structurally modified configuration.
    pub fn apply(&self, base: &Stage2Config) -> Result<Stage2Config> {
        self.validate()?;
        let mut c = base.clone();
        if self.no_semantic {
            c.fusion.alpha = 0.0;
        }
        if self.no_routed {
            for m in [&mut c.mapper.token_moe, &mut c.mapper.task_moe] {
                m.n_routed = 0;
                m.top_k = 0;
            }
        }
        if self.no_shared {
            c.mapper.token_moe.n_shared = 0;
            c.mapper.task_moe.n_shared = 0;
        }
        if self.no_freq {
            c.mapper.token_moe.freq_conditioned = false;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub variant: String,
    pub report: EvalReport,
    pub train_nmse: BTreeMap<String, f64>,
}

/// Trains and evaluates each variant from identical seeds and schedule.
/// `decoders` builds fresh copies of the (frozen) map decoders.
pub fn ablate(
    variants: &[AblationFlags],
    base: &Stage2Config,
    decoders: &dyn Fn() -> Result<BTreeMap<String, Tokenizer>>,
    train: &Stage2Data,
    test: &Stage2Data,
    cfg: &TrainConfig,
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::new();
    for flags in variants {
        let c = flags.apply(base)?;
        let model = Stage2Model::new(c, decoders()?, cfg.seed, DType::F32)?;
        let rep = train_stage2(&model, train, cfg, FinetuneMode::Full)?;
        let tasks = model.tasks().to_vec();
        let report = run_eval(&model, test, &tasks, cfg.loss_denominator, cfg.seed, flags.name())?;
        out.push(AblationResult { variant: flags.name().to_string(), report, train_nmse: rep.final_train_nmse() });
    }
    Ok(out)
}

/// Variants as rows, datasets as columns, plus the overall average.
pub fn ablation_table_csv(results: &[AblationResult]) -> String {
    let datasets = results.first().map(|r| r.report.datasets()).unwrap_or_default();
    let mut s = format!("variant,{},average\n", datasets.join(","));
    for r in results {
        let avg = r.report.dataset_averages();
        let cells: Vec<String> = datasets.iter().map(|d| avg.get(d).map_or(String::new(), |v| v.to_string())).collect();
        let _ = writeln!(s, "{},{},{}", r.variant, cells.join(","), r.report.overall());
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotPoint {
    pub method: String,
    pub budget: usize,
    pub seed: u64,
    pub nmse: f64,
}

/// For each budget and seed: restore the pretrained checkpoint, fine-tune on a
/// seeded random `budget`-sample subset of `pool`, and score on `test`.
pub fn few_shot_sweep(
    pretrained: &mpgen_io::Checkpoint,
    method: &str,
    mode: FinetuneMode,
    pool: &Stage2Data,
    test: &Stage2Data,
    budgets: &[usize],
    seeds: &[u64],
    cfg: &TrainConfig,
) -> Result<Vec<FewShotPoint>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for &budget in budgets {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(budget.min(pool.len()));
            let subset = pool.subset(&idx)?;
            let model = Stage2Model::from_checkpoint(pretrained)?;
            let policy = FinetunePolicy { mode, sample_budget: budget };
            finetune(&model, &policy, &subset, &TrainConfig { seed, ..cfg.clone() })?;
            let tasks: Vec<String> = model.tasks().iter().filter(|t| test.targets.contains_key(*t)).cloned().collect();
            let per_task = dataset_nmse(&model, test, &tasks, cfg.loss_denominator, false)?;
            out.push(FewShotPoint { method: method.to_string(), budget, seed, nmse: mean(&per_task.into_values().collect::<Vec<_>>()) });
        }
    }
    Ok(out)
}

/// Median over seeds per (method, budget), budgets ascending.
pub fn few_shot_medians(points: &[FewShotPoint]) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut groups: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for p in points {
        groups.entry(p.method.clone()).or_default().entry(p.budget).or_default().push(p.nmse);
    }
    groups
        .into_iter()
        .map(|(m, b)| (m, b.into_iter().map(|(k, v)| (k, median(&v))).collect()))
        .collect()
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

/// Bar chart; each bar carries its exact value as a label.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64], average: Option<f64>) -> String {
    let max = values.iter().copied().chain(average).fold(0.0f64, f64::max).max(1e-12);
    let n = values.len().max(1) as f64;
    let bw = (W - 2.0 * PAD) / n;
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"10\">\n");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", W / 2.0, svg_escape(title));
    let _ = writeln!(s, "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", H - PAD, W - PAD, H - PAD);
    for (i, (l, v)) in labels.iter().zip(values).enumerate() {
        let h = (H - 2.0 * PAD) * v / max;
        let x = PAD + i as f64 * bw + 0.1 * bw;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"#4a7ab5\"><title>{v}</title></rect>",
            H - PAD - h,
            0.8 * bw
        );
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{v}</text>", x + 0.4 * bw, H - PAD - h - 4.0);
        let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", x + 0.4 * bw, H - PAD + 14.0, svg_escape(l));
    }
    if let Some(a) = average {
        let y = H - PAD - (H - 2.0 * PAD) * a / max;
        let _ = writeln!(s, "<line x1=\"{PAD}\" y1=\"{y:.2}\" x2=\"{}\" y2=\"{y:.2}\" stroke=\"#c0392b\" stroke-dasharray=\"4\"><title>{a}</title></line>", W - PAD);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" fill=\"#c0392b\">average {a}</text>", W - PAD, y - 4.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Line chart of `(x, y)` series; every point carries its exact value.
pub fn line_chart_svg(title: &str, series: &BTreeMap<String, Vec<(usize, f64)>>) -> String {
    let xs: Vec<f64> = series.values().flatten().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = series.values().flatten().map(|p| p.1).collect();
    let (x0, x1) = (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let y1 = ys.iter().copied().fold(0.0f64, f64::max).max(1e-12);
    let sx = |x: f64| if x1 > x0 { PAD + (W - 2.0 * PAD) * (x - x0) / (x1 - x0) } else { W / 2.0 };
    let sy = |y: f64| H - PAD - (H - 2.0 * PAD) * y / y1;
    let colors = ["#4a7ab5", "#c0392b", "#27ae60", "#8e44ad", "#d35400"];
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"10\">\n");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>", W / 2.0, svg_escape(title));
    for (k, (name, pts)) in series.iter().enumerate() {
        let c = colors[k % colors.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x as f64), sy(*y))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" points=\"{}\"/>", path.join(" "));
        for (x, y) in pts {
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{c}\"><title>{x}: {y}</title></circle>", sx(*x as f64), sy(*y));
            let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\">{y}</text>", sx(*x as f64) + 4.0, sy(*y) - 4.0);
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>", W - PAD, 36 + 12 * k, svg_escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn write_pair(dir: &Path, stem: &str, svg: &str, csv: &str) -> Result<Vec<PathBuf>> {
    let a = dir.join(format!("{stem}.svg"));
    let b = dir.join(format!("{stem}.csv"));
    fs::write(&a, svg).map_err(|e| CoreError::io(&a, e))?;
    fs::write(&b, csv).map_err(|e| CoreError::io(&b, e))?;
    Ok(vec![a, b])
}

/// Per-dataset bars for each report, per-path bars when a report spans
/// several path indices, and few-shot curves. Every plot has a sibling CSV.
pub fn emit_plots(reports: &[(String, EvalReport)], few_shot: &[FewShotPoint], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() && few_shot.is_empty() {
        return Err(CoreError::EmptyDataset("nothing to plot".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let mut files = Vec::new();
    for (name, rep) in reports {
        let avgs = rep.dataset_averages();
        let labels: Vec<String> = avgs.keys().cloned().collect();
        let values: Vec<f64> = avgs.values().copied().collect();
        let mut csv = String::from("dataset,nmse\n");
        for (l, v) in labels.iter().zip(&values) {
            let _ = writeln!(csv, "{l},{v}");
        }
        files.extend(write_pair(out_dir, &format!("{name}_datasets"), &bar_chart_svg(&format!("{name}: NMSE per dataset"), &labels, &values, None), &csv)?);
        let paths = rep.path_averages();
        if paths.len() > 1 {
            let labels: Vec<String> = paths.keys().map(|p| format!("path {p}")).collect();
            let values: Vec<f64> = paths.values().copied().collect();
            let avg = mean(&values);
            let mut csv = String::from("path_index,nmse\n");
            for (p, v) in &paths {
                let _ = writeln!(csv, "{p},{v}");
            }
            let _ = writeln!(csv, "average,{avg}");
            files.extend(write_pair(out_dir, &format!("{name}_paths"), &bar_chart_svg(&format!("{name}: NMSE per path"), &labels, &values, Some(avg)), &csv)?);
        }
    }
    if !few_shot.is_empty() {
        let med = few_shot_medians(few_shot);
        let mut csv = String::from("method,budget,median_nmse\n");
        for (m, pts) in &med {
            for (b, v) in pts {
                let _ = writeln!(csv, "{m},{b},{v}");
            }
        }
        files.extend(write_pair(out_dir, "few_shot", &line_chart_svg("NMSE vs fine-tuning samples", &med), &csv)?);
    }
    Ok(files)
}
