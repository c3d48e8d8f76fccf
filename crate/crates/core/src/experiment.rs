//! The four-experiment comparison: phantom sets, three training runs, test
//! prediction, per-case evaluation, statistics and CSV reports.
//!
//! Experiment 1 trains on base cases, 2 adds globally scaled copies, 3 adds
//! contrast-compartment variants and 4 averages the probability maps of 2
//! and 3.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use myoseg_tensor::checkpoint::Checkpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::{CoreError, Result};
use crate::infer::{argmax_labels, combine, predict};
use crate::metrics::{evaluate_case, CaseMetrics};
use crate::phantom::{generate, PhantomCase, PhantomSpec};
use crate::stats::{bonferroni, friedman, wilcoxon_signed_rank, FriedmanResult};
use crate::train::{build_training_set, train, AugmentationStrategy, TrainConfig};
use crate::volume::class;

pub const EXPERIMENTS: [&str; 4] = ["exp1", "exp2", "exp3", "exp4"];
/// Pairwise comparisons among the four experiments.
pub const NUM_COMPARISONS: usize = 6;

/// Generated phantoms, with identifiers.
pub struct Datasets {
    pub train: Vec<(String, PhantomCase)>,
    pub test: Vec<(String, PhantomCase)>,
}

fn draw_cases(cfg: &ExperimentConfig, stream: u64, n: usize, range: [f64; 2], prefix: &str) -> Result<Vec<(String, PhantomCase)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    rng.set_stream(stream);
    let blood_base = PhantomSpec::DEFAULT_TISSUE_HU[class::LV_BLOOD as usize];
    (0..n)
        .map(|i| {
            let geometry_seed: u64 = rng.random();
            let noise_seed: u64 = rng.random();
            let blood_hu = if range[0] == range[1] { range[0] } else { rng.random_range(range[0]..range[1]) };
            let id = format!("{}_{:03}", prefix, i);
            let case = generate(&cfg.phantom_template(geometry_seed, blood_hu - blood_base), noise_seed)
                .map_err(|e| CoreError::Case { case_id: id.clone(), source: Box::new(e) })?;
            Ok((id, case))
        })
        .collect()
}

/// Training phantoms (blood pool drawn from the training range) and test
/// phantoms (test range), all fixed by `master_seed`.
pub fn generate_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    Ok(Datasets {
        train: draw_cases(cfg, 1, cfg.n_train, cfg.train_contrast_range, "train")?,
        test: draw_cases(cfg, 2, cfg.n_test, cfg.test_contrast_range, "test")?,
    })
}

/// Training configuration with the seed derived from `master_seed`; shared
/// by all three trained experiments.
pub fn derived_train_config(cfg: &ExperimentConfig) -> TrainConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
    rng.set_stream(3);
    TrainConfig { seed: rng.random(), ..cfg.train.clone() }
}

pub fn strategies(cfg: &ExperimentConfig) -> [AugmentationStrategy; 3] {
    [
        AugmentationStrategy::None,
        AugmentationStrategy::GlobalScale(cfg.global_factors.clone()),
        AugmentationStrategy::CompartmentVariants(cfg.compartment_factors.clone()),
    ]
}

/// Trains one model on `cases` with `strategy`.
pub fn train_strategy(
    cfg: &ExperimentConfig,
    cases: &[(String, PhantomCase)],
    strategy: &AugmentationStrategy,
    log: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    let tc = derived_train_config(cfg);
    let base: Vec<PhantomCase> = cases.iter().map(|(_, c)| c.clone()).collect();
    let set = build_training_set(&base, strategy, tc.target_spacing)?;
    Ok(train(&set, &cfg.arch, &tc, strategy.name(), log)?.checkpoint)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub w: Option<f64>,
    pub n_effective: usize,
    pub p_raw: f64,
    pub p_bonferroni: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub friedman: FriedmanResult,
    pub comparisons: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub experiment: String,
    pub n: usize,
    pub dsc: BoxStats,
    /// Over cases with a defined ASSD.
    pub assd: Option<BoxStats>,
    pub assd_flagged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    /// Per experiment, per test case (same case order everywhere).
    pub metrics: [Vec<CaseMetrics>; 4],
    pub stats: StatsReport,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    pub fn from_metrics(metrics: [Vec<CaseMetrics>; 4]) -> Result<Self> {
        let ids: Vec<&str> = metrics[0].iter().map(|m| m.case_id.as_str()).collect();
        if metrics.iter().any(|e| e.iter().map(|m| m.case_id.as_str()).ne(ids.iter().copied())) {
            return Err(CoreError::InvalidArgument("experiments cover different case sets".into()));
        }
        let dsc: Vec<Vec<f64>> = metrics.iter().map(|e| e.iter().map(|m| m.dsc).collect()).collect();
        let stats = compute_stats(&dsc)?;
        let summary = summarize(&metrics);
        Ok(Self { metrics, stats, summary })
    }

    pub fn mean_dsc(&self, exp: usize) -> f64 {
        let m = &self.metrics[exp];
        m.iter().map(|c| c.dsc).sum::<f64>() / m.len() as f64
    }
}

/// Friedman over cases × experiments plus all pairwise signed-rank tests
/// with Bonferroni correction. `dsc[e][i]` is experiment `e`, case `i`.
pub fn compute_stats(dsc: &[Vec<f64>]) -> Result<StatsReport> {
    let k = dsc.len();
    let n = dsc.first().map_or(0, Vec::len);
    let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..k).map(|e| dsc[e][i]).collect()).collect();
    let fr = if n >= 2 { friedman(&rows)? } else { FriedmanResult { chi2: 0.0, p: 1.0 } };
    let mut comparisons = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let name = format!("{}_vs_{}", EXPERIMENTS[a], EXPERIMENTS[b]);
            // All-zero differences leave the test undefined: report p = 1.
            let row = match wilcoxon_signed_rank(&dsc[a], &dsc[b]) {
                Ok(r) => ComparisonRow { name, w: Some(r.w), n_effective: r.n_effective, p_raw: r.p_two_sided, p_bonferroni: 0.0 },
                Err(CoreError::Stats(_)) if dsc[a] == dsc[b] => {
                    ComparisonRow { name, w: None, n_effective: 0, p_raw: 1.0, p_bonferroni: 0.0 }
                }
                Err(e) => return Err(e),
            };
            comparisons.push(row);
        }
    }
    let raw: Vec<f64> = comparisons.iter().map(|c| c.p_raw).collect();
    let m = comparisons.len().max(1);
    for (c, p) in comparisons.iter_mut().zip(bonferroni(&raw, m)?) {
        c.p_bonferroni = p;
    }
    Ok(StatsReport { friedman: fr, comparisons })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean, sample SD, median and quartiles. `None` for empty input.
pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Some(BoxStats { mean, sd, median: quantile(&s, 0.5), q1: quantile(&s, 0.25), q3: quantile(&s, 0.75) })
}

pub fn summarize(metrics: &[Vec<CaseMetrics>; 4]) -> Vec<SummaryRow> {
    metrics
        .iter()
        .zip(EXPERIMENTS)
        .map(|(m, name)| {
            let dsc: Vec<f64> = m.iter().map(|c| c.dsc).collect();
            let assd: Vec<f64> = m.iter().filter_map(|c| c.assd_mm).collect();
            SummaryRow {
                experiment: name.to_string(),
                n: m.len(),
                dsc: box_stats(&dsc).unwrap_or(BoxStats { mean: 0.0, sd: 0.0, median: 0.0, q1: 0.0, q3: 0.0 }),
                assd: box_stats(&assd),
                assd_flagged: m.len() - assd.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub bloodpool_mean_hu: f64,
    pub dsc: f64,
    pub experiment: &'static str,
}

/// One row per (case, experiment), sorted by blood-pool HU then experiment.
pub fn scatter_data(report: &ExperimentReport) -> Vec<ScatterRow> {
    let mut rows: Vec<(usize, ScatterRow)> = report
        .metrics
        .iter()
        .enumerate()
        .flat_map(|(e, m)| {
            m.iter().map(move |c| (e, ScatterRow { bloodpool_mean_hu: c.bloodpool_mean_hu, dsc: c.dsc, experiment: EXPERIMENTS[e] }))
        })
        .collect();
    rows.sort_by(|a, b| a.1.bloodpool_mean_hu.total_cmp(&b.1.bloodpool_mean_hu).then(a.0.cmp(&b.0)));
    rows.into_iter().map(|(_, r)| r).collect()
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| CoreError::io(path, e))?))
}

fn write_all(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn metrics_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("case_id,experiment,dsc,assd_mm,bloodpool_mean_hu,flag\n");
    for (e, m) in report.metrics.iter().enumerate() {
        for c in m {
            let flag = if c.assd_mm.is_none() { "empty_prediction" } else { "" };
            s.push_str(&format!("{},{},{},{},{},{}\n", c.case_id, EXPERIMENTS[e], c.dsc, opt(c.assd_mm), c.bloodpool_mean_hu, flag));
        }
    }
    s
}

/// Parses a metrics CSV back into per-experiment case lists.
pub fn parse_metrics_csv(text: &str) -> Result<[Vec<CaseMetrics>; 4]> {
    let mut out: [Vec<CaseMetrics>; 4] = Default::default();
    let fmt = |m: String| CoreError::Format(format!("metrics csv: {}", m));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("case_id,experiment,dsc,assd_mm,bloodpool_mean_hu,flag") {
        return Err(fmt("unexpected header".into()));
    }
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(fmt(format!("expected 6 fields in `{}`", line)));
        }
        let e = EXPERIMENTS.iter().position(|x| *x == f[1]).ok_or_else(|| fmt(format!("unknown experiment `{}`", f[1])))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| fmt(format!("bad number `{}`", s)));
        out[e].push(CaseMetrics {
            case_id: f[0].to_string(),
            dsc: num(f[2])?,
            dsc_lcc: f64::NAN,
            assd_mm: if f[3].is_empty() { None } else { Some(num(f[3])?) },
            bloodpool_mean_hu: num(f[4])?,
        });
    }
    Ok(out)
}

pub fn stats_csv(stats: &StatsReport) -> String {
    let mut s = String::from("comparison,W,n_effective,p_raw,p_bonferroni\n");
    for c in &stats.comparisons {
        s.push_str(&format!("{},{},{},{},{}\n", c.name, opt(c.w), c.n_effective, c.p_raw, c.p_bonferroni));
    }
    s.push_str("comparison,chi2,p\n");
    s.push_str(&format!("friedman,{},{}\n", stats.friedman.chi2, stats.friedman.p));
    s
}

pub fn scatter_csv(rows: &[ScatterRow]) -> String {
    let mut s = String::from("bloodpool_mean_hu,dsc,experiment\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.bloodpool_mean_hu, r.dsc, r.experiment));
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(
        "experiment,n,dsc_mean,dsc_sd,dsc_median,dsc_q1,dsc_q3,assd_mean,assd_sd,assd_median,assd_q1,assd_q3,assd_flagged\n",
    );
    for r in rows {
        let d = &r.dsc;
        let a = |f: fn(&BoxStats) -> f64| opt(r.assd.as_ref().map(f));
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.experiment,
            r.n,
            d.mean,
            d.sd,
            d.median,
            d.q1,
            d.q3,
            a(|b| b.mean),
            a(|b| b.sd),
            a(|b| b.median),
            a(|b| b.q1),
            a(|b| b.q3),
            r.assd_flagged
        ));
    }
    s
}

/// Runs the whole comparison, writing checkpoints, loss logs and CSV reports
/// into `out`. `progress` receives one line per stage.
pub fn run_all(cfg: &ExperimentConfig, out: &Path, mut progress: impl FnMut(&str)) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    write_all(&out.join("config.txt"), &cfg.to_text())?;
    let data = generate_datasets(cfg)?;
    progress(&format!("generated {} training and {} test phantoms", data.train.len(), data.test.len()));
    let mut models = Vec::with_capacity(3);
    for (i, strategy) in strategies(cfg).iter().enumerate() {
        let name = EXPERIMENTS[i];
        let mut log = create(&out.join(format!("loss_{}.csv", name)))?;
        let ckpt = train_strategy(cfg, &data.train, strategy, Some(&mut log))?;
        log.flush().map_err(|e| CoreError::io(out, e))?;
        ckpt.write(&out.join(format!("{}.ckpt", name)))?;
        progress(&format!("trained {} ({})", name, strategy.name()));
        models.push(ckpt.to_model()?);
    }
    let spacing = cfg.train.target_spacing;
    let mut metrics: [Vec<CaseMetrics>; 4] = Default::default();
    for (id, case) in &data.test {
        let wrap = |e: CoreError| CoreError::Case { case_id: id.clone(), source: Box::new(e) };
        let maps = models.iter().map(|m| predict(m, &case.image, spacing)).collect::<Result<Vec<_>>>().map_err(wrap)?;
        let combined = combine(&[&maps[1], &maps[2]]).map_err(wrap)?;
        for (e, map) in maps.iter().chain([&combined]).enumerate() {
            let pred = argmax_labels(map);
            metrics[e].push(evaluate_case(id, &pred, &case.labels, &case.image, class::LV_MYOCARDIUM).map_err(wrap)?);
        }
    }
    progress(&format!("evaluated {} test cases", data.test.len()));
    let report = ExperimentReport::from_metrics(metrics)?;
    write_all(&out.join("metrics.csv"), &metrics_csv(&report))?;
    write_all(&out.join("stats.csv"), &stats_csv(&report.stats))?;
    write_all(&out.join("scatter.csv"), &scatter_csv(&scatter_data(&report)))?;
    write_all(&out.join("summary.csv"), &summary_csv(&report.summary))?;
    Ok(report)
}
