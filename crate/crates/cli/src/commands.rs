use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use satad_core::baselines::{KnnModel, PcaModel};
use satad_core::data::{
    dedup_filter, fit_normalizer, load_csv, make_windows, read_cache, synth_generate, write_csv,
    AnomalySpec, CsvSchema, NormStats, SynthSpec, TimeSeries, WindowSet, ANOMALY,
};
use satad_core::detect::{
    assemble, score_windows, ClassSeries, GanScorer, InversionConfig, ScoreSeries, Threshold,
    WindowScorer, AUTO_THRESHOLD_POINTS,
};
use satad_core::eval::{evaluate, threshold_sweep, EvalReport};
use satad_core::train::{train, TrainLog};
use satad_core::{Exec, GanModel, Tensor};
use serde_json::json;

use crate::config::{BaselineInput, Method, RunConfig};

/// Steps per day in the reference deployment.
pub const DAILY_STEPS: u64 = 4_628_800;
/// Required sustained throughput: `ceil(DAILY_STEPS / 86 400)`.
pub const TARGET_STEPS_PER_SECOND: u64 = DAILY_STEPS.div_ceil(86_400);

const NORM_FILE: &str = "norm.json";

fn model_file(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("model_{id}.satg"))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn concat(parts: &[TimeSeries]) -> Result<TimeSeries> {
    let k = parts[0].channels();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        values.extend_from_slice(p.values());
        labels.extend_from_slice(p.labels().expect("synthetic series are labelled"));
    }
    Ok(TimeSeries::new(
        values,
        k,
        Some(labels),
        Some(parts[0].channel_names().to_vec()),
    )?)
}

/// Synthetic train (normal only) and test (with anomalies) series.
pub fn synth_series(cfg: &RunConfig) -> Result<(TimeSeries, TimeSeries)> {
    let s = &cfg.synth;
    ensure!(s.devices >= 1, "devices must be ≥ 1");
    let n = s.devices as usize;
    ensure!(
        s.train_length >= n && s.test_length >= n,
        "series lengths must cover every device"
    );
    let (mut train_parts, mut test_parts) = (Vec::new(), Vec::new());
    let mut offset = 0;
    for d in 1..=s.devices {
        let i = (d - 1) as usize;
        let train_len = s.train_length / n + usize::from(i < s.train_length % n);
        let test_len = s.test_length / n + usize::from(i < s.test_length % n);
        let mut spec = SynthSpec::sensor_default(train_len, d);
        spec.noise_sigma = s.noise_sigma;
        spec.time_offset = offset;
        let seed = cfg.seed.wrapping_add(2 * u64::from(d - 1));
        train_parts.push(synth_generate(&spec, seed)?);

        spec.length = test_len;
        spec.time_offset = offset + train_len;
        spec.anomalies = AnomalySpec {
            kinds: s.anomaly_kinds.clone(),
            rate: s.anomaly_rate,
            magnitude: s.anomaly_magnitude,
            min_len: s.anomaly_min_len,
            max_len: s.anomaly_max_len,
        };
        test_parts.push(synth_generate(&spec, seed.wrapping_add(1))?);
        offset += train_len + test_len;
    }
    Ok((concat(&train_parts)?, concat(&test_parts)?))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let (train, test) = synth_series(cfg)?;
    ensure_dir(&cfg.out)?;
    let train_path = cfg.out.join("train.csv");
    let test_path = cfg.out.join("test.csv");
    write_csv(&train, &train_path, true)?;
    write_csv(&test, &test_path, true)?;
    Ok((train_path, test_path))
}

/// Windows of each device type, cut from contiguous runs of that label so
/// no window straddles two devices.
pub fn device_windows(ts: &TimeSeries, cfg: &RunConfig) -> Result<BTreeMap<u32, WindowSet>> {
    let labels: Vec<u32> = match ts.labels() {
        Some(l) => l.to_vec(),
        None => vec![1; ts.len()],
    };
    let mut out: BTreeMap<u32, WindowSet> = BTreeMap::new();
    let mut start = 0;
    while start < labels.len() {
        let id = labels[start];
        let end = start + labels[start..].iter().take_while(|&&l| l == id).count();
        if end - start >= cfg.window.w {
            let run = ts.slice(start, end)?.with_labels(None)?;
            let mut ws = make_windows(&run, cfg.window)?;
            ws.starts.iter_mut().for_each(|s| *s += start);
            ws.source_len = ts.len();
            match out.get_mut(&id) {
                Some(acc) => {
                    acc.windows.extend(ws.windows);
                    acc.starts.extend(ws.starts);
                }
                None => {
                    out.insert(id, ws);
                }
            }
        }
        start = end;
    }
    for id in ts.device_types() {
        ensure!(
            out.contains_key(&id),
            "device {id} has no run of at least {} steps",
            cfg.window.w
        );
    }
    Ok(out)
}

/// Reads a `.satd` binary cache or, for any other extension, a CSV file.
pub fn load_series(path: &Path) -> Result<TimeSeries> {
    let series = if path.extension().is_some_and(|e| e == "satd") {
        read_cache(path)?
    } else {
        load_csv(path, &CsvSchema::default())?
    };
    Ok(series)
}

fn load_training(cfg: &RunConfig) -> Result<(TimeSeries, NormStats)> {
    let path = cfg.train_path();
    let raw = load_series(&path)?;
    if raw.labels().is_some_and(|l| l.contains(&ANOMALY)) {
        bail!(
            "training data {} contains anomaly labels (0); train on normal data only",
            path.display()
        );
    }
    let stats = fit_normalizer(&raw)?;
    let normalized = stats.apply(&raw)?;
    Ok((normalized, stats))
}

fn training_windows(ts: &TimeSeries, cfg: &RunConfig) -> Result<BTreeMap<u32, WindowSet>> {
    device_windows(ts, cfg)?
        .into_iter()
        .map(|(id, ws)| Ok((id, dedup_filter(&ws, cfg.dedup_threshold)?)))
        .collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub models: Vec<(u32, PathBuf)>,
    pub logs: Vec<(u32, TrainLog)>,
}

pub fn cmd_train(cfg: &RunConfig, exec: Exec) -> Result<TrainOutcome> {
    let (ts, stats) = load_training(cfg)?;
    let dir = cfg.model_path();
    ensure_dir(&dir)?;
    write_file(&dir.join(NORM_FILE), serde_json::to_string_pretty(&stats)?)?;
    let dims = cfg.dims(ts.channels());
    let tcfg = cfg.train_config();
    let mut outcome = TrainOutcome {
        models: Vec::new(),
        logs: Vec::new(),
    };
    for (id, windows) in training_windows(&ts, cfg)? {
        let init = GanModel::init(cfg.seed.wrapping_add(u64::from(id)), dims)?;
        let (model, log) =
            train(init, &windows, &tcfg, exec).with_context(|| format!("training device {id}"))?;
        let path = model_file(&dir, id);
        model.save(&path)?;
        log.write_csv(dir.join(format!("train_log_{id}.csv")))?;
        outcome.models.push((id, path));
        outcome.logs.push((id, log));
    }
    Ok(outcome)
}

fn load_stats(dir: &Path) -> Result<NormStats> {
    let path = dir.join(NORM_FILE);
    let text = fs::read_to_string(&path).with_context(|| {
        format!(
            "missing normalization stats {} (run train first)",
            path.display()
        )
    })?;
    serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))
}

/// Every `model_<id>.satg` under `dir`, ordered by id.
pub fn find_models(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let entries = fs::read_dir(dir)
        .with_context(|| format!("cannot read model directory {}", dir.display()))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(id) = name
            .strip_prefix("model_")
            .and_then(|r| r.strip_suffix(".satg"))
            .and_then(|id| id.parse::<u32>().ok())
        {
            found.push((id, path));
        }
    }
    found.sort();
    if found.is_empty() {
        bail!("no checkpoint (model_<id>.satg) found in {}", dir.display());
    }
    Ok(found)
}

#[derive(Debug)]
pub struct DetectOutcome {
    pub series: ScoreSeries,
    pub report: Option<EvalReport>,
    pub scores_path: PathBuf,
}

/// Binary report at the chosen threshold plus the best-F1 sweep over step scores.
pub fn build_report(series: &ScoreSeries) -> Result<Option<EvalReport>> {
    let Some(truth) = &series.truth else {
        return Ok(None);
    };
    let mut report = evaluate(&series.predicted, truth)?;
    report.threshold = Some(series.threshold);
    report.curve = threshold_sweep(&series.step_scores, truth, AUTO_THRESHOLD_POINTS)?.points;
    Ok(Some(report))
}

/// Best F1 over the step-score sweep.
pub fn best_f1(series: &ScoreSeries) -> Result<f64> {
    let truth = series
        .truth
        .as_ref()
        .context("best F1 needs labelled test data")?;
    Ok(
        threshold_sweep(&series.step_scores, truth, AUTO_THRESHOLD_POINTS)?
            .best
            .f1,
    )
}

fn fit_baseline(cfg: &RunConfig, rows: &[Vec<f64>]) -> Result<Box<dyn WindowScorer>> {
    Ok(match cfg.method {
        Method::Pca => Box::new(PcaModel::fit(rows, cfg.pca_rank)?),
        Method::Knn => Box::new(KnnModel::fit(rows, cfg.knn_k)?),
        Method::Gan => bail!("the GAN is not a baseline"),
    })
}

/// PCA or KNN fitted per device type on the normalized training series.
fn baseline_classes(
    cfg: &RunConfig,
    test: &TimeSeries,
    windows: &WindowSet,
    exec: Exec,
) -> Result<Vec<ClassSeries>> {
    let (train_ts, _) = load_training(cfg)?;
    let aggregation = cfg.score.aggregation;
    let mut classes = Vec::new();
    match cfg.baseline_input {
        BaselineInput::Windows => {
            for (id, ws) in training_windows(&train_ts, cfg)? {
                let scorer = fit_baseline(cfg, &ws.flattened())?;
                classes.push(ClassSeries::from_scorer(
                    id,
                    &*scorer,
                    windows,
                    aggregation,
                    exec,
                )?);
            }
        }
        BaselineInput::Steps => {
            let labels = train_ts.labels().map(<[u32]>::to_vec);
            let steps: Vec<Tensor> = (0..test.len())
                .map(|t| Tensor::from_rows(&[test.step(t)]))
                .collect::<satad_core::Result<_>>()?;
            let ids = match &labels {
                Some(_) => train_ts.device_types(),
                None => vec![1],
            };
            for id in ids {
                let rows: Vec<Vec<f64>> = (0..train_ts.len())
                    .filter(|&t| labels.as_ref().is_none_or(|l| l[t] == id))
                    .map(|t| train_ts.step(t).to_vec())
                    .collect();
                let scorer = fit_baseline(cfg, &rows)?;
                let step_scores = score_windows(&*scorer, &steps, exec)?;
                classes.push(ClassSeries {
                    class_id: id,
                    window_scores: step_scores.clone(),
                    parts: Vec::new(),
                    latents: Vec::new(),
                    step_scores,
                });
            }
        }
    }
    Ok(classes)
}

pub fn cmd_detect(cfg: &RunConfig, exec: Exec) -> Result<DetectOutcome> {
    let dir = cfg.model_path();
    let stats = load_stats(&dir)?;
    let test_path = cfg.test_path();
    let raw = load_series(&test_path)?;
    let test = stats.apply(&raw)?;
    let truth = test.labels().map(<[u32]>::to_vec);
    let windows = make_windows(&test.clone().with_labels(None)?, cfg.window)?;
    let score = cfg.score_config();
    score.validate()?;
    if score.threshold == Threshold::Auto && truth.is_none() {
        bail!("threshold = auto needs a labelled test file; pass --threshold X");
    }

    let classes = match cfg.method {
        Method::Gan => {
            let mut classes = Vec::new();
            for (id, path) in find_models(&dir)? {
                let model = GanModel::load(&path)?;
                ensure!(
                    model.dims.features == test.channels() && model.dims.window == cfg.window.w,
                    "checkpoint {} expects {} channels and window {}, run has {} and {}",
                    path.display(),
                    model.dims.features,
                    model.dims.window,
                    test.channels(),
                    cfg.window.w
                );
                let scorer = GanScorer {
                    model: &model,
                    lambda: score.lambda,
                    inversion: score.inversion,
                };
                classes.push(ClassSeries::from_gan(
                    id,
                    &scorer,
                    &windows,
                    score.aggregation,
                    exec,
                )?);
            }
            classes
        }
        Method::Pca | Method::Knn => baseline_classes(cfg, &test, &windows, exec)?,
    };

    let series = assemble(classes, score.threshold, truth.as_deref())?;
    ensure_dir(&cfg.out)?;
    let name = cfg.method.name();
    let scores_path = cfg.out.join(format!("scores_{name}.csv"));
    series.write_csv(&scores_path)?;
    let report = build_report(&series)?;
    if let Some(report) = &report {
        report.write_json(cfg.out.join(format!("report_{name}.json")))?;
        report.write_curve_csv(cfg.out.join(format!("curve_{name}.csv")))?;
    }
    Ok(DetectOutcome {
        series,
        report,
        scores_path,
    })
}

/// Rows of a score CSV: step score, predicted label, optional true label.
pub fn read_scores(path: &Path) -> Result<(Vec<f64>, Vec<u32>, Option<Vec<u32>>)> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("cannot open score file {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let (Some(score_col), Some(pred_col)) = (column("score"), column("predicted_label")) else {
        bail!(
            "{}: expected columns score and predicted_label",
            path.display()
        );
    };
    let truth_col = column("true_label");
    let (mut scores, mut pred, mut truth) = (Vec::new(), Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let field = |c: usize| record.get(c).unwrap_or("");
        scores.push(
            field(score_col)
                .parse::<f64>()
                .with_context(|| format!("{} row {row}: bad score", path.display()))?,
        );
        pred.push(
            field(pred_col)
                .parse::<u32>()
                .with_context(|| format!("{} row {row}: bad predicted label", path.display()))?,
        );
        if let Some(c) = truth_col {
            truth.push(
                field(c)
                    .parse::<u32>()
                    .with_context(|| format!("{} row {row}: bad true label", path.display()))?,
            );
        }
    }
    Ok((scores, pred, truth_col.map(|_| truth)))
}

pub fn cmd_eval(cfg: &RunConfig, scores: Option<&Path>) -> Result<EvalReport> {
    let path = scores
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out.join(format!("scores_{}.csv", cfg.method.name())));
    let (scores, pred, truth) = read_scores(&path)?;
    let truth = truth.with_context(|| format!("{} has no true_label column", path.display()))?;
    let mut report = evaluate(&pred, &truth)?;
    let sweep = threshold_sweep(&scores, &truth, AUTO_THRESHOLD_POINTS)?;
    report.curve = sweep.points;
    ensure_dir(&cfg.out)?;
    report.write_json(cfg.out.join("eval.json"))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeThroughput {
    pub windows: usize,
    pub seconds: f64,
    pub steps_per_second: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub target_steps_per_second: u64,
    pub score_only: ModeThroughput,
    pub full_inversion: ModeThroughput,
}

impl BenchReport {
    pub fn passed(&self) -> bool {
        self.score_only.steps_per_second >= self.target_steps_per_second as f64
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mode = |m: &ModeThroughput| {
            json!({
                "windows": m.windows,
                "seconds": m.seconds,
                "steps_per_second": m.steps_per_second,
                "p50_ms": m.p50_ms,
                "p99_ms": m.p99_ms,
            })
        };
        json!({
            "target_steps_per_second": self.target_steps_per_second,
            "passed": self.passed(),
            "score_only": mode(&self.score_only),
            "full_inversion": mode(&self.full_inversion),
        })
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Scores windows of a looping synthetic stream for `seconds`, one at a time.
fn stream_throughput(
    scorer: &GanScorer<'_>,
    stream: &WindowSet,
    seconds: f64,
) -> Result<ModeThroughput> {
    let budget = Duration::from_secs_f64(seconds);
    let mut latencies = Vec::new();
    let started = Instant::now();
    let mut i = 0;
    while started.elapsed() < budget || latencies.is_empty() {
        let window = &stream.windows[i % stream.len()];
        let t = Instant::now();
        let s = scorer.score_full(i, window)?;
        latencies.push(t.elapsed().as_secs_f64() * 1e3);
        ensure!(s.score.is_finite(), "non-finite score on stream window {i}");
        i += 1;
    }
    let elapsed = started.elapsed().as_secs_f64();
    let steps = latencies.len() * stream.config.s;
    latencies.sort_by(f64::total_cmp);
    Ok(ModeThroughput {
        windows: latencies.len(),
        seconds: elapsed,
        steps_per_second: steps as f64 / elapsed,
        p50_ms: percentile(&latencies, 0.5),
        p99_ms: percentile(&latencies, 0.99),
    })
}

/// Sustained single-threaded scoring rate with and without latent descent.
///
/// Each window advances the stream by one stride, so throughput in steps is
/// windows per second times the stride.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let dir = cfg.model_path();
    let (id, path) = find_models(&dir)?.remove(0);
    let model = GanModel::load(&path)?;
    let stats = load_stats(&dir)?;
    let mut spec = SynthSpec::sensor_default(4096.max(2 * cfg.window.w), id);
    spec.noise_sigma = cfg.synth.noise_sigma;
    let stream = stats.apply(&synth_generate(&spec, cfg.seed)?)?;
    let windows = make_windows(&stream.with_labels(None)?, cfg.window)?;

    let score = cfg.score_config();
    let full = GanScorer {
        model: &model,
        lambda: score.lambda,
        inversion: score.inversion,
    };
    let score_only = GanScorer {
        inversion: InversionConfig {
            steps: 0,
            ..score.inversion
        },
        ..full
    };
    let report = BenchReport {
        target_steps_per_second: TARGET_STEPS_PER_SECOND,
        score_only: stream_throughput(&score_only, &windows, cfg.bench_seconds)?,
        full_inversion: stream_throughput(&full, &windows, cfg.bench_full_seconds)?,
    };
    ensure_dir(&cfg.out)?;
    write_file(
        &cfg.out.join("bench.json"),
        serde_json::to_string_pretty(&report.to_json())?,
    )?;
    Ok(report)
}
