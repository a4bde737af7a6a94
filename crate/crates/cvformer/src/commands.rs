//! Command implementations behind the CLI, kept binary-free so integration
//! tests can drive them directly.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::gradcheck::{self, DEFAULT_STEP};
use crate::ingest::{self, Dataset, GenConfig, Split};
use crate::model::{AttnMode, CvFormer, ModelConfig};
use crate::runconfig::RunConfig;
use crate::scalar::Scalar;
use crate::train::{
    self, EvalMetrics, FinetuneResult, PretrainResult, ProjectionHeadIds,
    STREAM_HEAD_INIT, STREAM_MODEL_INIT,
};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub fn run_gen_synth(cfg: &GenConfig, out_dir: &Path) -> Result<PathBuf> {
    ingest::gen_synth(cfg, out_dir)
}

fn build_model<S: Scalar>(
    rc: &RunConfig,
) -> Result<(CvFormer<S>, ProjectionHeadIds)> {
    let mut model =
        CvFormer::<S>::new(rc.model, &mut train::rng_stream(rc.train.seed, STREAM_MODEL_INIT))?;
    let head = ProjectionHeadIds::register(
        &mut model.store,
        &mut train::rng_stream(rc.train.seed, STREAM_HEAD_INIT),
        rc.model.d_model,
        rc.contrastive.head_hidden,
        rc.contrastive.head_out,
        crate::model::INIT_SIGMA,
    );
    if let Some(init) = &rc.init {
        let loaded = checkpoint::load::<S>(init)?;
        if loaded.config != rc.model {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different model configuration",
                init.display()
            )));
        }
        checkpoint::install(&loaded, &mut model.store)?;
    }
    Ok((model, head))
}

fn load_and_check<S: Scalar>(rc: &RunConfig) -> Result<Dataset<S>> {
    let dataset = ingest::load_dataset::<S>(&rc.manifest)?;
    if dataset.m() != rc.model.m || dataset.manifest.num_classes != rc.model.num_classes {
        return Err(Error::Config("resolved model shape does not match the dataset".into()));
    }
    Ok(dataset)
}

fn echo_config(rc: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("config.toml");
    fs::write(&path, rc.effective_toml()).map_err(|e| Error::io(&path, e))
}

pub fn run_pretrain<S: Scalar>(rc: &RunConfig) -> Result<PretrainResult> {
    let out = rc.out_dir()?.to_path_buf();
    let dataset = load_and_check::<S>(rc)?;
    let (mut model, head) = build_model::<S>(rc)?;
    echo_config(rc, &out)?;
    train::pretrain(&mut model, &head, &dataset, &rc.train, &rc.contrastive, rc.mode, &out)
}

pub fn run_finetune<S: Scalar>(rc: &RunConfig) -> Result<FinetuneResult> {
    let out = rc.out_dir()?.to_path_buf();
    let dataset = load_and_check::<S>(rc)?;
    let (mut model, head) = build_model::<S>(rc)?;
    echo_config(rc, &out)?;
    train::finetune(&mut model, &head, &dataset, &rc.train, &rc.contrastive, rc.mode, &out)
}

/// Evaluate a checkpoint on the test split and render the metrics line.
pub fn run_eval<S: Scalar>(rc: &RunConfig) -> Result<(EvalMetrics, String)> {
    let init = rc
        .init
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs a checkpoint (use --init)".into()))?;
    let (model, _) = train::rebuild_from_checkpoint::<S>(init)?;
    let dataset = ingest::load_dataset::<S>(&rc.manifest)?;
    if dataset.m() != model.config.m || dataset.manifest.num_classes != model.config.num_classes {
        return Err(Error::Config(format!(
            "checkpoint {} does not match the dataset's shape",
            init.display()
        )));
    }
    let test_idx = dataset.indices_of(Split::Test);
    if test_idx.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let metrics = train::evaluate(&model, &dataset, &test_idx, rc.mode)?;
    let line = format!(
        "test accuracy={} recall={} n={}",
        train::fmt_pct(metrics.accuracy),
        train::fmt_pct(metrics.recall),
        metrics.n
    );
    Ok((metrics, line))
}

// ── gradient self-check ──

#[derive(Debug)]
pub struct GradcheckReport {
    /// Worst relative error per scenario name, in first-seen order.
    pub rows: Vec<(String, f64, f64)>,
    pub all_passed: bool,
}

impl GradcheckReport {
    pub fn render(&self) -> String {
        let mut text = String::new();
        for (name, err, threshold) in &self.rows {
            let status = if err < threshold { "ok" } else { "FAIL" };
            let _ = writeln!(text, "{name}: max_rel_err={err:.3e} threshold={threshold:.0e} {status}");
        }
        let _ = writeln!(
            text,
            "gradcheck: {}",
            if self.all_passed { "all passed" } else { "FAILED" }
        );
        text
    }
}

/// Run every primitive scenario at five random parameter points plus the
/// model-level scenarios, reporting the worst error per scenario.
pub fn run_gradcheck() -> Result<GradcheckReport> {
    let mut order = Vec::new();
    let mut worst: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for round in 0..5 {
        for sc in gradcheck::op_scenarios_at(round) {
            let report = sc.run(DEFAULT_STEP)?;
            let entry = worst.entry(report.name.to_string()).or_insert_with(|| {
                order.push(report.name.to_string());
                (0.0, report.threshold)
            });
            entry.0 = entry.0.max(report.max_rel_err);
        }
    }
    for sc in gradcheck::model_scenarios() {
        let report = sc.run(DEFAULT_STEP)?;
        order.push(report.name.to_string());
        worst.insert(report.name.to_string(), (report.max_rel_err, report.threshold));
    }
    let rows: Vec<(String, f64, f64)> = order
        .into_iter()
        .map(|name| {
            let (err, threshold) = worst[&name];
            (name, err, threshold)
        })
        .collect();
    let all_passed = rows.iter().all(|(_, err, threshold)| err < threshold);
    Ok(GradcheckReport { rows, all_passed })
}

// ── attention scaling benchmark ──

#[derive(Debug)]
pub struct BenchAttnReport {
    /// (count, full-attention MACs, cls-query MACs), counts ascending.
    pub rows: Vec<(usize, u64, u64)>,
    pub full_slope: f64,
    pub cls_slope: f64,
}

impl BenchAttnReport {
    pub fn render(&self) -> String {
        let mut text = String::from("count,full_macs,cls_query_macs\n");
        for (count, full, cls) in &self.rows {
            let _ = writeln!(text, "{count},{full},{cls}");
        }
        let _ = writeln!(text, "# full_slope={:.4} cls_query_slope={:.4}", self.full_slope, self.cls_slope);
        text
    }
}

fn log_log_slope(points: &[(usize, u64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(c, _)| (c as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, m)| (m as f64).ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Measure attention-core MACs as the token count grows, in both modes, and
/// fit a log-log slope to each.
pub fn run_bench_attn<S: Scalar>(counts: &[usize]) -> Result<BenchAttnReport> {
    let mut counts: Vec<usize> = counts.to_vec();
    counts.sort_unstable();
    counts.dedup();
    if counts.len() < 2 {
        return Err(Error::Config("bench-attn needs at least two distinct counts".into()));
    }
    if counts[0] == 0 {
        return Err(Error::Config("token counts must be positive".into()));
    }
    let config = ModelConfig::defaults_for(90);
    let mut rows = Vec::with_capacity(counts.len());
    for &count in &counts {
        let full = crate::model::count_attention_macs::<S>(count, &config, AttnMode::Full)?;
        let cls = crate::model::count_attention_macs::<S>(count, &config, AttnMode::ClsQuery)?;
        rows.push((count, full, cls));
    }
    let full_slope = log_log_slope(&rows.iter().map(|&(c, f, _)| (c, f)).collect::<Vec<_>>());
    let cls_slope = log_log_slope(&rows.iter().map(|&(c, _, l)| (c, l)).collect::<Vec<_>>());
    Ok(BenchAttnReport { rows, full_slope, cls_slope })
}
