//! Stage orchestration: three calibration stages chained through on-disk
//! checkpoints, plus evaluation metrics, compression accounting, and the
//! JSON report. Every stage loads its inputs from disk and writes a
//! checkpoint, so staged and run-all invocations produce identical files.

use crate::backbone::{substitute, QuantConfig, QuantModel, ToyBackbone};
use crate::calib::{capture_calib, load_calib, save_calib, CalibSchedule, CalibSet};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::lba::{estimate_bias_closed_form, train_lba, LbaConfig};
use crate::qlayer::{CompressionStats, ForwardMode};
use crate::rng::RngState;
use crate::stca::{
    allocate_rank, applied_rank, compute_thresholds, measure_complexity, refine, svd_init,
    temporal_complexity, RankPolicy, RefineConfig,
};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

const ALLOWED_BITS: [u8; 4] = [4, 6, 8, 32];

/// Flat-key pipeline configuration; every field has a default so partial
/// JSON config files work, and CLI flags override file values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub bits_w: u8,
    pub bits_a: u8,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Load an existing calibration file instead of generating one.
    pub calib_path: Option<PathBuf>,
    // calibration capture schedule
    pub calib_videos: usize,
    pub refine_steps: usize,
    pub sample_every: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub eval_videos: usize,
    // rank allocation: "stca" | "fixed" | "none"
    pub rank_mode: String,
    pub fixed_rank: usize,
    pub rank_policy: RankPolicy,
    pub rotate: bool,
    pub refine_enabled: bool,
    pub refine: RefineConfig,
    pub lba_enabled: bool,
    pub lba: LbaConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            bits_w: 4,
            bits_a: 4,
            seed: 7,
            out_dir: PathBuf::from("out"),
            calib_path: None,
            calib_videos: 36,
            refine_steps: 10,
            sample_every: 2,
            frames: 5,
            height: 16,
            width: 16,
            eval_videos: 8,
            rank_mode: "stca".to_string(),
            fixed_rank: 32,
            rank_policy: RankPolicy::default(),
            rotate: true,
            refine_enabled: true,
            refine: RefineConfig::default(),
            lba_enabled: true,
            lba: LbaConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, bits) in [("bits_w", self.bits_w), ("bits_a", self.bits_a)] {
            if !ALLOWED_BITS.contains(&bits) {
                return Err(Error::config(format!(
                    "{} must be one of {:?}, got {}",
                    name, ALLOWED_BITS, bits
                )));
            }
        }
        match self.rank_mode.as_str() {
            "stca" | "fixed" | "none" => {}
            other => {
                return Err(Error::config(format!(
                    "rank_mode must be stca, fixed, or none, got {}",
                    other
                )))
            }
        }
        if self.calib_videos == 0 || self.eval_videos == 0 {
            return Err(Error::config("calib_videos and eval_videos must be nonzero"));
        }
        Ok(())
    }

    /// Read a JSON config file (flat keys, all optional).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("bad config file: {}", e)))?;
        Ok(cfg)
    }

    pub fn calib_file(&self) -> PathBuf {
        self.out_dir.join("calib.stqc")
    }

    pub fn checkpoint_file(&self) -> PathBuf {
        self.out_dir.join("checkpoint.stqk")
    }

    pub fn report_file(&self) -> PathBuf {
        self.out_dir.join("report.json")
    }

    pub fn eval_file(&self) -> PathBuf {
        self.out_dir.join("eval.json")
    }

    fn schedule(&self) -> CalibSchedule {
        CalibSchedule {
            seed: self.seed,
            n_videos: self.calib_videos,
            steps: self.refine_steps,
            sample_every: self.sample_every,
            frames: self.frames,
            height: self.height,
            width: self.width,
        }
    }

    /// Evaluation schedule with a seed stream disjoint from calibration.
    fn eval_schedule(&self) -> CalibSchedule {
        CalibSchedule {
            seed: RngState::new(self.seed).derive(0x6576_616c).seed(),
            n_videos: self.eval_videos,
            steps: self.sample_every.max(1),
            sample_every: self.sample_every.max(1),
            frames: self.frames,
            height: self.height,
            width: self.width,
        }
    }
}

/// Evaluation metrics against the FP model on held-out videos.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean squared output error vs the FP model.
    pub mse: f64,
    /// 10·log10(range²/MSE) with range = FP output spread; None encodes +∞
    /// (identical outputs).
    pub psnr_db: Option<f64>,
    /// L2 norm of the per-channel mean output error.
    pub mean_bias_norm: f64,
    /// |C_t(FP output) − C_t(quantized output)| averaged over eval pairs.
    pub temporal_gap: f64,
    pub n_pairs: usize,
}

/// One layer's row in the compression section.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCompression {
    pub layer: usize,
    pub kind: String,
    pub rank: usize,
    #[serde(flatten)]
    pub stats: CompressionStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionReport {
    pub per_layer: Vec<LayerCompression>,
    pub total_params_bits: u64,
    pub total_baseline_params_bits: u64,
    /// 1 − quantized/baseline.
    pub params_reduction: f64,
    pub total_ops_count: u64,
    pub total_ops_weighted: f64,
    pub total_baseline_ops: u64,
    pub ops_reduction: f64,
}

pub const STAGE_CALIBRATE: &str = "calibrate";
pub const STAGE_ALLOCATE: &str = "allocate-ranks";
pub const STAGE_REFINE: &str = "refine";
pub const STAGE_LBA: &str = "train-lba";

fn require_stage(found: &str, expected: &str, running: &str) -> Result<()> {
    if found != expected {
        return Err(Error::state(format!(
            "{} requires the {} checkpoint, found stage {}",
            running, expected, found
        )));
    }
    Ok(())
}

fn open_checkpoint(
    cfg: &PipelineConfig,
    running: &str,
    expected: &str,
) -> Result<(QuantModel, serde_json::Value)> {
    let path = cfg.checkpoint_file();
    if !path.exists() {
        return Err(Error::state(format!(
            "{} requires the {} checkpoint; run {} first",
            running, expected, expected
        )));
    }
    let (model, stage, extra) = load_checkpoint(&path)?;
    require_stage(&stage, expected, running)?;
    Ok((model, extra))
}

fn merge_stage_log(extra: &mut serde_json::Value, stage: &str, log: serde_json::Value) {
    if !extra.is_object() {
        *extra = serde_json::json!({});
    }
    let stages = extra
        .as_object_mut()
        .unwrap()
        .entry("stages")
        .or_insert_with(|| serde_json::json!({}));
    stages.as_object_mut().unwrap().insert(stage.to_string(), log);
}

/// Stage 0: build the seeded backbone, capture (or load) the calibration
/// set, substitute quantized layers, and write the initial checkpoint.
pub fn stage_calibrate(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let backbone = ToyBackbone::new(cfg.seed);
    let calib = match &cfg.calib_path {
        Some(p) => load_calib(p)?,
        None => capture_calib(&backbone, &cfg.schedule())?,
    };
    save_calib(&cfg.calib_file(), &calib)?;
    let qcfg = QuantConfig {
        rotate: cfg.rotate,
        ..QuantConfig::all_kinds(cfg.bits_w, cfg.bits_a, cfg.seed)
    };
    let model = substitute(&backbone, &qcfg)?;
    // echo the config minus its path fields, so checkpoints written into
    // different directories from the same run stay bit-identical
    let mut echo = serde_json::to_value(cfg).map_err(Error::format)?;
    if let Some(obj) = echo.as_object_mut() {
        obj.remove("out_dir");
        obj.remove("calib_path");
    }
    let mut extra = serde_json::json!({ "config": echo });
    merge_stage_log(
        &mut extra,
        STAGE_CALIBRATE,
        serde_json::json!({ "pairs": calib.pairs.len() }),
    );
    save_checkpoint(&cfg.checkpoint_file(), &model, STAGE_CALIBRATE, &extra)
}

fn fit_activation_quantizers(model: &mut QuantModel, calib: &CalibSet, bits_a: u8) -> Result<()> {
    let inputs: Vec<Vec<Tensor>> = calib
        .pairs
        .iter()
        .map(|p| {
            model
                .forward_collect(&p.input, ForwardMode::FpExact)
                .map(|(_, ins, _)| ins)
        })
        .collect::<Result<_>>()?;
    for i in model.quant_layers() {
        let xs: Vec<Tensor> = inputs.iter().map(|v| v[i].clone()).collect();
        model.quant_mut(i)?.calibrate_activation_quantizer(&xs, bits_a)?;
    }
    Ok(())
}

/// Stage 1: complexity-aware rank allocation (or the configured ablation
/// variant), SVD factor initialization, and quantizer calibration.
pub fn stage_allocate_ranks(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let (mut model, mut extra) = open_checkpoint(cfg, STAGE_ALLOCATE, STAGE_CALIBRATE)?;
    let calib = load_calib(&cfg.calib_file())?;

    let mut log_layers = Vec::new();
    match cfg.rank_mode.as_str() {
        "stca" => {
            let records = measure_complexity(&model, &calib)?;
            for i in model.quant_layers() {
                let recs = &records[&i];
                let th = compute_thresholds(recs, &cfg.rank_policy)?;
                let allocated = allocate_rank(recs, &th, &cfg.rank_policy);
                let layer = model.quant_mut(i)?;
                let (m, n) = layer.kind.flat_dims();
                let applied = applied_rank(allocated, m, n);
                svd_init(layer, applied, cfg.bits_w)?;
                log_layers.push(serde_json::json!({
                    "layer": i,
                    "kind": layer.kind.name(),
                    "thresholds": th,
                    "allocated_rank": allocated,
                    "applied_rank": applied,
                }));
            }
        }
        "fixed" => {
            for i in model.quant_layers() {
                let layer = model.quant_mut(i)?;
                let (m, n) = layer.kind.flat_dims();
                let applied = applied_rank(cfg.fixed_rank, m, n);
                svd_init(layer, applied, cfg.bits_w)?;
                log_layers.push(serde_json::json!({
                    "layer": i,
                    "kind": layer.kind.name(),
                    "allocated_rank": cfg.fixed_rank,
                    "applied_rank": applied,
                }));
            }
        }
        "none" => {
            for i in model.quant_layers() {
                let layer = model.quant_mut(i)?;
                layer.set_rank_svd(0)?;
                layer.calibrate_weight_quantizer(cfg.bits_w)?;
                log_layers.push(serde_json::json!({
                    "layer": i,
                    "kind": layer.kind.name(),
                    "allocated_rank": 0,
                    "applied_rank": 0,
                }));
            }
        }
        other => return Err(Error::config(format!("unknown rank_mode {}", other))),
    }
    fit_activation_quantizers(&mut model, &calib, cfg.bits_a)?;

    merge_stage_log(
        &mut extra,
        STAGE_ALLOCATE,
        serde_json::json!({ "layers": log_layers }),
    );
    save_checkpoint(&cfg.checkpoint_file(), &model, STAGE_ALLOCATE, &extra)
}

/// Stage 2: low-rank factor refinement against the stored FP outputs, then
/// a single activation-quantizer re-fit.
pub fn stage_refine(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let (mut model, mut extra) = open_checkpoint(cfg, STAGE_REFINE, STAGE_ALLOCATE)?;
    let calib = load_calib(&cfg.calib_file())?;
    let log = if cfg.refine_enabled {
        let losses = refine(&mut model, &calib, &cfg.refine)?;
        fit_activation_quantizers(&mut model, &calib, cfg.bits_a)?;
        serde_json::json!({ "losses": losses })
    } else {
        serde_json::json!({ "skipped": true })
    };
    merge_stage_log(&mut extra, STAGE_REFINE, log);
    save_checkpoint(&cfg.checkpoint_file(), &model, STAGE_REFINE, &extra)
}

/// Stage 3: closed-form bias alignment plus a short gradient polish, all
/// other parameters frozen.
pub fn stage_train_lba(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let (mut model, mut extra) = open_checkpoint(cfg, STAGE_LBA, STAGE_REFINE)?;
    let calib = load_calib(&cfg.calib_file())?;
    let log = if cfg.lba_enabled {
        estimate_bias_closed_form(&mut model, &calib)?;
        let losses = train_lba(&mut model, &calib, &cfg.lba)?;
        serde_json::json!({ "losses": losses })
    } else {
        serde_json::json!({ "skipped": true })
    };
    merge_stage_log(&mut extra, STAGE_LBA, log);
    save_checkpoint(&cfg.checkpoint_file(), &model, STAGE_LBA, &extra)
}

fn checkpoint_for_eval(cfg: &PipelineConfig, running: &str) -> Result<(QuantModel, serde_json::Value)> {
    let path = cfg.checkpoint_file();
    if !path.exists() {
        return Err(Error::state(format!(
            "{} requires a checkpoint from {} or later; run the pipeline first",
            running, STAGE_ALLOCATE
        )));
    }
    let (model, stage, extra) = load_checkpoint(&path)?;
    if stage == STAGE_CALIBRATE {
        return Err(Error::state(format!(
            "{} requires at least the {} checkpoint, found stage {}",
            running, STAGE_ALLOCATE, stage
        )));
    }
    Ok((model, extra))
}

/// Compute output-fidelity metrics on a fresh eval set (seed stream
/// disjoint from calibration).
pub fn evaluate_model(model: &QuantModel, eval_set: &CalibSet) -> Result<EvalMetrics> {
    if eval_set.pairs.is_empty() {
        return Err(Error::arg("empty eval set"));
    }
    let mut sq_sum = 0.0;
    let mut n_elems = 0usize;
    let mut fp_min = f64::INFINITY;
    let mut fp_max = f64::NEG_INFINITY;
    let mut chan_sum: Vec<f64> = Vec::new();
    let mut chan_count = 0usize;
    let mut gap_sum = 0.0;
    for pair in &eval_set.pairs {
        let fp = model.forward(&pair.input, ForwardMode::FpExact)?;
        let q = model.forward(&pair.input, ForwardMode::FakeQuant)?;
        let diff = fp.sub(&q)?;
        sq_sum += diff.data().iter().map(|v| v * v).sum::<f64>();
        n_elems += diff.len();
        for v in fp.data() {
            fp_min = fp_min.min(*v);
            fp_max = fp_max.max(*v);
        }
        let (t, c, h, w) = diff.dims4()?;
        if chan_sum.is_empty() {
            chan_sum = vec![0.0; c];
        }
        for ti in 0..t {
            for ci in 0..c {
                let base = (ti * c + ci) * h * w;
                chan_sum[ci] += diff.data()[base..base + h * w].iter().sum::<f64>();
            }
        }
        chan_count += t * h * w;
        gap_sum += (temporal_complexity(&fp)? - temporal_complexity(&q)?).abs();
    }
    let mse = sq_sum / n_elems as f64;
    let range = fp_max - fp_min;
    let psnr_db = if mse > 0.0 {
        Some(10.0 * (range * range / mse).log10())
    } else {
        None
    };
    let mean_bias_norm = chan_sum
        .iter()
        .map(|s| {
            let m = s / chan_count as f64;
            m * m
        })
        .sum::<f64>()
        .sqrt();
    Ok(EvalMetrics {
        mse,
        psnr_db,
        mean_bias_norm,
        temporal_gap: gap_sum / eval_set.pairs.len() as f64,
        n_pairs: eval_set.pairs.len(),
    })
}

/// CLI `evaluate`: run [`evaluate_model`] on the current checkpoint and
/// write eval.json.
pub fn stage_evaluate(cfg: &PipelineConfig) -> Result<EvalMetrics> {
    cfg.validate()?;
    let (model, _) = checkpoint_for_eval(cfg, "evaluate")?;
    let backbone = ToyBackbone::new(cfg.seed);
    let eval_set = capture_calib(&backbone, &cfg.eval_schedule())?;
    let metrics = evaluate_model(&model, &eval_set)?;
    let text = serde_json::to_string_pretty(&metrics).map_err(Error::format)?;
    std::fs::write(cfg.eval_file(), text)?;
    Ok(metrics)
}

/// Row counts (output positions) per quantized layer for the configured
/// eval input shape, tracked through the layer chain.
fn eval_rows(model: &QuantModel, frames: usize, height: usize, width: usize) -> Result<HashMap<usize, usize>> {
    let (mut t, mut h, mut w) = (frames, height, width);
    let mut rows = HashMap::new();
    for (i, layer) in model.layers.iter().enumerate() {
        if let Some(spec) = layer.kind().conv_spec() {
            let (ot, oh, ow) = spec.out_dims(t, h, w)?;
            t = ot;
            h = oh;
            w = ow;
        }
        rows.insert(i, t * h * w);
    }
    Ok(rows)
}

/// Aggregate per-layer compression stats; totals are plain sums.
pub fn compression_report(model: &QuantModel, cfg: &PipelineConfig) -> Result<CompressionReport> {
    let rows = eval_rows(model, cfg.frames, cfg.height, cfg.width)?;
    let mut per_layer = Vec::new();
    let mut tp = 0u64;
    let mut tbp = 0u64;
    let mut toc = 0u64;
    let mut tow = 0.0;
    let mut tbo = 0u64;
    for i in model.quant_layers() {
        let layer = model.quant_ref(i)?;
        let stats = layer.compression_stats(cfg.bits_w, cfg.bits_a, rows[&i]);
        tp += stats.params_bits;
        tbp += stats.baseline_params_bits;
        toc += stats.ops_count;
        tow += stats.ops_weighted;
        tbo += stats.baseline_ops;
        per_layer.push(LayerCompression {
            layer: i,
            kind: layer.kind.name().to_string(),
            rank: layer.rank,
            stats,
        });
    }
    Ok(CompressionReport {
        per_layer,
        total_params_bits: tp,
        total_baseline_params_bits: tbp,
        params_reduction: 1.0 - tp as f64 / tbp as f64,
        total_ops_count: toc,
        total_ops_weighted: tow,
        total_baseline_ops: tbo,
        ops_reduction: 1.0 - tow / tbo as f64,
    })
}

/// CLI `report`: evaluation metrics + compression accounting + the stage
/// logs accumulated in the checkpoint, written to report.json.
pub fn stage_report(cfg: &PipelineConfig, timings: &serde_json::Value) -> Result<serde_json::Value> {
    cfg.validate()?;
    let (model, extra) = checkpoint_for_eval(cfg, "report")?;
    let backbone = ToyBackbone::new(cfg.seed);
    let eval_set = capture_calib(&backbone, &cfg.eval_schedule())?;
    let metrics = evaluate_model(&model, &eval_set)?;
    let compression = compression_report(&model, cfg)?;
    let report = serde_json::json!({
        "config": serde_json::to_value(cfg).map_err(Error::format)?,
        "stages": extra.get("stages").cloned().unwrap_or(serde_json::Value::Null),
        "eval": metrics,
        "compression": compression,
        "stage_timings_ms": timings,
        "notes": {
            "psnr": "fidelity vs the FP model's own outputs; null means identical outputs (+inf dB)",
        },
    });
    let text = serde_json::to_string_pretty(&report).map_err(Error::format)?;
    std::fs::write(cfg.report_file(), text)?;
    Ok(report)
}

/// All stages in order, then the report. Returns the report value.
pub fn run_all(cfg: &PipelineConfig) -> Result<serde_json::Value> {
    let mut timings = serde_json::Map::new();
    let mut timed = |name: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
        let t0 = std::time::Instant::now();
        f()?;
        timings.insert(
            name.to_string(),
            serde_json::json!(t0.elapsed().as_millis() as u64),
        );
        Ok(())
    };
    timed(STAGE_CALIBRATE, &mut || stage_calibrate(cfg))?;
    timed(STAGE_ALLOCATE, &mut || stage_allocate_ranks(cfg))?;
    timed(STAGE_REFINE, &mut || stage_refine(cfg))?;
    timed(STAGE_LBA, &mut || stage_train_lba(cfg))?;
    stage_report(cfg, &serde_json::Value::Object(timings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_cfg(name: &str, seed: u64) -> PipelineConfig {
        PipelineConfig {
            seed,
            out_dir: std::env::temp_dir().join("stq-pipeline-tests").join(name),
            calib_videos: 4,
            refine_steps: 4,
            sample_every: 2,
            frames: 3,
            height: 8,
            width: 8,
            eval_videos: 2,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn config_rejects_bad_bits() {
        let cfg = PipelineConfig { bits_w: 5, ..PipelineConfig::default() };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("bits_w"));
    }

    #[test]
    fn config_rejects_bad_rank_mode() {
        let cfg = PipelineConfig { rank_mode: "magic".into(), ..PipelineConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn out_of_order_stage_is_state_error() {
        let cfg = test_cfg("order", 11);
        std::fs::create_dir_all(&cfg.out_dir).unwrap();
        let _ = std::fs::remove_file(cfg.checkpoint_file());
        let err = stage_refine(&cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(STAGE_ALLOCATE), "{}", msg);
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn skipping_a_stage_names_the_predecessor() {
        let cfg = test_cfg("skip", 12);
        stage_calibrate(&cfg).unwrap();
        let err = stage_refine(&cfg).unwrap_err();
        assert!(err.to_string().contains(STAGE_ALLOCATE), "{}", err);
        let err = stage_train_lba(&cfg).unwrap_err();
        assert!(err.to_string().contains(STAGE_REFINE), "{}", err);
    }

    #[test]
    fn run_all_matches_staged_invocation_bit_for_bit() {
        let cfg_a = test_cfg("staged", 13);
        stage_calibrate(&cfg_a).unwrap();
        stage_allocate_ranks(&cfg_a).unwrap();
        stage_refine(&cfg_a).unwrap();
        stage_train_lba(&cfg_a).unwrap();
        let cfg_b = PipelineConfig { out_dir: test_cfg("runall", 13).out_dir, ..cfg_a.clone() };
        run_all(&cfg_b).unwrap();
        let a = std::fs::read(cfg_a.checkpoint_file()).unwrap();
        let b = std::fs::read(cfg_b.checkpoint_file()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn run_all_writes_report_with_consistent_totals() {
        let cfg = test_cfg("report", 14);
        let report = run_all(&cfg).unwrap();
        assert!(cfg.report_file().exists());
        let comp: CompressionReport =
            serde_json::from_value(report["compression"].clone()).unwrap();
        let sum: u64 = comp.per_layer.iter().map(|l| l.stats.params_bits).sum();
        assert_eq!(sum, comp.total_params_bits);
        let bsum: u64 = comp.per_layer.iter().map(|l| l.stats.baseline_params_bits).sum();
        assert_eq!(bsum, comp.total_baseline_params_bits);
        assert!(
            (comp.params_reduction
                - (1.0 - comp.total_params_bits as f64 / comp.total_baseline_params_bits as f64))
                .abs()
                < 1e-15
        );
        let losses: Vec<f64> =
            serde_json::from_value(report["stages"]["refine"]["losses"].clone()).unwrap();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{:?}", losses);
    }

    #[test]
    fn evaluate_identical_outputs_gives_zero_metrics() {
        // 32-bit quantization is exact, so quant == fp on every input
        let cfg = PipelineConfig { bits_w: 32, bits_a: 32, ..test_cfg("eval32", 15) };
        stage_calibrate(&cfg).unwrap();
        stage_allocate_ranks(&cfg).unwrap();
        let m = stage_evaluate(&cfg).unwrap();
        assert!(m.mse <= 1e-25, "mse {}", m.mse);
        assert!(m.mean_bias_norm <= 1e-13);
        assert!(m.temporal_gap <= 1e-13);
    }

    #[test]
    fn evaluate_constant_offset_closed_form() {
        // shift the quantized output by adding c to the last layer's a_bias
        let cfg = PipelineConfig { bits_w: 32, bits_a: 32, ..test_cfg("offset", 16) };
        stage_calibrate(&cfg).unwrap();
        stage_allocate_ranks(&cfg).unwrap();
        let (mut model, _, _) = load_checkpoint(&cfg.checkpoint_file()).unwrap();
        let c = 0.25;
        let last = *model.quant_layers().last().unwrap();
        let layer = model.quant_mut(last).unwrap();
        for v in layer.a_bias.data_mut() {
            *v = c;
        }
        let backbone = ToyBackbone::new(cfg.seed);
        let eval_set = capture_calib(&backbone, &cfg.eval_schedule()).unwrap();
        let m = evaluate_model(&model, &eval_set).unwrap();
        let channels = 4.0_f64;
        assert!((m.mse - c * c).abs() < 1e-12, "mse {}", m.mse);
        assert!((m.mean_bias_norm - c * channels.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn eval_seeds_disjoint_from_calib() {
        let cfg = test_cfg("disjoint", 17);
        assert_ne!(cfg.schedule().seed, cfg.eval_schedule().seed);
    }
}
