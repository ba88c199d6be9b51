//! Entry points behind the `train`, `eval`, `extract-attn` and
//! `gen-synthetic` verbs. Every command writes the resolved config into
//! its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, load_eval_params, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{emit_plots, eval_clips, eval_view, delineate_image, knn_probe, localize, write_attention_pngs, EvalReport};
use crate::ingest::{dataset_hash, gen_synthetic, open_sources, persist};
use crate::losses::LossBundle;
use crate::metrics::{CsvLog, IouRow, MetricsRow, IOU_HEADER, METRICS_HEADER};
use crate::trainer::{TrainState, Trainer};
use crate::vit::{init_params, Network, NetworkParams};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const IOU_FILE: &str = "iou.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.json";

pub fn write_resolved_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml_string()).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop once this many iterations have completed in total; defaults to
    /// the configured schedule length.
    pub until: Option<u64>,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Also keep `checkpoint_{iter}.bin` every this many iterations.
    pub checkpoint_every: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub state: TrainState,
    pub bundles: Vec<LossBundle>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn untrained(cfg: &RunConfig) -> NetworkParams {
    init_params(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    write_resolved_config(cfg, out)?;
    let sources = open_sources(&cfg.data, cfg.seed)?;
    let trainer = Trainer::new(cfg.clone());
    let mut state = match &opts.resume {
        Some(path) => load_checkpoint(path, cfg)?,
        None => TrainState::new(cfg),
    };
    let until = opts.until.unwrap_or_else(|| cfg.optim.total_iters());
    let metrics = out.join(METRICS_FILE);
    let mut log = CsvLog::open(&metrics, METRICS_HEADER, state.iteration)?;
    let iou_every = cfg.eval.iou_every;
    let (mut iou_log, iou_clips) = if iou_every > 0 {
        (Some(CsvLog::open(&out.join(IOU_FILE), IOU_HEADER, state.iteration + 1)?), eval_clips(cfg)?)
    } else {
        (None, Vec::new())
    };
    let checkpoint = out.join(CHECKPOINT_FILE);
    let mut bundles = Vec::new();
    while state.iteration < until {
        let iter = state.iteration;
        let (bundle, sched) = match trainer.step(&mut state, &sources) {
            Ok(v) => v,
            Err(e) => {
                log::error!("training aborted at iteration {iter}: {e}");
                return Err(e);
            }
        };
        let row = MetricsRow {
            iter,
            l_proto: bundle.l_proto,
            l_depth: bundle.l_depth,
            l_temp: bundle.l_temp,
            l_total: bundle.l_total,
            lr: sched.lr,
            wd: sched.wd,
            ema_m: sched.ema_m,
        };
        log.append(&row.to_line())?;
        log::info!("iter {iter}: {}", bundle.describe());
        if let Some(iou_log) = iou_log.as_mut() {
            if state.iteration % iou_every == 0 {
                let report = localize(&trainer.net, &state.teacher.params, cfg, &iou_clips)?;
                let r = IouRow {
                    iter: state.iteration,
                    mean_best_iou: report.mean_best_iou,
                };
                iou_log.append(&format!("{},{}", r.iter, r.mean_best_iou))?;
            }
        }
        if let Some(every) = opts.checkpoint_every.filter(|&e| e > 0) {
            if state.iteration % every == 0 {
                save_checkpoint(&state, cfg, &out.join(format!("checkpoint_{:08}.bin", state.iteration)))?;
            }
        }
        bundles.push(bundle);
    }
    save_checkpoint(&state, cfg, &checkpoint)?;
    Ok(TrainSummary {
        state,
        bundles,
        checkpoint,
        metrics,
    })
}

/// Parameters used for evaluation: the checkpoint's teacher (or student),
/// or the seeded initialization when no checkpoint is given.
pub fn eval_params(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<NetworkParams> {
    match checkpoint {
        Some(path) => load_eval_params(path, cfg, cfg.eval.use_student),
        None => Ok(untrained(cfg)),
    }
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, metrics: Option<&Path>, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    write_resolved_config(cfg, out)?;
    let net = Network::new(cfg);
    let params = eval_params(cfg, checkpoint)?;
    let clips = eval_clips(cfg)?;
    let report = EvalReport {
        localization: localize(&net, &params, cfg, &clips)?,
        knn_accuracy: knn_probe(&net, &params, cfg)?,
    };
    let path = out.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    if let Some(clip) = clips.first() {
        let (image, _) = eval_view(cfg, &clip.frames[0])?;
        let d = delineate_image(&net, &params, &image)?;
        write_attention_pngs(&out.join("attention"), "clip000_t0", &d, net.patch_size())?;
    }
    if let Some(csv) = metrics {
        emit_plots(csv, &out.join("plots"))?;
    }
    Ok(report)
}

/// Dumps soft maps and masks for every frame of the evaluation clips.
pub fn cmd_extract_attn(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    write_resolved_config(cfg, out)?;
    let net = Network::new(cfg);
    let params = eval_params(cfg, checkpoint)?;
    let mut files = Vec::new();
    for (c, clip) in eval_clips(cfg)?.iter().enumerate() {
        for (t, frame) in clip.frames.iter().enumerate() {
            let (image, _) = eval_view(cfg, frame)?;
            let prefix = format!("clip{c:03}_t{t}");
            let input = out.join(format!("{prefix}_input.png"));
            crate::ingest::rgb_to_image(&image).save_with_format(&input, image::ImageFormat::Png).map_err(|e| {
                Error::Image {
                    path: input.clone(),
                    message: e.to_string(),
                }
            })?;
            files.push(input);
            let d = delineate_image(&net, &params, &image)?;
            files.extend(write_attention_pngs(out, &prefix, &d, net.patch_size())?);
        }
    }
    Ok(files)
}

/// Writes the synthetic set as frame directories and returns its hash as
/// lowercase hex.
pub fn cmd_gen_synthetic(cfg: &RunConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    write_resolved_config(cfg, out)?;
    let videos = gen_synthetic(&cfg.data, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    for v in &videos {
        persist(v, &out.join(&v.id))?;
    }
    let hash: String = dataset_hash(&videos).iter().map(|b| format!("{b:02x}")).collect();
    let path = out.join("dataset.sha256");
    fs::write(&path, format!("{hash}\n")).map_err(|e| Error::io(&path, e))?;
    Ok(hash)
}
