//! Training loops for the prior network and the completion network.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{Mode, RunConfig};
use super::dataset::{prepare, training_batch, Example, Split};
use super::log::{RunLog, StepRecord, STEP_HEADER};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::losses::{
    stereo_loss_var, supervised_loss_var, unsupervised_loss_var, SparseInputs, StereoInputs,
};
use crate::metrics::{aggregate, compute_metrics, Aggregation, EvalResult};
use crate::networks::{
    build_cpn, build_dcn, load_checkpoint, save_checkpoint, Checkpoint, CpnModel, DcnModel,
    ParamStore,
};
use crate::tensor::{AdamConfig, AdamState, Graph, LrSchedule, Tensor};

pub const BEST_CHECKPOINT: &str = "model.ckpt";
const LAST_CHECKPOINT: &str = "last.ckpt";
const LAST_OPTIMIZER: &str = "last_optim.ckpt";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint with the best validation RMSE.
    pub checkpoint: PathBuf,
    pub best_step: usize,
    pub best: EvalResult,
    /// Validation metrics after the last step.
    pub last: EvalResult,
    pub log: RunLog,
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    Ok(&cfg.out)
}

fn optimizer_checkpoint(template: &Checkpoint, adam: &AdamState) -> Result<Checkpoint> {
    let mut params = ParamStore::new();
    for (i, (name, t)) in template
        .params
        .names()
        .iter()
        .zip(template.params.tensors())
        .enumerate()
    {
        params.push(
            format!("m.{name}"),
            Tensor::from_vec(t.shape(), adam.m[i].clone())?,
        )?;
        params.push(
            format!("v.{name}"),
            Tensor::from_vec(t.shape(), adam.v[i].clone())?,
        )?;
    }
    let mut meta = BTreeMap::new();
    meta.insert("t".to_string(), adam.t.to_string());
    Ok(Checkpoint {
        kind: template.kind,
        config: template.config.clone(),
        meta,
        params,
    })
}

fn restore_optimizer(ckpt: &Checkpoint, adam: &mut AdamState) -> Result<()> {
    let n = adam.m.len();
    if ckpt.params.len() != 2 * n {
        return Err(Error::invalid("optimizer state does not match the model"));
    }
    for i in 0..n {
        let (m, v) = (
            &ckpt.params.tensors()[2 * i],
            &ckpt.params.tensors()[2 * i + 1],
        );
        if m.len() != adam.m[i].len() || v.len() != adam.v[i].len() {
            return Err(Error::invalid("optimizer state does not match the model"));
        }
        adam.m[i] = m.data().to_vec();
        adam.v[i] = v.data().to_vec();
    }
    adam.t = ckpt
        .meta
        .get("t")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::invalid("optimizer state lacks a step counter"))?;
    Ok(())
}

fn read_text(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_default()
}

/// Drops the header and any rows at or after `from_step` (left by a run that
/// stopped after its last checkpoint).
fn kept_rows(text: &str, from_step: usize, step_of: impl Fn(&str) -> Option<usize>) -> String {
    text.lines()
        .skip(1)
        .filter(|l| step_of(l).is_some_and(|s| s < from_step))
        .map(|l| format!("{l}\n"))
        .collect()
}

/// Bookkeeping shared by both training loops: logs, checkpoints, resume.
struct Session<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    log: RunLog,
    previous: [String; 3],
    best: Option<(usize, EvalResult)>,
    start: Instant,
}

impl<'a> Session<'a> {
    fn new(cfg: &'a RunConfig, dir: &'a Path) -> Self {
        Session {
            cfg,
            dir,
            log: RunLog::default(),
            previous: Default::default(),
            best: None,
            start: Instant::now(),
        }
    }

    /// Loads the last checkpoint if resuming; returns (model checkpoint, steps done).
    fn resume(&mut self) -> Result<Option<(Checkpoint, Checkpoint, usize)>> {
        let last = self.dir.join(LAST_CHECKPOINT);
        if !self.cfg.resume || !last.is_file() {
            return Ok(None);
        }
        let ckpt = load_checkpoint(&last)?;
        let optim = load_checkpoint(&self.dir.join(LAST_OPTIMIZER))?;
        let done = ckpt.step();
        let parse = |k: &str| ckpt.meta.get(k).and_then(|v| v.parse::<f64>().ok());
        if let (Some(step), Some(rmse)) = (
            ckpt.meta.get("best_step").and_then(|s| s.parse().ok()),
            parse("best_rmse_mm"),
        ) {
            self.best = Some((
                step,
                EvalResult {
                    rmse_mm: rmse,
                    mae_mm: parse("best_mae_mm").unwrap_or(0.0),
                    irmse_per_km: parse("best_irmse_per_km").unwrap_or(0.0),
                    imae_per_km: parse("best_imae_per_km").unwrap_or(0.0),
                    absrel: parse("best_absrel").unwrap_or(0.0),
                    n_valid: parse("best_n_valid").unwrap_or(0.0) as usize,
                },
            ));
        }
        let step_col = |l: &str| l.split(',').next().and_then(|s| s.parse().ok());
        let eval_col = |l: &str| {
            l.split(',')
                .next()
                .and_then(|s| s.strip_prefix("step"))
                .and_then(|s| s.parse::<usize>().ok())
        };
        self.previous = [
            kept_rows(&read_text(&self.dir.join("log.csv")), done + 1, step_col),
            kept_rows(&read_text(&self.dir.join("val.csv")), done + 1, eval_col),
            kept_rows(&read_text(&self.dir.join("timing.csv")), done + 1, step_col),
        ];
        Ok(Some((ckpt, optim, done)))
    }

    fn record(&mut self, r: StepRecord) {
        self.log.steps.push(r);
        self.log.wall_s.push(self.start.elapsed().as_secs_f64());
    }

    /// Records a validation result; returns true if it is a new best.
    fn evaluated(&mut self, step: usize, r: EvalResult) -> bool {
        self.log.evals.push((step, r));
        let better = self.best.is_none_or(|(_, b)| r.rmse_mm < b.rmse_mm);
        if better {
            self.best = Some((step, r));
        }
        better
    }

    fn meta(&self, steps_done: usize) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("step".to_string(), steps_done.to_string());
        m.insert("mode".to_string(), self.cfg.mode.as_str().to_string());
        if let Some((s, b)) = self.best {
            m.insert("best_step".to_string(), s.to_string());
            m.insert("best_rmse_mm".to_string(), format!("{:?}", b.rmse_mm));
            m.insert("best_mae_mm".to_string(), format!("{:?}", b.mae_mm));
            m.insert(
                "best_irmse_per_km".to_string(),
                format!("{:?}", b.irmse_per_km),
            );
            m.insert(
                "best_imae_per_km".to_string(),
                format!("{:?}", b.imae_per_km),
            );
            m.insert("best_absrel".to_string(), format!("{:?}", b.absrel));
            m.insert("best_n_valid".to_string(), b.n_valid.to_string());
        }
        m
    }

    fn write_logs(&self) -> Result<()> {
        let steps = self.log.steps_csv();
        let evals = self.log.evals_csv();
        let timing = self.log.timing_csv();
        let join = |prev: &str, new: &str| {
            let mut lines = new.lines();
            let header = lines.next().unwrap_or(STEP_HEADER);
            let mut s = format!("{header}\n{prev}");
            for l in lines {
                s.push_str(l);
                s.push('\n');
            }
            s
        };
        write_atomic(
            &self.dir.join("log.csv"),
            join(&self.previous[0], &steps).as_bytes(),
        )?;
        write_atomic(
            &self.dir.join("val.csv"),
            join(&self.previous[1], &evals).as_bytes(),
        )?;
        write_atomic(
            &self.dir.join("timing.csv"),
            join(&self.previous[2], &timing).as_bytes(),
        )
    }

    fn finish(self, last: EvalResult) -> Result<TrainOutcome> {
        self.write_logs()?;
        let (best_step, best) = self
            .best
            .ok_or_else(|| Error::invalid("run finished without validation"))?;
        Ok(TrainOutcome {
            checkpoint: self.dir.join(BEST_CHECKPOINT),
            best_step,
            best,
            last,
            log: self.log,
        })
    }
}

fn should_eval(step: usize, total: usize, every: usize) -> bool {
    step == total || step.is_multiple_of(every)
}

/// Per-image reconstruction metrics of the prior network on validation depth
/// (reconstructions are floored at 1 mm so inverse metrics stay defined).
pub fn evaluate_cpn(
    model: &CpnModel,
    examples: &[Example],
    how: Aggregation,
) -> Result<EvalResult> {
    let mut rows = Vec::with_capacity(examples.len());
    for ex in examples {
        let recon = model
            .reconstruct(&ex.scene.depth, &ex.scene.image)?
            .map(|v| v.max(1e-3));
        rows.push(compute_metrics(
            &recon,
            &ex.scene.depth,
            &ex.scene.validity(),
        )?);
    }
    aggregate(&rows, how)
}

/// Trains the prior network to reconstruct ground-truth depth.
pub fn cmd_train_cpn(cfg: &RunConfig) -> Result<TrainOutcome> {
    if cfg.mode != Mode::Cpn {
        return Err(Error::invalid(format!(
            "train-cpn needs mode = cpn, config says {}",
            cfg.mode.as_str()
        )));
    }
    let split = prepare(&cfg.data, cfg.data.density)?;
    let dir = out_dir(cfg)?;
    let mut session = Session::new(cfg, dir);
    let mut model = build_cpn(cfg.cpn.clone(), cfg.seed)?;
    let mut adam = AdamState::new(model.params.tensors(), cfg.optim.lr, AdamConfig::default())?;
    let mut done = 0;
    if let Some((ckpt, optim, steps)) = session.resume()? {
        model = CpnModel::from_checkpoint(&ckpt)?;
        restore_optimizer(&optim, &mut adam)?;
        done = steps;
    }
    let schedule = LrSchedule {
        initial: cfg.optim.lr,
        half_every: cfg.optim.half_every,
    };
    let total = cfg.optim.total_steps;
    let mut last = evaluate_cpn(&model, &split.val, cfg.aggregation)?;
    if done == 0 && session.evaluated(0, last) {
        save_checkpoint(
            &dir.join(BEST_CHECKPOINT),
            &model.to_checkpoint(session.meta(0)),
        )?;
    }
    for step in done + 1..=total {
        let lr = schedule.lr_at(step - 1);
        adam.set_lr(lr)?;
        let batch = training_batch(
            &split.train,
            cfg.optim.batch,
            &cfg.data.augment,
            cfg.seed,
            step,
        )?;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let mut loss = None;
        for (scene, _) in &batch {
            let d = g.constant(scene.depth.clone());
            let i = g.constant(scene.image.clone());
            let e = model.score_var(&mut g, &p, d, i)?;
            loss = Some(match loss {
                None => e,
                Some(l) => g.add(l, e)?,
            });
        }
        let loss = loss.expect("batch is non-empty");
        let total_loss = g.value(loss).item();
        g.backward(loss)?;
        let grads = p.vars.iter().map(|&v| g.grad(v)).collect();
        adam.step(model.params.tensors_mut(), grads)?;
        session.record(StepRecord {
            step,
            lr,
            total: total_loss,
            prior: total_loss,
            ..StepRecord::default()
        });
        if should_eval(step, total, cfg.optim.eval_every) {
            last = evaluate_cpn(&model, &split.val, cfg.aggregation)?;
            if session.evaluated(step, last) {
                save_checkpoint(
                    &dir.join(BEST_CHECKPOINT),
                    &model.to_checkpoint(session.meta(step)),
                )?;
            }
            save_last(dir, &model.to_checkpoint(session.meta(step)), &adam)?;
            session.write_logs()?;
        }
    }
    session.finish(last)
}

fn save_last(dir: &Path, ckpt: &Checkpoint, adam: &AdamState) -> Result<()> {
    save_checkpoint(
        &dir.join(LAST_OPTIMIZER),
        &optimizer_checkpoint(ckpt, adam)?,
    )?;
    save_checkpoint(&dir.join(LAST_CHECKPOINT), ckpt)
}

/// Per-image metrics of the completion network over `examples`.
pub fn evaluate_dcn(model: &DcnModel, examples: &[Example]) -> Result<Vec<(String, EvalResult)>> {
    examples
        .iter()
        .map(|ex| {
            let pred = model.predict(&ex.sample.z_map(), &ex.scene.image)?;
            Ok((
                ex.name.clone(),
                compute_metrics(&pred, &ex.scene.depth, &ex.scene.validity())?,
            ))
        })
        .collect()
}

fn evaluate_dcn_aggregate(model: &DcnModel, split: &Split, how: Aggregation) -> Result<EvalResult> {
    let rows: Vec<EvalResult> = evaluate_dcn(model, &split.val)?
        .into_iter()
        .map(|r| r.1)
        .collect();
    aggregate(&rows, how)
}

pub fn load_frozen_cpn(path: &Path) -> Result<CpnModel> {
    CpnModel::from_checkpoint(&load_checkpoint(path)?)
}

/// Trains the completion network with the loss of `cfg.mode`. Prior-using
/// modes need `cpn` (or `cfg.cpn_checkpoint`); the prior stays frozen.
pub fn cmd_train_dcn(cfg: &RunConfig, cpn: Option<&Path>) -> Result<TrainOutcome> {
    if cfg.mode == Mode::Cpn {
        return Err(Error::invalid(
            "train-dcn needs mode supervised, unsupervised or stereo",
        ));
    }
    let prior = if cfg.mode.uses_prior() {
        let path = cpn.or(cfg.cpn_checkpoint.as_deref()).ok_or_else(|| {
            Error::invalid(format!(
                "{} mode requires a prior-network checkpoint",
                cfg.mode.as_str()
            ))
        })?;
        Some(load_frozen_cpn(path)?)
    } else {
        None
    };
    let split = prepare(&cfg.data, cfg.data.density)?;
    if cfg.mode == Mode::Stereo {
        if let Some(ex) = split
            .train
            .iter()
            .find(|e| e.scene.stereo_image.is_none() || e.scene.rig.is_none())
        {
            return Err(Error::invalid(format!(
                "frame {} has no stereo pair",
                ex.name
            )));
        }
    }
    let dir = out_dir(cfg)?;
    let mut session = Session::new(cfg, dir);
    let mut model = build_dcn(cfg.dcn.clone(), cfg.seed)?;
    let mut adam = AdamState::new(model.params.tensors(), cfg.optim.lr, AdamConfig::default())?;
    let mut done = 0;
    if let Some((ckpt, optim, steps)) = session.resume()? {
        model = DcnModel::from_checkpoint(&ckpt)?;
        restore_optimizer(&optim, &mut adam)?;
        done = steps;
    }
    let schedule = LrSchedule {
        initial: cfg.optim.lr,
        half_every: cfg.optim.half_every,
    };
    let total = cfg.optim.total_steps;
    let mut last = evaluate_dcn_aggregate(&model, &split, cfg.aggregation)?;
    if done == 0 && session.evaluated(0, last) {
        save_checkpoint(
            &dir.join(BEST_CHECKPOINT),
            &model.to_checkpoint(session.meta(0)),
        )?;
    }
    for step in done + 1..=total {
        let lr = schedule.lr_at(step - 1);
        adam.set_lr(lr)?;
        let batch = training_batch(
            &split.train,
            cfg.optim.batch,
            &cfg.data.augment,
            cfg.seed,
            step,
        )?;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let cp = prior.as_ref().map(|m| m.params.bind(&mut g, false));
        let frozen = prior.as_ref().zip(cp.as_ref());
        let mut rec = StepRecord {
            step,
            lr,
            ..StepRecord::default()
        };
        let mut loss = None;
        for (scene, sample) in &batch {
            let z_map = sample.z_map();
            let validity = sample.validity();
            let zv = g.constant(z_map.clone());
            let iv = g.constant(scene.image.clone());
            let d = model.forward(&mut g, &p, zv, iv)?;
            let sparse = SparseInputs {
                z_map: &z_map,
                validity: &validity,
            };
            let item = match cfg.mode {
                Mode::Supervised => {
                    let l = supervised_loss_var(&mut g, d, &scene.depth, &scene.validity())?;
                    rec.supervised += g.value(l).item();
                    l
                }
                Mode::Unsupervised => {
                    let t = unsupervised_loss_var(
                        &mut g,
                        d,
                        iv,
                        sparse,
                        frozen,
                        cfg.norms,
                        &cfg.weights,
                    )?;
                    rec.fidelity += g.value(t.fidelity).item();
                    rec.prior += g.value(t.prior).item();
                    t.total
                }
                Mode::Stereo => {
                    let stereo = StereoInputs {
                        stereo_image: scene.stereo_image.as_ref().expect("checked above"),
                        rig: scene.rig.as_ref().expect("checked above"),
                        sign: scene.warp_sign,
                    };
                    let t = stereo_loss_var(
                        &mut g,
                        d,
                        iv,
                        sparse,
                        stereo,
                        frozen,
                        cfg.norms,
                        &cfg.weights,
                    )?;
                    rec.fidelity += g.value(t.unsupervised.fidelity).item();
                    rec.prior += g.value(t.unsupervised.prior).item();
                    rec.psi_c += g.value(t.psi_c).item();
                    rec.psi_s += g.value(t.psi_s).item();
                    t.total
                }
                Mode::Cpn => unreachable!(),
            };
            rec.total += g.value(item).item();
            loss = Some(match loss {
                None => item,
                Some(l) => g.add(l, item)?,
            });
        }
        let loss = loss.expect("batch is non-empty");
        g.backward(loss)?;
        let grads = p.vars.iter().map(|&v| g.grad(v)).collect();
        adam.step(model.params.tensors_mut(), grads)?;
        session.record(rec);
        if should_eval(step, total, cfg.optim.eval_every) {
            last = evaluate_dcn_aggregate(&model, &split, cfg.aggregation)?;
            if session.evaluated(step, last) {
                save_checkpoint(
                    &dir.join(BEST_CHECKPOINT),
                    &model.to_checkpoint(session.meta(step)),
                )?;
            }
            save_last(dir, &model.to_checkpoint(session.meta(step)), &adam)?;
            session.write_logs()?;
        }
    }
    session.finish(last)
}
