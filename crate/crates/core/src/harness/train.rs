use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::DistillDiagnostics;
use crate::ema::EmaState;
use crate::error::{Error, Result};
use crate::matching::match_predictions;
use crate::metrics::{average_precision, coco_thresholds, consistency, instability, MatchSnapshot};
use crate::network::checkpoint;
use crate::network::{forward, FeatureGrid, ModelParams, Prediction};
use crate::synthdata::{generate_split, mix_seed, FeatureRenderer, Scene, Split};

use super::config::{CheckpointPolicy, Optimizer, TrainConfig};
use super::step::{scene_step, LossParts, TeacherView};

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_mqf: f64,
    pub loss_r: f64,
    pub loss_pd: f64,
    pub loss_aux: f64,
    pub instability_online: f64,
    pub instability_ema: f64,
    pub consistency: f64,
    pub ap50: f64,
    pub ap: f64,
    pub seed: u64,
}

/// One row of `diagnostics.csv`, written per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_mqf: f64,
    pub loss_r: f64,
    pub loss_pd: f64,
    pub loss_aux: f64,
    pub two_class_queries: usize,
    pub higher_cost_queries: usize,
    pub pd_gated_off: usize,
    pub aux_group_members: usize,
    pub grad_norm: f64,
}

/// Per-epoch evaluation of the EMA teacher, kept alongside the metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherEval {
    pub epoch: usize,
    pub ap50: f64,
    pub ap: f64,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub rows: Vec<MetricsRow>,
    pub teacher_evals: Vec<TeacherEval>,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub wall_clock_secs: f64,
    /// Total calls into the distillation module over the run.
    pub distill_calls: usize,
}

impl RunRecord {
    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("at least one epoch")
    }

    /// Mean of a metric over all epochs after the first `skip`.
    pub fn mean_over_epochs(&self, skip: usize, f: impl Fn(&MetricsRow) -> f64) -> f64 {
        let tail = &self.rows[skip.min(self.rows.len() - 1)..];
        tail.iter().map(f).sum::<f64>() / tail.len() as f64
    }
}

/// Scenes with their rendered feature grids.
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub features: Vec<FeatureGrid>,
}

impl Dataset {
    pub fn build(cfg: &TrainConfig, split: Split) -> Result<Self> {
        let renderer = FeatureRenderer::new(&cfg.model, &cfg.data);
        let scenes = generate_split(&cfg.data, split, cfg.model.num_classes)?;
        let features = scenes.iter().map(|s| renderer.render(s)).collect();
        Ok(Self { scenes, features })
    }

    pub fn from_scenes(cfg: &TrainConfig, scenes: Vec<Scene>) -> Self {
        let renderer = FeatureRenderer::new(&cfg.model, &cfg.data);
        let features = scenes.iter().map(|s| renderer.render(s)).collect();
        Self { scenes, features }
    }
}

/// Final-stage predictions and match snapshot of a model on a dataset.
pub struct Evaluation {
    pub predictions: Vec<Vec<Prediction>>,
    pub snapshot: MatchSnapshot,
}

impl Evaluation {
    pub fn ap50(&self, data: &Dataset) -> f64 {
        average_precision(&self.predictions, &gts_of(data), &[0.5])
    }

    pub fn ap(&self, data: &Dataset) -> f64 {
        average_precision(&self.predictions, &gts_of(data), &coco_thresholds())
    }
}

fn gts_of(data: &Dataset) -> Vec<Vec<crate::synthdata::GroundTruth>> {
    data.scenes.iter().map(|s| s.objects.clone()).collect()
}

pub fn evaluate(params: &ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(data.scenes.len());
    let mut entries = Vec::with_capacity(data.scenes.len());
    for (scene, f) in data.scenes.iter().zip(&data.features) {
        let last = forward(params, f)?.pop().expect("at least one stage");
        let (m, _) = match_predictions(&last.predictions, &scene.objects, &cfg.cost)?;
        entries.push((scene.seed, (0..m.num_gts).map(|g| m.query_for_gt(g)).collect()));
        predictions.push(last.predictions);
    }
    Ok(Evaluation { predictions, snapshot: MatchSnapshot::new(entries) })
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    epoch: usize,
    step: usize,
    scene_seeds: Vec<u64>,
    objects: Vec<&'a [crate::synthdata::GroundTruth]>,
    loss_mqf: f64,
    loss_r: f64,
    loss_pd: f64,
    loss_aux: f64,
    non_finite_params: usize,
}

struct Writers {
    dir: PathBuf,
    metrics: csv::Writer<fs::File>,
    diagnostics: csv::Writer<fs::File>,
}

impl Writers {
    fn open(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: csv::Writer::from_path(dir.join("metrics.csv"))?,
            diagnostics: csv::Writer::from_path(dir.join("diagnostics.csv"))?,
        })
    }
}

pub fn checkpoint_path(dir: &Path, tag: &str, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("{tag}_e{epoch:03}.ckpt"))
}

/// Trains a student with the configured distillation components.
pub fn train(cfg: &TrainConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let train_set = Dataset::build(cfg, Split::Train)?;
    let val_set = Dataset::build(cfg, Split::Val)?;
    let seed = cfg.run.seed;
    let mut student = ModelParams::init(&cfg.model, seed);
    let mut ema = EmaState::init(&student, cfg.ema.decay, cfg.ema_stop_epoch());
    let mut velocity = vec![0.0; student.len()];
    let mut second = vec![0.0; student.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0BA7C4));
    let mut writers = match &cfg.run.out_dir {
        Some(dir) => Some(Writers::open(dir, cfg)?),
        None => None,
    };
    let meta = serde_json::json!({ "run": cfg.run.name, "config": cfg.to_toml() });

    let mut prev_student = evaluate(&student, &val_set, cfg)?.snapshot;
    let mut prev_teacher = prev_student.clone();
    let mut rows = Vec::with_capacity(cfg.schedule.epochs);
    let mut teacher_evals = Vec::with_capacity(cfg.schedule.epochs);
    let mut step = 0usize;
    let mut distill_calls = 0usize;
    let mut order: Vec<usize> = (0..train_set.scenes.len()).collect();

    for epoch in 0..cfg.schedule.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_parts = LossParts::default();
        let mut epoch_steps = 0usize;
        for batch in order.chunks(cfg.schedule.batch_size) {
            let norm = batch.iter().map(|&i| train_set.scenes[i].objects.len()).sum::<usize>().max(1) as f64;
            let mut grads = vec![0.0; student.len()];
            let mut parts = LossParts::default();
            let mut diag = DistillDiagnostics::default();
            let mut failed = false;
            for &i in batch {
                let (scene, f) = (&train_set.scenes[i], &train_set.features[i]);
                let out = TeacherView::for_config(&ema.teacher, f, &scene.objects, cfg)
                    .and_then(|tv| scene_step(cfg, &student, tv.as_ref(), f, &scene.objects, norm));
                let out = match out {
                    Ok(o) => o,
                    Err(Error::NonFiniteActivation { .. }) => {
                        failed = true;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                parts.add(&out.parts);
                diag.add(&out.plan.diagnostics);
                distill_calls += out.plan.distill_calls;
                for (g, x) in grads.iter_mut().zip(&out.grads) {
                    *g += x;
                }
            }
            if failed || !parts.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                let dump = writers.as_ref().map(|w| w.dir.join(format!("nonfinite_e{epoch:03}_s{step}.json")));
                if let Some(path) = &dump {
                    let d = NonFiniteDump {
                        epoch,
                        step,
                        scene_seeds: batch.iter().map(|&i| train_set.scenes[i].seed).collect(),
                        objects: batch.iter().map(|&i| train_set.scenes[i].objects.as_slice()).collect(),
                        loss_mqf: parts.mqf,
                        loss_r: parts.r,
                        loss_pd: parts.pd,
                        loss_aux: parts.aux,
                        non_finite_params: student.values().iter().filter(|x| !x.is_finite()).count(),
                    };
                    fs::write(path, serde_json::to_string_pretty(&d)?)?;
                }
                return Err(Error::NonFiniteLoss { epoch, step, dump });
            }
            let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            let clip = if cfg.schedule.grad_clip > 0.0 && grad_norm > cfg.schedule.grad_clip {
                cfg.schedule.grad_clip / grad_norm
            } else {
                1.0
            };
            let (mu, wd) = (cfg.schedule.momentum, cfg.schedule.weight_decay);
            match cfg.schedule.optimizer {
                Optimizer::Sgd => {
                    for ((p, v), g) in student.values_mut().iter_mut().zip(velocity.iter_mut()).zip(&grads) {
                        *v = mu * *v + g * clip + wd * *p;
                        *p -= lr * *v;
                    }
                }
                Optimizer::Adam => {
                    const BETA2: f64 = 0.999;
                    let t = (step + 1) as i32;
                    let (c1, c2) = (1.0 - mu.powi(t), 1.0 - BETA2.powi(t));
                    for (((p, m), s), g) in student.values_mut().iter_mut().zip(velocity.iter_mut()).zip(second.iter_mut()).zip(&grads) {
                        let g = g * clip;
                        *m = mu * *m + (1.0 - mu) * g;
                        *s = BETA2 * *s + (1.0 - BETA2) * g * g;
                        *p -= lr * ((*m / c1) / ((*s / c2).sqrt() + 1e-8) + wd * *p);
                    }
                }
            }
            ema.update(&student, epoch)?;
            if let Some(w) = writers.as_mut() {
                w.diagnostics.serialize(DiagnosticsRow {
                    epoch,
                    step,
                    lr,
                    loss_total: parts.total(),
                    loss_mqf: parts.mqf,
                    loss_r: parts.r,
                    loss_pd: parts.pd,
                    loss_aux: parts.aux,
                    two_class_queries: diag.two_class_queries,
                    higher_cost_queries: diag.higher_cost_queries,
                    pd_gated_off: diag.pd_gated_off,
                    aux_group_members: diag.aux_group_members,
                    grad_norm,
                })?;
            }
            epoch_parts.add(&parts);
            epoch_steps += 1;
            step += 1;
        }

        let s_eval = evaluate(&student, &val_set, cfg)?;
        let t_eval = evaluate(&ema.teacher, &val_set, cfg)?;
        let n = epoch_steps.max(1) as f64;
        let row = MetricsRow {
            epoch,
            step,
            loss_total: epoch_parts.total() / n,
            loss_mqf: epoch_parts.mqf / n,
            loss_r: epoch_parts.r / n,
            loss_pd: epoch_parts.pd / n,
            loss_aux: epoch_parts.aux / n,
            instability_online: instability(&prev_student, &s_eval.snapshot)?,
            instability_ema: instability(&prev_teacher, &t_eval.snapshot)?,
            consistency: consistency(&s_eval.snapshot, &t_eval.snapshot)?,
            ap50: s_eval.ap50(&val_set),
            ap: s_eval.ap(&val_set),
            seed,
        };
        teacher_evals.push(TeacherEval { epoch, ap50: t_eval.ap50(&val_set), ap: t_eval.ap(&val_set) });
        prev_student = s_eval.snapshot;
        prev_teacher = t_eval.snapshot;
        if let Some(w) = writers.as_mut() {
            w.metrics.serialize(&row)?;
            w.metrics.flush()?;
            w.diagnostics.flush()?;
            let last = epoch + 1 == cfg.schedule.epochs;
            let save = match cfg.run.checkpoints {
                CheckpointPolicy::EveryEpoch => true,
                CheckpointPolicy::Final => last,
                CheckpointPolicy::Never => false,
            };
            if save {
                checkpoint::save(&checkpoint_path(&w.dir, "student", epoch), &student, "student", seed, Some(epoch), meta.clone())?;
                // the EMA file records when the teacher last moved, so a frozen
                // teacher produces identical files
                checkpoint::save(&checkpoint_path(&w.dir, "ema", epoch), &ema.teacher, "ema", seed, ema.last_update_epoch, meta.clone())?;
            }
        }
        rows.push(row);
    }

    let record = RunRecord {
        config: cfg.clone(),
        rows,
        teacher_evals,
        student,
        teacher: ema.teacher,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        distill_calls,
    };
    if let Some(w) = &writers {
        let summary = serde_json::json!({
            "name": cfg.run.name,
            "seed": seed,
            "wall_clock_secs": record.wall_clock_secs,
            "final": record.final_row(),
            "teacher": record.teacher_evals.last(),
        });
        fs::write(w.dir.join("run.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(record)
}
