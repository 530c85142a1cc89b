use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::Result;
use crate::network::ModelParams;
use crate::synthdata::{mix_seed, Split};

use super::config::TrainConfig;
use super::step::{evaluate_plan, scene_step, ComponentMask, ScenePlan, TeacherView};
use super::train::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradEntry {
    pub index: usize,
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub loss: f64,
    pub entries: Vec<GradEntry>,
    pub max_rel_err: f64,
}

/// Relative error with an absolute floor so that two vanishing gradients
/// compare equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-9 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Student/teacher pair and a fixed batch with its step plans.
pub struct FixedBatch {
    pub student: ModelParams,
    pub data: Dataset,
    pub plans: Vec<ScenePlan>,
    pub grads: Vec<f64>,
    pub loss: f64,
}

/// Perturbs a fresh init so that no parameter sits at an exact zero and the
/// teacher disagrees with the student, then plans one batch.
pub fn fixed_batch(cfg: &TrainConfig) -> Result<FixedBatch> {
    let mut c = cfg.clone();
    c.data.num_train = cfg.schedule.batch_size;
    let data = Dataset::build(&c, Split::Train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.run.seed, 0x62AD));
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let mut student = ModelParams::init(&cfg.model, cfg.run.seed);
    student.values_mut().iter_mut().for_each(|x| *x += noise.sample(&mut rng));
    let mut teacher = student.clone();
    teacher.values_mut().iter_mut().for_each(|x| *x += noise.sample(&mut rng));
    let norm = data.scenes.iter().map(|s| s.objects.len()).sum::<usize>().max(1) as f64;
    let mut plans = Vec::new();
    let mut grads = vec![0.0; student.len()];
    let mut loss = 0.0;
    for (s, f) in data.scenes.iter().zip(&data.features) {
        let tv = TeacherView::for_config(&teacher, f, &s.objects, cfg)?;
        let out = scene_step(cfg, &student, tv.as_ref(), f, &s.objects, norm)?;
        loss += out.parts.total();
        grads.iter_mut().zip(&out.grads).for_each(|(g, x)| *g += x);
        plans.push(out.plan);
    }
    Ok(FixedBatch { student, data, plans, grads, loss })
}

impl FixedBatch {
    /// Planned loss of the batch at `params`, restricted to `mask`.
    pub fn loss_at(&self, cfg: &TrainConfig, params: &ModelParams, mask: ComponentMask) -> Result<f64> {
        let mut total = 0.0;
        for (plan, f) in self.plans.iter().zip(&self.data.features) {
            total += evaluate_plan(cfg, params, f, plan, mask, false)?.0.total();
        }
        Ok(total)
    }

    pub fn grad_at(&self, cfg: &TrainConfig, params: &ModelParams, mask: ComponentMask) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; params.len()];
        for (plan, f) in self.plans.iter().zip(&self.data.features) {
            let g = evaluate_plan(cfg, params, f, plan, mask, true)?.1.expect("gradient requested");
            grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok(grads)
    }
}

fn param_name(p: &ModelParams, index: usize) -> String {
    p.specs()
        .iter()
        .find(|s| index >= s.offset && index < s.offset + s.rows * s.cols)
        .map(|s| format!("{}[{}]", s.name, index - s.offset))
        .unwrap_or_default()
}

/// Compares analytic and central-difference gradients of the total loss on
/// `n_params` randomly chosen parameters of one fixed batch.
pub fn gradcheck(cfg: &TrainConfig, n_params: usize) -> Result<GradcheckReport> {
    cfg.validate()?;
    let batch = fixed_batch(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.run.seed, 0x6C4E));
    let h = 1e-6;
    let mut entries = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let index = rng.gen_range(0..batch.student.len());
        let mut plus = batch.student.clone();
        plus.values_mut()[index] += h;
        let mut minus = batch.student.clone();
        minus.values_mut()[index] -= h;
        let numeric = (batch.loss_at(cfg, &plus, ComponentMask::ALL)? - batch.loss_at(cfg, &minus, ComponentMask::ALL)?) / (2.0 * h);
        let analytic = batch.grads[index];
        entries.push(GradEntry { index, name: param_name(&batch.student, index), analytic, numeric, rel_err: relative_error(analytic, numeric) });
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { loss: batch.loss, entries, max_rel_err })
}
