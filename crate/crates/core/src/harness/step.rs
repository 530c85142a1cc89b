//! One training step, split into planning and evaluation.
//!
//! Planning decodes every query group, runs all matching and distillation
//! logic on detached values, and records per-row targets together with the
//! detached inter-stage anchors. Evaluation replays a plan against any
//! parameter vector; the loss is then a smooth function of the parameters,
//! which is what the optimizer and the finite-difference check both see.

use crate::distill::{
    aux_group_targets, build_auxiliary_groups, check_group_size, matching_distillation, pd_pairs, plan_naive_distillation,
    plan_prediction_distillation, query_prior_targets, DistillDiagnostics, DistillTargets,
};
use crate::error::Result;
use crate::losses::{head_loss, RowTarget};
use crate::matching::{match_predictions, CostMatrix, MatchResult};
use crate::network::tape::{Graph, Tensor};
use crate::network::{stage_predictions, DecoderContext, FeatureGrid, ModelParams, ParamMode, QuerySet, StageNodes, StageOutput};
use crate::synthdata::GroundTruth;

use super::config::{PdVariant, TrainConfig};

/// Which term of the total loss a head contributes to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Main,
    Pd,
    Aux,
}

/// Loss terms of one step; `mqf` and `r` are the main group's class and box
/// sums.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub mqf: f64,
    pub r: f64,
    pub pd: f64,
    pub aux: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.mqf + self.r + self.pd + self.aux
    }

    pub fn add(&mut self, o: &Self) {
        self.mqf += o.mqf;
        self.r += o.r;
        self.pd += o.pd;
        self.aux += o.aux;
    }

    pub fn is_finite(&self) -> bool {
        [self.mqf, self.r, self.pd, self.aux].iter().all(|x| x.is_finite())
    }
}

/// Selects which components contribute to the evaluated loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComponentMask {
    pub main: bool,
    pub pd: bool,
    pub aux: bool,
}

impl ComponentMask {
    pub const ALL: Self = Self { main: true, pd: true, aux: true };

    fn admits(&self, c: Component) -> bool {
        match c {
            Component::Main => self.main,
            Component::Pd => self.pd,
            Component::Aux => self.aux,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QueryInput {
    Own,
    Fixed(QuerySet),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadPlan {
    pub group: usize,
    pub stage: usize,
    pub component: Component,
    pub rows: Vec<RowTarget>,
}

/// Everything a step decided for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePlan {
    pub inputs: Vec<QueryInput>,
    /// Per group, the detached anchor logits fed to stages 1.. .
    pub pinned: Vec<Vec<Tensor>>,
    pub heads: Vec<HeadPlan>,
    /// Loss normalizer (GT count of the whole batch).
    pub norm: f64,
    pub diagnostics: DistillDiagnostics,
    /// Calls into the distillation module made while planning.
    pub distill_calls: usize,
}

/// The teacher's detached view of a scene.
#[derive(Clone, Debug)]
pub struct TeacherView {
    pub initial: QuerySet,
    pub stages: Vec<StageOutput>,
    pub matches: Vec<MatchResult>,
    pub costs: Vec<CostMatrix>,
}

impl TeacherView {
    pub fn new(teacher: &ModelParams, features: &FeatureGrid, gts: &[GroundTruth], cfg: &TrainConfig) -> Result<Self> {
        let stages = crate::network::forward(teacher, features)?;
        let mut matches = Vec::with_capacity(stages.len());
        let mut costs = Vec::with_capacity(stages.len());
        for s in &stages {
            let (m, c) = match_predictions(&s.predictions, gts, &cfg.cost)?;
            matches.push(m);
            costs.push(c);
        }
        Ok(Self { initial: teacher.initial_queries(), stages, matches, costs })
    }

    /// The view when some distillation component needs it, else `None`.
    pub fn for_config(teacher: &ModelParams, features: &FeatureGrid, gts: &[GroundTruth], cfg: &TrainConfig) -> Result<Option<Self>> {
        if cfg.distill.uses_teacher() {
            Self::new(teacher, features, gts, cfg).map(Some)
        } else {
            Ok(None)
        }
    }
}

/// Result of a planned, differentiated step on one scene.
#[derive(Clone, Debug)]
pub struct SceneOutcome {
    pub parts: LossParts,
    pub grads: Vec<f64>,
    pub plan: ScenePlan,
}

fn decode_groups(graph: &mut Graph, ctx: &DecoderContext, inputs: &[QueryInput], pinned: &[Vec<Tensor>]) -> Result<Vec<Vec<StageNodes>>> {
    inputs
        .iter()
        .enumerate()
        .map(|(g, input)| {
            let (e, a) = match input {
                QueryInput::Own => ctx.own_queries(),
                QueryInput::Fixed(q) => (graph.constant(q.embeddings.clone()), graph.constant(q.anchor_logits.clone())),
            };
            ctx.run_pinned(graph, e, a, pinned.get(g).map_or(&[], |p| p.as_slice()))
        })
        .collect()
}

fn apply_heads(
    graph: &Graph,
    nodes: &[Vec<StageNodes>],
    plan: &ScenePlan,
    cfg: &TrainConfig,
    mask: ComponentMask,
) -> Result<(LossParts, Vec<(crate::network::tape::NodeId, Tensor)>)> {
    let mut parts = LossParts::default();
    let mut seeds = Vec::new();
    let k = 1.0 / plan.norm;
    for h in plan.heads.iter().filter(|h| mask.admits(h.component)) {
        let n = nodes[h.group][h.stage];
        let mut hl = head_loss(graph.value(n.logits), graph.value(n.boxes), &h.rows, &cfg.loss)?;
        let (cls, reg) = (hl.cls * k, hl.reg * k);
        match h.component {
            Component::Main => {
                parts.mqf += cls;
                parts.r += reg;
            }
            Component::Pd => parts.pd += cls + reg,
            Component::Aux => parts.aux += cls + reg,
        }
        hl.d_logits.data.iter_mut().for_each(|x| *x *= k);
        hl.d_boxes.data.iter_mut().for_each(|x| *x *= k);
        seeds.push((n.logits, hl.d_logits));
        seeds.push((n.boxes, hl.d_boxes));
    }
    Ok((parts, seeds))
}

/// Plans and differentiates one scene. `teacher` is `None` when no
/// distillation component is enabled.
pub fn scene_step(
    cfg: &TrainConfig,
    student: &ModelParams,
    teacher: Option<&TeacherView>,
    features: &FeatureGrid,
    gts: &[GroundTruth],
    norm: f64,
) -> Result<SceneOutcome> {
    let d = &cfg.distill;
    let mut diagnostics = DistillDiagnostics::default();
    let mut distill_calls = 0;
    let mut inputs = vec![QueryInput::Own];
    let pd_group = match teacher {
        Some(t) if d.pd => {
            inputs.push(QueryInput::Fixed(t.initial.clone()));
            Some(inputs.len() - 1)
        }
        _ => None,
    };
    let mut aux_groups = Vec::new();
    if let Some(t) = teacher.filter(|_| d.aux) {
        distill_calls += 1;
        for g in build_auxiliary_groups(&t.stages, &t.matches, &t.costs, gts) {
            check_group_size(&g, cfg.model.num_queries)?;
            diagnostics.aux_group_members += g.len();
            inputs.push(QueryInput::Fixed(g.queries.clone()));
            aux_groups.push((inputs.len() - 1, g));
        }
    }

    let mut graph = Graph::new();
    let ctx = DecoderContext::new(&mut graph, student, ParamMode::Trainable, features);
    let nodes = decode_groups(&mut graph, &ctx, &inputs, &[])?;
    let pinned: Vec<Vec<Tensor>> = nodes
        .iter()
        .map(|stages| stages[1..].iter().map(|s| graph.value(s.anchor_logits).clone()).collect())
        .collect();

    let k = cfg.model.num_classes;
    let md_opts = d.md_options();
    let mut heads = Vec::new();
    for (t, n) in nodes[0].iter().enumerate() {
        let preds = stage_predictions(&graph, n);
        let (m, c) = match_predictions(&preds, gts, &cfg.cost)?;
        let targets = match teacher.filter(|_| d.md) {
            Some(tv) => {
                distill_calls += 1;
                matching_distillation(&m, &tv.matches[t], &c, &preds, gts, &md_opts)?
            }
            None => DistillTargets::one_to_one(&m, &preds, gts),
        };
        diagnostics.record_targets(&targets);
        heads.push(HeadPlan { group: 0, stage: t, component: Component::Main, rows: targets.rows(k, &md_opts, &cfg.loss) });
    }
    if let (Some(g), Some(tv)) = (pd_group, teacher) {
        distill_calls += 1;
        for (t, n) in nodes[g].iter().enumerate() {
            let preds = stage_predictions(&graph, n);
            let rows = match d.pd_variant() {
                PdVariant::ToodListen2stu | PdVariant::Tood => {
                    let plan = plan_prediction_distillation(&pd_pairs(&tv.stages[t].predictions, &preds), &tv.matches[t], gts, &d.pd_options());
                    diagnostics.pd_gated_off += plan.gated_off;
                    plan.rows
                }
                PdVariant::Naive => plan_naive_distillation(&pd_pairs(&tv.stages[t].predictions, &preds)),
                PdVariant::QueryPrior => {
                    let targets = query_prior_targets(std::slice::from_ref(&preds), gts, &cfg.cost)?;
                    targets[0].rows(k, &md_opts, &cfg.loss)
                }
            };
            heads.push(HeadPlan { group: g, stage: t, component: Component::Pd, rows });
        }
    }
    for (g, group) in &aux_groups {
        for (t, n) in nodes[*g].iter().enumerate() {
            let preds = stage_predictions(&graph, n);
            let targets = aux_group_targets(group, &preds, gts, d.aux_variant(), &cfg.cost, &md_opts)?;
            heads.push(HeadPlan { group: *g, stage: t, component: Component::Aux, rows: targets.rows(k, &md_opts, &cfg.loss) });
        }
    }

    let plan = ScenePlan { inputs, pinned, heads, norm, diagnostics, distill_calls };
    let (parts, seeds) = apply_heads(&graph, &nodes, &plan, cfg, ComponentMask::ALL)?;
    // teacher values only ever enter as constants
    assert_eq!(graph.binding(), Some(student.binding()), "step graph must bind the student alone");
    let grads = graph.backward(&seeds)?;
    Ok(SceneOutcome { parts, grads: grads.values, plan })
}

/// Replays a plan at `params`. Returns the loss parts and, when requested,
/// the gradient of their sum over the masked components.
pub fn evaluate_plan(
    cfg: &TrainConfig,
    params: &ModelParams,
    features: &FeatureGrid,
    plan: &ScenePlan,
    mask: ComponentMask,
    with_grad: bool,
) -> Result<(LossParts, Option<Vec<f64>>)> {
    let mut graph = Graph::new();
    let ctx = DecoderContext::new(&mut graph, params, ParamMode::Trainable, features);
    let nodes = decode_groups(&mut graph, &ctx, &plan.inputs, &plan.pinned)?;
    let (parts, seeds) = apply_heads(&graph, &nodes, plan, cfg, mask)?;
    if !with_grad {
        return Ok((parts, None));
    }
    let grads = graph.backward(&seeds)?;
    Ok((parts, Some(grads.values)))
}
