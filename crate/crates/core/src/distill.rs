//! Online distillation from the EMA teacher: matching distillation, prediction
//! distillation and auxiliary query groups.
//!
//! Every function here works on detached values. The result is either a
//! number or a list of [`RowTarget`]s that the training step turns into a
//! differentiable loss, so all matching decisions are fixed before any
//! gradient is taken.

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::losses::{qfl, weighted_box_loss_grad, ClassTarget, LossWeights, MultiTarget, RegressionRole, RowTarget};
use crate::matching::{build_cost_matrix, hungarian, CostMatrix, CostWeights, MatchResult};
use crate::network::tape::Tensor;
use crate::network::{forward_queries, FeatureGrid, ModelParams, Prediction, QuerySet, StageOutput};
use crate::synthdata::GroundTruth;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Student,
    Teacher,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClassSupervision {
    Background,
    Target(MultiTarget),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegTarget {
    pub gt: usize,
    pub bbox: BBox,
    pub role: RegressionRole,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryTarget {
    pub cls: ClassSupervision,
    pub reg: Option<RegTarget>,
    /// `None` for queries left to the background.
    pub provenance: Option<Provenance>,
}

impl QueryTarget {
    const BACKGROUND: Self = Self { cls: ClassSupervision::Background, reg: None, provenance: None };
}

/// Per-query supervision of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillTargets {
    pub queries: Vec<QueryTarget>,
    pub num_gts: usize,
    /// Whether teacher-only matches also received a box target.
    pub regression_md: bool,
}

/// Switches for the matching-distillation variants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MdOptions {
    /// Teacher-derived matches below this IoU (prediction vs GT) are dropped.
    pub iou_threshold: f64,
    /// Teacher-derived class targets use `t = 1` instead of the IoU.
    pub hard_teacher_targets: bool,
    /// Teacher-only matches also supervise regression.
    pub regression: bool,
    pub reg_downweight: bool,
    pub cls_downweight: bool,
}

impl Default for MdOptions {
    fn default() -> Self {
        Self { iou_threshold: 0.0, hard_teacher_targets: false, regression: true, reg_downweight: true, cls_downweight: false }
    }
}

impl DistillTargets {
    /// Plain one-to-one supervision from a single match.
    pub fn one_to_one(m: &MatchResult, preds: &[Prediction], gts: &[GroundTruth]) -> Self {
        let mut queries = vec![QueryTarget::BACKGROUND; m.num_queries];
        for p in &m.pairs {
            let gt = &gts[p.gt];
            queries[p.query] = QueryTarget {
                cls: ClassSupervision::Target(MultiTarget::single(ClassTarget {
                    class_index: gt.class,
                    iou_target: iou(preds[p.query].bbox, gt.bbox),
                })),
                reg: Some(RegTarget { gt: p.gt, bbox: gt.bbox, role: RegressionRole::LowerCost }),
                provenance: Some(Provenance::Student),
            };
        }
        Self { queries, num_gts: m.num_gts, regression_md: true }
    }

    /// Checks the structural contract; returns a description of the first
    /// violation.
    pub fn check(&self) -> std::result::Result<(), String> {
        let mut per_gt: Vec<Vec<RegressionRole>> = vec![Vec::new(); self.num_gts];
        for (q, t) in self.queries.iter().enumerate() {
            match (&t.cls, t.provenance) {
                (ClassSupervision::Background, Some(_)) => return Err(format!("query {q}: matched but background")),
                (ClassSupervision::Target(_), None) => return Err(format!("query {q}: class target without a match")),
                _ => {}
            }
            if t.reg.is_some() && t.provenance.is_none() {
                return Err(format!("query {q}: box target without a match"));
            }
            if self.regression_md && t.provenance.is_some() && t.reg.is_none() {
                return Err(format!("query {q}: matched but no box target"));
            }
            if let Some(r) = t.reg {
                if r.gt >= self.num_gts {
                    return Err(format!("query {q}: GT {} out of range", r.gt));
                }
                per_gt[r.gt].push(r.role);
            }
        }
        for (g, roles) in per_gt.iter().enumerate() {
            let higher = roles.iter().filter(|&&r| r == RegressionRole::HigherCost).count();
            let ok = match roles.len() {
                0 => true,
                1 => higher == 0,
                2 => higher == 1,
                _ => false,
            };
            if !ok {
                return Err(format!("GT {g}: {} box targets, {higher} higher-cost", roles.len()));
            }
        }
        Ok(())
    }

    pub fn two_class_count(&self) -> usize {
        self.queries
            .iter()
            .filter(|t| matches!(t.cls, ClassSupervision::Target(m) if m.secondary().is_some()))
            .count()
    }

    pub fn higher_cost_count(&self) -> usize {
        self.queries
            .iter()
            .filter(|t| t.reg.is_some_and(|r| r.role == RegressionRole::HigherCost))
            .count()
    }

    /// Resolves the targets into per-row loss inputs. `w_d` applies to the
    /// higher-cost query's box term and, optionally, to its class term.
    pub fn rows(&self, num_classes: usize, opts: &MdOptions, w: &LossWeights) -> Vec<RowTarget> {
        self.queries
            .iter()
            .map(|t| {
                let higher = t.reg.is_some_and(|r| r.role == RegressionRole::HigherCost);
                let labels = match t.cls {
                    ClassSupervision::Background => vec![0.0; num_classes],
                    ClassSupervision::Target(m) => m.label_vector(num_classes),
                };
                let cls_scale = if higher && opts.cls_downweight { w.w_d } else { 1.0 };
                let reg_scale = if higher && opts.reg_downweight { w.w_d } else { 1.0 };
                RowTarget { labels, cls_scale, reg: t.reg.map(|r| (r.bbox, reg_scale)) }
            })
            .collect()
    }
}

fn check_same_sets(student: &MatchResult, teacher: &MatchResult) -> Result<()> {
    if student.num_gts != teacher.num_gts {
        return Err(Error::GtSetMismatch { student: student.num_gts, teacher: teacher.num_gts });
    }
    if student.num_queries != teacher.num_queries {
        return Err(Error::LayoutMismatch(format!(
            "student matched {} queries, teacher {}",
            student.num_queries, teacher.num_queries
        )));
    }
    Ok(())
}

/// Combines the student's and the teacher's one-to-one matches into a
/// one-to-many assignment.
///
/// A query keeps its student match as primary target and gains the teacher's
/// GT as a second class target when the classes differ. A query matched only
/// by the teacher takes the teacher's GT. Box targets follow the same
/// precedence; a GT regressed by two queries down-weights the one whose
/// student cost cell is larger (ties go against the teacher-only query).
pub fn matching_distillation(
    student: &MatchResult,
    teacher: &MatchResult,
    student_costs: &CostMatrix,
    preds: &[Prediction],
    gts: &[GroundTruth],
    opts: &MdOptions,
) -> Result<DistillTargets> {
    check_same_sets(student, teacher)?;
    let s_of = student.gt_by_query();
    let t_of = teacher.gt_by_query();
    let teacher_target = |q: usize, g: usize| -> Option<ClassTarget> {
        let v = iou(preds[q].bbox, gts[g].bbox);
        (v >= opts.iou_threshold).then_some(ClassTarget {
            class_index: gts[g].class,
            iou_target: if opts.hard_teacher_targets { 1.0 } else { v },
        })
    };
    let mut queries = Vec::with_capacity(student.num_queries);
    for q in 0..student.num_queries {
        let target = match (s_of[q], t_of[q]) {
            (Some(a), tb) => {
                let primary = ClassTarget { class_index: gts[a].class, iou_target: iou(preds[q].bbox, gts[a].bbox) };
                let secondary = tb.filter(|&b| gts[b].class != gts[a].class).and_then(|b| teacher_target(q, b));
                let cls = match secondary.and_then(|s| MultiTarget::pair(primary, s)) {
                    Some(m) => m,
                    None => MultiTarget::single(primary),
                };
                QueryTarget {
                    cls: ClassSupervision::Target(cls),
                    reg: Some(RegTarget { gt: a, bbox: gts[a].bbox, role: RegressionRole::LowerCost }),
                    provenance: Some(if tb.is_some() { Provenance::Both } else { Provenance::Student }),
                }
            }
            (None, Some(b)) => match teacher_target(q, b) {
                Some(t) => QueryTarget {
                    cls: ClassSupervision::Target(MultiTarget::single(t)),
                    reg: opts
                        .regression
                        .then_some(RegTarget { gt: b, bbox: gts[b].bbox, role: RegressionRole::LowerCost }),
                    provenance: Some(Provenance::Teacher),
                },
                None => QueryTarget::BACKGROUND,
            },
            (None, None) => QueryTarget::BACKGROUND,
        };
        queries.push(target);
    }
    assign_roles(&mut queries, student_costs, student.num_gts);
    Ok(DistillTargets { queries, num_gts: student.num_gts, regression_md: opts.regression })
}

fn assign_roles(queries: &mut [QueryTarget], costs: &CostMatrix, num_gts: usize) {
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); num_gts];
    for (q, t) in queries.iter().enumerate() {
        if let Some(r) = t.reg {
            holders[r.gt].push(q);
        }
    }
    for (g, qs) in holders.iter().enumerate() {
        if let [a, b] = qs[..] {
            // `a` < `b`; prefer keeping the student-matched query on ties
            let a_student = queries[a].provenance != Some(Provenance::Teacher);
            let (ca, cb) = (costs.get(a, g), costs.get(b, g));
            let a_higher = if ca == cb { !a_student } else { ca > cb };
            let loser = if a_higher { a } else { b };
            if let Some(r) = queries[loser].reg.as_mut() {
                r.role = RegressionRole::HigherCost;
            }
        }
    }
}

/// Matching distillation where teacher-derived targets are kept only when
/// the prediction overlaps the teacher's GT by at least `iou_threshold`.
pub fn conditional_md(
    student: &MatchResult,
    teacher: &MatchResult,
    student_costs: &CostMatrix,
    preds: &[Prediction],
    gts: &[GroundTruth],
    iou_threshold: f64,
) -> Result<DistillTargets> {
    let opts = MdOptions { iou_threshold, ..MdOptions::default() };
    matching_distillation(student, teacher, student_costs, preds, gts, &opts)
}

/// `c[c_g] <- c[c_g]^alpha * iou^beta`; other entries unchanged.
pub fn teacher_score_update(scores: &[f64], class: usize, teacher_iou: f64, alpha: f64, beta: f64) -> Vec<f64> {
    let mut c = scores.to_vec();
    c[class] = c[class].powf(alpha) * teacher_iou.powf(beta);
    c
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdOptions {
    /// Re-weight the teacher's score at its matched class and use it as the
    /// box weight.
    pub tood_weight: bool,
    /// Only regress toward the teacher box when it beats the student's IoU.
    pub listen2stu: bool,
    pub alpha: f64,
    pub beta: f64,
    /// Supervise only the matched class entry (others pulled to zero)
    /// instead of the full teacher score vector.
    pub single_entry: bool,
}

impl Default for PdOptions {
    fn default() -> Self {
        Self { tood_weight: true, listen2stu: true, alpha: 0.25, beta: 0.75, single_entry: false }
    }
}

/// Teacher and student predictions decoded from the same teacher query.
#[derive(Clone, Copy, Debug)]
pub struct PdPair<'a> {
    pub teacher: &'a Prediction,
    pub student: &'a Prediction,
}

pub fn pd_pairs<'a>(teacher: &'a [Prediction], student: &'a [Prediction]) -> Vec<PdPair<'a>> {
    assert_eq!(teacher.len(), student.len(), "pairs are positional");
    teacher.iter().zip(student).map(|(t, s)| PdPair { teacher: t, student: s }).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdPlan {
    pub rows: Vec<RowTarget>,
    /// Teacher-matched pairs whose box term the IoU gate switched off.
    pub gated_off: usize,
}

/// Resolves prediction distillation targets for each pair. `teacher_match`
/// is the teacher's own Hungarian match at the same stage.
pub fn plan_prediction_distillation(
    pairs: &[PdPair],
    teacher_match: &MatchResult,
    gts: &[GroundTruth],
    opts: &PdOptions,
) -> PdPlan {
    let gt_of = teacher_match.gt_by_query();
    let mut gated_off = 0;
    let rows = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = &p.teacher.scores;
            let Some(g) = gt_of.get(i).copied().flatten() else {
                return RowTarget { labels: c.clone(), cls_scale: 1.0, reg: None };
            };
            let gt = &gts[g];
            let iou_t = iou(p.teacher.bbox, gt.bbox);
            let updated = if opts.tood_weight {
                teacher_score_update(c, gt.class, iou_t, opts.alpha, opts.beta)
            } else {
                c.clone()
            };
            let weight = if opts.tood_weight { updated[gt.class] } else { 1.0 };
            let open = !opts.listen2stu || iou_t > iou(p.student.bbox, gt.bbox);
            if !open {
                gated_off += 1;
            }
            let labels = if opts.single_entry {
                let mut v = vec![0.0; c.len()];
                v[gt.class] = updated[gt.class];
                v
            } else {
                updated
            };
            RowTarget { labels, cls_scale: 1.0, reg: open.then_some((p.teacher.bbox, weight)) }
        })
        .collect();
    PdPlan { rows, gated_off }
}

/// Uniform distillation toward the raw teacher outputs.
pub fn plan_naive_distillation(pairs: &[PdPair]) -> Vec<RowTarget> {
    pairs
        .iter()
        .map(|p| RowTarget { labels: p.teacher.scores.clone(), cls_scale: 1.0, reg: Some((p.teacher.bbox, 1.0)) })
        .collect()
}

/// Value of planned targets evaluated on the student side of each pair.
fn pair_loss(pairs: &[PdPair], rows: &[RowTarget], w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for (p, r) in pairs.iter().zip(rows) {
        for (&s, &t) in p.student.scores.iter().zip(&r.labels) {
            total += w.qfl * r.cls_scale * qfl(s, t, w.gamma)?;
        }
        if let Some((target, scale)) = r.reg {
            total += weighted_box_loss_grad(p.student.bbox, target, scale, w).0;
        }
    }
    Ok(total)
}

/// Unnormalized prediction-distillation loss over `pairs`.
pub fn prediction_distillation(
    pairs: &[PdPair],
    teacher_match: &MatchResult,
    gts: &[GroundTruth],
    opts: &PdOptions,
    w: &LossWeights,
) -> Result<f64> {
    let plan = plan_prediction_distillation(pairs, teacher_match, gts, opts);
    pair_loss(pairs, &plan.rows, w)
}

pub fn naive_distillation(pairs: &[PdPair], w: &LossWeights) -> Result<f64> {
    pair_loss(pairs, &plan_naive_distillation(pairs), w)
}

/// Supervision of the student's decode of the teacher's initial queries by
/// a fresh Hungarian match per stage.
pub fn query_prior_targets(stage_preds: &[Vec<Prediction>], gts: &[GroundTruth], cost: &CostWeights) -> Result<Vec<DistillTargets>> {
    stage_preds
        .iter()
        .map(|preds| {
            let c = build_cost_matrix(preds, gts, cost)?;
            Ok(DistillTargets::one_to_one(&hungarian(&c), preds, gts))
        })
        .collect()
}

/// Unnormalized query-prior loss: the student decodes `teacher_queries` and
/// is supervised by the GTs, never by teacher outputs.
pub fn query_prior_assignment(
    teacher_queries: &QuerySet,
    gts: &[GroundTruth],
    student: &ModelParams,
    features: &FeatureGrid,
    cost: &CostWeights,
    w: &LossWeights,
) -> Result<f64> {
    if teacher_queries.is_empty() {
        return Ok(0.0);
    }
    let stages = forward_queries(student, teacher_queries, features)?;
    let preds: Vec<Vec<Prediction>> = stages.into_iter().map(|s| s.predictions).collect();
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(query_prior_targets(&preds, gts, cost)?) {
        total += prediction_rows_loss(p, &t.rows(student.config().num_classes, &MdOptions::default(), w), w)?;
    }
    Ok(total)
}

fn prediction_rows_loss(preds: &[Prediction], rows: &[RowTarget], w: &LossWeights) -> Result<f64> {
    let pairs: Vec<PdPair> = preds.iter().map(|p| PdPair { teacher: p, student: p }).collect();
    pair_loss(&pairs, rows, w)
}

/// Queries picked from one teacher stage: the two lowest-cost queries for
/// every GT, in GT order.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxGroup {
    pub stage_index: usize,
    pub queries: QuerySet,
    /// Teacher query index behind each member.
    pub source: Vec<usize>,
    /// GT each member was selected for.
    pub selected_for: Vec<usize>,
    /// Teacher cost cell that selected each member.
    pub costs: Vec<f64>,
    /// The teacher's own match carried over to members: `(member, gt)`.
    pub inherited: Vec<(usize, usize)>,
}

impl AuxGroup {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

pub fn build_auxiliary_groups(
    teacher_stages: &[StageOutput],
    teacher_matches: &[MatchResult],
    teacher_costs: &[CostMatrix],
    gts: &[GroundTruth],
) -> Vec<AuxGroup> {
    if gts.is_empty() {
        return Vec::new();
    }
    let mut groups = Vec::with_capacity(teacher_stages.len());
    for (t, (out, (m, c))) in teacher_stages.iter().zip(teacher_matches.iter().zip(teacher_costs)).enumerate() {
        let mut source = Vec::new();
        let mut selected_for = Vec::new();
        let mut costs = Vec::new();
        let mut inherited = Vec::new();
        for g in 0..c.cols() {
            let mut order: Vec<usize> = (0..c.rows()).collect();
            order.sort_by(|&a, &b| c.get(a, g).total_cmp(&c.get(b, g)).then(a.cmp(&b)));
            let first = source.len();
            for &q in order.iter().take(2) {
                source.push(q);
                selected_for.push(g);
                costs.push(c.get(q, g));
            }
            let matched = m.query_for_gt(g).and_then(|q| source[first..].iter().position(|&s| s == q));
            inherited.push((first + matched.unwrap_or(0), g));
        }
        groups.push(AuxGroup { stage_index: t, queries: out.queries.select(&source), source, selected_for, costs, inherited });
    }
    groups
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxVariant {
    Md,
    ReMatching,
    OriginalMatching,
}

/// Targets for one stage of a group's student decode.
pub fn aux_group_targets(
    group: &AuxGroup,
    preds: &[Prediction],
    gts: &[GroundTruth],
    variant: AuxVariant,
    cost: &CostWeights,
    md: &MdOptions,
) -> Result<DistillTargets> {
    let c = build_cost_matrix(preds, gts, cost)?;
    let inherited = MatchResult::from_pairs(&c, group.inherited.iter().copied());
    Ok(match variant {
        AuxVariant::Md => matching_distillation(&hungarian(&c), &inherited, &c, preds, gts, md)?,
        AuxVariant::ReMatching => DistillTargets::one_to_one(&hungarian(&c), preds, gts),
        AuxVariant::OriginalMatching => DistillTargets::one_to_one(&inherited, preds, gts),
    })
}

pub fn check_group_size(group: &AuxGroup, num_queries: usize) -> Result<()> {
    if group.len() > num_queries {
        return Err(Error::GroupTooLarge { size: group.len(), limit: num_queries });
    }
    Ok(())
}

/// Unnormalized auxiliary loss: each group decoded by the student on its own,
/// supervised at every stage.
#[allow(clippy::too_many_arguments)]
pub fn aux_group_loss(
    groups: &[AuxGroup],
    student: &ModelParams,
    features: &FeatureGrid,
    gts: &[GroundTruth],
    variant: AuxVariant,
    cost: &CostWeights,
    md: &MdOptions,
    w: &LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    for g in groups {
        check_group_size(g, student.config().num_queries)?;
        for stage in forward_queries(student, &g.queries, features)? {
            let t = aux_group_targets(g, &stage.predictions, gts, variant, cost, md)?;
            total += prediction_rows_loss(&stage.predictions, &t.rows(student.config().num_classes, md, w), w)?;
        }
    }
    Ok(total)
}

/// Per-step counters appended to the diagnostics log.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DistillDiagnostics {
    pub two_class_queries: usize,
    pub higher_cost_queries: usize,
    pub pd_gated_off: usize,
    pub aux_group_members: usize,
}

impl DistillDiagnostics {
    pub fn add(&mut self, o: &Self) {
        self.two_class_queries += o.two_class_queries;
        self.higher_cost_queries += o.higher_cost_queries;
        self.pd_gated_off += o.pd_gated_off;
        self.aux_group_members += o.aux_group_members;
    }

    pub fn record_targets(&mut self, t: &DistillTargets) {
        self.two_class_queries += t.two_class_count();
        self.higher_cost_queries += t.higher_cost_count();
    }
}

/// Logit and box tensors of a prediction list, for callers that only hold
/// values.
pub fn prediction_tensors(preds: &[Prediction]) -> (Tensor, Tensor) {
    let k = preds.first().map_or(0, |p| p.scores.len());
    let logits = preds.iter().flat_map(|p| p.scores.iter().map(|&s| crate::network::inverse_sigmoid(s))).collect();
    let boxes = preds.iter().flat_map(|p| p.bbox.to_array()).collect();
    (Tensor::new(preds.len(), k, logits), Tensor::new(preds.len(), 4, boxes))
}
