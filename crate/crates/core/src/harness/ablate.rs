//! Named configuration grids for the ablation studies.

use std::path::PathBuf;

use crate::distill::AuxVariant;
use crate::error::{Error, Result};

use super::config::{MdVariant, PdVariant, TrainConfig};
use super::report::{summarize, Summary};
use super::train::{train, RunRecord};

pub const PRESETS: &[&str] = &["components", "md_variants", "downweight", "pd_variants", "aux_variants", "share_decoder"];

pub const DEFAULT_SEEDS: [u64; 4] = [0, 1, 2, 3];

fn with(base: &TrainConfig, name: &str, f: impl FnOnce(&mut TrainConfig)) -> (String, TrainConfig) {
    let mut c = base.clone();
    c.distill = Default::default();
    c.ema.stop_update = false;
    f(&mut c);
    c.run.name = name.to_string();
    (name.to_string(), c)
}

fn full_pd(c: &mut TrainConfig) {
    c.distill.pd = true;
    c.distill.pd_variant = Some(PdVariant::ToodListen2stu);
    c.ema.stop_update = true;
}

/// The named configurations of a preset, in table order.
pub fn preset(name: &str, base: &TrainConfig) -> Result<Vec<(String, TrainConfig)>> {
    let md = |c: &mut TrainConfig| c.distill.md = true;
    let grid = match name {
        "components" => vec![
            with(base, "baseline", |_| {}),
            with(base, "md", md),
            with(base, "md_pd", |c| {
                md(c);
                full_pd(c);
            }),
            with(base, "md_aux", |c| {
                md(c);
                c.distill.aux = true;
            }),
            with(base, "md_pd_aux", |c| {
                md(c);
                full_pd(c);
                c.distill.aux = true;
            }),
        ],
        // classification-only comparisons: teacher-only matches add no box term
        "md_variants" => vec![
            with(base, "qfl_without_md", |_| {}),
            with(base, "conditional_md", |c| {
                md(c);
                c.distill.md_variant = Some(MdVariant::Conditional);
                c.distill.reg_md = false;
            }),
            with(base, "qfl_md", |c| {
                md(c);
                c.distill.reg_md = false;
            }),
            with(base, "qfl_conditional_md", |c| {
                md(c);
                c.distill.md_variant = Some(MdVariant::QflConditional);
                c.distill.reg_md = false;
            }),
        ],
        "downweight" => vec![
            with(base, "cls_only", |c| {
                md(c);
                c.distill.reg_md = false;
            }),
            with(base, "reg_no_wd", |c| {
                md(c);
                c.distill.reg_downweight = false;
            }),
            with(base, "reg_wd", md),
            with(base, "cls_wd_reg_wd", |c| {
                md(c);
                c.distill.cls_downweight = true;
            }),
        ],
        "pd_variants" => {
            let pd = |v: PdVariant| {
                move |c: &mut TrainConfig| {
                    c.distill.md = true;
                    c.distill.pd = true;
                    c.distill.pd_variant = Some(v);
                }
            };
            vec![
                with(base, "no_pd", md),
                with(base, "naive", pd(PdVariant::Naive)),
                with(base, "tood", pd(PdVariant::Tood)),
                with(base, "tood_listen2stu", pd(PdVariant::ToodListen2stu)),
                with(base, "tood_listen2stu_stop", |c| {
                    pd(PdVariant::ToodListen2stu)(c);
                    c.ema.stop_update = true;
                }),
                with(base, "query_prior", pd(PdVariant::QueryPrior)),
            ]
        }
        "aux_variants" => {
            let aux = |v: AuxVariant| {
                move |c: &mut TrainConfig| {
                    c.distill.md = true;
                    c.distill.aux = true;
                    c.distill.aux_variant = Some(v);
                }
            };
            vec![
                with(base, "original_matching", aux(AuxVariant::OriginalMatching)),
                with(base, "re_matching", aux(AuxVariant::ReMatching)),
                with(base, "md", aux(AuxVariant::Md)),
            ]
        }
        "share_decoder" => {
            let full = |c: &mut TrainConfig| {
                c.distill.md = true;
                c.distill.aux = true;
                full_pd(c);
            };
            vec![
                with(base, "baseline", |c| c.model.share_decoder = false),
                with(base, "baseline_shared", |c| c.model.share_decoder = true),
                with(base, "full", |c| {
                    full(c);
                    c.model.share_decoder = false;
                }),
                with(base, "full_shared", |c| {
                    full(c);
                    c.model.share_decoder = true;
                }),
            ]
        }
        other => return Err(Error::Config(format!("unknown preset {other:?}; expected one of {PRESETS:?}"))),
    };
    for (_, c) in &grid {
        c.validate()?;
    }
    Ok(grid)
}

pub struct AblationResult {
    pub preset: String,
    pub runs: Vec<(String, Vec<RunRecord>)>,
    pub summary: Vec<Summary>,
}

/// Runs every configuration of `preset` over `seeds`. With an output root,
/// each run writes to `<root>/<preset>/<config>/seed<k>`.
pub fn ablate(name: &str, base: &TrainConfig, seeds: &[u64], out_root: Option<&PathBuf>) -> Result<AblationResult> {
    let mut runs = Vec::new();
    for (label, cfg) in preset(name, base)? {
        let mut records = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = cfg.clone();
            c.run.seed = seed;
            c.run.out_dir = out_root.map(|r| r.join(name).join(&label).join(format!("seed{seed}")));
            records.push(train(&c)?);
        }
        runs.push((label, records));
    }
    let summary = runs.iter().map(|(label, recs)| summarize(label, recs)).collect();
    Ok(AblationResult { preset: name.to_string(), runs, summary })
}
