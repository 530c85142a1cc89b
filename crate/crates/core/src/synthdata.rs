//! Deterministic synthetic detection scenes and their feature grids.
//!
//! A scene is a handful of labelled boxes. Its feature grid carries, in each
//! cell touched by an object, a fixed class embedding plus a fixed linear
//! encoding of the offset from the cell center to the box center and of the
//! box size, with Gaussian noise on top. Everything derives from seeds.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::network::tape::Tensor;
use crate::network::{FeatureGrid, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub objects: Vec<GroundTruth>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub num_train: usize,
    pub num_val: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub max_pair_iou: f64,
    pub noise_sigma: f64,
    pub rejection_budget: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_train: 2000,
            num_val: 200,
            max_objects: 6,
            min_size: 0.08,
            max_size: 0.5,
            max_pair_iou: 0.7,
            noise_sigma: 0.1,
            rejection_budget: 10_000,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_objects == 0 {
            return bad("data.max_objects must be >= 1");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return bad("data sizes must satisfy 0 < min_size <= max_size <= 1");
        }
        if self.noise_sigma < 0.0 {
            return bad("data.noise_sigma must be >= 0");
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; derives independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_scene(seed: u64, cfg: &DataConfig, num_classes: usize) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(1..=cfg.max_objects);
    let (ln_lo, ln_hi) = (cfg.min_size.ln(), cfg.max_size.ln());
    let mut objects: Vec<GroundTruth> = Vec::with_capacity(count);
    let mut draws = 0;
    while objects.len() < count {
        draws += 1;
        if draws > cfg.rejection_budget {
            return Err(Error::RejectionBudget { budget: cfg.rejection_budget });
        }
        let class = rng.gen_range(0..num_classes);
        let w = rng.gen_range(ln_lo..=ln_hi).exp();
        let h = rng.gen_range(ln_lo..=ln_hi).exp();
        let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
        let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
        let bbox = BBox::new(cx, cy, w, h);
        if objects.iter().all(|o| iou(o.bbox, bbox) <= cfg.max_pair_iou) {
            objects.push(GroundTruth { bbox, class });
        }
    }
    Ok(Scene { seed, objects })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Scene seeds for a split, derived from the data seed.
pub fn scene_seeds(cfg: &DataConfig, split: Split) -> Vec<u64> {
    let (tag, n) = match split {
        Split::Train => (1, cfg.num_train),
        Split::Val => (2, cfg.num_val),
    };
    (0..n as u64).map(|i| mix_seed(mix_seed(cfg.seed, tag), i)).collect()
}

pub fn generate_split(cfg: &DataConfig, split: Split, num_classes: usize) -> Result<Vec<Scene>> {
    scene_seeds(cfg, split)
        .into_iter()
        .map(|s| generate_scene(s, cfg, num_classes))
        .collect()
}

/// Fixed class embeddings and offset projection shared by every scene of a run.
#[derive(Clone, Debug)]
pub struct FeatureRenderer {
    grid: usize,
    dim: usize,
    sigma: f64,
    seed: u64,
    class_embed: Vec<Vec<f64>>,
    offset_proj: [Vec<f64>; 4],
}

impl FeatureRenderer {
    pub fn new(model: &ModelConfig, data: &DataConfig) -> Self {
        Self::with_sigma(model, data.seed, data.noise_sigma)
    }

    pub fn with_sigma(model: &ModelConfig, seed: u64, sigma: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xFEA7));
        let normal = Normal::new(0.0, 0.5).expect("valid normal");
        let d = model.d_model;
        let row = |rng: &mut ChaCha8Rng| (0..d).map(|_| normal.sample(rng)).collect::<Vec<f64>>();
        let class_embed = (0..model.num_classes).map(|_| row(&mut rng)).collect();
        let offset_proj = [row(&mut rng), row(&mut rng), row(&mut rng), row(&mut rng)];
        Self { grid: model.grid_size, dim: d, sigma, seed, class_embed, offset_proj }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn class_embedding(&self, class: usize) -> &[f64] {
        &self.class_embed[class]
    }

    /// Cells an object writes into: those whose center it contains, plus the
    /// cell containing its own center.
    pub fn covers(&self, gt: &GroundTruth, cell: usize) -> bool {
        let g = self.grid;
        let (row, col) = (cell / g, cell % g);
        let u = (col as f64 + 0.5) / g as f64;
        let v = (row as f64 + 0.5) / g as f64;
        let own_col = ((gt.bbox.cx * g as f64) as usize).min(g - 1);
        let own_row = ((gt.bbox.cy * g as f64) as usize).min(g - 1);
        gt.bbox.contains_point(u, v) || (own_row == row && own_col == col)
    }

    pub fn render(&self, scene: &Scene) -> FeatureGrid {
        let g = self.grid;
        let mut cells = Tensor::zeros(g * g, self.dim);
        for k in 0..g * g {
            let u = ((k % g) as f64 + 0.5) / g as f64;
            let v = ((k / g) as f64 + 0.5) / g as f64;
            let out = cells.row_mut(k);
            for gt in scene.objects.iter().filter(|o| self.covers(o, k)) {
                let code = [
                    4.0 * (gt.bbox.cx - u),
                    4.0 * (gt.bbox.cy - v),
                    4.0 * (gt.bbox.w - 0.25),
                    4.0 * (gt.bbox.h - 0.25),
                ];
                for (j, o) in out.iter_mut().enumerate() {
                    *o += self.class_embed[gt.class][j];
                    for (c, proj) in code.iter().zip(&self.offset_proj) {
                        *o += c * proj[j];
                    }
                }
            }
        }
        if self.sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene.seed, self.seed ^ 0x0015E));
            let normal = Normal::new(0.0, self.sigma).expect("valid sigma");
            cells.data.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
        }
        FeatureGrid { size: g, cells }
    }
}

pub fn render_features(scene: &Scene, renderer: &FeatureRenderer) -> FeatureGrid {
    renderer.render(scene)
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    class: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    seed: u64,
    objects: Vec<ObjectRecord>,
}

pub fn scene_to_json_line(scene: &Scene) -> Result<String> {
    let rec = SceneRecord {
        seed: scene.seed,
        objects: scene
            .objects
            .iter()
            .map(|o| ObjectRecord { cx: o.bbox.cx, cy: o.bbox.cy, w: o.bbox.w, h: o.bbox.h, class: o.class })
            .collect(),
    };
    Ok(serde_json::to_string(&rec)?)
}

/// Writes one scene per line: `{"seed":..,"objects":[{"cx","cy","w","h","class"}]}`.
pub fn write_jsonl(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in scenes {
        writeln!(f, "{}", scene_to_json_line(s)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path, num_classes: usize) -> Result<Vec<Scene>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::Dataset { line: i + 1, reason: e.to_string() })?;
        let mut objects = Vec::with_capacity(rec.objects.len());
        for o in rec.objects {
            if o.class >= num_classes {
                return Err(Error::Dataset { line: i + 1, reason: format!("class {} >= {num_classes}", o.class) });
            }
            objects.push(GroundTruth { bbox: BBox::new(o.cx, o.cy, o.w, o.h), class: o.class });
        }
        out.push(Scene { seed: rec.seed, objects });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = DataConfig::default();
        assert_eq!(generate_scene(42, &cfg, 5).unwrap(), generate_scene(42, &cfg, 5).unwrap());
        assert_ne!(generate_scene(42, &cfg, 5).unwrap(), generate_scene(43, &cfg, 5).unwrap());
    }

    #[test]
    fn boxes_in_bounds_and_well_separated() {
        let cfg = DataConfig::default();
        for s in 0..10_000u64 {
            let scene = generate_scene(s, &cfg, 5).unwrap();
            assert!(!scene.objects.is_empty() && scene.objects.len() <= cfg.max_objects);
            for (i, o) in scene.objects.iter().enumerate() {
                let c = o.bbox.to_corners();
                assert!(c.x1 >= -1e-12 && c.y1 >= -1e-12 && c.x2 <= 1.0 + 1e-12 && c.y2 <= 1.0 + 1e-12);
                assert!(o.bbox.w >= cfg.min_size - 1e-12 && o.bbox.w <= cfg.max_size + 1e-12);
                assert!(o.class < 5);
                for p in &scene.objects[..i] {
                    assert!(iou(o.bbox, p.bbox) <= cfg.max_pair_iou);
                }
            }
        }
    }

    #[test]
    fn object_count_is_uniform() {
        let cfg = DataConfig::default();
        let n = 10_000;
        let mut hist = vec![0usize; cfg.max_objects + 1];
        for s in 0..n as u64 {
            hist[generate_scene(mix_seed(s, 99), &cfg, 5).unwrap().objects.len()] += 1;
        }
        let k = cfg.max_objects as f64;
        let expect = n as f64 / k;
        let sd = (n as f64 * (1.0 / k) * (1.0 - 1.0 / k)).sqrt();
        for &count in &hist[1..] {
            assert!((count as f64 - expect).abs() < 3.0 * sd, "{hist:?}");
        }
    }

    #[test]
    fn pathological_config_exhausts_budget() {
        let cfg = DataConfig { max_objects: 6, min_size: 0.9, max_size: 1.0, max_pair_iou: 0.0, rejection_budget: 200, ..Default::default() };
        // Six near-full-image boxes can never be pairwise disjoint.
        let err = (0..50u64).find_map(|s| generate_scene(s, &cfg, 3).err());
        assert!(matches!(err, Some(Error::RejectionBudget { budget: 200 })));
    }

    fn chi_mean(d: usize, sigma: f64) -> f64 {
        // sigma * sqrt(2) * Gamma((d+1)/2) / Gamma(d/2), via log-gamma recurrence
        fn ln_gamma_half_int(twice: usize) -> f64 {
            // Gamma(n/2) for integer n >= 1
            if twice == 1 {
                std::f64::consts::PI.sqrt().ln()
            } else if twice == 2 {
                0.0
            } else {
                ln_gamma_half_int(twice - 2) + ((twice - 2) as f64 / 2.0).ln()
            }
        }
        sigma * 2f64.sqrt() * (ln_gamma_half_int(d + 1) - ln_gamma_half_int(d)).exp()
    }

    #[test]
    fn empty_cells_are_noise_only() {
        let model = ModelConfig::default();
        let r = FeatureRenderer::with_sigma(&model, 3, 0.1);
        let mut norms = Vec::new();
        for s in 0..200u64 {
            let scene = generate_scene(s, &DataConfig::default(), model.num_classes).unwrap();
            let f = r.render(&scene);
            for k in 0..model.grid_size * model.grid_size {
                if scene.objects.iter().all(|o| !r.covers(o, k)) {
                    norms.push(f.cells.row(k).iter().map(|x| x * x).sum::<f64>().sqrt());
                }
            }
        }
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        let want = chi_mean(model.d_model, 0.1);
        assert!((mean - want).abs() / want < 0.02, "mean {mean} vs {want}");
    }

    #[test]
    fn noiseless_grid_is_deterministic_and_tracks_objects() {
        let model = ModelConfig::default();
        let r = FeatureRenderer::with_sigma(&model, 3, 0.0);
        let gt = GroundTruth { bbox: BBox::new(0.2, 0.2, 0.15, 0.15), class: 1 };
        let scene = Scene { seed: 1, objects: vec![gt] };
        let a = r.render(&scene);
        assert_eq!(a, r.render(&Scene { seed: 2, objects: vec![gt] }));
        let active = |f: &FeatureGrid| -> Vec<usize> {
            (0..f.cells.rows).filter(|&k| f.cells.row(k).iter().any(|&x| x != 0.0)).collect()
        };
        let moved = Scene { seed: 1, objects: vec![GroundTruth { bbox: BBox::new(0.8, 0.7, 0.15, 0.15), ..gt }] };
        let b = r.render(&moved);
        let (ca, cb) = (active(&a), active(&b));
        assert!(!ca.is_empty() && !cb.is_empty());
        assert!(ca.iter().all(|k| !cb.contains(k)));
        for k in &cb {
            assert!(r.covers(&moved.objects[0], *k));
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let cfg = DataConfig { num_train: 20, ..Default::default() };
        let scenes = generate_split(&cfg, Split::Train, 5).unwrap();
        write_jsonl(&path, &scenes).unwrap();
        assert_eq!(read_jsonl(&path, 5).unwrap(), scenes);
        let text = fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first["seed"].is_u64());
        assert!(first["objects"][0]["class"].is_u64());
    }

    #[test]
    fn datasets_are_byte_identical_per_seed() {
        let cfg = DataConfig { num_train: 50, num_val: 10, ..Default::default() };
        let a: Vec<String> = generate_split(&cfg, Split::Val, 5).unwrap().iter().map(|s| scene_to_json_line(s).unwrap()).collect();
        let b: Vec<String> = generate_split(&cfg, Split::Val, 5).unwrap().iter().map(|s| scene_to_json_line(s).unwrap()).collect();
        assert_eq!(a, b);
    }
}
