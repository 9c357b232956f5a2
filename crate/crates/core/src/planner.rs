//! Knowledge-guided grasp planning.
//!
//! A seeded generator stands in for the region proposal network. Proposals
//! are axis-aligned envelopes; knowledge-guided sampling keeps a proposal as
//! positive only when it overlaps a ground-truth grasp (`iou > 0.5`) *and*
//! lies mostly inside the grounded object (`tiou > 0.5`). Positives are then
//! scored, given an orientation bin, and ranked by the mean of box and
//! surface confidence.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{axis_envelope, normalize_angle, tiou, AxisRect, GraspRect, JaccardMode};
use crate::noise::{check_rate, NoiseConfig, RateError};
use crate::scene::{select_target, ObjectId, Relation, Scene, SceneError, SceneGraph};
use crate::seeding::stream;

/// Orientation bins: 18 grasp bins of 10° plus the non-grasp class 0.
pub const ANGLE_CLASSES: usize = 19;
pub const NON_GRASP_CLASS: usize = 0;
const BIN_DEGREES: f64 = 10.0;

/// Orientation bin of `theta`: bins are left-closed, `[-90, -80)` is class 1.
pub fn angle_to_class(theta: f64) -> usize {
    let t = normalize_angle(theta);
    let bin = ((t + 90.0) / BIN_DEGREES).floor() as usize;
    bin.min(ANGLE_CLASSES - 2) + 1
}

/// Center angle of a grasp bin. Class 0 has no angle and maps to 0.
pub fn class_to_angle(class: usize) -> f64 {
    if class == NON_GRASP_CLASS {
        return 0.0;
    }
    -90.0 + BIN_DEGREES * (class - 1) as f64 + BIN_DEGREES / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub positive_count: usize,
    pub negative_count: usize,
    pub iou_threshold: f64,
    pub tiou_threshold: f64,
    /// Standard deviation of proposal center jitter, px.
    pub center_jitter_px: f64,
    /// Standard deviation of proposal size jitter, as a fraction of size.
    pub size_jitter_frac: f64,
    /// Ground-truth envelopes are prepended to the proposal pool.
    pub include_ground_truth: bool,
    /// Gaussian noise added to box confidence.
    pub box_conf_noise: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub jaccard: JaccardMode,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            positive_count: 128,
            negative_count: 128,
            iou_threshold: 0.5,
            tiou_threshold: 0.5,
            center_jitter_px: 5.0,
            size_jitter_frac: 0.10,
            include_ground_truth: true,
            box_conf_noise: 0.0,
            lambda1: 1.0,
            lambda2: 1.0,
            jaccard: JaccardMode::Rotated,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), RateError> {
        check_rate("iou_threshold", self.iou_threshold)?;
        check_rate("tiou_threshold", self.tiou_threshold)?;
        for (name, v) in [
            ("center_jitter_px", self.center_jitter_px),
            ("size_jitter_frac", self.size_jitter_frac),
            ("box_conf_noise", self.box_conf_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(RateError { name, value: v });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlannerError {
    #[error("scene {0} has no grasp annotations")]
    NoAnnotations(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub envelope: AxisRect,
    /// Index into the scene's grasp annotations with the best overlap.
    pub matched_gt: Option<usize>,
    pub iou_best: f64,
    /// Containment in the grounded region; 1 when no region constrains sampling.
    pub tiou_k: f64,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampledProposals {
    pub positives: Vec<Proposal>,
    pub negatives: Vec<Proposal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGrasp {
    pub rect: GraspRect,
    pub envelope: AxisRect,
    pub object_id: ObjectId,
    pub matched_gt: usize,
    pub iou_best: f64,
    pub box_conf: f64,
    pub surface_conf: f64,
    pub angle_class: usize,
    pub final_conf: f64,
}

/// What the scorer knows about which objects have nothing on top.
#[derive(Debug, Clone, Copy)]
pub enum SurfaceKnowledge<'a> {
    /// Surface score 1 for objects in the set, 0 otherwise.
    Graspable(&'a BTreeSet<ObjectId>),
    /// No surface head: a constant 0.5.
    Unknown,
}

/// Labels one proposal against all ground-truth envelopes and, optionally,
/// the grounded region.
pub fn label_proposal(
    envelope: AxisRect,
    gt_envelopes: &[AxisRect],
    region: Option<&AxisRect>,
    iou_threshold: f64,
    tiou_threshold: f64,
) -> Proposal {
    let mut matched = None;
    let mut best = 0.0;
    for (i, gt) in gt_envelopes.iter().enumerate() {
        let v = envelope.iou(gt);
        if matched.is_none() || v > best {
            matched = Some(i);
            best = v;
        }
    }
    let tiou_k = region.map_or(1.0, |k| tiou(&envelope, k));
    let positive = best > iou_threshold && tiou_k > tiou_threshold;
    Proposal {
        envelope,
        matched_gt: matched,
        iou_best: best,
        tiou_k,
        label: if positive { Label::Positive } else { Label::Negative },
    }
}

fn compare_ranked(a: &ScoredGrasp, b: &ScoredGrasp) -> Ordering {
    b.final_conf
        .total_cmp(&a.final_conf)
        .then(b.iou_best.total_cmp(&a.iou_best))
        .then(a.envelope.x.total_cmp(&b.envelope.x))
        .then(a.envelope.y.total_cmp(&b.envelope.y))
}

/// Flips each stacking relation of `graph` with probability `rate`. Uses one
/// uniform draw per relation in canonical order, so flips are nested as the
/// rate grows.
pub fn corrupt_graph<R: Rng>(graph: &SceneGraph, rate: f64, rng: &mut R) -> SceneGraph {
    let mut out = SceneGraph {
        relations: BTreeSet::new(),
        ambiguous: graph.ambiguous.clone(),
    };
    for r in &graph.relations {
        let u: f64 = rng.random();
        if r.predicate == crate::scene::Predicate::On && u < rate {
            out.relations.insert(Relation {
                subject: r.object,
                predicate: r.predicate,
                object: r.subject,
            });
        } else {
            out.relations.insert(*r);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Planner {
    pub config: PlannerConfig,
    pub noise: NoiseConfig,
}

impl Planner {
    pub fn new(config: PlannerConfig, noise: NoiseConfig) -> Self {
        Self { config, noise }
    }

    fn gt_envelopes(scene: &Scene) -> Vec<AxisRect> {
        scene.grasps.iter().map(|g| axis_envelope(&g.rect)).collect()
    }

    /// Synthetic proposal pool: ground-truth envelopes first (when enabled),
    /// then a shuffled mix of Gaussian-jittered envelopes and uniform boxes.
    pub fn gen_proposals(&self, scene: &Scene, seed: u64) -> Result<Vec<AxisRect>, PlannerError> {
        if scene.grasps.is_empty() {
            return Err(PlannerError::NoAnnotations(scene.id.clone()));
        }
        let cfg = &self.config;
        let mut rng = stream(seed, "proposals", &scene.id);
        let gts = Self::gt_envelopes(scene);
        let mut pool = Vec::with_capacity(2 * (cfg.positive_count + cfg.negative_count));
        for i in 0..2 * cfg.positive_count {
            let gt = gts[i % gts.len()];
            let zs: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let w = (gt.w * (1.0 + cfg.size_jitter_frac * zs[2])).max(1.0);
            let h = (gt.h * (1.0 + cfg.size_jitter_frac * zs[3])).max(1.0);
            pool.push(AxisRect {
                x: gt.x + cfg.center_jitter_px * zs[0] - (w - gt.w) / 2.0,
                y: gt.y + cfg.center_jitter_px * zs[1] - (h - gt.h) / 2.0,
                w,
                h,
            });
        }
        let (iw, ih) = (scene.image_size.width as f64, scene.image_size.height as f64);
        let (max_w, max_h) = ((iw / 3.0).max(8.0), (ih / 3.0).max(8.0));
        for _ in 0..2 * cfg.negative_count {
            let w: f64 = rng.random_range(4.0..=max_w);
            let h: f64 = rng.random_range(4.0..=max_h);
            let x = rng.random_range(0.0..=(iw - w).max(0.0));
            let y = rng.random_range(0.0..=(ih - h).max(0.0));
            pool.push(AxisRect { x, y, w, h });
        }
        pool.shuffle(&mut rng);
        if cfg.include_ground_truth {
            let mut out = gts;
            out.extend(pool);
            Ok(out)
        } else {
            Ok(pool)
        }
    }

    /// Knowledge-guided sampling: walks the pool in order, filing each
    /// proposal as positive or negative until both sets hold their quota.
    pub fn kgpn_sample(&self, scene: &Scene, proposals: &[AxisRect], region: &AxisRect) -> SampledProposals {
        self.sample(scene, proposals, Some(region))
    }

    /// Sampling without a grounded region (object-agnostic detector).
    pub fn sample_unguided(&self, scene: &Scene, proposals: &[AxisRect]) -> SampledProposals {
        self.sample(scene, proposals, None)
    }

    fn sample(&self, scene: &Scene, proposals: &[AxisRect], region: Option<&AxisRect>) -> SampledProposals {
        let cfg = &self.config;
        let gts = Self::gt_envelopes(scene);
        let mut out = SampledProposals::default();
        for &p in proposals {
            if out.positives.len() >= cfg.positive_count && out.negatives.len() >= cfg.negative_count {
                break;
            }
            let prop = label_proposal(p, &gts, region, cfg.iou_threshold, cfg.tiou_threshold);
            match prop.label {
                Label::Positive if out.positives.len() < cfg.positive_count => out.positives.push(prop),
                Label::Negative if out.negatives.len() < cfg.negative_count => out.negatives.push(prop),
                _ => {}
            }
        }
        out
    }

    /// Scores positive proposals and ranks them by final confidence.
    ///
    /// Ties on final confidence break on higher `iou_best`, then smaller
    /// envelope `x`, then smaller `y`.
    pub fn score_and_select(
        &self,
        scene: &Scene,
        positives: &[Proposal],
        surface: SurfaceKnowledge<'_>,
        seed: u64,
    ) -> Vec<ScoredGrasp> {
        let mut rng = stream(seed, "scoring", &scene.id);
        let gts = Self::gt_envelopes(scene);
        let mut ranked = Vec::with_capacity(positives.len());
        for p in positives {
            let z: f64 = rng.sample(StandardNormal);
            let u_surface: f64 = rng.random();
            let u_angle: f64 = rng.random();
            let alt_angle = rng.random_range(1..ANGLE_CLASSES - 1);
            let Some(gi) = p.matched_gt else { continue };
            let gt = &scene.grasps[gi];

            let box_conf = (p.iou_best + self.config.box_conf_noise * z).clamp(0.0, 1.0);
            let surface_conf = match surface {
                SurfaceKnowledge::Unknown => 0.5,
                SurfaceKnowledge::Graspable(set) => {
                    let s = set.contains(&gt.object_id);
                    let s = if u_surface < self.noise.surface_flip_rate { !s } else { s };
                    if s {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            let true_class = angle_to_class(gt.rect.theta);
            let angle_class = if u_angle < self.noise.angle_noise_rate {
                // any grasp bin other than the true one
                if alt_angle >= true_class {
                    alt_angle + 1
                } else {
                    alt_angle
                }
            } else {
                true_class
            };
            let gt_env = gts[gi];
            let scale = (p.envelope.area() / gt_env.area()).sqrt();
            let c = p.envelope.center();
            let rect = GraspRect {
                cx: c.x,
                cy: c.y,
                theta: class_to_angle(angle_class),
                w: gt.rect.w * scale,
                h: gt.rect.h * scale,
            };
            ranked.push(ScoredGrasp {
                rect,
                envelope: p.envelope,
                object_id: gt.object_id,
                matched_gt: gi,
                iou_best: p.iou_best,
                box_conf,
                surface_conf,
                angle_class,
                final_conf: (box_conf + surface_conf) / 2.0,
            });
        }
        ranked.sort_by(compare_ranked);
        ranked
    }

    /// Full knowledge-guided plan toward the grounded `region`, with surface
    /// scores from the true scene graph.
    pub fn plan(
        &self,
        scene: &Scene,
        proposals: &[AxisRect],
        region: &AxisRect,
        seed: u64,
    ) -> Result<Vec<ScoredGrasp>, PlannerError> {
        let graph = scene.graph()?;
        let graspable = graph.graspable(scene.objects.iter().map(|o| &o.id));
        let sampled = self.kgpn_sample(scene, proposals, region);
        Ok(self.score_and_select(scene, &sampled.positives, SurfaceKnowledge::Graspable(&graspable), seed))
    }

    /// Object-agnostic detector: no region filter, no surface knowledge.
    pub fn baseline_end2end(&self, scene: &Scene, proposals: &[AxisRect], seed: u64) -> Vec<ScoredGrasp> {
        let sampled = self.sample_unguided(scene, proposals);
        self.score_and_select(scene, &sampled.positives, SurfaceKnowledge::Unknown, seed)
    }

    /// Scene-graph pipeline: picks a graspable target from a possibly
    /// corrupted scene graph and plans toward it, with surface scores taken
    /// from that same graph.
    pub fn baseline_scenegraph(
        &self,
        scene: &Scene,
        proposals: &[AxisRect],
        edge_flip_rate: f64,
        seed: u64,
    ) -> Result<Vec<ScoredGrasp>, PlannerError> {
        let graph = scene.graph()?;
        let mut rng = stream(seed, "scene-graph", &scene.id);
        let predicted = corrupt_graph(&graph, edge_flip_rate, &mut rng);
        let Some(target) = select_target(&scene.objects, &predicted) else {
            let mut ranked = self.baseline_end2end(scene, proposals, seed);
            ranked.sort_by(|a, b| {
                b.box_conf
                    .total_cmp(&a.box_conf)
                    .then(compare_ranked(a, b))
            });
            return Ok(ranked);
        };
        let region = scene.object(target).expect("target exists").bbox;
        let graspable = predicted.graspable(scene.objects.iter().map(|o| &o.id));
        let sampled = self.kgpn_sample(scene, proposals, &region);
        Ok(self.score_and_select(scene, &sampled.positives, SurfaceKnowledge::Graspable(&graspable), seed))
    }

    /// Object targeted by [`Self::baseline_scenegraph`] for the same inputs.
    pub fn scenegraph_target(&self, scene: &Scene, edge_flip_rate: f64, seed: u64) -> Result<Option<ObjectId>, PlannerError> {
        let graph = scene.graph()?;
        let mut rng = stream(seed, "scene-graph", &scene.id);
        let predicted = corrupt_graph(&graph, edge_flip_rate, &mut rng);
        Ok(select_target(&scene.objects, &predicted))
    }
}
