//! Reference training losses for the three grasp heads, with analytic
//! gradients and a finite-difference checker.
//!
//! * proposal loss: binary cross entropy plus smooth-L1 box regression on
//!   positive proposals, weighted by `lambda1`;
//! * orientation loss: 19-way cross entropy plus smooth-L1 regression on
//!   every sample whose target class is not the non-grasp class 0, weighted
//!   by `lambda2`;
//! * surface loss: binary cross entropy;
//! * total loss: their sum.
//!
//! Batches are summed by default; [`Reduction::Mean`] divides by batch size.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::ANGLE_CLASSES;

/// Lower clamp on probabilities inside the log.
pub const PROB_FLOOR: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("length mismatch: {0} vs {1}")]
    Shape(usize, usize),
    #[error("invalid probability vector {0:?}")]
    Domain(Vec<f64>),
    #[error("class {0} out of range")]
    Class(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    fn scale(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean if n > 0 => 1.0 / n as f64,
            Reduction::Mean => 0.0,
        }
    }
}

fn smooth_l1_scalar(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

fn smooth_l1_deriv(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

pub fn smooth_l1(x: &[f64], target: &[f64]) -> Result<f64, LossError> {
    if x.len() != target.len() {
        return Err(LossError::Shape(x.len(), target.len()));
    }
    Ok(x.iter().zip(target).map(|(a, b)| smooth_l1_scalar(a - b)).sum())
}

fn check_simplex(p: &[f64]) -> Result<(), LossError> {
    let ok = p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
        && (p.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL;
    if ok {
        Ok(())
    } else {
        Err(LossError::Domain(p.to_vec()))
    }
}

/// `-ln p[label]` with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(p: &[f64], label: usize) -> Result<f64, LossError> {
    check_simplex(p)?;
    let q = *p.get(label).ok_or(LossError::Class(label))?;
    Ok(-q.max(PROB_FLOOR).ln())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Proposal head output. `p = [non-grasp, grasp]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalPrediction {
    pub p: [f64; 2],
    pub t: [f64; 4],
    pub p_star: bool,
    pub t_star: [f64; 4],
}

/// Orientation head output; class 0 is non-grasp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientationPrediction {
    pub rho: [f64; ANGLE_CLASSES],
    pub beta: [f64; 4],
    pub rho_star: usize,
    pub beta_star: [f64; 4],
}

/// Surface head output. `s = [stacked, on top]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacePrediction {
    pub s: [f64; 2],
    pub s_star: bool,
}

pub fn loss_p(batch: &[ProposalPrediction], lambda1: f64, reduction: Reduction) -> Result<f64, LossError> {
    let mut cls = 0.0;
    let mut loc = 0.0;
    for item in batch {
        cls += cross_entropy(&item.p, item.p_star as usize)?;
        if item.p_star {
            loc += smooth_l1(&item.t, &item.t_star)?;
        }
    }
    Ok((cls + lambda1 * loc) * reduction.scale(batch.len()))
}

pub fn loss_g(batch: &[OrientationPrediction], lambda2: f64, reduction: Reduction) -> Result<f64, LossError> {
    let mut cls = 0.0;
    let mut loc = 0.0;
    for item in batch {
        cls += cross_entropy(&item.rho, item.rho_star)?;
        if item.rho_star != 0 {
            loc += smooth_l1(&item.beta, &item.beta_star)?;
        }
    }
    Ok((cls + lambda2 * loc) * reduction.scale(batch.len()))
}

pub fn loss_s(batch: &[SurfacePrediction], reduction: Reduction) -> Result<f64, LossError> {
    let mut cls = 0.0;
    for item in batch {
        cls += cross_entropy(&item.s, item.s_star as usize)?;
    }
    Ok(cls * reduction.scale(batch.len()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadBatch {
    pub proposals: Vec<ProposalPrediction>,
    pub orientations: Vec<OrientationPrediction>,
    pub surfaces: Vec<SurfacePrediction>,
}

pub fn loss_total(batch: &HeadBatch, lambda1: f64, lambda2: f64, reduction: Reduction) -> Result<f64, LossError> {
    Ok(loss_p(&batch.proposals, lambda1, reduction)?
        + loss_g(&batch.orientations, lambda2, reduction)?
        + loss_s(&batch.surfaces, reduction)?)
}

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    /// Distance from the nearest non-differentiable point.
    fn kink_margin(&self, _x: &[f64]) -> f64 {
        f64::INFINITY
    }
}

/// d(-ln softmax(z)[label]) / dz, zero where the floor is active.
fn ce_logit_grad(z: &[f64], label: usize) -> Vec<f64> {
    let p = softmax(z);
    if p[label] < PROB_FLOOR {
        return vec![0.0; z.len()];
    }
    p.iter()
        .enumerate()
        .map(|(i, v)| v - if i == label { 1.0 } else { 0.0 })
        .collect()
}

fn l1_margin(x: &[f64], t: &[f64]) -> f64 {
    x.iter()
        .zip(t)
        .map(|(a, b)| ((a - b).abs() - 1.0).abs())
        .fold(f64::INFINITY, f64::min)
}

fn to4(x: &[f64]) -> [f64; 4] {
    [x[0], x[1], x[2], x[3]]
}

/// Proposal loss over logits: each item contributes `[z0, z1, t0..t3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalObjective {
    pub targets: Vec<(bool, [f64; 4])>,
    pub lambda1: f64,
    pub reduction: Reduction,
}

impl ProposalObjective {
    pub const STRIDE: usize = 6;

    pub fn predictions(&self, x: &[f64]) -> Vec<ProposalPrediction> {
        self.targets
            .iter()
            .zip(x.chunks(Self::STRIDE))
            .map(|(&(p_star, t_star), c)| {
                let p = softmax(&c[..2]);
                ProposalPrediction {
                    p: [p[0], p[1]],
                    t: to4(&c[2..]),
                    p_star,
                    t_star,
                }
            })
            .collect()
    }
}

impl Objective for ProposalObjective {
    fn dim(&self) -> usize {
        self.targets.len() * Self::STRIDE
    }

    fn value(&self, x: &[f64]) -> f64 {
        loss_p(&self.predictions(x), self.lambda1, self.reduction).expect("softmax output is valid")
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let scale = self.reduction.scale(self.targets.len());
        let mut g = Vec::with_capacity(x.len());
        for (&(p_star, t_star), c) in self.targets.iter().zip(x.chunks(Self::STRIDE)) {
            g.extend(ce_logit_grad(&c[..2], p_star as usize).into_iter().map(|v| v * scale));
            for (a, b) in c[2..].iter().zip(&t_star) {
                let d = if p_star { self.lambda1 * smooth_l1_deriv(a - b) } else { 0.0 };
                g.push(d * scale);
            }
        }
        g
    }

    fn kink_margin(&self, x: &[f64]) -> f64 {
        self.targets
            .iter()
            .zip(x.chunks(Self::STRIDE))
            .filter(|((p_star, _), _)| *p_star)
            .map(|((_, t), c)| l1_margin(&c[2..], t))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Orientation loss over logits: each item contributes 19 logits then 4 box values.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationObjective {
    pub targets: Vec<(usize, [f64; 4])>,
    pub lambda2: f64,
    pub reduction: Reduction,
}

impl OrientationObjective {
    pub const STRIDE: usize = ANGLE_CLASSES + 4;

    pub fn predictions(&self, x: &[f64]) -> Vec<OrientationPrediction> {
        self.targets
            .iter()
            .zip(x.chunks(Self::STRIDE))
            .map(|(&(rho_star, beta_star), c)| {
                let p = softmax(&c[..ANGLE_CLASSES]);
                OrientationPrediction {
                    rho: std::array::from_fn(|i| p[i]),
                    beta: to4(&c[ANGLE_CLASSES..]),
                    rho_star,
                    beta_star,
                }
            })
            .collect()
    }
}

impl Objective for OrientationObjective {
    fn dim(&self) -> usize {
        self.targets.len() * Self::STRIDE
    }

    fn value(&self, x: &[f64]) -> f64 {
        loss_g(&self.predictions(x), self.lambda2, self.reduction).expect("softmax output is valid")
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let scale = self.reduction.scale(self.targets.len());
        let mut g = Vec::with_capacity(x.len());
        for (&(c_star, b_star), c) in self.targets.iter().zip(x.chunks(Self::STRIDE)) {
            g.extend(ce_logit_grad(&c[..ANGLE_CLASSES], c_star).into_iter().map(|v| v * scale));
            for (a, b) in c[ANGLE_CLASSES..].iter().zip(&b_star) {
                let d = if c_star != 0 { self.lambda2 * smooth_l1_deriv(a - b) } else { 0.0 };
                g.push(d * scale);
            }
        }
        g
    }

    fn kink_margin(&self, x: &[f64]) -> f64 {
        self.targets
            .iter()
            .zip(x.chunks(Self::STRIDE))
            .filter(|((c, _), _)| *c != 0)
            .map(|((_, t), c)| l1_margin(&c[ANGLE_CLASSES..], t))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Surface loss over logits: two per item.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceObjective {
    pub targets: Vec<bool>,
    pub reduction: Reduction,
}

impl SurfaceObjective {
    pub const STRIDE: usize = 2;

    pub fn predictions(&self, x: &[f64]) -> Vec<SurfacePrediction> {
        self.targets
            .iter()
            .zip(x.chunks(Self::STRIDE))
            .map(|(&s_star, c)| {
                let p = softmax(c);
                SurfacePrediction { s: [p[0], p[1]], s_star }
            })
            .collect()
    }
}

impl Objective for SurfaceObjective {
    fn dim(&self) -> usize {
        self.targets.len() * Self::STRIDE
    }

    fn value(&self, x: &[f64]) -> f64 {
        loss_s(&self.predictions(x), self.reduction).expect("softmax output is valid")
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let scale = self.reduction.scale(self.targets.len());
        self.targets
            .iter()
            .zip(x.chunks(Self::STRIDE))
            .flat_map(|(&s, c)| ce_logit_grad(c, s as usize).into_iter().map(move |v| v * scale))
            .collect()
    }
}

/// Sum of the three head objectives over one concatenated parameter vector
/// (proposal block, then orientation block, then surface block).
#[derive(Debug, Clone, PartialEq)]
pub struct TotalObjective {
    pub proposals: ProposalObjective,
    pub orientations: OrientationObjective,
    pub surfaces: SurfaceObjective,
}

impl TotalObjective {
    fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let (a, rest) = x.split_at(self.proposals.dim());
        let (b, c) = rest.split_at(self.orientations.dim());
        (a, b, c)
    }

    pub fn batch(&self, x: &[f64]) -> HeadBatch {
        let (a, b, c) = self.split(x);
        HeadBatch {
            proposals: self.proposals.predictions(a),
            orientations: self.orientations.predictions(b),
            surfaces: self.surfaces.predictions(c),
        }
    }
}

impl Objective for TotalObjective {
    fn dim(&self) -> usize {
        self.proposals.dim() + self.orientations.dim() + self.surfaces.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let (a, b, c) = self.split(x);
        self.proposals.value(a) + self.orientations.value(b) + self.surfaces.value(c)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let (a, b, c) = self.split(x);
        let mut g = self.proposals.gradient(a);
        g.extend(self.orientations.gradient(b));
        g.extend(self.surfaces.gradient(c));
        g
    }

    fn kink_margin(&self, x: &[f64]) -> f64 {
        let (a, b, _) = self.split(x);
        self.proposals.kink_margin(a).min(self.orientations.kink_margin(b))
    }
}

/// Denominator floor for relative gradient errors.
pub const GRAD_REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// The requested point was too close to a smooth-L1 kink and was moved.
    pub perturbed: bool,
    /// Still within `2h` of a kink after perturbation; the result is unreliable.
    pub at_kink: bool,
    pub point: Vec<f64>,
}

/// Compares the analytic gradient with central differences of step `h`.
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, GRAD_REL_FLOOR)`.
pub fn grad_check<O: Objective + ?Sized>(obj: &O, point: &[f64], h: f64) -> GradCheck {
    let mut x = point.to_vec();
    let mut perturbed = false;
    for round in 0..32 {
        if obj.kink_margin(&x) > 2.0 * h {
            break;
        }
        perturbed = true;
        for (i, v) in x.iter_mut().enumerate() {
            *v += 1e-3 * (((i + round) % 7) as f64 + 1.0);
        }
    }
    let at_kink = obj.kink_margin(&x) <= 2.0 * h;
    let analytic = obj.gradient(&x);
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = obj.value(&probe);
        probe[i] = x[i] - h;
        let down = obj.value(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    GradCheck {
        max_rel_error: worst,
        perturbed,
        at_kink,
        point: x,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0]).unwrap(), 0.125);
        assert_eq!(smooth_l1(&[2.0], &[0.0]).unwrap(), 1.5);
        assert_eq!(smooth_l1(&[-2.0], &[0.0]).unwrap(), 1.5);
        assert_eq!(smooth_l1(&[1.0], &[1.0, 2.0]), Err(LossError::Shape(1, 2)));
    }

    #[test]
    fn perfect_predictions_are_free() {
        let p = ProposalPrediction {
            p: [0.0, 1.0],
            t: [1.0, 2.0, 3.0, 4.0],
            p_star: true,
            t_star: [1.0, 2.0, 3.0, 4.0],
        };
        assert_eq!(loss_p(&[p], 1.0, Reduction::Sum).unwrap(), 0.0);
        let mut rho = [0.0; ANGLE_CLASSES];
        rho[4] = 1.0;
        let o = OrientationPrediction {
            rho,
            beta: [0.0; 4],
            rho_star: 4,
            beta_star: [0.0; 4],
        };
        assert_eq!(loss_g(&[o], 1.0, Reduction::Sum).unwrap(), 0.0);
        let s = SurfacePrediction { s: [1.0, 0.0], s_star: false };
        assert_eq!(loss_s(&[s], Reduction::Sum).unwrap(), 0.0);
    }

    #[test]
    fn gates_zero_regression() {
        let neg = ProposalPrediction {
            p: [1.0, 0.0],
            t: [9.0, 9.0, 9.0, 9.0],
            p_star: false,
            t_star: [0.0; 4],
        };
        assert_eq!(loss_p(&[neg], 1.0, Reduction::Sum).unwrap(), 0.0);
        let mut rho = [0.0; ANGLE_CLASSES];
        rho[0] = 1.0;
        let non_grasp = OrientationPrediction {
            rho,
            beta: [5.0; 4],
            rho_star: 0,
            beta_star: [0.0; 4],
        };
        assert_eq!(loss_g(&[non_grasp], 1.0, Reduction::Sum).unwrap(), 0.0);
    }

    #[test]
    fn surface_loss_closed_form_and_additivity() {
        let s = SurfacePrediction { s: [0.5, 0.5], s_star: true };
        assert!((loss_s(std::slice::from_ref(&s), Reduction::Sum).unwrap() - 2f64.ln()).abs() < 1e-15);
        let t = SurfacePrediction { s: [0.2, 0.8], s_star: false };
        let both = loss_s(&[s.clone(), t.clone()], Reduction::Sum).unwrap();
        let sum = loss_s(std::slice::from_ref(&s), Reduction::Sum).unwrap() + loss_s(std::slice::from_ref(&t), Reduction::Sum).unwrap();
        assert_eq!(both, sum);
        assert_eq!(loss_s(&[s, t], Reduction::Mean).unwrap(), both / 2.0);
    }

    #[test]
    fn domain_errors() {
        let bad = SurfacePrediction { s: [0.7, 0.7], s_star: true };
        assert!(matches!(loss_s(&[bad], Reduction::Sum), Err(LossError::Domain(_))));
        let mut rho = [0.0; ANGLE_CLASSES];
        rho[0] = 1.0;
        let bad_class = OrientationPrediction {
            rho,
            beta: [0.0; 4],
            rho_star: 19,
            beta_star: [0.0; 4],
        };
        assert_eq!(loss_g(&[bad_class], 1.0, Reduction::Sum), Err(LossError::Class(19)));
    }

    #[test]
    fn ce_gradient_is_softmax_minus_onehot() {
        let obj = SurfaceObjective {
            targets: vec![true],
            reduction: Reduction::Sum,
        };
        let z = [0.3, -1.2];
        let p = softmax(&z);
        let g = obj.gradient(&z);
        assert!((g[0] - p[0]).abs() < 1e-15);
        assert!((g[1] - (p[1] - 1.0)).abs() < 1e-15);
        assert!(grad_check(&obj, &z, 1e-5).max_rel_error < 1e-6);
    }

    #[test]
    fn grad_check_regions() {
        let quad = ProposalObjective {
            targets: vec![(true, [0.0; 4])],
            lambda1: 1.0,
            reduction: Reduction::Sum,
        };
        let x = [0.1, 0.4, 0.3, -0.2, 0.5, 0.05];
        let r = grad_check(&quad, &x, 1e-5);
        assert!(!r.perturbed);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let x = [0.1, 0.4, 3.0, -2.0, 5.0, -1.5];
        assert!(grad_check(&quad, &x, 1e-5).max_rel_error < 1e-6);
        let at_kink = [0.1, 0.4, 1.0, 0.0, 0.0, 0.0];
        let r = grad_check(&quad, &at_kink, 1e-5);
        assert!(r.perturbed);
        assert!(!r.at_kink);
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn total_gradient_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let obj = TotalObjective {
                proposals: ProposalObjective {
                    targets: (0..3).map(|_| (rng.random_bool(0.5), [rng.random_range(-2.0..2.0); 4])).collect(),
                    lambda1: 1.0,
                    reduction: Reduction::Mean,
                },
                orientations: OrientationObjective {
                    targets: (0..3).map(|_| (rng.random_range(0..ANGLE_CLASSES), [0.5; 4])).collect(),
                    lambda2: 1.0,
                    reduction: Reduction::Mean,
                },
                surfaces: SurfaceObjective {
                    targets: vec![true, false],
                    reduction: Reduction::Mean,
                },
            };
            let x: Vec<f64> = (0..obj.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(grad_check(&obj, &x, 1e-5).max_rel_error < 1e-4);
        }
    }
}
