//! Verification suites behind the `check` CLI command: finite-difference
//! gradient checks through the full encoder + loss composition, Monte-Carlo
//! verification of the implicit-loss lower bound, and the hinge bracketing
//! diagnostic of the explicit loss.
//!
//! Every instance derives its own rng substream from the suite seed, so a
//! failing instance is replayable from the reported index alone, and
//! instances can run in parallel without changing results.

use crate::encoder::{backward, forward, EncoderDims, EncoderParams, ModelGrads};
use crate::loss::{hinge_diagnostic, prop1_bound, total_loss, LossTerms};
use crate::mat::{affine_forward, Mat};
use crate::par::{map_indices, ExecPolicy};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;
/// Minimum hidden pre-activation magnitude: instances closer to the relu
/// kink than this are redrawn so central differences stay two-sided.
pub const KINK_MARGIN: f64 = 1e-4;
pub const DOMINANCE_GAP: f64 = 20.0;
pub const DOMINANCE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub checks: usize,
    pub failures: usize,
    pub max_error: f64,
    pub passed: bool,
    /// replay hints for failing instances
    pub failure_details: Vec<String>,
}

impl SuiteReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: {} — {} trials, {} checks, {} failures, max error {:.3e}",
            self.name,
            if self.passed { "pass" } else { "FAIL" },
            self.trials,
            self.checks,
            self.failures,
            self.max_error
        )
    }
}

struct GradInstance {
    params: EncoderParams,
    face_in: Mat,
    voice_in: Mat,
    labels: Vec<usize>,
    weights: Vec<f64>,
    margin: f64,
}

fn draw_instance(rng: &mut Rng) -> GradInstance {
    let dims = EncoderDims {
        obs_dim: 3 + rng.next_below(4) as usize,
        hidden_dim: 4 + rng.next_below(5) as usize,
        embed_dim: 3 + rng.next_below(3) as usize,
        classes: 3 + rng.next_below(4) as usize,
    };
    let n = 4 + rng.next_below(4) as usize;
    let mut params = EncoderParams::init(dims, rng);
    // spread the init so hidden units are comfortably active or inactive
    for t in [
        &mut params.face.l1.w,
        &mut params.face.l2.w,
        &mut params.voice.l1.w,
        &mut params.voice.l2.w,
        &mut params.classifier,
    ] {
        t.scale(2.0);
    }
    let mut face_in = Mat::zeros(n, dims.obs_dim);
    rng.fill_normal(face_in.data_mut());
    let mut voice_in = Mat::zeros(n, dims.obs_dim);
    rng.fill_normal(voice_in.data_mut());
    // distinct labels per slot (one identity per slot, as the trainer samples)
    let labels: Vec<usize> = (0..n).map(|i| i % dims.classes).collect();
    let weights: Vec<f64> = (0..n).map(|_| 0.05 + rng.next_f64()).collect();
    let margin = 1.0 + 4.0 * rng.next_f64();
    GradInstance {
        params,
        face_in,
        voice_in,
        labels,
        weights,
        margin,
    }
}

/// Smallest |hidden pre-activation| across both encoders for this input.
fn min_preactivation(inst: &GradInstance) -> f64 {
    let mut best = f64::INFINITY;
    for (mlp, input) in [
        (&inst.params.face, &inst.face_in),
        (&inst.params.voice, &inst.voice_in),
    ] {
        let mut pre = Mat::zeros(input.rows(), mlp.l1.w.rows());
        affine_forward(input, &mlp.l1.w, &mlp.l1.b, &mut pre);
        for &p in pre.data() {
            best = best.min(p.abs());
        }
    }
    best
}

fn loss_value(inst: &GradInstance, params: &EncoderParams, terms: LossTerms) -> f64 {
    let (x, _) = forward(params, &inst.face_in, crate::encoder::EncoderSide::Face).unwrap();
    let (v, _) = forward(params, &inst.voice_in, crate::encoder::EncoderSide::Voice).unwrap();
    total_loss(
        &x,
        &v,
        &inst.labels,
        &params.classifier,
        inst.margin,
        &inst.weights,
        terms,
    )
    .unwrap()
    .total
    .value
}

fn loss_grads(inst: &GradInstance, terms: LossTerms) -> ModelGrads {
    let params = &inst.params;
    let (x, fc) = forward(params, &inst.face_in, crate::encoder::EncoderSide::Face).unwrap();
    let (v, vc) = forward(params, &inst.voice_in, crate::encoder::EncoderSide::Voice).unwrap();
    let out = total_loss(
        &x,
        &v,
        &inst.labels,
        &params.classifier,
        inst.margin,
        &inst.weights,
        terms,
    )
    .unwrap();
    let face = backward(params, &fc, &out.total.grad_x).unwrap();
    let voice = backward(params, &vc, &out.total.grad_v).unwrap();
    ModelGrads {
        face,
        voice,
        classifier: out
            .total
            .grad_classifier
            .unwrap_or_else(|| Mat::zeros(params.classifier.rows(), params.classifier.cols())),
    }
}

/// Flattened parameter coordinates in checkpoint order.
fn coordinate_count(p: &EncoderParams) -> usize {
    let mlp = |m: &crate::encoder::Mlp| {
        m.l1.w.data().len() + m.l1.b.len() + m.l2.w.data().len() + m.l2.b.len()
    };
    mlp(&p.face) + mlp(&p.voice) + p.classifier.data().len()
}

fn coordinate_mut(p: &mut EncoderParams, idx: usize) -> &mut f64 {
    let mut i = idx;
    for mlp in [&mut p.face, &mut p.voice] {
        for slice in [
            mlp.l1.w.data_mut(),
            &mut mlp.l1.b,
            mlp.l2.w.data_mut(),
            &mut mlp.l2.b,
        ] {
            if i < slice.len() {
                return &mut slice[i];
            }
            i -= slice.len();
        }
    }
    &mut p.classifier.data_mut()[i]
}

fn grad_coordinate(g: &ModelGrads, idx: usize) -> f64 {
    let mut i = idx;
    for mlp in [&g.face, &g.voice] {
        for slice in [mlp.l1.w.data(), &mlp.l1.b[..], mlp.l2.w.data(), &mlp.l2.b[..]] {
            if i < slice.len() {
                return slice[i];
            }
            i -= slice.len();
        }
    }
    g.classifier.data()[i]
}

/// Central finite differences against the analytic gradients of the
/// implicit, explicit and total losses, composed through both encoders and
/// the classifier. Checks `coords` random parameter coordinates per loss per
/// instance.
pub fn grad_suite(seed: u64, instances: usize, coords: usize, policy: ExecPolicy) -> SuiteReport {
    let root = Rng::new(seed).stream("grad-suite");
    let term_variants = [
        ("implicit", LossTerms {
            use_implicit: true,
            use_explicit: false,
            normalize_anchor: false,
        }),
        ("explicit", LossTerms {
            use_implicit: false,
            use_explicit: true,
            normalize_anchor: false,
        }),
        ("total", LossTerms::default()),
    ];
    let results: Vec<(usize, f64, Vec<String>)> = map_indices(policy, instances, |i| {
        let mut inst_rng = root.substream(i as u64);
        let mut inst = draw_instance(&mut inst_rng);
        let mut redraws = 0;
        while min_preactivation(&inst) <= KINK_MARGIN && redraws < 64 {
            inst = draw_instance(&mut inst_rng);
            redraws += 1;
        }
        let total_coords = coordinate_count(&inst.params);
        let mut checks = 0usize;
        let mut max_err = 0.0f64;
        let mut failures = Vec::new();
        for (name, terms) in term_variants {
            let analytic = loss_grads(&inst, terms);
            for c in 0..coords {
                let idx = inst_rng.next_below(total_coords as u64) as usize;
                let mut plus = inst.params.clone();
                *coordinate_mut(&mut plus, idx) += FD_STEP;
                let mut minus = inst.params.clone();
                *coordinate_mut(&mut minus, idx) -= FD_STEP;
                let fd = (loss_value(&inst, &plus, terms) - loss_value(&inst, &minus, terms))
                    / (2.0 * FD_STEP);
                let a = grad_coordinate(&analytic, idx);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                checks += 1;
                max_err = max_err.max(rel);
                if rel >= GRAD_TOLERANCE {
                    failures.push(format!(
                        "instance {i} ({name}) coord {idx} check {c}: analytic {a:.9e} fd {fd:.9e} rel {rel:.3e}"
                    ));
                }
            }
        }
        (checks, max_err, failures)
    });
    let mut checks = 0;
    let mut max_error = 0.0f64;
    let mut failure_details = Vec::new();
    for (c, e, f) in results {
        checks += c;
        max_error = max_error.max(e);
        failure_details.extend(f);
    }
    let failures = failure_details.len();
    SuiteReport {
        name: "gradient finite differences".into(),
        trials: instances,
        checks,
        failures,
        max_error,
        passed: failures == 0,
        failure_details,
    }
}

/// Monte-Carlo verification of the implicit-loss lower bound on random
/// instances (plus the exact-equality case at a zero classifier).
pub fn bound_suite(seed: u64, trials: usize, policy: ExecPolicy) -> SuiteReport {
    let root = Rng::new(seed).stream("bound-suite");
    let results: Vec<(f64, Option<String>)> = map_indices(policy, trials, |i| {
        let mut rng = root.substream(i as u64);
        let n = 1 + rng.next_below(16) as usize;
        let classes = 2 + rng.next_below(7) as usize;
        let d = 1 + rng.next_below(8) as usize;
        let mut x = Mat::zeros(n, d);
        rng.fill_normal(x.data_mut());
        let mut v = Mat::zeros(n, d);
        rng.fill_normal(v.data_mut());
        let mut w = Mat::zeros(d, classes);
        rng.fill_normal(w.data_mut());
        for k in 0..classes {
            let mut sq = 0.0;
            for dd in 0..d {
                sq += w.get(dd, k) * w.get(dd, k);
            }
            let nrm = sq.sqrt();
            if nrm > 2.0 {
                for dd in 0..d {
                    w.set(dd, k, w.get(dd, k) * 2.0 / nrm);
                }
            }
        }
        let labels: Vec<usize> = (0..n)
            .map(|_| rng.next_below(classes as u64) as usize)
            .collect();
        let report = prop1_bound(&x, &v, &labels, &w).unwrap();
        let slack = report.lhs - report.rhs;
        let fail = if report.holds {
            None
        } else {
            Some(format!("instance {i}: lhs {} rhs {} slack {slack}", report.lhs, report.rhs))
        };
        (slack, fail)
    });
    let mut min_slack = f64::INFINITY;
    let mut failure_details = Vec::new();
    for (slack, fail) in results {
        min_slack = min_slack.min(slack);
        if let Some(f) = fail {
            failure_details.push(f);
        }
    }
    // exact equality at the zero classifier
    let mut rng = root.substream(u64::MAX);
    let mut x = Mat::zeros(5, 4);
    rng.fill_normal(x.data_mut());
    let mut v = Mat::zeros(5, 4);
    rng.fill_normal(v.data_mut());
    let w = Mat::zeros(4, 6);
    let zero_case = prop1_bound(&x, &v, &[0, 1, 2, 3, 4], &w).unwrap();
    if (zero_case.lhs - zero_case.rhs).abs() > 1e-12 {
        failure_details.push(format!(
            "zero-classifier equality violated: lhs {} rhs {}",
            zero_case.lhs, zero_case.rhs
        ));
    }
    let failures = failure_details.len();
    SuiteReport {
        name: "implicit-loss lower bound".into(),
        trials: trials + 1,
        checks: trials + 1,
        failures,
        // for the bound the interesting scalar is the smallest slack seen
        max_error: -min_slack,
        passed: failures == 0,
        failure_details,
    }
}

/// Hinge bracketing of the explicit loss on random batches, plus the
/// dominant-negative construction where the exact term must collapse onto
/// the interval's lower end.
pub fn hinge_suite(seed: u64, batches: usize, policy: ExecPolicy) -> SuiteReport {
    let root = Rng::new(seed).stream("hinge-suite");
    let results: Vec<(usize, f64, Vec<String>)> = map_indices(policy, batches, |i| {
        let mut rng = root.substream(i as u64);
        let n = 2 + rng.next_below(9) as usize;
        let d = 3 + rng.next_below(5) as usize;
        let margin = 1.0 + 4.0 * rng.next_f64();
        let mut x = Mat::zeros(n, d);
        rng.fill_normal(x.data_mut());
        let mut v = Mat::zeros(n, d);
        rng.fill_normal(v.data_mut());
        let labels: Vec<usize> = (0..n).collect();
        let report = hinge_diagnostic(&x, &v, &labels, margin).unwrap();
        let mut failures = Vec::new();
        if report.violations > 0 {
            failures.push(format!("batch {i}: {} interval violations", report.violations));
        }
        let mut checks = 2 * n;
        // dominant-negative construction: orthonormal gallery rows, anchor 0
        // scaled onto gallery row 1, so the gap to row 1 exceeds every other
        // gap by exactly the anchor magnitude
        if n >= 3 {
            let mut xd = Mat::zeros(n, n);
            for j in 0..n {
                xd.set(j, j, 1.0);
            }
            let mut vd = Mat::zeros(n, n);
            for j in 0..n {
                vd.set(j, j, 0.5 + rng.next_f64());
            }
            let magnitude = DOMINANCE_GAP + 5.0;
            vd.row_mut(0).fill(0.0);
            vd.set(0, 1, magnitude);
            let rep = hinge_diagnostic(&xd, &vd, &labels, margin).unwrap();
            let first = &rep.samples[0][0];
            checks += 1;
            // gaps from anchor 0: `magnitude` to row 1, exactly 0 elsewhere
            let dominance_margin = first.delta;
            if dominance_margin < DOMINANCE_GAP {
                failures.push(format!(
                    "batch {i}: dominance construction too weak ({dominance_margin})"
                ));
            } else if (first.exact - first.lower).abs() > DOMINANCE_TOLERANCE {
                failures.push(format!(
                    "batch {i}: dominant term {} not at lower end {}",
                    first.exact, first.lower
                ));
            }
            if rep.violations > 0 {
                failures.push(format!("batch {i}: dominance batch has violations"));
            }
        }
        // widest relative excursion of exact outside [lower, upper]
        let mut worst = 0.0f64;
        for s in &report.samples {
            for dirn in s {
                worst = worst.max(dirn.lower - dirn.exact).max(dirn.exact - dirn.upper);
            }
        }
        (checks, worst, failures)
    });
    let mut checks = 0;
    let mut max_error = 0.0f64;
    let mut failure_details = Vec::new();
    for (c, e, f) in results {
        checks += c;
        max_error = max_error.max(e);
        failure_details.extend(f);
    }
    let failures = failure_details.len();
    SuiteReport {
        name: "hinge bracketing".into(),
        trials: batches,
        checks,
        failures,
        max_error,
        passed: failures == 0,
        failure_details,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_suite_passes_quickly() {
        let report = grad_suite(7, 4, 10, ExecPolicy::Auto);
        assert!(report.passed, "{:?}", report.failure_details);
        assert!(report.max_error < GRAD_TOLERANCE);
        assert_eq!(report.checks, 4 * 3 * 10);
    }

    #[test]
    fn bound_suite_passes() {
        let report = bound_suite(8, 100, ExecPolicy::Auto);
        assert!(report.passed, "{:?}", report.failure_details);
    }

    #[test]
    fn hinge_suite_passes() {
        let report = hinge_suite(9, 25, ExecPolicy::Auto);
        assert!(report.passed, "{:?}", report.failure_details);
    }

    #[test]
    fn suites_deterministic_across_policies() {
        let a = bound_suite(10, 50, ExecPolicy::Auto);
        let b = bound_suite(10, 50, ExecPolicy::Sequential);
        assert_eq!(a.max_error, b.max_error);
        let a = grad_suite(11, 2, 5, ExecPolicy::Auto);
        let b = grad_suite(11, 2, 5, ExecPolicy::Sequential);
        assert_eq!(a.max_error, b.max_error);
    }

    #[test]
    fn coordinate_round_trip() {
        let dims = EncoderDims {
            obs_dim: 3,
            hidden_dim: 4,
            embed_dim: 2,
            classes: 5,
        };
        let mut p = EncoderParams::init(dims, &mut Rng::new(1));
        let count = coordinate_count(&p);
        assert_eq!(
            count,
            2 * (4 * 3 + 4 + 2 * 4 + 2) + 2 * 5
        );
        // marking every coordinate touches every tensor entry exactly once
        for i in 0..count {
            *coordinate_mut(&mut p, i) = i as f64;
        }
        let mut seen = std::collections::BTreeSet::new();
        for (_, t) in p.tensors() {
            for v in t.data() {
                seen.insert(*v as usize);
            }
        }
        for b in p.face.l1.b.iter().chain(&p.face.l2.b).chain(&p.voice.l1.b).chain(&p.voice.l2.b) {
            seen.insert(*b as usize);
        }
        assert_eq!(seen.len(), count);
    }
}
