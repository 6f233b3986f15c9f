//! Randomized self-check harness: attention kernels against the masked
//! joint oracle, and analytic gradients against finite differences.
//! Every failure carries the trial seed so the exact case replays.

use std::collections::BTreeMap;

use crate::attention::{
    cross_frame_attention, cross_frame_attention_backward, cross_view_attention,
    cross_view_attention_backward, intra_view_attention, intra_view_attention_backward,
    joint_attention_oracle, AttnMask, TokenGrid, ViewAdjacency,
};
use crate::denoiser::{
    loss_gradient, training_loss, DenoiserConfig, DenoiserWeights, Mode, TrainBatch,
};
use crate::diffusion::{LatentShape, LatentVideo, NoiseSchedule};
use crate::rng::SeededRng;

/// Max-abs tolerance for kernel-vs-oracle agreement.
pub const ATTN_TOL: f64 = 1e-6;
/// Step and relative tolerance for attention finite differences.
pub const ATTN_FD_STEP: f64 = 1e-5;
pub const ATTN_FD_TOL: f64 = 1e-4;
/// Step and relative tolerance for training-loss finite differences.
pub const GRAD_FD_STEP: f64 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-3;

/// Test hook: deliberately corrupts one kernel so the checker itself
/// can be validated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    PerturbIntraKernel,
}

#[derive(Debug, Clone)]
pub struct CheckFailure {
    pub kind: String,
    pub seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub trials: usize,
    pub max_kernel_dev: f64,
    pub max_grad_rel: f64,
    pub failures: Vec<CheckFailure>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn max_abs_diff(a: &TokenGrid, b: &TokenGrid) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Runs `trials` randomized kernel-vs-oracle comparisons plus gradient
/// finite-difference probes. Trial k uses seed base_seed + k; dims vary
/// over t <= 4, v <= 4, s <= 9, c <= 8.
pub fn attention_oracle_suite(trials: usize, base_seed: u64, fault: Option<Fault>) -> OracleReport {
    assert!(trials >= 1);
    let mut report = OracleReport {
        trials,
        max_kernel_dev: 0.0,
        max_grad_rel: 0.0,
        failures: Vec::new(),
    };
    for trial in 0..trials {
        let seed = base_seed.wrapping_add(trial as u64);
        run_oracle_trial(seed, fault, &mut report);
    }
    report
}

/// Replays a single trial; used by the failure-seed path.
pub fn run_oracle_trial(seed: u64, fault: Option<Fault>, report: &mut OracleReport) {
    let rng = SeededRng::new(seed);
    let t = 1 + rng.uniform_usize("dims/t", 4);
    let v = 1 + rng.uniform_usize("dims/v", 4);
    let s = 1 + rng.uniform_usize("dims/s", 9);
    let c = 1 + rng.uniform_usize("dims/c", 8);
    let q = TokenGrid::random(&rng, "q", t, v, s, c);
    let k = TokenGrid::random(&rng, "k", t, v, s, c);
    let val = TokenGrid::random(&rng, "v", t, v, s, c);
    let adj = ViewAdjacency::cyclic(v);

    let record_dev = |kind: &str, dev: f64, report: &mut OracleReport| {
        report.max_kernel_dev = report.max_kernel_dev.max(dev);
        if dev > ATTN_TOL {
            report.failures.push(CheckFailure {
                kind: kind.to_string(),
                seed,
                detail: format!("deviation {dev:.3e} exceeds {ATTN_TOL:.0e} (t={t} v={v} s={s} c={c})"),
            });
        }
    };

    // Intra-view vs oracle.
    let mut out = intra_view_attention(&q, &k, &val).unwrap();
    if fault == Some(Fault::PerturbIntraKernel) {
        out.data_mut()[0] += 1e-3;
    }
    let oracle = joint_attention_oracle(&q, &k, &val, &AttnMask::intra_view(t, v, s)).unwrap();
    record_dev("intra-view", max_abs_diff(&out, &oracle), report);

    // Cross-view vs oracle; a single view must pass queries through.
    let out = cross_view_attention(&q, &k, &val, &adj).unwrap();
    if v == 1 {
        record_dev("cross-view-identity", max_abs_diff(&out, &q), report);
    } else {
        let oracle =
            joint_attention_oracle(&q, &k, &val, &AttnMask::cross_view(t, v, s, &adj)).unwrap();
        record_dev("cross-view", max_abs_diff(&out, &oracle), report);
    }

    // Cross-frame vs oracle.
    let out = cross_frame_attention(&q, &k, &val).unwrap();
    let oracle = joint_attention_oracle(&q, &k, &val, &AttnMask::cross_frame(t, v, s)).unwrap();
    record_dev("cross-frame", max_abs_diff(&out, &oracle), report);

    // Gradient probes on one kernel per trial: L = sum(out * g).
    let g = TokenGrid::random(&rng, "g", t, v, s, c);
    let kernel = rng.uniform_usize("grad/kernel", 3);
    if kernel == 1 && v == 1 {
        return; // identity path carries no kernel gradient to probe
    }
    let forward = |q: &TokenGrid, k: &TokenGrid, val: &TokenGrid| -> TokenGrid {
        match kernel {
            0 => intra_view_attention(q, k, val).unwrap(),
            1 => cross_view_attention(q, k, val, &adj).unwrap(),
            _ => cross_frame_attention(q, k, val).unwrap(),
        }
    };
    let (dq, dk, dv) = match kernel {
        0 => intra_view_attention_backward(&q, &k, &val, &g).unwrap(),
        1 => cross_view_attention_backward(&q, &k, &val, &adj, &g).unwrap(),
        _ => cross_frame_attention_backward(&q, &k, &val, &g).unwrap(),
    };
    let loss = |q: &TokenGrid, k: &TokenGrid, val: &TokenGrid| -> f64 {
        forward(q, k, val)
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let names = ["q", "k", "v"];
    for (which, analytic_grid) in [&dq, &dk, &dv].into_iter().enumerate() {
        for probe in 0..2 {
            let idx = rng.uniform_usize(&format!("grad/{which}/{probe}"), q.data().len());
            let analytic = analytic_grid.data()[idx];
            let perturb = |delta: f64| -> f64 {
                let mut qp = q.clone();
                let mut kp = k.clone();
                let mut vp = val.clone();
                match which {
                    0 => qp.data_mut()[idx] += delta,
                    1 => kp.data_mut()[idx] += delta,
                    _ => vp.data_mut()[idx] += delta,
                }
                loss(&qp, &kp, &vp)
            };
            let numeric = (perturb(ATTN_FD_STEP) - perturb(-ATTN_FD_STEP)) / (2.0 * ATTN_FD_STEP);
            let rel = (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-6);
            report.max_grad_rel = report.max_grad_rel.max(rel);
            if rel > ATTN_FD_TOL {
                report.failures.push(CheckFailure {
                    kind: format!("attention-grad-{}", names[which]),
                    seed,
                    detail: format!(
                        "kernel {kernel}: analytic {analytic:.6e} vs numeric {numeric:.6e} (rel {rel:.3e})"
                    ),
                });
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub checks: Vec<GradCheck>,
    pub max_rel: f64,
    pub failures: Vec<CheckFailure>,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn grad_check_config() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 8,
        levels: 2,
        blocks_per_level: 1,
        attn_width: 8,
        heads: 2,
        latent_channels: 2,
        cond_channels: 2,
        control_channels: 19,
        text_dim: 4,
        time_dim: 8,
    }
}

/// One parameter per layer family, guaranteeing the sweep touches every
/// kind of trainable tensor in the network.
fn family_coverage() -> Vec<&'static str> {
    vec![
        "stem.w",
        "stem.b",
        "enc0.blk0.conv.w",
        "enc0.blk0.conv.b",
        "enc0.blk0.emb.w",
        "enc0.blk0.emb.b",
        "enc0.blk0.gn.gamma",
        "enc0.blk0.gn.beta",
        "enc0.blk0.intra.wq.w",
        "enc0.blk0.intra.bk",
        "enc0.blk0.intra.wv.w",
        "enc0.blk0.intra.wo.w",
        "enc0.blk0.intra.bo",
        "enc0.blk0.xview.wk.w",
        "enc0.blk0.xview.bv",
        "enc0.blk0.xview.wo.w",
        "enc0.blk0.xframe.wq.w",
        "enc0.blk0.xframe.bq",
        "enc0.blk0.xframe.wo.w",
        "enc0.blk0.ff1.w",
        "enc0.blk0.ff1.b",
        "enc0.blk0.ff2.w",
        "enc0.blk0.ff2.b",
        "down0.w",
        "down0.b",
        "enc1.blk0.conv.w",
        "enc1.blk0.intra.wk.w",
        "dec1.blk0.gn.gamma",
        "dec1.blk0.xframe.wv.w",
        "up1.w",
        "up1.b",
        "dec0.blk0.conv.w",
        "dec0.blk0.ff2.w",
        "head.w",
        "head.b",
        "text.w",
        "text.b",
        "ctrl.adapter.w",
        "ctrl.adapter.b",
        "ctrl.stem.w",
        "ctrl.enc0.blk0.conv.w",
        "ctrl.enc0.blk0.intra.wq.w",
        "ctrl.down0.w",
        "ctrl.enc1.blk0.ff1.w",
        "ctrl.zero0.w",
        "ctrl.zero0.b",
        "ctrl.zero1.w",
        "ctrl.zero1.b",
    ]
}

/// Central finite differences on the training loss for at least
/// `n_params` sampled parameters across every layer family.
pub fn denoiser_gradient_suite(n_params: usize, seed: u64) -> GradientReport {
    let cfg = grad_check_config();
    let rng = SeededRng::new(seed);
    let w = DenoiserWeights::init(&cfg, &rng.child("w"));
    let shape = LatentShape {
        views: 2,
        frames: 2,
        height: 4,
        pano_width: 8,
        channels: 2,
    };
    let x = LatentVideo::seeded_noise(shape, &rng, "x");
    let z1 = x.frame_tensor(0);
    let batch = TrainBatch {
        x,
        control: Some(
            rng.normal_tensor("ctrl", &[shape.frames, 8, 16, 19])
                .map(f64::abs),
        ),
        text: rng.normal_tensor("text", &[cfg.text_dim]),
        z1: Some(z1),
    };
    let sched = NoiseSchedule::cosine(100);
    let lambda = 0.05;
    let (_, grads) = loss_gradient(&w, &batch, &sched, lambda, &rng, Mode::Video).unwrap();

    let mut picks: Vec<String> = family_coverage().into_iter().map(String::from).collect();
    let all_names: Vec<&String> = w.params.keys().collect();
    let mut extra = 0usize;
    while picks.len() < n_params {
        let idx = rng.uniform_usize(&format!("pick/{extra}"), all_names.len());
        picks.push(all_names[idx].clone());
        extra += 1;
    }

    let mut report = GradientReport {
        checks: Vec::new(),
        max_rel: 0.0,
        failures: Vec::new(),
    };
    for (i, name) in picks.iter().enumerate() {
        let len = w.params[name].len();
        let idx = rng.uniform_usize(&format!("idx/{i}"), len);
        let analytic = grads[name].data()[idx];
        let eval = |delta: f64| -> f64 {
            let mut wp = w.clone();
            wp.params.get_mut(name).unwrap().data_mut()[idx] += delta;
            training_loss(&wp, &batch, &sched, lambda, &rng, Mode::Video).unwrap()
        };
        let numeric = (eval(GRAD_FD_STEP) - eval(-GRAD_FD_STEP)) / (2.0 * GRAD_FD_STEP);
        let rel = (analytic - numeric).abs() / (analytic.abs() + 1e-6);
        report.max_rel = report.max_rel.max(rel);
        if rel > GRAD_REL_TOL {
            report.failures.push(CheckFailure {
                kind: "denoiser-grad".to_string(),
                seed,
                detail: format!(
                    "{name}[{idx}]: analytic {analytic:.6e} vs numeric {numeric:.6e} (rel {rel:.3e})"
                ),
            });
        }
        report.checks.push(GradCheck {
            name: name.clone(),
            index: idx,
            analytic,
            numeric,
            rel,
        });
    }
    report
}

/// Counts failures per kind, for compact reporting.
pub fn failure_histogram(failures: &[CheckFailure]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for f in failures {
        *h.entry(f.kind.clone()).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_suite_passes_clean() {
        let report = attention_oracle_suite(30, 424242, None);
        assert!(report.passed(), "failures: {:?}", report.failures);
        assert!(report.max_kernel_dev < ATTN_TOL);
        assert!(report.max_grad_rel < ATTN_FD_TOL);
    }

    #[test]
    fn injected_fault_is_caught() {
        let report = attention_oracle_suite(5, 7, Some(Fault::PerturbIntraKernel));
        assert!(!report.passed());
        assert!(report.failures.iter().all(|f| f.kind == "intra-view"));
    }

    #[test]
    fn failure_seed_replays_identically() {
        let full = attention_oracle_suite(5, 7, Some(Fault::PerturbIntraKernel));
        let failing_seed = full.failures[0].seed;
        let mut replay = OracleReport {
            trials: 1,
            max_kernel_dev: 0.0,
            max_grad_rel: 0.0,
            failures: Vec::new(),
        };
        run_oracle_trial(failing_seed, Some(Fault::PerturbIntraKernel), &mut replay);
        assert!(!replay.failures.is_empty());
        let orig = full.failures.iter().find(|f| f.seed == failing_seed).unwrap();
        assert_eq!(replay.failures[0].detail, orig.detail);
    }

    #[test]
    fn gradient_suite_covers_families_and_passes() {
        let report = denoiser_gradient_suite(50, 99);
        assert!(report.passed(), "failures: {:?}", report.failures);
        assert!(report.checks.len() >= 50);
        for family in family_coverage() {
            assert!(
                report.checks.iter().any(|c| c.name == family),
                "family {family} not covered"
            );
        }
    }
}
