//! Finite-difference verification of every analytic gradient in the
//! crate: the supervised losses, the contrastive losses (through the row
//! normalization the trainers use), the joint combination, and the full
//! model backward pass including the meta path.
//!
//! Each check runs seeded random small instances (batch at most 8, at
//! most 5 classes) and reports the worst relative error in global L2
//! norm against central differences at [`crate::tolerances::FD_STEP`].

use crate::contrastive::{
    backprop_row_normalization, info_nce, joint_loss, nt_xent, symmetrized_ctr, JointConfig,
};
use crate::losses::{
    arcface, compensation_factor, cross_entropy, label_smoothing_ce, mitigation_factor, seesaw,
    soft_target_ce, ArcfaceConfig, SeesawConfig, SeesawState,
};
use crate::model::{
    backward, backward_encoder, encode, forward, head_backward, head_forward, ModelConfig,
    ModelParams, ParamSet,
};
use crate::numerics::{l2_normalize_rows, softmax_rows, Matrix, SeededRng};
use crate::tolerances::{FD_STEP, GRAD_NORM_FLOOR, GRAD_REL};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl GradCheckReport {
    fn new(name: &'static str, trials: usize, max_rel_err: f64) -> Self {
        GradCheckReport {
            name,
            trials,
            max_rel_err,
            pass: max_rel_err < GRAD_REL,
        }
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} over {} trials, max relative error {:.3e} (tolerance {:.0e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.max_rel_err,
            GRAD_REL,
        )
    }
}

/// Central finite difference of `f` at `x`, one entry per coordinate.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut work = x.to_vec();
    for i in 0..x.len() {
        work[i] = x[i] + FD_STEP;
        let plus = f(&work);
        work[i] = x[i] - FD_STEP;
        let minus = f(&work);
        work[i] = x[i];
        out.push((plus - minus) / (2.0 * FD_STEP));
    }
    out
}

/// Relative error between two gradient vectors in global L2 norm.
pub fn relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    let diff: f64 = analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(GRAD_NORM_FLOOR)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.next_gaussian()).collect(),
    )
    .expect("finite")
}

fn random_labels(n: usize, classes: usize, rng: &mut SeededRng) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes as u64) as usize).collect()
}

fn small_sizes(rng: &mut SeededRng) -> (usize, usize) {
    (1 + rng.below(8) as usize, 2 + rng.below(4) as usize)
}

pub fn check_soft_target_ce(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(seed).child("gc-stce");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, c) = small_sizes(&mut rng);
        let logits = random_matrix(n, c, &mut rng);
        let mut targets = Matrix::zeros(n, c);
        for i in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| rng.next_f64() + 0.05).collect();
            let sum: f64 = raw.iter().sum();
            for (j, v) in raw.iter().enumerate() {
                targets.set(i, j, v / sum);
            }
        }
        let res = soft_target_ce(&logits, &targets).expect("valid instance");
        let fd = central_diff(
            |z| {
                soft_target_ce(
                    &Matrix::from_vec(n, c, z.to_vec()).expect("finite"),
                    &targets,
                )
                .expect("valid")
                .loss
            },
            logits.data(),
        );
        worst = worst.max(relative_error(res.grad_logits.data(), &fd));
    }
    GradCheckReport::new("soft_target_ce", trials, worst)
}

pub fn check_label_smoothing(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(seed).child("gc-ls");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, c) = small_sizes(&mut rng);
        let logits = random_matrix(n, c, &mut rng);
        let labels = random_labels(n, c, &mut rng);
        let eps = 0.05 + 0.3 * rng.next_f64();
        let res = label_smoothing_ce(&logits, &labels, eps).expect("valid");
        let fd = central_diff(
            |z| {
                label_smoothing_ce(
                    &Matrix::from_vec(n, c, z.to_vec()).expect("finite"),
                    &labels,
                    eps,
                )
                .expect("valid")
                .loss
            },
            logits.data(),
        );
        worst = worst.max(relative_error(res.grad_logits.data(), &fd));
    }
    GradCheckReport::new("label_smoothing_ce", trials, worst)
}

pub fn check_arcface(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(seed).child("gc-arc");
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let (n, c) = small_sizes(&mut rng);
        let d = 2 + rng.below(4) as usize;
        // Offset keeps rows away from the degenerate-norm reject.
        let mut emb = random_matrix(n, d, &mut rng);
        for v in emb.data_mut() {
            *v += 0.2;
        }
        let w = random_matrix(d, c, &mut rng);
        let labels = random_labels(n, c, &mut rng);
        let cfg = ArcfaceConfig {
            scale_s: 2.0 + 6.0 * rng.next_f64(),
            margin_m: 0.5 * rng.next_f64(),
            ..ArcfaceConfig::default()
        };
        let res = arcface(&emb, &w, &labels, &cfg).expect("valid instance");

        let fd_emb = central_diff(
            |x| {
                arcface(
                    &Matrix::from_vec(n, d, x.to_vec()).expect("finite"),
                    &w,
                    &labels,
                    &cfg,
                )
                .expect("valid")
                .loss
            },
            emb.data(),
        );
        let fd_w = central_diff(
            |x| {
                arcface(
                    &emb,
                    &Matrix::from_vec(d, c, x.to_vec()).expect("finite"),
                    &labels,
                    &cfg,
                )
                .expect("valid")
                .loss
            },
            w.data(),
        );
        let mut analytic = res.grad_embeddings.data().to_vec();
        analytic.extend_from_slice(res.grad_weights.data());
        let mut fd = fd_emb;
        fd.extend_from_slice(&fd_w);
        let err = relative_error(&analytic, &fd);
        debug_assert!(err.is_finite(), "trial {trial}");
        worst = worst.max(err);
    }
    GradCheckReport::new("arcface", trials, worst)
}

pub fn check_seesaw(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(seed).child("gc-seesaw");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, c) = small_sizes(&mut rng);
        let logits = random_matrix(n, c, &mut rng);
        let labels = random_labels(n, c, &mut rng);
        let cfg = SeesawConfig::default();
        let mut state =
            SeesawState::from_counts((0..c).map(|_| rng.below(60)).collect());
        let mut frozen = state.clone();
        let res = seesaw(&logits, &labels, &mut state, &cfg).expect("valid instance");

        // The rescaling factors are stop-gradient constants: freeze them
        // from the unperturbed logits, then differentiate the rescaled
        // cross entropy as a pure function of z.
        frozen.observe(&labels);
        let sigma = softmax_rows(&logits).expect("finite");
        let mut s_table = vec![1.0f64; n * c];
        for i in 0..n {
            let y = labels[i];
            for j in 0..c {
                if j != y {
                    s_table[i * c + j] = cfg.gamma
                        * mitigation_factor(frozen.counts()[y], frozen.counts()[j], cfg.p)
                        * compensation_factor(sigma.get(i, y), sigma.get(i, j), cfg.q);
                }
            }
        }
        let frozen_loss = |z: &[f64]| -> f64 {
            let mut total = 0.0;
            for i in 0..n {
                let y = labels[i];
                let mut denom = 0.0;
                for j in 0..c {
                    denom += s_table[i * c + j] * (z[i * c + j] - z[i * c + y]).exp();
                }
                total += denom.ln();
            }
            total / n as f64
        };
        let fd = central_diff(frozen_loss, logits.data());
        worst = worst.max(relative_error(res.grad_logits.data(), &fd));
    }
    GradCheckReport::new("seesaw", trials, worst)
}

pub fn check_info_nce(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(seed).child("gc-nce");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let nq = 1 + rng.below(4) as usize;
        let nk = 2 + rng.below(5) as usize;
        let d = 2 + rng.below(4) as usize;
        let mut q_raw = random_matrix(nq, d, &mut rng);
        for v in q_raw.data_mut() {
            *v += 0.2;
        }
        let mut k_raw = random_matrix(nk, d, &mut rng);
        for v in k_raw.data_mut() {
            *v += 0.2;
        }
        let positives = random_labels(nq, nk, &mut rng);
        let tau = 0.25;
        let normalize = |m: &Matrix| l2_normalize_rows(m, 1e-12).matrix;

        let res = info_nce(&normalize(&q_raw), &normalize(&k_raw), &positives, tau)
            .expect("valid instance");
        let mut analytic = backprop_row_normalization(&q_raw, &res.grad_queries)
            .data()
            .to_vec();
        analytic
            .extend_from_slice(backprop_row_normalization(&k_raw, &res.grad_keys).data());

        let loss_at = |qd: &[f64], kd: &[f64]| {
            info_nce(
                &normalize(&Matrix::from_vec(nq, d, qd.to_vec()).expect("finite")),
                &normalize(&Matrix::from_vec(nk, d, kd.to_vec()).expect("finite")),
                &positives,
                tau,
            )
            .expect("valid")
            .loss
        };
        let mut fd = central_diff(|qd| loss_at(qd, k_raw.data()), q_raw.data());
        fd.extend(central_diff(|kd| loss_at(q_raw.data(), kd), k_raw.data()));
        worst = worst.max(relative_error(&analytic, &fd));
    }
    GradCheckReport::new("info_nce", trials, worst)
}

pub fn check_symmetrized_ctr(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(seed).child("gc-ctr");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = 2 + rng.below(4) as usize;
        let d = 2 + rng.below(4) as usize;
        let mut q1_raw = random_matrix(n, d, &mut rng);
        let mut q2_raw = random_matrix(n, d, &mut rng);
        for v in q1_raw.data_mut() {
            *v += 0.2;
        }
        for v in q2_raw.data_mut() {
            *v += 0.2;
        }
        let normalize = |m: &Matrix| l2_normalize_rows(m, 1e-12).matrix;
        let k1 = normalize(&random_matrix(n, d, &mut rng));
        let k2 = normalize(&random_matrix(n, d, &mut rng));
        let tau = 0.25;

        let res = symmetrized_ctr(&normalize(&q1_raw), &normalize(&q2_raw), &k1, &k2, tau)
            .expect("valid instance");
        let mut analytic = backprop_row_normalization(&q1_raw, &res.grad_q1)
            .data()
            .to_vec();
        analytic.extend_from_slice(backprop_row_normalization(&q2_raw, &res.grad_q2).data());

        let loss_at = |a: &[f64], b: &[f64]| {
            symmetrized_ctr(
                &normalize(&Matrix::from_vec(n, d, a.to_vec()).expect("finite")),
                &normalize(&Matrix::from_vec(n, d, b.to_vec()).expect("finite")),
                &k1,
                &k2,
                tau,
            )
            .expect("valid")
            .loss
        };
        let mut fd = central_diff(|a| loss_at(a, q2_raw.data()), q1_raw.data());
        fd.extend(central_diff(|b| loss_at(q1_raw.data(), b), q2_raw.data()));
        worst = worst.max(relative_error(&analytic, &fd));
    }
    GradCheckReport::new("symmetrized_ctr", trials, worst)
}

fn small_model_config(rng: &mut SeededRng, arcface_mode: bool) -> ModelConfig {
    ModelConfig {
        feature_dim: 2 + rng.below(3) as usize,
        num_meta: 2,
        meta_dim: 2,
        hidden: if rng.below(2) == 0 { vec![4] } else { vec![4, 3] },
        embed_dim: 2 + rng.below(3) as usize,
        num_classes: 2 + rng.below(4) as usize,
        arcface_mode,
        arcface_scale: 4.0,
        proj_hidden: 3,
        proj_dim: 2 + rng.below(2) as usize,
        pred_hidden: 3,
    }
}

fn random_inputs(
    cfg: &ModelConfig,
    rng: &mut SeededRng,
) -> (Matrix, Matrix, Vec<usize>) {
    let n = 1 + rng.below(4) as usize;
    let features = random_matrix(n, cfg.feature_dim, rng);
    let mut meta = Matrix::zeros(n, cfg.num_meta);
    for i in 0..n {
        meta.set(i, rng.below(cfg.num_meta as u64) as usize, 1.0);
    }
    let labels = random_labels(n, cfg.num_classes, rng);
    (features, meta, labels)
}

fn flatten_params(set: &ParamSet) -> Vec<f64> {
    let mut out = Vec::new();
    for (_, m) in set.named() {
        out.extend_from_slice(m.data());
    }
    out
}

fn load_params(set: &mut ParamSet, flat: &[f64]) {
    let mut cursor = 0;
    for (_, m) in set.named_mut() {
        let len = m.data().len();
        m.data_mut().copy_from_slice(&flat[cursor..cursor + len]);
        cursor += len;
    }
    assert_eq!(cursor, flat.len());
}

/// Full model backward pass (encoder, meta path, classifier or angular
/// head) against finite differences over every parameter.
pub fn check_model_backward(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(seed).child("gc-model");
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let arcface_mode = trial % 2 == 1;
        let cfg = small_model_config(&mut rng, arcface_mode);
        let params = ModelParams::init(&cfg, &mut rng);
        let (features, meta, labels) = random_inputs(&cfg, &mut rng);

        let loss_of = |p: &ModelParams| -> f64 {
            if p.config.arcface_mode {
                let cache = encode(p, &features, &meta).expect("dims");
                arcface(
                    cache.embedding(),
                    &p.set.classifier_weight,
                    &labels,
                    &ArcfaceConfig {
                        scale_s: p.config.arcface_scale,
                        margin_m: 0.3,
                        ..ArcfaceConfig::default()
                    },
                )
                .expect("valid")
                .loss
            } else {
                let fwd = forward(p, &features, &meta).expect("dims");
                cross_entropy(&fwd.logits, &labels).expect("valid").loss
            }
        };

        let analytic_set = if arcface_mode {
            let cache = encode(&params, &features, &meta).expect("dims");
            let res = arcface(
                cache.embedding(),
                &params.set.classifier_weight,
                &labels,
                &ArcfaceConfig {
                    scale_s: cfg.arcface_scale,
                    margin_m: 0.3,
                    ..ArcfaceConfig::default()
                },
            )
            .expect("valid");
            let mut grads = ParamSet::zeros_like(&params.set);
            grads.classifier_weight.add_scaled(&res.grad_weights, 1.0);
            backward_encoder(&params, &cache, &res.grad_embeddings, &mut grads);
            grads
        } else {
            let fwd = forward(&params, &features, &meta).expect("dims");
            let ce = cross_entropy(&fwd.logits, &labels).expect("valid");
            backward(&params, &fwd.cache, &ce.grad_logits).expect("dims")
        };
        let analytic = flatten_params(&analytic_set);

        let flat = flatten_params(&params.set);
        let mut probe = params.clone();
        let fd = central_diff(
            |x| {
                load_params(&mut probe.set, x);
                loss_of(&probe)
            },
            &flat,
        );
        worst = worst.max(relative_error(&analytic, &fd));
    }
    GradCheckReport::new("model_backward", trials, worst)
}

/// Joint loss on a small model: supervised cross entropy plus the 2N-view
/// contrastive loss on projections, combined with the default weights, all
/// against finite differences over every parameter.
pub fn check_joint(trials: usize, seed: u64) -> GradCheckReport {
    let mut rng = SeededRng::new(seed).child("gc-joint");
    let jc = JointConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let cfg = small_model_config(&mut rng, false);
        let params = ModelParams::init(&cfg, &mut rng);
        let (features, meta, labels) = random_inputs(&cfg, &mut rng);
        // Two deterministic views of the same batch stand in for the
        // augmented pair (the FD oracle recomputes the same thing).
        let mut view2 = features.clone();
        for v in view2.data_mut() {
            *v = *v * 1.1 + 0.05;
        }
        let tau = 0.25;

        let joint_of = |p: &ModelParams| -> f64 {
            let fwd = forward(p, &features, &meta).expect("dims");
            let sup = cross_entropy(&fwd.logits, &labels).expect("valid").loss;
            let c1 = encode(p, &features, &meta).expect("dims");
            let (p1, _) = head_forward(&p.set.projection, c1.embedding());
            let c2 = encode(p, &view2, &meta).expect("dims");
            let (p2, _) = head_forward(&p.set.projection, c2.embedding());
            let n = features.rows();
            let mut stacked = Matrix::zeros(2 * n, p1.cols());
            for i in 0..n {
                for d in 0..p1.cols() {
                    stacked.set(2 * i, d, p1.get(i, d));
                    stacked.set(2 * i + 1, d, p2.get(i, d));
                }
            }
            let normed = l2_normalize_rows(&stacked, 1e-12).matrix;
            let selfsup = nt_xent(&normed, tau).expect("valid").loss;
            jc.lambda1 * sup + jc.lambda2 * selfsup
        };

        // Analytic joint gradient via the same path the trainer takes.
        let fwd = forward(&params, &features, &meta).expect("dims");
        let ce = cross_entropy(&fwd.logits, &labels).expect("valid");
        let g_sup = backward(&params, &fwd.cache, &ce.grad_logits).expect("dims");

        let c1 = encode(&params, &features, &meta).expect("dims");
        let (p1, pc1) = head_forward(&params.set.projection, c1.embedding());
        let c2 = encode(&params, &view2, &meta).expect("dims");
        let (p2, pc2) = head_forward(&params.set.projection, c2.embedding());
        let n = features.rows();
        let mut stacked = Matrix::zeros(2 * n, p1.cols());
        for i in 0..n {
            for d in 0..p1.cols() {
                stacked.set(2 * i, d, p1.get(i, d));
                stacked.set(2 * i + 1, d, p2.get(i, d));
            }
        }
        let normed = l2_normalize_rows(&stacked, 1e-12).matrix;
        let nt = nt_xent(&normed, tau).expect("valid");
        let g_stacked = backprop_row_normalization(&stacked, &nt.grad);
        let mut g1 = Matrix::zeros(n, p1.cols());
        let mut g2 = Matrix::zeros(n, p1.cols());
        for i in 0..n {
            for d in 0..p1.cols() {
                g1.set(i, d, g_stacked.get(2 * i, d));
                g2.set(i, d, g_stacked.get(2 * i + 1, d));
            }
        }
        let mut g_self = ParamSet::zeros_like(&params.set);
        let ge1 = head_backward(&params.set.projection, &pc1, &g1, &mut g_self.projection);
        backward_encoder(&params, &c1, &ge1, &mut g_self);
        let ge2 = head_backward(&params.set.projection, &pc2, &g2, &mut g_self.projection);
        backward_encoder(&params, &c2, &ge2, &mut g_self);

        let (_, combined) =
            joint_loss(ce.loss, &g_sup, nt.loss, &g_self, &jc).expect("valid");
        let analytic = flatten_params(&combined);

        let flat = flatten_params(&params.set);
        let mut probe = params.clone();
        let fd = central_diff(
            |x| {
                load_params(&mut probe.set, x);
                joint_of(&probe)
            },
            &flat,
        );
        worst = worst.max(relative_error(&analytic, &fd));
    }
    GradCheckReport::new("joint_loss", trials, worst)
}

/// Run every gradient check with `trials` instances each.
pub fn run_full_suite(trials: usize, seed: u64) -> Vec<GradCheckReport> {
    vec![
        check_soft_target_ce(trials, seed),
        check_label_smoothing(trials, seed),
        check_arcface(trials, seed),
        check_seesaw(trials, seed),
        check_info_nce(trials, seed),
        check_symmetrized_ctr(trials, seed),
        check_joint(trials, seed),
        check_model_backward(trials, seed),
    ]
}
