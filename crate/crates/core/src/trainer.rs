//! Student/teacher training: one iteration runs the clean teacher and
//! student passes, delineates proto-objects from teacher attention,
//! encodes the masked views, evaluates every loss, and applies the AdamW
//! step, teacher EMA and center update.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, Var};
use crate::config::{OptimConfig, RunConfig};
use crate::depth_head::{decode_depth_graph, UPSAMPLE};
use crate::error::{Error, Result};
use crate::ingest::{clip_span, crop_and_augment, sample_clip, FrameClip, FrameSource, GlobalCrop};
use crate::losses::{
    cross_entropy_h_grad, depth_loss, effective_weights, temporal_loss, total_loss, CenterState, DepthFrame,
    LossBundle, Temperatures,
};
use crate::proto::{aggregate, delineate, masked_views, sample_subset, saliency_weights};
use crate::vit::{init_params, Network, NetworkParams, ParamSpec, Taps};

/// Hyper-parameter values for one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub wd: f64,
    pub ema_m: f64,
}

/// Linear warmup then cosine decay for the learning rate, linear weight
/// decay ramp, and cosine teacher momentum ramp toward 1.
pub fn step_schedules(iter: u64, optim: &OptimConfig) -> Schedule {
    let total = optim.total_iters().max(1);
    let last = (total - 1).max(1) as f64;
    let warmup = optim.warmup_iters();
    let i = iter.min(total - 1);
    let lr = if i < warmup {
        optim.base_lr * i as f64 / warmup as f64
    } else {
        let span = (total - 1).saturating_sub(warmup);
        let progress = if span == 0 { 0.0 } else { (i - warmup) as f64 / span as f64 };
        optim.min_lr + (optim.base_lr - optim.min_lr) * (1.0 + (PI * progress).cos()) / 2.0
    };
    let frac = i as f64 / last;
    let wd = optim.wd_start + (optim.wd_end - optim.wd_start) * frac;
    let ema_m = 1.0 - (1.0 - optim.ema_momentum_start) * ((PI * frac).cos() + 1.0) / 2.0;
    Schedule { lr, wd, ema_m }
}

/// `θ' ← m·θ' + (1−m)·θ`.
pub fn ema_update(student: &NetworkParams, teacher: &mut NetworkParams, m: f64) {
    assert_eq!(student.len(), teacher.len());
    for i in 0..student.len() {
        let s = student.value(i);
        teacher
            .value_mut(i)
            .zip_mut_with(s, |t, &v| *t = m * *t + (1.0 - m) * v);
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    /// Number of steps taken.
    pub steps: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        let zeros: Vec<Mat> = (0..params.len()).map(|i| Mat::zeros(params.value(i).dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    /// One decoupled-weight-decay Adam step. `grads[i] == None` counts as a
    /// zero gradient.
    pub fn step(&mut self, params: &mut NetworkParams, specs: &[ParamSpec], grads: &[Option<Mat>], lr: f64, wd: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..params.len() {
            let decay = if specs[i].no_decay { 0.0 } else { wd };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match &grads[i] {
                Some(g) => {
                    ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| ADAM_BETA1 * x);
                    v.mapv_inplace(|x| ADAM_BETA2 * x);
                }
            }
            let p = params.value_mut(i);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let update = (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
                *p -= lr * (update + decay * *p);
            });
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`
/// (disabled when `max_norm ≤ 0`). Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: NetworkParams,
    pub center: CenterState,
}

/// Everything a run needs to continue bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Iterations completed.
    pub iteration: u64,
    pub student: NetworkParams,
    pub teacher: TeacherState,
    pub adam: AdamState,
}

impl TrainState {
    /// Student initialized from `cfg.seed`; the teacher starts as a copy.
    pub fn new(cfg: &RunConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let student = init_params(cfg, &mut rng);
        let teacher = TeacherState {
            params: student.clone(),
            center: CenterState::new(cfg.backbone.out_dim, cfg.distill.center_momentum),
        };
        let adam = AdamState::new(&student);
        Self {
            iteration: 0,
            student,
            teacher,
            adam,
        }
    }
}

/// Randomness for iteration `iter` depends only on `(seed, iter)`, so a
/// resumed run sees the same draws as an unbroken one.
pub fn iteration_rng(seed: u64, iter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter.wrapping_add(1));
    rng
}

/// Draws `batch_size` clips, each from a uniformly chosen source and start.
pub fn sample_batch(sources: &[Box<dyn FrameSource>], cfg: &RunConfig, rng: &mut impl Rng) -> Result<Vec<FrameClip>> {
    if sources.is_empty() {
        return Err(Error::NoData);
    }
    (0..cfg.optim.batch_size)
        .map(|_| {
            let src = &sources[rng.random_range(0..sources.len())];
            let span = clip_span(src.fps(), &cfg.clip);
            if span > src.frame_count() {
                return Err(Error::InsufficientFrames {
                    needed: span,
                    available: src.frame_count(),
                });
            }
            let t0 = rng.random_range(0..=src.frame_count() - span);
            sample_clip(src.as_ref(), t0, &cfg.clip)
        })
        .collect()
}

/// Teacher outputs for one frame.
struct TeacherFrame {
    f1: Vec<f64>,
    f2: Vec<f64>,
    /// `N × D₂` bottleneck features of the masked views.
    z: Option<Mat>,
    weights: Option<Vec<f64>>,
    views: Vec<ndarray::Array3<f64>>,
}

/// Student graph and handles for one frame.
struct StudentFrame {
    graph: Graph,
    f1: Var,
    f2: Var,
    depth: Option<Var>,
    /// Logit handles for the subset heads, in subset order.
    f_sub: Vec<Var>,
    /// Bottleneck handles for every head.
    z_all: Vec<Var>,
}

fn row(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).iter().copied().collect()
}

fn as_row(v: &[f64]) -> Mat {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

fn stack_rows(rows: &[Vec<f64>]) -> Mat {
    let d = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

/// Owns the architecture and runs iterations against a [`TrainState`].
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub net: Network,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Self {
        let net = Network::new(&cfg);
        Self { cfg, net }
    }

    fn teacher_frame(
        &self,
        teacher: &NetworkParams,
        crops: &[GlobalCrop; 2],
        subset: &[usize],
        need_views: bool,
    ) -> Result<TeacherFrame> {
        let (ab, cfg) = (&self.cfg.ablation, &self.cfg);
        let taps = Taps {
            attention: need_views,
            patches: need_views,
            middle: false,
        };
        let mut out = self.net.encode(teacher, std::slice::from_ref(&crops[0].clean), taps)?;
        let first = out.remove(0);
        let f2 = self.net.encode(teacher, std::slice::from_ref(&crops[1].clean), Taps::NONE)?.remove(0).f;
        let mut frame = TeacherFrame {
            f1: first.f,
            f2,
            z: None,
            weights: None,
            views: Vec::new(),
        };
        if !need_views {
            return Ok(frame);
        }
        let attention = first.attention.expect("attention tap requested");
        let e = first.patches.expect("patch tap requested");
        let delineation = delineate(&attention, &e)?;
        frame.views = masked_views(&crops[0].clean, &delineation, self.net.patch_size())?;
        if ab.enable_p {
            frame.weights = Some(saliency_weights(&attention.patch_mass, subset, cfg.proto.tau_w).1);
        }
        if ab.enable_t {
            let z: Vec<Vec<f64>> = self
                .net
                .encode(teacher, &frame.views, Taps::NONE)?
                .into_iter()
                .map(|f| f.z)
                .collect();
            frame.z = Some(stack_rows(&z));
        }
        Ok(frame)
    }

    fn student_frame(
        &self,
        student: &NetworkParams,
        crops: &[GlobalCrop; 2],
        teacher: &TeacherFrame,
        subset: &[usize],
    ) -> Result<StudentFrame> {
        let ab = &self.cfg.ablation;
        let mut g = Graph::new();
        let taps = Taps {
            middle: ab.enable_d,
            ..Taps::NONE
        };
        let v1 = self.net.encode_graph(&mut g, student, &crops[0].student, taps)?;
        let v2 = self.net.encode_graph(&mut g, student, &crops[1].student, Taps::NONE)?;
        let depth = match v1.middle {
            Some(m) => {
                let grid = self.net.grid();
                let mt = g.transpose(m);
                Some(decode_depth_graph(&mut g, student, self.net.decoder(), mt, grid, grid)?)
            }
            None => None,
        };
        let mut f_sub = Vec::new();
        let mut z_all = Vec::new();
        for (n, view) in teacher.views.iter().enumerate() {
            let in_subset = ab.enable_p && subset.contains(&n);
            if !in_subset && !ab.enable_t {
                continue;
            }
            let v = self.net.encode_graph(&mut g, student, view, Taps::NONE)?;
            if in_subset {
                f_sub.push(v.f);
            }
            if ab.enable_t {
                z_all.push(v.z);
            }
        }
        Ok(StudentFrame {
            graph: g,
            f1: v1.f,
            f2: v2.f,
            depth,
            f_sub,
            z_all,
        })
    }

    /// Runs one training iteration on `batch`, mutating `state` only when
    /// every loss component is finite.
    pub fn train_iteration(&self, state: &mut TrainState, batch: &[FrameClip], rng: &mut impl Rng) -> Result<(LossBundle, Schedule)> {
        if batch.is_empty() {
            return Err(Error::NoData);
        }
        let cfg = &self.cfg;
        let ab = &cfg.ablation;
        let sched = step_schedules(state.iteration, &cfg.optim);
        let temps = Temperatures {
            teacher: cfg.distill.tau_t,
            student: cfg.distill.tau_s,
        };
        let weights = effective_weights(&cfg.weights, ab);
        let center = state.teacher.center.center.clone();
        let n_params = state.student.len();
        let need_views = ab.enable_p || ab.enable_t;
        let b_scale = 1.0 / batch.len() as f64;

        let mut bundle = LossBundle::default();
        let mut grads: Vec<Option<Mat>> = vec![None; n_params];
        let mut teacher_logits: Vec<Vec<f64>> = Vec::new();

        for clip in batch {
            let crops = crop_and_augment(clip, &cfg.clip, self.net.patch_size(), cfg.depth.blur_sigma0, rng)?;
            let subset = if ab.enable_p {
                sample_subset(self.net.heads(), cfg.proto.k, rng)
            } else {
                Vec::new()
            };
            let frames = crops.frames.len();
            let t_scale = 1.0 / frames as f64;

            let mut students = Vec::with_capacity(frames);
            let mut teachers = Vec::with_capacity(frames);
            for crop in &crops.frames {
                let tf = self.teacher_frame(&state.teacher.params, crop, &subset, need_views)?;
                let sf = self.student_frame(&state.student, crop, &tf, &subset)?;
                students.push(sf);
                teachers.push(tf);
            }

            // Per-frame seeds, filled term by term.
            let mut seeds: Vec<Vec<(Var, Mat)>> = (0..frames).map(|_| Vec::new()).collect();

            let proto_scale = weights.gamma_p * t_scale * b_scale;
            for (t, (sf, tf)) in students.iter().zip(&teachers).enumerate() {
                let g = &sf.graph;
                let (s1, s2) = (row(g, sf.f1), row(g, sf.f2));
                teacher_logits.push(tf.f1.clone());
                teacher_logits.push(tf.f2.clone());
                let mut value = 0.0;
                let mut d1 = vec![0.0; s1.len()];
                let mut d2 = vec![0.0; s2.len()];
                let pairs: Vec<(&[f64], usize, f64)> = if cfg.distill.symmetrize {
                    vec![(&tf.f1, 2, 0.5), (&tf.f2, 1, 0.5)]
                } else {
                    vec![(&tf.f1, 1, 1.0)]
                };
                for &(target, which, w) in &pairs {
                    let (student, grad) = if which == 1 { (&s1, &mut d1) } else { (&s2, &mut d2) };
                    let (h, dh) = cross_entropy_h_grad(target, student, temps, &center);
                    value += w * h;
                    grad.iter_mut().zip(dh).for_each(|(a, b)| *a += w * b);
                }
                if let Some(w_sub) = &tf.weights {
                    let f_n: Vec<Vec<f64>> = sf.f_sub.iter().map(|&v| row(g, v)).collect();
                    let refs: Vec<&[f64]> = f_n.iter().map(|v| v.as_slice()).collect();
                    let agg = aggregate(&refs, w_sub);
                    let mut d_agg = vec![0.0; agg.len()];
                    for &(target, _, w) in &pairs {
                        let (h, dh) = cross_entropy_h_grad(target, &agg, temps, &center);
                        value += w * h;
                        d_agg.iter_mut().zip(dh).for_each(|(a, b)| *a += w * b);
                    }
                    for (&v, &wn) in sf.f_sub.iter().zip(w_sub) {
                        let d: Vec<f64> = d_agg.iter().map(|x| x * wn * proto_scale).collect();
                        seeds[t].push((v, as_row(&d)));
                    }
                }
                bundle.l_proto += value * t_scale * b_scale;
                let scale = |d: Vec<f64>| as_row(&d.into_iter().map(|x| x * proto_scale).collect::<Vec<_>>());
                seeds[t].push((sf.f1, scale(d1)));
                seeds[t].push((sf.f2, scale(d2)));
            }

            if ab.enable_d {
                let side = self.net.grid() * UPSAMPLE;
                let preds: Vec<Mat> = students
                    .iter()
                    .map(|sf| {
                        let v = sf.depth.expect("decoder runs when depth is enabled");
                        sf.graph.value(v).clone().into_shape_with_order((side, side)).expect("square")
                    })
                    .collect();
                let depth_frames: Vec<DepthFrame<'_>> = preds
                    .iter()
                    .zip(&crops.frames)
                    .map(|(pred, c)| DepthFrame {
                        pred,
                        prior: &c[0].depth,
                        valid: &c[0].valid,
                    })
                    .collect();
                let d = depth_loss(&depth_frames, cfg.depth.beta, cfg.depth.lambda_grad);
                bundle.l_depth += d.value * b_scale;
                bundle.l_si += d.l_si * b_scale;
                bundle.l_grad += d.l_grad * b_scale;
                for (t, grad) in d.grads.into_iter().enumerate() {
                    let v = students[t].depth.expect("depth var");
                    let seed = grad.into_shape_with_order((1, side * side)).expect("row") * (weights.gamma_d * b_scale);
                    seeds[t].push((v, seed));
                }
            }

            if ab.enable_t {
                let student_z: Vec<Mat> = students
                    .iter()
                    .map(|sf| stack_rows(&sf.z_all.iter().map(|&v| row(&sf.graph, v)).collect::<Vec<_>>()))
                    .collect();
                let teacher_z: Vec<Mat> = teachers.iter().map(|tf| tf.z.clone().expect("teacher z")).collect();
                let l = temporal_loss(&student_z, &teacher_z, cfg.temporal.window, cfg.temporal.lambda, cfg.temporal.alpha);
                bundle.l_temp += l.value * b_scale;
                bundle.n_valid_pairs += l.n_valid_pairs;
                bundle.valid_proto_counts.extend(l.pair_counts.iter().map(|(_, c)| *c));
                for (t, grad) in l.grads.into_iter().enumerate() {
                    for (n, &v) in students[t].z_all.iter().enumerate() {
                        let seed = grad.row(n).to_owned().insert_axis(ndarray::Axis(0)) * (weights.gamma_t * b_scale);
                        seeds[t].push((v, seed));
                    }
                }
            }

            for (sf, seeds) in students.iter().zip(&seeds) {
                let frame_grads = sf.graph.backward(seeds, n_params);
                for (acc, g) in grads.iter_mut().zip(frame_grads) {
                    if let Some(g) = g {
                        match acc {
                            Some(a) => *a += &g,
                            None => *acc = Some(g),
                        }
                    }
                }
            }
        }

        bundle.l_total = total_loss(bundle.l_proto, bundle.l_depth, bundle.l_temp, &cfg.weights, ab);
        if !bundle.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: state.iteration,
                components: bundle.describe(),
            });
        }

        let active = weights.gamma_p > 0.0 || weights.gamma_d > 0.0 || weights.gamma_t > 0.0;
        if active {
            clip_grad_norm(&mut grads, cfg.optim.clip_grad);
            state.adam.step(&mut state.student, self.net.specs(), &grads, sched.lr, sched.wd);
            ema_update(&state.student, &mut state.teacher.params, sched.ema_m);
        }
        state.teacher.center.update(teacher_logits.iter().map(|v| v.as_slice()));
        state.iteration += 1;
        Ok((bundle, sched))
    }

    /// Samples a batch for `state.iteration` and trains on it.
    pub fn step(&self, state: &mut TrainState, sources: &[Box<dyn FrameSource>]) -> Result<(LossBundle, Schedule)> {
        let mut rng = iteration_rng(self.cfg.seed, state.iteration);
        let batch = sample_batch(sources, &self.cfg, &mut rng)?;
        self.train_iteration(state, &batch, &mut rng)
    }
}
