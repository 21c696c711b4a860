//! Burn-in, then alternating student (SSL) and refinement (TMR) stages, or a
//! moving-average teacher as the baseline.

mod checkpoint;
mod config;

pub use checkpoint::{
    checkpoint_load, checkpoint_save, decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{Mode, OmegaInit, TrainConfig};

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::LabeledBox;
use crate::detector::{
    bind, decode, forward_values, init_params, supervised_loss, Detector, DetectorConfig, ParameterSet,
};
use crate::error::{Error, Result};
use crate::metrics::evaluate_model;
use crate::pseudo::{filter, to_base_frame};
use crate::rd::{
    rd_loss_values, representation_from_features, representation_probs, student_step, StudentBatch, StudentStepConfig,
};
use crate::refine::{ema_step, refine_weights, tmr_optimize, ScalingSet};
use crate::scenes::{stack_images, strong_augment, weak_augment, Dataset, Scene};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    BurnIn,
    Ssl,
    Tmr,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::BurnIn => "BURN_IN",
            Stage::Ssl => "SSL",
            Stage::Tmr => "TMR",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Stage> {
        [Stage::BurnIn, Stage::Ssl, Stage::Tmr].get(c as usize).copied()
    }
}

/// Stage of the 0-based global `iteration`. After burn-in, cycles of `n`
/// student iterations followed by `n_prime` refinement iterations; the
/// moving-average baseline has no refinement stage.
pub fn stage_at(cfg: &TrainConfig, iteration: usize) -> Stage {
    if iteration < cfg.burn_in_iterations {
        return Stage::BurnIn;
    }
    if cfg.mode == Mode::ClassicalEma {
        return Stage::Ssl;
    }
    let j = (iteration - cfg.burn_in_iterations) % (cfg.n + cfg.n_prime);
    if j < cfg.n {
        Stage::Ssl
    } else {
        Stage::Tmr
    }
}

/// One line of the metrics log. Absent values are written as empty cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub stage: Option<Stage>,
    pub loss_sup: Option<f64>,
    pub loss_unsup: Option<f64>,
    pub loss_rd: Option<f64>,
    pub loss_tmr: Option<f64>,
    pub mean_repr_kl: Option<f64>,
    pub ap50: Option<f64>,
    pub map: Option<f64>,
    pub wall_seconds: Option<f64>,
}

impl MetricsRow {
    pub(crate) fn values(&self) -> [Option<f64>; 8] {
        [
            self.loss_sup,
            self.loss_unsup,
            self.loss_rd,
            self.loss_tmr,
            self.mean_repr_kl,
            self.ap50,
            self.map,
            self.wall_seconds,
        ]
    }

    pub(crate) fn set_values(&mut self, v: [Option<f64>; 8]) {
        [
            self.loss_sup,
            self.loss_unsup,
            self.loss_rd,
            self.loss_tmr,
            self.mean_repr_kl,
            self.ap50,
            self.map,
            self.wall_seconds,
        ] = v;
    }
}

pub const CSV_HEADER: &str = "iteration,stage,loss_sup,loss_unsup,loss_rd,loss_tmr,mean_repr_kl,ap50,map,wall_seconds";

/// The metrics log as CSV with [`CSV_HEADER`]. Numbers use the shortest
/// representation that round-trips.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{}", r.iteration, r.stage.map_or("", Stage::as_str));
        for v in r.values() {
            s.push(',');
            if let Some(v) = v {
                let _ = write!(s, "{v}");
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub teacher: ParameterSet,
    pub student: ParameterSet,
    pub omega_t: ScalingSet,
    pub omega_s: ScalingSet,
    /// Next iteration to run.
    pub iteration: usize,
    /// Stage of the last completed iteration (burn-in before the first).
    pub stage: Stage,
    pub rng: ChaCha8Rng,
    pub history: Vec<MetricsRow>,
    /// Iterations whose refinement stage ended with the weight mixing.
    pub refinements: Vec<usize>,
}

const BURN_IN_STREAM: u64 = 1;
const MAIN_STREAM: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Batch {
    images: Tensor,
    targets: Vec<Vec<LabeledBox>>,
}

/// Runs the training schedule on one dataset.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    det: DetectorConfig,
    data: &'a Dataset,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.labeled.is_empty() {
            return Err(Error::invalid("dataset", "no labeled scenes"));
        }
        if cfg.total_iterations > cfg.burn_in_iterations && data.unlabeled.is_empty() {
            return Err(Error::invalid("dataset", "no unlabeled scenes"));
        }
        let det = DetectorConfig {
            image_h: data.height,
            image_w: data.width,
            in_channels: 1,
            num_classes: data.num_classes,
            ..cfg.detector.clone()
        };
        det.validate()?;
        Ok(Trainer { cfg, det, data, started: Instant::now() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn detector(&self) -> &DetectorConfig {
        &self.det
    }

    /// Randomly initialized teacher and student (equal), before burn-in.
    pub fn init_state(&self) -> Result<TrainState> {
        let mut rng = stream_rng(self.cfg.seed, BURN_IN_STREAM);
        let params = init_params(&self.det, &mut rng)?;
        let mut state = self.fresh_state(params, rng);
        state.iteration = 0;
        state.stage = Stage::BurnIn;
        if self.cfg.burn_in_iterations == 0 {
            state.rng = stream_rng(self.cfg.seed, MAIN_STREAM);
        }
        Ok(state)
    }

    /// State right after burn-in, from externally computed burn-in weights.
    /// Equivalent to running the burn-in stage that produced them.
    pub fn state_after_burn_in(&self, burned: &ParameterSet) -> Result<TrainState> {
        burned.check_aligned(&init_params(&self.det, &mut stream_rng(0, 0))?)?;
        let mut state = self.fresh_state(burned.clone(), stream_rng(self.cfg.seed, MAIN_STREAM));
        state.iteration = self.cfg.burn_in_iterations;
        Ok(state)
    }

    fn fresh_state(&self, params: ParameterSet, rng: ChaCha8Rng) -> TrainState {
        let omega = ScalingSet::ones(&params, self.cfg.granularity);
        TrainState {
            teacher: params.clone(),
            student: params,
            omega_t: omega.clone(),
            omega_s: omega,
            iteration: 0,
            stage: Stage::BurnIn,
            rng,
            history: Vec::new(),
            refinements: Vec::new(),
        }
    }

    /// Runs every remaining iteration.
    pub fn run(&self) -> Result<TrainState> {
        let mut state = self.init_state()?;
        self.run_until(&mut state, self.cfg.total_iterations)?;
        Ok(state)
    }

    /// Runs iterations until `state.iteration == stop` (or the end of the
    /// schedule). Stopping early never triggers the end-of-run refinement.
    pub fn run_until(&self, state: &mut TrainState, stop: usize) -> Result<()> {
        let stop = stop.min(self.cfg.total_iterations);
        while state.iteration < stop {
            self.step(state)?;
        }
        Ok(())
    }

    fn sample_labeled(&self, rng: &mut ChaCha8Rng, n: usize) -> Result<Batch> {
        let mut scenes = Vec::with_capacity(n);
        for _ in 0..n {
            let s = &self.data.labeled[rng.gen_range(0..self.data.labeled.len())];
            let weak = weak_augment(s, rng);
            scenes.push(strong_augment(&weak.scene, &self.cfg.aug, rng).scene);
        }
        Ok(Batch {
            images: stack_images(scenes.iter().map(|s| &s.image))?,
            targets: scenes.into_iter().map(|s| s.objects).collect(),
        })
    }

    fn diverged(stage: Stage, iteration: usize) -> impl Fn(Error) -> Error {
        move |e| match e {
            Error::NonFinite(detail) => Error::Divergence { stage: stage.as_str().into(), iteration, detail },
            Error::Divergence { detail, .. } => Error::Divergence { stage: stage.as_str().into(), iteration, detail },
            other => other,
        }
    }

    /// Runs one iteration.
    pub fn step(&self, state: &mut TrainState) -> Result<()> {
        let it = state.iteration;
        if it >= self.cfg.total_iterations {
            return Err(Error::invalid("iteration", "schedule already complete"));
        }
        let stage = stage_at(&self.cfg, it);
        let mut row = MetricsRow { iteration: it, stage: Some(stage), ..MetricsRow::default() };
        match stage {
            Stage::BurnIn => self.burn_in_step(state, &mut row),
            Stage::Ssl => self.ssl_step(state, &mut row),
            Stage::Tmr => self.tmr_step(state, &mut row),
        }
        .map_err(Self::diverged(stage, it))?;

        if stage == Stage::BurnIn && it + 1 == self.cfg.burn_in_iterations {
            state.student = state.teacher.clone();
            state.rng = stream_rng(self.cfg.seed, MAIN_STREAM);
        }
        state.iteration = it + 1;
        state.stage = stage;
        if (it + 1).is_multiple_of(self.cfg.eval_interval) || it + 1 == self.cfg.total_iterations {
            let (ap50, map, kl) = self.evaluate_state(state).map_err(Self::diverged(stage, it))?;
            row.ap50 = Some(ap50);
            row.map = Some(map);
            row.mean_repr_kl = Some(kl);
        }
        if self.cfg.wall_clock {
            row.wall_seconds = Some(self.started.elapsed().as_secs_f64());
        }
        state.history.push(row);
        Ok(())
    }

    fn burn_in_step(&self, state: &mut TrainState, row: &mut MetricsRow) -> Result<()> {
        let b = self.sample_labeled(&mut state.rng, self.cfg.batch_labeled)?;
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &state.teacher, true);
        let x = tape.constant(b.images);
        let l = supervised_loss(&mut tape, &self.det, &self.cfg.loss, &bound, x, &b.targets)?;
        row.loss_sup = Some(tape.value(l.total).item()?);
        let grads = tape.backward(l.total)?;
        for (name, t) in state.teacher.iter_mut() {
            let g = grads.get_or_zeros(bound.get(name)?, t.shape());
            *t = t.zip_map(&g, |w, g| w - self.cfg.burn_in_lr * g)?;
        }
        Ok(())
    }

    fn ssl_step(&self, state: &mut TrainState, row: &mut MetricsRow) -> Result<()> {
        let cfg = &self.cfg;
        let labeled = self.sample_labeled(&mut state.rng, cfg.batch_labeled)?;
        let rng = &mut state.rng;
        let mut weak = Vec::with_capacity(cfg.batch_unlabeled);
        let mut strong = Vec::with_capacity(cfg.batch_unlabeled);
        for _ in 0..cfg.batch_unlabeled {
            let s = &self.data.unlabeled[rng.gen_range(0..self.data.unlabeled.len())];
            weak.push(weak_augment(s, rng));
            strong.push(strong_augment(s, &cfg.aug, rng).scene);
        }
        let weak_images = stack_images(weak.iter().map(|v| &v.scene.image))?;
        let strong_images = stack_images(strong.iter().map(|s| &s.image))?;

        let tv = forward_values(&self.det, &state.teacher, None, &weak_images)?;
        let dets = to_base_frame(decode(&self.det, &tv), &weak)?;
        let pseudo: Vec<Vec<LabeledBox>> = dets
            .into_iter()
            .map(|d| Ok(filter(d, cfg.pseudo.conf_threshold, cfg.pseudo.nms_iou)?.iter().map(|p| p.target()).collect()))
            .collect::<Result<_>>()?;
        let lambda_d = if cfg.mode == Mode::TmrRd { cfg.lambda_d } else { 0.0 };
        let teacher_repr = if lambda_d > 0.0 {
            let flips: Vec<bool> = weak.iter().map(|v| v.flip_applied).collect();
            Some(representation_from_features(&tv.features, &flips)?)
        } else {
            None
        };

        let step = StudentStepConfig {
            xi: cfg.xi,
            lambda_sup: cfg.lambda_sup,
            lambda_u: cfg.lambda_u,
            lambda_d,
            unsup_uncertainty: cfg.unsup_uncertainty,
            gradient_ascent: cfg.gradient_ascent,
        };
        let batch = StudentBatch {
            labeled: Some((&labeled.images, &labeled.targets)),
            strong_images: &strong_images,
            pseudo_targets: &pseudo,
            teacher_repr: teacher_repr.as_ref(),
        };
        let (next, report) = student_step(&self.det, &cfg.loss, &state.student, &batch, &step)?;
        state.student = next;
        row.loss_sup = report.loss_sup;
        row.loss_unsup = report.loss_unsup;
        row.loss_rd = report.loss_rd;
        if cfg.mode == Mode::ClassicalEma {
            state.teacher = ema_step(&state.teacher, &state.student, cfg.alpha)?;
        }
        Ok(())
    }

    fn tmr_step(&self, state: &mut TrainState, row: &mut MetricsRow) -> Result<()> {
        let cfg = &self.cfg;
        let b = self.sample_labeled(&mut state.rng, cfg.batch_labeled)?;
        let mut batch = Some((b.images, b.targets));
        let out = tmr_optimize(
            &self.det,
            &cfg.loss,
            &state.teacher,
            &state.student,
            (state.omega_t.clone(), state.omega_s.clone()),
            (cfg.lambda_t, cfg.lambda_s),
            cfg.gamma,
            1,
            |_| batch.take().ok_or_else(|| Error::invalid("batch", "one batch per step")),
        )?;
        state.omega_t = out.omega_t;
        state.omega_s = out.omega_s;
        row.loss_tmr = out.trace.first().copied();

        let it = state.iteration;
        let stage_end = stage_at(cfg, it + 1) != Stage::Tmr || it + 1 == cfg.total_iterations;
        if stage_end {
            let (t, s) = refine_weights(&state.teacher, &state.student, &state.omega_t, &state.omega_s)?;
            state.teacher = t;
            state.student = s;
            state.refinements.push(it);
            if cfg.omega_init == OmegaInit::Ones {
                state.omega_t = ScalingSet::ones(&state.teacher, cfg.granularity);
                state.omega_s = ScalingSet::ones(&state.student, cfg.granularity);
            }
        }
        Ok(())
    }

    /// Teacher AP50 and mAP on the test split, and the mean student-teacher
    /// representation KL on the first test images.
    pub fn evaluate_state(&self, state: &TrainState) -> Result<(f64, f64, f64)> {
        let (ap50, map) = if self.data.test.is_empty() {
            (0.0, 0.0)
        } else {
            let r = evaluate_model(
                &Detector { cfg: &self.det, params: &state.teacher },
                &self.data.test,
                self.det.num_classes,
                &self.cfg.eval,
            )?;
            (r.ap50, r.map)
        };
        let kl = self.mean_repr_kl(state)?;
        Ok((ap50, map, kl))
    }

    pub fn mean_repr_kl(&self, state: &TrainState) -> Result<f64> {
        let probe: Vec<&Scene> = self.data.test.iter().chain(&self.data.unlabeled).take(PROBE_SIZE).collect();
        if probe.is_empty() {
            return Ok(0.0);
        }
        let images = stack_images(probe.iter().map(|s| &s.image))?;
        let flips = vec![false; probe.len()];
        let ps = representation_probs(&self.det, &state.student, &images, &flips)?;
        let pt = representation_probs(&self.det, &state.teacher, &images, &flips)?;
        rd_loss_values(&ps, &pt)
    }
}

const PROBE_SIZE: usize = 16;

/// Supervised burn-in alone: the weights both models start from.
pub fn burn_in(cfg: &TrainConfig, data: &Dataset) -> Result<ParameterSet> {
    let only = TrainConfig { total_iterations: cfg.burn_in_iterations, ..cfg.clone() };
    let trainer = Trainer::new(only, data)?;
    let mut state = trainer.init_state()?;
    trainer.run_until(&mut state, cfg.burn_in_iterations)?;
    Ok(state.teacher)
}
