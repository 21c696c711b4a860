//! Finite-difference checks of the three training objectives on a seeded
//! desk-scale batch: the supervised loss in the weights, the refinement loss
//! in the scaling coefficients, and the student objective in the student
//! weights.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::LabeledBox;
use crate::detector::{bind, init_params, supervised_loss, BoundParams, DetectorConfig, LossConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::rd::{representation_probs, student_objective, StudentBatch, StudentStepConfig};
use crate::refine::{tmr_loss, Granularity, ScalingSet};
use crate::scenes::{generate_scene, stack_images, strong_augment, SceneConfig, StrongAugConfig};
use crate::tensor::{finite_diff_check_with, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};

/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    Supervised,
    Tmr,
    Student,
}

impl GradTarget {
    pub const ALL: [GradTarget; 3] = [GradTarget::Supervised, GradTarget::Tmr, GradTarget::Student];

    pub fn as_str(self) -> &'static str {
        match self {
            GradTarget::Supervised => "sup",
            GradTarget::Tmr => "tmr",
            GradTarget::Student => "student",
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sup" => Ok(GradTarget::Supervised),
            "tmr" => Ok(GradTarget::Tmr),
            "student" => Ok(GradTarget::Student),
            _ => Err(Error::invalid("target", format!("unknown gradcheck target `{s}` (sup, tmr, student)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetReport {
    pub target: GradTarget,
    pub report: GradCheckReport,
}

impl TargetReport {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= GRADCHECK_TOLERANCE
    }

    /// `target max_rel=... raw=... coords=... refined=... PASS|FAIL`.
    pub fn line(&self) -> String {
        let r = &self.report;
        format!(
            "{:<8} max_rel={:.3e} raw_max_rel={:.3e} coords={} refined={} {}",
            self.target.as_str(),
            r.max_rel_error,
            r.raw_max_rel_error,
            r.coordinates,
            r.refined,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Trained-for-a-few-steps teacher, a nearby student and one labeled and one
/// strongly augmented image.
struct Fixture {
    cfg: DetectorConfig,
    loss: LossConfig,
    teacher: ParameterSet,
    student: ParameterSet,
    labeled: Tensor,
    labeled_targets: Vec<Vec<LabeledBox>>,
    strong: Tensor,
    pseudo: Vec<Vec<LabeledBox>>,
}

const WARMUP_STEPS: usize = 20;
const WARMUP_LR: f64 = 0.05;

fn fixture(seed: u64) -> Result<Fixture> {
    let cfg = DetectorConfig { cascade: true, uncertainty: true, ..DetectorConfig::default() };
    let loss = LossConfig::default();
    let scenes_cfg = SceneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<_> = (0..4).map(|i| generate_scene(&scenes_cfg, seed, i)).collect();

    let mut teacher = init_params(&cfg, &mut rng)?;
    let warm_images = stack_images(scenes[..2].iter().map(|s| &s.image))?;
    let warm_targets: Vec<_> = scenes[..2].iter().map(|s| s.objects.clone()).collect();
    for _ in 0..WARMUP_STEPS {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &teacher, true);
        let x = tape.constant(warm_images.clone());
        let l = supervised_loss(&mut tape, &cfg, &loss, &bound, x, &warm_targets)?;
        let grads = tape.backward(l.total)?;
        for (name, t) in teacher.iter_mut() {
            let g = grads.get_or_zeros(bound.get(name)?, t.shape());
            *t = t.zip_map(&g, |w, g| w - WARMUP_LR * g)?;
        }
    }
    let mut student = teacher.clone();
    for (_, t) in student.iter_mut() {
        let data = t.data().iter().map(|v| v + 0.01 * (rng.gen::<f64>() - 0.5)).collect();
        *t = Tensor::new(t.shape().to_vec(), data)?;
    }

    let strong = strong_augment(&scenes[3], &StrongAugConfig::default(), &mut rng).scene;
    Ok(Fixture {
        cfg,
        loss,
        teacher,
        student,
        labeled: stack_images([&scenes[2].image])?,
        labeled_targets: vec![scenes[2].objects.clone()],
        strong: stack_images([&strong.image])?,
        pseudo: vec![strong.objects],
    })
}

fn bound_from(names: &[String], vars: &[Var]) -> BoundParams {
    BoundParams::from_map(names.iter().cloned().zip(vars.iter().copied()).collect())
}

/// Runs one target with base step `h` and the standard fallback ladder.
pub fn gradcheck(target: GradTarget, h: f64, seed: u64) -> Result<TargetReport> {
    let f = fixture(seed)?;
    let opts = GradCheckOptions::with_fallbacks(h, GRADCHECK_TOLERANCE);
    let report = match target {
        GradTarget::Supervised => {
            let names: Vec<String> = f.teacher.names().map(String::from).collect();
            let tensors: Vec<Tensor> = f.teacher.iter().map(|(_, t)| t.clone()).collect();
            finite_diff_check_with(
                |tape, vars| {
                    let x = tape.constant(f.labeled.clone());
                    Ok(supervised_loss(tape, &f.cfg, &f.loss, &bound_from(&names, vars), x, &f.labeled_targets)?.total)
                },
                &tensors,
                &opts,
            )?
        }
        GradTarget::Tmr => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let ones = ScalingSet::ones(&f.teacher, Granularity::PerChannel);
            let names: Vec<String> = ones.iter().map(|(n, _)| n.clone()).collect();
            let mut tensors = Vec::new();
            for _ in 0..2 {
                for (_, t) in ones.iter() {
                    let data = (0..t.numel()).map(|_| rng.gen_range(0.5..1.0)).collect();
                    tensors.push(Tensor::new(t.shape().to_vec(), data)?);
                }
            }
            let k = names.len();
            finite_diff_check_with(
                |tape, vars| {
                    let ot = bound_from(&names, &vars[..k]);
                    let os = bound_from(&names, &vars[k..]);
                    let x = tape.constant(f.labeled.clone());
                    let l = tmr_loss(
                        tape,
                        &f.cfg,
                        &f.loss,
                        &f.teacher,
                        &ot,
                        &f.student,
                        &os,
                        x,
                        &f.labeled_targets,
                        (1.0, 4.0),
                    )?;
                    Ok(l.total)
                },
                &tensors,
                &opts,
            )?
        }
        GradTarget::Student => {
            let teacher_repr = representation_probs(&f.cfg, &f.teacher, &f.strong, &[false])?;
            let step = StudentStepConfig::default();
            let names: Vec<String> = f.student.names().map(String::from).collect();
            let tensors: Vec<Tensor> = f.student.iter().map(|(_, t)| t.clone()).collect();
            finite_diff_check_with(
                |tape, vars| {
                    let batch = StudentBatch {
                        labeled: Some((&f.labeled, &f.labeled_targets)),
                        strong_images: &f.strong,
                        pseudo_targets: &f.pseudo,
                        teacher_repr: Some(&teacher_repr),
                    };
                    Ok(student_objective(tape, &f.cfg, &f.loss, &bound_from(&names, vars), &batch, &step)?.0)
                },
                &tensors,
                &opts,
            )?
        }
    };
    Ok(TargetReport { target, report })
}
