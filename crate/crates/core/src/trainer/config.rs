use std::fmt::Write as _;
use std::str::FromStr;

use crate::detector::{DetectorConfig, LossConfig};
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::pseudo::PseudoConfig;
use crate::refine::Granularity;
use crate::scenes::StrongAugConfig;

/// How the teacher follows the student.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Moving-average teacher after every student step.
    ClassicalEma,
    /// Frozen teacher, periodic scaling-based refinement.
    Tmr,
    /// [`Mode::Tmr`] plus the disagreement term in the student objective.
    TmrRd,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ClassicalEma => "classical_ema",
            Mode::Tmr => "tmr",
            Mode::TmrRd => "tmr_rd",
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "classical_ema" => Ok(Mode::ClassicalEma),
            "tmr" => Ok(Mode::Tmr),
            "tmr_rd" => Ok(Mode::TmrRd),
            _ => Err(format!("unknown mode `{s}` (expected classical_ema, tmr or tmr_rd)")),
        }
    }
}

/// Where the scaling coefficients start each refinement stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OmegaInit {
    Ones,
    /// Continue from the previous stage's coefficients.
    Carry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Moving-average coefficient of the classical teacher.
    pub alpha: f64,
    /// Learning rate of the scaling coefficients.
    pub gamma: f64,
    /// Student learning rate.
    pub xi: f64,
    pub burn_in_lr: f64,
    pub lambda_t: f64,
    pub lambda_s: f64,
    pub lambda_sup: f64,
    pub lambda_u: f64,
    pub lambda_d: f64,
    /// Student iterations per cycle.
    pub n: usize,
    /// Refinement iterations per cycle.
    pub n_prime: usize,
    /// Includes the burn-in iterations.
    pub total_iterations: usize,
    pub burn_in_iterations: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub eval_interval: usize,
    pub unsup_uncertainty: bool,
    pub gradient_ascent: bool,
    pub omega_init: OmegaInit,
    pub granularity: Granularity,
    /// Record elapsed seconds in the metrics log (breaks byte-identical logs).
    pub wall_clock: bool,
    pub detector: DetectorConfig,
    pub loss: LossConfig,
    pub pseudo: PseudoConfig,
    pub aug: StrongAugConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::TmrRd,
            seed: 0,
            alpha: 0.99,
            gamma: 0.05,
            xi: 0.02,
            burn_in_lr: 0.05,
            lambda_t: 1.0,
            lambda_s: 4.0,
            lambda_sup: 1.0,
            lambda_u: 4.0,
            lambda_d: 0.5,
            n: 40,
            n_prime: 20,
            total_iterations: 600,
            burn_in_iterations: 300,
            batch_labeled: 8,
            batch_unlabeled: 8,
            eval_interval: 60,
            unsup_uncertainty: true,
            gradient_ascent: false,
            omega_init: OmegaInit::Ones,
            granularity: Granularity::PerChannel,
            wall_clock: false,
            detector: DetectorConfig::default(),
            loss: LossConfig::default(),
            pseudo: PseudoConfig::default(),
            aug: StrongAugConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn fmt_bool(b: bool) -> String {
    b.to_string()
}

impl TrainConfig {
    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            bad.push(format!("train.alpha={} must lie in (0, 1)", self.alpha));
        }
        for (k, v) in [
            ("train.gamma", self.gamma),
            ("train.lambda_t", self.lambda_t),
            ("train.lambda_s", self.lambda_s),
            ("train.lambda_sup", self.lambda_sup),
            ("train.lambda_u", self.lambda_u),
            ("train.lambda_d", self.lambda_d),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push(format!("{k}={v} must be non-negative"));
            }
        }
        for (k, v) in [("train.xi", self.xi), ("train.burn_in_lr", self.burn_in_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{k}={v} must be positive"));
            }
        }
        if self.n == 0 {
            bad.push("train.n must be at least 1".into());
        }
        if self.n_prime == 0 {
            bad.push("train.n_prime must be at least 1".into());
        }
        if self.total_iterations < self.burn_in_iterations {
            bad.push(format!(
                "train.total_iterations={} is below train.burn_in_iterations={}",
                self.total_iterations, self.burn_in_iterations
            ));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            bad.push("batch sizes must be at least 1".into());
        }
        if self.eval_interval == 0 {
            bad.push("train.eval_interval must be at least 1".into());
        }
        let t = self.loss.tau;
        if !(t[0] < t[1] && t[1] < t[2]) || t.iter().any(|v| !(0.0..=1.0).contains(v)) {
            bad.push(format!("loss.tau={t:?} must be strictly increasing within [0, 1]"));
        }
        for (k, v) in [
            ("pseudo.conf_threshold", self.pseudo.conf_threshold),
            ("pseudo.nms_iou", self.pseudo.nms_iou),
            ("eval.nms_iou", self.eval.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                bad.push(format!("{k}={v} must lie in [0, 1]"));
            }
        }
        if self.eval.batch == 0 {
            bad.push("eval.batch must be at least 1".into());
        }
        if let Err(Error::Config(more)) = self.detector.validate() {
            bad.extend(more.into_iter().map(|m| format!("model: {m}")));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let g = match self.granularity {
            Granularity::PerChannel => "channel",
            Granularity::PerTensor => "tensor",
        };
        let o = match self.omega_init {
            OmegaInit::Ones => "ones",
            OmegaInit::Carry => "carry",
        };
        let tau = self.loss.tau.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("train.mode", self.mode.as_str().into()),
            ("train.seed", self.seed.to_string()),
            ("train.alpha", self.alpha.to_string()),
            ("train.gamma", self.gamma.to_string()),
            ("train.xi", self.xi.to_string()),
            ("train.burn_in_lr", self.burn_in_lr.to_string()),
            ("train.lambda_t", self.lambda_t.to_string()),
            ("train.lambda_s", self.lambda_s.to_string()),
            ("train.lambda_sup", self.lambda_sup.to_string()),
            ("train.lambda_u", self.lambda_u.to_string()),
            ("train.lambda_d", self.lambda_d.to_string()),
            ("train.n", self.n.to_string()),
            ("train.n_prime", self.n_prime.to_string()),
            ("train.total_iterations", self.total_iterations.to_string()),
            ("train.burn_in_iterations", self.burn_in_iterations.to_string()),
            ("train.batch_labeled", self.batch_labeled.to_string()),
            ("train.batch_unlabeled", self.batch_unlabeled.to_string()),
            ("train.eval_interval", self.eval_interval.to_string()),
            ("train.unsup_uncertainty", fmt_bool(self.unsup_uncertainty)),
            ("train.gradient_ascent", fmt_bool(self.gradient_ascent)),
            ("train.omega_init", o.into()),
            ("train.granularity", g.into()),
            ("log.wall_clock", fmt_bool(self.wall_clock)),
            ("model.cascade", fmt_bool(self.detector.cascade)),
            ("model.uncertainty", fmt_bool(self.detector.uncertainty)),
            ("model.c1", self.detector.c1.to_string()),
            ("model.c2", self.detector.c2.to_string()),
            ("model.kernel", self.detector.kernel.to_string()),
            ("model.anchor_size", self.detector.anchor_size.to_string()),
            ("loss.tau", tau),
            ("loss.focal_alpha", self.loss.focal_alpha.to_string()),
            ("loss.focal_gamma", self.loss.focal_gamma.to_string()),
            ("loss.npll_rho", self.loss.npll_rho.to_string()),
            ("pseudo.conf_threshold", self.pseudo.conf_threshold.to_string()),
            ("pseudo.nms_iou", self.pseudo.nms_iou.to_string()),
            ("aug.brightness", self.aug.brightness.to_string()),
            ("aug.contrast", self.aug.contrast.to_string()),
            ("aug.noise_std", self.aug.noise_std.to_string()),
            ("aug.cutout_min", self.aug.cutout_min.to_string()),
            ("aug.cutout_max", self.aug.cutout_max.to_string()),
            ("aug.cutout_fill", self.aug.cutout_fill.to_string()),
            ("eval.min_score", self.eval.min_score.to_string()),
            ("eval.nms_iou", self.eval.nms_iou.to_string()),
            ("eval.max_per_image", self.eval.max_per_image.to_string()),
            ("eval.batch", self.eval.batch.to_string()),
        ]
    }

    /// `key = value` lines for every field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies one key. Errors name the key and the offending value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn p<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse `{v}`"))
        }
        match key {
            "train.mode" => self.mode = value.parse().map_err(|e| format!("{key}: {e}"))?,
            "train.seed" => self.seed = p(key, value)?,
            "train.alpha" => self.alpha = p(key, value)?,
            "train.gamma" => self.gamma = p(key, value)?,
            "train.xi" => self.xi = p(key, value)?,
            "train.burn_in_lr" => self.burn_in_lr = p(key, value)?,
            "train.lambda_t" => self.lambda_t = p(key, value)?,
            "train.lambda_s" => self.lambda_s = p(key, value)?,
            "train.lambda_sup" => self.lambda_sup = p(key, value)?,
            "train.lambda_u" => self.lambda_u = p(key, value)?,
            "train.lambda_d" => self.lambda_d = p(key, value)?,
            "train.n" => self.n = p(key, value)?,
            "train.n_prime" => self.n_prime = p(key, value)?,
            "train.total_iterations" => self.total_iterations = p(key, value)?,
            "train.burn_in_iterations" => self.burn_in_iterations = p(key, value)?,
            "train.batch_labeled" => self.batch_labeled = p(key, value)?,
            "train.batch_unlabeled" => self.batch_unlabeled = p(key, value)?,
            "train.eval_interval" => self.eval_interval = p(key, value)?,
            "train.unsup_uncertainty" => self.unsup_uncertainty = p(key, value)?,
            "train.gradient_ascent" => self.gradient_ascent = p(key, value)?,
            "train.omega_init" => {
                self.omega_init = match value {
                    "ones" => OmegaInit::Ones,
                    "carry" => OmegaInit::Carry,
                    _ => return Err(format!("{key}: expected ones or carry, got `{value}`")),
                }
            }
            "train.granularity" => {
                self.granularity = match value {
                    "channel" => Granularity::PerChannel,
                    "tensor" => Granularity::PerTensor,
                    _ => return Err(format!("{key}: expected channel or tensor, got `{value}`")),
                }
            }
            "log.wall_clock" => self.wall_clock = p(key, value)?,
            "model.cascade" => self.detector.cascade = p(key, value)?,
            "model.uncertainty" => self.detector.uncertainty = p(key, value)?,
            "model.c1" => self.detector.c1 = p(key, value)?,
            "model.c2" => self.detector.c2 = p(key, value)?,
            "model.kernel" => self.detector.kernel = p(key, value)?,
            "model.anchor_size" => self.detector.anchor_size = p(key, value)?,
            "loss.tau" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(format!("{key}: expected three comma-separated values, got `{value}`"));
                }
                for (i, s) in parts.iter().enumerate() {
                    self.loss.tau[i] = p(key, s)?;
                }
            }
            "loss.focal_alpha" => self.loss.focal_alpha = p(key, value)?,
            "loss.focal_gamma" => self.loss.focal_gamma = p(key, value)?,
            "loss.npll_rho" => self.loss.npll_rho = p(key, value)?,
            "pseudo.conf_threshold" => self.pseudo.conf_threshold = p(key, value)?,
            "pseudo.nms_iou" => self.pseudo.nms_iou = p(key, value)?,
            "aug.brightness" => self.aug.brightness = p(key, value)?,
            "aug.contrast" => self.aug.contrast = p(key, value)?,
            "aug.noise_std" => self.aug.noise_std = p(key, value)?,
            "aug.cutout_min" => self.aug.cutout_min = p(key, value)?,
            "aug.cutout_max" => self.aug.cutout_max = p(key, value)?,
            "aug.cutout_fill" => self.aug.cutout_fill = p(key, value)?,
            "eval.min_score" => self.eval.min_score = p(key, value)?,
            "eval.nms_iou" => self.eval.nms_iou = p(key, value)?,
            "eval.max_per_image" => self.eval.max_per_image = p(key, value)?,
            "eval.batch" => self.eval.batch = p(key, value)?,
            _ => return Err(format!("{key}: unknown key")),
        }
        Ok(())
    }

    /// Parses `key = value` text over the defaults. Blank lines and `#`
    /// comments are ignored. All bad lines are reported together, followed
    /// by any validation failures.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut bad = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v.trim()) {
                        bad.push(format!("line {}: {e}", lineno + 1));
                    }
                }
                None => bad.push(format!("line {}: expected key = value, got `{line}`", lineno + 1)),
            }
        }
        if let Err(Error::Config(more)) = cfg.validate() {
            bad.extend(more);
        }
        if bad.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(bad))
        }
    }
}
