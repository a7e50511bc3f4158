//! Image-space perturbation generators and the BIM adversarial attack.
//!
//! Each generator takes an image in `[0,1]`, a severity (kind-specific
//! meaning, 0 = identity for every kind) and a seed; output is clipped back
//! to `[0,1]` as the final step. The geometric kinds reuse the filter-space
//! displacement-field constructors at image scale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::centered_grid;
use crate::error::{Error, Result};
use crate::layers::Model;
use crate::rng::rng_from;
use crate::tensor::{Tape, Tensor};
use crate::transforms::{
    apply_field_to_image, blur_plane, displace_elastic, displace_rotation_scaling,
    DisplacementField,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    RotationScaling,
    Elastic,
    GaussianBlur,
    GaussianNoise,
    ObjectOcclusion,
    Snow,
    Wave,
    Saturation,
    Adversarial,
}

impl PerturbationKind {
    pub fn name(&self) -> &'static str {
        match self {
            PerturbationKind::RotationScaling => "rotation_scaling",
            PerturbationKind::Elastic => "elastic",
            PerturbationKind::GaussianBlur => "gaussian_blur",
            PerturbationKind::GaussianNoise => "gaussian_noise",
            PerturbationKind::ObjectOcclusion => "object_occlusion",
            PerturbationKind::Snow => "snow",
            PerturbationKind::Wave => "wave",
            PerturbationKind::Saturation => "saturation",
            PerturbationKind::Adversarial => "adversarial",
        }
    }

    /// The six natural kinds that mirror the filter transforms.
    pub fn natural() -> [PerturbationKind; 6] {
        [
            PerturbationKind::RotationScaling,
            PerturbationKind::Elastic,
            PerturbationKind::GaussianBlur,
            PerturbationKind::GaussianNoise,
            PerturbationKind::ObjectOcclusion,
            PerturbationKind::Snow,
        ]
    }

    /// Does a filter transform built into a model cover this test kind?
    pub fn matches_transform(&self, t: crate::transforms::TransformKind) -> bool {
        use crate::transforms::TransformKind as T;
        matches!(
            (self, t),
            (PerturbationKind::RotationScaling, T::RotationScaling)
                | (PerturbationKind::Elastic, T::Elastic)
                | (PerturbationKind::GaussianBlur, T::GaussianBlur)
                | (PerturbationKind::GaussianNoise, T::GaussianNoise)
                | (PerturbationKind::ObjectOcclusion, T::ObjectOcclusion)
                | (PerturbationKind::Snow, T::SnowOcclusion)
        )
    }
}

impl std::str::FromStr for PerturbationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "rotation_scaling" => Ok(PerturbationKind::RotationScaling),
            "elastic" => Ok(PerturbationKind::Elastic),
            "gaussian_blur" | "blur" => Ok(PerturbationKind::GaussianBlur),
            "gaussian_noise" | "noise" => Ok(PerturbationKind::GaussianNoise),
            "object_occlusion" | "occlusion" => Ok(PerturbationKind::ObjectOcclusion),
            "snow" => Ok(PerturbationKind::Snow),
            "wave" => Ok(PerturbationKind::Wave),
            "saturation" => Ok(PerturbationKind::Saturation),
            "adversarial" => Ok(PerturbationKind::Adversarial),
            other => Err(Error::Usage(format!("unknown perturbation kind '{}'", other))),
        }
    }
}

/// l-inf bounded iterated attack parameters. `epsilon` is in `[0,1]` pixel
/// units (the paper's "eps = 2" reads as 2/255 here).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl AttackSpec {
    /// Conventional defaults: 10 steps with step size `2.5 * eps / steps`.
    pub fn new(epsilon: f64) -> Self {
        let steps = 10;
        AttackSpec { epsilon, steps, step_size: 2.5 * epsilon / steps as f64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::Usage(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps < 1 {
            return Err(Error::Usage("attack needs at least one step".into()));
        }
        if self.step_size * self.steps as f64 + 1e-12 < self.epsilon {
            return Err(Error::Usage(format!(
                "budget unreachable: step_size {} * steps {} < epsilon {}",
                self.step_size, self.steps, self.epsilon
            )));
        }
        Ok(())
    }
}

/// One perturbation with its parameters. `severity` is the calibrated knob;
/// the other fields are kind-specific extras with sensible defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub severity: f64,
    pub seed: u64,
    /// Rotation-scaling mixing angle.
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Elastic bump width in pixels; 0 means `min(H,W) / 6`.
    #[serde(default)]
    pub sigma: f64,
    /// Wave wavelength in pixels; 0 means `H / 2`.
    #[serde(default)]
    pub wavelength: f64,
    #[serde(default = "default_slope_lo")]
    pub slope_lo: f64,
    #[serde(default = "default_slope_hi")]
    pub slope_hi: f64,
    /// Attack schedule for `kind == Adversarial` (epsilon = severity).
    #[serde(default = "default_attack_steps")]
    pub attack_steps: usize,
}

fn default_theta() -> f64 {
    std::f64::consts::FRAC_PI_4
}
fn default_slope_lo() -> f64 {
    -2.0
}
fn default_slope_hi() -> f64 {
    2.0
}
fn default_attack_steps() -> usize {
    10
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, severity: f64, seed: u64) -> Self {
        PerturbationSpec {
            kind,
            severity,
            seed,
            theta: default_theta(),
            sigma: 0.0,
            wavelength: 0.0,
            slope_lo: default_slope_lo(),
            slope_hi: default_slope_hi(),
            attack_steps: default_attack_steps(),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.seed = seed;
        s
    }

    pub fn attack_spec(&self) -> AttackSpec {
        let steps = self.attack_steps.max(1);
        AttackSpec { epsilon: self.severity, steps, step_size: 2.5 * self.severity / steps as f64 }
    }
}

/// Model + label context for the adversarial kind. Without a label the
/// model's own prediction is attacked.
pub struct AttackContext<'a> {
    pub model: &'a Model,
    pub label: Option<usize>,
}

fn clip01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn check_image(image: &Tensor) -> Result<(usize, usize, usize)> {
    if image.shape.len() != 3 {
        return Err(Error::Shape(format!("expected [C,H,W] image, got {:?}", image.shape)));
    }
    if image.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Data("image pixels outside [0,1]".into()));
    }
    Ok((image.shape[0], image.shape[1], image.shape[2]))
}

/// Apply one perturbation to an image in `[0,1]`. Severity 0 returns the
/// image unchanged for every kind; output is clipped to `[0,1]` last.
pub fn apply_perturbation(
    image: &Tensor,
    spec: &PerturbationSpec,
    ctx: Option<&AttackContext>,
) -> Result<Tensor> {
    let (c, h, w) = check_image(image)?;
    if spec.severity < 0.0 {
        return Err(Error::Usage(format!("severity must be >= 0, got {}", spec.severity)));
    }
    if spec.severity == 0.0 {
        return Ok(image.clone());
    }
    let mut out = match spec.kind {
        PerturbationKind::RotationScaling => {
            let grid = centered_grid(h, w);
            let field = displace_rotation_scaling(&grid, spec.severity, spec.theta);
            apply_field_to_image(image, &field)?
        }
        PerturbationKind::Elastic => {
            let grid = centered_grid(h, w);
            let sigma = if spec.sigma > 0.0 { spec.sigma } else { (h.min(w) as f64) / 6.0 };
            let mut rng = rng_from(spec.seed);
            let field = displace_elastic(&grid, spec.severity, sigma, &mut rng)?;
            apply_field_to_image(image, &field)?
        }
        PerturbationKind::GaussianBlur => {
            let mut data = Vec::with_capacity(image.data.len());
            for ch in 0..c {
                let plane = &image.data[ch * h * w..(ch + 1) * h * w];
                data.extend(blur_plane(plane, h, w, spec.severity));
            }
            Tensor::new(image.shape.clone(), data)?
        }
        PerturbationKind::GaussianNoise => {
            let mut rng = rng_from(spec.seed);
            let data = image
                .data
                .iter()
                .map(|&v| v + spec.severity * gauss(&mut rng))
                .collect();
            Tensor { shape: image.shape.clone(), data, requires_grad: false, grad: None }
        }
        PerturbationKind::ObjectOcclusion => {
            // Mid-gray disc of radius severity*min(H,W) at a uniform random
            // center. The rim is blended over one pixel: a hard edge makes
            // the accuracy drop jump whenever the radius crosses a lattice
            // distance shared by every image, which defeats calibration.
            let radius = spec.severity * h.min(w) as f64;
            let mut rng = rng_from(spec.seed);
            let ci = rng.gen_range(0..h) as f64;
            let cj = rng.gen_range(0..w) as f64;
            let mut data = image.data.clone();
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let d = ((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2)).sqrt();
                        let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
                        if cover > 0.0 {
                            let p = (ch * h + i) * w + j;
                            data[p] = (1.0 - cover) * data[p] + cover * 0.5;
                        }
                    }
                }
            }
            Tensor::new(image.shape.clone(), data)?
        }
        PerturbationKind::Snow => {
            // severity = expected streak count: floor(s) white segments plus
            // one more with probability frac(s), so the calibration
            // objective is continuous between integer counts. Each streak is
            // a finite 1-pixel-wide segment (the mask has start and end
            // points) with a random length fraction of the image side.
            let mut rng = rng_from(spec.seed);
            let n_lines = spec.severity.floor() as usize
                + usize::from(rng.gen_bool((spec.severity.fract()).clamp(0.0, 1.0)));
            let mut mask = vec![false; h * w];
            for _ in 0..n_lines {
                let i0 = rng.gen_range(0..h) as f64;
                let j0 = rng.gen_range(0..w) as f64;
                let slope = rng.gen_range(spec.slope_lo..spec.slope_hi);
                let len = rng.gen_range(0.25..0.55) * h.min(w) as f64;
                rasterize_segment(&mut mask, h, w, i0, j0, slope, len);
            }
            let mut data = image.data.clone();
            for ch in 0..c {
                for (p, &m) in mask.iter().enumerate() {
                    if m {
                        data[ch * h * w + p] = 1.0; // white streak
                    }
                }
            }
            Tensor::new(image.shape.clone(), data)?
        }
        PerturbationKind::Wave => {
            let lambda = if spec.wavelength > 0.0 { spec.wavelength } else { h as f64 / 2.0 };
            let grid = centered_grid(h, w);
            let tx: Vec<f64> = (0..h * w)
                .map(|p| {
                    grid.x[p]
                        + spec.severity * (2.0 * std::f64::consts::PI * grid.y[p] / lambda).sin()
                })
                .collect();
            let field = DisplacementField { h, w, tx, ty: grid.y.clone() };
            apply_field_to_image(image, &field)?
        }
        PerturbationKind::Saturation => {
            let exp = 1.0 / (1.0 + spec.severity);
            let data = image.data.iter().map(|&v| v.powf(exp)).collect();
            Tensor { shape: image.shape.clone(), data, requires_grad: false, grad: None }
        }
        PerturbationKind::Adversarial => {
            let ctx = ctx.ok_or_else(|| {
                Error::Usage("adversarial perturbation needs a model context".into())
            })?;
            let label = match ctx.label {
                Some(l) => l,
                None => predict_one(ctx.model, image)?,
            };
            let attack = spec.attack_spec();
            bim_attack(image, label, ctx.model, &attack)?
        }
    };
    out.data.iter_mut().for_each(|v| *v = clip01(*v));
    Ok(out)
}

fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn predict_one(model: &Model, image: &Tensor) -> Result<usize> {
    let mut shape = vec![1];
    shape.extend_from_slice(&image.shape);
    let batch = Tensor::new(shape, image.data.clone())?;
    Ok(model.predict(&batch)?[0])
}

/// Rasterize a 1-pixel segment of `len` major-axis steps starting at
/// `(row0, col0)` with the given slope, stepping along the faster axis.
fn rasterize_segment(mask: &mut [bool], h: usize, w: usize, row0: f64, col0: f64, slope: f64, len: f64) {
    let steps = len.round().max(1.0) as usize;
    if slope.abs() <= 1.0 {
        for s in 0..steps {
            let col = col0 + s as f64;
            let row = (row0 + slope * s as f64).round();
            if row >= 0.0 && row < h as f64 && col < w as f64 {
                mask[row as usize * w + col as usize] = true;
            }
        }
    } else {
        let inv = 1.0 / slope;
        for s in 0..steps {
            let row = row0 + s as f64;
            let col = (col0 + inv * s as f64).round();
            if col >= 0.0 && col < w as f64 && row < h as f64 {
                mask[row as usize * w + col as usize] = true;
            }
        }
    }
}

/// Mathematical sign with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Basic iterative method: repeat `x <- clip_eps(clip_[0,1](x + step *
/// sign(grad_x loss)))`; the l-inf distance to the clean image never exceeds
/// `epsilon`.
pub fn bim_attack(image: &Tensor, label: usize, model: &Model, spec: &AttackSpec) -> Result<Tensor> {
    spec.validate()?;
    check_image(image)?;
    if spec.epsilon == 0.0 {
        return Ok(image.clone());
    }
    let mut shape = vec![1];
    shape.extend_from_slice(&image.shape);
    let batch = Tensor::new(shape, image.data.clone())?;
    let adv = bim_attack_batch(&batch, &[label], model, spec)?;
    Tensor::new(image.shape.clone(), adv.data)
}

/// Batched BIM. Per-image gradients are independent (the batch loss is a
/// mean and `sign` ignores positive scaling), so this equals attacking each
/// image separately.
pub fn bim_attack_batch(
    images: &Tensor,
    labels: &[usize],
    model: &Model,
    spec: &AttackSpec,
) -> Result<Tensor> {
    spec.validate()?;
    if images.shape.len() != 4 || images.shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "bim: images {:?} vs {} labels",
            images.shape,
            labels.len()
        )));
    }
    if spec.epsilon == 0.0 {
        return Ok(images.clone());
    }
    let x0 = &images.data;
    let mut x = images.clone();
    for _ in 0..spec.steps {
        let mut tape = Tape::new();
        let input = tape.leaf_with_grad(&x)?;
        let pass = model.forward(&mut tape, input)?;
        let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
        tape.backward(loss)?;
        let grad = tape
            .grad(input)
            .ok_or_else(|| Error::Numerical("attack input received no gradient".into()))?;
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("attack gradient".into()));
        }
        for (i, v) in x.data.iter_mut().enumerate() {
            let stepped = clip01(*v + spec.step_size * sign(grad[i]));
            *v = stepped.clamp(ball_lo(x0[i], spec.epsilon), ball_hi(x0[i], spec.epsilon));
        }
    }
    Ok(x)
}

// The l-inf bound must survive recomputation: `x0 + eps` can round up so
// that `(x0 + eps) - x0 > eps` by one ulp. Tighten the interval ends to the
// nearest representable values whose recomputed distance stays within eps.
fn ball_hi(x0: f64, eps: f64) -> f64 {
    let mut hi = x0 + eps;
    while hi - x0 > eps {
        hi = hi.next_down();
    }
    hi
}

fn ball_lo(x0: f64, eps: f64) -> f64 {
    let mut lo = x0 - eps;
    while x0 - lo > eps {
        lo = lo.next_up();
    }
    lo
}

/// Perturb every image of a `[N,C,H,W]` batch under one spec, deriving an
/// independent sub-seed per image from `eval_seed` so the result does not
/// depend on evaluation order. The adversarial kind is model-bound and goes
/// through `harness::eval::perturbed_dataset` instead.
pub fn perturb_batch(images: &Tensor, spec: &PerturbationSpec, eval_seed: u64) -> Result<Tensor> {
    if spec.kind == PerturbationKind::Adversarial {
        return Err(Error::Usage(
            "adversarial batches need a model; use perturbed_dataset".into(),
        ));
    }
    if images.shape.len() != 4 {
        return Err(Error::Shape(format!("expected [N,C,H,W], got {:?}", images.shape)));
    }
    let n = images.shape[0];
    let chw: usize = images.shape[1..].iter().product();
    let mut out = Vec::with_capacity(images.data.len());
    for i in 0..n {
        let img = Tensor::new(
            images.shape[1..].to_vec(),
            images.data[i * chw..(i + 1) * chw].to_vec(),
        )?;
        let per_image =
            spec.with_seed(crate::rng::derive_seed_n(eval_seed, spec.kind.name(), i as u64));
        out.extend(apply_perturbation(&img, &per_image, None)?.data);
    }
    Tensor::new(images.shape.clone(), out)
}

/// Mean squared error between two equally sized image sets. `pixel_scale`
/// rescales pixel values first (255.0 reproduces byte-scale magnitudes).
pub fn mse_pair(clean: &[Tensor], perturbed: &[Tensor], pixel_scale: f64) -> Result<f64> {
    if clean.len() != perturbed.len() {
        return Err(Error::Usage(format!(
            "mse_pair: {} clean vs {} perturbed images",
            clean.len(),
            perturbed.len()
        )));
    }
    if clean.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in clean.iter().zip(perturbed) {
        if a.shape != b.shape {
            return Err(Error::Shape(format!("mse_pair: {:?} vs {:?}", a.shape, b.shape)));
        }
        for (x, y) in a.data.iter().zip(&b.data) {
            let d = pixel_scale * (x - y);
            total += d * d;
        }
        count += a.data.len();
    }
    Ok(total / count as f64)
}
