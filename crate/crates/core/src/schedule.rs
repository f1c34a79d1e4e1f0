//! Noise schedules, forward noising and the DDIM reverse step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_sample: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { kind: ScheduleKind::Linear, t_train: 1000, beta_start: 1e-4, beta_end: 0.02, t_sample: 50 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.t_train, self.beta_start, self.beta_end, self.t_sample)
    }
}

/// Fixed diffusion hyperparameters: `beta_s`, the cumulative products
/// `alpha_t = prod_{s<=t} (1 - beta_s)` and the inference sub-sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    /// `alphas_cum[t]` for `t` in `0..=t_train`, with `alphas_cum[0] = 1`.
    alphas_cum: Vec<f64>,
    /// Strictly decreasing timesteps visited at inference.
    sample_steps: Vec<usize>,
}

pub fn make_schedule(
    kind: ScheduleKind,
    t_train: usize,
    beta_start: f64,
    beta_end: f64,
    t_sample: usize,
) -> Result<NoiseSchedule> {
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!("beta range must satisfy 0 < {beta_start} <= {beta_end} < 1")));
    }
    if t_train == 0 {
        return Err(Error::config("t_train must be positive"));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear if t_train == 1 => vec![beta_start],
        ScheduleKind::Linear => {
            (0..t_train).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64).collect()
        }
    };
    let config = ScheduleConfig { kind, t_train, beta_start, beta_end, t_sample };
    NoiseSchedule::from_betas_with(config, betas, t_sample)
}

impl NoiseSchedule {
    /// Schedule from an explicit `beta_1..beta_T` sequence.
    pub fn from_betas(betas: Vec<f64>, t_sample: usize) -> Result<Self> {
        let config = ScheduleConfig {
            kind: ScheduleKind::Linear,
            t_train: betas.len(),
            beta_start: betas.first().copied().unwrap_or(0.0),
            beta_end: betas.last().copied().unwrap_or(0.0),
            t_sample,
        };
        Self::from_betas_with(config, betas, t_sample)
    }

    fn from_betas_with(config: ScheduleConfig, betas: Vec<f64>, t_sample: usize) -> Result<Self> {
        let t_train = betas.len();
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config(format!("beta {b} outside (0, 1)")));
        }
        if t_sample == 0 || t_sample > t_train {
            return Err(Error::config(format!("t_sample {t_sample} must be in 1..={t_train}")));
        }
        let mut alphas_cum = Vec::with_capacity(t_train + 1);
        alphas_cum.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cum.push(acc);
        }
        let sample_steps = (1..=t_sample).rev().map(|i| i * t_train / t_sample).collect();
        Ok(NoiseSchedule { config, betas, alphas_cum, sample_steps })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    pub fn t_sample(&self) -> usize {
        self.sample_steps.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_t`, defined for `0..=t_train`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas_cum[t]
    }

    pub fn sample_steps(&self) -> &[usize] {
        &self.sample_steps
    }

    /// `(t, t_prev)` pairs in sampling order; the final pair ends at `t = 0`.
    pub fn step_pairs(&self) -> Vec<(usize, usize)> {
        self.sample_steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.sample_steps.get(i + 1).copied().unwrap_or(0)))
            .collect()
    }

    pub fn predecessor(&self, t: usize) -> Result<usize> {
        let i = self
            .sample_steps
            .iter()
            .position(|&s| s == t)
            .ok_or_else(|| Error::invalid(format!("t={t} is not a sampling step")))?;
        Ok(self.sample_steps.get(i + 1).copied().unwrap_or(0))
    }

    fn check_pair(&self, t: usize, t_prev: usize) -> Result<()> {
        let expected = self.predecessor(t)?;
        if expected != t_prev {
            return Err(Error::invalid(format!(
                "t_prev={t_prev} is not the predecessor of t={t} (expected {expected})"
            )));
        }
        Ok(())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_train() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.t_train())));
        }
        Ok(())
    }

    /// `x_t = sqrt(alpha_t) x0 + sqrt(1 - alpha_t) eps`
    pub fn forward_noise<T: Element>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        x0.expect_same_shape(eps, "forward_noise")?;
        let a = self.alpha(t);
        let (ca, cn) = (T::from_f64_lossy(a.sqrt()), T::from_f64_lossy((1.0 - a).sqrt()));
        x0.zip_map(eps, "forward_noise", |x, e| ca * x + cn * e)
    }

    /// Per-sample timesteps variant used by the trainers.
    pub fn forward_noise_batch<T: Element>(&self, x0: &Tensor<T>, ts: &[usize], eps: &Tensor<T>) -> Result<Tensor<T>> {
        x0.expect_same_shape(eps, "forward_noise")?;
        let n = ts.len();
        if x0.shape().first() != Some(&n) {
            return Err(Error::ShapeMismatch { op: "forward_noise", lhs: x0.shape().to_vec(), rhs: vec![n] });
        }
        let per = x0.numel() / n.max(1);
        let mut out = Vec::with_capacity(x0.numel());
        for (b, &t) in ts.iter().enumerate() {
            self.check_t(t)?;
            let a = self.alpha(t);
            let (ca, cn) = (T::from_f64_lossy(a.sqrt()), T::from_f64_lossy((1.0 - a).sqrt()));
            let xs = &x0.data()[b * per..(b + 1) * per];
            let es = &eps.data()[b * per..(b + 1) * per];
            out.extend(xs.iter().zip(es).map(|(&x, &e)| ca * x + cn * e));
        }
        Tensor::new(x0.shape().to_vec(), out)
    }

    /// DDIM noise coefficient for a valid `(t, t_prev)` pair.
    pub fn sigma(&self, t: usize, t_prev: usize, eta: f64) -> Result<f64> {
        self.check_pair(t, t_prev)?;
        if eta < 0.0 {
            return Err(Error::invalid(format!("eta {eta} must be >= 0")));
        }
        Ok(ddim_sigma(self.alpha(t), self.alpha(t_prev), eta))
    }

    /// One DDIM reverse step, drawing fresh standard-normal noise from `rng`
    /// only when `sigma_t > 0`.
    #[allow(clippy::too_many_arguments)]
    pub fn ddim_step<T: Element, R: Rng + ?Sized>(
        &self,
        z_t: &Tensor<T>,
        eps_pred: &Tensor<T>,
        t: usize,
        t_prev: usize,
        eta: f64,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let sigma = self.sigma(t, t_prev, eta)?;
        let noise = (sigma > 0.0).then(|| Tensor::randn(z_t.shape().to_vec(), rng));
        self.ddim_step_with_noise(z_t, eps_pred, t, t_prev, eta, noise.as_ref())
    }

    /// DDIM step with caller-supplied noise (`None` means zero noise).
    pub fn ddim_step_with_noise<T: Element>(
        &self,
        z_t: &Tensor<T>,
        eps_pred: &Tensor<T>,
        t: usize,
        t_prev: usize,
        eta: f64,
        noise: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        z_t.expect_same_shape(eps_pred, "ddim_step")?;
        let sigma = self.sigma(t, t_prev, eta)?;
        let (a_t, a_prev) = (self.alpha(t), self.alpha(t_prev));
        let dir2 = 1.0 - a_prev - sigma * sigma;
        if dir2 < -1e-12 {
            return Err(Error::config(format!(
                "1 - alpha_prev - sigma^2 = {dir2:e} < 0 at t={t}; schedule misconfigured"
            )));
        }
        // z_prev = c_z * z_t + c_e * eps_pred + sigma * noise
        let c_x0 = a_prev.sqrt() / a_t.sqrt();
        let c_z = T::from_f64_lossy(c_x0);
        let c_e = T::from_f64_lossy(dir2.max(0.0).sqrt() - c_x0 * (1.0 - a_t).sqrt());
        let mean = z_t.zip_map(eps_pred, "ddim_step", |z, e| c_z * z + c_e * e)?;
        match noise {
            Some(n) if sigma > 0.0 => mean.axpy(T::from_f64_lossy(sigma), n),
            _ => Ok(mean),
        }
    }

    /// Diffuse from `t_prev` forward to `t`:
    /// `sqrt(alpha_t / alpha_prev) z_prev + sqrt(1 - alpha_t / alpha_prev) eps`.
    pub fn renoise<T: Element, R: Rng + ?Sized>(
        &self,
        z_prev: &Tensor<T>,
        t: usize,
        t_prev: usize,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let (a_t, a_prev) = (self.alpha(t), self.alpha(t_prev));
        if t > self.t_train() || a_t > a_prev {
            return Err(Error::invalid(format!("renoise requires alpha_t <= alpha_prev (t={t}, t_prev={t_prev})")));
        }
        let ratio = a_t / a_prev;
        if ratio == 1.0 {
            return Ok(z_prev.clone());
        }
        let eps = Tensor::randn(z_prev.shape().to_vec(), rng);
        let (cz, cn) = (T::from_f64_lossy(ratio.sqrt()), T::from_f64_lossy((1.0 - ratio).sqrt()));
        z_prev.zip_map(&eps, "renoise", |z, e| cz * z + cn * e)
    }
}

/// `eta * sqrt((1 - alpha_prev) / (1 - alpha_t)) * sqrt(1 - alpha_t / alpha_prev)`
pub fn ddim_sigma(alpha_t: f64, alpha_prev: f64, eta: f64) -> f64 {
    if eta == 0.0 || alpha_t >= alpha_prev {
        return 0.0;
    }
    eta * ((1.0 - alpha_prev) / (1.0 - alpha_t)).sqrt() * (1.0 - alpha_t / alpha_prev).sqrt()
}
