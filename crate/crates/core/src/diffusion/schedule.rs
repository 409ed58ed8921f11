use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Linear-beta DDPM coefficients for steps `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    fn idx(&self, t: usize) -> usize {
        assert!(t >= 1 && t <= self.steps, "step {t} outside 1..={}", self.steps);
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[self.idx(t)]
    }
}

/// `β_t` linear from `beta_start` to `beta_end`; `σ_t = sqrt(β_t)` except `σ_1 = 0`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need T ≥ 1 and 0 < beta_start ≤ beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma = beta
        .iter()
        .enumerate()
        .map(|(i, b)| if i == 0 { 0.0 } else { b.sqrt() })
        .collect();
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `sqrt(ᾱ)·x0 + sqrt(1−ᾱ)·eps`.
pub fn add_noise_with(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    check_same("add_noise", x0, eps)?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

pub fn add_noise(x0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    add_noise_with(x0, eps, sched.alpha_bar(t))
}

/// `(x − ((1−α)/sqrt(1−ᾱ))·ε̂)/sqrt(α) + σ·z`.
pub fn ddpm_update(x: &Tensor, eps_hat: &Tensor, alpha: f64, alpha_bar: f64, sigma: f64, z: &Tensor) -> Result<Tensor> {
    check_same("ddpm_step", x, eps_hat)?;
    check_same("ddpm_step", x, z)?;
    let coef = if alpha == 1.0 { 0.0 } else { (1.0 - alpha) / (1.0 - alpha_bar).sqrt() };
    let root = alpha.sqrt();
    let data = x
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((x, e), z)| (x - coef * e) / root + sigma * z)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn ddpm_step(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule, z: &Tensor) -> Result<Tensor> {
    ddpm_update(x_t, eps_hat, sched.alpha(t), sched.alpha_bar(t), sched.sigma(t), z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step() {
        let s = build_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.1);
        assert_eq!(s.alpha(1), s.alpha_bar(1));
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = build_schedule(50, 0.002, 0.2).unwrap();
        for t in 2..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.sigma(2) > 0.0);
    }

    #[test]
    fn cumulative_product_oracle() {
        let s = build_schedule(50, 0.002, 0.2).unwrap();
        for t in 1..=50 {
            let beta = 0.002 + (0.2 - 0.002) * (t - 1) as f64 / 49.0;
            let prod: f64 = (1..=t)
                .map(|s| 1.0 - (0.002 + (0.2 - 0.002) * (s - 1) as f64 / 49.0))
                .product();
            assert!((s.beta(t) - beta).abs() < 1e-14);
            assert!((s.alpha_bar(t) - prod).abs() < 1e-14);
        }
    }

    #[test]
    fn invalid_range_is_config_error() {
        assert!(build_schedule(10, 0.0, 0.1).is_err());
        assert!(build_schedule(10, 0.2, 0.1).is_err());
        assert!(build_schedule(10, 0.1, 1.0).is_err());
        assert!(build_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn noise_limits_and_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let eps = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(add_noise_with(&x0, &eps, 1.0).unwrap(), x0);
        assert_eq!(add_noise_with(&x0, &eps, 0.0).unwrap(), eps);
        let s = build_schedule(50, 0.002, 0.2).unwrap();
        let xt = add_noise(&x0, &eps, 17, &s).unwrap();
        let ab = s.alpha_bar(17);
        for ((o, x), e) in xt.data().iter().zip(x0.data()).zip(eps.data()) {
            assert_eq!(*o, ab.sqrt() * x + (1.0 - ab).sqrt() * e);
        }
    }

    #[test]
    fn ddpm_update_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let zero = Tensor::zeros(&[2, 3]);
        let y = ddpm_update(&x, &zero, 0.81, 0.5, 0.0, &zero).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b / 0.9);
        }
        let e = Tensor::randn(&[2, 3], 1.0, &mut rng);
        assert_eq!(ddpm_update(&x, &e, 1.0, 1.0, 0.0, &zero).unwrap(), x);

        let s = build_schedule(50, 0.002, 0.2).unwrap();
        let z = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let out = ddpm_step(&x, &e, 9, &s, &z).unwrap();
        let (a, ab, sg) = (s.alpha(9), s.alpha_bar(9), s.sigma(9));
        for (i, o) in out.data().iter().enumerate() {
            let want = (1.0 / a.sqrt()) * (x.data()[i] - ((1.0 - a) / (1.0 - ab).sqrt()) * e.data()[i]) + sg * z.data()[i];
            assert!((o - want).abs() <= 1e-12 * want.abs().max(1.0), "{o} vs {want}");
        }
    }
}
