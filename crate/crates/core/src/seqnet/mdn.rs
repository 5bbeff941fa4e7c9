//! Mixture-density output head: activation transforms, the bivariate
//! Gaussian density, the combined padding/likelihood loss, and the
//! analytic gradients of that loss with respect to the raw outputs.

use crate::types::{FuturePoint, MdnStep, MixComponent, NormStats};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Natural log of the likelihood floor (1e-300).
const LOG_LIKELIHOOD_FLOOR: f64 = -690.77552789821368;

/// Correlation magnitude limit; tanh output saturating beyond this is
/// clamped so downstream densities stay finite.
const CORR_LIMIT: f64 = 1.0 - 1e-6;

/// Layout of one raw output step: `[p_hat | pi_hat*M | mux_hat*M |
/// muy_hat*M | sigx_hat*M | sigy_hat*M | rho_hat*M]`.
#[derive(Debug, Clone, Copy)]
pub struct RawLayout {
    pub mixtures: usize,
}

impl RawLayout {
    pub fn new(mixtures: usize) -> Self {
        Self { mixtures }
    }

    pub fn len(&self) -> usize {
        1 + 6 * self.mixtures
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn pi(&self, j: usize) -> usize {
        1 + j
    }

    pub fn mu_x(&self, j: usize) -> usize {
        1 + self.mixtures + j
    }

    pub fn mu_y(&self, j: usize) -> usize {
        1 + 2 * self.mixtures + j
    }

    pub fn sig_x(&self, j: usize) -> usize {
        1 + 3 * self.mixtures + j
    }

    pub fn sig_y(&self, j: usize) -> usize {
        1 + 4 * self.mixtures + j
    }

    pub fn rho(&self, j: usize) -> usize {
        1 + 5 * self.mixtures + j
    }
}

/// Normalize an observation vector per channel: `(x - mean) / stdev`.
pub fn normalize(x: &[f64; 4], s: &NormStats) -> [f64; 4] {
    let mut out = [0.0; 4];
    for c in 0..4 {
        out[c] = (x[c] - s.mean[c]) / s.stdev[c];
    }
    out
}

/// Inverse of [`normalize`].
pub fn denormalize(x: &[f64; 4], s: &NormStats) -> [f64; 4] {
    let mut out = [0.0; 4];
    for c in 0..4 {
        out[c] = x[c] * s.stdev[c] + s.mean[c];
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Transforms one raw output vector into a valid `MdnStep`.
///
/// `pad_prob = 1 / (1 + exp(p_hat))`, weights by softmax, correlations by
/// tanh (clamped just inside the open interval), and means/deviations
/// de-scaled back to meters with the inverse of the input normalization
/// on the x and y channels.
pub fn mdn_activate(raw: &[f64], stats: &NormStats) -> MdnStep {
    let m = (raw.len() - 1) / 6;
    debug_assert_eq!(raw.len(), 1 + 6 * m);
    let lay = RawLayout::new(m);

    let pad_prob = (1.0 / (1.0 + raw[lay.pad()].exp())).clamp(1e-15, 1.0 - 1e-15);

    // softmax over the weight logits, max-shifted
    let max_pi = (0..m).map(|j| raw[lay.pi(j)]).fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = (0..m).map(|j| (raw[lay.pi(j)] - max_pi).exp()).collect();
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }

    let components = (0..m)
        .map(|j| MixComponent {
            weight: weights[j],
            mean: (
                raw[lay.mu_x(j)] * stats.stdev[0] + stats.mean[0],
                raw[lay.mu_y(j)] * stats.stdev[1] + stats.mean[1],
            ),
            stdev: (
                raw[lay.sig_x(j)].exp() * stats.stdev[0],
                raw[lay.sig_y(j)].exp() * stats.stdev[1],
            ),
            corr: raw[lay.rho(j)].tanh().clamp(-CORR_LIMIT, CORR_LIMIT),
        })
        .collect();

    MdnStep { pad_prob, components }
}

/// Log density of a bivariate Gaussian component at `point`.
pub fn bivariate_log_density(point: (f64, f64), comp: &MixComponent) -> f64 {
    let (s1, s2) = comp.stdev;
    let rho = comp.corr;
    let q = 1.0 - rho * rho;
    let u1 = (point.0 - comp.mean.0) / s1;
    let u2 = (point.1 - comp.mean.1) / s2;
    let z = u1 * u1 + u2 * u2 - 2.0 * rho * u1 * u2;
    -(2.0 * std::f64::consts::PI * s1 * s2 * q.sqrt()).ln() - z / (2.0 * q)
}

/// Density of a bivariate Gaussian component at `point`.
pub fn bivariate_density(point: (f64, f64), comp: &MixComponent) -> f64 {
    bivariate_log_density(point, comp).exp()
}

/// Log of the mixture likelihood at `point`, evaluated with
/// log-sum-exp and floored at `ln(1e-300)`.
pub fn mixture_log_likelihood(step: &MdnStep, point: (f64, f64)) -> f64 {
    let logs: Vec<f64> = step
        .components
        .iter()
        .map(|c| c.weight.max(1e-300).ln() + bivariate_log_density(point, c))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return LOG_LIKELIHOOD_FLOOR;
    }
    let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    (max + sum.ln()).max(LOG_LIKELIHOOD_FLOOR)
}

/// Mixture density at `point` (sum of weighted component densities).
pub fn mixture_density(step: &MdnStep, point: (f64, f64)) -> f64 {
    step.components
        .iter()
        .map(|c| c.weight * bivariate_density(point, c))
        .sum()
}

/// Combined per-step loss: the negative log mixture likelihood of the
/// truth position (weighted by `beta` at padded steps) plus `alpha`
/// times the padding cross entropy.
pub fn step_loss(step: &MdnStep, truth: &FuturePoint, alpha: f64, beta: f64) -> f64 {
    let g = truth.is_pad;
    let p = step.pad_prob;
    let ce = -(if g { p.ln() } else { (1.0 - p).ln() });
    let nll = -mixture_log_likelihood(step, (truth.x, truth.y));
    let bf = if g { beta } else { 1.0 };
    bf * nll + alpha * ce
}

/// Loss of one raw output step plus its gradient with respect to every
/// raw value. Returns `(loss, activated step, d_raw)`.
///
/// The sampled-feedback path never receives gradient, so this together
/// with the recurrent backward pass is the complete chain rule for
/// training.
pub fn step_loss_and_raw_grad(
    raw: &[f64],
    stats: &NormStats,
    truth: &FuturePoint,
    alpha: f64,
    beta: f64,
) -> (f64, MdnStep, Vec<f64>) {
    let m = (raw.len() - 1) / 6;
    let lay = RawLayout::new(m);
    let step = mdn_activate(raw, stats);
    let loss = step_loss(&step, truth, alpha, beta);

    let mut grad = vec![0.0; raw.len()];
    let g = truth.is_pad;
    let bf = if g { beta } else { 1.0 };

    // padding head: d(alpha*CE)/dp_hat = alpha * (g - p)
    let p = 1.0 / (1.0 + raw[lay.pad()].exp());
    grad[lay.pad()] = alpha * ((if g { 1.0 } else { 0.0 }) - p);

    let point = (truth.x, truth.y);
    let log_s = mixture_log_likelihood(&step, point);
    if log_s > LOG_LIKELIHOOD_FLOOR {
        // responsibilities r_j = pi_j N_j / S
        for (j, c) in step.components.iter().enumerate() {
            let lw = c.weight.max(1e-300).ln() + bivariate_log_density(point, c);
            let r = (lw - log_s).exp();

            grad[lay.pi(j)] = bf * (c.weight - r);

            let (s1, s2) = c.stdev;
            let rho = c.corr;
            let q = 1.0 - rho * rho;
            let u1 = (point.0 - c.mean.0) / s1;
            let u2 = (point.1 - c.mean.1) / s2;
            let z = u1 * u1 + u2 * u2 - 2.0 * rho * u1 * u2;

            let dlog_dmu1 = (u1 - rho * u2) / (s1 * q);
            let dlog_dmu2 = (u2 - rho * u1) / (s2 * q);
            let dlog_ds1 = (u1 * u1 - rho * u1 * u2 - q) / (s1 * q);
            let dlog_ds2 = (u2 * u2 - rho * u1 * u2 - q) / (s2 * q);
            let dlog_drho = rho / q + (u1 * u2) / q - z * rho / (q * q);

            // chain through the de-scaling: mu = mu_hat*sigma_s + mu_s,
            // sigma = exp(sig_hat)*sigma_s, rho = tanh(rho_hat)
            grad[lay.mu_x(j)] = bf * (-r * dlog_dmu1) * stats.stdev[0];
            grad[lay.mu_y(j)] = bf * (-r * dlog_dmu2) * stats.stdev[1];
            grad[lay.sig_x(j)] = bf * (-r * dlog_ds1) * s1;
            grad[lay.sig_y(j)] = bf * (-r * dlog_ds2) * s2;
            let th = raw[lay.rho(j)].tanh();
            grad[lay.rho(j)] = bf * (-r * dlog_drho) * (1.0 - th * th);
        }
    }

    (loss, step, grad)
}

/// Stable cross entropy of the padding head straight from the logit.
/// Used by tests to cross-check the clamped `step_loss` path.
pub fn pad_cross_entropy_from_logit(p_hat: f64, is_pad: bool) -> f64 {
    // ln p = -softplus(p_hat), ln(1-p) = p_hat - softplus(p_hat)
    if is_pad {
        softplus(p_hat)
    } else {
        softplus(p_hat) - p_hat
    }
}

/// Draws one position from the step's mixture: component by categorical
/// weight, then a correlated bivariate normal draw.
pub fn sample_position<R: Rng + ?Sized>(step: &MdnStep, rng: &mut R) -> (f64, f64) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut idx = step.components.len() - 1;
    for (j, c) in step.components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            idx = j;
            break;
        }
    }
    let c = &step.components[idx];
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    let x = c.mean.0 + c.stdev.0 * z1;
    let y = c.mean.1 + c.stdev.1 * (c.corr * z1 + (1.0 - c.corr * c.corr).sqrt() * z2);
    (x, y)
}

/// The pinned sampler used for gradient verification: always component
/// zero, zero noise.
pub fn pinned_position(step: &MdnStep) -> (f64, f64) {
    step.components[0].mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn unit_comp() -> MixComponent {
        MixComponent { weight: 1.0, mean: (0.0, 0.0), stdev: (1.0, 1.0), corr: 0.0 }
    }

    #[test]
    fn density_at_mean_unit_isotropic() {
        let d = bivariate_density((0.0, 0.0), &unit_comp());
        assert_relative_eq!(d, 1.0 / (2.0 * PI), max_relative = 1e-12);
    }

    #[test]
    fn zero_correlation_factorizes() {
        // independent oracle: product of two univariate normal densities
        let comp = MixComponent { weight: 1.0, mean: (0.0, 0.0), stdev: (1.0, 2.0), corr: 0.0 };
        let (x, y) = (0.3, -0.7);
        let uni = |v: f64, s: f64| (-v * v / (2.0 * s * s)).exp() / ((2.0 * PI).sqrt() * s);
        let expected = uni(x, 1.0) * uni(y, 2.0);
        assert_relative_eq!(bivariate_density((x, y), &comp), expected, max_relative = 1e-12);
    }

    #[test]
    fn correlated_density_integrates_to_one() {
        // grid quadrature over +-8 sigma at sigma/50 resolution
        let comp = MixComponent { weight: 1.0, mean: (0.0, 0.0), stdev: (1.0, 1.0), corr: 0.5 };
        let step = 1.0 / 50.0;
        let half = (8.0 / step) as i64;
        let mut sum = 0.0;
        for i in -half..=half {
            for j in -half..=half {
                sum += bivariate_density((i as f64 * step, j as f64 * step), &comp);
            }
        }
        let integral = sum * step * step;
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
    }

    #[test]
    fn activate_uniform_logits_gives_uniform_weights() {
        let m = 6;
        let raw = vec![0.0; 1 + 6 * m];
        let step = mdn_activate(&raw, &NormStats::identity());
        for c in &step.components {
            assert_relative_eq!(c.weight, 1.0 / 6.0, max_relative = 1e-12);
        }
        assert_relative_eq!(step.pad_prob, 0.5, max_relative = 1e-12);
        assert_eq!(step.components[0].corr, 0.0);
        // sig_hat = 0 with unit channel scale -> 1 m deviation
        assert_relative_eq!(step.components[0].stdev.0, 1.0, max_relative = 1e-12);
        step.check_invariants().unwrap();
    }

    #[test]
    fn activate_descales_with_stats() {
        let stats = NormStats { mean: [2.0, -3.0, 0.0, 0.0], stdev: [4.0, 0.5, 1.0, 1.0] };
        let m = 2;
        let lay = RawLayout::new(m);
        let mut raw = vec![0.0; lay.len()];
        raw[lay.mu_x(0)] = 1.0;
        raw[lay.mu_y(0)] = 2.0;
        let step = mdn_activate(&raw, &stats);
        assert_relative_eq!(step.components[0].mean.0, 1.0 * 4.0 + 2.0, max_relative = 1e-12);
        assert_relative_eq!(step.components[0].mean.1, 2.0 * 0.5 - 3.0, max_relative = 1e-12);
        assert_relative_eq!(step.components[0].stdev.0, 4.0, max_relative = 1e-12);
        assert_relative_eq!(step.components[0].stdev.1, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn normalize_denormalize_roundtrip() {
        let stats = NormStats { mean: [1.0, -2.0, 3.5, 0.1], stdev: [2.0, 0.25, 5.0, 0.7] };
        let x = [4.2, -1.1, 6.0, -0.4];
        let n = normalize(&x, &stats);
        let back = denormalize(&n, &stats);
        for c in 0..4 {
            assert_relative_eq!(back[c], x[c], epsilon = 1e-12);
        }
        let at_mean = normalize(&stats.mean, &stats);
        assert_eq!(at_mean, [0.0; 4]);
        // mean 0, stdev 2, input 4 -> 2
        let s2 = NormStats { mean: [0.0; 4], stdev: [2.0; 4] };
        assert_eq!(normalize(&[4.0; 4], &s2)[0], 2.0);
    }

    #[test]
    fn step_loss_symmetric_ce() {
        // g=0, pad_prob=0.5 -> CE contribution is alpha*ln 2
        let step = MdnStep { pad_prob: 0.5, components: vec![unit_comp()] };
        let truth = FuturePoint { x: 0.0, y: 0.0, is_pad: false };
        let alpha = 2.5;
        let with_ce = step_loss(&step, &truth, alpha, 10.0);
        let without_ce = step_loss(&step, &truth, 0.0, 10.0);
        assert_relative_eq!(with_ce - without_ce, alpha * 2.0_f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn step_loss_at_mean_is_log_two_pi() {
        // single unit component at the truth, alpha=0
        let step = MdnStep { pad_prob: 0.5, components: vec![unit_comp()] };
        let truth = FuturePoint { x: 0.0, y: 0.0, is_pad: false };
        let loss = step_loss(&step, &truth, 0.0, 10.0);
        assert_relative_eq!(loss, (2.0 * PI).ln(), max_relative = 1e-12);
    }

    #[test]
    fn pad_steps_scale_nll_by_beta() {
        let step = MdnStep {
            pad_prob: 0.5,
            components: vec![MixComponent {
                weight: 1.0,
                mean: (1.0, 2.0),
                stdev: (0.7, 1.3),
                corr: 0.2,
            }],
        };
        let real = FuturePoint { x: 0.4, y: 1.1, is_pad: false };
        let padded = FuturePoint { x: 0.4, y: 1.1, is_pad: true };
        let beta = 10.0;
        let nll_real = step_loss(&step, &real, 0.0, beta);
        let nll_pad = step_loss(&step, &padded, 0.0, beta);
        assert_relative_eq!(nll_pad, beta * nll_real, max_relative = 1e-12);
    }

    #[test]
    fn loss_finite_far_from_mass() {
        let step = MdnStep {
            pad_prob: 0.5,
            components: vec![MixComponent {
                weight: 1.0,
                mean: (0.0, 0.0),
                stdev: (1e-3, 1e-3),
                corr: 0.0,
            }],
        };
        let truth = FuturePoint { x: 1e6, y: -1e6, is_pad: false };
        let loss = step_loss(&step, &truth, 1.0, 10.0);
        assert!(loss.is_finite());
    }

    #[test]
    fn raw_gradient_matches_finite_differences() {
        let stats = NormStats { mean: [1.5, -0.5, 4.0, 0.0], stdev: [3.0, 2.0, 1.5, 0.9] };
        let m = 3;
        let lay = RawLayout::new(m);
        let mut raw: Vec<f64> = (0..lay.len()).map(|i| ((i * 37 % 13) as f64 - 6.0) * 0.11).collect();
        raw[lay.pad()] = 0.3;
        for &truth in &[
            FuturePoint { x: 0.8, y: -1.4, is_pad: false },
            FuturePoint { x: 0.8, y: -1.4, is_pad: true },
        ] {
            let (_, _, grad) = step_loss_and_raw_grad(&raw, &stats, &truth, 1.3, 7.0);
            let eps = 1e-6;
            for i in 0..raw.len() {
                let mut plus = raw.clone();
                plus[i] += eps;
                let mut minus = raw.clone();
                minus[i] -= eps;
                let lp = step_loss(&mdn_activate(&plus, &stats), &truth, 1.3, 7.0);
                let lm = step_loss(&mdn_activate(&minus, &stats), &truth, 1.3, 7.0);
                let fd = (lp - lm) / (2.0 * eps);
                let denom = grad[i].abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((grad[i] - fd) / denom).abs() < 1e-5,
                    "raw[{i}]: analytic {} vs fd {}",
                    grad[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn sampled_mean_converges_to_component_mean() {
        // Monte Carlo: 10k draws from a single-component step
        let step = MdnStep {
            pad_prob: 0.5,
            components: vec![MixComponent {
                weight: 1.0,
                mean: (3.0, -2.0),
                stdev: (0.5, 1.2),
                corr: 0.3,
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let (x, y) = sample_position(&step, &mut rng);
            sx += x;
            sy += y;
        }
        let (mx, my) = (sx / n as f64, sy / n as f64);
        let se_x = 0.5 / (n as f64).sqrt();
        let se_y = 1.2 / (n as f64).sqrt();
        assert!((mx - 3.0).abs() < 3.0 * se_x, "mean x {mx}");
        assert!((my + 2.0).abs() < 3.0 * se_y, "mean y {my}");
    }

    #[test]
    fn stable_ce_matches_direct_form() {
        for &p_hat in &[-3.0, -0.2, 0.0, 0.7, 4.0] {
            let p: f64 = 1.0 / (1.0 + p_hat.exp());
            assert_relative_eq!(
                pad_cross_entropy_from_logit(p_hat, true),
                -p.ln(),
                max_relative = 1e-12
            );
            assert_relative_eq!(
                pad_cross_entropy_from_logit(p_hat, false),
                -(1.0 - p).ln(),
                max_relative = 1e-12
            );
        }
    }
}
