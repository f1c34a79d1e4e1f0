//! Noise-schedule arithmetic against closed forms and Monte-Carlo estimates.

use magic_core::rng::stream;
use magic_core::schedule::{ddim_sigma, make_schedule, NoiseSchedule, ScheduleKind};
use magic_core::{ScheduleConfig, Tensor};

pub type Check = Result<(), String>;

const DRAWS: usize = 10_000;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Standard error of the sample variance of a Gaussian with variance `v`.
fn var_se(v: f64, n: usize) -> f64 {
    v * (2.0 / (n as f64 - 1.0)).sqrt()
}

fn default_schedule() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

pub fn forward_noise_marginals() -> Check {
    let s = default_schedule();
    for &t in &[1usize, 200, 600, 1000] {
        let x0 = Tensor::full(vec![DRAWS], 0.7f64);
        let eps = Tensor::<f64>::randn(vec![DRAWS], &mut stream(t as u64, 9));
        let xt = s.forward_noise(&x0, t, &eps).map_err(|e| e.to_string())?;
        let (m, v) = mean_var(xt.data());
        let a = s.alpha(t);
        let (em, ev) = (a.sqrt() * 0.7, 1.0 - a);
        ensure!((m - em).abs() < 3.0 * (ev / DRAWS as f64).sqrt(), "t={t} mean {m} vs {em}");
        ensure!((v - ev).abs() < 3.0 * var_se(ev, DRAWS), "t={t} var {v} vs {ev}");
    }
    Ok(())
}

pub fn sigma_spot_value() -> Check {
    let expected = (0.2f64 / 0.5).sqrt() * (1.0f64 - 0.5 / 0.8).sqrt();
    ensure!((expected - 0.387_298_334_620_741_7).abs() < 1e-15, "closed form {expected}");
    let got = ddim_sigma(0.5, 0.8, 1.0);
    ensure!((got - expected).abs() < 1e-15, "sigma {got} vs {expected}");
    ensure!(ddim_sigma(0.5, 0.8, 0.0) == 0.0, "eta 0 must give sigma 0");
    ensure!(ddim_sigma(0.6, 0.6, 1.0) == 0.0, "equal alphas must give sigma 0");
    Ok(())
}

pub fn eta_one_matches_ddpm_posterior() -> Check {
    let s = default_schedule();
    let mut rng = stream(3, 1);
    let z = Tensor::<f64>::randn(vec![64], &mut rng);
    let eps = Tensor::<f64>::randn(vec![64], &mut rng);
    for (t, tp) in s.step_pairs() {
        let (a_t, a_p) = (s.alpha(t), s.alpha(tp));
        let mean = s.ddim_step_with_noise(&z, &eps, t, tp, 1.0, None).map_err(|e| e.to_string())?;
        let r = a_t / a_p;
        for i in 0..64 {
            let x0 = (z.data()[i] - (1.0 - a_t).sqrt() * eps.data()[i]) / a_t.sqrt();
            let post = a_p.sqrt() * (1.0 - r) / (1.0 - a_t) * x0 + r.sqrt() * (1.0 - a_p) / (1.0 - a_t) * z.data()[i];
            ensure!((mean.data()[i] - post).abs() < 1e-9, "t={t} mean {} vs {post}", mean.data()[i]);
        }
        let post_var = (1.0 - a_p) / (1.0 - a_t) * (1.0 - r);
        let sig = s.sigma(t, tp, 1.0).map_err(|e| e.to_string())?;
        ensure!((sig.powi(2) - post_var).abs() < 1e-12, "t={t} variance {} vs {post_var}", sig * sig);
    }
    Ok(())
}

pub fn deterministic_step_recovers_x0() -> Check {
    let mut rng = stream(4, 1);
    let x0 = Tensor::<f64>::randn(vec![32], &mut rng);
    let eps = Tensor::<f64>::randn(vec![32], &mut rng);
    for (t, t_sample) in [(20usize, 50usize), (500, 2), (1000, 1)] {
        let s = make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02, t_sample).map_err(|e| e.to_string())?;
        ensure!(s.step_pairs().last() == Some(&(t, 0)), "T_sample={t_sample}: last pair {:?}", s.step_pairs().last());
        let xt = s.forward_noise(&x0, t, &eps).map_err(|e| e.to_string())?;
        let back = s.ddim_step_with_noise(&xt, &eps, t, 0, 0.0, None).map_err(|e| e.to_string())?;
        for (a, b) in back.data().iter().zip(x0.data()) {
            ensure!((a - b).abs() < 1e-9 * (1.0 + b.abs()) / s.alpha(t).sqrt(), "t={t}: {a} vs {b}");
        }
    }
    Ok(())
}

pub fn deterministic_step_is_repeatable() -> Check {
    let s = default_schedule();
    let z = Tensor::<f32>::randn(vec![16], &mut stream(5, 0));
    let e = Tensor::<f32>::randn(vec![16], &mut stream(5, 1));
    let a = s.ddim_step(&z, &e, 1000, 980, 0.0, &mut stream(1, 0)).map_err(|e| e.to_string())?;
    let b = s.ddim_step(&z, &e, 1000, 980, 0.0, &mut stream(2, 0)).map_err(|e| e.to_string())?;
    ensure!(a.bit_eq(&b), "eta 0 step depends on the noise stream");
    Ok(())
}

pub fn renoise_variance() -> Check {
    let s = default_schedule();
    let (t, tp) = (600, 580);
    let z = s.renoise(&Tensor::<f64>::zeros(vec![DRAWS]), t, tp, &mut stream(6, 0)).map_err(|e| e.to_string())?;
    let (m, v) = mean_var(z.data());
    let ev = 1.0 - s.alpha(t) / s.alpha(tp);
    ensure!(m.abs() < 3.0 * (ev / DRAWS as f64).sqrt(), "mean {m}");
    ensure!((v - ev).abs() < 3.0 * var_se(ev, DRAWS), "var {v} vs {ev}");
    Ok(())
}

pub fn forward_then_renoise_marginal() -> Check {
    let s = default_schedule();
    let (t, tp) = (800, 500);
    let x0 = Tensor::<f64>::zeros(vec![DRAWS]);
    let eps = Tensor::<f64>::randn(vec![DRAWS], &mut stream(7, 0));
    let zp = s.forward_noise(&x0, tp, &eps).map_err(|e| e.to_string())?;
    let zt = s.renoise(&zp, t, tp, &mut stream(7, 1)).map_err(|e| e.to_string())?;
    let (_, v) = mean_var(zt.data());
    let ev = 1.0 - s.alpha(t);
    ensure!((v - ev).abs() < 3.0 * var_se(ev, DRAWS), "var {v} vs {ev}");
    Ok(())
}

pub fn full_length_subsequence() -> Check {
    let s = make_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02, 10).map_err(|e| e.to_string())?;
    ensure!(s.sample_steps() == [10, 9, 8, 7, 6, 5, 4, 3, 2, 1], "steps {:?}", s.sample_steps());
    Ok(())
}

pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("forward noise marginals", forward_noise_marginals()),
        ("sigma spot value", sigma_spot_value()),
        ("eta 1 equals DDPM posterior", eta_one_matches_ddpm_posterior()),
        ("deterministic step recovers x0", deterministic_step_recovers_x0()),
        ("deterministic step repeatable", deterministic_step_is_repeatable()),
        ("renoise variance", renoise_variance()),
        ("forward then renoise marginal", forward_then_renoise_marginal()),
        ("full-length subsequence", full_length_subsequence()),
    ]
}
