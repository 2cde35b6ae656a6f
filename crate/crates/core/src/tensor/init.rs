use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Real, Tensor};
use crate::error::{arg_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FanMode {
    In,
    Out,
}

/// `(fan_in, fan_out)` for a conv kernel `[out, in, kh, kw]` or a linear
/// weight `[out, in]`.
pub fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [out, inp] => Ok((*inp, *out)),
        [out, inp, kh, kw] => Ok((inp * kh * kw, out * kh * kw)),
        _ => Err(arg_err("kaiming_init", format!("{shape:?} is not a conv or linear kernel"))),
    }
}

/// He-normal initialization, `N(0, 2 / fan)`, drawn from `rng`.
pub fn kaiming_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], mode: FanMode, rng: &mut R) -> Result<Tensor<T>> {
    let (fan_in, fan_out) = fans(shape)?;
    let fan = match mode {
        FanMode::In => fan_in,
        FanMode::Out => fan_out,
    };
    let std = (2.0 / fan as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    Ok(Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng))))
}

/// He-normal initialization with its own seeded generator.
pub fn kaiming_init<T: Real>(shape: &[usize], mode: FanMode, seed: u64) -> Result<Tensor<T>> {
    kaiming_normal(shape, mode, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual classifier-head init.
pub fn uniform_fan_in<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = kaiming_init::<f32>(&[8, 4, 3, 3], FanMode::In, 7).unwrap();
        let b = kaiming_init::<f32>(&[8, 4, 3, 3], FanMode::In, 7).unwrap();
        assert_eq!(a, b);
        let c = kaiming_init::<f32>(&[8, 4, 3, 3], FanMode::In, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn std_matches_fan_in() {
        let t = kaiming_init::<f64>(&[64, 16, 3, 3], FanMode::In, 3).unwrap();
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let target = (2.0f64 / 144.0).sqrt();
        assert!((var.sqrt() / target - 1.0).abs() < 0.05, "std {} vs {target}", var.sqrt());
    }

    #[test]
    fn rejects_non_kernel_shapes() {
        assert!(kaiming_init::<f32>(&[3, 3, 3], FanMode::In, 0).is_err());
    }
}
