use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{Real, Tape, Var};

/// One pyramid level, possibly relative to the native size `h` of the
/// feature map it is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    /// `h`: the feature map as is.
    Native,
    Fixed(usize),
    /// `h-k`
    Minus(usize),
    /// `h/k`, rounded down.
    Div(usize),
}

impl Level {
    pub fn resolve(self, h: usize) -> usize {
        match self {
            Level::Native => h,
            Level::Fixed(s) => s,
            Level::Minus(k) => h.saturating_sub(k),
            Level::Div(k) => h / k,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Native => write!(f, "h"),
            Level::Fixed(s) => write!(f, "{s}"),
            Level::Minus(k) => write!(f, "h-{k}"),
            Level::Div(k) => write!(f, "h/{k}"),
        }
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || arg_err("hcl level", format!("`{s}` is not one of h, <int>, h-<int>, h/<int>"));
        if s == "h" {
            return Ok(Level::Native);
        }
        if let Some(k) = s.strip_prefix("h-") {
            return k.parse().map(Level::Minus).map_err(|_| bad());
        }
        if let Some(k) = s.strip_prefix("h/") {
            return match k.parse() {
                Ok(0) | Err(_) => Err(bad()),
                Ok(k) => Ok(Level::Div(k)),
            };
        }
        match s.parse() {
            Ok(0) | Err(_) => Err(bad()),
            Ok(v) => Ok(Level::Fixed(v)),
        }
    }
}

/// Pyramid of pooled sizes and per-level weights defining the hierarchical
/// context distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HclSpecRepr", into = "HclSpecRepr")]
pub struct HclSpec {
    levels: Vec<Level>,
    weights: Vec<f64>,
    normalize: bool,
}

impl HclSpec {
    pub fn new(levels: Vec<Level>, weights: Vec<f64>, normalize: bool) -> Result<Self> {
        if levels.is_empty() {
            return Err(arg_err("hcl spec", "at least one level is required"));
        }
        if levels.len() != weights.len() {
            return Err(arg_err(
                "hcl spec",
                format!("{} levels but {} weights", levels.len(), weights.len()),
            ));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(arg_err("hcl spec", format!("weight {w} is not positive")));
        }
        Ok(Self {
            levels,
            weights,
            normalize,
        })
    }

    /// Parse comma separated lists such as `h,4,2,1` and `1,0.5,0.25,0.125`.
    pub fn parse(levels: &str, weights: &str, normalize: bool) -> Result<Self> {
        let levels = levels.split(',').map(str::parse).collect::<Result<Vec<Level>>>()?;
        let weights = weights
            .split(',')
            .map(|w| {
                w.trim()
                    .parse::<f64>()
                    .map_err(|_| arg_err("hcl spec", format!("weight `{w}` is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        Self::new(levels, weights, normalize)
    }

    /// Four levels `[h, 4, 2, 1]` weighted `1, 0.5, 0.25, 0.125`.
    pub fn pyramid() -> Self {
        Self::new(
            vec![Level::Native, Level::Fixed(4), Level::Fixed(2), Level::Fixed(1)],
            vec![1.0, 0.5, 0.25, 0.125],
            true,
        )
        .expect("valid default pyramid")
    }

    /// Single native level with unit weight: the plain mean squared distance.
    pub fn global_l2() -> Self {
        Self::new(vec![Level::Native], vec![1.0], true).expect("valid single level")
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    /// Concrete sizes for a feature map of native size `h`.
    pub fn resolve(&self, h: usize) -> Result<Vec<usize>> {
        let sizes: Vec<usize> = self.levels.iter().map(|l| l.resolve(h)).collect();
        for (level, &s) in self.levels.iter().zip(&sizes) {
            if s == 0 || s > h {
                return Err(arg_err(
                    "hcl",
                    format!("level {level} resolves to {s}, outside 1..={h} for this feature map"),
                ));
            }
        }
        if sizes.windows(2).any(|w| w[0] <= w[1]) {
            return Err(arg_err(
                "hcl",
                format!("levels {} resolve to {sizes:?} at h={h}, which is not strictly decreasing", self.levels_string()),
            ));
        }
        Ok(sizes)
    }

    pub fn levels_string(&self) -> String {
        self.levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
    }

    pub fn weights_string(&self) -> String {
        self.weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl Default for HclSpec {
    fn default() -> Self {
        Self::pyramid()
    }
}

#[derive(Serialize, Deserialize)]
struct HclSpecRepr {
    levels: String,
    weights: String,
    normalize: bool,
}

impl TryFrom<HclSpecRepr> for HclSpec {
    type Error = Error;

    fn try_from(r: HclSpecRepr) -> Result<Self> {
        HclSpec::parse(&r.levels, &r.weights, r.normalize)
    }
}

impl From<HclSpec> for HclSpecRepr {
    fn from(s: HclSpec) -> Self {
        HclSpecRepr {
            levels: s.levels_string(),
            weights: s.weights_string(),
            normalize: s.normalize,
        }
    }
}

/// Hierarchical context loss between a fused student feature and the
/// matching teacher feature.
///
/// Both maps are max-pooled to every level size, compared with a mean
/// squared difference and combined with the level weights.
pub fn hcl<T: Real>(tape: &mut Tape<T>, fused: Var, teacher: Var, spec: &HclSpec) -> Result<Var> {
    let shape = tape.shape(fused).to_vec();
    if shape != tape.shape(teacher) {
        return Err(shape_err(
            "hcl",
            format!("fused {shape:?} vs teacher {:?}", tape.shape(teacher)),
        ));
    }
    let (h, w) = match shape[..] {
        [_, _, h, w] => (h, w),
        _ => return Err(shape_err("hcl", format!("expected 4-d features, got {shape:?}"))),
    };
    let sizes = spec.resolve(h.min(w))?;
    let mut total: Option<Var> = None;
    for (&size, &weight) in sizes.iter().zip(&spec.weights) {
        let (a, b) = if size == h && size == w {
            (fused, teacher)
        } else {
            (tape.adaptive_max_pool(fused, size)?, tape.adaptive_max_pool(teacher, size)?)
        };
        let d = tape.mse(a, b)?;
        let term = tape.scale(d, T::from_f64_lossy(weight));
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("at least one level");
    if spec.normalize {
        let norm: f64 = spec.weights.iter().sum();
        Ok(tape.scale(total, T::from_f64_lossy(1.0 / norm)))
    } else {
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn run(fused: &[f64], teacher: &[f64], shape: &[usize], spec: &HclSpec) -> f64 {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(shape, fused).unwrap());
        let b = tape.constant(Tensor::from_f64(shape, teacher).unwrap());
        let l = hcl(&mut tape, a, b, spec).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn worked_two_by_two_example() {
        let spec = HclSpec::parse("2,1", "1,0.5", true).unwrap();
        let v = run(&[2.0, 0.0, 0.0, 0.0], &[0.0; 4], &[1, 1, 2, 2], &spec);
        assert!((v - 2.0).abs() < 1e-12, "{v}");
        let v = run(&[2.0, 0.0, 0.0, 0.0], &[0.0; 4], &[1, 1, 2, 2], &spec.with_normalize(false));
        assert!((v - 3.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn identical_inputs_give_zero() {
        let x: Vec<f64> = (0..64).map(|i| (i as f64).sin()).collect();
        assert_eq!(run(&x, &x, &[1, 1, 8, 8], &HclSpec::pyramid()), 0.0);
    }

    #[test]
    fn parses_relative_levels() {
        let spec = HclSpec::parse("h, h/2, h/4", "1,0.5,0.25", true).unwrap();
        assert_eq!(spec.resolve(8).unwrap(), vec![8, 4, 2]);
        let spec = HclSpec::parse("h,h-1,h-2,h-3", "1,0.5,0.25,0.125", true).unwrap();
        assert_eq!(spec.resolve(8).unwrap(), vec![8, 7, 6, 5]);
        assert_eq!(HclSpec::pyramid().levels_string(), "h,4,2,1");
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(HclSpec::parse("h,4", "1", true).is_err());
        assert!(HclSpec::parse("h,x", "1,1", true).is_err());
        assert!(HclSpec::parse("h", "-1", true).is_err());
        assert!(HclSpec::parse("", "", true).is_err());
        // level bigger than the feature map
        assert!(HclSpec::parse("h,4", "1,1", true).unwrap().resolve(2).is_err());
        // h/2 collides with 4 at h=8
        assert!(HclSpec::parse("h,h/2,4", "1,1,1", true).unwrap().resolve(8).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let spec = HclSpec::parse("h,h-1,2", "1,0.5,0.25", false).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let back: HclSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
