//! Knowledge review: fusion units, the hierarchical context loss and the
//! feature-distillation topologies compared in the ablation study.

pub mod abf;
pub mod hcl;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::models::{Buffer, Conv2d, Module};
use crate::tensor::{Param, Real, Tape, Var};
pub use abf::{AbfOutput, AbfUnit, Fusion};
pub use hcl::{hcl, HclSpec, Level};

/// Feature-distillation topology. Ordered from the plain same-level
/// baseline to the complete recursive ABF + HCL framework.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Same-level pairs only, L2 distance.
    BaselineL2,
    /// Every student stage guided by all shallower-or-equal teacher stages.
    ReviewOnly,
    /// Recursive fusion without attention, L2 distance.
    ReviewRlf,
    /// Recursive attention fusion, L2 distance.
    RlfAbf,
    /// Recursive fusion without attention, HCL distance.
    RlfHcl,
    /// Recursive attention fusion with HCL.
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::BaselineL2,
        AblationMode::ReviewOnly,
        AblationMode::ReviewRlf,
        AblationMode::RlfAbf,
        AblationMode::RlfHcl,
        AblationMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::BaselineL2 => "baseline_l2",
            AblationMode::ReviewOnly => "review_only",
            AblationMode::ReviewRlf => "review_rlf",
            AblationMode::RlfAbf => "rlf_abf",
            AblationMode::RlfHcl => "rlf_hcl",
            AblationMode::Full => "full",
        }
    }

    /// Fusion used by the recursive modes, `None` for the non-recursive ones.
    pub fn fusion(self) -> Option<Fusion> {
        match self {
            AblationMode::BaselineL2 | AblationMode::ReviewOnly => None,
            AblationMode::ReviewRlf | AblationMode::RlfHcl => Some(Fusion::Additive),
            AblationMode::RlfAbf | AblationMode::Full => Some(Fusion::Attention),
        }
    }

    pub fn uses_hcl(self) -> bool {
        matches!(self, AblationMode::RlfHcl | AblationMode::Full)
    }

    /// Component flags: (review mechanism, residual framework, ABF, HCL).
    pub fn components(self) -> [bool; 4] {
        let review = self != AblationMode::BaselineL2;
        let rlf = self.fusion().is_some();
        let abf = self.fusion() == Some(Fusion::Attention);
        [review, rlf, abf, self.uses_hcl()]
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| {
                let names: Vec<_> = AblationMode::ALL.iter().map(|m| m.name()).collect();
                arg_err("ablation mode", format!("`{s}` is not one of {}", names.join(", ")))
            })
    }
}

/// Learnable connectors between student and teacher features; which
/// variant is used depends on the [`AblationMode`].
pub enum ReviewUnits<T> {
    /// One 1x1 projection per stage.
    SameLevel(Vec<Conv2d<T>>),
    /// `pairs[i][j]` projects student stage `i` onto teacher stage `j <= i`.
    Pairwise(Vec<Vec<Conv2d<T>>>),
    /// One fusion unit per stage, shallow to deep.
    Fusion(Vec<AbfUnit<T>>),
}

impl<T: Real> ReviewUnits<T> {
    pub fn build(
        mode: AblationMode,
        student_channels: &[usize],
        teacher_channels: &[usize],
        mid_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        if student_channels.len() != teacher_channels.len() || student_channels.is_empty() {
            return Err(arg_err(
                "review units",
                format!(
                    "student has {} stages, teacher has {}",
                    student_channels.len(),
                    teacher_channels.len()
                ),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = student_channels.len();
        Ok(match mode {
            AblationMode::BaselineL2 => ReviewUnits::SameLevel(
                (0..stages)
                    .map(|i| {
                        Conv2d::new(&format!("review.proj{i}"), student_channels[i], teacher_channels[i], 1, 1, 0, false, &mut rng)
                    })
                    .collect::<Result<_>>()?,
            ),
            AblationMode::ReviewOnly => ReviewUnits::Pairwise(
                (0..stages)
                    .map(|i| {
                        (0..=i)
                            .map(|j| {
                                Conv2d::new(
                                    &format!("review.pair{i}_{j}"),
                                    student_channels[i],
                                    teacher_channels[j],
                                    1,
                                    1,
                                    0,
                                    false,
                                    &mut rng,
                                )
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?,
            ),
            _ => {
                let fusion = mode.fusion();
                ReviewUnits::Fusion(
                    (0..stages)
                        .map(|i| {
                            let deepest = i + 1 == stages;
                            AbfUnit::new(
                                &format!("review.abf{i}"),
                                student_channels[i],
                                mid_channels,
                                teacher_channels[i],
                                if deepest { None } else { fusion },
                                &mut rng,
                            )
                        })
                        .collect::<Result<_>>()?,
                )
            }
        })
    }

    fn check_mode(&self, mode: AblationMode, stages: usize) -> Result<()> {
        let ok = match (self, mode) {
            (ReviewUnits::SameLevel(p), AblationMode::BaselineL2) => p.len() == stages,
            (ReviewUnits::Pairwise(p), AblationMode::ReviewOnly) => {
                p.len() == stages && p.iter().enumerate().all(|(i, row)| row.len() == i + 1)
            }
            (ReviewUnits::Fusion(units), m) if m.fusion().is_some() => {
                units.len() == stages
                    && units.iter().enumerate().all(|(i, u)| {
                        if i + 1 == stages {
                            u.fusion().is_none()
                        } else {
                            u.fusion() == m.fusion()
                        }
                    })
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(arg_err(
                "review_loss",
                format!("units were not built for mode {mode} with {stages} stages"),
            ))
        }
    }
}

impl<T: Real> Module<T> for ReviewUnits<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        match self {
            ReviewUnits::SameLevel(p) => p.iter().for_each(|c| c.collect_params(out)),
            ReviewUnits::Pairwise(p) => p.iter().flatten().for_each(|c| c.collect_params(out)),
            ReviewUnits::Fusion(u) => u.iter().for_each(|c| c.collect_params(out)),
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        match self {
            ReviewUnits::SameLevel(p) => p.iter_mut().for_each(|c| c.collect_params_mut(out)),
            ReviewUnits::Pairwise(p) => p.iter_mut().flatten().for_each(|c| c.collect_params_mut(out)),
            ReviewUnits::Fusion(u) => u.iter_mut().for_each(|c| c.collect_params_mut(out)),
        }
    }

    fn collect_buffers<'a>(&'a mut self, _out: &mut Vec<Buffer<'a, T>>) {}
}

/// One distance term of the review loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReviewTerm {
    pub student_stage: usize,
    pub teacher_stage: usize,
}

pub struct ReviewOutput {
    pub loss: Var,
    pub terms: Vec<ReviewTerm>,
    /// Fusion units evaluated (zero for the non-recursive modes).
    pub units_used: usize,
    /// Distance applied per term.
    pub distance: HclSpec,
}

fn resize<T: Real>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x);
    let (xh, xw) = (s[2], s[3]);
    if (xh, xw) == (h, w) {
        Ok(x)
    } else if xh >= h && xw >= w && h == w {
        tape.adaptive_max_pool(x, h)
    } else {
        tape.interpolate_nearest(x, h, w)
    }
}

/// Multi-level review loss between student and teacher stage features.
///
/// Teacher features should be constants on `tape`. In the recursive modes the
/// residual stream starts empty at the deepest stage and each unit consumes
/// the residual produced one stage deeper.
pub fn review_loss<T: Real>(
    tape: &mut Tape<T>,
    student: &[Var],
    teacher: &[Var],
    units: &ReviewUnits<T>,
    hcl_spec: &HclSpec,
    mode: AblationMode,
) -> Result<ReviewOutput> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(arg_err(
            "review_loss",
            format!("{} student stages vs {} teacher stages", student.len(), teacher.len()),
        ));
    }
    units.check_mode(mode, student.len())?;
    let distance = if mode.uses_hcl() {
        hcl_spec.clone()
    } else {
        HclSpec::global_l2()
    };

    let mut losses = Vec::new();
    let mut terms = Vec::new();
    let mut units_used = 0;
    match units {
        ReviewUnits::SameLevel(proj) => {
            for (i, conv) in proj.iter().enumerate() {
                let p = conv.forward(tape, student[i])?;
                losses.push(hcl(tape, p, teacher[i], &distance)?);
                terms.push(ReviewTerm {
                    student_stage: i,
                    teacher_stage: i,
                });
            }
        }
        ReviewUnits::Pairwise(pairs) => {
            for (i, row) in pairs.iter().enumerate() {
                for (j, conv) in row.iter().enumerate() {
                    let p = conv.forward(tape, student[i])?;
                    let ts = tape.shape(teacher[j]);
                    let (h, w) = (ts[2], ts[3]);
                    let p = resize(tape, p, h, w)?;
                    losses.push(hcl(tape, p, teacher[j], &distance)?);
                    terms.push(ReviewTerm {
                        student_stage: i,
                        teacher_stage: j,
                    });
                }
            }
        }
        ReviewUnits::Fusion(abfs) => {
            let mut residual = None;
            for i in (0..abfs.len()).rev() {
                let out = abfs[i].forward(tape, student[i], residual)?;
                units_used += 1;
                losses.push(hcl(tape, out.abf_out, teacher[i], &distance)?);
                terms.push(ReviewTerm {
                    student_stage: i,
                    teacher_stage: i,
                });
                residual = Some(out.residual_out);
            }
        }
    }
    let mut loss = losses[0];
    for &l in &losses[1..] {
        loss = tape.add(loss, l)?;
    }
    Ok(ReviewOutput {
        loss,
        terms,
        units_used,
        distance,
    })
}

/// Linear warm-up factor `min(epoch / warmup_epochs, 1)`; 1 when disabled.
pub fn warmup_factor(epoch: usize, warmup_epochs: Option<usize>) -> f64 {
    match warmup_epochs {
        Some(w) if w > 0 => (epoch as f64 / w as f64).min(1.0),
        _ => 1.0,
    }
}

/// `ce + warmup * lambda * mkdr`.
pub fn total_loss(ce: f64, mkdr: f64, lambda: f64, warmup: f64) -> f64 {
    ce + warmup * lambda * mkdr
}

/// Tape version of [`total_loss`]. `ce = None` drops the cross-entropy term.
pub fn total_loss_var<T: Real>(
    tape: &mut Tape<T>,
    ce: Option<Var>,
    mkdr: Option<Var>,
    lambda: f64,
    warmup: f64,
) -> Result<Var> {
    let kd = mkdr.map(|m| tape.scale(m, T::from_f64_lossy(warmup * lambda)));
    match (ce, kd) {
        (Some(c), Some(k)) => tape.add(c, k),
        (Some(c), None) => Ok(c),
        (None, Some(k)) => Ok(k),
        (None, None) => Err(arg_err("total_loss", "neither cross-entropy nor distillation term")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn features(tape: &mut Tape<f64>, channels: &[usize], sizes: &[usize], seed: u64) -> Vec<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        channels
            .iter()
            .zip(sizes)
            .map(|(&c, &s)| {
                let t = rand_tensor(&[2, c, s, s], &mut rng);
                tape.constant(t)
            })
            .collect()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
        }
        assert!("nope".parse::<AblationMode>().is_err());
        assert_eq!(AblationMode::Full.components(), [true; 4]);
        assert_eq!(AblationMode::BaselineL2.components(), [false; 4]);
        assert_eq!(AblationMode::RlfHcl.components(), [true, true, false, true]);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(2.0, 1.5, 0.6, 1.0), 2.9);
        assert_eq!(total_loss(1.25, 123.0, 0.0, 1.0), 1.25);
        assert_eq!(total_loss(1.25, 123.0, 0.7, 0.0), 1.25);
        assert_eq!(warmup_factor(0, Some(20)), 0.0);
        assert_eq!(warmup_factor(10, Some(20)), 0.5);
        assert_eq!(warmup_factor(30, Some(20)), 1.0);
        assert_eq!(warmup_factor(0, None), 1.0);
    }

    #[test]
    fn review_only_has_six_terms() {
        let mut tape = Tape::<f64>::new();
        let s = features(&mut tape, &[4, 8, 16], &[8, 4, 2], 1);
        let t = features(&mut tape, &[4, 8, 16], &[8, 4, 2], 2);
        let units = ReviewUnits::build(AblationMode::ReviewOnly, &[4, 8, 16], &[4, 8, 16], 8, 0).unwrap();
        let out = review_loss(&mut tape, &s, &t, &units, &HclSpec::pyramid(), AblationMode::ReviewOnly).unwrap();
        assert_eq!(out.terms.len(), 6);
        assert!(out.terms.iter().all(|t| t.teacher_stage <= t.student_stage));
    }

    #[test]
    fn full_mode_uses_one_unit_and_term_per_stage() {
        let mut tape = Tape::<f64>::new();
        let s = features(&mut tape, &[4, 8, 16], &[8, 4, 2], 1);
        let t = features(&mut tape, &[6, 12, 24], &[8, 4, 2], 2);
        let units = ReviewUnits::build(AblationMode::Full, &[4, 8, 16], &[6, 12, 24], 8, 0).unwrap();
        let spec = HclSpec::parse("h,1", "1,0.5", true).unwrap();
        let out = review_loss(&mut tape, &s, &t, &units, &spec, AblationMode::Full).unwrap();
        assert_eq!(out.units_used, 3);
        assert_eq!(out.terms.len(), 3);
        assert_eq!(out.distance, spec);
        assert!(tape.value(out.loss).item() >= 0.0);
    }

    #[test]
    fn l2_modes_ignore_hcl_spec() {
        let mut tape = Tape::<f64>::new();
        let s = features(&mut tape, &[4, 8], &[4, 2], 1);
        let t = features(&mut tape, &[4, 8], &[4, 2], 2);
        let units = ReviewUnits::build(AblationMode::RlfAbf, &[4, 8], &[4, 8], 8, 0).unwrap();
        let out = review_loss(&mut tape, &s, &t, &units, &HclSpec::pyramid(), AblationMode::RlfAbf).unwrap();
        assert_eq!(out.distance, HclSpec::global_l2());
    }

    #[test]
    fn identity_full_mode_single_stage_is_zero() {
        let mut units = ReviewUnits::<f64>::build(AblationMode::Full, &[3], &[3], 3, 0).unwrap();
        if let ReviewUnits::Fusion(u) = &mut units {
            let unit = &mut u[0];
            for conv in [&mut unit.in_conv, &mut unit.out_conv] {
                conv.weight.value = Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
            }
        }
        let mut tape = Tape::<f64>::new();
        let s = features(&mut tape, &[3], &[8], 7);
        let t = vec![tape.constant(tape.value(s[0]).clone())];
        let out = review_loss(&mut tape, &s, &t, &units, &HclSpec::pyramid(), AblationMode::Full).unwrap();
        assert_eq!(tape.value(out.loss).item(), 0.0);
    }

    #[test]
    fn permuting_teacher_stages_changes_loss() {
        let mut tape = Tape::<f64>::new();
        let s = features(&mut tape, &[4, 4, 4], &[4, 4, 4], 11);
        let t = features(&mut tape, &[4, 4, 4], &[4, 4, 4], 12);
        let units = ReviewUnits::build(AblationMode::Full, &[4, 4, 4], &[4, 4, 4], 4, 0).unwrap();
        let spec = HclSpec::parse("h,2,1", "1,0.5,0.25", true).unwrap();
        let a = review_loss(&mut tape, &s, &t, &units, &spec, AblationMode::Full).unwrap().loss;
        let permuted = [t[2], t[0], t[1]];
        let b = review_loss(&mut tape, &s, &permuted, &units, &spec, AblationMode::Full).unwrap().loss;
        assert_ne!(tape.value(a).item(), tape.value(b).item());
    }

    #[test]
    fn mismatched_units_rejected() {
        let mut tape = Tape::<f64>::new();
        let s = features(&mut tape, &[4, 8], &[4, 2], 1);
        let t = features(&mut tape, &[4, 8], &[4, 2], 2);
        let units = ReviewUnits::build(AblationMode::RlfAbf, &[4, 8], &[4, 8], 8, 0).unwrap();
        assert!(review_loss(&mut tape, &s, &t, &units, &HclSpec::pyramid(), AblationMode::RlfHcl).is_err());
        assert!(review_loss(&mut tape, &s, &t, &units, &HclSpec::pyramid(), AblationMode::BaselineL2).is_err());
        assert!(review_loss(&mut tape, &s[..1], &t, &units, &HclSpec::pyramid(), AblationMode::RlfAbf).is_err());
    }

    #[test]
    fn total_loss_var_matches_scalar() {
        let mut tape = Tape::<f64>::new();
        let ce = tape.constant(Tensor::scalar(2.0));
        let kd = tape.constant(Tensor::scalar(1.5));
        let t = total_loss_var(&mut tape, Some(ce), Some(kd), 0.6, 1.0).unwrap();
        assert_eq!(tape.value(t).item(), 2.9);
        let only_kd = total_loss_var(&mut tape, None, Some(kd), 2.0, 0.5).unwrap();
        assert_eq!(tape.value(only_kd).item(), 1.5);
    }
}
