use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::models::{Conv2d, Module};
use crate::tensor::{Param, Real, Tape, Var};

/// How a unit merges its own feature with the residual from the deeper stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Two gated attention maps weight the two inputs.
    Attention,
    /// Plain sum, no attention maps.
    Additive,
}

/// Fusion unit turning a student feature (plus the residual stream coming up
/// from the next deeper stage) into a teacher-shaped output and a new
/// residual with a fixed number of mid channels.
pub struct AbfUnit<T> {
    pub in_conv: Conv2d<T>,
    /// Present only when the unit fuses with attention.
    pub att_conv: Option<Conv2d<T>>,
    pub out_conv: Conv2d<T>,
    fusion: Option<Fusion>,
}

pub struct AbfOutput {
    pub abf_out: Var,
    pub residual_out: Var,
    /// `[n, 2, h, w]` gate values when attention fusion ran.
    pub attention: Option<Var>,
}

impl<T: Real> AbfUnit<T> {
    /// `fusion = None` builds the deepest unit, which never receives a residual.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        student_channels: usize,
        mid_channels: usize,
        teacher_channels: usize,
        fusion: Option<Fusion>,
        rng: &mut R,
    ) -> Result<Self> {
        let in_conv = Conv2d::new(&format!("{name}.in_conv"), student_channels, mid_channels, 1, 1, 0, false, rng)?;
        let att_conv = match fusion {
            Some(Fusion::Attention) => Some(Conv2d::new(
                &format!("{name}.att_conv"),
                2 * mid_channels,
                2,
                1,
                1,
                0,
                true,
                rng,
            )?),
            _ => None,
        };
        let out_conv = Conv2d::new(&format!("{name}.out_conv"), mid_channels, teacher_channels, 1, 1, 0, false, rng)?;
        Ok(Self {
            in_conv,
            att_conv,
            out_conv,
            fusion,
        })
    }

    pub fn mid_channels(&self) -> usize {
        self.in_conv.out_channels()
    }

    pub fn fusion(&self) -> Option<Fusion> {
        self.fusion
    }

    pub fn forward(&self, tape: &mut Tape<T>, student_feat: Var, residual_in: Option<Var>) -> Result<AbfOutput> {
        let x = self.in_conv.forward(tape, student_feat)?;
        let (n, m, h, w) = match tape.shape(x)[..] {
            [n, m, h, w] => (n, m, h, w),
            _ => unreachable!("conv output is 4-d"),
        };
        let (fused, attention) = match residual_in {
            None => (x, None),
            Some(res) => {
                let rs = tape.shape(res).to_vec();
                if rs.len() != 4 || rs[0] != n || rs[1] != m {
                    return Err(shape_err(
                        "abf_forward",
                        format!("residual {rs:?} does not carry {m} mid channels for batch {n}"),
                    ));
                }
                if rs[2] > h || rs[3] > w {
                    return Err(shape_err(
                        "abf_forward",
                        format!("residual {rs:?} is larger than the student feature {:?}", tape.shape(x)),
                    ));
                }
                let y = tape.interpolate_nearest(res, h, w)?;
                match self.fusion {
                    None => {
                        return Err(arg_err("abf_forward", "the deepest unit does not accept a residual"));
                    }
                    Some(Fusion::Additive) => (tape.add(x, y)?, None),
                    Some(Fusion::Attention) => {
                        let att_conv = self.att_conv.as_ref().expect("attention unit has att_conv");
                        let z = tape.concat_channels(&[x, y])?;
                        let logits = att_conv.forward(tape, z)?;
                        let gates = tape.sigmoid(logits);
                        let a1 = tape.narrow_channels(gates, 0, 1)?;
                        let a2 = tape.narrow_channels(gates, 1, 1)?;
                        let xa = tape.mul_channel_broadcast(x, a1)?;
                        let ya = tape.mul_channel_broadcast(y, a2)?;
                        (tape.add(xa, ya)?, Some(gates))
                    }
                }
            }
        };
        let abf_out = self.out_conv.forward(tape, fused)?;
        Ok(AbfOutput {
            abf_out,
            residual_out: fused,
            attention,
        })
    }
}

impl<T: Real> Module<T> for AbfUnit<T> {
    fn collect_params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        self.in_conv.collect_params(out);
        if let Some(c) = &self.att_conv {
            c.collect_params(out);
        }
        self.out_conv.collect_params(out);
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.in_conv.collect_params_mut(out);
        if let Some(c) = &mut self.att_conv {
            c.collect_params_mut(out);
        }
        self.out_conv.collect_params_mut(out);
    }
}
