//! Shared-weight image encoder producing three feature maps at strides 8, 16
//! and 32. One parameter set serves RGB and thermal frames at every timestep.

use crate::error::{invalid, Result};
use crate::nn::{Conv2d, Init, ParamStore};
use crate::tensor::{Real, Tape, Var};

pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Three multi-scale maps of one batch: `p2` at stride 8 with `C` channels,
/// `p3` at stride 16 with `2C`, `p4` at stride 32 with `4C`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub p2: Var,
    pub p3: Var,
    pub p4: Var,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [Var; 3] {
        [self.p2, self.p3, self.p4]
    }

    pub fn from_levels(levels: [Var; 3]) -> Self {
        Self {
            p2: levels[0],
            p3: levels[1],
            p4: levels[2],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stem: [Conv2d; 3],
    down3: Conv2d,
    down4: Conv2d,
    base_channels: usize,
}

impl Encoder {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, init: &mut Init<'_>, base_channels: usize) -> Self {
        let c = base_channels;
        let half = (c / 2).max(1);
        Self {
            stem: [
                Conv2d::new(ps, init, "encoder.stem0", 3, half, 3, 2),
                Conv2d::new(ps, init, "encoder.stem1", half, c, 3, 2),
                Conv2d::new(ps, init, "encoder.stem2", c, c, 3, 2),
            ],
            down3: Conv2d::new(ps, init, "encoder.down3", c, 2 * c, 3, 2),
            down4: Conv2d::new(ps, init, "encoder.down4", 2 * c, 4 * c, 3, 2),
            base_channels,
        }
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    /// Channel count at each pyramid level.
    pub fn level_channels(&self) -> [usize; 3] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c]
    }

    /// Encodes `[B,3,H,W]` or single-channel `[B,1,H,W]` images (replicated to
    /// three channels). `H` and `W` must be multiples of 32.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        image: Var,
    ) -> Result<FeaturePyramid> {
        let s = tape.shape(image).to_vec();
        if s.len() != 4 || !(s[1] == 1 || s[1] == 3) {
            return Err(invalid(
                "encode",
                format!("expected [B,1|3,H,W], got {s:?}"),
            ));
        }
        if s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(invalid(
                "encode",
                format!("extents {}x{} must be multiples of 32", s[2], s[3]),
            ));
        }
        let mut x = if s[1] == 1 {
            tape.concat(&[image, image, image], 1)?
        } else {
            image
        };
        for conv in &self.stem {
            let y = conv.forward(tape, ps, x)?;
            x = tape.relu(y);
        }
        let p2 = x;
        let y = self.down3.forward(tape, ps, p2)?;
        let p3 = tape.relu(y);
        let y = self.down4.forward(tape, ps, p3)?;
        let p4 = tape.relu(y);
        Ok(FeaturePyramid { p2, p3, p4 })
    }

    pub fn stem_weight(&self) -> crate::nn::ParamId {
        self.stem[0].weight
    }
}
