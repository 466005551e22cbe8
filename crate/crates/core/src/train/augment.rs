//! The eight flips and quarter-turn rotations of a square.

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::video::Frame;

/// One element of the dihedral group, applied as an optional transpose,
/// then an optional vertical flip, then an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dihedral(u8);

const NAMES: [&str; 8] = [
    "identity",
    "hflip",
    "vflip",
    "rot180",
    "transpose",
    "rot270",
    "rot90",
    "antitranspose",
];

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Dihedral(rng.random_range(0..8))
    }

    pub fn name(self) -> &'static str {
        NAMES[self.0 as usize]
    }

    fn hflip(self) -> bool {
        self.0 & 1 != 0
    }

    fn vflip(self) -> bool {
        self.0 & 2 != 0
    }

    fn transpose(self) -> bool {
        self.0 & 4 != 0
    }

    pub fn apply(self, f: &Frame) -> Frame {
        let mut v = f.view();
        if self.transpose() {
            v.swap_axes(1, 2);
        }
        if self.vflip() {
            v.invert_axis(Axis(1));
        }
        if self.hflip() {
            v.invert_axis(Axis(2));
        }
        v.as_standard_layout().into_owned()
    }

    pub fn invert(self, f: &Frame) -> Frame {
        let mut v = f.view();
        if self.hflip() {
            v.invert_axis(Axis(2));
        }
        if self.vflip() {
            v.invert_axis(Axis(1));
        }
        if self.transpose() {
            v.swap_axes(1, 2);
        }
        v.as_standard_layout().into_owned()
    }
}

impl std::fmt::Display for Dihedral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Draws one transform and applies it to both frames.
pub fn augment<R: Rng + ?Sized>(lq: &Frame, gt: &Frame, rng: &mut R) -> (Frame, Frame, Dihedral) {
    let t = Dihedral::random(rng);
    (t.apply(lq), t.apply(gt), t)
}
