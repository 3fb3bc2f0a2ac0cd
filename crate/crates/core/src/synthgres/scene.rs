//! Grid scenes of coloured, sized shape instances.
//!
//! The grid is tiled by 8×8 slots and every instance sits inside its own
//! slot as a square of 2×2 blocks, so instances never overlap and their
//! masks are exact at stride 2.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toyenc::Grid;

const SLOT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub fn side(self) -> usize {
        match self {
            Size::Small => 4,
            Size::Large => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub category: usize,
    pub color: usize,
    pub size: Size,
    /// Top-left cell `(y, x)`.
    pub origin: (usize, usize),
}

impl Instance {
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let s = self.size.side();
        (0..s).flat_map(move |dy| (0..s).map(move |dx| (self.origin.0 + dy, self.origin.1 + dx)))
    }

    pub fn center(&self) -> (f64, f64) {
        let half = self.size.side() as f64 / 2.0;
        (self.origin.0 as f64 + half, self.origin.1 as f64 + half)
    }
}

/// Cell class id of a shape/colour pair (0 is background).
pub fn cell_class(category: usize, color: usize, n_colors: usize) -> u16 {
    (1 + category * n_colors + color) as u16
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub grid: Grid,
    pub instances: Vec<Instance>,
}

impl Scene {
    /// Random scene with `n` instances covering at most `n_categories - 1` categories.
    pub fn random(hw: (usize, usize), n_categories: usize, n_colors: usize, n: usize, rng: &mut impl Rng) -> Result<Self> {
        let (sh, sw) = (hw.0 / SLOT, hw.1 / SLOT);
        if sh * sw < n {
            return Err(Error::Config(format!("{n} instances do not fit {sh}×{sw} slots")));
        }
        if n_categories < 2 {
            return Err(Error::Config("need at least two categories so one can be absent".into()));
        }
        let mut slots: Vec<usize> = (0..sh * sw).collect();
        slots.shuffle(rng);
        let mut cats: Vec<usize> = (0..n_categories).collect();
        cats.shuffle(rng);
        let k = rng.gen_range(1..=n.min(n_categories - 1));
        cats.truncate(k);
        let mut grid = Grid::background(hw.0, hw.1);
        let mut instances = Vec::with_capacity(n);
        for (i, &slot) in slots.iter().take(n).enumerate() {
            let category = if i < k { cats[i] } else { cats[rng.gen_range(0..k)] };
            let color = rng.gen_range(0..n_colors);
            let size = if rng.gen_bool(0.5) { Size::Small } else { Size::Large };
            let free = (SLOT - size.side()) / 2;
            let oy = 2 * rng.gen_range(0..=free);
            let ox = 2 * rng.gen_range(0..=free);
            let inst = Instance { category, color, size, origin: ((slot / sw) * SLOT + oy, (slot % sw) * SLOT + ox) };
            let id = cell_class(category, color, n_colors);
            for (y, x) in inst.cells() {
                grid.set(y, x, id);
            }
            instances.push(inst);
        }
        Ok(Self { grid, instances })
    }

    /// Binary mask of the given instances, row-major.
    pub fn mask(&self, referred: &[usize]) -> Vec<u8> {
        let mut m = vec![0u8; self.grid.h * self.grid.w];
        for &i in referred {
            for (y, x) in self.instances[i].cells() {
                m[y * self.grid.w + x] = 1;
            }
        }
        m
    }

    /// Referred-instance tally per category.
    pub fn counts(&self, referred: &[usize], n_categories: usize) -> Vec<u32> {
        let mut c = vec![0u32; n_categories];
        for &i in referred {
            c[self.instances[i].category] += 1;
        }
        c
    }

    pub fn categories_present(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.instances.iter().map(|i| i.category).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}
