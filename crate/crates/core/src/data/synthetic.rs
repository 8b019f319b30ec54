//! Procedurally rendered glyph dataset for fast tests.
//!
//! Every class is a 5×5 bitmap glyph that is not invariant under any
//! non-trivial quarter-turn and is not a rotation of another class, so both
//! class identity and orientation are recoverable from an image. Glyphs are
//! drawn at a random scale and position in a random colour over a noisy
//! gradient background.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::util::keyed_rng;

pub const GLYPH_SIZE: usize = 5;

const GLYPHS: [&str; 10] = [
    // F
    "#####\
     #....\
     ####.\
     #....\
     #....",
    // L
    "#....\
     #....\
     #....\
     #....\
     #####",
    // P
    "####.\
     #...#\
     ####.\
     #....\
     #....",
    // J
    "..###\
     ...#.\
     ...#.\
     #..#.\
     .##..",
    // 7
    "#####\
     ....#\
     ...#.\
     ..#..\
     ..#..",
    // 4
    "#..#.\
     #..#.\
     #####\
     ...#.\
     ...#.",
    // arrow
    "..#..\
     .###.\
     #.#.#\
     ..#..\
     ..#..",
    // T
    "#####\
     ..#..\
     ..#..\
     ..#..\
     ..#..",
    // E
    "#####\
     #....\
     ####.\
     #....\
     #####",
    // R
    "####.\
     #...#\
     ####.\
     #..#.\
     #...#",
];

/// The class glyphs as row-major 5×5 boolean masks.
pub fn glyphs() -> Vec<[[bool; GLYPH_SIZE]; GLYPH_SIZE]> {
    GLYPHS
        .iter()
        .map(|s| {
            let cells: Vec<bool> = s.chars().filter(|c| !c.is_whitespace()).map(|c| c == '#').collect();
            let mut g = [[false; GLYPH_SIZE]; GLYPH_SIZE];
            for (i, row) in g.iter_mut().enumerate() {
                row.copy_from_slice(&cells[i * GLYPH_SIZE..(i + 1) * GLYPH_SIZE]);
            }
            g
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticShapes {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    /// Number of classes, at most 10.
    pub classes: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Random filled rectangles drawn before the glyph.
    pub clutter: usize,
}

impl Default for SyntheticShapes {
    fn default() -> Self {
        SyntheticShapes { n: 1000, size: 32, seed: 0, classes: 10, noise: 0.1, clutter: 0 }
    }
}

/// `n` images of `size × size` pixels with the default rendering settings.
pub fn make_synthetic_shapes(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    SyntheticShapes { n, size, seed, ..Default::default() }.generate()
}

fn color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)]
}

fn distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f32>() / 3.0
}

impl SyntheticShapes {
    pub fn generate(&self) -> Result<Dataset> {
        if self.size < 8 || self.size % 4 != 0 {
            return Err(Error::Config(format!("synthetic image size must be a multiple of 4 and ≥ 8, got {}", self.size)));
        }
        if self.classes < 2 || self.classes > GLYPHS.len() {
            return Err(Error::Config(format!("synthetic classes must be in 2..=10, got {}", self.classes)));
        }
        let glyphs = glyphs();
        let s = self.size;
        let mut labels: Vec<i64> = (0..self.n).map(|i| (i % self.classes) as i64).collect();
        labels.shuffle(&mut keyed_rng(self.seed, "synthetic/labels"));

        let mut pixels = vec![0f32; self.n * 3 * s * s];
        let max_cell = ((s as f64 * 0.8) / GLYPH_SIZE as f64).floor().max(1.0) as usize;
        let min_cell = ((s as f64 * 0.4) / GLYPH_SIZE as f64).floor().max(1.0) as usize;
        for (i, &label) in labels.iter().enumerate() {
            let mut rng = keyed_rng(self.seed, &format!("synthetic/image/{i}"));
            let img = &mut pixels[i * 3 * s * s..(i + 1) * 3 * s * s];
            let bg = color(&mut rng);
            let grad: [f32; 2] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let t = grad[0] * (y as f32 / s as f32 - 0.5) + grad[1] * (x as f32 / s as f32 - 0.5);
                        img[(c * s + y) * s + x] = bg[c] + t;
                    }
                }
            }
            for _ in 0..self.clutter {
                let col = color(&mut rng);
                let (h, w) = (rng.random_range(1..=s / 4), rng.random_range(1..=s / 4));
                let (y0, x0) = (rng.random_range(0..=s - h), rng.random_range(0..=s - w));
                for c in 0..3 {
                    for y in y0..y0 + h {
                        for x in x0..x0 + w {
                            img[(c * s + y) * s + x] = col[c];
                        }
                    }
                }
            }
            let mut fg = color(&mut rng);
            for _ in 0..16 {
                if distance(fg, bg) >= 0.5 {
                    break;
                }
                fg = color(&mut rng);
            }
            let cell = rng.random_range(min_cell..=max_cell);
            let extent = cell * GLYPH_SIZE;
            let (y0, x0) = (rng.random_range(0..=s - extent), rng.random_range(0..=s - extent));
            let glyph = &glyphs[label as usize];
            for (gy, row) in glyph.iter().enumerate() {
                for (gx, &on) in row.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    for y in y0 + gy * cell..y0 + (gy + 1) * cell {
                        for x in x0 + gx * cell..x0 + (gx + 1) * cell {
                            for c in 0..3 {
                                img[(c * s + y) * s + x] = fg[c];
                            }
                        }
                    }
                }
            }
            if self.noise > 0.0 {
                for p in img.iter_mut() {
                    *p += self.noise as f32 * rng.sample::<f32, _>(StandardNormal);
                }
            }
            for p in img.iter_mut() {
                *p = p.clamp(-1.0, 1.0);
            }
        }
        let images = Tensor::from_slice(&pixels).reshape([self.n as i64, 3, s as i64, s as i64]);
        Dataset::new(
            format!("shapes{}-{}c-seed{}", s, self.classes, self.seed),
            images,
            Some(Tensor::from_slice(&labels)),
            Some(self.classes as i64),
            Split::Train,
            0..self.n,
        )
    }
}
