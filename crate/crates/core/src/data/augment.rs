//! Geometric augmentation and pairwise mixing on `3×32×32` images.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::cifar::{CHANNELS, IMAGE_SIDE};

pub const PAD: usize = 4;
const S: usize = IMAGE_SIDE;
const PLANE: usize = S * S;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Crop at offset `(oy, ox)` ∈ `[0, 2·PAD]²` from the reflect-padded image,
/// optionally mirrored left-right.
pub fn augment_with(image: &[f32], oy: usize, ox: usize, flip: bool) -> Vec<f32> {
    assert!(oy <= 2 * PAD && ox <= 2 * PAD, "crop offset out of range");
    let mut out = vec![0.0; image.len()];
    for c in 0..CHANNELS {
        for y in 0..S {
            let sy = reflect(y as isize + oy as isize - PAD as isize, S);
            for x in 0..S {
                let tx = if flip { S - 1 - x } else { x };
                let sx = reflect(tx as isize + ox as isize - PAD as isize, S);
                out[c * PLANE + y * S + x] = image[c * PLANE + sy * S + sx];
            }
        }
    }
    out
}

/// Reflect-pad by 4, random 32×32 crop, horizontal flip with probability 0.5.
pub fn augment_geometric(image: &[f32], rng: &mut impl Rng) -> Vec<f32> {
    let oy = rng.random_range(0..=2 * PAD);
    let ox = rng.random_range(0..=2 * PAD);
    let flip = rng.random_bool(0.5);
    augment_with(image, oy, ox, flip)
}

/// `x_i ← λ·x_i + (1−λ)·x_perm(i)`, with targets mixed the same way.
pub fn mixup_with(images: &mut [f32], targets: &mut [f32], classes: usize, perm: &[usize], lam: f32) {
    let img = images.len() / perm.len();
    let (x0, t0) = (images.to_vec(), targets.to_vec());
    for (i, &j) in perm.iter().enumerate() {
        for p in 0..img {
            images[i * img + p] = lam * x0[i * img + p] + (1.0 - lam) * x0[j * img + p];
        }
        for c in 0..classes {
            targets[i * classes + c] = lam * t0[i * classes + c] + (1.0 - lam) * t0[j * classes + c];
        }
    }
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    /// Box of area ratio `1 − λ` centred uniformly, clipped at the borders.
    pub fn sample(lam: f64, rng: &mut impl Rng) -> CutBox {
        let cut = ((1.0 - lam).max(0.0).sqrt() * S as f64) as usize;
        let cy = rng.random_range(0..S);
        let cx = rng.random_range(0..S);
        CutBox {
            y0: cy.saturating_sub(cut / 2),
            y1: (cy + cut / 2).min(S),
            x0: cx.saturating_sub(cut / 2),
            x1: (cx + cut / 2).min(S),
        }
    }
}

/// Pastes `cut` from each partner into every image; returns the adjusted
/// `λ' = 1 − area / 1024` used to mix the targets.
pub fn cutmix_with(images: &mut [f32], targets: &mut [f32], classes: usize, perm: &[usize], cut: CutBox) -> f32 {
    let img = images.len() / perm.len();
    let x0 = images.to_vec();
    for (i, &j) in perm.iter().enumerate() {
        for c in 0..CHANNELS {
            for y in cut.y0..cut.y1 {
                for x in cut.x0..cut.x1 {
                    let p = c * PLANE + y * S + x;
                    images[i * img + p] = x0[j * img + p];
                }
            }
        }
    }
    let lam = 1.0 - cut.area() as f32 / PLANE as f32;
    let t0 = targets.to_vec();
    for (i, &j) in perm.iter().enumerate() {
        for c in 0..classes {
            targets[i * classes + c] = lam * t0[i * classes + c] + (1.0 - lam) * t0[j * classes + c];
        }
    }
    lam
}

fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(p.as_mut_slice(), rng);
    p
}

/// Mixup with `λ ~ Beta(α, α)` and a random partner permutation. Returns λ.
pub fn mixup(images: &mut [f32], targets: &mut [f32], classes: usize, alpha: f64, rng: &mut impl Rng) -> f32 {
    let lam = Beta::new(alpha, alpha).expect("alpha > 0").sample(rng) as f32;
    let perm = permutation(targets.len() / classes, rng);
    mixup_with(images, targets, classes, &perm, lam);
    lam
}

/// CutMix with `λ ~ Beta(α, α)`. Returns the area-adjusted λ'.
pub fn cutmix(images: &mut [f32], targets: &mut [f32], classes: usize, alpha: f64, rng: &mut impl Rng) -> f32 {
    let lam = Beta::new(alpha, alpha).expect("alpha > 0").sample(rng);
    let perm = permutation(targets.len() / classes, rng);
    let cut = CutBox::sample(lam, rng);
    cutmix_with(images, targets, classes, &perm, cut)
}
