//! Synthetic inputs for experiments and tests: discretized Gaussians and
//! square bumps on 1-D grids, periodically translated patterns on a torus,
//! planted CP mixtures with uniform noise, and small digit-like glyphs.

use crate::simplex::SimplexStack;
use crate::tensor::{cp_outer, Mode, Tensor};
use crate::Result;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Dirichlet;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stack of `fibers` independent Dirichlet(1) draws of dimension `fiber_len`,
/// stored as the columns of a `(fiber_len, fibers)` tensor.
pub fn dirichlet_stack(rng: &mut ChaCha8Rng, fiber_len: usize, fibers: usize) -> Tensor {
    let mut data = vec![0.0; fiber_len * fibers];
    if fiber_len == 1 {
        for v in data.iter_mut() {
            *v = 1.0;
        }
        return Tensor::new(vec![1, fibers], data).expect("valid shape");
    }
    let dist = Dirichlet::new(&vec![1.0; fiber_len]).expect("valid Dirichlet parameters");
    for t in 0..fibers {
        let fiber = dist.sample(rng);
        for (i, v) in fiber.into_iter().enumerate() {
            data[i * fibers + t] = v;
        }
    }
    Tensor::new(vec![fiber_len, fibers], data).expect("valid shape")
}

/// Discretized Gaussian on `bins` points over [0, 1] mixed with a 1e-4
/// uniform background, normalized to sum 1. The background keeps the far
/// tails at a representable scale (a bare Gaussian decays below 1e-100 a few
/// sigma out, which leaves the transport duals with numerically flat
/// directions).
pub fn gaussian_1d(bins: usize, mean: f64, sigma: f64) -> Vec<f64> {
    const BACKGROUND: f64 = 1e-4;
    let mut v: Vec<f64> = (0..bins)
        .map(|i| {
            let x = if bins > 1 {
                i as f64 / (bins - 1) as f64
            } else {
                0.0
            };
            let z = (x - mean) / sigma;
            (-0.5 * z * z).exp()
        })
        .collect();
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x = (1.0 - BACKGROUND) * (*x / s) + BACKGROUND / bins as f64;
    }
    v
}

/// Square bump: uniform mass on the sub-interval `[center - width/2,
/// center + width/2]` of [0, 1], small floor elsewhere.
pub fn square_1d(bins: usize, center: f64, width: f64) -> Vec<f64> {
    let floor = 1e-6;
    let mut v: Vec<f64> = (0..bins)
        .map(|i| {
            let x = if bins > 1 {
                i as f64 / (bins - 1) as f64
            } else {
                0.0
            };
            if (x - center).abs() <= width / 2.0 {
                1.0
            } else {
                floor
            }
        })
        .collect();
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
    v
}

/// `n` cyclic translates of a small blob pattern on an `(h, w)` torus grid,
/// with seeded offsets; every sample is the same shape shifted.
pub fn translated_patterns(h: usize, w: usize, n: usize, seed: u64) -> Result<SimplexStack> {
    let mut rng = seeded_rng(seed);
    // Blob with an asymmetric tail so translates are distinguishable.
    let blob = [
        (0isize, 0isize, 4.0),
        (0, 1, 3.0),
        (1, 0, 3.0),
        (1, 1, 2.0),
        (2, 1, 1.0),
        (1, 2, 1.0),
        (0, 2, 0.5),
    ];
    let mut data = vec![0.0; h * w * n];
    for t in 0..n {
        let dy = rng.gen_range(0..h) as isize;
        let dx = rng.gen_range(0..w) as isize;
        let mut img = vec![1e-9; h * w];
        for &(by, bx, mass) in &blob {
            let y = (by + dy).rem_euclid(h as isize) as usize;
            let x = (bx + dx).rem_euclid(w as isize) as usize;
            img[y * w + x] += mass;
        }
        let s: f64 = img.iter().sum();
        for (pix, v) in img.iter().enumerate() {
            data[pix * n + t] = v / s;
        }
    }
    SimplexStack::new(Tensor::new(vec![h, w, n], data)?, 2)
}

/// Planted CP mixture with entrywise uniform noise: draws `rank0` factor
/// columns and codes from Dirichlet(1), forms `cp_outer(U) x_{d+1} codes`,
/// adds i.i.d. Uniform(0, noise_high) to every entry, then renormalizes each
/// sample fiber.
pub fn planted_cp_with_noise(
    grid_shape: &[usize],
    rank0: usize,
    n: usize,
    noise_high: f64,
    seed: u64,
) -> Result<SimplexStack> {
    let mut rng = seeded_rng(seed);
    let factors: Vec<Tensor> = grid_shape
        .iter()
        .map(|&ik| dirichlet_stack(&mut rng, ik, rank0))
        .collect();
    let refs: Vec<&Tensor> = factors.iter().collect();
    let atoms = cp_outer(&refs)?;
    let codes = dirichlet_stack(&mut rng, rank0, n);
    let mut mix = atoms.mode_product(&codes.extract_mode(Mode(1))?, Mode(grid_shape.len() + 1))?;
    let p: usize = grid_shape.iter().product();
    {
        let data = mix.data_mut();
        for v in data.iter_mut() {
            *v += rng.gen_range(0.0..noise_high);
        }
        // Renormalize each sample fiber (columns of the (p, n) layout).
        for t in 0..n {
            let mut s = 0.0;
            for i in 0..p {
                s += data[i * n + t];
            }
            for i in 0..p {
                data[i * n + t] /= s;
            }
        }
    }
    let mut shape = grid_shape.to_vec();
    shape.push(n);
    SimplexStack::new(mix.into_reshaped(shape)?, grid_shape.len())
}

/// Exactly representable dictionary data: planted atoms and codes, no noise.
/// Returns (data, planted dictionary, planted codes).
pub fn planted_dictionary(
    grid_shape: &[usize],
    rank: usize,
    n: usize,
    seed: u64,
) -> Result<(SimplexStack, SimplexStack, SimplexStack)> {
    let mut rng = seeded_rng(seed);
    let p: usize = grid_shape.iter().product();
    let d = dirichlet_stack(&mut rng, p, rank);
    let codes = dirichlet_stack(&mut rng, rank, n);
    let x = d.as_mat(p, rank).dot(&codes.as_mat(rank, n));
    let mut shape = grid_shape.to_vec();
    shape.push(n);
    let data = SimplexStack::new(
        Tensor::new(shape, x.iter().cloned().collect())?,
        grid_shape.len(),
    )?;
    let mut d_shape = grid_shape.to_vec();
    d_shape.push(rank);
    let dict = SimplexStack::new(d.into_reshaped(d_shape)?, grid_shape.len())?;
    let codes = SimplexStack::new(codes, 1)?;
    Ok((data, dict, codes))
}

/// Small procedural 8x8 digit-like glyphs (strokes on a grid, blurred and
/// normalized); used as a stand-in for image-valued samples.
pub fn digit_glyphs(n: usize, seed: u64) -> Result<SimplexStack> {
    let side = 8usize;
    let strokes: [&[(usize, usize)]; 5] = [
        // ring
        &[(1, 2), (1, 3), (1, 4), (2, 1), (2, 5), (3, 1), (3, 5), (4, 1), (4, 5), (5, 2), (5, 3), (5, 4)],
        // vertical bar
        &[(1, 3), (2, 3), (3, 3), (4, 3), (5, 3), (6, 3)],
        // top arc + tail
        &[(1, 2), (1, 3), (1, 4), (2, 5), (3, 4), (4, 3), (5, 2), (6, 2), (6, 3), (6, 4)],
        // two bars
        &[(1, 1), (2, 1), (3, 1), (4, 1), (1, 5), (2, 5), (3, 5), (4, 5), (5, 2), (5, 3), (5, 4)],
        // diagonal
        &[(1, 1), (2, 2), (3, 3), (4, 4), (5, 5), (6, 6)],
    ];
    let mut rng = seeded_rng(seed);
    let mut data = vec![0.0; side * side * n];
    for t in 0..n {
        let glyph = strokes[rng.gen_range(0..strokes.len())];
        let mut img = vec![0.0; side * side];
        for &(y, x) in glyph {
            img[y * side + x] += 1.0;
        }
        // one-pass box blur and a positive floor
        let mut blurred = vec![1e-6; side * side];
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let yy = y as isize + dy;
                        let xx = x as isize + dx;
                        if yy >= 0 && yy < side as isize && xx >= 0 && xx < side as isize {
                            acc += img[yy as usize * side + xx as usize];
                        }
                    }
                }
                blurred[y * side + x] += acc;
            }
        }
        let s: f64 = blurred.iter().sum();
        for (pix, v) in blurred.iter().enumerate() {
            data[pix * n + t] = v / s;
        }
    }
    SimplexStack::new(Tensor::new(vec![side, side, n], data)?, 2)
}
