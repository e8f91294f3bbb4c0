//! Synthetic hyperspectral data, RGB projection, and evaluation-time
//! perturbations.
//!
//! Cubes are channel-major `[C, H, W]` so a spectral vector is a strided
//! column. The generator composes a few Gaussian blobs — smooth in space and
//! in spectrum — over a wide background blob, which keeps every voxel inside
//! `(0, 1]` with a comfortable positive floor.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A channel-major `[C, H, W]` stack of image planes. RGB images are the
/// `c == 3` special case.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl HsiCube {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Dim(format!("cube extents must be positive, got {c}x{h}x{w}")));
        }
        let numel = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::DimOverflow(format!("{c}x{h}x{w} overflows usize")))?;
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "cube {c}x{h}x{w} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(HsiCube { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Result<Self> {
        let numel = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::DimOverflow(format!("{c}x{h}x{w} overflows usize")))?;
        Self::new(c, h, w, vec![0.0; numel])
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    pub fn same_shape(&self, other: &HsiCube) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }
}

/// An RGB observation paired with its hyperspectral ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub rgb: HsiCube,
    pub hsi: HsiCube,
}

/// Seed-deterministic synthetic cube: `n_materials` smooth spectra, each a
/// sum of 2–4 Gaussian bumps over the band index normalized to peak 1, mixed
/// linearly through smooth spatial abundance maps that sum to one per pixel.
/// One bump per material is very wide, which keeps every band of every
/// spectrum comfortably above zero. Values land in `[0, 1]`.
pub fn synth_hsi(seed: u64, c: usize, h: usize, w: usize, n_materials: usize) -> Result<HsiCube> {
    if c < 4 || h < 4 || w < 4 {
        return Err(Error::Arg(format!(
            "synthetic cubes need extents of at least 4, got {c}x{h}x{w}"
        )));
    }
    if n_materials == 0 {
        return Err(Error::Arg("synthetic cubes need at least one material".into()));
    }
    let mut cube = HsiCube::zeros(c, h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Spectral templates: 2–4 Gaussian bumps each; the first bump spans the
    // whole band range so no band decays to zero.
    let spectra: Vec<Vec<f64>> = (0..n_materials)
        .map(|_| {
            let n_bumps = rng.gen_range(2..=4usize);
            let bumps: Vec<(f64, f64, f64)> = (0..n_bumps)
                .map(|b| {
                    let center = rng.gen_range(0.0..c as f64);
                    let (width, amp) = if b == 0 {
                        (rng.gen_range(2.0..4.0) * c as f64, rng.gen_range(0.3..0.6))
                    } else {
                        (rng.gen_range(c as f64 / 8.0..c as f64 / 2.0), rng.gen_range(0.5..1.0))
                    };
                    (center, width, amp)
                })
                .collect();
            let raw: Vec<f64> = (0..c)
                .map(|ch| {
                    bumps
                        .iter()
                        .map(|&(mu, sigma, amp)| {
                            let z = (ch as f64 - mu) / sigma;
                            amp * (-0.5 * z * z).exp()
                        })
                        .sum()
                })
                .collect();
            let peak = raw.iter().cloned().fold(f64::MIN, f64::max);
            raw.iter().map(|v| v / peak).collect()
        })
        .collect();

    // Spatial abundance: one smooth Gaussian blob per material, normalized
    // per pixel into a convex mixture.
    struct Blob {
        cy: f64,
        cx: f64,
        sigma: f64,
    }
    let blobs: Vec<Blob> = (0..n_materials)
        .map(|_| Blob {
            cy: rng.gen_range(0.0..h as f64),
            cx: rng.gen_range(0.0..w as f64),
            sigma: rng.gen_range(h.min(w) as f64 / 4.0..h.max(w) as f64),
        })
        .collect();

    for y in 0..h {
        for x in 0..w {
            let mut abundances: Vec<f64> = blobs
                .iter()
                .map(|b| {
                    let dy = y as f64 - b.cy;
                    let dx = x as f64 - b.cx;
                    (-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma)).exp()
                })
                .collect();
            let total: f64 = abundances.iter().sum();
            for a in &mut abundances {
                *a /= total;
            }
            for ch in 0..c {
                let v: f64 = abundances.iter().zip(&spectra).map(|(a, s)| a * s[ch]).sum();
                *cube.at_mut(ch, y, x) = v as f32;
            }
        }
    }
    Ok(cube)
}

/// RGB camera response: three nonnegative rows over the spectral channels,
/// each summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralResponse {
    pub c: usize,
    /// Row-major `[3, c]`.
    pub rows: Vec<f32>,
}

impl SpectralResponse {
    /// Three Gaussian passbands centered at 1/6, 1/2, and 5/6 of the
    /// spectral range, normalized to sum to one. Deterministic.
    pub fn gaussian(c: usize) -> Result<Self> {
        if c < 2 {
            return Err(Error::Arg(format!("spectral response needs at least 2 channels, got {c}")));
        }
        let centers = [c as f64 / 6.0, c as f64 / 2.0, 5.0 * c as f64 / 6.0];
        let sigma = c as f64 / 6.0;
        let mut rows = Vec::with_capacity(3 * c);
        for center in centers {
            let band: Vec<f64> = (0..c)
                .map(|ch| {
                    let z = (ch as f64 - center) / sigma;
                    (-0.5 * z * z).exp()
                })
                .collect();
            let total: f64 = band.iter().sum();
            rows.extend(band.iter().map(|v| (v / total) as f32));
        }
        Ok(SpectralResponse { c, rows })
    }

    /// Validate and exactly renormalize caller-provided rows.
    pub fn from_rows(c: usize, rows: Vec<f32>) -> Result<Self> {
        if rows.len() != 3 * c {
            return Err(Error::Dim(format!(
                "spectral response wants 3x{c} values, got {}",
                rows.len()
            )));
        }
        let mut out = rows;
        for r in 0..3 {
            let row = &mut out[r * c..(r + 1) * c];
            if row.iter().any(|&v| v < 0.0) {
                return Err(Error::Arg(format!("response row {r} has negative weights")));
            }
            let total: f64 = row.iter().map(|&v| v as f64).sum();
            if total <= 0.0 {
                return Err(Error::Arg(format!("response row {r} sums to zero")));
            }
            for v in row {
                *v = (*v as f64 / total) as f32;
            }
        }
        Ok(SpectralResponse { c, rows: out })
    }
}

/// Project a hyperspectral cube to RGB: each output plane is the
/// response-weighted average over the spectral channels.
pub fn hsi_to_rgb(cube: &HsiCube, resp: &SpectralResponse) -> Result<HsiCube> {
    if cube.c != resp.c {
        return Err(Error::Dim(format!(
            "cube has {} channels but response covers {}",
            cube.c, resp.c
        )));
    }
    let mut rgb = HsiCube::zeros(3, cube.h, cube.w)?;
    for band in 0..3 {
        for ch in 0..cube.c {
            let weight = resp.rows[band * cube.c + ch] as f64;
            if weight == 0.0 {
                continue;
            }
            for y in 0..cube.h {
                for x in 0..cube.w {
                    let v = *rgb.at_mut(band, y, x) as f64 + weight * cube.at(ch, y, x) as f64;
                    *rgb.at_mut(band, y, x) = v as f32;
                }
            }
        }
    }
    Ok(rgb)
}

/// Number of materials used by generated benchmark scenes.
pub const DEFAULT_MATERIALS: usize = 3;

/// Generate `n` paired samples; sample `i` uses `base_seed + i` and carries
/// the id `synth-<base_seed+i>`.
pub fn synth_dataset(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    base_seed: u64,
    resp: &SpectralResponse,
) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let seed = base_seed + i as u64;
            let hsi = synth_hsi(seed, c, h, w, DEFAULT_MATERIALS)?;
            let rgb = hsi_to_rgb(&hsi, resp)?;
            Ok(Sample {
                id: format!("synth-{seed}"),
                rgb,
                hsi,
            })
        })
        .collect()
}

/// Number of channels retained by the random channel mask: the largest power
/// of two not exceeding `c / 2`.
pub fn masked_channel_count(c: usize) -> Result<usize> {
    if c < 2 {
        return Err(Error::Arg(format!("channel masking needs at least 2 channels, got {c}")));
    }
    Ok(1usize << (c / 2).ilog2())
}

/// Draw an ascending random subset of `count` channel indices out of `c`.
pub fn channel_mask<R: Rng>(c: usize, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if count == 0 || count > c {
        return Err(Error::Arg(format!("cannot mask {count} channels out of {c}")));
    }
    let mut picked = rand::seq::index::sample(rng, c, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Gather the masked channels of a cube into a new `[count, H, W]` cube.
pub fn select_channels(cube: &HsiCube, mask: &[usize]) -> Result<HsiCube> {
    let plane = cube.h * cube.w;
    let mut data = Vec::with_capacity(mask.len() * plane);
    for &ch in mask {
        if ch >= cube.c {
            return Err(Error::Arg(format!("mask channel {ch} out of range 0..{}", cube.c)));
        }
        data.extend_from_slice(&cube.data[ch * plane..(ch + 1) * plane]);
    }
    HsiCube::new(mask.len(), cube.h, cube.w, data)
}

/// Rearrange non-overlapping `patch x patch` tiles: output tile `t` takes its
/// content from source tile `perm[t]`. `perm` must be a bijection over the
/// tile grid.
pub fn apply_patch_permutation(cube: &HsiCube, patch: usize, perm: &[usize]) -> Result<HsiCube> {
    if patch == 0 || cube.h % patch != 0 || cube.w % patch != 0 {
        return Err(Error::Arg(format!(
            "patch size {patch} does not tile a {}x{} image",
            cube.h, cube.w
        )));
    }
    let (ty, tx) = (cube.h / patch, cube.w / patch);
    let tiles = ty * tx;
    if perm.len() != tiles {
        return Err(Error::Arg(format!(
            "permutation covers {} tiles but the grid has {tiles}",
            perm.len()
        )));
    }
    let mut seen = vec![false; tiles];
    for &p in perm {
        if p >= tiles || seen[p] {
            return Err(Error::Arg("tile permutation is not a bijection".into()));
        }
        seen[p] = true;
    }

    let mut out = HsiCube::zeros(cube.c, cube.h, cube.w)?;
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dx) = (dst / tx * patch, dst % tx * patch);
        let (sy, sx) = (src / tx * patch, src % tx * patch);
        for ch in 0..cube.c {
            for row in 0..patch {
                for col in 0..patch {
                    *out.at_mut(ch, dy + row, dx + col) = cube.at(ch, sy + row, sx + col);
                }
            }
        }
    }
    Ok(out)
}

/// Shuffle the tile grid of an RGB/HSI pair with one shared permutation.
/// Returns the shuffled pair and the permutation that produced it.
pub fn patch_shuffle(
    rgb: &HsiCube,
    hsi: &HsiCube,
    patch: usize,
    seed: u64,
) -> Result<(HsiCube, HsiCube, Vec<usize>)> {
    if rgb.h != hsi.h || rgb.w != hsi.w {
        return Err(Error::Dim(format!(
            "rgb {}x{} and hsi {}x{} differ spatially",
            rgb.h, rgb.w, hsi.h, hsi.w
        )));
    }
    if patch == 0 || rgb.h % patch != 0 || rgb.w % patch != 0 {
        return Err(Error::Arg(format!(
            "patch size {patch} does not tile a {}x{} image",
            rgb.h, rgb.w
        )));
    }
    let tiles = (rgb.h / patch) * (rgb.w / patch);
    let mut perm: Vec<usize> = (0..tiles).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let srgb = apply_patch_permutation(rgb, patch, &perm)?;
    let shsi = apply_patch_permutation(hsi, patch, &perm)?;
    Ok((srgb, shsi, perm))
}

/// Element-wise `v^gamma` brightness perturbation. Inputs must be
/// nonnegative and `gamma` positive.
pub fn gamma_perturb(cube: &HsiCube, gamma: f32) -> Result<HsiCube> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(Error::Arg(format!("gamma must be positive and finite, got {gamma}")));
    }
    if cube.data.iter().any(|&v| v < 0.0) {
        return Err(Error::Domain("gamma perturbation needs nonnegative values".into()));
    }
    let data = cube.data.iter().map(|&v| v.powf(gamma)).collect();
    HsiCube::new(cube.c, cube.h, cube.w, data)
}
