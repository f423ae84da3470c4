use nalgebra::Vector2;
use rayon::prelude::*;

use super::project::Projected2DGaussian;
use super::sh::ColorSample;
use super::RasterConfig;
use crate::camera::Camera;
use crate::error::{Error, Result};

/// Composited image plus everything the backward pass needs to replay it.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major `H×W×3`.
    pub image: Vec<f64>,
    /// Per-pixel transmittance left after compositing.
    pub t_final: Vec<f64>,
    /// Projected Gaussians in compositing order.
    pub projected: Vec<Projected2DGaussian>,
    pub colors: Vec<ColorSample>,
    pub(crate) config: RasterConfig,
    pub(crate) tiles_x: usize,
    /// Per tile, indices into `projected` in compositing order.
    pub(crate) tile_lists: Vec<Vec<u32>>,
    /// Per pixel, how many entries of its tile list were visited before
    /// early termination (or the whole list).
    pub(crate) processed: Vec<u32>,
    /// Per pixel, number of samples with α ≥ alpha_skip.
    pub contributions: Vec<u32>,
    /// Per pixel, number of samples hitting `alpha_clamp`.
    pub clamped: Vec<u32>,
}

impl RenderOutput {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = 3 * (y * self.width + x);
        [self.image[o], self.image[o + 1], self.image[o + 2]]
    }

    pub(crate) fn tile_of(&self, x: usize, y: usize) -> usize {
        let ts = self.config.tile_size;
        (y / ts) * self.tiles_x + x / ts
    }

    /// Source indices of the Gaussians that contributed to pixel `(x, y)`,
    /// in compositing order.
    pub fn contributors(&self, x: usize, y: usize) -> Vec<usize> {
        let list = &self.tile_lists[self.tile_of(x, y)];
        let n = self.processed[y * self.width + x] as usize;
        let px = Vector2::new(x as f64, y as f64);
        list[..n]
            .iter()
            .filter_map(|&j| {
                let g = &self.projected[j as usize];
                let (a, _) = sample_alpha(g, px, &self.config);
                (a >= self.config.alpha_skip).then_some(g.index)
            })
            .collect()
    }

    /// Fingerprint of the discrete structure of the render: which samples
    /// were skipped, clamped or cut off by early termination, plus colour
    /// clamps. Equal fingerprints mean the render is smooth between two
    /// parameter settings.
    pub fn structure_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.processed.hash(&mut h);
        self.contributions.hash(&mut h);
        self.clamped.hash(&mut h);
        for p in &self.projected {
            p.index.hash(&mut h);
        }
        for c in &self.colors {
            c.clamped.hash(&mut h);
        }
        h.finish()
    }
}

/// `(α, clamped)` for a projected Gaussian at pixel position `x`.
#[inline]
pub(crate) fn sample_alpha(g: &Projected2DGaussian, x: Vector2<f64>, cfg: &RasterConfig) -> (f64, bool) {
    let d = x - g.mean;
    let power = 0.5 * (g.conic[(0, 0)] * d.x * d.x + g.conic[(1, 1)] * d.y * d.y)
        + g.conic[(0, 1)] * d.x * d.y;
    if power > g.skip_power {
        return (0.0, false);
    }
    let a = g.opacity * (-power).exp();
    if a > cfg.alpha_clamp {
        (cfg.alpha_clamp, true)
    } else {
        (a, false)
    }
}

/// α of a projected Gaussian at pixel position `x`: `min(o·exp(-½dᵀΣ⁻¹d),
/// alpha_clamp)`, or 0 below `alpha_skip`.
pub fn alpha_at(
    g: &Projected2DGaussian,
    opacity: f64,
    x: [f64; 2],
    cfg: &RasterConfig,
) -> Result<f64> {
    let det = g.cov.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::DegenerateCovariance { det });
    }
    let inv = g.cov.try_inverse().ok_or(Error::DegenerateCovariance { det })?;
    let d = Vector2::new(x[0], x[1]) - g.mean;
    let power = 0.5 * (d.transpose() * inv * d)[(0, 0)];
    let a = (opacity * (-power).exp()).min(cfg.alpha_clamp);
    Ok(if a < cfg.alpha_skip { 0.0 } else { a })
}

struct TileResult {
    color: Vec<[f64; 3]>,
    t_final: Vec<f64>,
    processed: Vec<u32>,
    contributions: Vec<u32>,
    clamped: Vec<u32>,
}

pub(crate) fn tile_bounds(tile: usize, tiles_x: usize, ts: usize, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let tx = tile % tiles_x;
    let ty = tile / tiles_x;
    let x0 = tx * ts;
    let y0 = ty * ts;
    (x0, y0, (x0 + ts).min(w), (y0 + ts).min(h))
}

/// Front-to-back compositing of depth-sorted Gaussians over a black
/// background.
pub fn composite(
    projected: Vec<Projected2DGaussian>,
    colors: Vec<ColorSample>,
    cam: &Camera,
    cfg: &RasterConfig,
) -> Result<RenderOutput> {
    if colors.len() != projected.len() {
        return Err(Error::ContractViolation(format!(
            "{} colours for {} projected Gaussians",
            colors.len(),
            projected.len()
        )));
    }
    if cfg!(debug_assertions) {
        let sorted = projected.windows(2).all(|w| {
            w[0].depth < w[1].depth || (w[0].depth == w[1].depth && w[0].index < w[1].index)
        });
        if !sorted {
            return Err(Error::ContractViolation(
                "composite input is not sorted by (depth, index)".into(),
            ));
        }
    }
    let (w, h) = (cam.width, cam.height);
    let ts = cfg.tile_size.max(1);
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (j, g) in projected.iter().enumerate() {
        let lo_x = (g.mean.x - g.radius.x).ceil().max(0.0);
        let hi_x = (g.mean.x + g.radius.x).floor().min(w as f64 - 1.0);
        let lo_y = (g.mean.y - g.radius.y).ceil().max(0.0);
        let hi_y = (g.mean.y + g.radius.y).floor().min(h as f64 - 1.0);
        if !(lo_x <= hi_x && lo_y <= hi_y) {
            continue;
        }
        let (tx0, tx1) = (lo_x as usize / ts, hi_x as usize / ts);
        let (ty0, ty1) = (lo_y as usize / ts, hi_y as usize / ts);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tile_lists[ty * tiles_x + tx].push(j as u32);
            }
        }
    }

    let run_tile = |tile: usize| -> TileResult {
        let (x0, y0, x1, y1) = tile_bounds(tile, tiles_x, ts, w, h);
        let n = (x1 - x0) * (y1 - y0);
        let mut res = TileResult {
            color: vec![[0.0; 3]; n],
            t_final: vec![1.0; n],
            processed: vec![0; n],
            contributions: vec![0; n],
            clamped: vec![0; n],
        };
        let list = &tile_lists[tile];
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let px = Vector2::new(x as f64, y as f64);
                let mut t = 1.0;
                let mut c = [0.0; 3];
                let mut visited = list.len();
                for (step, &j) in list.iter().enumerate() {
                    let g = &projected[j as usize];
                    let (a, hit_clamp) = sample_alpha(g, px, cfg);
                    if a < cfg.alpha_skip {
                        continue;
                    }
                    let rgb = colors[j as usize].rgb;
                    for ch in 0..3 {
                        c[ch] += rgb[ch] * a * t;
                    }
                    res.contributions[k] += 1;
                    res.clamped[k] += hit_clamp as u32;
                    t *= 1.0 - a;
                    if t < cfg.t_min {
                        visited = step + 1;
                        break;
                    }
                }
                res.color[k] = c;
                res.t_final[k] = t;
                res.processed[k] = visited as u32;
                k += 1;
            }
        }
        res
    };

    let n_tiles = tiles_x * tiles_y;
    let results: Vec<TileResult> = if cfg.parallel {
        (0..n_tiles).into_par_iter().map(run_tile).collect()
    } else {
        (0..n_tiles).map(run_tile).collect()
    };

    let mut image = vec![0.0; w * h * 3];
    let mut t_final = vec![1.0; w * h];
    let mut processed = vec![0; w * h];
    let mut contributions = vec![0; w * h];
    let mut clamped = vec![0; w * h];
    for (tile, res) in results.into_iter().enumerate() {
        let (x0, y0, x1, y1) = tile_bounds(tile, tiles_x, ts, w, h);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * w + x;
                image[3 * p..3 * p + 3].copy_from_slice(&res.color[k]);
                t_final[p] = res.t_final[k];
                processed[p] = res.processed[k];
                contributions[p] = res.contributions[k];
                clamped[p] = res.clamped[k];
                k += 1;
            }
        }
    }

    Ok(RenderOutput {
        width: w,
        height: h,
        image,
        t_final,
        projected,
        colors,
        config: cfg.clone(),
        tiles_x,
        tile_lists,
        processed,
        contributions,
        clamped,
    })
}
