//! Generators where the multimodality of `x_g | x_c` is known by construction.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::image::area_resize;
use super::{DatasetMeta, ScatteredDataset};
use crate::error::{Error, Result};
use crate::numerics::{rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticTask {
    Toy1d,
    Lightfield,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    pub n: usize,
    /// Number of output branches (toy) or light directions (lightfield).
    pub modes: usize,
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_side")]
    pub side: usize,
}

fn default_side() -> usize {
    32
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synthetic spec needs n >= 1".into()));
        }
        if self.modes == 0 {
            return Err(Error::Config("synthetic spec needs modes >= 1".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!("noise {} must be non-negative", self.noise)));
        }
        if self.side < 8 && self.task == SyntheticTask::Lightfield {
            return Err(Error::Config("lightfield fields need side >= 8".into()));
        }
        if self.side == 0 {
            return Err(Error::Config("side must be positive".into()));
        }
        Ok(())
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<ScatteredDataset> {
    match spec.task {
        SyntheticTask::Toy1d => gen_toy_1d(spec),
        SyntheticTask::Lightfield => gen_lightfield(spec),
    }
}

/// Value of branch `b` of `modes` at input `x`. For two branches these are
/// `0.25 + 0.2 x` and `0.75 - 0.2 x`.
pub fn toy_branch(b: usize, modes: usize, x: f64) -> f64 {
    let m = modes as f64;
    let sign = if b % 2 == 0 { 1.0 } else { -1.0 };
    (b as f64 + 0.5) / m + sign * (0.4 / m) * x
}

/// Constant fields: `x_c = x ~ U[0, 1]`, `x_g = branch_b(x) + noise` with the
/// branch drawn uniformly. Features are the scalar `x`.
pub fn gen_toy_1d(spec: &SyntheticSpec) -> Result<ScatteredDataset> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, rng::streams::DATA);
    let d = spec.side * spec.side;
    let (mut xc, mut xg, mut feats) = (Vec::with_capacity(spec.n * d), Vec::with_capacity(spec.n * d), Vec::new());
    for _ in 0..spec.n {
        let x: f64 = r.random();
        let b = r.random_range(0..spec.modes);
        let e: f64 = StandardNormal.sample(&mut r);
        let y = (toy_branch(b, spec.modes, x) + spec.noise * e).clamp(0.0, 1.0);
        xc.extend(std::iter::repeat_n(x, d));
        xg.extend(std::iter::repeat_n(y, d));
        feats.push(x);
    }
    ScatteredDataset::new(
        Tensor::matrix(spec.n, d, xc),
        Tensor::matrix(spec.n, d, xg),
        Tensor::matrix(spec.n, 1, feats),
        DatasetMeta {
            task: "toy1d".into(),
            side: spec.side,
            generator: Some(spec.clone()),
            source: None,
            has_labels: false,
        },
    )
}

/// Axis-aligned rectangle `[x0, x1) x [y0, y1)` in pixels with a gray level.
#[derive(Clone, Debug, PartialEq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub level: f64,
}

impl Rect {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Piecewise-constant albedo: a background level plus 1-3 rectangles.
#[derive(Clone, Debug, PartialEq)]
pub struct LightfieldScene {
    pub side: usize,
    pub background: f64,
    pub rects: Vec<Rect>,
}

pub const MAX_RECTS: usize = 3;

pub fn lightfield_scene(side: usize, r: &mut impl Rng) -> LightfieldScene {
    let background = r.random_range(0.4..0.9);
    let count = r.random_range(1..=MAX_RECTS);
    let min = (side / 5).max(2);
    let max = (side / 2).max(min + 1);
    let rects = (0..count)
        .map(|_| {
            let w = r.random_range(min..max);
            let h = r.random_range(min..max);
            let x0 = r.random_range(0..=side - w);
            let y0 = r.random_range(0..=side - h);
            Rect { x0, y0, x1: x0 + w, y1: y0 + h, level: r.random_range(0.1..0.8) }
        })
        .collect();
    LightfieldScene { side, background, rects }
}

impl LightfieldScene {
    /// Later rectangles paint over earlier ones.
    pub fn albedo(&self) -> Vec<f64> {
        let s = self.side;
        let mut out = vec![self.background; s * s];
        for rect in &self.rects {
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    out[y * s + x] = rect.level;
                }
            }
        }
        out
    }

    /// Rectangle slots (normalized corners and level, zero-filled), then the
    /// background level.
    pub fn descriptor(&self) -> Vec<f64> {
        let s = self.side as f64;
        let mut d = Vec::with_capacity(MAX_RECTS * 5 + 1);
        for i in 0..MAX_RECTS {
            match self.rects.get(i) {
                Some(r) => d.extend([r.x0 as f64 / s, r.y0 as f64 / s, r.x1 as f64 / s, r.y1 as f64 / s, r.level]),
                None => d.extend([0.0; 5]),
            }
        }
        d.push(self.background);
        d
    }

    fn darkest(&self) -> Option<&Rect> {
        self.rects.iter().min_by(|a, b| a.level.total_cmp(&b.level))
    }
}

/// Light direction angle of mode `m` out of `modes`, evenly spaced.
fn direction(m: usize, modes: usize) -> f64 {
    2.0 * std::f64::consts::PI * m as f64 / modes as f64
}

/// Shading for light mode `m`: a linear ramp along the light direction,
/// halved inside the darkest rectangle, plus pixel noise, clamped to [0, 1].
pub fn shade_scene(scene: &LightfieldScene, m: usize, modes: usize, noise: f64, r: &mut impl Rng) -> Vec<f64> {
    let s = scene.side;
    let c = (s as f64 - 1.0) / 2.0;
    let theta = direction(m, modes);
    let (ct, st) = (theta.cos(), theta.sin());
    let shadow = scene.darkest();
    let mut out = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let t = ((x as f64 - c) * ct + (y as f64 - c) * st) / c;
            let mut v = 0.5 + 0.3 * t;
            if shadow.is_some_and(|rect| rect.contains(x, y)) {
                v *= 0.5;
            }
            if noise > 0.0 {
                let e: f64 = StandardNormal.sample(r);
                v += noise * e;
            }
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

/// Relighting analogue: albedo scenes with shading from one of `modes`
/// light directions. Features are the scene descriptor followed by an 8x8
/// area downsample of the albedo.
pub fn gen_lightfield(spec: &SyntheticSpec) -> Result<ScatteredDataset> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, rng::streams::DATA);
    let s = spec.side;
    let d = s * s;
    let (mut xc, mut xg, mut feats) = (Vec::with_capacity(spec.n * d), Vec::with_capacity(spec.n * d), Vec::new());
    let mut fdim = 0;
    for _ in 0..spec.n {
        let scene = lightfield_scene(s, &mut r);
        let m = r.random_range(0..spec.modes);
        let albedo = scene.albedo();
        let shading = shade_scene(&scene, m, spec.modes, spec.noise, &mut r);
        let mut f = scene.descriptor();
        f.extend(area_resize(&albedo, s, s, 8, 8)?);
        fdim = f.len();
        xc.extend(albedo);
        xg.extend(shading);
        feats.extend(f);
    }
    ScatteredDataset::new(
        Tensor::matrix(spec.n, d, xc),
        Tensor::matrix(spec.n, d, xg),
        Tensor::matrix(spec.n, fdim, feats),
        DatasetMeta {
            task: "lightfield".into(),
            side: s,
            generator: Some(spec.clone()),
            source: None,
            has_labels: false,
        },
    )
}
