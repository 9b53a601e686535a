//! Multi-level patch generation.
//!
//! Two generators share one output format ([`PatchSet`]):
//!
//! * [`static_grid`] projects grids of 1, 4, 16, ... squares over a square
//!   image, one grid per level.
//! * [`dynamic_grid`] grows a quadtree by repeatedly splitting the leaf with
//!   the highest [`info_heuristic`], so detailed regions get deep coverage and
//!   flat backgrounds stay coarse.
//!
//! Patch metadata lives in an image-centred frame: `(0, 0)` at the centre, the
//! longer axis spanning `[-1, 1]`, x to the right and y downward.

use log::warn;

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Rect};
use crate::tensor::Tensor;

/// Position and scale descriptor of one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMeta {
    pub x: f64,
    pub y: f64,
    pub area_coverage: f64,
    pub level: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMode {
    Static,
    Dynamic,
}

impl std::str::FromStr for GridMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(GridMode::Static),
            "dynamic" => Ok(GridMode::Dynamic),
            other => Err(Error::Config(format!("unknown grid mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub mode: GridMode,
    /// Maximum number of levels.
    pub levels: usize,
    /// Quadtree divisions (dynamic mode only).
    pub divisions: usize,
    /// Side length every patch is rescaled to.
    pub rescale: usize,
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("grid needs at least one level".into()));
        }
        if self.rescale < 8 {
            return Err(Error::Config(format!("rescale dimension {} is below 8", self.rescale)));
        }
        Ok(())
    }

    pub fn generate(&self, image: &ImageBuffer) -> Result<PatchSet> {
        self.validate()?;
        match self.mode {
            GridMode::Static => static_grid(image, self.levels, self.rescale),
            GridMode::Dynamic => Ok(dynamic_grid(image, self.levels, self.divisions, self.rescale)?.patches),
        }
    }
}

/// Rescaled patches, their metadata and source regions, index-aligned.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<Tensor<f32>>,
    pub meta: Vec<PatchMeta>,
    /// Source region of each patch in image pixel coordinates.
    pub regions: Vec<Rect>,
    pub rescale_dim: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Patch count per level, index 0 holding level 1.
    pub fn level_counts(&self) -> Vec<usize> {
        let max = self.meta.iter().map(|m| m.level).max().unwrap_or(0);
        let mut counts = vec![0; max];
        for m in &self.meta {
            counts[m.level - 1] += 1;
        }
        counts
    }

    /// All patches stacked as `[P × 3 × H × H]`.
    pub fn stacked(&self) -> Tensor<f32> {
        let h = self.rescale_dim;
        let mut data = Vec::with_capacity(self.len() * 3 * h * h);
        for p in &self.patches {
            data.extend_from_slice(p.data());
        }
        Tensor::new(&[self.len(), 3, h, h], data).expect("patch stack shape")
    }
}

/// `1 + 2·log₄(area_ratio)/k`.
pub fn area_coverage(area_ratio: f64, k: usize) -> Result<f64> {
    if !(area_ratio > 0.0 && area_ratio <= 1.0) {
        return Err(Error::Domain(format!("area ratio {area_ratio} outside (0, 1]")));
    }
    if k == 0 {
        return Err(Error::Domain("level count must be positive".into()));
    }
    Ok(1.0 + 2.0 * (area_ratio.ln() / 4f64.ln()) / k as f64)
}

/// Area coverage of a grid cell at `level`, whose nominal area ratio is `4^{1-level}`.
pub fn level_area_coverage(level: usize, k: usize) -> f64 {
    1.0 - 2.0 * (level as f64 - 1.0) / k as f64
}

/// Mean squared deviation of every value from its channel mean, for a
/// `[C × h × w]` tensor.
pub fn info_heuristic(pixels: &Tensor<f32>) -> f64 {
    let c = pixels.shape()[0];
    let plane = pixels.len() / c;
    let mut total = 0.0;
    for chan in pixels.data().chunks(plane) {
        let mean = chan.iter().map(|&v| f64::from(v)).sum::<f64>() / plane as f64;
        total += chan.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>();
    }
    total / pixels.len() as f64
}

fn region_info(image: &ImageBuffer, r: &Rect) -> f64 {
    info_heuristic(&image.crop(r))
}

/// Bilinear resize of a `[C × h × w]` tensor to `[C × size × size]`, with
/// corner pixels mapped onto corner pixels.
pub fn bilinear_resize(patch: &Tensor<f32>, size: usize) -> Tensor<f32> {
    let [c, h, w] = [patch.shape()[0], patch.shape()[1], patch.shape()[2]];
    if h == size && w == size {
        return patch.clone();
    }
    let coord = |i: usize, src: usize| -> (usize, usize, f64) {
        if src == 1 || size == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (size - 1) as f64;
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    let ys: Vec<_> = (0..size).map(|i| coord(i, h)).collect();
    let xs: Vec<_> = (0..size).map(|i| coord(i, w)).collect();
    let src = patch.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| f64::from(plane[y * w + x]);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Tensor::new(&[c, size, size], out).expect("resize shape")
}

/// Centre of `r` in the image-centred frame.
fn region_center(r: &Rect, width: usize, height: usize) -> (f64, f64) {
    let half = width.max(height) as f64 / 2.0;
    let cx = r.x as f64 + r.width as f64 / 2.0;
    let cy = r.y as f64 + r.height as f64 / 2.0;
    ((cx - width as f64 / 2.0) / half, (cy - height as f64 / 2.0) / half)
}

fn make_patch(image: &ImageBuffer, r: &Rect, level: usize, k: usize, size: usize) -> (Tensor<f32>, PatchMeta) {
    let (x, y) = region_center(r, image.width(), image.height());
    let meta = PatchMeta {
        x,
        y,
        area_coverage: level_area_coverage(level, k),
        level,
    };
    (bilinear_resize(&image.crop(r), size), meta)
}

/// Boundaries of `2^depth` cells along an axis of `len` pixels, split
/// recursively with the ceiling half first.
fn axis_cells(start: usize, len: usize, depth: usize) -> Vec<(usize, usize)> {
    if depth == 0 {
        return vec![(start, len)];
    }
    let first = len.div_ceil(2);
    let mut v = axis_cells(start, first, depth - 1);
    v.extend(axis_cells(start + first, len - first, depth - 1));
    v
}

/// Cells of level `level` (1-based) of the static grid over `square`, in raster order.
pub fn static_cells(square: &Rect, level: usize) -> Vec<Rect> {
    let cols = axis_cells(square.x, square.width, level - 1);
    let rows = axis_cells(square.y, square.height, level - 1);
    rows.iter()
        .flat_map(|&(y, h)| cols.iter().map(move |&(x, w)| Rect::new(x, y, w, h)))
        .collect()
}

/// Largest centred square inside the image.
pub fn centered_square(image: &ImageBuffer) -> Rect {
    let side = image.width().min(image.height());
    Rect::new((image.width() - side) / 2, (image.height() - side) / 2, side, side)
}

/// Number of patches in a static grid of `k` levels.
pub fn static_patch_count(k: usize) -> usize {
    (0..k).map(|i| 1usize << (2 * i)).sum()
}

/// Static multi-level grid. Non-square images are cropped to their centred square.
pub fn static_grid(image: &ImageBuffer, k: usize, size: usize) -> Result<PatchSet> {
    if k < 1 {
        return Err(Error::Config("static grid needs k >= 1".into()));
    }
    let square = centered_square(image);
    let finest = 1usize << (k - 1);
    if square.width < finest {
        return Err(Error::Config(format!(
            "k={k} needs {finest} cells per side but the image square is {} pixels",
            square.width
        )));
    }
    let view = image.sub_image(&square);
    let local = view.bounds();
    let mut set = PatchSet {
        patches: Vec::with_capacity(static_patch_count(k)),
        meta: Vec::with_capacity(static_patch_count(k)),
        regions: Vec::with_capacity(static_patch_count(k)),
        rescale_dim: size,
    };
    for level in 1..=k {
        for cell in static_cells(&local, level) {
            let (patch, meta) = make_patch(&view, &cell, level, k, size);
            set.patches.push(patch);
            set.meta.push(meta);
            set.regions.push(Rect::new(cell.x + square.x, cell.y + square.y, cell.width, cell.height));
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadtreeNode {
    pub region: Rect,
    pub level: usize,
    pub children: Option<[usize; 4]>,
    pub info_score: f64,
}

/// Quadtree with nodes stored in creation order (index 0 is the root).
#[derive(Debug, Clone)]
pub struct Quadtree {
    pub nodes: Vec<QuadtreeNode>,
    /// Node indices in the order they were divided.
    pub division_order: Vec<usize>,
}

impl Quadtree {
    fn divisible(&self, idx: usize, k: usize) -> bool {
        let n = &self.nodes[idx];
        n.children.is_none() && n.level < k && n.region.width >= 2 && n.region.height >= 2
    }

    /// Divisible leaf with the highest score; ties go to the earliest created.
    pub fn best_divisible_leaf(&self, k: usize) -> Option<usize> {
        let mut best: Option<usize> = None;
        for i in 0..self.nodes.len() {
            if !self.divisible(i, k) {
                continue;
            }
            match best {
                Some(b) if self.nodes[i].info_score <= self.nodes[b].info_score => {}
                _ => best = Some(i),
            }
        }
        best
    }

    pub fn leaves(&self) -> impl Iterator<Item = &QuadtreeNode> {
        self.nodes.iter().filter(|n| n.children.is_none())
    }

    /// Builds the tree by `divisions` greedy splits.
    pub fn build(image: &ImageBuffer, k: usize, divisions: usize) -> (Self, bool) {
        let root = image.bounds();
        let mut tree = Quadtree {
            nodes: vec![QuadtreeNode {
                region: root,
                level: 1,
                children: None,
                info_score: region_info(image, &root),
            }],
            division_order: Vec::new(),
        };
        for _ in 0..divisions {
            let Some(target) = tree.best_divisible_leaf(k) else {
                return (tree, true);
            };
            let parent = tree.nodes[target].clone();
            let base = tree.nodes.len();
            for q in parent.region.quarter() {
                tree.nodes.push(QuadtreeNode {
                    region: q,
                    level: parent.level + 1,
                    children: None,
                    info_score: region_info(image, &q),
                });
            }
            tree.nodes[target].children = Some([base, base + 1, base + 2, base + 3]);
            tree.division_order.push(target);
        }
        (tree, false)
    }
}

#[derive(Debug, Clone)]
pub struct DynamicGrid {
    pub patches: PatchSet,
    pub tree: Quadtree,
    pub divisions_performed: usize,
    /// Set when divisible leaves ran out before the requested division count.
    pub exhausted: bool,
}

/// Quadtree grid built from `divisions` greedy splits; emits every node.
pub fn dynamic_grid(image: &ImageBuffer, k: usize, divisions: usize, size: usize) -> Result<DynamicGrid> {
    if k < 1 {
        return Err(Error::Config("dynamic grid needs k >= 1".into()));
    }
    let (tree, exhausted) = Quadtree::build(image, k, divisions);
    let performed = tree.division_order.len();
    if exhausted {
        warn!(
            "dynamic grid stopped after {performed} of {divisions} divisions: no divisible leaf below level {k}"
        );
    }
    let mut order: Vec<usize> = (0..tree.nodes.len()).collect();
    order.sort_by_key(|&i| (tree.nodes[i].level, i));
    let mut set = PatchSet {
        patches: Vec::with_capacity(order.len()),
        meta: Vec::with_capacity(order.len()),
        regions: Vec::with_capacity(order.len()),
        rescale_dim: size,
    };
    for i in order {
        let node = &tree.nodes[i];
        let (patch, meta) = make_patch(image, &node.region, node.level, k, size);
        set.patches.push(patch);
        set.meta.push(meta);
        set.regions.push(node.region);
    }
    Ok(DynamicGrid {
        patches: set,
        tree,
        divisions_performed: performed,
        exhausted,
    })
}
