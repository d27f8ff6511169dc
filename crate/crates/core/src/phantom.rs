//! Procedural pulmonary phantoms.
//!
//! Two ellipsoidal lungs are recursively partitioned into `S` territories.
//! A bronchus tree grows from a trachea toward the territory centroids, one
//! subtree per segmental group, and an artery tree follows it at a small
//! perpendicular offset. Segments are the nearest-seed Voronoi cells of the
//! segmental bronchus and artery voxels, with those voxels forced to their
//! own group, so every segment contains its bronchi and arteries exactly.
//! Intersegmental veins are then traced along segment interfaces and short
//! intrasegmental veins are walked through segment interiors.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelGrid, Volume};

pub const MAX_SEGMENTS: usize = 18;
/// Intensities of the synthetic image, HU-like.
pub const HU_BACKGROUND: f32 = 0.0;
pub const HU_LUNG: f32 = -800.0;
pub const HU_AIRWAY: f32 = -1000.0;
pub const HU_VESSEL: f32 = 100.0;

const GENERATION_ATTEMPTS: u64 = 16;
const RADIUS_DECAY: f64 = 0.8;
const ENDPOINT_JITTER: f64 = 0.8;
const SPLIT_JITTER: f64 = 0.05;
const ARTERY_OFFSET: f64 = 1.8;
const MIN_INTERFACE: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub extent: [usize; 3],
    pub segments: usize,
    /// Branching levels inside each segmental group (1 = a single branch).
    pub depth: usize,
    /// `[min, max]` tube radius in voxels; the trachea gets the maximum.
    pub radius: [f64; 2],
    /// Standard deviation of the additive image noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            extent: [32, 32, 32],
            segments: MAX_SEGMENTS,
            depth: 2,
            radius: [0.75, 2.0],
            noise: 30.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_SEGMENTS).contains(&self.segments) {
            return Err(Error::invalid(format!(
                "segments must be in 2..={MAX_SEGMENTS}, got {}",
                self.segments
            )));
        }
        if self.extent.iter().any(|&n| n < 16) {
            return Err(Error::invalid(format!(
                "phantom extent must be at least 16 per axis, got {:?}",
                self.extent
            )));
        }
        if !(1..=4).contains(&self.depth) {
            return Err(Error::invalid(format!("depth must be in 1..=4, got {}", self.depth)));
        }
        let [lo, hi] = self.radius;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("invalid radius range {:?}", self.radius)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    /// Groups assigned to the low-`w` lung; the rest go to the other one.
    pub fn groups_low_lung(&self) -> usize {
        let high = ((self.segments as f64 * 8.0 / 18.0).round() as usize).clamp(1, self.segments - 1);
        self.segments - high
    }

    /// Label used for trunk and other non-segmental branches in tube grids.
    pub fn trunk_label(&self) -> u8 {
        (self.segments + 1) as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TubeKind {
    Bronchus,
    Artery,
    Vein,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// Polyline in continuous voxel coordinates `(d, h, w)`.
    pub points: Vec<[f64; 3]>,
    pub radius: f64,
    /// Segmental group `1..=S`, or 0 for trunk and shared branches.
    pub group: u8,
    pub parent: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeTree {
    pub kind: TubeKind,
    pub segments: usize,
    pub branches: Vec<Branch>,
}

impl TubeTree {
    pub fn empty(kind: TubeKind, segments: usize) -> Self {
        Self {
            kind,
            segments,
            branches: Vec::new(),
        }
    }

    /// Distinct nonzero group ids carried by branches without children.
    pub fn leaf_groups(&self) -> Vec<u8> {
        let mut has_child = vec![false; self.branches.len()];
        for b in &self.branches {
            if let Some(p) = b.parent {
                has_child[p] = true;
            }
        }
        let mut g: Vec<u8> = self
            .branches
            .iter()
            .zip(&has_child)
            .filter(|(b, &c)| !c && b.group != 0)
            .map(|(b, _)| b.group)
            .collect();
        g.sort_unstable();
        g.dedup();
        g
    }

    fn grid_label(&self, group: u8) -> u8 {
        if group == 0 {
            (self.segments + 1) as u8
        } else {
            group
        }
    }
}

/// Two axis-aligned ellipsoids; index 0 is the low-`w` lung.
#[derive(Clone, Debug, PartialEq)]
pub struct Lungs {
    pub centers: [[f64; 3]; 2],
    pub radii: [[f64; 3]; 2],
}

impl Lungs {
    pub fn sample<R: Rng + ?Sized>(extent: [usize; 3], rng: &mut R) -> Self {
        let span = extent.map(|n| (n - 1) as f64);
        let mut centers = [[0.0; 3]; 2];
        let mut radii = [[0.0; 3]; 2];
        for (lung, wf) in [0.28, 0.72].into_iter().enumerate() {
            let jit = |rng: &mut R, s: f64| rng.random_range(-0.02..0.02) * s;
            centers[lung] = [
                0.5 * span[0] + jit(rng, span[0]),
                0.5 * span[1] + jit(rng, span[1]),
                wf * span[2] + jit(rng, span[2]),
            ];
            let scale: f64 = rng.random_range(0.95..1.05);
            radii[lung] = [
                0.42 * extent[0] as f64 * scale,
                0.36 * extent[1] as f64 * scale,
                0.19 * extent[2] as f64 * scale,
            ];
        }
        Self { centers, radii }
    }

    fn level(&self, lung: usize, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.centers[lung][a]) / self.radii[lung][a]).powi(2))
            .sum()
    }

    /// Which lung contains voxel `p`, if any.
    pub fn lung_of(&self, p: [f64; 3]) -> Option<usize> {
        let (l0, l1) = (self.level(0, p), self.level(1, p));
        match (l0 <= 1.0, l1 <= 1.0) {
            (false, false) => None,
            (true, false) => Some(0),
            (false, true) => Some(1),
            (true, true) => Some(if l0 <= l1 { 0 } else { 1 }),
        }
    }

    fn voxels(&self, extent: [usize; 3]) -> [Vec<[usize; 3]>; 2] {
        let mut out = [Vec::new(), Vec::new()];
        for d in 0..extent[0] {
            for h in 0..extent[1] {
                for w in 0..extent[2] {
                    if let Some(l) = self.lung_of([d as f64, h as f64, w as f64]) {
                        out[l].push([d, h, w]);
                    }
                }
            }
        }
        out
    }
}

fn centroid(voxels: &[[usize; 3]]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for v in voxels {
        for a in 0..3 {
            c[a] += v[a] as f64;
        }
    }
    c.map(|x| x / voxels.len() as f64)
}

/// Splits territory voxels along their longest bounding-box axis so the
/// first part holds roughly `k1 / k` of them.
fn split_territory<R: Rng + ?Sized>(
    mut voxels: Vec<[usize; 3]>,
    k1: usize,
    k: usize,
    rng: &mut R,
) -> (Vec<[usize; 3]>, Vec<[usize; 3]>) {
    let mut axis = 0;
    let mut best = 0;
    for a in 0..3 {
        let lo = voxels.iter().map(|v| v[a]).min().unwrap_or(0);
        let hi = voxels.iter().map(|v| v[a]).max().unwrap_or(0);
        if hi - lo > best {
            best = hi - lo;
            axis = a;
        }
    }
    voxels.sort_by_key(|v| (v[axis], v[0], v[1], v[2]));
    let f = k1 as f64 / k as f64 + rng.random_range(-SPLIT_JITTER..SPLIT_JITTER);
    let at = ((f * voxels.len() as f64).round() as usize).clamp(1, voxels.len() - 1);
    let rest = voxels.split_off(at);
    (voxels, rest)
}

struct TreeBuilder<'a, R: ?Sized> {
    config: &'a PhantomConfig,
    rng: &'a mut R,
    jitter: Normal<f64>,
    branches: Vec<Branch>,
    next_group: u8,
}

impl<R: Rng + ?Sized> TreeBuilder<'_, R> {
    fn radius(&self, generation: u32) -> f64 {
        let [lo, hi] = self.config.radius;
        (hi * RADIUS_DECAY.powi(generation as i32)).max(lo)
    }

    fn toward(&mut self, start: [f64; 3], target: [f64; 3], alpha: f64) -> [f64; 3] {
        let mut end = [0.0; 3];
        for a in 0..3 {
            let v = start[a] + alpha * (target[a] - start[a]) + self.jitter.sample(self.rng);
            end[a] = v.clamp(0.0, (self.config.extent[a] - 1) as f64);
        }
        end
    }

    fn push(&mut self, start: [f64; 3], end: [f64; 3], generation: u32, group: u8, parent: Option<usize>) -> usize {
        let radius = self.radius(generation);
        self.branches.push(Branch {
            points: vec![start, end],
            radius,
            group,
            parent,
        });
        self.branches.len() - 1
    }

    fn grow(&mut self, start: [f64; 3], parent: usize, generation: u32, voxels: Vec<[usize; 3]>, k: usize) {
        if k == 1 {
            let group = self.next_group;
            self.next_group += 1;
            let alpha = if self.config.depth > 1 { 0.6 } else { 0.9 };
            let end = self.toward(start, centroid(&voxels), alpha);
            let id = self.push(start, end, generation, group, Some(parent));
            self.sub_branch(end, id, generation + 1, voxels, self.config.depth - 1, group);
            return;
        }
        let end = self.toward(start, centroid(&voxels), 0.55);
        let id = self.push(start, end, generation, 0, Some(parent));
        let k1 = k.div_ceil(2);
        let (a, b) = split_territory(voxels, k1, k, self.rng);
        self.grow(end, id, generation + 1, a, k1);
        self.grow(end, id, generation + 1, b, k - k1);
    }

    fn sub_branch(&mut self, start: [f64; 3], parent: usize, generation: u32, voxels: Vec<[usize; 3]>, levels: usize, group: u8) {
        if levels == 0 || voxels.len() < 2 {
            return;
        }
        let (a, b) = split_territory(voxels, 1, 2, self.rng);
        for half in [a, b] {
            let end = self.toward(start, centroid(&half), 0.9);
            let id = self.push(start, end, generation, group, Some(parent));
            self.sub_branch(end, id, generation + 1, half, levels - 1, group);
        }
    }
}

fn build_bronchus<R: Rng + ?Sized>(config: &PhantomConfig, lungs: &Lungs, rng: &mut R) -> Result<TubeTree> {
    let extent = config.extent;
    let span = extent.map(|n| (n - 1) as f64);
    let territories = lungs.voxels(extent);
    let low = config.groups_low_lung();
    let counts = [low, config.segments - low];
    for (t, &k) in territories.iter().zip(&counts) {
        if t.len() < 8 * k {
            return Err(Error::Generation(format!(
                "lung of {} voxels cannot hold {k} segments",
                t.len()
            )));
        }
    }
    let mid_w = 0.5 * (lungs.centers[0][2] + lungs.centers[1][2]);
    let top = [span[0], 0.5 * span[1], mid_w];
    let carina = [0.62 * span[0], 0.5 * span[1], mid_w];
    let mut b = TreeBuilder {
        config,
        rng,
        jitter: Normal::new(0.0, ENDPOINT_JITTER).expect("positive sigma"),
        branches: Vec::new(),
        next_group: 1,
    };
    let trunk = b.push(top, carina, 0, 0, None);
    let [t0, t1] = territories;
    b.grow(carina, trunk, 1, t0, counts[0]);
    b.grow(carina, trunk, 1, t1, counts[1]);
    Ok(TubeTree {
        kind: TubeKind::Bronchus,
        segments: config.segments,
        branches: b.branches,
    })
}

/// The artery tree: every node of the bronchus tree shifted perpendicular
/// to its incoming branch, so shared nodes stay shared.
fn offset_tree<R: Rng + ?Sized>(bronchus: &TubeTree, rng: &mut R) -> TubeTree {
    let jitter = Normal::new(0.0, 0.3).expect("positive sigma");
    let offsets: Vec<[f64; 3]> = bronchus
        .branches
        .iter()
        .map(|b| {
            let (s, e) = (b.points[0], b.points[b.points.len() - 1]);
            let dir = normalize([e[0] - s[0], e[1] - s[1], e[2] - s[2]]).unwrap_or([1.0, 0.0, 0.0]);
            let perp = [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]
                .into_iter()
                .find_map(|u| {
                    let dot = dot(u, dir);
                    normalize([u[0] - dot * dir[0], u[1] - dot * dir[1], u[2] - dot * dir[2]])
                })
                .unwrap_or([0.0, 1.0, 0.0]);
            let mut o = [0.0; 3];
            for a in 0..3 {
                o[a] = ARTERY_OFFSET * perp[a] + jitter.sample(rng);
            }
            o
        })
        .collect();
    let branches = bronchus
        .branches
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let start_offset = b.parent.map_or(offsets[i], |p| offsets[p]);
            let last = b.points.len() - 1;
            let points = b
                .points
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let o = if j == last { offsets[i] } else { start_offset };
                    [p[0] + o[0], p[1] + o[1], p[2] + o[2]]
                })
                .collect();
            Branch {
                points,
                ..b.clone()
            }
        })
        .collect();
    TubeTree {
        kind: TubeKind::Artery,
        segments: bronchus.segments,
        branches,
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(v, v).sqrt();
    (n > 1e-6).then(|| v.map(|x| x / n))
}

/// Bronchus or artery tree for a fresh pair of lungs drawn from `rng`.
/// Veins are not trees here; they are traced from segment boundaries by
/// [`generate_veins`].
pub fn generate_tree<R: Rng + ?Sized>(config: &PhantomConfig, kind: TubeKind, rng: &mut R) -> Result<TubeTree> {
    config.validate()?;
    let lungs = Lungs::sample(config.extent, rng);
    let bronchus = build_bronchus(config, &lungs, rng)?;
    match kind {
        TubeKind::Bronchus => Ok(bronchus),
        TubeKind::Artery => Ok(offset_tree(&bronchus, rng)),
        TubeKind::Vein => Err(Error::invalid("veins are generated from segment boundaries")),
    }
}

fn point_segment_dist2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(ap, ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    let r = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
    dot(r, r)
}

/// Labels every voxel within a branch radius of its polyline with the
/// branch group (trunk branches get `S + 1`). Where tubes overlap the
/// thinner one wins, then the lower label.
pub fn rasterize_tubes(tree: &TubeTree, extent: [usize; 3]) -> LabelGrid {
    let n: usize = extent.iter().product();
    let mut best: Vec<Option<(f64, u8)>> = vec![None; n];
    for b in &tree.branches {
        let label = tree.grid_label(b.group);
        let r2 = b.radius * b.radius;
        for seg in b.points.windows(2) {
            let (p, q) = (seg[0], seg[1]);
            let lo = [0, 1, 2].map(|a| (p[a].min(q[a]) - b.radius).ceil().max(0.0));
            let hi = [0, 1, 2].map(|a| (p[a].max(q[a]) + b.radius).floor().min((extent[a] - 1) as f64));
            if (0..3).any(|a| hi[a] < lo[a]) {
                continue;
            }
            let (lo, hi) = (lo.map(|x| x as usize), hi.map(|x| x as usize));
            for d in lo[0]..=hi[0] {
                for h in lo[1]..=hi[1] {
                    for w in lo[2]..=hi[2] {
                        if point_segment_dist2([d as f64, h as f64, w as f64], p, q) > r2 {
                            continue;
                        }
                        let i = (d * extent[1] + h) * extent[2] + w;
                        let wins = match best[i] {
                            None => true,
                            Some((r, l)) => b.radius < r || (b.radius == r && label < l),
                        };
                        if wins {
                            best[i] = Some((b.radius, label));
                        }
                    }
                }
            }
        }
    }
    let data = best.into_iter().map(|x| x.map_or(0, |(_, l)| l)).collect();
    LabelGrid::new(extent, tree.segments + 2, data).expect("labels within range")
}

/// Nearest-seed Voronoi partition of the lung, seeds being the segmental
/// (`1..=S`) bronchus and artery voxels; ties go to the lower group. Seed
/// voxels are then forced to their own group (bronchus before artery).
pub fn partition_segments(
    lung_mask: &LabelGrid,
    bronchus: &LabelGrid,
    artery: &LabelGrid,
    segments: usize,
) -> Result<LabelGrid> {
    let extent = lung_mask.extent();
    for g in [bronchus, artery] {
        if g.extent() != extent {
            return Err(Error::shape("partition_segments extent", extent, g.extent()));
        }
    }
    if segments == 0 || segments > u8::MAX as usize - 1 {
        return Err(Error::invalid(format!("invalid segment count {segments}")));
    }
    let is_seg = |l: u8| l >= 1 && l as usize <= segments;
    let mut seeds: Vec<([i64; 3], u8)> = Vec::new();
    for i in 0..lung_mask.len() {
        for grid in [bronchus, artery] {
            let l = grid.data()[i];
            if is_seg(l) {
                let [d, h, w] = lung_mask.coords_of(i);
                seeds.push(([d as i64, h as i64, w as i64], l));
            }
        }
    }
    let mut present = vec![false; segments + 1];
    for &(_, l) in &seeds {
        present[l as usize] = true;
    }
    if let Some(missing) = (1..=segments).find(|&s| !present[s]) {
        return Err(Error::Generation(format!("segment {missing} has no seed voxels")));
    }
    let mut out = LabelGrid::zeros(extent, segments + 1);
    for i in 0..lung_mask.len() {
        if lung_mask.data()[i] == 0 {
            continue;
        }
        let [d, h, w] = lung_mask.coords_of(i).map(|x| x as i64);
        let mut best = (i64::MAX, u8::MAX);
        for &([sd, sh, sw], l) in &seeds {
            let dist = (d - sd).pow(2) + (h - sh).pow(2) + (w - sw).pow(2);
            if (dist, l) < best {
                best = (dist, l);
            }
        }
        out.set_linear(i, best.1);
    }
    for grid in [artery, bronchus] {
        for (i, &l) in grid.data().iter().enumerate() {
            if is_seg(l) {
                out.set_linear(i, l);
            }
        }
    }
    Ok(out)
}

const NEIGHBORS_6: [[i64; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

fn offset(extent: [usize; 3], at: [usize; 3], o: [i64; 3]) -> Option<usize> {
    let mut p = [0usize; 3];
    for a in 0..3 {
        let v = at[a] as i64 + o[a];
        if v < 0 || v >= extent[a] as i64 {
            return None;
        }
        p[a] = v as usize;
    }
    Some((p[0] * extent[1] + p[1]) * extent[2] + p[2])
}

/// Offsets of the Euclidean ball of radius 2.
fn ball2() -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    for d in -2i64..=2 {
        for h in -2i64..=2 {
            for w in -2i64..=2 {
                if d * d + h * h + w * w <= 4 {
                    out.push([d, h, w]);
                }
            }
        }
    }
    out
}

/// Number of distinct nonzero labels within the radius-2 ball of voxel `i`.
pub fn distinct_labels_near(labels: &LabelGrid, i: usize) -> usize {
    let extent = labels.extent();
    let at = labels.coords_of(i);
    let mut seen = [false; 256];
    let mut count = 0;
    for o in ball2() {
        if let Some(j) = offset(extent, at, o) {
            let l = labels.data()[j] as usize;
            if l != 0 && !seen[l] {
                seen[l] = true;
                count += 1;
            }
        }
    }
    count
}

/// Voxels of the 26-connected component of `start` inside `member`, as a
/// BFS returning `(farthest voxel, parent links)`.
fn bfs(extent: [usize; 3], member: &[bool], start: usize) -> (usize, Vec<usize>) {
    let mut parent = vec![usize::MAX; member.len()];
    parent[start] = start;
    let mut queue = VecDeque::from([start]);
    let mut last = start;
    while let Some(i) = queue.pop_front() {
        last = i;
        let at = coords(extent, i);
        for d in -1i64..=1 {
            for h in -1i64..=1 {
                for w in -1i64..=1 {
                    if let Some(j) = offset(extent, at, [d, h, w]) {
                        if member[j] && parent[j] == usize::MAX {
                            parent[j] = i;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
    }
    (last, parent)
}

fn coords(extent: [usize; 3], i: usize) -> [usize; 3] {
    [i / (extent[1] * extent[2]), (i / extent[2]) % extent[1], i % extent[2]]
}

/// Vein kinds stored in `vein_kind`.
pub const VEIN_INTRA: u8 = 1;
pub const VEIN_INTER: u8 = 2;

/// Traces intersegmental veins along the interface of every pair of
/// adjacent segments and walks short intrasegmental veins through segment
/// interiors. `occupied` marks bronchus/artery voxels veins must avoid.
/// Returns `(vein group labels, vein kind)`.
pub fn generate_veins<R: Rng + ?Sized>(
    segments: &LabelGrid,
    occupied: &[bool],
    rng: &mut R,
) -> Result<(LabelGrid, LabelGrid)> {
    let extent = segments.extent();
    let n = segments.len();
    if occupied.len() != n {
        return Err(Error::shape("vein occupancy mask", n, occupied.len()));
    }
    let labels = segments.data();
    let s_max = segments.num_classes() - 1;
    let mut vein = LabelGrid::zeros(extent, segments.num_classes());
    let mut kind = LabelGrid::zeros(extent, 3);

    // Interface voxels per unordered pair.
    let mut pairs: std::collections::BTreeMap<(u8, u8), Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let at = coords(extent, i);
        for o in NEIGHBORS_6 {
            if let Some(j) = offset(extent, at, o) {
                let m = labels[j];
                if m != 0 && m != l {
                    let key = (l.min(m), l.max(m));
                    let list = pairs.entry(key).or_default();
                    if list.last() != Some(&i) {
                        list.push(i);
                    }
                }
            }
        }
    }
    let mut member = vec![false; n];
    for (&(s, _), voxels) in &pairs {
        if voxels.len() < MIN_INTERFACE {
            continue;
        }
        for &i in voxels {
            member[i] = true;
        }
        let start = voxels[rng.random_range(0..voxels.len())];
        let (a, _) = bfs(extent, &member, start);
        let (b, parent) = bfs(extent, &member, a);
        let mut path = vec![b];
        let mut cur = b;
        while cur != a {
            cur = parent[cur];
            path.push(cur);
        }
        for &i in voxels {
            member[i] = false;
        }
        for &p in &path {
            let at = coords(extent, p);
            for o in std::iter::once([0, 0, 0]).chain(NEIGHBORS_6) {
                if let Some(j) = offset(extent, at, o) {
                    if labels[j] != 0 && !occupied[j] && kind.data()[j] == 0 {
                        kind.set_linear(j, VEIN_INTER);
                        vein.set_linear(j, s);
                    }
                }
            }
        }
    }

    // Intrasegmental walks: one per segment through voxels whose radius-2
    // neighbourhood sees a single segment.
    let interior: Vec<bool> = (0..n)
        .map(|i| labels[i] != 0 && !occupied[i] && distinct_labels_near(segments, i) == 1)
        .collect();
    for s in 1..=s_max as u8 {
        let candidates: Vec<usize> = (0..n)
            .filter(|&i| labels[i] == s && interior[i] && kind.data()[i] == 0)
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let start = candidates[rng.random_range(0..candidates.len())];
        let dir = loop {
            let v = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            if let Some(u) = normalize(v) {
                break u;
            }
        };
        let steps = rng.random_range(3..=6);
        let origin = coords(extent, start).map(|x| x as f64);
        for t in 0..=steps {
            let p = [0, 1, 2].map(|a| (origin[a] + t as f64 * dir[a]).round());
            if (0..3).any(|a| p[a] < 0.0 || p[a] > (extent[a] - 1) as f64) {
                break;
            }
            let j = segments.index(p[0] as usize, p[1] as usize, p[2] as usize);
            if labels[j] != s || !interior[j] {
                break;
            }
            if kind.data()[j] == 0 {
                kind.set_linear(j, VEIN_INTRA);
                vein.set_linear(j, s);
            }
        }
    }
    Ok((vein, kind))
}

/// Lobe of every segment (index 0 unused). With at least ten segments the
/// low-`w` lung splits its groups 3:2:5 and the other lung 1:1, giving five
/// lobes; otherwise each lung is one lobe.
pub fn lobe_of_segments(config: &PhantomConfig) -> (Vec<u8>, usize) {
    let s = config.segments;
    let low = config.groups_low_lung();
    let mut lobe = vec![0u8; s + 1];
    if s >= 10 {
        let cut = |n: usize, f: f64| ((n as f64 * f).round() as usize).clamp(1, n - 1);
        let a = cut(low, 0.3);
        let b = cut(low, 0.5).max(a + 1).min(low - 1);
        let high = s - low;
        let c = cut(high, 0.5);
        for g in 1..=s {
            let i = g - 1;
            lobe[g] = if i < a {
                1
            } else if i < b {
                2
            } else if i < low {
                3
            } else if i - low < c {
                4
            } else {
                5
            };
        }
        (lobe, 5)
    } else {
        for g in 1..=s {
            lobe[g] = if g <= low { 1 } else { 2 };
        }
        (lobe, 2)
    }
}

/// HU-like image: background 0, parenchyma −800, vessels +100, airway
/// lumen −1000, plus Gaussian noise.
pub fn synth_image<R: Rng + ?Sized>(
    lung_mask: &LabelGrid,
    bronchus: &LabelGrid,
    artery: &LabelGrid,
    vein: &LabelGrid,
    noise: f64,
    rng: &mut R,
) -> Result<Volume> {
    let extent = lung_mask.extent();
    for g in [bronchus, artery, vein] {
        if g.extent() != extent {
            return Err(Error::shape("synth_image extent", extent, g.extent()));
        }
    }
    let mut data: Vec<f32> = (0..lung_mask.len())
        .map(|i| {
            if bronchus.data()[i] != 0 {
                HU_AIRWAY
            } else if artery.data()[i] != 0 || vein.data()[i] != 0 {
                HU_VESSEL
            } else if lung_mask.data()[i] != 0 {
                HU_LUNG
            } else {
                HU_BACKGROUND
            }
        })
        .collect();
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
        for v in &mut data {
            *v += normal.sample(rng) as f32;
        }
    }
    Volume::from_f32([1, extent[0], extent[1], extent[2]], data)
}

/// Maps HU to the network's `[0, 1]` range with the window [−1000, 200].
pub fn normalize_intensity(image: &Volume) -> Result<Volume> {
    let [c, d, h, w] = image.shape();
    let data = image
        .to_f32()
        .into_iter()
        .map(|v| ((v + 1000.0) / 1200.0).clamp(0.0, 1.0))
        .collect();
    Volume::from_f32([c, d, h, w], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub config: PhantomConfig,
    /// HU-like intensities, one channel.
    pub image: Volume,
    pub lung_mask: LabelGrid,
    pub lobe_labels: LabelGrid,
    /// Group ids `1..=S`; `S + 1` marks trunk and shared branches.
    pub bronchus_labels: LabelGrid,
    pub artery_labels: LabelGrid,
    pub vein_labels: LabelGrid,
    /// 0 none, 1 intrasegmental, 2 intersegmental.
    pub vein_kind: LabelGrid,
    /// Ground truth, 0 background and `1..=S`.
    pub segments: LabelGrid,
    pub bronchus_tree: TubeTree,
    pub artery_tree: TubeTree,
}

impl Phantom {
    /// Generates a phantom as a pure function of `config` (seed included).
    pub fn generate(config: &PhantomConfig) -> Result<Self> {
        config.validate()?;
        let mut last = None;
        for attempt in 0..GENERATION_ATTEMPTS {
            let seed = if attempt == 0 { config.seed } else { mix_seed(config.seed, attempt) };
            match Self::attempt(config, &mut ChaCha8Rng::seed_from_u64(seed)) {
                Ok(p) => return Ok(p),
                Err(e @ Error::Generation(_)) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap_or_else(|| Error::Generation("no attempt made".into())))
    }

    fn attempt(config: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let extent = config.extent;
        let s = config.segments;
        let lungs = Lungs::sample(extent, rng);
        let bronchus_tree = build_bronchus(config, &lungs, rng)?;
        let artery_tree = offset_tree(&bronchus_tree, rng);
        let bronchus = rasterize_tubes(&bronchus_tree, extent);
        let mut artery = rasterize_tubes(&artery_tree, extent);
        for i in 0..artery.len() {
            if bronchus.data()[i] != 0 {
                artery.set_linear(i, 0);
            }
        }
        for (name, grid) in [("bronchus", &bronchus), ("artery", &artery)] {
            let mut seen = vec![false; s + 2];
            for &l in grid.data() {
                seen[l as usize] = true;
            }
            if let Some(g) = (1..=s).find(|&g| !seen[g]) {
                return Err(Error::Generation(format!("{name} group {g} was not rasterized")));
            }
        }
        let is_seg = |l: u8| l >= 1 && l as usize <= s;
        let mut lung_mask = LabelGrid::zeros(extent, 2);
        for i in 0..lung_mask.len() {
            let p = lung_mask.coords_of(i).map(|x| x as f64);
            if lungs.lung_of(p).is_some() || is_seg(bronchus.data()[i]) || is_seg(artery.data()[i]) {
                lung_mask.set_linear(i, 1);
            }
        }
        let segments = partition_segments(&lung_mask, &bronchus, &artery, s)?;
        let occupied: Vec<bool> = (0..segments.len())
            .map(|i| bronchus.data()[i] != 0 || artery.data()[i] != 0)
            .collect();
        let (vein_labels, vein_kind) = generate_veins(&segments, &occupied, rng)?;
        let (lobe, n_lobes) = lobe_of_segments(config);
        let lobe_data = segments.data().iter().map(|&l| lobe[l as usize]).collect();
        let lobe_labels = LabelGrid::new(extent, n_lobes + 1, lobe_data)?;
        let image = synth_image(&lung_mask, &bronchus, &artery, &vein_labels, config.noise, rng)?;
        Ok(Self {
            config: config.clone(),
            image,
            lung_mask,
            lobe_labels,
            bronchus_labels: bronchus,
            artery_labels: artery,
            vein_labels,
            vein_kind,
            segments,
            bronchus_tree,
            artery_tree,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.segments.num_classes() - 1
    }

    pub fn num_lobes(&self) -> usize {
        self.lobe_labels.num_classes() - 1
    }
}

/// SplitMix64-style mixing of a base seed with a stream index.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleCheck {
    pub checked: usize,
    pub violations: usize,
    /// Minimum passing fraction of checked voxels.
    pub threshold: f64,
}

impl RuleCheck {
    /// Fraction of checked voxels satisfying the rule (1 when vacuous).
    pub fn ratio(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            (self.checked - self.violations) as f64 / self.checked as f64
        }
    }

    pub fn passed(&self) -> bool {
        self.ratio() >= self.threshold
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleReport {
    /// Segmental bronchus voxels lying in their own segment.
    pub bronchus_containment: RuleCheck,
    /// Segmental artery voxels lying in their own segment.
    pub artery_containment: RuleCheck,
    /// Intersegmental vein voxels seeing at least two segments nearby.
    pub intersegmental_adjacency: RuleCheck,
    /// Intrasegmental vein voxels seeing exactly one segment nearby.
    /// Reported only; not part of [`passed`](Self::passed).
    pub intrasegmental_interior: RuleCheck,
    /// Voxels where "segment nonzero" and "inside lung" disagree.
    pub partition_violations: usize,
}

impl RuleReport {
    pub fn passed(&self) -> bool {
        self.bronchus_containment.passed()
            && self.artery_containment.passed()
            && self.intersegmental_adjacency.passed()
            && self.partition_violations == 0
    }
}

/// Checks the anatomical rules on a finished phantom without modifying it.
pub fn validate_phantom(p: &Phantom) -> RuleReport {
    let s = p.num_segments();
    let seg = p.segments.data();
    let contain = |grid: &LabelGrid| {
        let mut c = RuleCheck {
            threshold: 1.0,
            ..Default::default()
        };
        for (i, &l) in grid.data().iter().enumerate() {
            if l >= 1 && l as usize <= s {
                c.checked += 1;
                if seg[i] != l {
                    c.violations += 1;
                }
            }
        }
        c
    };
    let mut inter = RuleCheck {
        threshold: 0.99,
        ..Default::default()
    };
    let mut intra = RuleCheck {
        threshold: 0.95,
        ..Default::default()
    };
    for (i, &k) in p.vein_kind.data().iter().enumerate() {
        match k {
            VEIN_INTER => {
                inter.checked += 1;
                if distinct_labels_near(&p.segments, i) < 2 {
                    inter.violations += 1;
                }
            }
            VEIN_INTRA => {
                intra.checked += 1;
                if distinct_labels_near(&p.segments, i) != 1 {
                    intra.violations += 1;
                }
            }
            _ => {}
        }
    }
    let partition_violations = seg
        .iter()
        .zip(p.lung_mask.data())
        .filter(|(&s, &m)| (s != 0) != (m != 0))
        .count();
    RuleReport {
        bronchus_containment: contain(&p.bronchus_labels),
        artery_containment: contain(&p.artery_labels),
        intersegmental_adjacency: inter,
        intrasegmental_interior: intra,
        partition_violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(seed: u64) -> PhantomConfig {
        PhantomConfig {
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn minimal_tree_has_trunk_and_two_groups() {
        let c = PhantomConfig {
            segments: 2,
            depth: 1,
            ..Default::default()
        };
        let t = generate_tree(&c, TubeKind::Bronchus, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(t.branches.len(), 3);
        assert_eq!(t.branches.iter().filter(|b| b.group == 0).count(), 1);
        assert_eq!(t.leaf_groups(), vec![1, 2]);
    }

    #[test]
    fn default_tree_has_all_groups_and_is_consistent() {
        let c = cfg(3);
        for kind in [TubeKind::Bronchus, TubeKind::Artery] {
            let t = generate_tree(&c, kind, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            assert_eq!(t.leaf_groups(), (1..=18).collect::<Vec<u8>>());
            for b in &t.branches {
                if let Some(p) = b.parent {
                    let parent = &t.branches[p];
                    assert_eq!(b.points[0], *parent.points.last().unwrap());
                    assert!(b.radius <= parent.radius);
                }
            }
        }
        let a = generate_tree(&c, TubeKind::Bronchus, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate_tree(&c, TubeKind::Bronchus, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rasterized_rod_matches_brute_force() {
        let tree = TubeTree {
            kind: TubeKind::Bronchus,
            segments: 2,
            branches: vec![Branch {
                points: vec![[2.0, 4.0, 4.0], [7.0, 4.0, 4.0]],
                radius: 1.0,
                group: 1,
                parent: None,
            }],
        };
        let g = rasterize_tubes(&tree, [10, 9, 9]);
        for d in 0..10usize {
            for h in 0..9usize {
                for w in 0..9usize {
                    // distance to the segment d∈[2,7], h=w=4
                    let dd = if d < 2 { 2 - d } else if d > 7 { d - 7 } else { 0 };
                    let r2 = dd * dd + h.abs_diff(4).pow(2) + w.abs_diff(4).pow(2);
                    assert_eq!(g.get(d, h, w), u8::from(r2 <= 1), "({d},{h},{w})");
                }
            }
        }
        assert!(rasterize_tubes(&TubeTree::empty(TubeKind::Bronchus, 2), [4; 3]).data().iter().all(|&l| l == 0));
    }

    #[test]
    fn thinner_tube_wins_overlap() {
        let branch = |r: f64, g: u8, h: f64| Branch {
            points: vec![[0.0, h, 3.0], [6.0, h, 3.0]],
            radius: r,
            group: g,
            parent: None,
        };
        let tree = TubeTree {
            kind: TubeKind::Artery,
            segments: 3,
            branches: vec![branch(2.0, 1, 2.0), branch(1.0, 3, 3.0)],
        };
        let g = rasterize_tubes(&tree, [7, 7, 7]);
        assert_eq!(g.get(3, 3, 3), 3);
        assert_eq!(g.get(3, 2, 3), 3);
        assert_eq!(g.get(3, 1, 3), 1);
        // disjoint branches stay disjoint
        let tree = TubeTree {
            kind: TubeKind::Artery,
            segments: 3,
            branches: vec![branch(1.0, 1, 0.0), branch(1.0, 2, 5.0)],
        };
        let g = rasterize_tubes(&tree, [7, 7, 7]);
        assert!(g.data().contains(&1) && g.data().contains(&2));
    }

    #[test]
    fn voronoi_bisects_between_two_seeds() {
        let e = [6, 6, 6];
        let mask = LabelGrid::new(e, 2, vec![1; 216]).unwrap();
        let mut b = LabelGrid::zeros(e, 4);
        b.set(1, 2, 2, 1);
        b.set(4, 3, 2, 2);
        let a = LabelGrid::zeros(e, 4);
        let seg = partition_segments(&mask, &b, &a, 2).unwrap();
        for i in 0..216 {
            let [d, h, w] = seg.coords_of(i).map(|x| x as i64);
            let d1 = (d - 1).pow(2) + (h - 2).pow(2) + (w - 2).pow(2);
            let d2 = (d - 4).pow(2) + (h - 3).pow(2) + (w - 2).pow(2);
            assert_eq!(seg.data()[i], if d1 <= d2 { 1 } else { 2 });
        }
    }

    #[test]
    fn single_group_fills_lung_and_override_wins() {
        let e = [5, 5, 5];
        let mut mask = LabelGrid::zeros(e, 2);
        for i in 0..40 {
            mask.set_linear(i, 1);
        }
        let mut b = LabelGrid::zeros(e, 3);
        b.set(0, 0, 0, 1);
        let seg = partition_segments(&mask, &b, &LabelGrid::zeros(e, 3), 1).unwrap();
        assert!(seg.data()[..40].iter().all(|&l| l == 1));
        assert!(seg.data()[40..].iter().all(|&l| l == 0));

        // group 3 seed deep inside group 5's cell keeps label 3
        let mask = LabelGrid::new([9, 1, 3], 2, vec![1; 27]).unwrap();
        let mut b = LabelGrid::zeros([9, 1, 3], 7);
        for d in 0..9 {
            b.set(d, 0, 0, 5);
        }
        b.set(4, 0, 2, 3);
        let mut a = LabelGrid::zeros([9, 1, 3], 7);
        for (g, d) in [(1, 0), (2, 8), (4, 2)] {
            a.set(d, 0, 1, g);
        }
        let seg = partition_segments(&mask, &b, &a, 5).unwrap();
        assert_eq!(seg.get(4, 0, 2), 3);
        // group missing → rejected
        assert!(partition_segments(&mask, &b, &LabelGrid::zeros([9, 1, 3], 7), 5).is_err());
    }

    #[test]
    fn single_segment_has_no_intersegmental_veins() {
        let e = [10, 10, 10];
        let seg = LabelGrid::new(e, 2, vec![1; 1000]).unwrap();
        let (v, k) = generate_veins(&seg, &vec![false; 1000], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!k.data().contains(&VEIN_INTER));
        assert!(k.data().contains(&VEIN_INTRA));
        assert!(v.data().iter().all(|&l| l <= 1));
    }

    #[test]
    fn generated_phantom_passes_rules() {
        for seed in 0..5 {
            let p = Phantom::generate(&cfg(seed)).unwrap();
            let r = validate_phantom(&p);
            assert!(r.passed(), "seed {seed}: {r:?}");
            assert!(r.intrasegmental_interior.ratio() >= 0.95);
            assert!(r.intersegmental_adjacency.checked > 0);
            for g in [&p.bronchus_labels, &p.artery_labels] {
                for s in 1..=18u8 {
                    assert!(g.data().contains(&s), "seed {seed} group {s}");
                }
            }
        }
    }

    #[test]
    fn minimal_phantom_passes() {
        let c = PhantomConfig {
            segments: 2,
            depth: 1,
            ..cfg(9)
        };
        let p = Phantom::generate(&c).unwrap();
        assert!(validate_phantom(&p).passed());
        assert_eq!(p.num_lobes(), 2);
    }

    #[test]
    fn injected_fault_is_counted() {
        let mut p = Phantom::generate(&cfg(11)).unwrap();
        let i = p.bronchus_labels.data().iter().position(|&l| l == 4).unwrap();
        p.bronchus_labels.set_linear(i, 5);
        let r = validate_phantom(&p);
        assert_eq!(r.bronchus_containment.violations, 1);
        assert!(!r.passed());
    }

    #[test]
    fn generation_is_pure() {
        assert_eq!(Phantom::generate(&cfg(4)).unwrap(), Phantom::generate(&cfg(4)).unwrap());
        assert_ne!(Phantom::generate(&cfg(4)).unwrap().segments, Phantom::generate(&cfg(5)).unwrap().segments);
    }

    #[test]
    fn image_intensities() {
        let p = Phantom::generate(&PhantomConfig {
            noise: 0.0,
            ..cfg(6)
        })
        .unwrap();
        let img = p.image.to_f32();
        let allowed = [HU_BACKGROUND, HU_LUNG, HU_AIRWAY, HU_VESSEL];
        assert!(img.iter().all(|v| allowed.contains(v)));
        let noisy = Phantom::generate(&cfg(6)).unwrap().image.to_f32();
        let mean = |pred: &dyn Fn(usize) -> bool| {
            let v: Vec<f32> = (0..img.len()).filter(|&i| pred(i)).map(|i| noisy[i]).collect();
            v.iter().sum::<f32>() / v.len() as f32
        };
        let vessel = mean(&|i| p.artery_labels.data()[i] != 0 && p.bronchus_labels.data()[i] == 0);
        let paren = mean(&|i| img[i] == HU_LUNG);
        assert!(vessel > paren);
        let n = normalize_intensity(&p.image).unwrap().to_f32();
        assert!(n.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn lobes_nest_segments() {
        let (lobe, n) = lobe_of_segments(&cfg(0));
        assert_eq!(n, 5);
        assert_eq!(&lobe[1..], &[1, 1, 1, 2, 2, 3, 3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5]);
        let p = Phantom::generate(&cfg(2)).unwrap();
        for i in 0..p.segments.len() {
            assert_eq!(p.lobe_labels.data()[i], lobe[p.segments.data()[i] as usize]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(PhantomConfig { segments: 1, ..cfg(0) }.validate().is_err());
        assert!(PhantomConfig { segments: 19, ..cfg(0) }.validate().is_err());
        assert!(PhantomConfig { extent: [8, 32, 32], ..cfg(0) }.validate().is_err());
        assert!(PhantomConfig { radius: [2.0, 1.0], ..cfg(0) }.validate().is_err());
    }
}
