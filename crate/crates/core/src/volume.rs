//! Voxel grids and the continuous/discrete coordinate contract.
//!
//! Every continuous query uses the align-corners convention: a normalized
//! coordinate `p ∈ [-1, 1]` maps to the voxel index `(p + 1) / 2 * (n - 1)`,
//! so the corners of the cube land exactly on the centers of the corner
//! voxels. The axis mapping is `x → w`, `y → h`, `z → d`, and storage is
//! `(c, d, h, w)` row-major throughout the crate.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Snap threshold for continuous indices that are within rounding noise of
/// an integer, so that lattice queries hit grid nodes exactly.
const NODE_SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::U8 => "u8",
        }
    }
}

/// Multi-channel voxel grid in `(c, d, h, w)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 4],
    spacing: [f64; 3],
    data: VolumeData,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::invalid(format!("shape {shape:?} has a zero entry")));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::shape("volume data length", expected, len));
    }
    Ok(())
}

impl Volume {
    pub fn from_f32(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            spacing: [1.0; 3],
            data: VolumeData::F32(data),
        })
    }

    pub fn from_u8(shape: [usize; 4], data: Vec<u8>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            spacing: [1.0; 3],
            data: VolumeData::U8(data),
        })
    }

    pub fn filled(shape: [usize; 4], value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            spacing: [1.0; 3],
            data: VolumeData::F32(vec![value; len]),
        }
    }

    /// Builds a single-channel volume by evaluating `f(d, h, w)` at every node.
    pub fn from_fn(extent: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(extent.iter().product());
        for d in 0..extent[0] {
            for h in 0..extent[1] {
                for w in 0..extent[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Self {
            shape: [1, extent[0], extent[1], extent[2]],
            spacing: [1.0; 3],
            data: VolumeData::F32(data),
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("spacing {spacing:?} must be positive")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    /// Stacks single-channel volumes of equal extent into one multi-channel volume.
    pub fn stack(channels: &[Volume]) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero channels"))?;
        let extent = first.extent();
        let mut data = Vec::with_capacity(channels.len() * extent.iter().product::<usize>());
        for ch in channels {
            if ch.extent() != extent {
                return Err(Error::shape("Volume::stack", extent, ch.extent()));
            }
            data.extend(ch.to_f32());
        }
        Ok(Self {
            shape: [data.len() / extent.iter().product::<usize>(), extent[0], extent[1], extent[2]],
            spacing: first.spacing,
            data: VolumeData::F32(data),
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn extent(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            VolumeData::F32(_) => DType::F32,
            VolumeData::U8(_) => DType::U8,
        }
    }

    pub fn data(&self) -> &VolumeData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            VolumeData::F32(v) => Some(v),
            VolumeData::U8(_) => None,
        }
    }

    /// Channel-major values converted to `f32`.
    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            VolumeData::F32(v) => v.clone(),
            VolumeData::U8(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = match &self.data {
            VolumeData::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            VolumeData::U8(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
        };
        Tensor::new(&self.shape, data).expect("volume shape is consistent")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (c, [d, h, w]) = t.dims4()?;
        Self::from_f32(
            [c, d, h, w],
            t.data().iter().map(|&x| x.to_f64() as f32).collect(),
        )
    }

    /// Trilinear feature sampling; one row of `c` values per coordinate.
    pub fn trilinear_sample(&self, batch: &CoordBatch) -> Tensor<f32> {
        let values: Vec<f64> = match &self.data {
            VolumeData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            VolumeData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        };
        let stencil = TrilinearStencil::<f64>::new(self.extent(), batch.coords());
        let out = stencil.sample(&values, self.channels());
        Tensor::new(
            &[batch.len(), self.channels()],
            out.into_iter().map(|x| x as f32).collect(),
        )
        .expect("stencil output shape")
    }

    /// Trilinear resampling for real data, nearest for `u8`; the new grid
    /// spans the same align-corners cube.
    pub fn resample(&self, new_extent: [usize; 3]) -> Result<Self> {
        check_extent(new_extent)?;
        if new_extent == self.extent() {
            return Ok(self.clone());
        }
        let batch = uniform_grid_coords(new_extent)?;
        let c = self.channels();
        let n = batch.len();
        let shape = [c, new_extent[0], new_extent[1], new_extent[2]];
        let data = match &self.data {
            VolumeData::F32(_) => {
                let rows = self.trilinear_sample(&batch);
                let mut out = vec![0.0f32; c * n];
                for (i, row) in rows.data().chunks_exact(c).enumerate() {
                    for (ch, &v) in row.iter().enumerate() {
                        out[ch * n + i] = v;
                    }
                }
                VolumeData::F32(out)
            }
            VolumeData::U8(v) => {
                let src = self.extent();
                let vox = src.iter().product::<usize>();
                let mut out = vec![0u8; c * n];
                for (i, p) in batch.coords().iter().enumerate() {
                    let idx = nearest_index(p, src);
                    for ch in 0..c {
                        out[ch * n + i] = v[ch * vox + idx];
                    }
                }
                VolumeData::U8(out)
            }
        };
        Ok(Self {
            shape,
            spacing: self.spacing,
            data,
        })
    }
}

/// Single-channel class-index grid in `(d, h, w)` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    extent: [usize; 3],
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelGrid {
    pub fn new(extent: [usize; 3], num_classes: usize, data: Vec<u8>) -> Result<Self> {
        check_shape(&extent, data.len())?;
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::invalid(format!(
                "num_classes must be 1..=256, got {num_classes}"
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            extent,
            num_classes,
            data,
        })
    }

    pub fn zeros(extent: [usize; 3], num_classes: usize) -> Self {
        Self {
            extent,
            num_classes: num_classes.max(1),
            data: vec![0; extent.iter().product()],
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        self.extent
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.extent[1] + h) * self.extent[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> u8 {
        self.data[self.index(d, h, w)]
    }

    /// Sets one voxel; panics if `value` is not a valid class.
    pub fn set(&mut self, d: usize, h: usize, w: usize, value: u8) {
        assert!((value as usize) < self.num_classes, "label out of range");
        let i = self.index(d, h, w);
        self.data[i] = value;
    }

    pub fn set_linear(&mut self, i: usize, value: u8) {
        assert!((value as usize) < self.num_classes, "label out of range");
        self.data[i] = value;
    }

    pub fn coords_of(&self, i: usize) -> [usize; 3] {
        let w = i % self.extent[2];
        let h = (i / self.extent[2]) % self.extent[1];
        let d = i / (self.extent[1] * self.extent[2]);
        [d, h, w]
    }

    /// Nearest-neighbour label lookup, rounding half up on every axis.
    pub fn nearest_label(&self, batch: &CoordBatch) -> Vec<u8> {
        batch
            .coords()
            .iter()
            .map(|p| self.data[nearest_index(p, self.extent)])
            .collect()
    }

    pub fn resample(&self, new_extent: [usize; 3]) -> Result<Self> {
        check_extent(new_extent)?;
        if new_extent == self.extent {
            return Ok(self.clone());
        }
        let batch = uniform_grid_coords(new_extent)?;
        Ok(Self {
            extent: new_extent,
            num_classes: self.num_classes,
            data: self.nearest_label(&batch),
        })
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            shape: [1, self.extent[0], self.extent[1], self.extent[2]],
            spacing: [1.0; 3],
            data: VolumeData::U8(self.data.clone()),
        }
    }

    pub fn from_volume(vol: &Volume, num_classes: usize) -> Result<Self> {
        if vol.channels() != 1 {
            return Err(Error::shape("label volume channels", 1, vol.channels()));
        }
        match vol.data() {
            VolumeData::U8(v) => Self::new(vol.extent(), num_classes, v.clone()),
            VolumeData::F32(_) => Err(Error::invalid("label volumes must be u8")),
        }
    }

    /// Binary mask of voxels whose label satisfies `pred`.
    pub fn mask_where(&self, pred: impl Fn(u8) -> bool) -> Vec<bool> {
        self.data.iter().map(|&v| pred(v)).collect()
    }
}

/// A point of the normalized cube `[-1, 1]³`; components are clamped on
/// construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormCoord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl NormCoord {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        Self {
            x: c(x),
            y: c(y),
            z: c(z),
        }
    }

    /// Continuous voxel index `[d, h, w]` for a grid of the given extent.
    pub fn to_voxel(&self, extent: [usize; 3]) -> [f64; 3] {
        norm_to_voxel(self, extent)
    }
}

/// Align-corners map from normalized to continuous voxel coordinates,
/// returned in `[d, h, w]` order.
pub fn norm_to_voxel(p: &NormCoord, extent: [usize; 3]) -> [f64; 3] {
    let axis = |v: f64, n: usize| {
        let x = (v + 1.0) * 0.5 * (n.saturating_sub(1)) as f64;
        let r = x.round();
        if (x - r).abs() < NODE_SNAP {
            r
        } else {
            x
        }
    };
    [axis(p.z, extent[0]), axis(p.y, extent[1]), axis(p.x, extent[2])]
}

/// Inverse of [`norm_to_voxel`] for integer node indices.
pub fn voxel_to_norm(index: [usize; 3], extent: [usize; 3]) -> NormCoord {
    let axis = |i: usize, n: usize| {
        if n <= 1 {
            0.0
        } else {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        }
    };
    NormCoord::new(
        axis(index[2], extent[2]),
        axis(index[1], extent[1]),
        axis(index[0], extent[0]),
    )
}

fn nearest_index(p: &NormCoord, extent: [usize; 3]) -> usize {
    let v = norm_to_voxel(p, extent);
    let r = |x: f64, n: usize| ((x + 0.5).floor().max(0.0) as usize).min(n - 1);
    (r(v[0], extent[0]) * extent[1] + r(v[1], extent[1])) * extent[2] + r(v[2], extent[2])
}

fn check_extent(extent: [usize; 3]) -> Result<()> {
    if extent.iter().any(|&n| n < 2) {
        return Err(Error::invalid(format!(
            "every extent component must be >= 2, got {extent:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordOrigin {
    Random,
    UniformGrid([usize; 3]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordBatch {
    coords: Vec<NormCoord>,
    origin: CoordOrigin,
}

impl CoordBatch {
    pub fn from_coords(coords: Vec<NormCoord>) -> Self {
        Self {
            coords,
            origin: CoordOrigin::Random,
        }
    }

    pub fn coords(&self) -> &[NormCoord] {
        &self.coords
    }

    pub fn origin(&self) -> CoordOrigin {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Sub-batch of consecutive points, used for chunked inference.
    pub fn slice(&self, range: std::ops::Range<usize>) -> CoordBatch {
        CoordBatch {
            coords: self.coords[range].to_vec(),
            origin: CoordOrigin::Random,
        }
    }

    /// Coordinates as an `n x 3` matrix with columns `x, y, z`.
    pub fn to_matrix<T: Real>(&self) -> Tensor<T> {
        let data = self
            .coords
            .iter()
            .flat_map(|p| [T::from_f64(p.x), T::from_f64(p.y), T::from_f64(p.z)])
            .collect();
        Tensor::new(&[self.coords.len(), 3], data).expect("n x 3")
    }
}

/// `n` i.i.d. points uniform over `[-1, 1]³`.
pub fn random_coords<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<CoordBatch> {
    if n == 0 {
        return Err(Error::invalid("random_coords needs at least one point"));
    }
    let coords = (0..n)
        .map(|_| {
            NormCoord::new(
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            )
        })
        .collect();
    Ok(CoordBatch {
        coords,
        origin: CoordOrigin::Random,
    })
}

/// Align-corners lattice of `d·h·w` points enumerated in `(d, h, w)` row-major order.
pub fn uniform_grid_coords(extent: [usize; 3]) -> Result<CoordBatch> {
    check_extent(extent)?;
    let mut coords = Vec::with_capacity(extent.iter().product());
    for d in 0..extent[0] {
        for h in 0..extent[1] {
            for w in 0..extent[2] {
                coords.push(voxel_to_norm([d, h, w], extent));
            }
        }
    }
    Ok(CoordBatch {
        coords,
        origin: CoordOrigin::UniformGrid(extent),
    })
}

/// Precomputed 8-neighbour indices and blend weights for a set of points
/// against a fixed spatial extent. Shared by the forward and backward
/// passes of trilinear sampling.
#[derive(Clone, Debug)]
pub struct TrilinearStencil<T> {
    extent: [usize; 3],
    index: Vec<[u32; 8]>,
    weight: Vec<[T; 8]>,
}

impl<T: Real> TrilinearStencil<T> {
    pub fn new(extent: [usize; 3], coords: &[NormCoord]) -> Self {
        let mut index = Vec::with_capacity(coords.len());
        let mut weight = Vec::with_capacity(coords.len());
        let [_, eh, ew] = extent;
        for p in coords {
            let v = norm_to_voxel(p, extent);
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            let mut t = [0f64; 3];
            for a in 0..3 {
                let n = extent[a];
                if n == 1 {
                    continue;
                }
                let i0 = (v[a].floor().max(0.0) as usize).min(n - 2);
                lo[a] = i0;
                hi[a] = i0 + 1;
                t[a] = v[a] - i0 as f64;
            }
            let mut idx = [0u32; 8];
            let mut wts = [T::ZERO; 8];
            for corner in 0..8 {
                let pick = |a: usize| (corner >> (2 - a)) & 1 == 1;
                let mut w = 1.0;
                let mut at = [0usize; 3];
                for a in 0..3 {
                    if pick(a) {
                        at[a] = hi[a];
                        w *= t[a];
                    } else {
                        at[a] = lo[a];
                        w *= 1.0 - t[a];
                    }
                }
                idx[corner] = ((at[0] * eh + at[1]) * ew + at[2]) as u32;
                wts[corner] = T::from_f64(w);
            }
            index.push(idx);
            weight.push(wts);
        }
        Self {
            extent,
            index,
            weight,
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        self.extent
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Samples a `(c, d, h, w)` buffer; returns `n x c` row-major.
    pub fn sample(&self, volume: &[T], channels: usize) -> Vec<T> {
        let vox: usize = self.extent.iter().product();
        debug_assert_eq!(volume.len(), channels * vox);
        let mut out = vec![T::ZERO; self.len() * channels];
        for ch in 0..channels {
            let plane = &volume[ch * vox..(ch + 1) * vox];
            for (i, (idx, w)) in self.index.iter().zip(&self.weight).enumerate() {
                let mut acc = T::ZERO;
                for k in 0..8 {
                    acc += w[k] * plane[idx[k] as usize];
                }
                out[i * channels + ch] = acc;
            }
        }
        out
    }

    /// Adjoint of [`sample`](Self::sample): scatters `n x c` row gradients
    /// back onto the `(c, d, h, w)` buffer.
    pub fn scatter(&self, grad_rows: &[T], channels: usize, grad_volume: &mut [T]) {
        let vox: usize = self.extent.iter().product();
        for ch in 0..channels {
            let plane = &mut grad_volume[ch * vox..(ch + 1) * vox];
            for (i, (idx, w)) in self.index.iter().zip(&self.weight).enumerate() {
                let g = grad_rows[i * channels + ch];
                for k in 0..8 {
                    plane[idx[k] as usize] += w[k] * g;
                }
            }
        }
    }
}
