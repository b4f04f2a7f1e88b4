use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{EventStream, TimeWindow};
use crate::diffmath::Tensor;

/// Voxelization grid parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Pixels per spatial cell along each axis.
    pub cell_px: u32,
    /// Temporal bins over the voxelization window.
    pub bins: usize,
    /// Fixed slot capacity of the voxel set.
    pub n_cap: usize,
    /// Maximum number of events aggregated into one voxel.
    pub k_max: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            cell_px: 4,
            bins: 8,
            n_cap: 1024,
            k_max: 8,
        }
    }
}

/// One spatio-temporal voxel. Coordinates are in grid units and may be
/// fractional once attacked.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Voxel {
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub vf: f64,
}

impl Voxel {
    pub fn new(vx: f64, vy: f64, vz: f64, vf: f64) -> Self {
        Self { vx, vy, vz, vf }
    }

    pub fn is_zero(&self) -> bool {
        *self == Voxel::default()
    }
}

/// Fixed-capacity voxel list. Slots `[occupied, capacity)` are all-zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelSet {
    slots: Vec<Voxel>,
    occupied: usize,
    /// `[gx, gy, gz]`.
    dims: [usize; 3],
    cell_px: u32,
    bin_us: f64,
    k_max: usize,
    /// Events aggregated into each slot; zero for padding and injected voxels.
    retained: Vec<u32>,
}

impl VoxelSet {
    pub fn empty(dims: [usize; 3], capacity: usize, cell_px: u32, bin_us: f64, k_max: usize) -> Self {
        Self {
            slots: vec![Voxel::default(); capacity],
            occupied: 0,
            dims,
            cell_px,
            bin_us,
            k_max,
            retained: vec![0; capacity],
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn occupied(&self) -> usize {
        self.occupied
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn cell_px(&self) -> u32 {
        self.cell_px
    }

    pub fn bin_us(&self) -> f64 {
        self.bin_us
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn slots(&self) -> &[Voxel] {
        &self.slots
    }

    pub fn voxels(&self) -> &[Voxel] {
        &self.slots[..self.occupied]
    }

    /// Mutable view of the occupied slots; padding is not reachable.
    pub fn voxels_mut(&mut self) -> &mut [Voxel] {
        &mut self.slots[..self.occupied]
    }

    pub fn retained_events(&self) -> &[u32] {
        &self.retained[..self.occupied]
    }

    /// Writes `v` into the first padding slot. Returns `false` when full.
    pub fn push(&mut self, v: Voxel) -> bool {
        if self.occupied == self.slots.len() {
            return false;
        }
        self.slots[self.occupied] = v;
        self.occupied += 1;
        true
    }

    /// Upper bounds of the continuous coordinates, `[gx - 1, gy - 1, gz - 1]`.
    pub fn coord_max(&self) -> [f64; 3] {
        [
            self.dims[0].saturating_sub(1) as f64,
            self.dims[1].saturating_sub(1) as f64,
            self.dims[2].saturating_sub(1) as f64,
        ]
    }

    /// `true` for occupied slots.
    pub fn active_mask(&self) -> Vec<bool> {
        (0..self.capacity()).map(|i| i < self.occupied).collect()
    }

    /// All slots as an `[N_cap, 4]` tensor of `(vx, vy, vz, vf)` rows.
    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .slots
            .iter()
            .flat_map(|v| [v.vx, v.vy, v.vz, v.vf])
            .collect();
        Tensor::new(vec![self.capacity(), 4], data)
    }

    /// Copy with occupied slots replaced from an `[N_cap, 4]` tensor.
    pub fn with_tensor(&self, t: &Tensor) -> VoxelSet {
        assert_eq!(t.shape(), &[self.capacity(), 4]);
        let mut out = self.clone();
        for (slot, row) in out.slots[..self.occupied].iter_mut().zip(t.data().chunks_exact(4)) {
            *slot = Voxel::new(row[0], row[1], row[2], row[3]);
        }
        out
    }

    /// Copy with coordinates rounded half away from zero, for export.
    pub fn rounded(&self) -> VoxelSet {
        let mut out = self.clone();
        for v in out.voxels_mut() {
            v.vx = v.vx.round();
            v.vy = v.vy.round();
            v.vz = v.vz.round();
        }
        out
    }

    /// Re-expresses the voxels of a frame-level set inside `region` (frame
    /// pixels) as a patch-level set of `out_px x out_px` pixels with the same
    /// cell size. Voxels whose centers fall outside the patch are dropped.
    pub fn crop(&self, region: &crate::geom::BBox, out_px: u32) -> VoxelSet {
        let cell = self.cell_px as f64;
        let g = (out_px as usize).div_ceil(self.cell_px as usize);
        let mut out = VoxelSet::empty(
            [g, g, self.dims[2]],
            self.capacity(),
            self.cell_px,
            self.bin_us,
            self.k_max,
        );
        let (sx, sy) = (out_px as f64 / region.w, out_px as f64 / region.h);
        for (v, &n) in self.voxels().iter().zip(self.retained_events()) {
            let px = ((v.vx + 0.5) * cell - region.x) * sx;
            let py = ((v.vy + 0.5) * cell - region.y) * sy;
            if px < 0.0 || py < 0.0 || px >= out_px as f64 || py >= out_px as f64 {
                continue;
            }
            let i = out.occupied;
            out.push(Voxel::new(px / cell - 0.5, py / cell - 0.5, v.vz, v.vf));
            out.retained[i] = n;
        }
        out
    }
}

/// Number of zero-padded slots.
pub fn count_invalid_voxels(v: &VoxelSet) -> usize {
    v.capacity() - v.occupied()
}

/// Quantizes the events of `window` into integer cells. Each cell keeps its
/// `k_max` earliest events and its feature is their polarity sum; cells are
/// ordered by first event time and only the earliest `n_cap` cells are kept.
pub fn voxelize(stream: &EventStream, window: TimeWindow, spec: &GridSpec) -> VoxelSet {
    assert!(spec.cell_px > 0 && spec.bins > 0, "grid cell sizes must be positive");
    let gx = (stream.width() as usize).div_ceil(spec.cell_px as usize);
    let gy = (stream.height() as usize).div_ceil(spec.cell_px as usize);
    let duration = window.duration();
    let bin_us = duration as f64 / spec.bins as f64;
    let mut set = VoxelSet::empty([gx, gy, spec.bins], spec.n_cap, spec.cell_px, bin_us, spec.k_max);
    if duration == 0 {
        return set;
    }
    let mut index: HashMap<(u32, u32, usize), usize> = HashMap::new();
    let cell = spec.cell_px;
    for e in stream.in_window(window) {
        let z = ((e.t - window.start) as u128 * spec.bins as u128 / duration as u128) as usize;
        let key = (e.x / cell, e.y / cell, z);
        let slot = match index.get(&key) {
            Some(&s) => s,
            None => {
                if set.occupied == spec.n_cap {
                    continue;
                }
                let s = set.occupied;
                set.push(Voxel::new(key.0 as f64, key.1 as f64, z as f64, 0.0));
                index.insert(key, s);
                s
            }
        };
        if (set.retained[slot] as usize) < spec.k_max {
            set.retained[slot] += 1;
            set.slots[slot].vf += e.p.sign() as f64;
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventcam::{EventPoint, Polarity};

    fn stream(events: Vec<EventPoint>) -> EventStream {
        EventStream::new(64, 48, 0, 1000, events).unwrap()
    }

    #[test]
    fn opposite_polarities_cancel() {
        let s = stream(vec![
            EventPoint::new(10, 5, 5, Polarity::Positive),
            EventPoint::new(20, 6, 7, Polarity::Negative),
        ]);
        let v = voxelize(&s, TimeWindow::new(0, 1000), &GridSpec::default());
        assert_eq!(v.occupied(), 1);
        assert_eq!(v.voxels()[0], Voxel::new(1.0, 1.0, 0.0, 0.0));
    }

    #[test]
    fn cap_keeps_earliest_event() {
        let s = stream(vec![
            EventPoint::new(10, 1, 1, Polarity::Negative),
            EventPoint::new(11, 1, 1, Polarity::Positive),
            EventPoint::new(12, 1, 1, Polarity::Positive),
        ]);
        let spec = GridSpec {
            k_max: 1,
            ..GridSpec::default()
        };
        let v = voxelize(&s, TimeWindow::new(0, 1000), &spec);
        assert_eq!(v.voxels()[0].vf, -1.0);
        assert_eq!(v.retained_events(), &[1]);
    }

    #[test]
    fn empty_window_is_all_padding() {
        let s = stream(vec![EventPoint::new(10, 1, 1, Polarity::Negative)]);
        let v = voxelize(&s, TimeWindow::new(500, 500), &GridSpec::default());
        assert_eq!(v.occupied(), 0);
        assert_eq!(count_invalid_voxels(&v), 1024);
        assert!(v.slots().iter().all(Voxel::is_zero));
    }

    #[test]
    fn invalid_count_arithmetic() {
        let mut v = VoxelSet::empty([4, 4, 2], 1024, 4, 1.0, 8);
        for i in 0..1000 {
            v.push(Voxel::new(0.0, 0.0, 0.0, i as f64));
        }
        assert_eq!(count_invalid_voxels(&v), 24);
        while v.push(Voxel::default()) {}
        assert_eq!(count_invalid_voxels(&v), 0);
    }

    #[test]
    fn cell_cap_keeps_earliest_cells() {
        let events = (0..10)
            .map(|i| EventPoint::new(i * 10, (i * 4) as u32, 0, Polarity::Positive))
            .collect();
        let spec = GridSpec {
            n_cap: 3,
            ..GridSpec::default()
        };
        let v = voxelize(&stream(events), TimeWindow::new(0, 1000), &spec);
        let xs: Vec<f64> = v.voxels().iter().map(|v| v.vx).collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn crop_with_all_voxels_outside_is_empty() {
        let s = stream(vec![EventPoint::new(10, 60, 40, Polarity::Positive)]);
        let v = voxelize(&s, TimeWindow::new(0, 1000), &GridSpec::default());
        let c = v.crop(&crate::geom::BBox::new(0.0, 0.0, 16.0, 16.0), 32);
        assert_eq!(c.occupied(), 0);
        assert_eq!(c.capacity(), v.capacity());
    }

    #[test]
    fn crop_maps_voxel_centers_into_patch() {
        let s = stream(vec![EventPoint::new(10, 17, 9, Polarity::Positive)]);
        let v = voxelize(&s, TimeWindow::new(0, 1000), &GridSpec::default());
        // Cell (4, 2) spans pixels [16, 20) x [8, 12); center (18, 10).
        let c = v.crop(&crate::geom::BBox::new(8.0, 0.0, 32.0, 32.0), 64);
        assert_eq!(c.occupied(), 1);
        let got = c.voxels()[0];
        // Patch center = ((18 - 8) * 2, 10 * 2) = (20, 20) px -> cell 4.5.
        assert!((got.vx - 4.5).abs() < 1e-12 && (got.vy - 4.5).abs() < 1e-12);
    }
}
