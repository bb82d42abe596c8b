use super::{Geometry, LabelMap3, Result, Volume3, VolumeError};

// Guards the ceiling against representation error, e.g. 71 * 0.9 = 63.900000000000006.
const EXTENT_TOLERANCE: f64 = 1e-9;

/// Output grid size when covering the same physical extent at `target` spacing.
pub fn resampled_dims(geometry: &Geometry, target: [f64; 3]) -> Result<[usize; 3]> {
    if target.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(VolumeError::InvalidGeometry(format!(
            "target spacing {target:?} must be positive and finite"
        )));
    }
    let extent = geometry.extent();
    Ok([0, 1, 2].map(|a| ((extent[a] / target[a]) - EXTENT_TOLERANCE).ceil().max(1.0) as usize))
}

fn target_geometry(geometry: &Geometry, target: [f64; 3]) -> Result<Geometry> {
    for (axis, &len) in geometry.dims.iter().enumerate() {
        if len < 2 {
            return Err(VolumeError::DegenerateAxis { axis, len });
        }
    }
    let dims = resampled_dims(geometry, target)?;
    Geometry::new(dims, target, geometry.origin)
}

/// Continuous source index for every output sample along one axis, clamped to
/// the source grid.
fn axis_positions(n_out: usize, target: f64, source: f64, n_in: usize) -> Vec<f64> {
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|i| (i as f64 * target / source).clamp(0.0, max))
        .collect()
}

/// Trilinear resampling in physical coordinates. The origin is kept; samples
/// beyond the last source voxel centre take the edge value.
pub fn resample_volume(volume: &Volume3, target: [f64; 3]) -> Result<Volume3> {
    let src = volume.geometry();
    let out = target_geometry(src, target)?;
    let pos: Vec<Vec<f64>> = (0..3)
        .map(|a| axis_positions(out.dims[a], target[a], src.spacing[a], src.dims[a]))
        .collect();
    // (lower index, weight of upper neighbour) per axis
    let split = |p: f64, n: usize| {
        let lo = (p.floor() as usize).min(n - 2);
        (lo, p - lo as f64)
    };
    let [nx, ny, _] = src.dims;
    let v = volume.voxels();
    let mut data = Vec::with_capacity(out.len());
    for &pz in &pos[2] {
        let (z0, wz) = split(pz, src.dims[2]);
        for &py in &pos[1] {
            let (y0, wy) = split(py, src.dims[1]);
            for &px in &pos[0] {
                let (x0, wx) = split(px, src.dims[0]);
                let at = |dx: usize, dy: usize, dz: usize| {
                    v[(x0 + dx) + nx * ((y0 + dy) + ny * (z0 + dz))] as f64
                };
                let c00 = at(0, 0, 0) * (1.0 - wx) + at(1, 0, 0) * wx;
                let c10 = at(0, 1, 0) * (1.0 - wx) + at(1, 1, 0) * wx;
                let c01 = at(0, 0, 1) * (1.0 - wx) + at(1, 0, 1) * wx;
                let c11 = at(0, 1, 1) * (1.0 - wx) + at(1, 1, 1) * wx;
                let c0 = c00 * (1.0 - wy) + c10 * wy;
                let c1 = c01 * (1.0 - wy) + c11 * wy;
                data.push((c0 * (1.0 - wz) + c1 * wz) as f32);
            }
        }
    }
    Volume3::new(out, data)
}

/// Nearest-neighbour resampling; never introduces a label absent from the input.
pub fn resample_labels(labels: &LabelMap3, target: [f64; 3]) -> Result<LabelMap3> {
    let src = labels.geometry();
    let out = target_geometry(src, target)?;
    let idx: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            axis_positions(out.dims[a], target[a], src.spacing[a], src.dims[a])
                .into_iter()
                // round half up, consistently across axes
                .map(|p| (p + 0.5).floor() as usize)
                .map(|i| i.min(src.dims[a] - 1))
                .collect()
        })
        .collect();
    let l = labels.labels();
    let mut data = Vec::with_capacity(out.len());
    for &z in &idx[2] {
        for &y in &idx[1] {
            for &x in &idx[0] {
                data.push(l[src.index(x, y, z)]);
            }
        }
    }
    LabelMap3::new(out, data)
}
