//! Whole-volume inference by overlapping patch tiling.

use super::{normalize_intensity, Model, Result, SegnetError};
use crate::autodiff::{Tape, Tensor};
use crate::volume::{LabelMap3, Volume3};

/// Minimum overlap between neighbouring tiles, in voxels.
pub const TILE_OVERLAP: usize = 8;

/// Tile start offsets along one axis: a regular grid with step
/// `patch - TILE_OVERLAP`, with the last tile pulled inward to end at `n`.
pub fn tile_starts(n: usize, patch: usize) -> Vec<usize> {
    if n <= patch {
        return vec![0];
    }
    let step = patch.saturating_sub(TILE_OVERLAP).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + patch < n).collect();
    starts.push(n - patch);
    starts
}

/// Channel probabilities of one normalised `(1, P, P, P)` patch.
pub fn forward_probabilities(model: &Model<f32>, patch: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let x = tape.constant(patch);
    let out = model.forward(&mut tape, x)?;
    Ok(tape.value(out.probabilities).clone())
}

fn extract_patch(volume: &Volume3, start: [usize; 3], p: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(p * p * p);
    for z in start[2]..start[2] + p {
        for y in start[1]..start[1] + p {
            let row = volume.geometry().index(start[0], y, z);
            data.extend(volume.voxels()[row..row + p].iter().map(|&v| normalize_intensity(v)));
        }
    }
    Tensor::from_vec(vec![1, p, p, p], data).expect("patch buffer")
}

/// Segments a volume already at the model's training spacing. Probabilities of
/// overlapping tiles are averaged; ties in the argmax go to the smaller label.
pub fn predict_volume(model: &Model<f32>, volume: &Volume3) -> Result<LabelMap3> {
    let p = model.spec().patch_size;
    let g = *volume.geometry();
    if g.dims.iter().any(|&n| n < p) {
        return Err(SegnetError::VolumeTooSmall { dims: g.dims, patch: p });
    }
    let n = g.len();
    let classes = model.spec().n_classes;
    let mut acc = vec![0.0f64; classes * n];
    let mut count = vec![0u32; n];
    let [sx, sy, sz] = [0, 1, 2].map(|a| tile_starts(g.dims[a], p));
    // raster order over tiles keeps per-voxel summation order fixed
    for &z0 in &sz {
        for &y0 in &sy {
            for &x0 in &sx {
                let probs = forward_probabilities(model, extract_patch(volume, [x0, y0, z0], p))?;
                let pd = probs.data();
                let pv = p * p * p;
                for z in 0..p {
                    for y in 0..p {
                        let base = g.index(x0, y0 + y, z0 + z);
                        let local = (z * p + y) * p;
                        for x in 0..p {
                            count[base + x] += 1;
                            for c in 0..classes {
                                acc[c * n + base + x] += pd[c * pv + local + x] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    let labels = (0..n)
        .map(|v| {
            let mut best = 0;
            let mut best_p = f64::NEG_INFINITY;
            for c in 0..classes {
                let prob = acc[c * n + v] / count[v] as f64;
                if prob > best_p {
                    best = c;
                    best_p = prob;
                }
            }
            best as u8
        })
        .collect();
    Ok(LabelMap3::new(g, labels)?)
}
