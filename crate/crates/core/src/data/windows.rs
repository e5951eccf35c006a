//! Zone sampling, chronological splits, and supervised windowing.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, DemandTensor};

/// Keep a seeded m × u sub-grid of the tensor's zones.
///
/// Samples `m` origin zones and then `u` destination zones uniformly without
/// replacement, keeps every selected zone in its original relative order, and
/// re-indexes the tensor over the m·u cross-product pairs. The source must
/// contain every cross-product pair (true for ingestion and synthetic
/// tensors, which index complete grids).
pub fn sample_od_grid(
    tensor: &DemandTensor,
    m: usize,
    u: usize,
    seed: u64,
) -> Result<DemandTensor, DataError> {
    let origins = tensor.origins();
    let dests = tensor.dests();
    if m == 0 || m > origins.len() {
        return Err(DataError::InsufficientZones {
            role: "origin",
            requested: m,
            available: origins.len(),
        });
    }
    if u == 0 || u > dests.len() {
        return Err(DataError::InsufficientZones {
            role: "destination",
            requested: u,
            available: dests.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut origin_picks = rand::seq::index::sample(&mut rng, origins.len(), m).into_vec();
    let mut dest_picks = rand::seq::index::sample(&mut rng, dests.len(), u).into_vec();
    origin_picks.sort_unstable();
    dest_picks.sort_unstable();

    let pair_pos: HashMap<(&str, &str), usize> = tensor
        .pair_index()
        .iter()
        .enumerate()
        .map(|(i, (o, d))| ((o.as_str(), d.as_str()), i))
        .collect();

    let num_windows = tensor.num_windows();
    let mut pair_index = Vec::with_capacity(m * u);
    let mut counts = Vec::with_capacity(m * u * num_windows);
    for &oi in &origin_picks {
        for &di in &dest_picks {
            let key = (origins[oi], dests[di]);
            let src = *pair_pos.get(&key).ok_or_else(|| DataError::MissingPair {
                origin: key.0.into(),
                dest: key.1.into(),
            })?;
            pair_index.push((key.0.to_string(), key.1.to_string()));
            counts.extend_from_slice(tensor.series(src));
        }
    }

    DemandTensor::new(
        pair_index,
        counts,
        num_windows,
        tensor.resolution_minutes(),
        tensor.start_time(),
    )
}

/// Contiguous 60 / 10 / 30 time split, in chronological order.
///
/// Train and validation lengths are floor-rounded; the remainder goes to
/// test. Needs at least 10 windows so every segment is non-empty.
pub fn split_chronological(
    tensor: &DemandTensor,
) -> Result<(DemandTensor, DemandTensor, DemandTensor), DataError> {
    let t = tensor.num_windows();
    if t < 10 {
        return Err(DataError::TooShort { needed: 10, actual: t });
    }
    let n_train = t * 6 / 10;
    let n_val = t / 10;
    let n_test = t - n_train - n_val;
    let train = tensor.slice_time(0, n_train)?;
    let val = tensor.slice_time(n_train, n_val)?;
    let test = tensor.slice_time(n_train + n_val, n_test)?;
    Ok((train, val, test))
}

/// One supervised example: `input` is the V × t history block, `target` the
/// V × k continuation, both row-major f64 copies of the counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub num_pairs: usize,
    pub input_len: usize,
    pub horizon: usize,
    /// Index of the first input window within the source tensor.
    pub start: usize,
}

/// Stride-1 sliding windows over one split segment: inputs `[s, s+t)`,
/// targets `[s+t, s+t+k)`. A segment of length L yields L − t − k + 1
/// windows; targets always sit strictly after their inputs, and no window
/// reaches outside the segment, so split boundaries are never crossed.
pub fn make_windows(
    tensor: &DemandTensor,
    input_len: usize,
    horizon: usize,
) -> Result<Vec<Window>, DataError> {
    let l = tensor.num_windows();
    if input_len == 0 || horizon == 0 {
        return Err(DataError::BadShape {
            context: format!("window sizes must be positive, got t={input_len}, k={horizon}"),
        });
    }
    if input_len + horizon > l {
        return Err(DataError::TooShort {
            needed: input_len + horizon,
            actual: l,
        });
    }
    let v = tensor.num_pairs();
    let count = l - input_len - horizon + 1;
    let mut windows = Vec::with_capacity(count);
    for s in 0..count {
        let mut input = Vec::with_capacity(v * input_len);
        let mut target = Vec::with_capacity(v * horizon);
        for pair in 0..v {
            let series = tensor.series(pair);
            input.extend(series[s..s + input_len].iter().map(|&c| c as f64));
            target.extend(
                series[s + input_len..s + input_len + horizon]
                    .iter()
                    .map(|&c| c as f64),
            );
        }
        windows.push(Window {
            input,
            target,
            num_pairs: v,
            input_len,
            horizon,
            start: s,
        });
    }
    Ok(windows)
}
