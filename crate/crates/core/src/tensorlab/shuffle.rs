use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShuffleDirection {
    /// `H x W x C -> rH x rW x C/r^2`
    Shuffle,
    /// `H x W x C -> H/r x W/r x C r^2`
    Unshuffle,
}

/// Lossless space/channel rearrangement.
///
/// Inside each `r x r` block the original channel index varies fastest and
/// block positions are enumerated row-major: coarse channel
/// `(dy * r + dx) * C + c` holds fine pixel `(i*r + dy, j*r + dx)`, channel `c`.
pub fn pixel_shuffle(map: &FeatureMap, r: usize, direction: ShuffleDirection) -> Result<FeatureMap> {
    if r == 0 {
        return Err(invalid("shuffle factor must be positive"));
    }
    match direction {
        ShuffleDirection::Shuffle => {
            if map.channels % (r * r) != 0 {
                return Err(invalid(format!(
                    "channels ({}) not divisible by r^2 = {}",
                    map.channels,
                    r * r
                )));
            }
            let fine_c = map.channels / (r * r);
            let mut out = FeatureMap::zeros(map.height * r, map.width * r, fine_c);
            out.source_resolution = map.source_resolution;
            for i in 0..map.height {
                for j in 0..map.width {
                    let src = map.pixel(i, j);
                    for dy in 0..r {
                        for dx in 0..r {
                            let block = (dy * r + dx) * fine_c;
                            out.pixel_mut(i * r + dy, j * r + dx)
                                .copy_from_slice(&src[block..block + fine_c]);
                        }
                    }
                }
            }
            Ok(out)
        }
        ShuffleDirection::Unshuffle => {
            if map.height % r != 0 {
                return Err(invalid(format!("height ({}) not divisible by r = {r}", map.height)));
            }
            if map.width % r != 0 {
                return Err(invalid(format!("width ({}) not divisible by r = {r}", map.width)));
            }
            let c = map.channels;
            let mut out = FeatureMap::zeros(map.height / r, map.width / r, c * r * r);
            out.source_resolution = map.source_resolution;
            for i in 0..out.height {
                for j in 0..out.width {
                    for dy in 0..r {
                        for dx in 0..r {
                            let block = (dy * r + dx) * c;
                            let src = map.pixel(i * r + dy, j * r + dx);
                            out.pixel_mut(i, j)[block..block + c].copy_from_slice(src);
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// A permutation's adjoint is its inverse.
pub fn pixel_shuffle_backward(grad_out: &FeatureMap, r: usize, direction: ShuffleDirection) -> Result<FeatureMap> {
    let inverse = match direction {
        ShuffleDirection::Shuffle => ShuffleDirection::Unshuffle,
        ShuffleDirection::Unshuffle => ShuffleDirection::Shuffle,
    };
    pixel_shuffle(grad_out, r, inverse)
}
