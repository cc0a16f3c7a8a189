use super::{ExpertParams, ExpertState, Image, PostProcess};
use crate::error::{invalid, Result};
use crate::tensorlab::{
    bilinear_resize, bilinear_resize_backward, pixel_shuffle, pixel_shuffle_backward, FeatureMap,
    ShuffleDirection, TokenSequence,
};

/// Resizes the position grid so the expert accepts `new_grid_side * patch`
/// pixel inputs. Conv-stack experts have no position grid and come back unchanged.
pub fn interpolate_pos_embed(expert: &ExpertState, new_grid_side: usize) -> Result<ExpertState> {
    let mut out = expert.clone();
    if let ExpertParams::Patch(p) = &mut out.params {
        if new_grid_side == 0 {
            return Err(invalid("position grid side must be positive"));
        }
        if new_grid_side != p.pos_side {
            let d = p.embed_dim();
            let grid = FeatureMap {
                height: p.pos_side,
                width: p.pos_side,
                channels: d,
                data: std::mem::take(&mut p.pos),
                source_resolution: None,
            };
            p.pos = bilinear_resize(&grid, new_grid_side, new_grid_side)?.data;
            p.pos_side = new_grid_side;
        }
    }
    Ok(out)
}

/// Splits a map into `t x t` equal tiles in raster order.
pub fn split_tiles(map: &FeatureMap, t: usize) -> Result<Vec<FeatureMap>> {
    if t == 0 || map.height % t != 0 || map.width % t != 0 {
        return Err(invalid(format!(
            "{}x{} grid cannot be split into {t}x{t} tiles",
            map.height, map.width
        )));
    }
    let (th, tw) = (map.height / t, map.width / t);
    let c = map.channels;
    let mut tiles = Vec::with_capacity(t * t);
    for ti in 0..t {
        for tj in 0..t {
            let mut tile = FeatureMap::zeros(th, tw, c);
            for r in 0..th {
                let src = map.idx(ti * th + r, tj * tw);
                let dst = tile.idx(r, 0);
                tile.data[dst..dst + tw * c].copy_from_slice(&map.data[src..src + tw * c]);
            }
            tiles.push(tile);
        }
    }
    Ok(tiles)
}

/// Inverse of [`split_tiles`].
pub fn merge_tiles(tiles: &[FeatureMap], t: usize) -> Result<FeatureMap> {
    if t == 0 || tiles.len() != t * t {
        return Err(invalid(format!("expected {} tiles, got {}", t * t, tiles.len())));
    }
    let (th, tw, c) = tiles[0].shape();
    if tiles.iter().any(|x| x.shape() != (th, tw, c)) {
        return Err(invalid("tiles must share one shape"));
    }
    let mut out = FeatureMap::zeros(th * t, tw * t, c);
    for (k, tile) in tiles.iter().enumerate() {
        let (ti, tj) = (k / t, k % t);
        for r in 0..th {
            let dst = out.idx(ti * th + r, tj * tw);
            let src = tile.idx(r, 0);
            out.data[dst..dst + tw * c].copy_from_slice(&tile.data[src..src + tw * c]);
        }
    }
    Ok(out)
}

/// Encodes `t x t` non-overlapping tiles independently and reassembles
/// their feature grids in spatial order.
pub fn tile_encode(expert: &ExpertState, image: &Image, t: usize) -> Result<FeatureMap> {
    if t == 0 || image.resolution % t != 0 {
        return Err(invalid(format!(
            "image resolution {} not divisible by tile grid {t}",
            image.resolution
        )));
    }
    let tile_res = image.resolution / t;
    if tile_res != expert.accepted_resolution() {
        return Err(invalid(format!(
            "tile resolution {tile_res} does not match expert `{}` input {}",
            expert.spec.name,
            expert.accepted_resolution()
        )));
    }
    let encoded = split_tiles(&image.as_map(), t)?
        .into_iter()
        .map(|tile| {
            expert.encode(&Image {
                resolution: tile_res,
                data: tile.data,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_tiles(&encoded, t)?.with_source_resolution(image.resolution))
}

fn target_side(target_count: usize) -> Result<usize> {
    let g = (target_count as f64).sqrt().round() as usize;
    if target_count == 0 || g * g != target_count {
        return Err(invalid(format!(
            "target token count {target_count} is not a perfect square"
        )));
    }
    Ok(g)
}

fn post_processed(map: &FeatureMap, post: PostProcess) -> Result<FeatureMap> {
    match post {
        PostProcess::None | PostProcess::Resize => Ok(map.clone()),
        PostProcess::PixelUnshuffle(r) => pixel_shuffle(map, r, ShuffleDirection::Unshuffle),
    }
}

/// Post-processes a feature grid, resizes it to `g x g` and flattens it to
/// exactly `target_count = g^2` tokens.
pub fn normalize_tokens(map: &FeatureMap, target_count: usize, post: PostProcess) -> Result<TokenSequence> {
    let g = target_side(target_count)?;
    let m = post_processed(map, post)?;
    let m = if (m.height, m.width) == (g, g) {
        m
    } else {
        bilinear_resize(&m, g, g)?
    };
    Ok(m.into_tokens())
}

/// Gradient of [`normalize_tokens`] with respect to the input grid of shape `input_shape`.
pub fn normalize_tokens_backward(
    input_shape: (usize, usize, usize),
    post: PostProcess,
    grad_tokens: &TokenSequence,
) -> Result<FeatureMap> {
    let g = target_side(grad_tokens.length)?;
    let (h, w, c) = input_shape;
    let (ih, iw) = match post {
        PostProcess::PixelUnshuffle(r) => (h / r, w / r),
        _ => (h, w),
    };
    let gm = FeatureMap {
        height: g,
        width: g,
        channels: grad_tokens.dim,
        data: grad_tokens.data.clone(),
        source_resolution: None,
    };
    let inter = if (ih, iw) == (g, g) {
        gm
    } else {
        bilinear_resize_backward(ih, iw, &gm)?
    };
    let out = match post {
        PostProcess::PixelUnshuffle(r) => pixel_shuffle_backward(&inter, r, ShuffleDirection::Unshuffle)?,
        _ => inter,
    };
    debug_assert_eq!(out.shape(), (h, w, c));
    Ok(out)
}
