//! Property checks shared by the proptest suite and the acceptance runner.
#![allow(dead_code)]

use candle_core::Device;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remix_core::backbone::assign_positions;
use remix_core::codec::{concat_canvas, decode_latent, decode_tokens, encode_image, encode_tensor, split_canvas, Image, Latent};

pub fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    let px: Vec<f32> = (0..h * w * 3).map(|_| rng.random::<f32>()).collect();
    Image::new(h, w, px).unwrap()
}

/// Image and tensor codec paths both round-trip bit-exactly and agree with each other.
pub fn codec_round_trip(h_tiles: usize, w_tiles: usize, p: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = random_image(h_tiles * p, w_tiles * p, &mut rng);
    let z = encode_image(&img, p).map_err(|e| e.to_string())?;
    let back = decode_latent(&z, p).map_err(|e| e.to_string())?;
    if back != img {
        return Err(format!("decode(encode(x)) != x for {h_tiles}x{w_tiles} tiles, p={p}"));
    }
    let t = img.to_tensor(&Device::Cpu).map_err(|e| e.to_string())?.unsqueeze(0).map_err(|e| e.to_string())?;
    let tok = encode_tensor(&t, p).map_err(|e| e.to_string())?;
    let direct = z.to_tokens(&Device::Cpu).map_err(|e| e.to_string())?.unsqueeze(0).map_err(|e| e.to_string())?;
    let (a, b) = (tok.flatten_all().unwrap().to_vec1::<f32>().unwrap(), direct.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    if a != b {
        return Err("tensor encode disagrees with image encode".into());
    }
    let dec = decode_tokens(&tok, h_tiles, w_tiles, p).map_err(|e| e.to_string())?;
    let img2 = Image::from_tensor(&dec.squeeze(0).unwrap()).map_err(|e| e.to_string())?;
    if img2 != img {
        return Err("tensor decode(encode(x)) != x".into());
    }
    Ok(())
}

/// `split(concat(refs, target))` returns the inputs bit-exactly.
pub fn canvas_round_trip(h: usize, widths: &[usize], target_w: Option<usize>, c: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lat = |w: usize| Latent::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    let refs: Vec<Latent> = widths.iter().map(|&w| lat(w)).collect();
    let target = target_w.map(&mut lat);
    let canvas = concat_canvas(&refs, target.as_ref()).map_err(|e| e.to_string())?;
    let tokens = canvas.to_tokens(&Device::Cpu).map_err(|e| e.to_string())?;
    let canvas = canvas.with_tokens(&tokens).map_err(|e| e.to_string())?;
    let (r2, t2) = split_canvas(&canvas).map_err(|e| e.to_string())?;
    if r2 != refs || t2 != target {
        return Err(format!("canvas round trip failed for h={h}, widths={widths:?}, target={target_w:?}"));
    }
    Ok(())
}

/// Reference and generated position sets are disjoint; the generated origin is `(h, sum(widths))`.
pub fn positions_disjoint(h: usize, widths: &[usize], target_w: usize) -> Result<(), String> {
    let ref_w: usize = widths.iter().sum();
    let max = (2 * h, ref_w + target_w);
    let g = assign_positions(h, widths, Some(target_w), max).map_err(|e| e.to_string())?;
    let mut refs = std::collections::HashSet::new();
    let mut gen = std::collections::HashSet::new();
    for i in 0..g.len() {
        let col_in_canvas = i % (ref_w + target_w);
        let pos = (g.rows[i], g.cols[i]);
        if col_in_canvas < ref_w {
            refs.insert(pos);
        } else {
            gen.insert(pos);
        }
    }
    if refs.len() != h * ref_w || gen.len() != h * target_w {
        return Err("duplicate positions within a region".into());
    }
    if !refs.is_disjoint(&gen) {
        return Err(format!("overlap for h={h}, widths={widths:?}"));
    }
    let origin = gen.iter().min().copied();
    if origin != Some((h, ref_w)) {
        return Err(format!("generated origin {origin:?}, expected ({h}, {ref_w})"));
    }
    Ok(())
}
