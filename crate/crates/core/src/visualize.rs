//! Cosine similarity between visual prompt tokens and image tokens, as grid
//! maps, CSV and a colour overlay.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::image::Image;
use crate::model::{CategoryPlan, Model};

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMaps {
    pub layer: usize,
    pub use_inputs: bool,
    /// One `grid × grid` map per prompt token.
    pub per_prompt: Vec<Mat>,
    /// Mean over prompt tokens.
    pub mean: Mat,
}

fn unit(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let n = row.dot(&row).sqrt().max(1e-12);
    row.iter().map(|v| v / n).collect()
}

/// Similarity maps at `layer` (default: last). With `use_inputs` the prompt
/// and image tokens entering the layer are compared; otherwise the layer
/// outputs.
pub fn prompt_similarity(
    model: &Model,
    img: &Image,
    plan: &CategoryPlan,
    layer: Option<usize>,
    use_inputs: bool,
) -> Result<SimilarityMaps> {
    let layers = model.cfg().backbone.num_layers;
    let layer = layer.unwrap_or(layers - 1);
    if layer >= layers {
        return Err(Error::Usage(format!("layer {layer} outside 0..{layers}")));
    }
    let mut g = model.graph(false);
    let cond = model.plan_vars(&mut g, plan);
    let out = model.forward_image(&mut g, img, &cond, true)?;
    let t = out.visual.trace.get(layer).ok_or_else(|| {
        Error::Usage("the model inserts no visual prompts; nothing to visualize".into())
    })?;
    let (p, x) = if use_inputs {
        (t.prompt_in, t.patches_in)
    } else {
        (t.prompt_out, t.patches_out)
    };
    let prompts = g.value(p);
    let tokens = g.value(x);
    let side = model.cfg().backbone.grid_side();
    let units: Vec<Vec<f64>> = tokens.rows().into_iter().map(unit).collect();
    let mut per_prompt = Vec::with_capacity(prompts.nrows());
    for prow in prompts.rows() {
        let pu = unit(prow);
        let mut m = Mat::zeros((side, side));
        for (i, tu) in units.iter().enumerate() {
            let cos: f64 = pu.iter().zip(tu).map(|(a, b)| a * b).sum();
            m[[i / side, i % side]] = cos.clamp(-1.0, 1.0);
        }
        per_prompt.push(m);
    }
    let mut mean = Mat::zeros((side, side));
    for m in &per_prompt {
        mean += m;
    }
    mean /= per_prompt.len() as f64;
    Ok(SimilarityMaps {
        layer,
        use_inputs,
        per_prompt,
        mean,
    })
}

/// One line per grid row, comma-separated, no header.
pub fn to_csv(map: &Mat) -> String {
    let mut out = String::new();
    for row in map.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn write_csv(map: &Mat, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(map)).map_err(|e| Error::io(path, e))
}

/// Blue → white → red ramp over [lo, hi].
fn ramp(v: f64, lo: f64, hi: f64) -> [f64; 3] {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    if t < 0.5 {
        let s = t * 2.0;
        [s, s, 1.0]
    } else {
        let s = (1.0 - t) * 2.0;
        [1.0, s, s]
    }
}

/// Map upsampled bilinearly to the image size, coloured, and blended over
/// the image at `alpha`.
pub fn overlay(img: &Image, map: &Mat, alpha: f64) -> Image {
    let (h, w) = (img.height(), img.width());
    let (gh, gw) = map.dim();
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sample = |y: f64, x: f64| {
        let fy = (y * gh as f64 - 0.5).clamp(0.0, (gh - 1) as f64);
        let fx = (x * gw as f64 - 0.5).clamp(0.0, (gw - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = map[[y0, x0]] * (1.0 - tx) + map[[y0, x1]] * tx;
        let bottom = map[[y1, x0]] * (1.0 - tx) + map[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    };
    let mut px = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let v = sample((y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64);
            let c = ramp(v, lo, hi);
            for k in 0..3 {
                px[[k, y, x]] = (1.0 - alpha) * img.pixels[[k, y, x]] + alpha * c[k];
            }
        }
    }
    Image::new(px)
}
