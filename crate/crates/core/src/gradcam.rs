//! Grad-CAM importance maps: spatially averaged class-logit gradients weight
//! the feature maps of a chosen convolutional layer; the ReLU of the weighted
//! sum is upsampled and normalized into a heatmap.

use std::path::Path;

use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::model::{ArchSpec, ClassifierGraph, ModelParams};
use crate::tensor::{Real, Tensor};

/// Result of one Grad-CAM computation.
#[derive(Debug, Clone)]
pub struct CamResult {
    /// Raw nonnegative map at feature-map resolution `[h, w]`.
    pub map: Tensor,
    /// Bilinear upsample at input resolution, min-max normalized to [0, 1].
    pub upsampled: Tensor,
    pub target_class: usize,
    pub layer_id: String,
}

/// Spatial mean of the gradients per channel: weights `[k]` from
/// activations/gradients `[k, h, w]`.
pub fn channel_weights(activations: &Tensor, grads: &Tensor) -> Result<Tensor> {
    if activations.shape() != grads.shape() || activations.rank() != 3 {
        return Err(Error::Shape(format!(
            "activations {:?} vs grads {:?}",
            activations.shape(),
            grads.shape()
        )));
    }
    let (k, h, w) = (
        activations.shape()[0],
        activations.shape()[1],
        activations.shape()[2],
    );
    let plane = h * w;
    let weights: Vec<Real> = (0..k)
        .map(|c| {
            grads.data()[c * plane..(c + 1) * plane]
                .iter()
                .sum::<Real>()
                / plane as Real
        })
        .collect();
    Ok(Tensor::from_parts(vec![k], weights))
}

/// ReLU of the channel-weighted activation sum: `[k,h,w] x [k] -> [h,w]`.
pub fn cam(activations: &Tensor, weights: &Tensor) -> Result<Tensor> {
    if activations.rank() != 3 || weights.rank() != 1 || activations.shape()[0] != weights.len() {
        return Err(Error::Shape(format!(
            "activations {:?} vs weights {:?}",
            activations.shape(),
            weights.shape()
        )));
    }
    let (k, h, w) = (
        activations.shape()[0],
        activations.shape()[1],
        activations.shape()[2],
    );
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for c in 0..k {
        let wc = weights.data()[c];
        for (o, &a) in out
            .iter_mut()
            .zip(&activations.data()[c * plane..(c + 1) * plane])
        {
            *o += wc * a;
        }
    }
    for v in out.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

/// Bilinear upsample with corner alignment: output corners map onto input
/// corners exactly.
pub fn bilinear_upsample(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!(
            "need a 2-D map, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if out_h < h || out_w < w {
        return Err(Error::Contract(format!(
            "target {out_h}x{out_w} below map resolution {h}x{w}"
        )));
    }
    let scale = |inn: usize, out: usize| -> Real {
        if out <= 1 {
            0.0
        } else {
            (inn as Real - 1.0) / (out as Real - 1.0)
        }
    };
    let (sy, sx) = (scale(h, out_h), scale(w, out_w));
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let fy = oy as Real * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as Real;
        for ox in 0..out_w {
            let fx = ox as Real * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as Real;
            let top = map.data()[y0 * w + x0] * (1.0 - wx) + map.data()[y0 * w + x1] * wx;
            let bot = map.data()[y1 * w + x0] * (1.0 - wx) + map.data()[y1 * w + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w], out))
}

/// Min-max normalize into [0, 1]; a constant map normalizes to all zeros.
pub fn normalize_map(map: &Tensor) -> Tensor {
    let mut lo = Real::INFINITY;
    let mut hi = Real::NEG_INFINITY;
    for &v in map.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return Tensor::zeros(map.shape());
    }
    let span = hi - lo;
    map.map(|v| (v - lo) / span)
}

/// Full Grad-CAM for one image: gradients of the pre-softmax logit of
/// `target_class` with respect to the chosen conv layer's output (the last
/// conv layer when `layer` is None).
pub fn gradcam_for_image(
    arch: &ArchSpec,
    params: &ModelParams,
    x: &Tensor,
    target_class: usize,
    layer: Option<usize>,
) -> Result<CamResult> {
    if x.batch_len()? != 1 {
        return Err(Error::Contract(format!(
            "gradcam works on single images, got batch of {}",
            x.batch_len()?
        )));
    }
    if target_class >= arch.classes {
        return Err(Error::Contract(format!(
            "class {target_class} out of range for {} classes",
            arch.classes
        )));
    }
    let mut cg = ClassifierGraph::build(arch, 1)?;
    let convs = cg.taps.conv_outputs.clone();
    if convs.is_empty() {
        return Err(Error::Contract(
            "architecture has no convolutional layer".into(),
        ));
    }
    let layer_idx = layer.unwrap_or(convs.len() - 1);
    let tap: NodeId = *convs.get(layer_idx).ok_or_else(|| {
        Error::Contract(format!(
            "conv layer {layer_idx} out of range ({} conv layers)",
            convs.len()
        ))
    })?;

    cg.forward(params, x, None)?;
    let act_full = cg.graph.value(tap)?.clone();

    // Seed the backward pass with the one-hot logit of the target class.
    let mut seed = vec![0.0; arch.classes];
    seed[target_class] = 1.0;
    let seed = Tensor::from_parts(vec![1, arch.classes], seed);
    let (_, taps) = cg.graph.backward_from(cg.taps.logits, &seed, &[tap])?;
    let grad_full = &taps[0];

    let (k, fh, fw) = (
        act_full.shape()[1],
        act_full.shape()[2],
        act_full.shape()[3],
    );
    let act = Tensor::from_parts(vec![k, fh, fw], act_full.data().to_vec());
    let grad = Tensor::from_parts(vec![k, fh, fw], grad_full.data().to_vec());

    let weights = channel_weights(&act, &grad)?;
    let raw = cam(&act, &weights)?;
    let [_, ih, iw] = arch.input_shape;
    let up = bilinear_upsample(&raw, ih, iw)?;
    Ok(CamResult {
        map: raw,
        upsampled: normalize_map(&up),
        target_class,
        layer_id: format!("conv{}", layer_idx + 1),
    })
}

/// Write the normalized heatmap as an 8-bit PGM (P5) plus a companion CSV of
/// the raw normalized values.
pub fn render(result: &CamResult, pgm_path: &Path, csv_path: &Path) -> Result<()> {
    let (h, w) = (result.upsampled.shape()[0], result.upsampled.shape()[1]);
    let mut pgm = format!("P5\n{w} {h}\n255\n").into_bytes();
    pgm.extend(
        result
            .upsampled
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(pgm_path, pgm).map_err(|e| Error::io(pgm_path, e))?;

    let mut csv = String::new();
    for row in result.upsampled.data().chunks_exact(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))
}

/// Re-parse a heatmap CSV written by [`render`].
pub fn parse_heatmap_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = 0usize;
    let mut cols = 0usize;
    let mut data = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<Real> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>().map(|v| v as Real))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Contract(format!("bad heatmap csv cell: {e}")))?;
        if cols == 0 {
            cols = vals.len();
        }
        rows += 1;
        data.extend(vals);
    }
    Tensor::new(vec![rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::rng::Rng;

    fn t(shape: &[usize], data: Vec<Real>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn channel_weights_examples() {
        let act = Tensor::zeros(&[2, 2, 2]);
        let ones = Tensor::full(&[2, 2, 2], 1.0);
        let w = channel_weights(&act, &ones).unwrap();
        assert_eq!(w.data(), &[1.0, 1.0]);

        let zeros = Tensor::zeros(&[2, 2, 2]);
        let w = channel_weights(&act, &zeros).unwrap();
        assert_eq!(w.data(), &[0.0, 0.0]);

        let g = t(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let a = Tensor::zeros(&[1, 2, 2]);
        let w = channel_weights(&a, &g).unwrap();
        assert_eq!(w.data(), &[2.5]);
    }

    #[test]
    fn channel_weights_linear_in_grads() {
        let mut rng = Rng::new(3);
        let a = Tensor::zeros(&[3, 2, 2]);
        let g1 = t(
            &[3, 2, 2],
            (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );
        let g2 = t(
            &[3, 2, 2],
            (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );
        let mix = g1.zip_map(&g2, |x, y| 2.0 * x + 3.0 * y).unwrap();
        let w1 = channel_weights(&a, &g1).unwrap();
        let w2 = channel_weights(&a, &g2).unwrap();
        let wm = channel_weights(&a, &mix).unwrap();
        for c in 0..3 {
            let expect = 2.0 * w1.data()[c] + 3.0 * w2.data()[c];
            assert!((wm.data()[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cam_examples() {
        let act = t(&[1, 2, 2], vec![-1.0, 2.0, 0.0, 3.0]);
        let w = Tensor::from_vec(vec![1.0]);
        let m = cam(&act, &w).unwrap();
        assert_eq!(m.data(), &[0.0, 2.0, 0.0, 3.0]);

        let w0 = Tensor::from_vec(vec![0.0]);
        assert_eq!(cam(&act, &w0).unwrap().data(), &[0.0; 4]);

        // opposite weights on equal channels cancel before the relu
        let act2 = t(&[2, 1, 2], vec![1.0, 2.0, 1.0, 2.0]);
        let w2 = Tensor::from_vec(vec![1.0, -1.0]);
        assert_eq!(cam(&act2, &w2).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn cam_is_nonnegative_on_random_inputs() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let act = t(
                &[4, 3, 3],
                (0..36).map(|_| rng.uniform(-2.0, 2.0)).collect(),
            );
            let w = Tensor::from_vec((0..4).map(|_| rng.uniform(-2.0, 2.0)).collect());
            let m = cam(&act, &w).unwrap();
            assert!(m.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn upsample_preserves_corner_maximum() {
        let m = t(&[2, 2], vec![0.0, 1.0, 0.0, 0.0]);
        let up = bilinear_upsample(&m, 4, 4).unwrap();
        assert_eq!(up.data()[3], 1.0); // top-right corner survives
        let mx = up.data().iter().cloned().fold(0.0, Real::max);
        assert_eq!(mx, 1.0);
    }

    #[test]
    fn constant_map_normalizes_to_zero() {
        let m = Tensor::full(&[3, 3], 0.42);
        let n = normalize_map(&m);
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_scale_invariance() {
        // scaling gradients by c > 0 leaves the normalized heatmap unchanged
        let mut rng = Rng::new(11);
        let act = t(
            &[3, 4, 4],
            (0..48).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );
        let grads = t(
            &[3, 4, 4],
            (0..48).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );
        let scaled = grads.map(|v| 7.5 * v);

        let base = {
            let w = channel_weights(&act, &grads).unwrap();
            normalize_map(&bilinear_upsample(&cam(&act, &w).unwrap(), 8, 8).unwrap())
        };
        let big = {
            let w = channel_weights(&act, &scaled).unwrap();
            normalize_map(&bilinear_upsample(&cam(&act, &w).unwrap(), 8, 8).unwrap())
        };
        for (a, b) in base.data().iter().zip(big.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gradcam_end_to_end_on_small_cnn() {
        let arch = ArchSpec::small_cnn(1, 8, 8, 2).unwrap();
        let params = build_model(&arch, 4).unwrap();
        let mut rng = Rng::new(9);
        let x = t(&[1, 1, 8, 8], (0..64).map(|_| rng.next_real()).collect());
        let result = gradcam_for_image(&arch, &params, &x, 1, None).unwrap();
        assert_eq!(result.layer_id, "conv2");
        assert!(result.map.data().iter().all(|&v| v >= 0.0));
        assert_eq!(result.upsampled.shape(), &[8, 8]);
        assert!(result
            .upsampled
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn render_roundtrip_via_csv() {
        let dir = std::env::temp_dir().join("advlab_cam_test");
        std::fs::create_dir_all(&dir).unwrap();
        let arch = ArchSpec::small_cnn(1, 8, 8, 2).unwrap();
        let params = build_model(&arch, 4).unwrap();
        let mut rng = Rng::new(10);
        let x = t(&[1, 1, 8, 8], (0..64).map(|_| rng.next_real()).collect());
        let result = gradcam_for_image(&arch, &params, &x, 0, None).unwrap();
        let pgm = dir.join("cam.pgm");
        let csv = dir.join("cam.csv");
        render(&result, &pgm, &csv).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n"));
        let back = parse_heatmap_csv(&csv).unwrap();
        assert_eq!(back.shape(), result.upsampled.shape());
        for (a, b) in back.data().iter().zip(result.upsampled.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
