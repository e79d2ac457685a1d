//! Content-side augmentations: background suppression through pluggable
//! mask providers, and edge-map extraction.

use std::path::PathBuf;

use ndarray::IxDyn;

use crate::autodiff::Arr;
use crate::error::{Error, Result};
use crate::imgio;
use crate::types::SampleRecord;

/// Source of foreground masks. `Oracle` uses the exact mask carried by the
/// sample (synthetic data). `SidecarFiles` reads
/// `<root>/masks/<domain>/<class>/<id>.png` (nonzero = foreground).
/// `AllForeground` is the trivial fallback that suppresses nothing.
#[derive(Debug, Clone)]
pub enum MaskProvider {
    Oracle,
    SidecarFiles { root: PathBuf },
    AllForeground,
}

impl MaskProvider {
    /// Binary HxW mask for the sample, 1 = foreground.
    pub fn mask_for(&self, sample: &SampleRecord) -> Result<Arr> {
        let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
        match self {
            MaskProvider::Oracle => sample.mask.clone().ok_or_else(|| {
                Error::data(format!("sample {} carries no oracle mask", sample.id))
            }),
            MaskProvider::SidecarFiles { root } => {
                let path = root
                    .join("masks")
                    .join(&sample.domain)
                    .join(&sample.class_name)
                    .join(format!("{}.png", sample.id));
                if !path.exists() {
                    return Err(Error::data(format!(
                        "missing sidecar mask for sample {}: {}",
                        sample.id,
                        path.display()
                    )));
                }
                let gray = imgio::load_gray(&path)?;
                if gray.shape() != [h, w] {
                    return Err(Error::shape(format!(
                        "sidecar mask for {} is {:?}, image is {}x{}",
                        sample.id,
                        gray.shape(),
                        h,
                        w
                    )));
                }
                Ok(gray.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }))
            }
            MaskProvider::AllForeground => Ok(Arr::ones(IxDyn(&[h, w]))),
        }
    }
}

/// Replace background pixels with the per-channel fill color:
/// image*mask + fill*(1-mask). The fill is the dataset normalization mean,
/// so suppressed regions are zero after normalization. Label and domain are
/// untouched; the mask used is recorded on the returned sample.
pub fn suppress_background(
    sample: &SampleRecord,
    provider: &MaskProvider,
    fill: [f64; 3],
) -> Result<SampleRecord> {
    sample.validate_shapes()?;
    let mask = provider.mask_for(sample)?;
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let mut out = sample.clone();
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let m = mask[[y, x]];
                out.image[[c, y, x]] = sample.image[[c, y, x]] * m + fill[c] * (1.0 - m);
            }
        }
    }
    out.mask = Some(mask);
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum EdgeKind {
    /// Grayscale conversion, optional box blur, central-difference
    /// gradients, magnitude.
    GradientMagnitude,
    /// Precomputed maps at `<root>/edges/<domain>/<class>/<id>.png`.
    ExternalFiles { root: PathBuf },
}

#[derive(Debug, Clone)]
pub struct EdgeOperator {
    pub kind: EdgeKind,
    pub blur_radius: usize,
    pub normalize: bool,
}

impl Default for EdgeOperator {
    fn default() -> Self {
        Self {
            kind: EdgeKind::GradientMagnitude,
            blur_radius: 0,
            normalize: true,
        }
    }
}

fn box_blur(gray: &Arr, radius: usize) -> Arr {
    let (h, w) = (gray.shape()[0], gray.shape()[1]);
    let r = radius as isize;
    let norm = (2 * radius + 1) as f64;
    // separable passes with replicated borders
    let mut tmp = Arr::zeros(IxDyn(&[h, w]));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                acc += gray[[y, xx]];
            }
            tmp[[y, x]] = acc / norm;
        }
    }
    let mut out = Arr::zeros(IxDyn(&[h, w]));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                acc += tmp[[yy, x]];
            }
            out[[y, x]] = acc / norm;
        }
    }
    out
}

impl EdgeOperator {
    /// Edge map of a 3xHxW image in [0,1]; the result is 3xHxW in [0,1]
    /// (the single-channel map replicated). Purely deterministic.
    pub fn apply(&self, image: &Arr) -> Result<Arr> {
        if image.ndim() != 3 || image.shape()[0] != 3 {
            return Err(Error::shape(format!(
                "edge operator expects 3xHxW, got {:?}",
                image.shape()
            )));
        }
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let mut gray = Arr::zeros(IxDyn(&[h, w]));
        for y in 0..h {
            for x in 0..w {
                gray[[y, x]] = 0.299 * image[[0, y, x]]
                    + 0.587 * image[[1, y, x]]
                    + 0.114 * image[[2, y, x]];
            }
        }
        if self.blur_radius > 0 {
            gray = box_blur(&gray, self.blur_radius);
        }
        let mut mag = Arr::zeros(IxDyn(&[h, w]));
        let mut max_mag = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let xl = x.saturating_sub(1);
                let xr = (x + 1).min(w - 1);
                let yu = y.saturating_sub(1);
                let yd = (y + 1).min(h - 1);
                let gx = (gray[[y, xr]] - gray[[y, xl]]) / 2.0;
                let gy = (gray[[yd, x]] - gray[[yu, x]]) / 2.0;
                let m = (gx * gx + gy * gy).sqrt();
                mag[[y, x]] = m;
                max_mag = max_mag.max(m);
            }
        }
        if self.normalize && max_mag > 0.0 {
            mag.mapv_inplace(|v| v / max_mag);
        }
        let mut out = Arr::zeros(IxDyn(&[3, h, w]));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[c, y, x]] = mag[[y, x]];
                }
            }
        }
        Ok(out)
    }

    fn load_external(&self, root: &std::path::Path, sample: &SampleRecord) -> Result<Arr> {
        let path = root
            .join("edges")
            .join(&sample.domain)
            .join(&sample.class_name)
            .join(format!("{}.png", sample.id));
        if !path.exists() {
            return Err(Error::data(format!(
                "missing sidecar edge map for sample {}: {}",
                sample.id,
                path.display()
            )));
        }
        let gray = imgio::load_gray(&path)?;
        let (h, w) = (gray.shape()[0], gray.shape()[1]);
        let mut out = Arr::zeros(IxDyn(&[3, h, w]));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[c, y, x]] = gray[[y, x]];
                }
            }
        }
        Ok(out)
    }
}

/// Compute (or load) the sample's edge map and cache it on the record.
pub fn extract_edges(sample: &SampleRecord, op: &EdgeOperator) -> Result<SampleRecord> {
    sample.validate_shapes()?;
    let edge = match &op.kind {
        EdgeKind::GradientMagnitude => op.apply(&sample.image)?,
        EdgeKind::ExternalFiles { root } => op.load_external(root, sample)?,
    };
    let mut out = sample.clone();
    out.edge = Some(edge);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_with(image: Arr, mask: Option<Arr>) -> SampleRecord {
        SampleRecord {
            id: "s0".to_string(),
            image,
            label: 1,
            class_name: "square".to_string(),
            domain: "src_a".to_string(),
            mask,
            edge: None,
        }
    }

    fn checker_image(h: usize, w: usize) -> Arr {
        Arr::from_shape_fn(IxDyn(&[3, h, w]), |ix| {
            if (ix[1] + ix[2]) % 2 == 0 {
                0.8
            } else {
                0.2
            }
        })
    }

    #[test]
    fn all_ones_mask_is_a_no_op() {
        let img = checker_image(6, 6);
        let s = sample_with(img.clone(), Some(Arr::ones(IxDyn(&[6, 6]))));
        let out = suppress_background(&s, &MaskProvider::Oracle, [0.5, 0.5, 0.5]).unwrap();
        assert_eq!(out.image, img);
        assert_eq!(out.label, s.label);
        assert_eq!(out.domain, s.domain);
    }

    #[test]
    fn all_zeros_mask_fills_everything() {
        let s = sample_with(checker_image(4, 4), Some(Arr::zeros(IxDyn(&[4, 4]))));
        let fill = [0.1, 0.2, 0.3];
        let out = suppress_background(&s, &MaskProvider::Oracle, fill).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(out.image[[c, y, x]], fill[c]);
                }
            }
        }
    }

    #[test]
    fn oracle_mask_splits_fill_and_original_pixelwise() {
        let mut mask = Arr::zeros(IxDyn(&[5, 5]));
        for y in 1..4 {
            for x in 2..4 {
                mask[[y, x]] = 1.0;
            }
        }
        let img = checker_image(5, 5);
        let s = sample_with(img.clone(), Some(mask.clone()));
        let fill = [0.4, 0.5, 0.6];
        let out = suppress_background(&s, &MaskProvider::Oracle, fill).unwrap();
        for c in 0..3 {
            for y in 0..5 {
                for x in 0..5 {
                    let expect = if mask[[y, x]] > 0.5 { img[[c, y, x]] } else { fill[c] };
                    assert_eq!(out.image[[c, y, x]], expect, "pixel ({},{},{})", c, y, x);
                }
            }
        }
    }

    #[test]
    fn suppression_is_idempotent() {
        let mut mask = Arr::ones(IxDyn(&[4, 4]));
        mask[[0, 0]] = 0.0;
        mask[[3, 2]] = 0.0;
        let s = sample_with(checker_image(4, 4), Some(mask));
        let fill = [0.25, 0.25, 0.25];
        let once = suppress_background(&s, &MaskProvider::Oracle, fill).unwrap();
        let twice = suppress_background(&once, &MaskProvider::Oracle, fill).unwrap();
        assert_eq!(once.image, twice.image);
    }

    #[test]
    fn all_foreground_provider_changes_nothing() {
        let s = sample_with(checker_image(4, 4), None);
        let out = suppress_background(&s, &MaskProvider::AllForeground, [0.0, 0.0, 0.0]).unwrap();
        assert_eq!(out.image, s.image);
    }

    #[test]
    fn oracle_without_mask_is_a_data_error() {
        let s = sample_with(checker_image(4, 4), None);
        let err = suppress_background(&s, &MaskProvider::Oracle, [0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("s0"), "error should name the sample: {}", err);
    }

    #[test]
    fn sidecar_masks_load_and_missing_files_name_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let mask_dir = root.join("masks/src_a/square");
        std::fs::create_dir_all(&mask_dir).unwrap();
        let mut mask = Arr::zeros(IxDyn(&[4, 4]));
        mask[[1, 1]] = 1.0;
        mask[[2, 2]] = 1.0;
        imgio::save_gray(&mask_dir.join("s0.png"), &mask).unwrap();

        let provider = MaskProvider::SidecarFiles { root: root.to_path_buf() };
        let s = sample_with(checker_image(4, 4), None);
        let loaded = provider.mask_for(&s).unwrap();
        assert_eq!(loaded, mask);

        let mut other = s.clone();
        other.id = "missing".to_string();
        let err = provider.mask_for(&other).unwrap_err();
        assert!(err.to_string().contains("missing"), "{}", err);
    }

    #[test]
    fn constant_image_has_zero_edges() {
        let img = Arr::from_elem(IxDyn(&[3, 6, 6]), 0.7);
        let edges = EdgeOperator::default().apply(&img).unwrap();
        assert!(edges.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_responds_only_adjacent_to_the_step() {
        let w = 10;
        let img = Arr::from_shape_fn(IxDyn(&[3, 6, w]), |ix| if ix[2] >= w / 2 { 1.0 } else { 0.0 });
        let edges = EdgeOperator::default().apply(&img).unwrap();
        for y in 0..6 {
            for x in 0..w {
                let expect_nonzero = x == w / 2 - 1 || x == w / 2;
                assert_eq!(
                    edges[[0, y, x]] > 0.0,
                    expect_nonzero,
                    "column {} response {}",
                    x,
                    edges[[0, y, x]]
                );
            }
        }
    }

    #[test]
    fn edges_are_invariant_to_constant_shift() {
        let img = checker_image(6, 6).mapv(|v| v * 0.5); // keep room for the shift
        let shifted = img.mapv(|v| v + 0.1);
        let op = EdgeOperator::default();
        let a = op.apply(&img).unwrap();
        let b = op.apply(&shifted).unwrap();
        let max_diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "gradient should kill constants, drift {}", max_diff);
    }

    #[test]
    fn binary_circle_edges_match_the_mask_difference_oracle() {
        // flat rendering: foreground 1, background 0, no anti-aliasing
        let n = 24usize;
        let (c, r) = (n as f64 / 2.0, n as f64 * 0.3);
        let mask = Arr::from_shape_fn(IxDyn(&[n, n]), |ix| {
            let (dy, dx) = (ix[0] as f64 + 0.5 - c, ix[1] as f64 + 0.5 - c);
            if (dy * dy + dx * dx).sqrt() <= r {
                1.0
            } else {
                0.0
            }
        });
        let img = Arr::from_shape_fn(IxDyn(&[3, n, n]), |ix| mask[[ix[1], ix[2]]]);
        let edges = EdgeOperator::default().apply(&img).unwrap();

        // predicted support: pixels whose clamped left/right or up/down
        // neighbors differ in the mask
        for y in 0..n {
            for x in 0..n {
                let xl = x.saturating_sub(1);
                let xr = (x + 1).min(n - 1);
                let yu = y.saturating_sub(1);
                let yd = (y + 1).min(n - 1);
                let expect = mask[[y, xl]] != mask[[y, xr]] || mask[[yu, x]] != mask[[yd, x]];
                assert_eq!(
                    edges[[0, y, x]] > 0.0,
                    expect,
                    "pixel ({},{}) edge {} oracle {}",
                    y,
                    x,
                    edges[[0, y, x]],
                    expect
                );
            }
        }
    }

    #[test]
    fn normalized_output_peaks_at_one_and_output_stays_in_unit_range() {
        let img = checker_image(8, 8);
        let normed = EdgeOperator::default().apply(&img).unwrap();
        let peak = normed.iter().cloned().fold(0.0f64, f64::max);
        assert!((peak - 1.0).abs() < 1e-12);

        let raw = EdgeOperator {
            normalize: false,
            ..EdgeOperator::default()
        }
        .apply(&img)
        .unwrap();
        assert!(raw.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn blur_widens_the_step_response() {
        let w = 12;
        let img = Arr::from_shape_fn(IxDyn(&[3, 6, w]), |ix| if ix[2] >= w / 2 { 1.0 } else { 0.0 });
        let blurred = EdgeOperator {
            blur_radius: 1,
            ..EdgeOperator::default()
        }
        .apply(&img)
        .unwrap();
        let nonzero_cols = (0..w)
            .filter(|&x| blurred[[0, 3, x]] > 1e-12)
            .count();
        assert!(nonzero_cols > 2, "blur should spread the response, got {}", nonzero_cols);
    }

    #[test]
    fn extract_edges_caches_on_the_record_and_preserves_fields() {
        let s = sample_with(checker_image(5, 5), None);
        let out = extract_edges(&s, &EdgeOperator::default()).unwrap();
        assert!(out.edge.is_some());
        assert_eq!(out.label, s.label);
        assert_eq!(out.domain, s.domain);
        assert_eq!(out.image, s.image, "the original image is untouched");

        let again = extract_edges(&out, &EdgeOperator::default()).unwrap();
        assert_eq!(again.edge, out.edge, "deterministic recomputation");
    }

    #[test]
    fn external_edge_files_load_by_layout() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let edge_dir = root.join("edges/src_a/square");
        std::fs::create_dir_all(&edge_dir).unwrap();
        let stored = Arr::from_shape_fn(IxDyn(&[4, 4]), |ix| if ix[0] == 2 { 1.0 } else { 0.0 });
        imgio::save_gray(&edge_dir.join("s0.png"), &stored).unwrap();

        let op = EdgeOperator {
            kind: EdgeKind::ExternalFiles { root: root.to_path_buf() },
            ..EdgeOperator::default()
        };
        let s = sample_with(checker_image(4, 4), None);
        let out = extract_edges(&s, &op).unwrap();
        let edge = out.edge.unwrap();
        assert_eq!(edge.shape(), &[3, 4, 4]);
        assert!(edge[[0, 2, 1]] > 0.9);
        assert!(edge[[1, 0, 0]] < 0.1);
    }
}
