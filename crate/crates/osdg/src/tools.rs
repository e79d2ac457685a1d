//! Inspection utilities: augmentation preview strips and raw feature
//! export for offline analysis.

use std::path::{Path, PathBuf};

use ndarray::IxDyn;

use crate::autodiff::{Arr, Graph};
use crate::content::{extract_edges, suppress_background, EdgeOperator, MaskProvider};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::imgio;
use crate::model::Model;
use crate::style::Mode;
use crate::types::SampleRecord;

const SEPARATOR_WIDTH: usize = 2;
const SEPARATOR_GRAY: f64 = 1.0;

fn hstack_panels(panels: &[&Arr]) -> Arr {
    let (h, w) = (panels[0].shape()[1], panels[0].shape()[2]);
    let total_w = panels.len() * w + (panels.len() - 1) * SEPARATOR_WIDTH;
    let mut out = Arr::from_elem(IxDyn(&[3, h, total_w]), SEPARATOR_GRAY);
    for (pi, panel) in panels.iter().enumerate() {
        let x0 = pi * (w + SEPARATOR_WIDTH);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[c, y, x0 + x]] = panel[[c, y, x]];
                }
            }
        }
    }
    out
}

/// Write original / background-suppressed / edge-map triptychs for the
/// first `n` samples. Returns the written file paths; `n` larger than the
/// sample list is clipped (the caller may warn).
pub fn preview_aug(
    samples: &[SampleRecord],
    mask_provider: &MaskProvider,
    edge_op: &EdgeOperator,
    fill: [f64; 3],
    out_dir: &Path,
    n: usize,
) -> Result<Vec<PathBuf>> {
    if samples.is_empty() {
        return Err(Error::data("no samples to preview"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let take = n.min(samples.len());
    let mut written = Vec::with_capacity(take);
    for s in samples.iter().take(take) {
        let masked = suppress_background(s, mask_provider, fill)?;
        let edged = extract_edges(s, edge_op)?;
        let edge = edged.edge.expect("edge view");
        let strip = hstack_panels(&[&s.image, &masked.image, &edge]);
        let path = out_dir.join(format!("{}_triptych.png", s.id));
        imgio::save_rgb(&path, &strip)?;
        written.push(path);
    }
    Ok(written)
}

/// Pooled feature vectors for a sample list, in input order.
pub fn extract_features(
    model: &Model,
    normalizer: &Normalizer,
    samples: &[SampleRecord],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    if samples.is_empty() {
        return Err(Error::data("no samples to featurize"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let c3 = model.cfg.widths[2];
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size) {
        let (h, w) = (chunk[0].image.shape()[1], chunk[0].image.shape()[2]);
        let mut batch = Arr::zeros(IxDyn(&[chunk.len(), 3, h, w]));
        for (bi, s) in chunk.iter().enumerate() {
            let img = normalizer.apply(&s.image);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        batch[[bi, c, y, x]] = img[[c, y, x]];
                    }
                }
            }
        }
        let mut g = Graph::new();
        let vars = model.params.to_graph_frozen(&mut g);
        let x = g.constant(batch);
        let fwd = model.forward(&mut g, &vars, x, Mode::Eval, None)?;
        let pooled = g.value(fwd.pooled);
        for bi in 0..chunk.len() {
            out.push((0..c3).map(|k| pooled[[bi, k]]).collect());
        }
    }
    Ok(out)
}

/// Write a CSV of pooled features: one row per sample, columns
/// id, domain, label, f0..f{C'-1}.
pub fn export_features(
    model: &Model,
    normalizer: &Normalizer,
    samples: &[SampleRecord],
    batch_size: usize,
    out_path: &Path,
) -> Result<usize> {
    let features = extract_features(model, normalizer, samples, batch_size)?;
    let c3 = model.cfg.widths[2];
    let mut text = String::from("id,domain,label");
    for k in 0..c3 {
        text.push_str(&format!(",f{k}"));
    }
    text.push('\n');
    for (s, f) in samples.iter().zip(features.iter()) {
        text.push_str(&format!("{},{},{}", s.id, s.domain, s.label));
        for v in f {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    std::fs::write(out_path, text).map_err(|e| Error::io(out_path, e))?;
    Ok(samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{benchmark_spec, generate_synthetic};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn samples() -> Vec<SampleRecord> {
        generate_synthetic(&benchmark_spec(16, 2, 5)).unwrap()
    }

    #[test]
    fn preview_writes_one_triptych_per_sample() {
        let dir = tempfile::tempdir().unwrap();
        let s = samples();
        let op = EdgeOperator::default();
        let paths = preview_aug(&s[..4], &MaskProvider::Oracle, &op, [0.5; 3], dir.path(), 4)
            .unwrap();
        assert_eq!(paths.len(), 4);
        for p in &paths {
            assert!(p.exists());
        }
        // triptych geometry: 3 panels of 16 plus 2 separators of 2
        let img = crate::imgio::load_rgb(&paths[0]).unwrap();
        assert_eq!(img.shape(), &[3, 16, 52]);
    }

    #[test]
    fn preview_clips_oversized_requests() {
        let dir = tempfile::tempdir().unwrap();
        let s = samples();
        let op = EdgeOperator::default();
        let paths = preview_aug(&s[..2], &MaskProvider::Oracle, &op, [0.5; 3], dir.path(), 99)
            .unwrap();
        assert_eq!(paths.len(), 2);
    }

    #[test]
    fn all_foreground_preview_keeps_the_original_panel() {
        let dir = tempfile::tempdir().unwrap();
        let s = samples();
        let op = EdgeOperator::default();
        let paths = preview_aug(
            &s[..1],
            &MaskProvider::AllForeground,
            &op,
            [0.5; 3],
            dir.path(),
            1,
        )
        .unwrap();
        let img = crate::imgio::load_rgb(&paths[0]).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    assert_eq!(img[[c, y, x]], img[[c, y, 18 + x]], "panels must match");
                }
            }
        }
    }

    #[test]
    fn export_writes_n_rows_with_feature_columns() {
        let dir = tempfile::tempdir().unwrap();
        let s = samples();
        let norm = Normalizer::fit(&s).unwrap();
        let cfg = ModelConfig {
            widths: [4, 4, 8],
            gn_groups: 2,
            num_known: 4,
        };
        let model = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let path = dir.path().join("features.csv");
        let rows = export_features(&model, &norm, &s[..10], 4, &path).unwrap();
        assert_eq!(rows, 10);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 11, "header plus one row per sample");
        for line in &lines {
            assert_eq!(line.split(',').count(), 8 + 3, "C' + 3 columns");
        }
        // determinism: the same checkpoint exports the same bytes
        let path2 = dir.path().join("features2.csv");
        export_features(&model, &norm, &s[..10], 7, &path2).unwrap();
        let text2 = std::fs::read_to_string(&path2).unwrap();
        assert_eq!(text, text2, "batch size must not leak into the export");
    }
}
