//! Minimal PGM/PPM IO (binary P5/P6, maxval 255) and tiled filter-grid
//! export for visual inspection of banks and learned filters.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Layer, Model};
use crate::tensor::Tensor;
use crate::transforms::BasisBank;

/// Read a binary PGM (P5) or PPM (P6) file into a `[C,H,W]` tensor in
/// `[0,1]`.
pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", path.display(), e)))?
        .read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data(format!("{}: truncated header", path.display())));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes)?;
    let channels = match magic.as_str() {
        "P5" => 1usize,
        "P6" => 3usize,
        other => {
            return Err(Error::Data(format!(
                "{}: unsupported PNM magic '{}' (want P5 or P6)",
                path.display(),
                other
            )))
        }
    };
    let w: usize = token(&bytes)?.parse().map_err(|_| Error::Data("bad PNM width".into()))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| Error::Data("bad PNM height".into()))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| Error::Data("bad PNM maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Data(format!("{}: only maxval 255 is supported", path.display())));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::Data(format!("{}: truncated pixel payload", path.display())));
    }
    let raw = &bytes[pos..pos + need];
    // Interleaved rows -> planar [C,H,W].
    let mut data = vec![0.0; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = f64::from(raw[(y * w + x) * channels + c]) / 255.0;
            }
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

/// Write a `[C,H,W]` tensor in `[0,1]` as PGM (C=1) or PPM (C=3).
pub fn write_pnm(image: &Tensor, path: &Path) -> Result<()> {
    let s = &image.shape;
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected [C,H,W], got {:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let magic = match c {
        1 => "P5",
        3 => "P6",
        other => return Err(Error::Usage(format!("cannot write {}-channel PNM", other))),
    };
    let mut out = format!("{}\n{} {}\n255\n", magic, w, h).into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = image.data[(ch * h + y) * w + x];
                out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Sidecar metadata for a rendered grid: the affine map used to quantize
/// float values to gray levels, plus the tile layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSidecar {
    pub min: f64,
    pub max: f64,
    pub rows: usize,
    pub cols: usize,
    pub tile: usize,
    pub gap: usize,
}

/// Tile a list of rows x cols planes (each `tile x tile`) into one image,
/// mapping values affinely to `[0,255]` over the global min/max.
pub fn render_grid(planes: &[Vec<f64>], rows: usize, cols: usize, tile: usize) -> (Tensor, GridSidecar) {
    assert_eq!(planes.len(), rows * cols);
    let gap = 1usize;
    let h = rows * tile + (rows + 1) * gap;
    let w = cols * tile + (cols + 1) * gap;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for p in planes {
        for &v in p {
            min = min.min(v);
            max = max.max(v);
        }
    }
    if !min.is_finite() || min == max {
        min = 0.0;
        max = 1.0;
    }
    let scale = 1.0 / (max - min);
    // Mid-gray separators.
    let mut data = vec![0.5; h * w];
    for r in 0..rows {
        for c in 0..cols {
            let plane = &planes[r * cols + c];
            let oy = gap + r * (tile + gap);
            let ox = gap + c * (tile + gap);
            for y in 0..tile {
                for x in 0..tile {
                    data[(oy + y) * w + (ox + x)] = (plane[y * tile + x] - min) * scale;
                }
            }
        }
    }
    let image = Tensor::new(vec![1, h, w], data).unwrap();
    (image, GridSidecar { min, max, rows, cols, tile, gap })
}

/// Export a bank as one PGM per nothing-fancy grid: one row per branch, one
/// column per basis function, with a `.json` sidecar recording min/max.
pub fn export_bank_grid(bank: &BasisBank, path: &Path) -> Result<GridSidecar> {
    let kk = bank.k * bank.k;
    let mut planes = Vec::with_capacity(bank.branches() * bank.n_basis);
    for b in 0..bank.branches() {
        for i in 0..bank.n_basis {
            planes.push(bank.branch(b)[i * kk..(i + 1) * kk].to_vec());
        }
    }
    let (image, sidecar) = render_grid(&planes, bank.branches(), bank.n_basis, bank.k);
    write_pnm(&image, path)?;
    let sidecar_path = path.with_extension("json");
    std::fs::write(&sidecar_path, crate::util::canonical_json(&sidecar)?)?;
    Ok(sidecar)
}

/// Export the synthesized filters of the first TAConv layer: one row per
/// branch, one column per output channel (input channel 0).
pub fn export_model_filters(model: &Model, path: &Path) -> Result<GridSidecar> {
    let layer = model
        .layers
        .iter()
        .find_map(|l| match l {
            Layer::TaConv(t) => Some(t),
            _ => None,
        })
        .ok_or_else(|| Error::Usage("model has no TAConv layer to render".into()))?;
    let bank = &layer.bank;
    let kk = bank.k * bank.k;
    let out_ch = layer.w.shape[0];
    let n_basis = bank.n_basis;
    let mut planes = Vec::with_capacity(bank.branches() * out_ch);
    for b in 0..bank.branches() {
        let stack = bank.branch_stack(b);
        for o in 0..out_ch {
            // w[o, 0, :]
            let w = &layer.w.data[o * layer.w.shape[1] * n_basis..o * layer.w.shape[1] * n_basis + n_basis];
            let kernel = crate::basis::synthesize_kernel(w, &stack)?;
            debug_assert_eq!(kernel.len(), kk);
            planes.push(kernel);
        }
    }
    let (image, sidecar) = render_grid(&planes, bank.branches(), out_ch, bank.k);
    write_pnm(&image, path)?;
    std::fs::write(path.with_extension("json"), crate::util::canonical_json(&sidecar)?)?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{eval_basis, make_grid, BasisSpec};
    use crate::transforms::{build_transform_bank, default_branch_specs, TransformKind};

    #[test]
    fn pnm_roundtrip_gray_and_color() {
        let dir = tempfile::tempdir().unwrap();
        let gray = Tensor::new(vec![1, 2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]).unwrap();
        let p = dir.path().join("g.pgm");
        write_pnm(&gray, &p).unwrap();
        let back = read_pnm(&p).unwrap();
        assert_eq!(back.shape, gray.shape);
        for (a, b) in back.data.iter().zip(&gray.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        let color = Tensor::new(vec![3, 2, 2], (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        let p = dir.path().join("c.ppm");
        write_pnm(&color, &p).unwrap();
        let back = read_pnm(&p).unwrap();
        assert_eq!(back.shape, color.shape);
    }

    #[test]
    fn grid_pixels_recomputable_from_sidecar() {
        let planes: Vec<Vec<f64>> = vec![
            (0..9).map(|i| i as f64 * 0.3 - 1.0).collect(),
            (0..9).map(|i| (9 - i) as f64 * 0.1).collect(),
        ];
        let (image, sc) = render_grid(&planes, 1, 2, 3);
        // Invert the affine map on a tile pixel and compare to the raw float.
        let w = image.shape[2];
        for (ci, plane) in planes.iter().enumerate() {
            let oy = sc.gap;
            let ox = sc.gap + ci * (sc.tile + sc.gap);
            for y in 0..3 {
                for x in 0..3 {
                    let gray = (image.data[(oy + y) * w + ox + x] * 255.0).round();
                    let expected = ((plane[y * 3 + x] - sc.min) / (sc.max - sc.min) * 255.0).round();
                    assert!((gray - expected).abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn model_filter_export_writes_grid_and_sidecar() {
        use crate::layers::{desk_network, Model, ModelMeta};
        let model = Model::new(
            desk_network(1, 4, Some(TransformKind::Elastic), 3),
            ModelMeta { name: "m".into(), taconv: Some(TransformKind::Elastic) },
            3,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("filters.pgm");
        let sc = export_model_filters(&model, &path).unwrap();
        assert_eq!(sc.rows, 5); // identity + four branches
        assert_eq!(sc.cols, 12); // first-layer output channels
        assert!(path.exists());
        assert!(path.with_extension("json").exists());

        // A plain CNN has nothing to render.
        let plain = Model::new(
            desk_network(1, 4, None, 3),
            ModelMeta { name: "p".into(), taconv: None },
            3,
        )
        .unwrap();
        assert!(export_model_filters(&plain, &dir.path().join("x.pgm")).is_err());
    }

    #[test]
    fn identity_bank_grid_has_identical_rows() {
        let spec = BasisSpec::with_count(5, 1.5, 4).unwrap();
        let base = eval_basis(&spec, &make_grid(5).unwrap()).unwrap();
        let zero_alpha = vec![crate::transforms::TransformSpec::RotationScaling {
            alpha: 0.0,
            theta: 0.5,
        }];
        let bank = build_transform_bank(&base, &zero_alpha).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.pgm");
        export_bank_grid(&bank, &path).unwrap();
        let img = read_pnm(&path).unwrap();
        let (h, w) = (img.shape[1], img.shape[2]);
        // Two branch rows: row strip 1 equals row strip 2 pixel-for-pixel.
        let strip = (h - 3) / 2; // tile height per row (h = 2*tile + 3 gaps)
        for y in 0..strip {
            for x in 0..w {
                assert_eq!(
                    img.data[(1 + y) * w + x],
                    img.data[(2 + strip + y) * w + x]
                );
            }
        }

        // A real transform bank renders, too.
        let specs = default_branch_specs(TransformKind::GaussianBlur, 3, 0);
        let bank = build_transform_bank(&base, &specs).unwrap();
        export_bank_grid(&bank, &dir.path().join("blur.pgm")).unwrap();
    }
}
