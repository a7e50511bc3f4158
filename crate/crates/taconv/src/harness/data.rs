//! Labeled image datasets: IDX container IO and a deterministic synthetic
//! shape set (disks, rings, crosses, wedges, bars) that a small CNN separates
//! in a few epochs.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed_n, rng_from};
use crate::tensor::Tensor;

/// Images `[N,C,H,W]` in `[0,1]` plus integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub id: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize, id: String) -> Result<Self> {
        if images.shape.len() != 4 {
            return Err(Error::Shape(format!("dataset images must be [N,C,H,W], got {:?}", images.shape)));
        }
        if images.shape[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape[0],
                labels.len()
            )));
        }
        if images.shape[0] == 0 {
            return Err(Error::Data("empty dataset".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!("label {} out of range [0,{})", bad, n_classes)));
        }
        Ok(Dataset { images, labels, n_classes, id })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C,H,W]` copy of one image.
    pub fn image(&self, i: usize) -> Tensor {
        let (c, h, w) = (self.images.shape[1], self.images.shape[2], self.images.shape[3]);
        let chw = c * h * w;
        Tensor {
            shape: vec![c, h, w],
            data: self.images.data[i * chw..(i + 1) * chw].to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Batch `[|idx|,C,H,W]` gathered by index list.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let (c, h, w) = (self.images.shape[1], self.images.shape[2], self.images.shape[3]);
        let chw = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * chw);
        for &i in idx {
            data.extend_from_slice(&self.images.data[i * chw..(i + 1) * chw]);
        }
        Tensor { shape: vec![idx.len(), c, h, w], data, requires_grad: false, grad: None }
    }

    /// First `n` examples and the rest, as two datasets.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head_idx: Vec<usize> = (0..n).collect();
        let tail_idx: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head_idx, "head"), self.subset(&tail_idx, "tail"))
    }

    pub fn subset(&self, idx: &[usize], tag: &str) -> Dataset {
        Dataset {
            images: self.batch(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            id: format!("{}:{}[{}]", self.id, tag, idx.len()),
        }
    }
}

// ---------------------------------------------------------------------------
// IDX container

const IDX_UBYTE: u8 = 0x08;

fn read_idx_raw(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", path.display(), e)))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(Error::Data(format!("{}: truncated IDX header", path.display())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Data(format!(
            "{}: bad magic at offset 0: {:02x}{:02x}",
            path.display(),
            bytes[0],
            bytes[1]
        )));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::Data(format!(
            "{}: bad magic at offset 2: unsupported dtype 0x{:02x} (only ubyte 0x08)",
            path.display(),
            bytes[2]
        )));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Data(format!("{}: truncated IDX dimension table", path.display())));
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let off = 4 + 4 * d;
        dims.push(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel: usize = dims.iter().product();
    if bytes.len() != header + numel {
        return Err(Error::Data(format!(
            "{}: payload is {} bytes but dims {:?} need {}",
            path.display(),
            bytes.len() - header,
            dims,
            numel
        )));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Load a paired IDX image/label file set. Image files may be rank 3
/// `[N,H,W]` (single channel) or rank 4 `[N,C,H,W]`; labels are rank 1.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (idims, ibytes) = read_idx_raw(images_path)?;
    let (ldims, lbytes) = read_idx_raw(labels_path)?;
    let shape = match idims.len() {
        3 => vec![idims[0], 1, idims[1], idims[2]],
        4 => idims.clone(),
        n => {
            return Err(Error::Data(format!(
                "{}: image file must be rank 3 or 4, got {}",
                images_path.display(),
                n
            )))
        }
    };
    if ldims.len() != 1 {
        return Err(Error::Data(format!(
            "{}: label file must be rank 1, got {}",
            labels_path.display(),
            ldims.len()
        )));
    }
    if ldims[0] != shape[0] {
        return Err(Error::Data(format!(
            "count mismatch: {} images vs {} labels",
            shape[0], ldims[0]
        )));
    }
    let data: Vec<f64> = ibytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lbytes.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let id = format!("idx:{}#{}", images_path.display(), shape[0]);
    Dataset::new(Tensor::new(shape, data)?, labels, n_classes, id)
}

/// Write a dataset as a paired IDX image/label file set (ubyte pixels).
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let s = &ds.images.shape;
    let mut out = vec![0u8, 0, IDX_UBYTE, 4];
    for &d in s {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in &ds.images.data {
        out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    std::fs::File::create(images_path)?.write_all(&out)?;

    let mut lout = vec![0u8, 0, IDX_UBYTE, 1];
    lout.extend_from_slice(&(ds.labels.len() as u32).to_be_bytes());
    for &l in &ds.labels {
        if l > 255 {
            return Err(Error::Data(format!("label {} does not fit in a ubyte IDX file", l)));
        }
        lout.push(l as u8);
    }
    std::fs::File::create(labels_path)?.write_all(&lout)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic shapes

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum Shape {
    Disk,
    Ring,
    Cross,
    Wedge, // left half-disk: not symmetric under horizontal flip
    HBar,
    VBar,
}

const SHAPES: [Shape; 6] = [Shape::Disk, Shape::Ring, Shape::Cross, Shape::Wedge, Shape::HBar, Shape::VBar];

/// Signed distance to the shape boundary, negative inside.
fn shape_distance(shape: Shape, dx: f64, dy: f64, r: f64) -> f64 {
    let bar = |du: f64, dv: f64, half_len: f64, half_width: f64| -> f64 {
        (du.abs() - half_len).max(dv.abs() - half_width)
    };
    match shape {
        Shape::Disk => (dx * dx + dy * dy).sqrt() - r,
        Shape::Ring => ((dx * dx + dy * dy).sqrt() - r).abs() - 0.38 * r,
        Shape::Cross => bar(dx, dy, r, 0.38 * r).min(bar(dy, dx, r, 0.38 * r)),
        Shape::Wedge => ((dx * dx + dy * dy).sqrt() - r).max(dx),
        Shape::HBar => bar(dx, dy, r, 0.42 * r),
        Shape::VBar => bar(dy, dx, r, 0.42 * r),
    }
}

/// Deterministic class-balanced shape dataset with jittered position, scale
/// and intensity; soft one-pixel edges keep geometric perturbations smooth.
pub fn synth_dataset(n_per_class: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || classes > SHAPES.len() {
        return Err(Error::Usage(format!(
            "synthetic dataset supports 1..={} classes, got {}",
            SHAPES.len(),
            classes
        )));
    }
    if n_per_class == 0 || size < 8 {
        return Err(Error::Usage("need n_per_class >= 1 and size >= 8".into()));
    }
    let n = n_per_class * classes;
    let mut data = vec![0.0; n * size * size];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        let mut rng = rng_from(derive_seed_n(seed, "synth-image", i as u64));
        let s = size as f64;
        let cx = s / 2.0 + rng.gen_range(-s / 8.0..s / 8.0);
        let cy = s / 2.0 + rng.gen_range(-s / 8.0..s / 8.0);
        let r = s * rng.gen_range(0.24..0.34);
        let intensity = rng.gen_range(0.65..1.0);
        let plane = &mut data[i * size * size..(i + 1) * size * size];
        for y in 0..size {
            for x in 0..size {
                let d = shape_distance(SHAPES[class], x as f64 - cx, y as f64 - cy, r);
                // One-pixel linear edge ramp.
                let cov = (0.5 - d).clamp(0.0, 1.0);
                plane[y * size + x] = intensity * cov;
            }
        }
    }
    let images = Tensor::new(vec![n, 1, size, size], data)?;
    let id = format!("synth-v1:classes={}:n_per_class={}:size={}:seed={}", classes, n_per_class, size, seed);
    Dataset::new(images, labels, classes, id)
}
