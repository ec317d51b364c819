//! Dataset ingestion and image export.
//!
//! Supported inputs: big-endian IDX image/label files (magic 0x00000803 /
//! 0x00000801, pixel bytes scaled to [0,1] by /255), and directories of
//! PGM/PBM images (P5/P2/P4/P1). Output panels are binary PGM (P5, maxval
//! 255) grids with 1-pixel separators at gray 128; a written grid reads back
//! exactly up to the documented 8-bit quantization `v -> round(255 v)`.

use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};
use byteorder::{BigEndian, ReadBytesExt};
use std::fs;
use std::io::Read;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A stack of grayscale images in [0,1] with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, H, W]`.
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
    /// Free-form split tag ("train", "test", "unsplit", ...).
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<u8>>, split: &str) -> Result<Dataset> {
        if images.rank() != 3 {
            return Err(Error::shape(format!(
                "dataset images must be [n, H, W], got {:?}",
                images.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::shape(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.shape()[0]
                )));
            }
        }
        if images.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::InvalidArg(
                "dataset pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(Dataset {
            images,
            labels,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[2]
    }

    /// Flat row view `[n, H*W]` — the carrier format the networks consume.
    pub fn rows(&self) -> Tensor {
        self.images
            .clone()
            .reshape(&[self.len(), self.height() * self.width()])
            .expect("rank-3 dataset always reshapes to rows")
    }

    pub fn subset(&self, indices: &[u32]) -> Result<Dataset> {
        let rows = self.rows().gather_rows(indices)?;
        let images = rows.reshape(&[indices.len(), self.height(), self.width()])?;
        let labels = match &self.labels {
            Some(l) => Some(
                indices
                    .iter()
                    .map(|&i| {
                        l.get(i as usize).copied().ok_or_else(|| {
                            Error::InvalidArg(format!("label index {i} out of range"))
                        })
                    })
                    .collect::<Result<Vec<u8>>>()?,
            ),
            None => None,
        };
        Ok(Dataset {
            images,
            labels,
            split: self.split.clone(),
        })
    }

    /// First `n` images (in stored order).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let idx: Vec<u32> = (0..n as u32).collect();
        self.subset(&idx)
    }

    pub fn binarize(&self, mode: BinarizeMode) -> Result<Dataset> {
        Ok(Dataset {
            images: binarize(&self.images, mode)?,
            labels: self.labels.clone(),
            split: self.split.clone(),
        })
    }

    pub fn center_crop_resize(&self, out_size: usize) -> Result<Dataset> {
        Ok(Dataset {
            images: center_crop_resize(&self.images, out_size)?,
            labels: self.labels.clone(),
            split: self.split.clone(),
        })
    }
}

/// Loads an IDX image file, with labels when a label path is supplied.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let bytes = fs::read(images_path)
        .map_err(|e| Error::io(format!("reading {}", images_path.display()), e))?;
    let mut cur = std::io::Cursor::new(&bytes[..]);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated("IDX image header".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            offset: 0,
            expected: "0x00000803 (IDX images)",
            found: magic,
        });
    }
    let n = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated("IDX image count".into()))? as usize;
    let h = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated("IDX image rows".into()))? as usize;
    let w = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated("IDX image cols".into()))? as usize;
    let mut pixels = vec![0u8; n * h * w];
    cur.read_exact(&mut pixels).map_err(|_| {
        Error::Truncated(format!(
            "IDX pixel payload: wanted {} bytes after the header",
            n * h * w
        ))
    })?;
    let images = Tensor::from_vec(
        &[n, h, w],
        pixels.iter().map(|&b| b as Real / 255.0).collect(),
    )?;
    let labels = match labels_path {
        Some(path) => {
            let labels = load_idx_labels(path)?;
            if labels.len() != n {
                return Err(Error::Format(format!(
                    "{} labels for {} images",
                    labels.len(),
                    n
                )));
            }
            Some(labels)
        }
        None => None,
    };
    Dataset::new(images, labels, "unsplit")
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut cur = std::io::Cursor::new(&bytes[..]);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated("IDX label header".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            offset: 0,
            expected: "0x00000801 (IDX labels)",
            found: magic,
        });
    }
    let n = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Truncated("IDX label count".into()))? as usize;
    let mut labels = vec![0u8; n];
    cur.read_exact(&mut labels)
        .map_err(|_| Error::Truncated(format!("IDX label payload: wanted {n} bytes")))?;
    Ok(labels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinarizeMode {
    /// Pixel becomes 1 iff it exceeds the threshold.
    Threshold(Real),
    /// Pixel-wise Bernoulli draw with the pixel value as probability.
    Bernoulli(u64),
}

impl Default for BinarizeMode {
    fn default() -> Self {
        BinarizeMode::Threshold(0.5)
    }
}

pub fn binarize(images: &Tensor, mode: BinarizeMode) -> Result<Tensor> {
    if images.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::InvalidArg("binarize: values outside [0, 1]".into()));
    }
    match mode {
        BinarizeMode::Threshold(tau) => {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::InvalidArg(format!(
                    "binarize threshold {tau} outside [0, 1]"
                )));
            }
            Ok(images.map(|x| if x > tau { 1.0 } else { 0.0 }))
        }
        BinarizeMode::Bernoulli(seed) => {
            let mut rng = RngStream::from_seed(seed);
            crate::math::bernoulli_sample(images, &mut rng)
        }
    }
}

/// Crops each image to its centered largest square, then nearest-neighbor
/// resizes to `out_size` x `out_size`. Source index for output cell `d` is
/// `floor((d + 0.5) * side / out_size)`. Binary inputs stay binary (values
/// are only copied).
pub fn center_crop_resize(images: &Tensor, out_size: usize) -> Result<Tensor> {
    if images.rank() != 3 {
        return Err(Error::shape(format!(
            "center_crop_resize: expected [n, H, W], got {:?}",
            images.shape()
        )));
    }
    if out_size == 0 {
        return Err(Error::InvalidArg("center_crop_resize: out_size 0".into()));
    }
    let (n, h, w) = (images.shape()[0], images.shape()[1], images.shape()[2]);
    if h == 0 || w == 0 {
        return Err(Error::InvalidArg("center_crop_resize: zero-area input".into()));
    }
    let side = h.min(w);
    let top = (h - side) / 2;
    let left = (w - side) / 2;
    let mut out = Tensor::zeros(&[n, out_size, out_size]);
    let src_of = |d: usize| -> usize {
        let s = ((d as Real + 0.5) * side as Real / out_size as Real) as usize;
        s.min(side - 1)
    };
    for img in 0..n {
        for oy in 0..out_size {
            let sy = top + src_of(oy);
            for ox in 0..out_size {
                let sx = left + src_of(ox);
                out.data_mut()[(img * out_size + oy) * out_size + ox] =
                    images.data()[(img * h + sy) * w + sx];
            }
        }
    }
    Ok(out)
}

/// Renders images into one grayscale grid: tiles row-major, `cols` per row,
/// 1-pixel separators at gray 128, missing tiles black.
pub fn grid_to_pgm(images: &Tensor, cols: usize) -> Result<Vec<u8>> {
    if images.rank() != 3 || images.shape()[0] == 0 {
        return Err(Error::shape(format!(
            "grid: expected nonempty [n, H, W], got {:?}",
            images.shape()
        )));
    }
    if cols == 0 {
        return Err(Error::InvalidArg("grid: cols must be at least 1".into()));
    }
    let (n, h, w) = (images.shape()[0], images.shape()[1], images.shape()[2]);
    let grid_rows = n.div_ceil(cols);
    let px_w = cols * w + (cols - 1);
    let px_h = grid_rows * h + (grid_rows - 1);
    let mut pixels = vec![128u8; px_w * px_h];
    for tile in 0..grid_rows * cols {
        let (ty, tx) = (tile / cols, tile % cols);
        let oy = ty * (h + 1);
        let ox = tx * (w + 1);
        for y in 0..h {
            for x in 0..w {
                let value = if tile < n {
                    let v = images.data()[(tile * h + y) * w + x];
                    (v * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                };
                pixels[(oy + y) * px_w + (ox + x)] = value;
            }
        }
    }
    let mut out = format!("P5\n{px_w} {px_h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

/// Writes a [`grid_to_pgm`] panel atomically (temp file + rename).
pub fn export_grid(images: &Tensor, cols: usize, path: &Path) -> Result<()> {
    let bytes = grid_to_pgm(images, cols)?;
    write_atomic(path, &bytes)
}

/// Atomic file write: the destination either keeps its old content or holds
/// the complete new content, never a partial write.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = dir.to_path_buf();
    let stem = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    tmp.push(format!(".{stem}.tmp-{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(format!("renaming into {}", path.display()), e)
    })
}

/// Parses a PNM image (P5/P2 grayscale, P4/P1 bitmap) into `[H, W]` values
/// in [0,1]. PBM set bits (ink) load as 1.0.
pub fn parse_pnm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 {
        return Err(Error::Truncated("PNM header".into()));
    }
    let kind = &bytes[..2];
    let mut pos = 2usize;
    let next_token = |pos: &mut usize| -> Result<usize> {
        // Skip whitespace and # comments.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format("PNM: expected a number".into()));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Format("PNM: bad number".into()))
    };
    match kind {
        b"P5" | b"P2" => {
            let w = next_token(&mut pos)?;
            let h = next_token(&mut pos)?;
            let maxval = next_token(&mut pos)?;
            if maxval == 0 || maxval > 255 {
                return Err(Error::Format(format!("PNM: unsupported maxval {maxval}")));
            }
            let mut data = Vec::with_capacity(w * h);
            if kind == b"P5" {
                pos += 1; // single whitespace after maxval
                if bytes.len() < pos + w * h {
                    return Err(Error::Truncated("PGM payload".into()));
                }
                data.extend(
                    bytes[pos..pos + w * h]
                        .iter()
                        .map(|&b| b as Real / maxval as Real),
                );
            } else {
                for _ in 0..w * h {
                    data.push(next_token(&mut pos)? as Real / maxval as Real);
                }
            }
            Tensor::from_vec(&[h, w], data)
        }
        b"P4" | b"P1" => {
            let w = next_token(&mut pos)?;
            let h = next_token(&mut pos)?;
            let mut data = Vec::with_capacity(w * h);
            if kind == b"P4" {
                pos += 1;
                let row_bytes = w.div_ceil(8);
                if bytes.len() < pos + row_bytes * h {
                    return Err(Error::Truncated("PBM payload".into()));
                }
                for y in 0..h {
                    for x in 0..w {
                        let byte = bytes[pos + y * row_bytes + x / 8];
                        let bit = (byte >> (7 - (x % 8))) & 1;
                        data.push(bit as Real);
                    }
                }
            } else {
                while data.len() < w * h {
                    while pos < bytes.len()
                        && !(bytes[pos] == b'0' || bytes[pos] == b'1')
                    {
                        if bytes[pos] == b'#' {
                            while pos < bytes.len() && bytes[pos] != b'\n' {
                                pos += 1;
                            }
                        } else {
                            pos += 1;
                        }
                    }
                    if pos >= bytes.len() {
                        return Err(Error::Truncated("PBM payload".into()));
                    }
                    data.push((bytes[pos] - b'0') as Real);
                    pos += 1;
                }
            }
            Tensor::from_vec(&[h, w], data)
        }
        _ => Err(Error::Format(format!(
            "PNM: unknown magic {:?}",
            String::from_utf8_lossy(kind)
        ))),
    }
}

pub fn load_pnm(path: &Path) -> Result<Tensor> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_pnm(&bytes)
}

/// Loads every PGM/PBM/PNM file in a directory (sorted by name) as one
/// dataset. All images must share one resolution.
pub fn load_image_dir(dir: &Path) -> Result<Dataset> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("reading directory {}", dir.display()), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm" | "pbm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArg(format!(
            "no PGM/PBM images under {}",
            dir.display()
        )));
    }
    let mut images = Vec::new();
    let mut dims = None;
    for path in &paths {
        let img = load_pnm(path)?;
        match dims {
            None => dims = Some([img.shape()[0], img.shape()[1]]),
            Some(d) => {
                if [img.shape()[0], img.shape()[1]] != d {
                    return Err(Error::shape(format!(
                        "{}: resolution {:?} differs from {:?}",
                        path.display(),
                        img.shape(),
                        d
                    )));
                }
            }
        }
        images.extend_from_slice(img.data());
    }
    let [h, w] = dims.unwrap();
    Dataset::new(
        Tensor::from_vec(&[paths.len(), h, w], images)?,
        None,
        "unsplit",
    )
}

/// Deterministic 10-class corpus of 28x28 binary glyph images: a 5x7 digit
/// font scaled 2x, randomly placed, with salt-and-pepper flips. Stands in
/// for handwritten digits when no real corpus is on disk; exercises the
/// exact same code paths.
pub fn synthetic_digits(n: usize, seed: u64) -> Dataset {
    const GLYPHS: [[&str; 7]; 10] = [
        [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
        ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
        [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
        [".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."],
        ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
        ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
        ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
        ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
        [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
        [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
    ];
    const SCALE: usize = 2;
    const SIZE: usize = 28;
    const FLIP: f64 = 0.02;
    let glyph_w = 5 * SCALE;
    let glyph_h = 7 * SCALE;
    let mut rng = RngStream::from_seed(seed);
    let mut images = Tensor::zeros(&[n, SIZE, SIZE]);
    let mut labels = Vec::with_capacity(n);
    for img in 0..n {
        let digit = rng.index(10);
        labels.push(digit as u8);
        // Keep the glyph comfortably inside the frame with +-5 px jitter.
        let ox = (SIZE - glyph_w) / 2 - 5 + rng.index(11);
        let oy = (SIZE - glyph_h) / 2 - 5 + rng.index(11);
        for (gy, row) in GLYPHS[digit].iter().enumerate() {
            for (gx, ch) in row.bytes().enumerate() {
                if ch == b'#' {
                    for dy in 0..SCALE {
                        for dx in 0..SCALE {
                            let y = oy + gy * SCALE + dy;
                            let x = ox + gx * SCALE + dx;
                            images.data_mut()[(img * SIZE + y) * SIZE + x] = 1.0;
                        }
                    }
                }
            }
        }
        for px in 0..SIZE * SIZE {
            if rng.bernoulli(FLIP) {
                let cell = &mut images.data_mut()[img * SIZE * SIZE + px];
                *cell = 1.0 - *cell;
            }
        }
    }
    Dataset {
        images,
        labels: Some(labels),
        split: "synthetic".into(),
    }
}

/// Tiny structured corpora for training-signal tests.
pub mod toy {
    use super::*;

    /// Every 4x4 bars/stripes image: each of the 16 row patterns and 16
    /// column patterns, flattened to `[32, 16]` rows.
    pub fn bars_and_stripes() -> Tensor {
        let mut rows = Vec::with_capacity(32 * 16);
        for bits in 0..16u32 {
            for y in 0..4 {
                for _x in 0..4 {
                    rows.push(((bits >> y) & 1) as Real);
                }
            }
        }
        for bits in 0..16u32 {
            for _y in 0..4 {
                for x in 0..4 {
                    rows.push(((bits >> x) & 1) as Real);
                }
            }
        }
        Tensor::from_vec(&[32, 16], rows).expect("fixed extent")
    }

    /// Two well-separated modes over 16 bits (first half on vs second half
    /// on) with per-bit flip noise.
    pub fn two_mode(n: usize, flip: f64, seed: u64) -> Tensor {
        let mut rng = RngStream::from_seed(seed);
        Tensor::from_fn(&[n, 16], |i| {
            let (row, bit) = (i / 16, i % 16);
            let base = if row % 2 == 0 {
                if bit < 8 {
                    1.0
                } else {
                    0.0
                }
            } else if bit < 8 {
                0.0
            } else {
                1.0
            };
            if rng.bernoulli(flip) {
                1.0 - base
            } else {
                base
            }
        })
    }
}
