//! Grayscale image plane, binary PGM I/O, mirror padding and patch grids.
//!
//! Intensities are stored as `f64` in `[0, 1]`. Conversion to and from
//! 8-bit uses `byte / 255` on load and round-half-up then clamp on save,
//! so an 8-bit file survives a load/save cycle unchanged.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

/// Errors raised by image construction, PGM I/O and patch operations.
#[derive(Debug, Error)]
pub enum ImageError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a binary PGM file (expected magic P5)")]
    BadMagic,
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("unsupported maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("truncated PGM payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image data has {found} values, expected {expected}")]
    DataLength { expected: usize, found: usize },
    #[error("intensity {value} at index {index} is outside [0, 1]")]
    IntensityRange { index: usize, value: f64 },
    #[error("image dimensions must be nonzero (got {width}x{height})")]
    Empty { width: usize, height: usize },
    #[error("margin {margin} too large for {width}x{height} image")]
    MarginTooLarge {
        margin: usize,
        width: usize,
        height: usize,
    },
    #[error("patch size {patch} does not fit a {width}x{height} image")]
    PatchTooLarge {
        patch: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid patch grid: {0}")]
    InvalidGrid(String),
    #[error("patch at origin ({row}, {col}) does not fit a {width}x{height} output")]
    OriginOutOfBounds {
        row: usize,
        col: usize,
        width: usize,
        height: usize,
    },
    #[error("pixel ({row}, {col}) is not covered by any patch")]
    Uncovered { row: usize, col: usize },
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// Quantize an intensity to 8 bits: round half up, then clamp to `0..=255`.
pub fn to_u8(intensity: f64) -> u8 {
    let v = (intensity * 255.0 + 0.5).floor();
    v.clamp(0.0, 255.0) as u8
}

/// A single-channel image with row-major intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty { width, height });
        }
        if data.len() != width * height {
            return Err(ImageError::DataLength {
                expected: width * height,
                found: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::IntensityRange { index, value });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image from arbitrary reals, clamping each into `[0, 1]`.
    /// Non-finite values map to 0.
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_finite() {
                v.clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(width, height, data)
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(width, height, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Copies the `width x height` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, width: usize, height: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(ImageError::OriginOutOfBounds {
                row,
                col,
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity(width * height);
        for r in row..row + height {
            let start = r * self.width + col;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Self::new(width, height, data)
    }
}

/// Parses a binary PGM (P5, maxval 255) from memory.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(ImageError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    let names = ["width", "height", "maxval"];
    for (field, name) in fields.iter_mut().zip(names) {
        // whitespace and comments before each header token
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::MalformedHeader(format!("missing {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| ImageError::MalformedHeader(format!("{name} out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(ImageError::MalformedHeader(
                "missing whitespace after maxval".into(),
            ))
        }
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImageError::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if maxval != 255 {
        return Err(ImageError::UnsupportedMaxval(maxval));
    }
    let expected = width as usize * height as usize;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    GrayImage::from_bytes(width as usize, height as usize, &payload[..expected])
}

/// Serializes to binary PGM with the canonical header `P5\n<w> <h>\n255\n`.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_pgm(&bytes)
}

/// Writes a PGM atomically: the bytes go to a temporary file in the target
/// directory which is then renamed over `path`.
pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pgm(img)).map_err(|source| ImageError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Maps a possibly out-of-range coordinate into `0..n` by reflection about
/// the edge pixels (the edge itself is not repeated). Repeats periodically
/// for offsets larger than the image.
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Pads by reflection without repeating the edge: row `[a, b, c]` with
/// margin 1 becomes `[b, a, b, c, b]`.
pub fn mirror_pad(img: &GrayImage, margin: usize) -> Result<GrayImage> {
    if margin >= img.width.min(img.height) {
        return Err(ImageError::MarginTooLarge {
            margin,
            width: img.width,
            height: img.height,
        });
    }
    Ok(pad_reflect(img, margin))
}

/// Reflection padding without the margin limit of [`mirror_pad`].
pub(crate) fn pad_reflect(img: &GrayImage, margin: usize) -> GrayImage {
    let w = img.width + 2 * margin;
    let h = img.height + 2 * margin;
    let m = margin as isize;
    let mut data = Vec::with_capacity(w * h);
    for r in 0..h {
        let sr = reflect_index(r as isize - m, img.height);
        for c in 0..w {
            let sc = reflect_index(c as isize - m, img.width);
            data.push(img.get(sr, sc));
        }
    }
    GrayImage {
        width: w,
        height: h,
        data,
    }
}

/// Removes `margin` pixels from every side.
pub fn center_crop(img: &GrayImage, margin: usize) -> Result<GrayImage> {
    if 2 * margin >= img.width.min(img.height) {
        return Err(ImageError::MarginTooLarge {
            margin,
            width: img.width,
            height: img.height,
        });
    }
    img.crop(
        margin,
        margin,
        img.width - 2 * margin,
        img.height - 2 * margin,
    )
}

/// Square patches cut from an image at a set of top-left origins.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    pub origins: Vec<(usize, usize)>,
    pub patches: Vec<Vec<f64>>,
}

impl PatchGrid {
    pub fn new(
        patch_size: usize,
        stride: usize,
        origins: Vec<(usize, usize)>,
        patches: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if patch_size == 0 {
            return Err(ImageError::InvalidGrid("patch size is zero".into()));
        }
        if origins.len() != patches.len() {
            return Err(ImageError::InvalidGrid(format!(
                "{} origins but {} patches",
                origins.len(),
                patches.len()
            )));
        }
        if let Some(p) = patches.iter().find(|p| p.len() != patch_size * patch_size) {
            return Err(ImageError::InvalidGrid(format!(
                "patch has {} values, expected {}",
                p.len(),
                patch_size * patch_size
            )));
        }
        Ok(Self {
            patch_size,
            stride,
            origins,
            patches,
        })
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Origins along one axis: `0, s, 2s, ...` with the last one clamped to
/// `dim - patch` so the final patch touches the border. Strides larger
/// than the patch are reduced to the patch size so the grid has no gaps.
pub fn grid_positions(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    assert!(patch <= dim && stride >= 1);
    let last = dim - patch;
    let mut out: Vec<usize> = (0..last).step_by(stride.min(patch)).collect();
    out.push(last);
    out
}

pub fn extract_patches(img: &GrayImage, patch_size: usize, stride: usize) -> Result<PatchGrid> {
    if patch_size == 0 || patch_size > img.width.min(img.height) {
        return Err(ImageError::PatchTooLarge {
            patch: patch_size,
            width: img.width,
            height: img.height,
        });
    }
    if stride == 0 {
        return Err(ImageError::InvalidGrid("stride must be at least 1".into()));
    }
    let rows = grid_positions(img.height, patch_size, stride);
    let cols = grid_positions(img.width, patch_size, stride);
    let mut origins = Vec::with_capacity(rows.len() * cols.len());
    let mut patches = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            origins.push((r, c));
            let mut p = Vec::with_capacity(patch_size * patch_size);
            for pr in r..r + patch_size {
                let start = pr * img.width + c;
                p.extend_from_slice(&img.data[start..start + patch_size]);
            }
            patches.push(p);
        }
    }
    PatchGrid::new(patch_size, stride, origins, patches)
}

/// Averages overlapping patches back into an image.
///
/// Every output pixel is the arithmetic mean of the patch values covering
/// it; where all covering values agree, that value is taken verbatim so
/// `reconstruct(extract_patches(img))` is exact.
pub fn reconstruct(grid: &PatchGrid, out_width: usize, out_height: usize) -> Result<GrayImage> {
    let k = grid.patch_size;
    let n = out_width * out_height;
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for (&(r0, c0), patch) in grid.origins.iter().zip(&grid.patches) {
        if r0 + k > out_height || c0 + k > out_width {
            return Err(ImageError::OriginOutOfBounds {
                row: r0,
                col: c0,
                width: out_width,
                height: out_height,
            });
        }
        for pr in 0..k {
            let row = &patch[pr * k..(pr + 1) * k];
            let base = (r0 + pr) * out_width + c0;
            for (pc, &v) in row.iter().enumerate() {
                let i = base + pc;
                sum[i] += v;
                count[i] += 1;
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        if count[i] == 0 {
            return Err(ImageError::Uncovered {
                row: i / out_width,
                col: i % out_width,
            });
        }
        data.push(if lo[i] == hi[i] {
            lo[i]
        } else {
            sum[i] / f64::from(count[i])
        });
    }
    GrayImage::from_clamped(out_width, out_height, data)
}
