//! Discrete image tokens: codebook, nearest-neighbour quantization and a toy
//! patch encoder/decoder that stands in for a frozen VQ image backbone.

mod backbone;

pub use backbone::{PretrainConfig, PretrainReport, VqBackbone};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    /// Grid side in patches; a grid holds `side * side` tokens.
    pub side: usize,
    /// Patch side in pixels.
    pub patch: usize,
    /// Codebook size.
    pub k: usize,
    /// Code width.
    pub d: usize,
    /// Hidden width of the encoder/decoder residual MLPs.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            side: 8,
            patch: 4,
            k: 512,
            d: 32,
            hidden: 64,
            seed: 0,
        }
    }
}

impl VqConfig {
    pub fn tokens(&self) -> usize {
        self.side * self.side
    }

    pub fn image_side(&self) -> usize {
        self.side * self.patch
    }

    /// Floats per patch (RGB).
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Reserved id one past the last codebook row.
    pub fn drop_id(&self) -> u32 {
        self.k as u32
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.side > 0 && self.patch > 0 && self.k > 0 && self.d > 0 && self.hidden > 0,
            Config,
            "vq dims must be positive: {self:?}"
        );
        ensure!(
            self.k < u16::MAX as usize,
            Config,
            "k={} does not fit u16 token packing",
            self.k
        );
        Ok(())
    }
}

/// `K x D` table of code vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    entries: Vec<f32>,
}

impl Codebook {
    /// Rejects non-finite entries and duplicate rows.
    pub fn new(k: usize, d: usize, entries: Vec<f32>) -> Result<Self> {
        ensure!(k > 0 && d > 0, Config, "empty codebook ({k} x {d})");
        ensure!(
            entries.len() == k * d,
            Dimension,
            "codebook data has {} values, want {k} x {d}",
            entries.len()
        );
        ensure!(entries.iter().all(|x| x.is_finite()), NonFinite, "codebook entries");
        let cb = Codebook { k, d, entries };
        if let Some((i, j)) = cb.duplicate_pair() {
            return Err(Error::Config(format!("codebook rows {i} and {j} coincide")));
        }
        Ok(cb)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        ensure!(
            t.shape().len() == 2,
            Dimension,
            "codebook must be 2-D, got {:?}",
            t.shape()
        );
        Codebook::new(t.rows(), t.cols(), t.data().to_vec())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.entries[i * self.d..(i + 1) * self.d]
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    fn duplicate_pair(&self) -> Option<(usize, usize)> {
        for i in 0..self.k {
            for j in i + 1..self.k {
                if self.row(i) == self.row(j) {
                    return Some((i, j));
                }
            }
        }
        None
    }

    /// Index of the closest row by squared L2 distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = (f32::INFINITY, 0);
        for i in 0..self.k {
            let dist: f32 = self.row(i).iter().zip(v).map(|(c, x)| (x - c) * (x - c)).sum();
            if dist < best.0 {
                best = (dist, i);
            }
        }
        best.1
    }

    /// Nearest ids for a row-major `n x D` buffer.
    pub fn nearest_ids(&self, rows: &[f32]) -> Result<Vec<u32>> {
        ensure!(
            rows.len() % self.d == 0,
            Dimension,
            "{} values is not a whole number of {}-d vectors",
            rows.len(),
            self.d
        );
        Ok(rows.chunks_exact(self.d).map(|v| self.nearest(v) as u32).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.k, self.d], self.entries.clone()).expect("codebook shape")
    }
}

/// One image as `side * side` token ids in row-major patch order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    side: usize,
    ids: Vec<u32>,
}

impl TokenGrid {
    pub fn new(side: usize, ids: Vec<u32>) -> Result<Self> {
        ensure!(
            side > 0 && ids.len() == side * side,
            Dimension,
            "{} ids do not fill a {side}x{side} grid",
            ids.len()
        );
        Ok(TokenGrid { side, ids })
    }

    pub fn filled(side: usize, id: u32) -> Self {
        TokenGrid {
            side,
            ids: vec![id; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u32] {
        &mut self.ids
    }

    pub fn count(&self, id: u32) -> usize {
        self.ids.iter().filter(|&&x| x == id).count()
    }

    /// Contract check for finalized grids: every id is a real codebook row.
    pub fn check_finalized(&self, k: usize) -> Result<()> {
        match self.ids.iter().position(|&x| x as usize >= k) {
            None => Ok(()),
            Some(i) if self.ids[i] as usize == k => Err(Error::Contract(format!(
                "dropped token at position {i} in a finalized grid"
            ))),
            Some(i) => Err(Error::Contract(format!(
                "token id {} at position {i} exceeds codebook size {k}",
                self.ids[i]
            ))),
        }
    }
}

/// `H x W x 3` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    side: usize,
    data: Vec<f32>,
}

impl ToyImage {
    /// Values are clamped into `[0, 1]`.
    pub fn new(side: usize, mut data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == side * side * 3,
            Dimension,
            "{} values do not fill a {side}x{side}x3 image",
            data.len()
        );
        ensure!(data.iter().all(|x| x.is_finite()), NonFinite, "image pixels");
        data.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        Ok(ToyImage { side, data })
    }

    pub fn filled(side: usize, rgb: [f32; 3]) -> Self {
        let data = (0..side * side).flat_map(|_| rgb).collect();
        ToyImage::new(side, data).expect("filled image")
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.side + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.side + x) * 3;
        for c in 0..3 {
            self.data[o + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn mse(&self, other: &ToyImage) -> Result<f64> {
        ensure!(
            self.side == other.side,
            Dimension,
            "image sides {} vs {}",
            self.side,
            other.side
        );
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        Ok(s / self.data.len() as f64)
    }

    /// Row-major patches, each flattened as `(py, px, channel)`.
    pub fn patches(&self, patch: usize) -> Result<Vec<f32>> {
        ensure!(
            patch > 0 && self.side % patch == 0,
            Config,
            "image side {} is not a multiple of patch {patch}",
            self.side
        );
        let g = self.side / patch;
        let mut out = Vec::with_capacity(self.data.len());
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let start = (y * self.side + gx * patch) * 3;
                    out.extend_from_slice(&self.data[start..start + patch * 3]);
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`ToyImage::patches`].
    pub fn from_patches(side_patches: usize, patch: usize, patches: &[f32]) -> Result<Self> {
        let side = side_patches * patch;
        ensure!(
            patches.len() == side * side * 3,
            Dimension,
            "{} patch values for a {side}x{side} image",
            patches.len()
        );
        let mut data = vec![0.0; side * side * 3];
        let per = patch * patch * 3;
        for (i, p) in patches.chunks_exact(per).enumerate() {
            let (gy, gx) = (i / side_patches, i % side_patches);
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * side + gx * patch) * 3;
                data[start..start + patch * 3].copy_from_slice(&p[py * patch * 3..(py + 1) * patch * 3]);
            }
        }
        ToyImage::new(side, data)
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(f), self.side as u32, self.side as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self.data.iter().map(|x| (x * 255.0).round() as u8).collect();
        enc.write_header()
            .and_then(|mut w| w.write_image_data(&bytes))
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: png::DecodingError| Error::Data(format!("{}: {e}", path.display()));
        let mut dec = png::Decoder::new(std::io::BufReader::new(f));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(bad)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(bad)?;
        ensure!(info.width == info.height, Data, "{}: non-square image", path.display());
        let channels = info.color_type.samples();
        let px = &buf[..info.buffer_size()];
        let data: Vec<f32> = px
            .chunks_exact(channels)
            .flat_map(|c| match channels {
                1 | 2 => [c[0]; 3],
                _ => [c[0], c[1], c[2]],
            })
            .map(|b| b as f32 / 255.0)
            .collect();
        ToyImage::new(info.width as usize, data)
    }
}

/// Maps each row of an `N x D` tensor to its nearest codebook row.
pub fn quantize(vectors: &Tensor, codebook: &Codebook) -> Result<TokenGrid> {
    ensure!(
        vectors.shape().len() == 2 && vectors.cols() == codebook.d(),
        Dimension,
        "vectors {:?} vs codebook width {}",
        vectors.shape(),
        codebook.d()
    );
    let n = vectors.rows();
    let side = (n as f64).sqrt().round() as usize;
    ensure!(side * side == n, Dimension, "{n} vectors do not form a square grid");
    TokenGrid::new(side, codebook.nearest_ids(vectors.data())?)
}

/// Soft embeddings: row `i` is `codebook[ids[i]]`.
pub fn embed(grid: &TokenGrid, codebook: &Codebook) -> Result<Tensor> {
    grid.check_finalized(codebook.k())?;
    let mut data = Vec::with_capacity(grid.len() * codebook.d());
    for &id in grid.ids() {
        data.extend_from_slice(codebook.row(id as usize));
    }
    Tensor::new(vec![grid.len(), codebook.d()], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Codebook {
        Codebook::new(3, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn duplicate_rows_rejected() {
        assert!(Codebook::new(2, 2, vec![1.0, 2.0, 1.0, 2.0]).is_err());
        assert!(Codebook::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        // (0.5, 0.5) is equidistant from all three rows.
        let cb = tiny();
        assert_eq!(cb.nearest(&[0.5, 0.5]), 0);
        assert_eq!(cb.nearest(&[0.6, 0.6]), 1);
    }

    #[test]
    fn embed_rejects_drop_id() {
        let cb = tiny();
        let g = TokenGrid::new(1, vec![3]).unwrap();
        assert!(matches!(embed(&g, &cb), Err(Error::Contract(_))));
    }

    #[test]
    fn patches_round_trip() {
        let data: Vec<f32> = (0..8 * 8 * 3).map(|i| i as f32 / 192.0).collect();
        let img = ToyImage::new(8, data).unwrap();
        let p = img.patches(4).unwrap();
        assert_eq!(ToyImage::from_patches(2, 4, &p).unwrap(), img);
        // First patch starts with the top-left pixel, second with pixel (0, 4).
        assert_eq!(&p[..3], &img.pixel(0, 0));
        assert_eq!(&p[48..51], &img.pixel(0, 4));
    }

    #[test]
    fn image_values_clamped() {
        let img = ToyImage::new(1, vec![-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }
}
