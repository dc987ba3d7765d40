use numcore::{Stream, StreamKey, Tape, Tensor, Var};

use crate::encoders::{patch_indices, N_PATCHES, PATCH_DIM};
use crate::error::{Error, Result};
use crate::sceneworld::image::{Image, IMAGE_LEN};

pub const LATENT_CELLS: usize = N_PATCHES;
pub const LATENT_CHANNELS: usize = PATCH_DIM;
pub const LATENT_LEN: usize = LATENT_CELLS * LATENT_CHANNELS;

/// Fixed orthogonal latent codec: space-to-depth by 4 (32x32x3 -> 8x8x48)
/// followed by a 48x48 rotation of every cell. Latents are `64 x 48`
/// matrices, one row per cell in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    rotation: Tensor,
    to_cells: Vec<usize>,
    to_pixels: Vec<usize>,
}

/// Orthonormalises the rows of a square matrix by modified Gram-Schmidt,
/// run twice for numerical orthogonality.
pub fn orthonormal_rows(m: &Tensor) -> Result<Tensor> {
    let (n, c) = m.dims2()?;
    if n != c {
        return Err(Error::Config(format!("orthonormal_rows needs a square matrix, got {n}x{c}")));
    }
    let mut rows: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for _ in 0..2 {
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = rows.split_at_mut(i);
                for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                    *x -= dot * y;
                }
            }
            let norm = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Config("rank-deficient matrix".into()));
            }
            for x in &mut rows[i] {
                *x /= norm;
            }
        }
    }
    Ok(Tensor::from_rows(&rows)?)
}

impl Codec {
    pub fn new(seed: u64) -> Result<Self> {
        let mut stream: Stream = StreamKey::root(seed).child("codec").stream();
        let g = Tensor::randn([LATENT_CHANNELS, LATENT_CHANNELS], 1.0, &mut stream);
        let rotation = orthonormal_rows(&g)?;
        let to_cells = patch_indices(1);
        let mut to_pixels = vec![0; IMAGE_LEN];
        for (cell_pos, &pix) in to_cells.iter().enumerate() {
            to_pixels[pix] = cell_pos;
        }
        Ok(Self {
            rotation,
            to_cells,
            to_pixels,
        })
    }

    /// The codec used throughout: rotation from seed 0.
    pub fn standard() -> Result<Self> {
        Self::new(0)
    }

    pub fn rotation(&self) -> &Tensor {
        &self.rotation
    }

    pub fn encode(&self, image: &Image) -> Result<Tensor> {
        let cells: Vec<f64> = self.to_cells.iter().map(|&i| image.pixels()[i]).collect();
        let x = Tensor::new([LATENT_CELLS, LATENT_CHANNELS], cells)?;
        Ok(x.matmul(&self.rotation.transpose()?)?)
    }

    /// Decoded pixels are not clamped.
    pub fn decode(&self, z: &Tensor) -> Result<Image> {
        if z.shape() != [LATENT_CELLS, LATENT_CHANNELS] {
            return Err(Error::Image(format!("latent must be 64x48, got {:?}", z.shape())));
        }
        let cells = z.matmul(&self.rotation)?;
        let pixels = self.to_pixels.iter().map(|&i| cells.data()[i]).collect();
        Image::new(pixels)
    }

    /// Round-trips `n` random images and checks that encoding preserves
    /// the Euclidean norm.
    pub fn self_check(&self, n: usize, key: StreamKey) -> Result<()> {
        let mut s = key.stream();
        for k in 0..n {
            let img = Image::new((0..IMAGE_LEN).map(|_| s.uniform()).collect())?;
            let z = self.encode(&img)?;
            let back = self.decode(&z)?;
            let err = img
                .pixels()
                .iter()
                .zip(back.pixels())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let nx = img.pixels().iter().map(|v| v * v).sum::<f64>().sqrt();
            let nz = z.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            if err > 1e-9 || (nx - nz).abs() > 1e-9 * nx.max(1.0) {
                return Err(Error::Checkpoint(format!(
                    "codec check failed on image {k}: round-trip error {err:.3e}, norms {nx} vs {nz}"
                )));
            }
        }
        Ok(())
    }

    /// `B x 3072` images to `(B*64) x 48` latents on a tape.
    pub fn encode_var(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let (b, _) = tape.value(images).dims2()?;
        let cells = tape.gather(images, &[b * LATENT_CELLS, LATENT_CHANNELS], patch_indices(b))?;
        let r = tape.constant(self.rotation.clone());
        Ok(tape.matmul_nt(cells, r)?)
    }

    /// `(B*64) x 48` latents to unclamped `B x 3072` images on a tape.
    pub fn decode_var(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let (rows, c) = tape.value(z).dims2()?;
        if c != LATENT_CHANNELS || rows % LATENT_CELLS != 0 {
            return Err(Error::Image(format!("latent rows must be (B*64)x48, got {rows}x{c}")));
        }
        let b = rows / LATENT_CELLS;
        let r = tape.constant(self.rotation.clone());
        let cells = tape.matmul(z, r)?;
        let idx = (0..b)
            .flat_map(|s| self.to_pixels.iter().map(move |&i| s * IMAGE_LEN + i))
            .collect();
        Ok(tape.gather(cells, &[b, IMAGE_LEN], idx)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_is_orthonormal() {
        let c = Codec::standard().unwrap();
        let r = c.rotation();
        let rtr = r.transpose().unwrap().matmul(r).unwrap();
        for i in 0..LATENT_CHANNELS {
            for j in 0..LATENT_CHANNELS {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((rtr.get2(i, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let c = Codec::standard().unwrap();
        let mut s = Stream::from_seed(3);
        let img = Image::new((0..IMAGE_LEN).map(|_| s.uniform()).collect()).unwrap();
        let mut tape = Tape::no_grad();
        let x = tape.constant(img.to_tensor());
        let z = c.encode_var(&mut tape, x).unwrap();
        assert!(tape.value(z).max_abs_diff(&c.encode(&img).unwrap()) < 1e-12);
        let back = c.decode_var(&mut tape, z).unwrap();
        assert!(tape.value(back).max_abs_diff(&img.to_tensor()) < 1e-12);
    }
}
