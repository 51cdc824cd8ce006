//! Patch-embedding vision transformer producing a token grid.

use vqla_tensor::{init_gaussian, Result as TResult, Scalar, SeededRng, Tensor};

use crate::error::{Result, VqlaError};
use crate::nn::{attention, LayerNorm, Linear, Mlp, ParamVisitor};

/// Token sequence carrying its 2-d grid layout: `tokens` is `[h*w, c]`.
pub struct GridTokens<E: Scalar> {
    pub tokens: Tensor<E>,
    pub h: usize,
    pub w: usize,
}

impl<E: Scalar> GridTokens<E> {
    pub fn new(tokens: Tensor<E>, h: usize, w: usize) -> Result<GridTokens<E>> {
        if tokens.rank() != 2 || tokens.shape()[0] != h * w || h == 0 || w == 0 {
            return Err(VqlaError::Validation(format!(
                "grid tokens must be [{h}*{w}, c], got {:?}",
                tokens.shape()
            )));
        }
        Ok(GridTokens { tokens, h, w })
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// An RGB image as `[3, height, width]` with values in [0, 1].
pub struct ImageTensor<E: Scalar> {
    pub pixels: Tensor<E>,
}

impl<E: Scalar> ImageTensor<E> {
    pub fn new(pixels: Tensor<E>) -> Result<ImageTensor<E>> {
        if pixels.rank() != 3 || pixels.shape()[0] != 3 {
            return Err(VqlaError::Validation(format!(
                "image must be [3, h, w], got {:?}",
                pixels.shape()
            )));
        }
        if pixels
            .data()
            .iter()
            .any(|v| !(0.0..=1.0).contains(&v.to_f64()))
        {
            return Err(VqlaError::Validation(
                "image values must lie in [0, 1]".into(),
            ));
        }
        Ok(ImageTensor { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// PNG by extension, otherwise a checkpoint container holding one
    /// `[3, h, w]` entry named `image`.
    pub fn from_file(path: &std::path::Path) -> Result<ImageTensor<E>> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => Self::from_png(path),
            _ => Self::from_container(path),
        }
    }

    /// Raw tensor ingestion through the shared container format.
    pub fn from_container(path: &std::path::Path) -> Result<ImageTensor<E>> {
        let store = vqla_tensor::checkpoint::load::<E>(path).map_err(VqlaError::Tensor)?;
        let tensor = store.get("image").ok_or_else(|| {
            VqlaError::Validation(format!(
                "{}: container has no `image` entry",
                path.display()
            ))
        })?;
        ImageTensor::new(tensor.detach())
    }

    /// Decodes an 8-bit RGB or RGBA PNG into unit-range pixels.
    pub fn from_png(path: &std::path::Path) -> Result<ImageTensor<E>> {
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path)?));
        let mut reader = decoder
            .read_info()
            .map_err(|e| VqlaError::Validation(format!("png {}: {e}", path.display())))?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| VqlaError::Validation(format!("png {}: {e}", path.display())))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let stride = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            other => {
                return Err(VqlaError::Validation(format!(
                    "png {}: unsupported color type {other:?}",
                    path.display()
                )))
            }
        };
        let mut data = vec![E::ZERO; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = (y * w + x) * stride;
                for c in 0..3 {
                    data[c * h * w + y * w + x] = E::from_f64(buf[px + c] as f64 / 255.0);
                }
            }
        }
        ImageTensor::new(Tensor::from_vec(&[3, h, w], data).map_err(VqlaError::Tensor)?)
    }
}

/// Linear patch projection plus a learned 2-d positional table.
pub struct PatchEmbed<E: Scalar> {
    pub proj: Linear<E>,
    pub pos: Tensor<E>, // [n_patches, c]
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl<E: Scalar> PatchEmbed<E> {
    pub fn new(
        image_h: usize,
        image_w: usize,
        patch: usize,
        channels: usize,
        rng: &mut SeededRng,
    ) -> Result<PatchEmbed<E>> {
        if image_h % patch != 0 || image_w % patch != 0 {
            return Err(VqlaError::Validation(format!(
                "image {image_h}x{image_w} not divisible by patch {patch}"
            )));
        }
        let (grid_h, grid_w) = (image_h / patch, image_w / patch);
        Ok(PatchEmbed {
            proj: Linear::new(3 * patch * patch, channels, true, rng),
            pos: init_gaussian(&[grid_h * grid_w, channels], 0.02, rng),
            patch,
            grid_h,
            grid_w,
        })
    }

    /// Flattens each patch channel-major and projects it, then adds the
    /// positional embedding of its grid cell.
    pub fn forward(&self, img: &ImageTensor<E>) -> Result<GridTokens<E>> {
        let patches = self.extract_patches(img)?;
        let tokens = self.proj.forward(&patches)?.add(&self.pos)?;
        GridTokens::new(tokens, self.grid_h, self.grid_w)
    }

    /// Patch matrix `[n_patches, 3*p*p]` before any learned map; exposed so
    /// tests can check patch-permutation equivariance.
    pub fn extract_patches(&self, img: &ImageTensor<E>) -> Result<Tensor<E>> {
        let (h, w, p) = (img.height(), img.width(), self.patch);
        if h != self.grid_h * p || w != self.grid_w * p {
            return Err(VqlaError::Validation(format!(
                "image {h}x{w} does not match configured grid {}x{} of patch {p}",
                self.grid_h, self.grid_w
            )));
        }
        let px = img.pixels.data();
        let mut rows = Vec::with_capacity(self.grid_h * self.grid_w * 3 * p * p);
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            let y = gy * p + dy;
                            let x = gx * p + dx;
                            rows.push(px[c * h * w + y * w + x]);
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[self.grid_h * self.grid_w, 3 * p * p], rows).map_err(VqlaError::Tensor)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        self.proj.visit(&format!("{prefix}.proj"), f);
        f(format!("{prefix}.pos"), &self.pos);
    }
}

/// Pre-norm transformer block with a GELU MLP.
pub struct VitBlock<E: Scalar> {
    pub norm1: LayerNorm<E>,
    pub wq: Linear<E>,
    pub wk: Linear<E>,
    pub wv: Linear<E>,
    pub wo: Linear<E>,
    pub norm2: LayerNorm<E>,
    pub mlp: Mlp<E>,
    pub heads: usize,
}

impl<E: Scalar> VitBlock<E> {
    pub fn new(dim: usize, heads: usize, rng: &mut SeededRng) -> Result<VitBlock<E>> {
        if dim % heads != 0 {
            return Err(VqlaError::Config(format!(
                "channel width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(VitBlock {
            norm1: LayerNorm::new(dim),
            wq: Linear::new(dim, dim, true, rng),
            wk: Linear::new(dim, dim, true, rng),
            wv: Linear::new(dim, dim, true, rng),
            wo: Linear::new(dim, dim, true, rng),
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, dim * 4, rng),
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> TResult<Tensor<E>> {
        Ok(self.forward_with_attn(x)?.0)
    }

    pub fn forward_with_attn(&self, x: &Tensor<E>) -> TResult<(Tensor<E>, Tensor<E>)> {
        let xn = self.norm1.forward(x)?;
        let (att_out, attn) = attention(
            &self.wq.forward(&xn)?,
            &self.wk.forward(&xn)?,
            &self.wv.forward(&xn)?,
            self.heads,
            None,
        )?;
        let x = x.add(&self.wo.forward(&att_out)?)?;
        let y = x.add(&self.mlp.forward(&self.norm2.forward(&x)?)?)?;
        Ok((y, attn))
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.wq.visit(&format!("{prefix}.attn.q"), f);
        self.wk.visit(&format!("{prefix}.attn.k"), f);
        self.wv.visit(&format!("{prefix}.attn.v"), f);
        self.wo.visit(&format!("{prefix}.attn.o"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }
}

pub struct VisionEncoder<E: Scalar> {
    pub patch_embed: PatchEmbed<E>,
    pub blocks: Vec<VitBlock<E>>,
}

impl<E: Scalar> VisionEncoder<E> {
    pub fn new(
        image_size: usize,
        patch: usize,
        channels: usize,
        depth: usize,
        heads: usize,
        rng: &mut SeededRng,
    ) -> Result<VisionEncoder<E>> {
        let patch_embed = PatchEmbed::new(image_size, image_size, patch, channels, rng)?;
        let mut blocks = Vec::with_capacity(depth);
        for _ in 0..depth {
            blocks.push(VitBlock::new(channels, heads, rng)?);
        }
        Ok(VisionEncoder {
            patch_embed,
            blocks,
        })
    }

    pub fn forward(&self, img: &ImageTensor<E>) -> Result<GridTokens<E>> {
        let grid = self.patch_embed.forward(img)?;
        let mut x = grid.tokens;
        for block in &self.blocks {
            x = block.forward(&x).map_err(VqlaError::Tensor)?;
        }
        GridTokens::new(x, grid.h, grid.w)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        self.patch_embed.visit(&format!("{prefix}.patch_embed"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.blocks.{i}"), f);
        }
    }
}
