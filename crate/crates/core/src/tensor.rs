//! Dense row-major `f32` tensors and the raw numeric kernels behind them.
//!
//! Everything here is tape-free. The differentiable versions of these
//! operations live in [`crate::autograd`] and call into the kernels below.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes opening every serialized tensor.
pub const TSPK_MAGIC: &[u8; 4] = b"TSPK";
/// Current container version.
pub const TSPK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Sequential left-to-right sum.
    pub fn sum(&self) -> f32 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    pub fn mean(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.sum() / self.data.len() as f32
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Rows `[start, end)` along the leading dimension.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let lead = *self.shape.first().ok_or_else(|| {
            Error::Contract("slice_rows on a rank-0 tensor".into())
        })?;
        if start > end || end > lead {
            return Err(Error::Contract(format!(
                "row range {start}..{end} out of bounds for leading dim {lead}"
            )));
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * row..end * row].to_vec(),
        })
    }

    /// Gathers rows along the leading dimension in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        let lead = *self.shape.first().ok_or_else(|| {
            Error::Contract("gather_rows on a rank-0 tensor".into())
        })?;
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= lead {
                return Err(Error::Contract(format!("row {r} out of bounds for {lead}")));
            }
            data.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self { shape, data })
    }

    /// Concatenates tensors along the leading dimension.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() == 0 || &p.shape[1..] != tail {
                return Err(Error::dim("concat_rows", &first.shape, &p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self { shape, data })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TSPK_MAGIC)?;
        w.write_all(&TSPK_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Contract(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut offset = 0u64;
        let mut magic = [0u8; 4];
        read_exact_at(r, &mut magic, &mut offset)?;
        if &magic != TSPK_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected TSPK"),
            });
        }
        let version = read_u32_le(r, &mut offset)?;
        if version != TSPK_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let rank = read_u32_le(r, &mut offset)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32_le(r, &mut offset)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        read_exact_at(r, &mut bytes, &mut offset)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Format {
                    offset: *offset + filled as u64,
                    msg: format!("unexpected end of data, {} more bytes expected", buf.len() - filled),
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    *offset += buf.len() as u64;
    Ok(())
}

fn read_u32_le<R: Read>(r: &mut R, offset: &mut u64) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_at(r, &mut b, offset)?;
    Ok(u32::from_le_bytes(b))
}

// ---------------------------------------------------------------------------
// kernels

/// `out[m×n] += a[m×k] · b[k×n]`. Zero entries of `a` are skipped, which is
/// what makes spike inputs cheap; skipping never changes a finite result.
pub fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    matmul_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
            return Err(Error::dim("conv2d", input, kernel));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        let (kh, kw) = (kernel[2], kernel[3]);
        if kh > h || kw > w || kh == 0 || kw == 0 {
            return Err(Error::Config(format!(
                "kernel {kh}x{kw} does not fit padded input {h}x{w}"
            )));
        }
        if (h - kh) % stride != 0 || (w - kw) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output size is not integral: padded {h}x{w}, kernel {kh}x{kw}, stride {stride}"
            )));
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: kernel[0],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h - kh) / stride + 1,
            out_w: (w - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image `[C,H,W]` into columns `[C·kh·kw, H'·W']`.
fn im2col(img: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let pix = g.out_pixels();
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * pix..(row + 1) * pix];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.padding as isize;
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - g.padding as isize;
                        dst[oy * g.out_w + ox] = if y >= 0
                            && x >= 0
                            && (y as usize) < g.height
                            && (x as usize) < g.width
                        {
                            img[(c * g.height + y as usize) * g.width + x as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image gradient.
fn col2im(cols: &[f32], g: &ConvGeometry, img: &mut [f32]) {
    let pix = g.out_pixels();
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * pix..(row + 1) * pix];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.padding as isize;
                    if y < 0 || y as usize >= g.height {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - g.padding as isize;
                        if x < 0 || x as usize >= g.width {
                            continue;
                        }
                        img[(c * g.height + y as usize) * g.width + x as usize] +=
                            src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input[N,C,H,W]` with `kernel[O,C,kh,kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, stride, padding)?;
    let img_len = g.in_channels * g.height * g.width;
    let (patch, pix) = (g.patch_len(), g.out_pixels());
    let out_len = g.out_channels * pix;
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = vec![0.0; patch * pix];
    for n in 0..g.batch {
        im2col(&input.data[n * img_len..(n + 1) * img_len], &g, &mut cols);
        matmul_acc(
            &kernel.data,
            &cols,
            &mut out[n * out_len..(n + 1) * out_len],
            g.out_channels,
            patch,
            pix,
        );
    }
    Tensor::new(vec![g.batch, g.out_channels, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, stride, padding)?;
    let img_len = g.in_channels * g.height * g.width;
    let (patch, pix) = (g.patch_len(), g.out_pixels());
    let out_len = g.out_channels * pix;
    let mut d_input = need_input.then(|| vec![0.0; input.numel()]);
    let mut d_kernel = need_kernel.then(|| vec![0.0; kernel.numel()]);
    let kernel_t = transpose(&kernel.data, g.out_channels, patch);
    let mut cols = vec![0.0; patch * pix];
    let mut d_cols = vec![0.0; patch * pix];
    for n in 0..g.batch {
        let gout = &grad_out.data[n * out_len..(n + 1) * out_len];
        if let Some(dk) = d_kernel.as_mut() {
            im2col(&input.data[n * img_len..(n + 1) * img_len], &g, &mut cols);
            let cols_t = transpose(&cols, patch, pix);
            matmul_acc(gout, &cols_t, dk, g.out_channels, pix, patch);
        }
        if let Some(di) = d_input.as_mut() {
            d_cols.iter_mut().for_each(|v| *v = 0.0);
            matmul_acc(&kernel_t, gout, &mut d_cols, patch, g.out_channels, pix);
            col2im(&d_cols, &g, &mut di[n * img_len..(n + 1) * img_len]);
        }
    }
    Ok((
        d_input.map(|d| Tensor::new(input.shape.clone(), d)).transpose()?,
        d_kernel.map(|d| Tensor::new(kernel.shape.clone(), d)).transpose()?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let id = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        let col = Tensor::new(vec![2, 1], vec![3., 4.]).unwrap();
        assert_eq!(matmul(&id, &col).unwrap().data(), &[3., 4.]);

        let row = Tensor::new(vec![1, 2], vec![1., 2.]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.]);

        let a = Tensor::new(vec![1, 1], vec![2.]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![3.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn conv_examples() {
        let ones = Tensor::ones(&[1, 1, 3, 3]);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.]).unwrap();
        let out = conv2d(&ones, &k, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 2.0));

        let x = Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let k = Tensor::new(vec![1, 1, 2, 2], vec![1., 0., 0., 1.]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), &[5.]);

        let zk = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(conv2d(&x, &zk, 1, 1).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_non_integral_output_is_config_error() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn truncated_container_reports_offset() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        match Tensor::read_from(&mut buf.as_slice()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, buf.len() as u64),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn container_layout_is_little_endian() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TSPK");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &2u32.to_le_bytes());
        assert_eq!(&buf[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&buf[24..28], &(-2.0f32).to_le_bytes());
        assert_eq!(buf.len(), 28);
    }
}
