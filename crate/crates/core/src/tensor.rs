//! Dense n-dimensional tensor with an optional gradient slot.
//!
//! Values are stored row-major. Public constructors reject shape/data
//! mismatches and non-finite values; operator outputs are built through
//! the unchecked internal constructor since finiteness is preserved by
//! the kernels themselves.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} expects {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite tensor value {v}")));
        }
        Ok(Self::from_raw(shape, data))
    }

    /// Internal constructor for kernel outputs; skips the finite scan.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_raw(shape, vec![S::zero(); n])
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor::from_raw(shape, vec![value; n])
    }

    pub fn scalar(value: S) -> Self {
        Tensor::from_raw(vec![], vec![value])
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let n = shape.iter().product();
        Tensor::from_raw(shape, (0..n).map(|i| f(i)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterprets the value with a new shape of the same volume.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} values) to {shape:?} ({expected} values)",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn validate_finite(&self) -> Result<()> {
        match self.data.iter().find(|v| !v.is_finite()) {
            Some(v) => Err(Error::Input(format!("non-finite tensor value {v}"))),
            None => Ok(()),
        }
    }

    /// Flat offset of a multi-index, row-major.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &d) in index.iter().zip(&self.shape) {
            debug_assert!(*i < d);
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }
}

const MDTF_MAGIC: &[u8; 4] = b"MDTF";
const MDTF_MAX_RANK: u32 = 16;

/// Writes a tensor in the shared on-disk format: magic `MDTF`, u32-LE rank,
/// rank u32-LE dims, then the values as little-endian IEEE-754 doubles.
pub fn write_mdtf<S: Scalar>(tensor: &Tensor<S>, path: &Path) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = std::fs::File::create(path).map_err(Error::io(ctx()))?;
    let mut w = BufWriter::new(file);
    w.write_all(MDTF_MAGIC).map_err(Error::io(ctx()))?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())
        .map_err(Error::io(ctx()))?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())
            .map_err(Error::io(ctx()))?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_f64c().to_le_bytes())
            .map_err(Error::io(ctx()))?;
    }
    w.flush().map_err(Error::io(ctx()))
}

pub fn read_mdtf<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let file_name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(Error::io(format!("opening {file_name}")))?;
    let mut r = BufReader::new(file);
    let mut offset = 0u64;
    let parse_err = |offset: u64, message: String| Error::Parse {
        file: file_name.clone(),
        offset,
        message,
    };

    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset, &file_name)?;
    if &magic != MDTF_MAGIC {
        return Err(parse_err(0, format!("bad magic {magic:?}, expected MDTF")));
    }
    let rank = read_u32(&mut r, &mut offset, &file_name)?;
    if rank > MDTF_MAX_RANK {
        return Err(parse_err(4, format!("rank {rank} exceeds limit {MDTF_MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let dim_offset = offset;
        let d = read_u32(&mut r, &mut offset, &file_name)?;
        if d == 0 {
            return Err(parse_err(dim_offset, "zero dimension".into()));
        }
        shape.push(d as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        let value_offset = offset;
        let mut buf = [0u8; 8];
        read_exact_at(&mut r, &mut buf, &mut offset, &file_name)?;
        let v = f64::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(parse_err(value_offset, format!("non-finite value {v}")));
        }
        data.push(S::of(v));
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(parse_err(offset, "trailing bytes after tensor data".into())),
        Err(e) => return Err(Error::io(format!("reading {file_name}"))(e)),
    }
    Ok(Tensor::from_raw(shape, data))
}

fn read_exact_at(
    r: &mut impl Read,
    buf: &mut [u8],
    offset: &mut u64,
    file: &str,
) -> Result<()> {
    match r.read_exact(buf) {
        Ok(()) => {
            *offset += buf.len() as u64;
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Parse {
            file: file.to_string(),
            offset: *offset,
            message: "unexpected end of file".into(),
        }),
        Err(e) => Err(Error::io(format!("reading {file}"))(e)),
    }
}

fn read_u32(r: &mut impl Read, offset: &mut u64, file: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_at(r, &mut buf, offset, file)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_volume_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f64; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0f64; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn grad_slot_requires_matching_length() {
        let mut t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(t.set_grad(vec![0.0; 2]).is_err());
        t.set_grad(vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(t.grad().unwrap(), &[0.1, 0.2, 0.3]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn mdtf_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mdtf");
        let t = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 1e-300, 3.7, -0.125]).unwrap();
        write_mdtf(&t, &path).unwrap();
        let back: Tensor<f64> = read_mdtf(&path).unwrap();
        assert_eq!(t.shape(), back.shape());
        assert_eq!(t.data(), back.data());
    }

    #[test]
    fn truncated_mdtf_reports_file_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mdtf");
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_mdtf(&t, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read_mdtf::<f64>(&path) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mdtf");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            read_mdtf::<f64>(&path),
            Err(Error::Parse { offset: 0, .. })
        ));
    }
}
