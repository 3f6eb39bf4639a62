//! Dense row-major tensors and the `DTF1` binary tensor format.
//!
//! `DTF1` layout: magic `DTF1`, one byte rank, `rank` little-endian `u32`
//! dims, then the row-major values as little-endian `f32`.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Scalar type a [`Tensor`] can hold. `f32` is the working precision; `f64`
/// is used for gradient verification.
pub trait Element:
    Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// `c = a · b (+ c if accumulate)` where `a` is `m×k` and `b` is `k×n`,
    /// each optionally stored transposed.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_element {
    ($t:ty, $gemm:path) => {
        impl Element for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe in-bounds
                // row-major (or transposed) layouts of the given slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<E: Element = f32> {
    dims: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &preview)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    /// Builds a tensor, rejecting zero-sized dims, length mismatches and
    /// non-finite values.
    pub fn new(dims: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero dim in {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {numel} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data".into()));
        }
        Ok(Self::from_parts(dims, data))
    }

    /// Unchecked constructor for kernel outputs whose shape is known correct.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims,
            data: Arc::new(data),
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, E::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, E::one())
    }

    pub fn full(dims: &[usize], value: E) -> Self {
        Self::from_parts(dims.to_vec(), vec![value; dims.iter().product()])
    }

    pub fn scalar(value: E) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> E) -> Self {
        let n: usize = dims.iter().product();
        Self::from_parts(dims.to_vec(), (0..n).map(f).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<E> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.numel() || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.dims, dims),
            ));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(Self::from_parts(
            self.dims.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.numel() as f64
    }

    /// Elementwise conversion between precisions.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::from_parts(
            self.dims.clone(),
            self.data.iter().map(|v| F::from_f64_lossy(v.as_f64())).collect(),
        )
    }

    /// Selects index `i` along axis 0.
    pub fn index_axis0(&self, i: usize) -> Result<Self> {
        if self.dims.len() < 2 || i >= self.dims[0] {
            return Err(Error::shape(
                "index_axis0",
                format!("index {i} into {:?}", self.dims),
            ));
        }
        let inner: usize = self.dims[1..].iter().product();
        Ok(Self::from_parts(
            self.dims[1..].to_vec(),
            self.data[i * inner..(i + 1) * inner].to_vec(),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.dims != first.dims {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", first.dims, t.dims),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut dims = vec![items.len()];
        dims.extend_from_slice(&first.dims);
        Ok(Self::from_parts(dims, data))
    }
}

impl Tensor<f32> {
    pub fn write_dtf1<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"DTF1")?;
        w.write_all(&[self.dims.len() as u8])?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.numel() * 4);
        for v in self.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_dtf1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.dims.len() + 4 * self.numel());
        self.write_dtf1(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_dtf1<R: Read>(mut r: R) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "DTF1 tensor",
            detail,
        };
        let mut head = [0u8; 5];
        r.read_exact(&mut head)
            .map_err(|e| bad(format!("header: {e}")))?;
        if &head[..4] != b"DTF1" {
            return Err(bad(format!("bad magic {:?}", &head[..4])));
        }
        let rank = head[4] as usize;
        if rank == 0 {
            return Err(bad("rank 0".into()));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| bad(format!("dims: {e}")))?;
            dims.push(u32::from_le_bytes(b) as usize);
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|e| bad(format!("payload: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(dims, data)
    }

    pub fn from_dtf1_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_dtf1(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_non_finite_and_bad_lengths() {
        assert!(Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn dtf1_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0f32, -2.5]).unwrap();
        let bytes = t.to_dtf1_bytes();
        assert_eq!(&bytes[..5], b"DTF1\x02");
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 21);
    }

    #[test]
    fn dtf1_rejects_bad_magic() {
        assert!(Tensor::from_dtf1_bytes(b"DTF2\x01\x01\x00\x00\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        f64::gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    proptest! {
        #[test]
        fn dtf1_round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut state = seed;
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((state >> 40) as f32 / (1u64 << 24) as f32) * 8.0 - 4.0
                })
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::from_dtf1_bytes(&t.to_dtf1_bytes()).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
