//! Dense row-major tensors and named parameter collections.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

/// Element types a checkpoint can carry.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype tag {other}"))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar type the numeric stack is generic over. Training runs in `f32`;
/// gradient checks and statistics accumulation use `f64`.
pub trait Element:
    num_traits::Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn read_le(bytes: &[u8]) -> Self;
    fn write_le(self, out: &mut Vec<u8>);

    /// C := alpha * A(m x k) * B(k x n) + beta * C(m x n), arbitrary strides.
    ///
    /// # Safety
    /// Pointers must cover the strided index ranges implied by the dims.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major tensor. Shape extents are always positive.
#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        debug_assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Tensor { shape: shape.to_vec(), data: vec![E::zero(); n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("tensor shape {shape:?} has a non-positive extent")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Config(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn convert<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| F::from_f64(x.as_f64())).collect(),
        }
    }
}

impl<E> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

/// One named parameter.
#[derive(Clone, Debug)]
pub struct Param<E> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Iteration order is insertion
/// order and is part of every downstream contract (checkpoint layout,
/// resampling draw order, gradient alignment), so no hashing is involved
/// anywhere on the value path.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E> {
    entries: Vec<Param<E>>,
    by_name: HashMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.by_name.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.by_name.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<E>> {
        self.entries.iter_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param<E>> {
        self.entries.iter().filter(|p| p.trainable)
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = &mut Param<E>> {
        self.entries.iter_mut().filter(|p| p.trainable)
    }

    pub fn trainable_scalars(&self) -> usize {
        self.trainable().map(|p| p.tensor.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.tensor.all_finite())
    }

    pub fn convert<F: Element>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for p in &self.entries {
            out.insert(p.name.clone(), p.tensor.convert::<F>(), p.trainable).unwrap();
        }
        out
    }

    /// Check that `grads` carries exactly this store's trainable entries,
    /// same names, same order, same shapes.
    pub fn check_grad_alignment(&self, grads: &ParamStore<E>) -> Result<()> {
        let mine: Vec<&Param<E>> = self.trainable().collect();
        if mine.len() != grads.len() {
            return Err(Error::Config(format!(
                "gradient store has {} entries, expected {} trainable parameters",
                grads.len(),
                mine.len()
            )));
        }
        for (p, g) in mine.iter().zip(grads.iter()) {
            if p.name != g.name {
                return Err(Error::Config(format!(
                    "gradient order mismatch: `{}` vs `{}`",
                    g.name, p.name
                )));
            }
            if p.tensor.shape() != g.tensor.shape() {
                return Err(Error::Config(format!(
                    "gradient for `{}` has shape {:?}, parameter is {:?}",
                    p.name,
                    g.tensor.shape(),
                    p.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(&[], vec![]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.clone().reshaped(&[4]).unwrap();
        assert_eq!(r.shape(), &[4]);
        assert_eq!(r.data(), t.data());
        assert!(t.clone().reshaped(&[3]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[2]), true).unwrap();
        let err = s.insert("w", Tensor::zeros(&[2]), true).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn iteration_is_insertion_order() {
        let mut s = ParamStore::<f32>::new();
        for name in ["zeta", "alpha", "mid"] {
            s.insert(name, Tensor::zeros(&[1]), true).unwrap();
        }
        let names: Vec<&str> = s.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["zeta", "alpha", "mid"]);
    }

    #[test]
    fn grad_alignment_checks_names_and_shapes() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[2, 2]), true).unwrap();
        s.insert("running", Tensor::zeros(&[2]), false).unwrap();
        s.insert("b", Tensor::zeros(&[2]), true).unwrap();

        let mut g = ParamStore::<f32>::new();
        g.insert("w", Tensor::zeros(&[2, 2]), true).unwrap();
        g.insert("b", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.check_grad_alignment(&g).is_ok());

        let mut bad = ParamStore::<f32>::new();
        bad.insert("w", Tensor::zeros(&[2, 2]), true).unwrap();
        bad.insert("b", Tensor::zeros(&[3]), true).unwrap();
        assert!(s.check_grad_alignment(&bad).is_err());
    }

    #[test]
    fn convert_roundtrip_f32_f64_exact() {
        let t = Tensor::<f32>::from_vec(&[3], vec![0.1, -2.5, 1e-7]).unwrap();
        let back: Tensor<f32> = t.convert::<f64>().convert();
        assert_eq!(t.data(), back.data());
    }
}
