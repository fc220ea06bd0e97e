//! Primitive differentiable operations.

use super::kernels::gemm;
use super::{Function, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

struct Add;
impl Function for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
    }
}

struct Sub;
impl Function for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
    }
}

struct Mul;
impl Function for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![
            needs[0].then(|| g.zip_map(x[1], |g, b| g * b)),
            needs[1].then(|| g.zip_map(x[0], |g, a| g * a)),
        ]
    }
}

struct Relu;
impl Function for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.zip_map(x[0], |g, a| if a > 0.0 { g } else { 0.0 }))]
    }
}

struct Exp;
impl Function for Exp {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, _: &[&Tensor], y: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.zip_map(y, |g, y| g * y))]
    }
}

struct Log;
impl Function for Log {
    fn name(&self) -> &'static str {
        "log"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.zip_map(x[0], |g, a| g / a))]
    }
}

struct Scale(f64);
impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let s = self.0;
        vec![Some(g.map(|v| v * s))]
    }
}

struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}
impl Function for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let da = needs[0].then(|| {
            let mut d = vec![0.0; m * k];
            gemm(m, n, k, 1.0, g.data(), false, x[1].data(), true, 0.0, &mut d);
            Tensor::from_parts(vec![m, k], d)
        });
        let db = needs[1].then(|| {
            let mut d = vec![0.0; k * n];
            gemm(k, m, n, 1.0, x[0].data(), true, g.data(), false, 0.0, &mut d);
            Tensor::from_parts(vec![k, n], d)
        });
        vec![da, db]
    }
}

fn transpose_data(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Transposes a row-major `rows x cols` matrix.
pub fn transpose_matrix(t: &Tensor) -> Result<Tensor> {
    if t.ndim() != 2 {
        return Err(shape_err!("transpose expects a matrix, got {:?}", t.shape()));
    }
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Ok(Tensor::from_parts(vec![c, r], transpose_data(r, c, t.data())))
}

struct Transpose;
impl Function for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(transpose_matrix(g).expect("matrix gradient"))]
    }
}

struct Reshape {
    shape: Vec<usize>,
}
impl Function for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::from_parts(self.shape.clone(), g.data().to_vec()))]
    }
}

/// Maps each flat input index to its flat index in the reduced output.
fn reduce_index_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let n: usize = shape.iter().product();
    let mut map = vec![0usize; n];
    let mut idx = vec![0usize; shape.len()];
    for slot in map.iter_mut() {
        let mut o = 0;
        for (ax, &i) in idx.iter().enumerate() {
            if !axes.contains(&ax) {
                o = o * shape[ax] + i;
            }
        }
        *slot = o;
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

struct Reduce {
    map: Vec<usize>,
    factor: f64,
}
impl Function for Reduce {
    fn name(&self) -> &'static str {
        "reduce"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let gd = g.data();
        let data = self.map.iter().map(|&o| gd[o] * self.factor).collect();
        vec![Some(Tensor::from_parts(x[0].shape().to_vec(), data))]
    }
}

struct AddRowBias;
impl Function for AddRowBias {
    fn name(&self) -> &'static str {
        "add_row_bias"
    }
    fn backward(&self, x: &[&Tensor], _: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let f = x[1].len();
        let db = needs[1].then(|| {
            let mut d = vec![0.0; f];
            for row in g.data().chunks(f) {
                for (a, b) in d.iter_mut().zip(row) {
                    *a += b;
                }
            }
            Tensor::from_parts(vec![f], d)
        });
        vec![needs[0].then(|| g.clone()), db]
    }
}

/// Operation defined by caller-supplied forward and backward closures.
struct Custom<B> {
    name: &'static str,
    backward: B,
}
impl<B> Function for Custom<B>
where
    B: Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>,
{
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, x: &[&Tensor], y: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        (self.backward)(x, y, g).into_iter().map(Some).collect()
    }
}

impl Tape {
    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.apply(&[a, b], out, Add))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.apply(&[a, b], out, Sub))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.apply(&[a, b], out, Mul))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.apply(&[a], out, Relu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.apply(&[a], out, Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.apply(&[a], out, Log))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.apply(&[a], out, Scale(-1.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.apply(&[a], out, Scale(s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: incompatible shapes {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut c);
        Ok(self.apply(&[a, b], Tensor::from_parts(vec![m, n], c), MatMul { m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = transpose_matrix(self.value(a))?;
        Ok(self.apply(&[a], out, Transpose))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(a).to_vec();
        let out = self.value(a).reshaped(shape)?;
        Ok(self.apply(&[a], out, Reshape { shape: old }))
    }

    /// Sums or averages over `axes`, dropping them from the shape. An empty
    /// axis list returns the input unchanged.
    pub fn reduce(&mut self, op: Reduction, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(shape_err!("reduce: axis {bad} invalid for shape {shape:?}"));
        }
        if axes.is_empty() {
            return Ok(a);
        }
        let (out_shape, map) = reduce_index_map(&shape, axes);
        let out_len: usize = out_shape.iter().product();
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let factor = match op {
            Reduction::Sum => 1.0,
            Reduction::Mean => {
                if count == 0 {
                    return Err(shape_err!("mean over an empty axis"));
                }
                1.0 / count as f64
            }
        };
        let mut out = vec![0.0; out_len];
        for (&o, &v) in map.iter().zip(self.value(a).data()) {
            out[o] += v;
        }
        if op == Reduction::Mean {
            for v in &mut out {
                *v *= factor;
            }
        }
        Ok(self.apply(&[a], Tensor::from_parts(out_shape, out), Reduce { map, factor }))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.reduce(Reduction::Sum, a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.reduce(Reduction::Mean, a, &axes)
    }

    /// `x[N, F] + b[F]` with the bias repeated over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(shape_err!("add_row_bias: {:?} + {:?}", sx, sb));
        }
        let f = sb[0];
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(f) {
            for (a, b) in row.iter_mut().zip(&bias) {
                *a += b;
            }
        }
        Ok(self.apply(&[x, b], out, AddRowBias))
    }

    /// Records an operation with a caller-provided gradient rule. `backward`
    /// maps (inputs, output, output gradient) to one gradient per input.
    pub fn custom<B>(&mut self, name: &'static str, inputs: &[Var], output: Tensor, backward: B) -> Var
    where
        B: Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + 'static,
    {
        self.apply(inputs, output, Custom { name, backward })
    }
}
