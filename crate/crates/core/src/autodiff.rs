//! Reverse-mode differentiation over the fixed set of vector primitives the
//! model and losses need.
//!
//! A [`Tape`] borrows a [`ParamStore`] and records one forward pass as a
//! list of nodes. [`Tape::backward`] walks the list in reverse and returns
//! the gradient of a scalar node, aligned with the store's flat view.
//! Tapes are single-use; the parameter store is never mutated through one.

use crate::{Error, Result};

/// Probabilities are clamped to this floor before taking a log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Pre-activations closer to zero than this count as sitting on a ReLU kink.
pub const KINK_THRESHOLD: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named dense tensors stored back to back in one flat buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    specs: Vec<TensorSpec>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<TensorId> {
        let name = name.into();
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(Error::Shape(format!(
                "tensor {name}: {} values for shape {shape:?}",
                values.len()
            )));
        }
        if self.specs.iter().any(|s| s.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor name {name}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor {name}")));
        }
        self.specs.push(TensorSpec {
            name,
            shape: shape.to_vec(),
            offset: self.data.len(),
        });
        self.data.extend(values);
        Ok(TensorId(self.specs.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn spec(&self, id: TensorId) -> &TensorSpec {
        &self.specs[id.0]
    }

    pub fn id(&self, name: &str) -> Option<TensorId> {
        self.specs.iter().position(|s| s.name == name).map(TensorId)
    }

    /// Id of the `index`-th tensor in declaration order.
    pub fn id_at(&self, index: usize) -> TensorId {
        assert!(index < self.specs.len(), "tensor index {index} out of range");
        TensorId(index)
    }

    pub fn tensor(&self, id: TensorId) -> &[f64] {
        let spec = &self.specs[id.0];
        &self.data[spec.offset..spec.offset + spec.len()]
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// A store with this layout and the given flat values.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParamStore> {
        if flat.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "flat view has {} entries, store has {}",
                flat.len(),
                self.data.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flat parameter view".into()));
        }
        Ok(ParamStore {
            specs: self.specs.clone(),
            data: flat.to_vec(),
        })
    }

    /// Name of the tensor holding flat coordinate `index`, with the offset inside it.
    pub fn locate(&self, index: usize) -> Option<(&str, usize)> {
        self.specs
            .iter()
            .find(|s| index >= s.offset && index < s.offset + s.len())
            .map(|s| (s.name.as_str(), index - s.offset))
    }
}

/// Scalar value plus gradient aligned with a [`ParamStore`]'s flat view.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Sign pattern of every ReLU pre-activation seen on the forward pass.
    pub activation_pattern: Vec<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(TensorId),
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Sub(Var, Var),
    Square(Var),
    Scale(Var, f64),
    AddConst(Var),
    Sum(Vec<Var>),
    Dot(Var, Vec<f64>),
    Stack(Vec<Var>),
    Distance(Var, Var),
    Cosine(Var, Var),
    Softmax(Var),
    Log(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    relu_inputs: Vec<f64>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            relu_inputs: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.tensor(id),
            _ => &self.nodes[v.0].value,
        }
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Const, value)
    }

    pub fn param(&mut self, id: TensorId) -> Var {
        self.push(Op::Param(id), Vec::new())
    }

    /// `W x + b` with `W` stored row-major, `b.len()` rows by `x.len()` columns.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.len() != bv.len() * xv.len() {
            return Err(Error::Shape(format!(
                "affine: weight has {} entries, expected {}x{}",
                wv.len(),
                bv.len(),
                xv.len()
            )));
        }
        let out = kernels::affine(wv, bv, xv);
        Ok(self.push(Op::Affine { x, w, b }, out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x).to_vec();
        let out = kernels::relu(&xv);
        self.relu_inputs.extend(xv);
        self.push(Op::Relu(x), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_len("sub", av, bv)?;
        let out = av.iter().zip(bv).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v * v).collect();
        self.push(Op::Square(x), out)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        self.push(Op::Scale(x, factor), out)
    }

    /// `x + c` for a constant vector `c`.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        same_len("add_const", xv, c)?;
        let out = xv.iter().zip(c).map(|(a, b)| a + b).collect();
        Ok(self.push(Op::AddConst(x), out))
    }

    /// Elementwise sum of equally shaped nodes, accumulated left to right.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("sum of no terms".into()))?;
        let mut out = self.value(*first).to_vec();
        for &x in &xs[1..] {
            let xv = self.value(x);
            same_len("sum", &out, xv)?;
            out.iter_mut().zip(xv).for_each(|(o, v)| *o += v);
        }
        Ok(self.push(Op::Sum(xs.to_vec()), out))
    }

    /// Scalar `Σ_i weights_i x_i` for constant weights.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        same_len("dot_const", xv, weights)?;
        let out = kernels::dot(xv, weights);
        Ok(self.push(Op::Dot(x, weights.to_vec()), vec![out]))
    }

    /// Concatenates one-element nodes into a vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let out = xs
            .iter()
            .map(|&x| match self.value(x) {
                [v] => Ok(*v),
                other => Err(Error::Shape(format!("stack: expected scalar, got length {}", other.len()))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.push(Op::Stack(xs.to_vec()), out))
    }

    /// Euclidean distance `‖u − v‖₂`.
    pub fn distance(&mut self, u: Var, v: Var) -> Result<Var> {
        let (uv, vv) = (self.value(u), self.value(v));
        same_len("distance", uv, vv)?;
        let d = kernels::euclidean(uv, vv);
        Ok(self.push(Op::Distance(u, v), vec![d]))
    }

    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let (uv, vv) = (self.value(u), self.value(v));
        same_len("cosine", uv, vv)?;
        let c = kernels::cosine(uv, vv)?;
        Ok(self.push(Op::Cosine(u, v), vec![c]))
    }

    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let zv = self.value(z);
        if zv.is_empty() {
            return Err(Error::InvalidArgument("softmax of an empty vector".into()));
        }
        let out = kernels::softmax(zv);
        Ok(self.push(Op::Softmax(z), out))
    }

    /// Elementwise `log(max(x, LOG_FLOOR))`.
    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(LOG_FLOOR).ln()).collect();
        self.push(Op::Log(x), out)
    }

    /// Signs of all ReLU pre-activations recorded so far.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.relu_inputs.iter().map(|&v| v > 0.0).collect()
    }

    /// Smallest |pre-activation| over all ReLUs, or `None` without ReLUs.
    pub fn min_abs_preactivation(&self) -> Option<f64> {
        self.relu_inputs.iter().map(|v| v.abs()).reduce(f64::min)
    }

    /// Gradient of the scalar node `output` with respect to every parameter.
    pub fn backward(&self, output: Var) -> Result<Vec<f64>> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got length {}",
                self.value(output).len()
            )));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    let offset = self.params.spec(*id).offset;
                    grad[offset..offset + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b);
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let cols = xv.len();
                    let mut gx = vec![0.0; cols];
                    let mut gw = vec![0.0; wv.len()];
                    for (r, &gr) in g.iter().enumerate() {
                        let row = &wv[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gx[c] += row[c] * gr;
                            gw[r * cols + c] = gr * xv[c];
                        }
                    }
                    accumulate(&mut adj, *x, gx);
                    accumulate(&mut adj, *w, gw);
                    accumulate(&mut adj, *b, g);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let gx = g.iter().zip(xv).map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 }).collect();
                    accumulate(&mut adj, *x, gx);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut adj, *a, g);
                }
                Op::Square(x) => {
                    let xv = self.value(*x);
                    let gx = g.iter().zip(xv).map(|(gi, v)| 2.0 * v * gi).collect();
                    accumulate(&mut adj, *x, gx);
                }
                Op::Scale(x, factor) => {
                    accumulate(&mut adj, *x, g.iter().map(|v| v * factor).collect());
                }
                Op::AddConst(x) => accumulate(&mut adj, *x, g),
                Op::Sum(xs) => {
                    for &x in xs {
                        accumulate(&mut adj, x, g.clone());
                    }
                }
                Op::Dot(x, weights) => {
                    accumulate(&mut adj, *x, weights.iter().map(|w| w * g[0]).collect());
                }
                Op::Stack(xs) => {
                    for (&x, &gi) in xs.iter().zip(&g) {
                        accumulate(&mut adj, x, vec![gi]);
                    }
                }
                Op::Distance(u, v) => {
                    let d = node.value[0];
                    let (uv, vv) = (self.value(*u), self.value(*v));
                    // Zero subgradient where the two points coincide.
                    let gu: Vec<f64> = if d > 0.0 {
                        uv.iter().zip(vv).map(|(a, b)| g[0] * (a - b) / d).collect()
                    } else {
                        vec![0.0; uv.len()]
                    };
                    accumulate(&mut adj, *v, gu.iter().map(|x| -x).collect());
                    accumulate(&mut adj, *u, gu);
                }
                Op::Cosine(u, v) => {
                    let c = node.value[0];
                    let (uv, vv) = (self.value(*u), self.value(*v));
                    let (nu, nv) = (kernels::norm(uv), kernels::norm(vv));
                    let gu = uv
                        .iter()
                        .zip(vv)
                        .map(|(a, b)| g[0] * (b / (nu * nv) - c * a / (nu * nu)))
                        .collect();
                    let gv = uv
                        .iter()
                        .zip(vv)
                        .map(|(a, b)| g[0] * (a / (nu * nv) - c * b / (nv * nv)))
                        .collect();
                    accumulate(&mut adj, *u, gu);
                    accumulate(&mut adj, *v, gv);
                }
                Op::Softmax(z) => {
                    let y = &node.value;
                    let inner = kernels::dot(&g, y);
                    let gz = y.iter().zip(&g).map(|(yi, gi)| yi * (gi - inner)).collect();
                    accumulate(&mut adj, *z, gz);
                }
                Op::Log(x) => {
                    let xv = self.value(*x);
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(gi, &v)| if v > LOG_FLOOR { gi / v } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *x, gx);
                }
            }
        }
        Ok(grad)
    }

    /// Value, gradient and activation pattern of `output` in one bundle.
    pub fn grad_result(&self, output: Var) -> Result<GradResult> {
        let gradient = self.backward(output)?;
        Ok(GradResult {
            value: self.scalar(output),
            gradient,
            activation_pattern: self.activation_pattern(),
        })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], target: Var, g: Vec<f64>) {
    match &mut adj[target.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn same_len(op: &str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{op}: lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Forward kernels shared by the tape and the tape-free inference path, so
/// both produce bit-identical values.
pub mod kernels {
    use crate::{Error, Result};

    pub fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let cols = x.len();
        b.iter()
            .enumerate()
            .map(|(r, &bias)| dot(&w[r * cols..(r + 1) * cols], x) + bias)
            .collect()
    }

    pub fn relu(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
        let (na, nb) = (norm(a), norm(b));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::InvalidArgument("cosine similarity of a zero-norm vector".into()));
        }
        Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
    }

    /// Softmax with max subtraction.
    pub fn softmax(z: &[f64]) -> Vec<f64> {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    /// Coordinates whose ±h probe crossed a ReLU kink.
    pub excluded: Vec<usize>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of `f` at `params` with central
/// differences `(f(θ + h eᵢ) − f(θ − h eᵢ)) / 2h`, coordinate by coordinate.
///
/// A coordinate is excluded when the ReLU activation pattern differs
/// between its two probes: the difference quotient straddles a kink there.
pub fn grad_check<F>(f: F, params: &ParamStore, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<GradResult>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let base = f(params)?;
    if base.gradient.len() != params.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries for {} parameters",
            base.gradient.len(),
            params.len()
        )));
    }
    if !base.value.is_finite() || base.gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("loss or gradient at the base point".into()));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        excluded: Vec::new(),
    };
    let mut probe = params.flat().to_vec();
    for i in 0..params.len() {
        let original = probe[i];
        probe[i] = original + h;
        let plus = f(&params.with_flat(&probe)?)?;
        probe[i] = original - h;
        let minus = f(&params.with_flat(&probe)?)?;
        probe[i] = original;
        if !plus.value.is_finite() || !minus.value.is_finite() {
            return Err(Error::NonFinite(format!("loss at perturbed coordinate {i}")));
        }
        if plus.activation_pattern != minus.activation_pattern {
            report.excluded.push(i);
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * h);
        let err = relative_error(base.gradient[i], numeric);
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
            report.worst_analytic = base.gradient[i];
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
