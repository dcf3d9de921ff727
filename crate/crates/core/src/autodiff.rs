//! Reverse-mode automatic differentiation over scalar graphs.
//!
//! A [`Tape`] records every scalar operation as a node together with the
//! local partial derivatives with respect to its parents. Node ids are
//! assigned in creation order, so the tape is always topologically sorted
//! and [`Tape::backward`] is a single reverse sweep.
//!
//! The [`Real`] trait abstracts over `f64` and [`Var`] so density code can be
//! written once and evaluated either plainly (MCMC, prediction) or on a tape
//! (training).

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

/// Primitive kind recorded for every tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpTag {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Softplus,
    PowConst,
    LnGamma,
    LogSumExp,
    Affine,
    Sum,
}

impl fmt::Display for OpTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("domain error in {op}: argument {argument} (node {node})")]
    Domain { op: OpTag, argument: f64, node: usize },
    #[error("backward already ran on this tape; call reset() before reusing it")]
    StaleTape,
    #[error("output variable does not belong to this tape")]
    ForeignVar,
    #[error("log_sum_exp of an empty list")]
    EmptyInput,
    #[error("length mismatch: expected {expected}, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    InvalidStep(f64),
}

/// Read-only view of one recorded node.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeNode {
    pub value: f64,
    pub op: OpTag,
    pub parents: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy)]
struct Node {
    value: f64,
    op: OpTag,
    edge_start: usize,
    edge_end: usize,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: Vec<Node>,
    edges: Vec<(usize, f64)>,
    error: Option<AutodiffError>,
    consumed: bool,
}

/// A single-threaded recording of scalar operations.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// A scalar living on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("index", &self.index)
            .field("value", &self.value)
            .finish()
    }
}

/// Adjoints of every node after a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adjoints[v.index]
    }

    pub fn wrt_all(&self, vars: &[Var<'_>]) -> Vec<f64> {
        vars.iter().map(|v| self.adjoints[v.index]).collect()
    }

    pub fn len(&self) -> usize {
        self.adjoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjoints.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::with_capacity(nodes),
                edges: Vec::with_capacity(nodes * 2),
                error: None,
                consumed: false,
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all nodes so the tape can record a fresh graph.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.edges.clear();
        inner.error = None;
        inner.consumed = false;
    }

    /// First domain violation recorded since the last reset, if any.
    pub fn error(&self) -> Option<AutodiffError> {
        self.inner.borrow().error.clone()
    }

    pub fn node(&self, index: usize) -> Option<TapeNode> {
        let inner = self.inner.borrow();
        inner.nodes.get(index).map(|n| TapeNode {
            value: n.value,
            op: n.op,
            parents: inner.edges[n.edge_start..n.edge_end].to_vec(),
        })
    }

    /// A differentiable leaf.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, OpTag::Leaf, &[])
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// A leaf whose adjoint is never reported as a parameter gradient.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(value, OpTag::Constant, &[])
    }

    pub fn constants(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.constant(v)).collect()
    }

    fn push(&self, value: f64, op: OpTag, parents: &[(usize, f64)]) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let edge_start = inner.edges.len();
        inner.edges.extend_from_slice(parents);
        let edge_end = inner.edges.len();
        let index = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            edge_start,
            edge_end,
        });
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn push_iter(
        &self,
        value: f64,
        op: OpTag,
        parents: impl Iterator<Item = (usize, f64)>,
    ) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let edge_start = inner.edges.len();
        inner.edges.extend(parents);
        let edge_end = inner.edges.len();
        let index = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            edge_start,
            edge_end,
        });
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn domain_error(&self, op: OpTag, argument: f64) -> Var<'_> {
        let node = self.len();
        {
            let mut inner = self.inner.borrow_mut();
            if inner.error.is_none() {
                inner.error = Some(AutodiffError::Domain { op, argument, node });
            }
        }
        self.push(f64::NAN, op, &[])
    }

    /// Reverse sweep from `output`. A tape can be swept once per recording.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, AutodiffError> {
        if !std::ptr::eq(output.tape, self) {
            return Err(AutodiffError::ForeignVar);
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(AutodiffError::StaleTape);
        }
        if let Some(err) = inner.error.clone() {
            return Err(err);
        }
        inner.consumed = true;
        let mut adjoints = vec![0.0; inner.nodes.len()];
        adjoints[output.index] = 1.0;
        for i in (0..=output.index).rev() {
            let adj = adjoints[i];
            if adj == 0.0 {
                continue;
            }
            let node = inner.nodes[i];
            for &(parent, partial) in &inner.edges[node.edge_start..node.edge_end] {
                adjoints[parent] += adj * partial;
            }
        }
        for (adj, node) in adjoints.iter_mut().zip(&inner.nodes) {
            if node.op == OpTag::Constant {
                *adj = 0.0;
            }
        }
        Ok(Gradients { adjoints })
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, value: f64, op: OpTag, partial: f64) -> Var<'t> {
        self.tape.push(value, op, &[(self.index, partial)])
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary(e, OpTag::Exp, e)
    }

    pub fn ln(self) -> Var<'t> {
        if !(self.value > 0.0) {
            return self.tape.domain_error(OpTag::Ln, self.value);
        }
        self.unary(self.value.ln(), OpTag::Ln, 1.0 / self.value)
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value.tanh();
        self.unary(t, OpTag::Tanh, 1.0 - t * t)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let s = sigmoid(self.value);
        self.unary(s, OpTag::Sigmoid, s * (1.0 - s))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus(self.value), OpTag::Softplus, sigmoid(self.value))
    }

    /// `self^exponent` for a constant exponent.
    pub fn powf(self, exponent: f64) -> Var<'t> {
        let x = self.value;
        let integral = exponent.fract() == 0.0;
        if x < 0.0 && !integral || x == 0.0 && exponent < 1.0 {
            return self.tape.domain_error(OpTag::PowConst, x);
        }
        self.unary(
            x.powf(exponent),
            OpTag::PowConst,
            exponent * x.powf(exponent - 1.0),
        )
    }

    pub fn ln_gamma(self) -> Var<'t> {
        if !(self.value > 0.0) {
            return self.tape.domain_error(OpTag::LnGamma, self.value);
        }
        self.unary(
            ln_gamma(self.value),
            OpTag::LnGamma,
            digamma(self.value),
        )
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }
}

/// `log Σ exp(x_i)` with max-shift stabilization.
pub fn log_sum_exp<'t>(xs: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
    let first = xs.first().ok_or(AutodiffError::EmptyInput)?;
    let values: Vec<f64> = xs.iter().map(|x| x.value).collect();
    let value = log_sum_exp_f64(&values);
    if !value.is_finite() {
        // all −∞ (or a NaN input); partials are undefined
        return Ok(first.tape.push_iter(value, OpTag::LogSumExp, std::iter::empty()));
    }
    Ok(first.tape.push_iter(
        value,
        OpTag::LogSumExp,
        xs.iter().map(|x| (x.index, (x.value - value).exp())),
    ))
}

/// `bias + Σ weights_k · inputs_k` as one fused node.
pub fn affine<'t>(
    weights: &[Var<'t>],
    inputs: &[Var<'t>],
    bias: Var<'t>,
) -> Result<Var<'t>, AutodiffError> {
    if weights.len() != inputs.len() {
        return Err(AutodiffError::Length {
            expected: weights.len(),
            actual: inputs.len(),
        });
    }
    let value = bias.value
        + weights
            .iter()
            .zip(inputs)
            .map(|(w, x)| w.value * x.value)
            .sum::<f64>();
    let parents = std::iter::once((bias.index, 1.0))
        .chain(weights.iter().zip(inputs).map(|(w, x)| (w.index, x.value)))
        .chain(weights.iter().zip(inputs).map(|(w, x)| (x.index, w.value)));
    Ok(bias.tape.push_iter(value, OpTag::Affine, parents))
}

/// `bias + Σ weights_k · inputs_k` for constant inputs; only the weights and
/// bias receive adjoints.
pub fn affine_const<'t>(
    weights: &[Var<'t>],
    inputs: &[f64],
    bias: Var<'t>,
) -> Result<Var<'t>, AutodiffError> {
    if weights.len() != inputs.len() {
        return Err(AutodiffError::Length {
            expected: weights.len(),
            actual: inputs.len(),
        });
    }
    let value = bias.value
        + weights
            .iter()
            .zip(inputs)
            .map(|(w, x)| w.value * x)
            .sum::<f64>();
    let parents = std::iter::once((bias.index, 1.0))
        .chain(weights.iter().zip(inputs).map(|(w, &x)| (w.index, x)));
    Ok(bias.tape.push_iter(value, OpTag::Affine, parents))
}

/// Sum of a non-empty list as one node.
pub fn sum<'t>(xs: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
    let first = xs.first().ok_or(AutodiffError::EmptyInput)?;
    let value = xs.iter().map(|x| x.value).sum();
    Ok(first
        .tape
        .push_iter(value, OpTag::Sum, xs.iter().map(|x| (x.index, 1.0))))
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(
            self.value + rhs.value,
            OpTag::Add,
            &[(self.index, 1.0), (rhs.index, 1.0)],
        )
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(
            self.value - rhs.value,
            OpTag::Sub,
            &[(self.index, 1.0), (rhs.index, -1.0)],
        )
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(
            self.value * rhs.value,
            OpTag::Mul,
            &[(self.index, rhs.value), (rhs.index, self.value)],
        )
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        if rhs.value == 0.0 {
            return self.tape.domain_error(OpTag::Div, rhs.value);
        }
        let q = self.value / rhs.value;
        self.tape.push(
            q,
            OpTag::Div,
            &[(self.index, 1.0 / rhs.value), (rhs.index, -q / rhs.value)],
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, OpTag::Neg, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.value + rhs, OpTag::Add, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.value - rhs, OpTag::Sub, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(self.value * rhs, OpTag::Mul, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        if rhs == 0.0 {
            return self.tape.domain_error(OpTag::Div, rhs);
        }
        self.unary(self.value / rhs, OpTag::Div, 1.0 / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.unary(self - rhs.value, OpTag::Sub, -1.0)
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

/// Scalars that support the operations used by the density and network code.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(&self) -> f64;
    /// A constant living alongside `self` (on the same tape for [`Var`]).
    fn lift(&self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;
    fn powf(self, exponent: f64) -> Self;
    fn ln_gamma(self) -> Self;
    /// Panics on an empty slice.
    fn log_sum_exp(xs: &[Self]) -> Self;
    /// Panics on an empty slice.
    fn sum(xs: &[Self]) -> Self;
    fn affine(weights: &[Self], inputs: &[Self], bias: Self) -> Self;
    /// `bias + Σ weights_k · inputs_k` with constant inputs.
    fn affine_const(weights: &[Self], inputs: &[f64], bias: Self) -> Self;
}

impl Real for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn lift(&self, c: f64) -> Self {
        c
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn softplus(self) -> Self {
        softplus(self)
    }
    fn powf(self, exponent: f64) -> Self {
        f64::powf(self, exponent)
    }
    fn ln_gamma(self) -> Self {
        ln_gamma(self)
    }
    fn log_sum_exp(xs: &[Self]) -> Self {
        assert!(!xs.is_empty(), "log_sum_exp of an empty list");
        log_sum_exp_f64(xs)
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
    fn affine(weights: &[Self], inputs: &[Self], bias: Self) -> Self {
        bias + weights.iter().zip(inputs).map(|(w, x)| w * x).sum::<f64>()
    }
    fn affine_const(weights: &[Self], inputs: &[f64], bias: Self) -> Self {
        bias + weights.iter().zip(inputs).map(|(w, x)| w * x).sum::<f64>()
    }
}

impl<'t> Real for Var<'t> {
    fn value(&self) -> f64 {
        self.value
    }
    fn lift(&self, c: f64) -> Self {
        self.tape.constant(c)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn ln(self) -> Self {
        Var::ln(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn sigmoid(self) -> Self {
        Var::sigmoid(self)
    }
    fn softplus(self) -> Self {
        Var::softplus(self)
    }
    fn powf(self, exponent: f64) -> Self {
        Var::powf(self, exponent)
    }
    fn ln_gamma(self) -> Self {
        Var::ln_gamma(self)
    }
    fn log_sum_exp(xs: &[Self]) -> Self {
        log_sum_exp(xs).expect("log_sum_exp of an empty list")
    }
    fn sum(xs: &[Self]) -> Self {
        sum(xs).expect("sum of an empty list")
    }
    fn affine(weights: &[Self], inputs: &[Self], bias: Self) -> Self {
        affine(weights, inputs, bias).expect("affine length mismatch")
    }
    fn affine_const(weights: &[Self], inputs: &[f64], bias: Self) -> Self {
        affine_const(weights, inputs, bias).expect("affine length mismatch")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp_f64(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

// ---------------------------------------------------------------------------
// Parameter storage and optimization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat trainable parameters with named, disjoint blocks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    values: Vec<f64>,
    blocks: Vec<ParamBlock>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("parameter block `{0}` already registered")]
    Duplicate(String),
    #[error("unknown parameter block `{0}`")]
    Unknown(String),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block of `len` parameters initialized by `init(i)`.
    pub fn register(
        &mut self,
        name: &str,
        len: usize,
        mut init: impl FnMut(usize) -> f64,
    ) -> Result<std::ops::Range<usize>, ParamError> {
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let offset = self.values.len();
        self.values.extend((0..len).map(&mut init));
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            offset,
            len,
        });
        Ok(offset..offset + len)
    }

    pub fn range(&self, name: &str) -> Result<std::ops::Range<usize>, ParamError> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| b.offset..b.offset + b.len)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&[f64], ParamError> {
        let r = self.range(name)?;
        Ok(&self.values[r])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64], ParamError> {
        let r = self.range(name)?;
        Ok(&mut self.values[r])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Name of the block holding flat index `i`, with the offset inside it.
    pub fn locate(&self, i: usize) -> Option<(&str, usize)> {
        self.blocks
            .iter()
            .find(|b| i >= b.offset && i < b.offset + b.len)
            .map(|b| (b.name.as_str(), i - b.offset))
    }

    /// Places every parameter on `tape`, as leaves when `trainable`, as
    /// constants otherwise.
    pub fn on_tape<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        if trainable {
            tape.vars(&self.values)
        } else {
            tape.constants(&self.values)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm clipping threshold applied before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient {value} for parameter `{name}`[{offset}]")]
    NonFinite {
        name: String,
        offset: usize,
        value: f64,
    },
    #[error("gradient length {actual} does not match {expected} parameters")]
    Length { expected: usize, actual: usize },
    #[error("invalid optimizer setting: {0}")]
    Config(String),
}

/// Bias-corrected Adam state for one [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Result<Self, OptimError> {
        let c = &config;
        if !(c.learning_rate > 0.0) {
            return Err(OptimError::Config("learning_rate must be > 0".into()));
        }
        if !(c.beta1 > 0.0 && c.beta1 < 1.0 && c.beta2 > 0.0 && c.beta2 < 1.0) {
            return Err(OptimError::Config("beta1, beta2 must lie in (0, 1)".into()));
        }
        if !(c.epsilon > 0.0) {
            return Err(OptimError::Config("epsilon must be > 0".into()));
        }
        if matches!(c.clip_norm, Some(n) if !(n > 0.0)) {
            return Err(OptimError::Config("clip_norm must be > 0".into()));
        }
        Ok(AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            config,
        })
    }

    /// One update in place. Rejects the whole step if any gradient is
    /// non-finite, leaving both parameters and state untouched.
    pub fn step(&mut self, params: &mut ParamStore, gradients: &[f64]) -> Result<(), OptimError> {
        let n = params.len();
        if gradients.len() != n || self.first_moment.len() != n {
            return Err(OptimError::Length {
                expected: n,
                actual: gradients.len(),
            });
        }
        if let Some((i, &g)) = gradients.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            let (name, offset) = params.locate(i).unwrap_or(("?", i));
            return Err(OptimError::NonFinite {
                name: name.to_string(),
                offset,
                value: g,
            });
        }
        let scale = match self.config.clip_norm {
            Some(max) => {
                let norm = gradients.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(gradients)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let g = g * scale;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    /// max over coordinates of |g_analytic − g_fd| / max(1, |g_fd|)
    pub max_rel_error: f64,
    pub coordinates: Vec<CoordinateCheck>,
    /// Coordinates whose perturbed evaluations were not finite.
    pub non_finite: Vec<usize>,
}

/// Compares tape gradients of `f` at `params` against central differences.
pub fn finite_diff_check<F>(f: F, params: &[f64], h: f64) -> Result<FiniteDiffReport, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(AutodiffError::InvalidStep(h));
    }
    let tape = Tape::new();
    let vars = tape.vars(params);
    let out = f(&tape, &vars);
    let grads = tape.backward(out)?;
    let analytic = grads.wrt_all(&vars);

    let eval = |x: &[f64]| -> f64 {
        let tape = Tape::new();
        let vars = tape.constants(x);
        f(&tape, &vars).value()
    };

    let mut coordinates = Vec::with_capacity(params.len());
    let mut non_finite = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    let mut x = params.to_vec();
    for i in 0..params.len() {
        x[i] = params[i] + h;
        let up = eval(&x);
        x[i] = params[i] - h;
        let down = eval(&x);
        x[i] = params[i];
        let numeric = (up - down) / (2.0 * h);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            non_finite.push(i);
            coordinates.push(CoordinateCheck {
                analytic: analytic[i],
                numeric,
                rel_error: f64::NAN,
            });
            continue;
        }
        let rel_error = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_rel_error = max_rel_error.max(rel_error);
        coordinates.push(CoordinateCheck {
            analytic: analytic[i],
            numeric,
            rel_error,
        });
    }
    Ok(FiniteDiffReport {
        max_rel_error,
        coordinates,
        non_finite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_and_softplus_at_zero() {
        let tape = Tape::new();
        let x = tape.var(0.0);
        assert_eq!(x.sigmoid().value(), 0.5);
        let sp = x.softplus();
        assert!((sp.value() - 2f64.ln()).abs() < 1e-15);
        let g = tape.backward(sp).unwrap();
        assert!((g.wrt(x) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_pair() {
        let tape = Tape::new();
        let a = tape.var(0.0);
        let b = tape.var(0.0);
        let out = log_sum_exp(&[a, b]).unwrap();
        assert!((out.value() - 2f64.ln()).abs() < 1e-15);
        let g = tape.backward(out).unwrap();
        assert!((g.wrt(a) - 0.5).abs() < 1e-15);
        assert!((g.wrt(b) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let g = tape.backward(x * x).unwrap();
        assert_eq!(g.wrt(x), 6.0);

        let tape = Tape::new();
        let x = tape.var(0.0);
        let g = tape.backward(x.sigmoid()).unwrap();
        assert_eq!(g.wrt(x), 0.25);

        let tape = Tape::new();
        let x = tape.var(7.0);
        let g = tape.backward(x.ln().exp()).unwrap();
        assert!((g.wrt(x) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn repeated_backward_is_rejected_until_reset() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let y = x * 3.0;
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), AutodiffError::StaleTape);
        tape.reset();
        let x = tape.var(2.0);
        let g = tape.backward(x * 3.0).unwrap();
        assert_eq!(g.wrt(x), 3.0);
    }

    #[test]
    fn foreign_output_is_rejected() {
        let a = Tape::new();
        let b = Tape::new();
        let x = b.var(1.0);
        assert_eq!(a.backward(x).unwrap_err(), AutodiffError::ForeignVar);
    }

    #[test]
    fn log_of_nonpositive_is_a_domain_error() {
        let tape = Tape::new();
        let x = tape.var(-1.0);
        let y = x.ln() + 1.0;
        match tape.backward(y) {
            Err(AutodiffError::Domain { op, argument, .. }) => {
                assert_eq!(op, OpTag::Ln);
                assert_eq!(argument, -1.0);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
        let tape = Tape::new();
        let y = tape.var(0.0).ln_gamma();
        assert!(matches!(
            tape.backward(y),
            Err(AutodiffError::Domain { op: OpTag::LnGamma, .. })
        ));
    }

    #[test]
    fn tape_records_parents_in_topological_order() {
        let tape = Tape::new();
        let x = tape.var(1.5);
        let y = tape.var(2.0);
        let z = x * y + x.exp();
        for i in 0..tape.len() {
            let node = tape.node(i).unwrap();
            assert!(node.parents.iter().all(|&(p, _)| p < i));
        }
        assert_eq!(tape.node(z.index()).unwrap().op, OpTag::Add);
        assert_eq!(tape.node(x.index()).unwrap().op, OpTag::Leaf);
    }

    #[test]
    fn affine_matches_manual_expansion() {
        let tape = Tape::new();
        let w = tape.vars(&[0.5, -1.0, 2.0]);
        let x = tape.vars(&[1.0, 3.0, -0.25]);
        let b = tape.var(0.1);
        let out = affine(&w, &x, b).unwrap();
        assert!((out.value() - (0.1 + 0.5 - 3.0 - 0.5)).abs() < 1e-15);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt_all(&w), vec![1.0, 3.0, -0.25]);
        assert_eq!(g.wrt_all(&x), vec![0.5, -1.0, 2.0]);
        assert_eq!(g.wrt(b), 1.0);
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut store = ParamStore::new();
        store.register("w", 3, |i| i as f64).unwrap();
        let mut adam = AdamState::new(3, AdamConfig::default()).unwrap();
        adam.step(&mut store, &[0.0; 3]).unwrap();
        assert_eq!(store.values(), &[0.0, 1.0, 2.0]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn adam_first_step_with_unit_gradient() {
        let mut store = ParamStore::new();
        store.register("w", 1, |_| 0.0).unwrap();
        let mut adam = AdamState::new(1, AdamConfig::default()).unwrap();
        adam.step(&mut store, &[1.0]).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((store.values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_is_coordinatewise() {
        let mut a = ParamStore::new();
        a.register("w", 2, |i| [0.3, -0.7][i]).unwrap();
        let mut b = ParamStore::new();
        b.register("w", 2, |i| [-0.7, 0.3][i]).unwrap();
        let cfg = AdamConfig {
            clip_norm: None,
            ..Default::default()
        };
        let mut sa = AdamState::new(2, cfg).unwrap();
        let mut sb = AdamState::new(2, cfg).unwrap();
        for k in 0..5 {
            let g = [0.1 * k as f64, -2.0];
            sa.step(&mut a, &g).unwrap();
            sb.step(&mut b, &[g[1], g[0]]).unwrap();
        }
        assert_eq!(a.values()[0], b.values()[1]);
        assert_eq!(a.values()[1], b.values()[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut store = ParamStore::new();
        store.register("critic", 2, |_| 1.0).unwrap();
        let mut adam = AdamState::new(2, AdamConfig::default()).unwrap();
        let err = adam.step(&mut store, &[0.0, f64::NAN]).unwrap_err();
        match err {
            OptimError::NonFinite { name, offset, .. } => {
                assert_eq!(name, "critic");
                assert_eq!(offset, 1);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(adam.step_count, 0);
        assert_eq!(store.values(), &[1.0, 1.0]);
    }

    #[test]
    fn clipping_bounds_the_update_direction() {
        let mut store = ParamStore::new();
        store.register("w", 2, |_| 0.0).unwrap();
        let cfg = AdamConfig {
            clip_norm: Some(1.0),
            ..Default::default()
        };
        let mut adam = AdamState::new(2, cfg).unwrap();
        adam.step(&mut store, &[300.0, 400.0]).unwrap();
        // clipped to (0.6, 0.8); Adam's first step is sign-like
        assert!(store.values().iter().all(|v| (v + 1e-3).abs() < 1e-9));
        assert!((adam.first_moment[0] - 0.06).abs() < 1e-12);
    }

    #[test]
    fn param_store_blocks_are_disjoint() {
        let mut store = ParamStore::new();
        let a = store.register("a", 3, |_| 1.0).unwrap();
        let b = store.register("b", 2, |_| 2.0).unwrap();
        assert_eq!(a, 0..3);
        assert_eq!(b, 3..5);
        assert_eq!(store.get("b").unwrap(), &[2.0, 2.0]);
        assert!(store.register("a", 1, |_| 0.0).is_err());
        assert_eq!(store.locate(4), Some(("b", 1)));
        assert!(store.get("missing").is_err());
    }

    #[test]
    fn finite_diff_sum_of_squares() {
        let x = [0.3, -1.2, 2.5, 0.01];
        let report = finite_diff_check(
            |_, v| v.iter().fold(None, |acc: Option<Var<'_>>, &x| {
                Some(match acc {
                    Some(a) => a + x * x,
                    None => x * x,
                })
            })
            .unwrap(),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        assert!(matches!(
            finite_diff_check(|_, v| v[0], &[1.0], 1.0),
            Err(AutodiffError::InvalidStep(_))
        ));
    }
}
