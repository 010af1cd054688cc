//! Importance-weighted low-rank adapters.
//!
//! An adapter wraps one frozen weight `W₀ ∈ ℝ^{d_out×d_in}` and holds
//! `r` rank-1 directions. Direction `i` is the outer product `bᵢ aᵢᵀ`
//! gated by a learnable scalar importance `wᵢ`:
//!
//! ```text
//! ΔW = (α / r) · Σ_{i active} wᵢ · bᵢ aᵢᵀ
//! ```
//!
//! The `aᵢ` are stored as the rows of `A ∈ ℝ^{r×d_in}` and the `bᵢ` as the
//! columns of `B ∈ ℝ^{d_out×r}`. The scale uses the candidate rank `r`, not
//! the number of surviving directions, so pruning never rescales survivors.
//!
//! Sparsity comes from [`DynLoraAdapter::soft_shrink_weights`], the proximal
//! map of `τ‖w‖₁`, followed by [`DynLoraAdapter::prune`], which deactivates
//! directions whose importance has collapsed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DynLoraAdapter<T> {
    base: Tensor<T>,
    a: Tensor<T>,
    b: Tensor<T>,
    w: Tensor<T>,
    active: Vec<bool>,
    alpha: f64,
}

/// Outcome of one [`DynLoraAdapter::prune`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub layer: String,
    /// Every inactive direction after the call, including earlier prunes.
    pub pruned: Vec<usize>,
    /// Directions deactivated by this call.
    pub newly_pruned: Vec<usize>,
    pub surviving: usize,
    pub max_pruned_abs_w: f64,
    /// Upper bound on the spectral-norm change of ΔW caused by this call:
    /// `scale · Σ |wᵢ|·‖bᵢ‖₂·‖aᵢ‖₂` over the newly pruned directions.
    pub perturbation_bound: f64,
}

/// Graph handles for the trainable parts of one adapter.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
    pub w: Var,
}

impl<T: Real> DynLoraAdapter<T> {
    /// Wraps `base` with `r_max` fresh directions: `aᵢ ~ N(0, 1/d_in)`,
    /// `bᵢ = 0`, `wᵢ = 1`, so ΔW starts at exactly zero.
    pub fn init(base: Tensor<T>, r_max: usize, alpha: f64, seed: u64) -> Result<Self> {
        let (d_out, d_in) = base.dims2()?;
        if r_max < 1 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(alpha.is_finite()) {
            return Err(Error::Config("adapter alpha must be finite".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / d_in as f64).sqrt()).expect("positive std");
        let a: Vec<T> = (0..r_max * d_in).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
        Ok(Self {
            base: base.with_requires_grad(false),
            a: Tensor::new(vec![r_max, d_in], a)?.with_requires_grad(true),
            b: Tensor::zeros(vec![d_out, r_max]).with_requires_grad(true),
            w: Tensor::full(vec![r_max], T::one()).with_requires_grad(true),
            active: vec![true; r_max],
            alpha,
        })
    }

    /// Rebuilds an adapter from stored parts (checkpoint loading). Inactive
    /// directions get `w = 0`.
    pub fn from_parts(
        base: Tensor<T>,
        a: Tensor<T>,
        b: Tensor<T>,
        w: Tensor<T>,
        active: Vec<bool>,
        alpha: f64,
    ) -> Result<Self> {
        let (d_out, d_in) = base.dims2()?;
        let r = active.len();
        if a.shape() != [r, d_in] || b.shape() != [d_out, r] || w.shape() != [r] || r == 0 {
            return Err(Error::dim("adapter parts", a.shape(), b.shape()));
        }
        let mut ad = Self {
            base: base.with_requires_grad(false),
            a: a.with_requires_grad(true),
            b: b.with_requires_grad(true),
            w: w.with_requires_grad(true),
            active,
            alpha,
        };
        ad.enforce_mask();
        Ok(ad)
    }

    pub fn r_max(&self) -> usize {
        self.active.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `α / r_max`
    pub fn scale(&self) -> f64 {
        self.alpha / self.r_max() as f64
    }

    pub fn d_in(&self) -> usize {
        self.base.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.base.shape()[0]
    }

    pub fn base(&self) -> &Tensor<T> {
        &self.base
    }

    pub fn a(&self) -> &Tensor<T> {
        &self.a
    }

    pub fn b(&self) -> &Tensor<T> {
        &self.b
    }

    pub fn w(&self) -> &Tensor<T> {
        &self.w
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn base_mut(&mut self) -> &mut Tensor<T> {
        &mut self.base
    }

    pub fn a_mut(&mut self) -> &mut Tensor<T> {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor<T> {
        &mut self.b
    }

    pub fn w_mut(&mut self) -> &mut Tensor<T> {
        &mut self.w
    }

    /// `(base, a, b, w)` borrowed together.
    pub fn parts_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>, &mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.base, &mut self.a, &mut self.b, &mut self.w)
    }

    /// Freezes or unfreezes the importance weights.
    pub fn set_importance_trainable(&mut self, on: bool) {
        self.w.set_requires_grad(on);
    }

    /// Direction `i` as `(aᵢ, bᵢ, wᵢ)`.
    pub fn direction(&self, i: usize) -> (Vec<T>, Vec<T>, T) {
        let d_in = self.d_in();
        let r = self.r_max();
        let a = self.a.data()[i * d_in..(i + 1) * d_in].to_vec();
        let b = (0..self.d_out()).map(|row| self.b.data()[row * r + i]).collect();
        (a, b, self.w.data()[i])
    }

    pub fn active_rank(&self) -> usize {
        self.active.iter().filter(|&&on| on).count()
    }

    /// Number of trainable scalars (a, b, and w when it is trainable).
    pub fn trainable_count(&self) -> usize {
        let mut n = self.a.numel() + self.b.numel();
        if self.w.requires_grad() {
            n += self.w.numel();
        }
        n
    }

    /// Per-direction gate `scale·wᵢ` for active directions, `0` otherwise.
    fn gates(&self) -> Vec<T> {
        let s = T::from_f64(self.scale());
        self.w
            .data()
            .iter()
            .zip(&self.active)
            .map(|(&w, &on)| if on { s * w } else { T::zero() })
            .collect()
    }

    /// Materialized `ΔW`.
    pub fn delta_w(&self) -> Tensor<T> {
        let (d_out, d_in, r) = (self.d_out(), self.d_in(), self.r_max());
        let gates = self.gates();
        let mut out = vec![T::zero(); d_out * d_in];
        let a = self.a.data();
        let b = self.b.data();
        for row in 0..d_out {
            let o = &mut out[row * d_in..(row + 1) * d_in];
            for i in 0..r {
                let coef = gates[i] * b[row * r + i];
                if coef == T::zero() {
                    continue;
                }
                for (v, av) in o.iter_mut().zip(&a[i * d_in..(i + 1) * d_in]) {
                    *v += coef * *av;
                }
            }
        }
        Tensor::new(vec![d_out, d_in], out).expect("shape by construction")
    }

    /// `W₀ + ΔW`, the weight that replaces the adapter after training.
    pub fn merge(&self) -> Tensor<T> {
        let delta = self.delta_w();
        let data = self.base.data().iter().zip(delta.data()).map(|(w, d)| *w + *d).collect();
        Tensor::new(self.base.shape().to_vec(), data).expect("shape by construction")
    }

    /// Records `x·W₀ᵀ + Σᵢ gateᵢ·(x·aᵢ)·bᵢᵀ` on `graph` in factored form.
    /// Only `a`, `b` and `w` can receive gradient; `W₀` is frozen.
    pub fn forward(&self, graph: &mut Graph<T>, x: Var) -> Result<(Var, AdapterVars)> {
        let d_in = self.d_in();
        match graph.shape(x) {
            [_, c] if *c == d_in => {}
            s => return Err(Error::dim("adapter forward", s, self.base.shape())),
        }
        let base = graph.leaf(&self.base);
        let y0 = graph.matmul_nt(x, base)?;
        let a = graph.leaf(&self.a);
        let b = graph.leaf(&self.b);
        let w = graph.leaf(&self.w);
        let s = T::from_f64(self.scale());
        let mask: Vec<T> = self.active.iter().map(|&on| if on { s } else { T::zero() }).collect();
        let mask = graph.constant(vec![self.r_max()], mask)?;
        let gate = graph.mul(w, mask)?;
        let u = graph.matmul_nt(x, a)?;
        let u = graph.scale_cols(u, gate)?;
        let y1 = graph.matmul_nt(u, b)?;
        let y = graph.add(y0, y1)?;
        Ok((y, AdapterVars { a, b, w }))
    }

    /// Proximal ℓ1 step on the active importance weights:
    /// `wᵢ ← sign(wᵢ)·max(|wᵢ| − τ, 0)`. Returns how many active weights
    /// are zero afterwards.
    pub fn soft_shrink_weights(&mut self, tau: f64) -> Result<usize> {
        self.soft_shrink_each(&vec![tau; self.r_max()])
    }

    /// [`DynLoraAdapter::soft_shrink_weights`] with a separate threshold
    /// `taus[i]` per direction.
    pub fn soft_shrink_each(&mut self, taus: &[f64]) -> Result<usize> {
        if taus.len() != self.r_max() {
            return Err(Error::dim("soft_shrink_each", &[taus.len()], &[self.r_max()]));
        }
        if let Some(t) = taus.iter().find(|t| !(**t >= 0.0)) {
            return Err(Error::Config(format!("shrinkage threshold must be >= 0, got {t}")));
        }
        let mut zeros = 0;
        for ((w, &on), &tau) in self.w.data_mut().iter_mut().zip(&self.active).zip(taus) {
            if !on {
                continue;
            }
            let mag = w.abs() - T::from_f64(tau);
            *w = if mag > T::zero() { w.signum() * mag } else { T::zero() };
            if *w == T::zero() {
                zeros += 1;
            }
        }
        Ok(zeros)
    }

    /// Deactivates every direction with `|wᵢ| ≤ epsilon` and zeroes its
    /// importance. Inactive directions stay inactive.
    pub fn prune(&mut self, epsilon: f64, layer: &str) -> Result<PruneReport> {
        if !(epsilon >= 0.0) {
            return Err(Error::Config(format!("prune epsilon must be >= 0, got {epsilon}")));
        }
        let scale = self.scale();
        let mut newly = Vec::new();
        let mut max_w: f64 = 0.0;
        let mut bound = 0.0;
        for i in 0..self.r_max() {
            if !self.active[i] {
                continue;
            }
            let w = self.w.data()[i].as_f64();
            if w.abs() <= epsilon {
                let (a, b, _) = self.direction(i);
                let na = a.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                bound += scale * w.abs() * na * nb;
                max_w = max_w.max(w.abs());
                self.active[i] = false;
                self.w.data_mut()[i] = T::zero();
                newly.push(i);
            }
        }
        let pruned: Vec<usize> = (0..self.r_max()).filter(|&i| !self.active[i]).collect();
        Ok(PruneReport {
            layer: layer.to_string(),
            surviving: self.r_max() - pruned.len(),
            pruned,
            newly_pruned: newly,
            max_pruned_abs_w: max_w,
            perturbation_bound: bound,
        })
    }

    /// Re-zeroes importance weights of inactive directions.
    pub(crate) fn enforce_mask(&mut self) {
        for (w, &on) in self.w.data_mut().iter_mut().zip(&self.active) {
            if !on {
                *w = T::zero();
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.a.zero_grad();
        self.b.zero_grad();
        self.w.zero_grad();
    }
}
