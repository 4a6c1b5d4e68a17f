//! Single-layer LSTM with full-sequence output.
//!
//! Gates are stacked in one `(4d, d_in + d)` matrix in the order input,
//! forget, candidate, output, acting on the concatenation `[x_t; h_{t-1}]`:
//!
//! ```text
//! i, f, o = σ(W_{i,f,o}·[x; h] + b)      g = tanh(W_g·[x; h] + b_g)
//! c_t = f ⊙ c_{t-1} + i ⊙ g              h_t = o ⊙ tanh(c_t)
//! ```

use crate::error::{Error, Result};
use crate::nn::ops::sigmoid;
use crate::nn::params::{Grads, ParamId, ParamStore, Rng};
use crate::tensor::{axpy, dot, Real, Tensor};

/// Hidden and cell vectors of one LSTM timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<F> {
    pub h: Vec<F>,
    pub c: Vec<F>,
}

impl<F: Real> LstmState<F> {
    pub fn zeros(hidden: usize) -> Self {
        Self { h: vec![F::zero(); hidden], c: vec![F::zero(); hidden] }
    }
}

#[derive(Clone, Debug)]
pub struct LstmStepCache<F> {
    /// `[x_t; h_{t-1}]`
    concat: Vec<F>,
    /// Activated gates `i, f, g, o`, each of width `d`.
    gates: Vec<F>,
    c_prev: Vec<F>,
    tanh_c: Vec<F>,
}

#[derive(Clone, Debug)]
pub struct LstmSequenceCache<F> {
    steps: Vec<LstmStepCache<F>>,
}

#[derive(Clone, Debug)]
pub struct Lstm {
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    /// Weights uniform in `±1/√(d_in + d)`, forget-gate bias 1, other biases 0.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = input_dim + hidden;
        let w = store.add_uniform(
            format!("{name}.w"),
            &[4 * hidden, fan_in],
            1.0 / (fan_in as f64).sqrt(),
            rng,
        )?;
        let bias = Tensor::from_fn(&[4 * hidden], |i| {
            if (hidden..2 * hidden).contains(&i) { F::one() } else { F::zero() }
        });
        let b = store.add(format!("{name}.b"), bias, true)?;
        Ok(Self { w, b, input_dim, hidden })
    }

    pub fn param_count(input_dim: usize, hidden: usize) -> usize {
        4 * (hidden * (input_dim + hidden) + hidden)
    }

    fn check<F: Real>(&self, store: &ParamStore<F>) -> Result<()> {
        let fan_in = self.input_dim + self.hidden;
        store.get(self.w).expect_shape(&[4 * self.hidden, fan_in])?;
        store.get(self.b).expect_shape(&[4 * self.hidden])
    }

    pub fn step<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &[F],
        state: &LstmState<F>,
    ) -> Result<(LstmState<F>, LstmStepCache<F>)> {
        let d = self.hidden;
        if x.len() != self.input_dim || state.h.len() != d || state.c.len() != d {
            return Err(Error::shape(format!(
                "lstm step: x {} / h {} / c {} for input {} hidden {d}",
                x.len(),
                state.h.len(),
                state.c.len(),
                self.input_dim
            )));
        }
        let (w, b) = (store.get(self.w).data(), store.get(self.b).data());
        let fan_in = self.input_dim + d;
        let mut concat = Vec::with_capacity(fan_in);
        concat.extend_from_slice(x);
        concat.extend_from_slice(&state.h);

        let mut gates: Vec<F> = (0..4 * d)
            .map(|r| b[r] + dot(&w[r * fan_in..(r + 1) * fan_in], &concat))
            .collect();
        for (r, g) in gates.iter_mut().enumerate() {
            *g = if (2 * d..3 * d).contains(&r) { g.tanh() } else { sigmoid(*g) };
        }
        let (i, rest) = gates.split_at(d);
        let (f, rest) = rest.split_at(d);
        let (g, o) = rest.split_at(d);
        let c: Vec<F> = (0..d).map(|j| f[j] * state.c[j] + i[j] * g[j]).collect();
        let tanh_c: Vec<F> = c.iter().map(|v| v.tanh()).collect();
        let h = (0..d).map(|j| o[j] * tanh_c[j]).collect();
        let cache = LstmStepCache { concat, gates, c_prev: state.c.clone(), tanh_c };
        Ok((LstmState { h, c }, cache))
    }

    /// Backward through one step given `dL/dh_t` and `dL/dc_t`. Returns
    /// `(dx_t, dh_{t-1}, dc_{t-1})`.
    pub fn step_backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &LstmStepCache<F>,
        dh: &[F],
        dc: &[F],
        grads: &mut Grads<F>,
    ) -> (Vec<F>, Vec<F>, Vec<F>) {
        let d = self.hidden;
        let fan_in = self.input_dim + d;
        let gates = &cache.gates;
        let (i, f, g, o) = (&gates[..d], &gates[d..2 * d], &gates[2 * d..3 * d], &gates[3 * d..]);

        let mut dpre = vec![F::zero(); 4 * d];
        let mut dc_prev = vec![F::zero(); d];
        for j in 0..d {
            let tc = cache.tanh_c[j];
            let d_o = dh[j] * tc;
            let dct = dc[j] + dh[j] * o[j] * (F::one() - tc * tc);
            let d_i = dct * g[j];
            let d_g = dct * i[j];
            let d_f = dct * cache.c_prev[j];
            dc_prev[j] = dct * f[j];
            dpre[j] = d_i * i[j] * (F::one() - i[j]);
            dpre[d + j] = d_f * f[j] * (F::one() - f[j]);
            dpre[2 * d + j] = d_g * (F::one() - g[j] * g[j]);
            dpre[3 * d + j] = d_o * o[j] * (F::one() - o[j]);
        }

        let w = store.get(self.w).data();
        let mut dconcat = vec![F::zero(); fan_in];
        {
            let (dw, db) = grads.pair(self.w, self.b);
            for (r, &dp) in dpre.iter().enumerate() {
                if dp == F::zero() {
                    continue;
                }
                db[r] = db[r] + dp;
                axpy(dp, &cache.concat, &mut dw[r * fan_in..(r + 1) * fan_in]);
                axpy(dp, &w[r * fan_in..(r + 1) * fan_in], &mut dconcat);
            }
        }
        let dh_prev = dconcat.split_off(self.input_dim);
        (dconcat, dh_prev, dc_prev)
    }

    /// Runs from a zero state over a `(T, d_in)` sequence and returns every
    /// hidden state as a `(T, d)` matrix.
    pub fn sequence<F: Real>(
        &self,
        store: &ParamStore<F>,
        xs: &Tensor<F>,
    ) -> Result<(Tensor<F>, LstmSequenceCache<F>)> {
        self.check(store)?;
        if xs.rank() != 2 || xs.dim(1) != self.input_dim {
            return Err(Error::shape(format!(
                "lstm expects (T, {}), got {:?}",
                self.input_dim,
                xs.shape()
            )));
        }
        let t_len = xs.dim(0);
        let mut state = LstmState::zeros(self.hidden);
        let mut out = Vec::with_capacity(t_len * self.hidden);
        let mut steps = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let (next, cache) = self.step(store, xs.row(t), &state)?;
            out.extend_from_slice(&next.h);
            steps.push(cache);
            state = next;
        }
        Ok((Tensor::new(vec![t_len, self.hidden], out)?, LstmSequenceCache { steps }))
    }

    /// Backpropagation through time. `dh_seq` is `dL/dH` for the `(T, d)` output.
    pub fn sequence_backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        cache: &LstmSequenceCache<F>,
        dh_seq: &Tensor<F>,
        grads: &mut Grads<F>,
    ) -> Result<Tensor<F>> {
        let t_len = cache.steps.len();
        dh_seq.expect_shape(&[t_len, self.hidden])?;
        let mut dx = vec![F::zero(); t_len * self.input_dim];
        let mut dh_next = vec![F::zero(); self.hidden];
        let mut dc_next = vec![F::zero(); self.hidden];
        for t in (0..t_len).rev() {
            let mut dh = dh_seq.row(t).to_vec();
            crate::tensor::add_into(&mut dh, &dh_next);
            let (dxt, dh_prev, dc_prev) = self.step_backward(store, &cache.steps[t], &dh, &dc_next, grads);
            dx[t * self.input_dim..(t + 1) * self.input_dim].copy_from_slice(&dxt);
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        Tensor::new(vec![t_len, self.input_dim], dx)
    }
}
