//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls into the endogenous-grid solver.

#![allow(dead_code)]

use custcap::productivity::ProductivityProcess;
use custcap::model::static_solve;
use custcap::{AggregateGuess, FirmState, Parameters};
use nalgebra::{DMatrix, DVector};

/// Chebyshev polynomials `T_0..T_{n-1}` at `x` in [-1, 1].
fn cheb_basis(x: f64, n: usize) -> DVector<f64> {
    let mut t = DVector::zeros(n);
    t[0] = 1.0;
    if n > 1 {
        t[1] = x;
    }
    for j in 2..n {
        t[j] = 2.0 * x * t[j - 1] - t[j - 2];
    }
    t
}

fn cheb_fill(x: f64, t: &mut [f64]) {
    t[0] = 1.0;
    if t.len() > 1 {
        t[1] = x;
    }
    for j in 2..t.len() {
        t[j] = 2.0 * x * t[j - 1] - t[j - 2];
    }
}

/// Affine map of `[lo, hi]` onto [-1, 1], clamped against rounding.
fn to_unit(v: f64, lo: f64, hi: f64) -> f64 {
    (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
}

/// Discretized-choice value function iteration. The value function is a
/// tensor Chebyshev series in `(ln m, ln k)` per productivity node; each
/// maximization searches a `n_choice x n_choice` grid of next states and
/// then polishes the best cell by alternating golden sections.
pub struct VfiOracle {
    pub p: Parameters,
    pub agg: AggregateGuess,
    pub proc: ProductivityProcess,
    /// `(ln m, ln k)` domain of the approximation and of the choices.
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub degree: usize,
    pub n_choice: usize,
    /// Coefficients per z node, `degree x degree`.
    coef: Vec<DMatrix<f64>>,
    nodes: Vec<f64>,
    fit: DMatrix<f64>,
    /// Choice grids and their basis rows.
    gm: Vec<f64>,
    gk: Vec<f64>,
    bx: DMatrix<f64>,
    by: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct Choice {
    pub next_m: f64,
    pub next_k: f64,
    pub value: f64,
}

impl VfiOracle {
    pub fn new(p: Parameters, agg: AggregateGuess, proc: ProductivityProcess, m: (f64, f64), k: (f64, f64), degree: usize, n_choice: usize) -> Self {
        let n = degree;
        let nodes: Vec<f64> = (0..n).map(|i| (std::f64::consts::PI * (2 * i + 1) as f64 / (2 * n) as f64).cos()).collect();
        // c = fit * f maps node values to coefficients
        let mut fit = DMatrix::zeros(n, n);
        for (i, &x) in nodes.iter().enumerate() {
            let t = cheb_basis(x, n);
            for j in 0..n {
                fit[(j, i)] = t[j] * if j == 0 { 1.0 } else { 2.0 } / n as f64;
            }
        }
        let nz = proc.z_nodes.len();
        let (x0, x1, y0, y1) = (m.0.ln(), m.1.ln(), k.0.ln(), k.1.ln());
        let gm: Vec<f64> = (0..n_choice).map(|a| (x0 + (x1 - x0) * a as f64 / (n_choice - 1) as f64).exp()).collect();
        let gk: Vec<f64> = (0..n_choice).map(|b| (y0 + (y1 - y0) * b as f64 / (n_choice - 1) as f64).exp()).collect();
        let bx = DMatrix::from_fn(n_choice, n, |a, j| cheb_basis(to_unit(gm[a].ln(), x0, x1), n)[j]);
        let by = DMatrix::from_fn(n_choice, n, |b, j| cheb_basis(to_unit(gk[b].ln(), y0, y1), n)[j]);
        Self {
            p,
            agg,
            proc,
            x_range: (m.0.ln(), m.1.ln()),
            y_range: (k.0.ln(), k.1.ln()),
            degree,
            n_choice,
            coef: vec![DMatrix::zeros(n, n); nz],
            nodes,
            fit,
            gm,
            gk,
            bx,
            by,
        }
    }

    fn node_state(&self, i: usize, j: usize) -> (f64, f64) {
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        let x = x0 + 0.5 * (self.nodes[i] + 1.0) * (x1 - x0);
        let y = y0 + 0.5 * (self.nodes[j] + 1.0) * (y1 - y0);
        (x.exp(), y.exp())
    }

    fn set_values(&mut self, values: &[DMatrix<f64>]) {
        for (c, v) in self.coef.iter_mut().zip(values) {
            *c = &self.fit * v * self.fit.transpose();
        }
    }

    /// Value at an arbitrary `(m, k)` inside the domain.
    pub fn value(&self, m: f64, k: f64, s: usize) -> f64 {
        let tx = cheb_basis(to_unit(m.ln(), self.x_range.0, self.x_range.1), self.degree);
        let ty = cheb_basis(to_unit(k.ln(), self.y_range.0, self.y_range.1), self.degree);
        (tx.transpose() * &self.coef[s] * ty)[(0, 0)]
    }

    fn expected_coef(&self, s: usize) -> DMatrix<f64> {
        let n = self.degree;
        let mut e = DMatrix::zeros(n, n);
        for (t, c) in self.coef.iter().enumerate() {
            e += c * self.proc.transition[s][t];
        }
        e
    }

    fn flow(&self, m: f64, k: f64, z: f64, m_next: f64, k_next: f64) -> f64 {
        let p = &self.p;
        let pi = static_solve(&FirmState::new(m, k, z).unwrap(), &self.agg, p).unwrap().profit;
        let ads = self.agg.p_m * (m_next - (1.0 - p.delta_m) * m);
        let inv = k_next - (1.0 - p.delta_k) * k;
        pi - self.agg.wage * (ads.max(0.0).powf(1.0 / p.alpha_a) + inv.max(0.0).powf(1.0 / p.alpha_k))
    }

    /// Best next state from `(m, k, z node s)` under the current value.
    pub fn maximize(&self, m: f64, k: f64, s: usize) -> Choice {
        let p = &self.p;
        let bt = p.beta * (1.0 - p.theta);
        let ec = self.expected_coef(s);
        let n = self.degree;
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        let (gm, gk) = (&self.gm, &self.gk);
        let ev = &self.bx * &ec * self.by.transpose();
        let m_floor = (1.0 - p.delta_m) * m;
        let k_floor = (1.0 - p.delta_k) * k;
        let w = self.agg.wage;
        let cost_m: Vec<f64> = gm.iter().map(|&q| w * (self.agg.p_m * (q - m_floor)).max(0.0).powf(1.0 / p.alpha_a)).collect();
        let cost_k: Vec<f64> = gk.iter().map(|&q| w * (q - k_floor).max(0.0).powf(1.0 / p.alpha_k)).collect();
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for a in 0..self.n_choice {
            if gm[a] < m_floor {
                continue;
            }
            for b in 0..self.n_choice {
                if gk[b] < k_floor {
                    continue;
                }
                let v = bt * ev[(a, b)] - cost_m[a] - cost_k[b];
                if v > best.0 {
                    best = (v, a, b);
                }
            }
        }
        // polish inside the neighbouring cells
        let eval = |mn: f64, kn: f64| {
            let mut tx = [0.0; 32];
            let mut ty = [0.0; 32];
            cheb_fill(to_unit(mn.ln(), x0, x1), &mut tx[..n]);
            cheb_fill(to_unit(kn.ln(), y0, y1), &mut ty[..n]);
            let mut ev = 0.0;
            for i in 0..n {
                let mut row = 0.0;
                for j in 0..n {
                    row += ec[(i, j)] * ty[j];
                }
                ev += tx[i] * row;
            }
            bt * ev
                - w * (self.agg.p_m * (mn - m_floor)).max(0.0).powf(1.0 / p.alpha_a)
                - w * (kn - k_floor).max(0.0).powf(1.0 / p.alpha_k)
        };
        let lo = |g: &[f64], i: usize, floor: f64| g[i.saturating_sub(2)].max(floor);
        let hi = |g: &[f64], i: usize| g[(i + 2).min(g.len() - 1)];
        let (ma, mb) = (lo(gm, best.1, m_floor), hi(gm, best.1));
        let (ka, kb) = (lo(gk, best.2, k_floor), hi(gk, best.2));
        let (mut mn, mut kn) = (gm[best.1], gk[best.2]);
        for _ in 0..100 {
            let (pm, pk) = (mn, kn);
            mn = golden_max(|q| eval(q, kn), ma, mb);
            kn = golden_max(|q| eval(mn, q), ka, kb);
            if (mn - pm).abs() < 1e-10 * pm && (kn - pk).abs() < 1e-10 * pk {
                break;
            }
        }
        Choice {
            next_m: mn,
            next_k: kn,
            value: self.flow(m, k, self.proc.z_nodes[s], mn, kn) + bt * self.value_expected(&ec, mn, kn),
        }
    }

    fn value_expected(&self, ec: &DMatrix<f64>, m: f64, k: f64) -> f64 {
        let tx = cheb_basis(to_unit(m.ln(), self.x_range.0, self.x_range.1), self.degree);
        let ty = cheb_basis(to_unit(k.ln(), self.y_range.0, self.y_range.1), self.degree);
        (tx.transpose() * ec * ty)[(0, 0)]
    }

    /// Howard iteration: `rounds` maximizations, each followed by
    /// `eval_steps` policy evaluations. Returns the final sup change.
    pub fn solve(&mut self, rounds: usize, eval_steps: usize, tol: f64) -> f64 {
        let n = self.degree;
        let nz = self.proc.z_nodes.len();
        let bt = self.p.beta * (1.0 - self.p.theta);
        let mut values: Vec<DMatrix<f64>> = (0..nz)
            .map(|s| {
                DMatrix::from_fn(n, n, |i, j| {
                    let (m, k) = self.node_state(i, j);
                    self.flow(m, k, self.proc.z_nodes[s], (1.0 - self.p.delta_m) * m, (1.0 - self.p.delta_k) * k) / (1.0 - bt)
                })
            })
            .collect();
        self.set_values(&values);
        let mut change = f64::INFINITY;
        for _ in 0..rounds {
            let mut flows = vec![DMatrix::zeros(n, n); nz];
            let mut pol = vec![vec![(0.0, 0.0); n * n]; nz];
            let mut next = values.clone();
            for s in 0..nz {
                for i in 0..n {
                    for j in 0..n {
                        let (m, k) = self.node_state(i, j);
                        let c = self.maximize(m, k, s);
                        next[s][(i, j)] = c.value;
                        flows[s][(i, j)] = self.flow(m, k, self.proc.z_nodes[s], c.next_m, c.next_k);
                        pol[s][i * n + j] = (c.next_m, c.next_k);
                    }
                }
            }
            change = values
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs().max() / b.abs().max())
                .fold(0.0, f64::max);
            values = next;
            self.set_values(&values);
            if change < tol {
                break;
            }
            // basis rows at the fixed policy
            let basis: Vec<Vec<(DVector<f64>, DVector<f64>)>> = pol
                .iter()
                .map(|ps| {
                    ps.iter()
                        .map(|&(mn, kn)| {
                            (
                                cheb_basis(to_unit(mn.ln(), self.x_range.0, self.x_range.1), n),
                                cheb_basis(to_unit(kn.ln(), self.y_range.0, self.y_range.1), n),
                            )
                        })
                        .collect()
                })
                .collect();
            for _ in 0..eval_steps {
                let ecs: Vec<DMatrix<f64>> = (0..nz).map(|s| self.expected_coef(s)).collect();
                for s in 0..nz {
                    for i in 0..n {
                        for j in 0..n {
                            let (tx, ty) = &basis[s][i * n + j];
                            values[s][(i, j)] = flows[s][(i, j)] + bt * (tx.transpose() * &ecs[s] * ty)[(0, 0)];
                        }
                    }
                }
                self.set_values(&values);
            }
        }
        change
    }
}

/// Maximizer of a unimodal function on `[a, b]`.
pub fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > 1e-12 * (a.abs() + b.abs()) {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}
