//! Implicit-feedback alternating least squares over user/item interactions.
//!
//! Observed cells carry confidence c = 1 + alpha * w and preference 1;
//! unobserved cells carry confidence 1 and preference 0. Each half-sweep
//! solves the ridge-regularized normal equations exactly (Cholesky), so the
//! objective is nonincreasing sweep over sweep.

use crate::error::{IlmError, Result};
use crate::rng::Stream;
use crate::scalar::{sc, Scalar};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Sparse interaction matrix. Duplicate (user, item) entries are summed at
/// ingestion.
#[derive(Debug, Clone)]
pub struct InteractionMatrix {
    n_users: usize,
    n_items: usize,
    by_user: Vec<Vec<(u32, f64)>>,
    by_item: Vec<Vec<(u32, f64)>>,
    nnz: usize,
}

impl InteractionMatrix {
    pub fn new(n_users: usize, n_items: usize, entries: &[(u32, u32, f64)]) -> Result<Self> {
        let mut summed: BTreeMap<(u32, u32), f64> = BTreeMap::new();
        for &(u, i, w) in entries {
            if u as usize >= n_users || i as usize >= n_items {
                return Err(IlmError::Dimension(format!(
                    "interaction ({u}, {i}) out of bounds ({n_users} x {n_items})"
                )));
            }
            if w < 0.0 {
                return Err(IlmError::Usage(format!("negative confidence weight {w}")));
            }
            *summed.entry((u, i)).or_insert(0.0) += w;
        }
        let mut by_user = vec![Vec::new(); n_users];
        let mut by_item = vec![Vec::new(); n_items];
        for (&(u, i), &w) in &summed {
            by_user[u as usize].push((i, w));
            by_item[i as usize].push((u, w));
        }
        let nnz = summed.len();
        Ok(InteractionMatrix { n_users, n_items, by_user, by_item, nnz })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn user_row(&self, u: usize) -> &[(u32, f64)] {
        &self.by_user[u]
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MfConfig {
    pub rank: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub sweeps: usize,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig { rank: 32, alpha: 40.0, lambda: 0.1, sweeps: 30 }
    }
}

/// Dense factor matrices, row-major users x r and items x r.
#[derive(Debug, Clone)]
pub struct FactorModel<S> {
    pub users: Vec<S>,
    pub items: Vec<S>,
    pub rank: usize,
    pub n_users: usize,
    pub n_items: usize,
}

impl<S: Scalar> FactorModel<S> {
    pub fn init(n_users: usize, n_items: usize, rank: usize, rng: &mut Stream) -> Self {
        let dist = Normal::new(0.0f64, 0.01).expect("valid std");
        let users = (0..n_users * rank).map(|_| sc::<S>(dist.sample(rng))).collect();
        let items = (0..n_items * rank).map(|_| sc::<S>(dist.sample(rng))).collect();
        FactorModel { users, items, rank, n_users, n_items }
    }

    pub fn user(&self, u: usize) -> &[S] {
        &self.users[u * self.rank..(u + 1) * self.rank]
    }

    pub fn item(&self, i: usize) -> &[S] {
        &self.items[i * self.rank..(i + 1) * self.rank]
    }

    pub fn score(&self, u: usize, i: usize) -> S {
        let mut s = S::zero();
        for (a, b) in self.user(u).iter().zip(self.item(i)) {
            s += *a * *b;
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        self.users.iter().chain(self.items.iter()).all(|v| v.is_finite())
    }
}

/// In-place Cholesky solve of A x = b for a symmetric positive-definite A
/// (r x r, row-major). A and b are clobbered; the solution lands in b.
fn cholesky_solve<S: Scalar>(a: &mut [S], b: &mut [S], r: usize) -> Result<()> {
    // decompose A = L L^T, storing L in the lower triangle
    for j in 0..r {
        let mut d = a[j * r + j];
        for k in 0..j {
            d -= a[j * r + k] * a[j * r + k];
        }
        if d <= S::zero() {
            return Err(IlmError::Numerical("Cholesky pivot not positive".into()));
        }
        let d = d.sqrt();
        a[j * r + j] = d;
        for i in (j + 1)..r {
            let mut s = a[i * r + j];
            for k in 0..j {
                s -= a[i * r + k] * a[j * r + k];
            }
            a[i * r + j] = s / d;
        }
    }
    // forward substitution L y = b
    for i in 0..r {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * r + k] * b[k];
        }
        b[i] = s / a[i * r + i];
    }
    // back substitution L^T x = y
    for i in (0..r).rev() {
        let mut s = b[i];
        for k in (i + 1)..r {
            s -= a[k * r + i] * b[k];
        }
        b[i] = s / a[i * r + i];
    }
    Ok(())
}

/// Gramian F^T F of an n x r row-major factor matrix.
fn gramian<S: Scalar>(f: &[S], n: usize, r: usize) -> Vec<S> {
    let mut g = vec![S::zero(); r * r];
    for row in 0..n {
        let v = &f[row * r..(row + 1) * r];
        for a in 0..r {
            let va = v[a];
            for b in 0..r {
                g[a * r + b] += va * v[b];
            }
        }
    }
    g
}

/// Solve one side of the alternating problem: every row of `out` against the
/// fixed other-side factor. Rows are independent, so the parallel and serial
/// paths produce identical results.
fn solve_side<S: Scalar>(
    out: &mut [S],
    fixed: &[S],
    observed: &[Vec<(u32, f64)>],
    rank: usize,
    alpha: f64,
    lambda: f64,
    parallel: bool,
) -> Result<()> {
    let gram = gramian(fixed, fixed.len() / rank, rank);
    let lam = sc::<S>(lambda);
    let alpha_s = sc::<S>(alpha);
    let solve_row = |(row_out, obs): (&mut [S], &Vec<(u32, f64)>)| -> Result<()> {
        let mut a = gram.clone();
        for j in 0..rank {
            a[j * rank + j] += lam;
        }
        let mut b = vec![S::zero(); rank];
        for &(idx, w) in obs {
            let v = &fixed[idx as usize * rank..(idx as usize + 1) * rank];
            let conf = S::one() + alpha_s * sc::<S>(w);
            // A += (c - 1) v v^T ; b += c v
            let cm1 = conf - S::one();
            for x in 0..rank {
                let vx = v[x];
                b[x] += conf * vx;
                for y in 0..rank {
                    a[x * rank + y] += cm1 * vx * v[y];
                }
            }
        }
        cholesky_solve(&mut a, &mut b, rank)?;
        row_out.copy_from_slice(&b);
        Ok(())
    };
    if parallel {
        out.par_chunks_mut(rank)
            .zip(observed.par_iter())
            .map(solve_row)
            .collect::<Result<Vec<()>>>()?;
    } else {
        for pair in out.chunks_mut(rank).zip(observed.iter()) {
            solve_row(pair)?;
        }
    }
    Ok(())
}

/// One alternating pass: all user rows with items fixed, then all item rows
/// with users fixed.
pub fn ials_sweep<S: Scalar>(
    model: &mut FactorModel<S>,
    m: &InteractionMatrix,
    cfg: &MfConfig,
    parallel: bool,
) -> Result<()> {
    if cfg.rank < 1 {
        return Err(IlmError::Usage("rank must be at least 1".into()));
    }
    if cfg.lambda <= 0.0 {
        return Err(IlmError::Usage("lambda must be positive".into()));
    }
    solve_side(&mut model.users, &model.items, &m.by_user, cfg.rank, cfg.alpha, cfg.lambda, parallel)?;
    solve_side(&mut model.items, &model.users, &m.by_item, cfg.rank, cfg.alpha, cfg.lambda, parallel)?;
    if !model.is_finite() {
        return Err(IlmError::Numerical("non-finite factors after sweep".into()));
    }
    Ok(())
}

/// Full implicit-feedback objective:
///   sum_{u,i} c_ui (p_ui - u.v)^2 + lambda (|U|^2 + |V|^2)
/// computed exactly via the Gramian identity for the unobserved term.
pub fn objective<S: Scalar>(model: &FactorModel<S>, m: &InteractionMatrix, cfg: &MfConfig) -> f64 {
    let r = model.rank;
    let gram_v = gramian(&model.items, model.n_items, r);
    // sum over ALL cells of (u.v)^2 = sum_u u^T (V^T V) u
    let mut all_sq = 0.0f64;
    for u in 0..model.n_users {
        let uu = model.user(u);
        for a in 0..r {
            let ua = uu[a].to_f64c();
            for b in 0..r {
                all_sq += ua * gram_v[a * r + b].to_f64c() * uu[b].to_f64c();
            }
        }
    }
    // observed cells: add c (1 - s)^2 and remove the unit-confidence s^2
    let mut obs = 0.0f64;
    for u in 0..model.n_users {
        for &(i, w) in &m.by_user[u] {
            let s = model.score(u, i as usize).to_f64c();
            let c = 1.0 + cfg.alpha * w;
            obs += c * (1.0 - s) * (1.0 - s) - s * s;
        }
    }
    let reg: f64 = model
        .users
        .iter()
        .chain(model.items.iter())
        .map(|v| v.to_f64c() * v.to_f64c())
        .sum();
    all_sq + obs + cfg.lambda * reg
}

/// Run sweeps until `cfg.sweeps` or relative objective improvement drops
/// below 1e-6. Returns the model plus the objective trace (initial value
/// followed by one entry per sweep).
pub fn train_mf<S: Scalar>(
    m: &InteractionMatrix,
    cfg: &MfConfig,
    rng: &mut Stream,
) -> Result<(FactorModel<S>, Vec<f64>)> {
    if m.nnz() == 0 {
        return Err(IlmError::Usage("cannot factorize an empty interaction set".into()));
    }
    let mut model = FactorModel::init(m.n_users(), m.n_items(), cfg.rank, rng);
    let mut trace = vec![objective(&model, m, cfg)];
    for _ in 0..cfg.sweeps {
        ials_sweep(&mut model, m, cfg, true)?;
        let obj = objective(&model, m, cfg);
        let prev = *trace.last().expect("trace nonempty");
        trace.push(obj);
        if (prev - obj).abs() / prev.abs().max(1.0) < 1e-6 {
            break;
        }
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use rand::Rng;

    fn planted_interactions(seed: u64) -> (InteractionMatrix, Vec<(u32, u32)>, Vec<(u32, u32)>) {
        // 20 x 30 binary matrix from a planted 2-block structure; hold out
        // a fifth of the positives for the AUC check.
        let mut rng = Streams::new(seed).stream("planted");
        let mut pos = Vec::new();
        for u in 0..20u32 {
            for i in 0..30u32 {
                let same_block = (u < 10) == (i < 15);
                let p = if same_block { 0.9 } else { 0.03 };
                if rng.gen_range(0.0..1.0) < p {
                    pos.push((u, i));
                }
            }
        }
        crate::rng::shuffle(&mut pos, &mut rng);
        let held = pos.split_off(pos.len() - pos.len() / 6);
        let entries: Vec<(u32, u32, f64)> = pos.iter().map(|&(u, i)| (u, i, 1.0)).collect();
        let m = InteractionMatrix::new(20, 30, &entries).unwrap();
        (m, pos, held)
    }

    #[test]
    fn empty_interactions_shrink_to_zero() {
        let m = InteractionMatrix::new(4, 5, &[]).unwrap();
        let mut rng = Streams::new(1).stream("mf");
        let mut model: FactorModel<f64> = FactorModel::init(4, 5, 3, &mut rng);
        let cfg = MfConfig { rank: 3, alpha: 40.0, lambda: 0.1, sweeps: 1 };
        for _ in 0..5 {
            ials_sweep(&mut model, &m, &cfg, false).unwrap();
        }
        for v in model.users.iter().chain(model.items.iter()) {
            assert!(v.abs() < 1e-9, "factor {v} did not shrink");
        }
    }

    #[test]
    fn single_cell_fixed_point_matches_bisection() {
        // 1 user x 1 item, one observation, r = 1. Converged u*v must match
        // the fixed point of the scalar normal equations, found here by
        // bisection on the composed update map.
        let cfg = MfConfig { rank: 1, alpha: 40.0, lambda: 0.1, sweeps: 1 };
        let c = 1.0 + cfg.alpha;
        let lam = cfg.lambda;
        let u_of = |v: f64| c * v / (c * v * v + lam);
        let g = |v: f64| {
            let u = u_of(v);
            c * u / (c * u * u + lam)
        };
        let (mut lo, mut hi) = (1e-9, 10.0);
        assert!(g(lo) - lo > 0.0);
        assert!(g(hi) - hi < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) - mid > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let v_star = 0.5 * (lo + hi);
        let expected = u_of(v_star) * v_star;

        let m = InteractionMatrix::new(1, 1, &[(0, 0, 1.0)]).unwrap();
        let mut rng = Streams::new(7).stream("mf");
        let mut model: FactorModel<f64> = FactorModel::init(1, 1, 1, &mut rng);
        model.users[0] = model.users[0].abs().max(1e-3); // start in the positive basin
        model.items[0] = model.items[0].abs().max(1e-3);
        // contraction factor per sweep is ~((2*lambda - c)/c)^2, close to 1
        // here, so convergence takes a few thousand (cheap 1x1) sweeps
        for _ in 0..4000 {
            ials_sweep(&mut model, &m, &cfg, false).unwrap();
        }
        let got = model.users[0] * model.items[0];
        assert!(
            (got - expected).abs() < 1e-8,
            "fixed point mismatch: got {got}, bisection {expected}"
        );
    }

    #[test]
    fn objective_nonincreasing_on_planted_data() {
        for seed in [3u64, 4, 5] {
            let (m, _, _) = planted_interactions(seed);
            let cfg = MfConfig { rank: 2, alpha: 40.0, lambda: 0.1, sweeps: 30 };
            let mut rng = Streams::new(seed).stream("mf");
            let (_, trace) = train_mf::<f64>(&m, &cfg, &mut rng).unwrap();
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "objective increased: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn planted_rank2_recovery_auc() {
        let (m, train_pos, held) = planted_interactions(11);
        let cfg = MfConfig { rank: 2, alpha: 40.0, lambda: 0.1, sweeps: 30 };
        let mut rng = Streams::new(11).stream("mf");
        let (model, _) = train_mf::<f64>(&m, &cfg, &mut rng).unwrap();

        // brute-force ranking oracle: AUC over (held-out positive, true
        // negative) pairs
        let is_pos: std::collections::BTreeSet<(u32, u32)> =
            train_pos.iter().chain(held.iter()).copied().collect();
        let mut wins = 0u64;
        let mut total = 0u64;
        for &(u, i) in &held {
            let s_pos = model.score(u as usize, i as usize);
            for j in 0..30u32 {
                if is_pos.contains(&(u, j)) {
                    continue;
                }
                total += 1;
                if s_pos > model.score(u as usize, j as usize) {
                    wins += 1;
                }
            }
        }
        let auc = wins as f64 / total as f64;
        assert!(auc > 0.9, "planted recovery AUC {auc} <= 0.9");
    }

    #[test]
    fn deterministic_given_seed() {
        let (m, _, _) = planted_interactions(2);
        let cfg = MfConfig { rank: 2, alpha: 10.0, lambda: 0.5, sweeps: 5 };
        let run = || {
            let mut rng = Streams::new(9).stream("mf");
            train_mf::<f64>(&m, &cfg, &mut rng).unwrap().0
        };
        let (a, b) = (run(), run());
        assert_eq!(a.users, b.users);
        assert_eq!(a.items, b.items);
    }

    #[test]
    fn doubling_lambda_never_grows_norms() {
        let (m, _, _) = planted_interactions(6);
        let norms = |lambda: f64| {
            let cfg = MfConfig { rank: 2, alpha: 40.0, lambda, sweeps: 20 };
            let mut rng = Streams::new(5).stream("mf");
            let (model, _) = train_mf::<f64>(&m, &cfg, &mut rng).unwrap();
            let u: f64 = model.users.iter().map(|v| v * v).sum();
            let v: f64 = model.items.iter().map(|v| v * v).sum();
            u + v
        };
        assert!(norms(0.2) <= norms(0.1) + 1e-12);
    }

    #[test]
    fn parallel_and_serial_agree() {
        let (m, _, _) = planted_interactions(8);
        let cfg = MfConfig { rank: 3, alpha: 40.0, lambda: 0.1, sweeps: 1 };
        let mut rng = Streams::new(3).stream("mf");
        let base: FactorModel<f64> = FactorModel::init(20, 30, 3, &mut rng);
        let mut a = base.clone();
        let mut b = base;
        for _ in 0..3 {
            ials_sweep(&mut a, &m, &cfg, false).unwrap();
            ials_sweep(&mut b, &m, &cfg, true).unwrap();
        }
        for (x, y) in a.users.iter().zip(&b.users) {
            assert!((x - y).abs() < 1e-10);
        }
        for (x, y) in a.items.iter().zip(&b.items) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicates_summed_and_bounds_checked() {
        let m = InteractionMatrix::new(2, 2, &[(0, 1, 2.0), (0, 1, 3.0)]).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.user_row(0), &[(1u32, 5.0)]);
        assert!(InteractionMatrix::new(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn empty_set_rejected_by_train() {
        let m = InteractionMatrix::new(2, 2, &[]).unwrap();
        let mut rng = Streams::new(0).stream("mf");
        assert!(train_mf::<f64>(&m, &MfConfig::default(), &mut rng).is_err());
    }
}
