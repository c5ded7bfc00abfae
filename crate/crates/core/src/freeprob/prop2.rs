//! Asymptotic power normalization factor `t = Tr((H1†H1 + H2†H2)⁻¹)` from
//! the four-slot linearization of `H1†H1 + H2†H2` taken at `z → 0⁻`.

use ndarray::s;
use serde::{Deserialize, Serialize};

use super::iterate::{fixed_point, pack, unpack, IterationReport};
use super::layout::Prop2Layout;
use super::{SolverOptions, BRANCH_TOL};
use crate::error::{Error, Result};
use crate::linalg::{
    adj, conj_diag, conj_diag_adj, eye, hermitian_eigenvalues, inv, inv_logdet, scale_cols,
    set_block, trace, zeros, CMat, CVec, C64,
};
use crate::model::{ChannelStats, SystemConfig, ThetaState};

/// The resolvent blocks that enter the block map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop2State {
    /// Slot 1, `T × T`; `−Tr` of it at `z → 0⁻` is `t`.
    pub g11: CMat,
    /// Slot 2 panel blocks, per user.
    pub g22: [Vec<CMat>; 2],
    /// Slot 3 user blocks.
    pub g33: [CMat; 2],
    /// Slot 4 user lead blocks.
    pub g44_lead: [CMat; 2],
    /// Slot 4 same-panel `2L_k × 2L_k` blocks across both users.
    pub g44: Vec<CMat>,
}

impl Prop2State {
    fn parts(&self) -> Vec<&CMat> {
        let mut v = vec![&self.g11];
        v.extend(self.g22[0].iter());
        v.extend(self.g22[1].iter());
        v.extend(self.g33.iter());
        v.extend(self.g44_lead.iter());
        v.extend(self.g44.iter());
        v
    }

    fn shapes(lay: &Prop2Layout) -> Vec<(usize, usize)> {
        let mut v = vec![(lay.t, lay.t)];
        for _ in 0..2 {
            v.extend(lay.panels.iter().map(|&l| (l, l)));
        }
        v.extend([
            (lay.r1, lay.r1),
            (lay.r2, lay.r2),
            (lay.r1, lay.r1),
            (lay.r2, lay.r2),
        ]);
        v.extend(lay.panels.iter().map(|&l| (2 * l, 2 * l)));
        v
    }

    pub fn zeros(lay: &Prop2Layout) -> Self {
        let v = vec![C64::new(0.0, 0.0); Self::shapes(lay).iter().map(|(a, b)| a * b).sum()];
        Self::from_vec(lay, &v)
    }

    pub fn to_vec(&self) -> (Vec<C64>, Vec<std::ops::Range<usize>>) {
        pack(&self.parts())
    }

    pub fn from_vec(lay: &Prop2Layout, v: &[C64]) -> Self {
        let k = lay.panels.len();
        let mut it = unpack(v, &Self::shapes(lay)).into_iter();
        let mut take = |n: usize| (0..n).map(|_| it.next().unwrap()).collect::<Vec<_>>();
        let g11 = take(1).pop().unwrap();
        let a = take(k);
        let b = take(k);
        let [c1, c2]: [CMat; 2] = take(2).try_into().unwrap();
        let [d1, d2]: [CMat; 2] = take(2).try_into().unwrap();
        let g44 = take(k);
        Prop2State {
            g11,
            g22: [a, b],
            g33: [c1, c2],
            g44_lead: [d1, d2],
            g44,
        }
    }

    pub fn distance(&self, other: &Prop2State) -> f64 {
        self.parts()
            .iter()
            .zip(other.parts())
            .map(|(a, b)| crate::linalg::fro(&(*a - b)))
            .fold(0.0, f64::max)
    }
}

/// Nonzero blocks of the block map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop2RBlocks {
    /// Slot 1: `Σ_i η_{0,i}(G44 lead_i) + Σ_k ζ_k(Σ_{ij} G44_k^{ij})`.
    pub psi: CMat,
    /// Slot 2 (`m × m`): `Θ† η_{k,i}(G33_i) Θ` on each user's panel blocks.
    pub q: CMat,
    /// Slot 3: `diag(Σ_k η̃_{k,1}(Θ G22 Θ†), Σ_k η̃_{k,2}(Θ G22 Θ†))`.
    pub p: CMat,
    /// Slot 4 (`m × m`): `η̃_{0,i}(G11)` on the leads and `ζ̃_k(G11)` on all
    /// four same-panel blocks.
    pub x: CMat,
}

/// Full resolvent blocks of one elimination.
struct ChainBlocks {
    g11: CMat,
    g22: CMat,
    g32: CMat,
    g33: CMat,
    g44: CMat,
}

/// Mean blocks and statistics for the power-factor system.
#[derive(Clone, Debug)]
pub struct Prop2System {
    pub stats: ChannelStats,
    pub theta: ThetaState,
    pub layout: Prop2Layout,
    /// `diag(Ḡ1, Ḡ2)`, `(R1 + R2) × m`.
    pub gbar: CMat,
    /// `[F̄1; F̄2]`, `m × T`.
    pub fbar: CMat,
}

impl Prop2System {
    pub fn new(stats: &ChannelStats, theta: &ThetaState) -> Result<Self> {
        stats.validate()?;
        // Coefficients need not be feasible here; derivative probes perturb them.
        if theta.panels() != stats.panel_sizes().as_slice() {
            return Err(Error::Dimension(format!(
                "coefficient panels {:?} do not match channel panels {:?}",
                theta.panels(),
                stats.panel_sizes()
            )));
        }
        let [r1, r2] = stats.rx;
        let t = stats.tx;
        if t >= r1 + r2 {
            return Err(Error::Contract(format!(
                "H1†H1 + H2†H2 is asymptotically singular for T = {t} ≥ R1 + R2 = {}",
                r1 + r2
            )));
        }
        let lay = Prop2Layout::new(r1, r2, t, &stats.panel_sizes());
        let m = lay.m();
        let mut gbar = zeros(r1 + r2, m);
        let mut fbar = zeros(m, t);
        for i in 0..2 {
            let rows = lay.user_rows(i);
            let lead = lay.user_lead(i);
            set_block(&mut gbar, rows.start, lead.start, &eye(stats.rx[i]));
            set_block(&mut fbar, lead.start, 0, &stats.direct[i].los);
            for k in 0..stats.num_panels() {
                let p = lay.user_panel(i, k);
                let rt = scale_cols(&stats.ris_user[k][i].los, theta.panel(k, i));
                set_block(&mut gbar, rows.start, p.start, &rt);
                set_block(&mut fbar, p.start, 0, &stats.bs_ris[k].los);
            }
        }
        Ok(Prop2System {
            stats: stats.clone(),
            theta: theta.clone(),
            layout: lay,
            gbar,
            fbar,
        })
    }

    pub fn r_map(&self, g: &Prop2State) -> Prop2RBlocks {
        let st = &self.stats;
        let lay = &self.layout;
        let m = lay.m();
        let mut psi = st.direct[0].eta(&g.g44_lead[0]) + st.direct[1].eta(&g.g44_lead[1]);
        let mut x = zeros(m, m);
        let mut q = zeros(m, m);
        let mut p = zeros(lay.r1 + lay.r2, lay.r1 + lay.r2);
        for i in 0..2 {
            let l = lay.user_lead(i);
            set_block(&mut x, l.start, l.start, &st.direct[i].eta_tilde(&g.g11));
        }
        let mut pu = [zeros(lay.r1, lay.r1), zeros(lay.r2, lay.r2)];
        for k in 0..st.num_panels() {
            let lk = lay.panels[k];
            let f = &st.bs_ris[k];
            let b = &g.g44[k];
            let sum = b.slice(s![..lk, ..lk]).to_owned()
                + b.slice(s![lk.., lk..])
                + b.slice(s![..lk, lk..])
                + b.slice(s![lk.., ..lk]);
            psi += &f.eta(&sum);
            let zt = f.eta_tilde(&g.g11);
            for i in 0..2 {
                for j in 0..2 {
                    set_block(
                        &mut x,
                        lay.user_panel(i, k).start,
                        lay.user_panel(j, k).start,
                        &zt,
                    );
                }
                let th = self.theta.panel(k, i);
                let link = &st.ris_user[k][i];
                let pk = lay.user_panel(i, k);
                set_block(
                    &mut q,
                    pk.start,
                    pk.start,
                    &conj_diag_adj(th, &link.eta(&g.g33[i])),
                );
                pu[i] += &link.eta_tilde(&conj_diag(th, &g.g22[i][k]));
            }
        }
        set_block(&mut p, 0, 0, &pu[0]);
        set_block(&mut p, lay.r1, lay.r1, &pu[1]);
        Prop2RBlocks { psi, q, p, x }
    }

    /// Inverts `Λ(z) − R − L̄` by eliminating slot 3 and then slots 2 and 4
    /// through their identity coupling.
    pub fn chain(&self, z: C64, r: &Prop2RBlocks) -> Result<Prop2State> {
        let b = self.chain_blocks(z, r)?;
        Ok(self.extract(&b.g11, &b.g22, &b.g33, &b.g44))
    }

    fn chain_blocks(&self, z: C64, r: &Prop2RBlocks) -> Result<ChainBlocks> {
        let lay = &self.layout;
        let m = lay.m();
        let gg = &self.gbar;
        let ff = &self.fbar;
        let ggh = adj(gg);
        let ffh = adj(ff);
        let m33i = inv(&(eye(lay.r1 + lay.r2) - &r.p), "slot 3 (I − Φ_t)")?;
        let s2 = -(&r.q + &ggh.dot(&m33i).dot(gg));
        let w = inv(&(eye(m) + s2.dot(&r.x)), "slot 4 coupling (I + S X)")?;
        let ws2 = w.dot(&s2);
        let s1 = eye(lay.t).mapv(|v| v * z) - &r.psi + ffh.dot(&ws2).dot(ff);
        let (g11, _) = inv_logdet(&s1, "slot 1 (z − Ψ_t)")?;
        let fgf = ff.dot(&g11).dot(&ffh);
        let g44 = -&ws2 + ws2.dot(&fgf).dot(&ws2);
        let g22 = r.x.dot(&w) + (eye(m) - r.x.dot(&ws2)).dot(&fgf).dot(&w);
        let g32 = m33i.dot(gg).dot(&g22);
        let g33 = &m33i + &g32.dot(&ggh).dot(&m33i);
        Ok(ChainBlocks {
            g11,
            g22,
            g32,
            g33,
            g44,
        })
    }

    /// `∂ψ/∂θ*` at a converged state, where `ψ` is the free energy of the
    /// power-factor linearization (`dψ/dz = Tr G11`); user-1 elements first.
    pub fn coefficient_gradient(&self, z: C64, state: &Prop2State) -> Result<CVec> {
        let b = self.chain_blocks(z, &self.r_map(state))?;
        let lay = &self.layout;
        let st = &self.stats;
        let l = lay.total_elements();
        let mut out = CVec::zeros(2 * l);
        for i in 0..2 {
            let rows = lay.user_rows(i);
            let g33 = b.g33.slice(s![rows.clone(), rows.clone()]).to_owned();
            for k in 0..st.num_panels() {
                let link = &st.ris_user[k][i];
                let eta = link.eta(&g33);
                let th = self.theta.panel(k, i);
                let pk = lay.user_panel(i, k);
                let o = self.theta.offset(k);
                for e in 0..th.len() {
                    let mut quad = C64::new(0.0, 0.0);
                    for m in 0..th.len() {
                        quad += eta[[e, m]] * th[m] * b.g22[[pk.start + m, pk.start + e]];
                    }
                    let mut lin = C64::new(0.0, 0.0);
                    for j in 0..link.rows() {
                        lin += link.los[[j, e]].conj() * b.g32[[rows.start + j, pk.start + e]];
                    }
                    out[i * l + o + e] = -quad - lin;
                }
            }
        }
        Ok(out)
    }

    fn extract(&self, g11: &CMat, g22: &CMat, g33: &CMat, g44: &CMat) -> Prop2State {
        let lay = &self.layout;
        let sub = |a: &CMat, r: std::ops::Range<usize>, c: std::ops::Range<usize>| {
            a.slice(s![r, c]).to_owned()
        };
        let k = lay.panels.len();
        let g22p = |i: usize| {
            (0..k)
                .map(|j| sub(g22, lay.user_panel(i, j), lay.user_panel(i, j)))
                .collect()
        };
        let g44p = (0..k)
            .map(|j| {
                let l = lay.panels[j];
                let mut out = zeros(2 * l, 2 * l);
                for a in 0..2 {
                    for b in 0..2 {
                        set_block(
                            &mut out,
                            a * l,
                            b * l,
                            &sub(g44, lay.user_panel(a, j), lay.user_panel(b, j)),
                        );
                    }
                }
                out
            })
            .collect();
        Prop2State {
            g11: g11.clone(),
            g22: [g22p(0), g22p(1)],
            g33: [
                sub(g33, lay.user_rows(0), lay.user_rows(0)),
                sub(g33, lay.user_rows(1), lay.user_rows(1)),
            ],
            g44_lead: [
                sub(g44, lay.user_lead(0), lay.user_lead(0)),
                sub(g44, lay.user_lead(1), lay.user_lead(1)),
            ],
            g44: g44p,
        }
    }

    pub fn lbar_dense(&self) -> CMat {
        let lay = &self.layout;
        let n = lay.n();
        let mut out = zeros(n, n);
        let mut put = |a: usize, b: usize, x: &CMat| {
            set_block(&mut out, lay.slot(a).start, lay.slot(b).start, x);
            if a != b {
                set_block(&mut out, lay.slot(b).start, lay.slot(a).start, &adj(x));
            }
        };
        put(1, 4, &adj(&self.fbar));
        put(2, 3, &adj(&self.gbar));
        put(2, 4, &(-eye(lay.m())));
        put(3, 3, &(-eye(lay.r1 + lay.r2)));
        out
    }

    /// One sweep computed densely; test oracle for [`Prop2System::chain`].
    pub fn dense_step(&self, z: C64, g: &Prop2State) -> Result<Prop2State> {
        let lay = &self.layout;
        let r = self.r_map(g);
        let mut m = -self.lbar_dense();
        let mut place = |a: usize, x: &CMat| {
            let o = lay.slot(a).start;
            let mut v = m.slice_mut(s![o..o + x.nrows(), o..o + x.ncols()]);
            v -= x;
        };
        place(1, &r.psi);
        place(2, &r.q);
        place(3, &r.p);
        place(4, &r.x);
        for j in 0..lay.t {
            m[[j, j]] += z;
        }
        let full = inv(&m, "dense power linearization")?;
        let blk = |a: usize| full.slice(s![lay.slot(a), lay.slot(a)]).to_owned();
        Ok(self.extract(&blk(1), &blk(2), &blk(3), &blk(4)))
    }

    /// Solves at real `z < 0`, rejecting states whose `G11` cannot be the
    /// resolvent of a positive semidefinite matrix; on rejection retries cold
    /// and then descends from `z + i` along decreasing imaginary offsets.
    pub fn solve_left(
        &self,
        z: C64,
        init: Option<&Prop2State>,
        opts: &SolverOptions,
    ) -> Result<(Prop2State, IterationReport)> {
        let recoverable =
            |e: &Error| matches!(e, Error::NoConvergence { .. } | Error::Singular { .. });
        let mut tries = vec![init];
        if init.is_some() {
            tries.push(None);
        }
        for start in tries {
            match self.solve_at(z, start, opts) {
                Ok((s, rep)) if is_physical(z, &s) => return Ok((s, rep)),
                Ok(_) => {}
                Err(e) if recoverable(&e) => {}
                Err(e) => return Err(e),
            }
        }
        let mut warm: Option<Prop2State> = None;
        let mut iterations = 0;
        for eps in DESCENT {
            let (s, rep) = self.solve_at(C64::new(z.re, eps), warm.as_ref(), opts)?;
            iterations += rep.iterations;
            warm = Some(s);
        }
        let (s, mut rep) = self.solve_at(z, warm.as_ref(), opts)?;
        rep.iterations += iterations;
        if !is_physical(z, &s) {
            return Err(Error::Branch(trace(&s.g11).im));
        }
        Ok((s, rep))
    }

    pub fn step(&self, z: C64, g: &Prop2State) -> Result<Prop2State> {
        self.chain(z, &self.r_map(g))
    }

    /// Fixed point at `z`, starting from the deterministic resolvent.
    pub fn solve_at(
        &self,
        z: C64,
        init: Option<&Prop2State>,
        opts: &SolverOptions,
    ) -> Result<(Prop2State, IterationReport)> {
        let lay = &self.layout;
        if self.stats.is_deterministic() {
            let report = IterationReport {
                iterations: 1,
                residual: 0.0,
                history: Vec::new(),
            };
            return Ok((self.step(z, &Prop2State::zeros(lay))?, report));
        }
        let start = match init {
            Some(s) => s.clone(),
            None => self.step(z, &Prop2State::zeros(lay))?,
        };
        let (x0, blocks) = start.to_vec();
        let (v, report) = fixed_point(x0, &blocks, opts, |x| {
            Ok(self.step(z, &Prop2State::from_vec(lay, x))?.to_vec().0)
        })?;
        Ok((Prop2State::from_vec(lay, &v), report))
    }
}

const DESCENT: [f64; 8] = [1.0, 0.3, 0.1, 0.03, 0.01, 1e-3, 1e-4, 1e-5];

/// Whether `G11` at real `z < 0` has its Hermitian spectrum in `[1/z, 0]`.
fn is_physical(z: C64, s: &Prop2State) -> bool {
    let Ok(eigs) = hermitian_eigenvalues(&s.g11) else {
        return false;
    };
    let scale = eigs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let slack = BRANCH_TOL * scale;
    eigs.iter().all(|&e| e <= slack && e >= 1.0 / z.re - slack)
}

/// Converged power-factor system.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PowerFixedPoint {
    /// Evaluation point closest to the origin.
    pub z: C64,
    pub state: Prop2State,
    pub r: Prop2RBlocks,
    /// `−Tr(G11)` extrapolated to `z = 0`.
    pub t: f64,
    /// Values `−Re Tr G11` at `z = −ε`, `−2ε` and `−3ε`.
    pub t_eps: [f64; 3],
    pub report: IterationReport,
}

/// Asymptotic power factor, extrapolating `−Tr G11` at `z = −ε, −2ε, −3ε`
/// quadratically to the origin.
pub fn solve_prop2(
    stats: &ChannelStats,
    theta: &ThetaState,
    cfg: &SystemConfig,
    opts: &SolverOptions,
) -> Result<PowerFixedPoint> {
    cfg.validate()?;
    if stats.tx != cfg.tx || stats.rx != cfg.rx || stats.panel_sizes() != cfg.panels {
        return Err(Error::Dimension(
            "statistics do not match configuration".into(),
        ));
    }
    let sys = Prop2System::new(stats, theta)?;
    let eps = opts.epsilon;
    let z1 = C64::new(-eps, 0.0);
    let (s3, rep3) = sys.solve_left(C64::new(-3.0 * eps, 0.0), None, opts)?;
    let (s2, rep2) = sys.solve_left(C64::new(-2.0 * eps, 0.0), Some(&s3), opts)?;
    let (s1, mut rep1) = sys.solve_left(z1, Some(&s2), opts)?;
    rep1.iterations += rep2.iterations + rep3.iterations;
    let [t1, t2, t3] = [&s1, &s2, &s3].map(|s| -trace(&s.g11).re);
    let t = 3.0 * t1 - 3.0 * t2 + t3;
    if !(t > 0.0) {
        return Err(Error::Degenerate(format!(
            "asymptotic power factor {t} is not positive"
        )));
    }
    Ok(PowerFixedPoint {
        z: z1,
        r: sys.r_map(&s1),
        state: s1,
        t,
        t_eps: [t1, t2, t3],
        report: rep1,
    })
}

/// Power factor `t` and its derivative `∂t/∂θ*` (user-1 elements first).
///
/// `t = −Tr G11(0⁻) = −∂ψ/∂z`, so `∂t/∂θ* = −∂/∂z (∂ψ/∂θ*)` at `0⁻`; the
/// `z`-derivative comes from a three-point extrapolation on a step far below
/// the smallest eigenvalue of `H1†H1 + H2†H2` (which is at least `1/t`).
pub fn power_factor_gradient(
    stats: &ChannelStats,
    theta: &ThetaState,
    cfg: &SystemConfig,
    opts: &SolverOptions,
) -> Result<(f64, CVec)> {
    let base = solve_prop2(stats, theta, cfg, opts)?;
    let sys = Prop2System::new(stats, theta)?;
    let h = -1e-3 / base.t;
    let mut grads = Vec::with_capacity(3);
    let mut warm = base.state.clone();
    for j in 1..=3 {
        let z = C64::new(h * j as f64, 0.0);
        let (state, _) = sys.solve_left(z, Some(&warm), opts)?;
        grads.push(sys.coefficient_gradient(z, &state)?);
        warm = state;
    }
    let dz = (&grads[0] * C64::new(-2.5, 0.0) + &grads[1] * C64::new(4.0, 0.0)
        - &grads[2] * C64::new(1.5, 0.0))
    .mapv(|v| -v / h);
    Ok((base.t, dz))
}
