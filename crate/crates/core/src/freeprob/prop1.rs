//! Resolvent of the seven-slot linearization of `B = H1 (H2† H2)⁻¹ H1†`.
//!
//! With `L̄` the mean part of the linearization and `R` the block map
//! `R(G) = E_D[L̃ G L̃]` of its random part, the block-diagonal resolvent
//! solves `G = E_D[(Λ(z) − R(G) − L̄)⁻¹]`. The iteration is carried on the
//! blocks that feed `R` and each sweep inverts `M = Λ − R − L̄` by block
//! elimination rather than densely.

use ndarray::{concatenate, s, Axis};
use serde::{Deserialize, Serialize};

use super::iterate::{fixed_point, pack, unpack, IterationReport};
use super::layout::Prop1Layout;
use super::SolverOptions;
use crate::error::{Error, Result};
use crate::linalg::{
    adj, conj_diag, conj_diag_adj, eye, hermitian_eigenvalues, inv_logdet, scale_cols, set_block,
    trace, trace_prod, wrap_phase, zeros, CMat, C64,
};
use crate::model::{ChannelStats, SystemConfig, ThetaState};

/// The resolvent blocks that enter the block map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1State {
    /// Slot 1, `R1 × R1`; its normalized trace is `G_B(z)`.
    pub g11: CMat,
    /// Slot 3, `T × T`.
    pub g33: CMat,
    /// Slot 5, `R2 × R2`.
    pub g55: CMat,
    pub g22_lead: CMat,
    pub g66_lead: CMat,
    /// Per-panel diagonal blocks of slots 2, 6, 7, 4.
    pub g22: Vec<CMat>,
    pub g66: Vec<CMat>,
    pub g77: Vec<CMat>,
    pub g44: Vec<CMat>,
    /// Per-panel cross blocks between slots 2 and 6.
    pub g26: Vec<CMat>,
    pub g62: Vec<CMat>,
}

impl Prop1State {
    /// `z⁻¹ I` on every diagonal block, zero cross blocks.
    pub fn scaled_identity(layout: &Prop1Layout, z: C64) -> Self {
        let w = C64::new(1.0, 0.0) / z;
        let id = |n: usize| eye(n).mapv(|v| v * w);
        let per =
            |f: &dyn Fn(usize) -> CMat| layout.panels.iter().map(|&l| f(l)).collect::<Vec<_>>();
        Prop1State {
            g11: id(layout.r1),
            g33: id(layout.t),
            g55: id(layout.r2),
            g22_lead: id(layout.r1),
            g66_lead: id(layout.r2),
            g22: per(&id),
            g66: per(&id),
            g77: per(&id),
            g44: per(&id),
            g26: per(&|l| zeros(l, l)),
            g62: per(&|l| zeros(l, l)),
        }
    }

    fn parts(&self) -> Vec<&CMat> {
        let mut v = vec![
            &self.g11,
            &self.g33,
            &self.g55,
            &self.g22_lead,
            &self.g66_lead,
        ];
        for list in [
            &self.g22, &self.g66, &self.g77, &self.g44, &self.g26, &self.g62,
        ] {
            v.extend(list.iter());
        }
        v
    }

    fn shapes(layout: &Prop1Layout) -> Vec<(usize, usize)> {
        let (r1, r2, t) = (layout.r1, layout.r2, layout.t);
        let mut v = vec![(r1, r1), (t, t), (r2, r2), (r1, r1), (r2, r2)];
        for _ in 0..6 {
            v.extend(layout.panels.iter().map(|&l| (l, l)));
        }
        v
    }

    pub fn to_vec(&self) -> (Vec<C64>, Vec<std::ops::Range<usize>>) {
        pack(&self.parts())
    }

    pub fn from_vec(layout: &Prop1Layout, v: &[C64]) -> Self {
        let mut it = unpack(v, &Self::shapes(layout)).into_iter();
        let k = layout.panels.len();
        let mut take = |n: usize| (0..n).map(|_| it.next().unwrap()).collect::<Vec<_>>();
        let head = take(5);
        let g22 = take(k);
        let g66 = take(k);
        let g77 = take(k);
        let g44 = take(k);
        let g26 = take(k);
        let g62 = take(k);
        let [g11, g33, g55, g22_lead, g66_lead]: [CMat; 5] = head.try_into().unwrap();
        Prop1State {
            g11,
            g33,
            g55,
            g22_lead,
            g66_lead,
            g22,
            g66,
            g77,
            g44,
            g26,
            g62,
        }
    }

    /// Largest Frobenius distance between corresponding blocks.
    pub fn distance(&self, other: &Prop1State) -> f64 {
        self.parts()
            .iter()
            .zip(other.parts())
            .map(|(a, b)| crate::linalg::fro(&(*a - b)))
            .fold(0.0, f64::max)
    }
}

/// Image of the block map: the nonzero blocks of `R(G)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RBlocks {
    /// Slot 1: `Σ_k η̃_{k,1}(Θ_{k,1} G77_k Θ_{k,1}†)`.
    pub p1: CMat,
    /// Slot 5: `Σ_k η̃_{k,2}(Θ_{k,2} G44_k Θ_{k,2}†)`.
    pub p5: CMat,
    /// Slot 3: correlation of `F̃_1`, `F̃_2` against slots 2 and 6.
    pub y33: CMat,
    /// Slot 7 panel blocks `Θ_{k,1}† η_{k,1}(G11) Θ_{k,1}`.
    pub q7: Vec<CMat>,
    /// Slot 4 panel blocks `Θ_{k,2}† η_{k,2}(G55) Θ_{k,2}`.
    pub q4: Vec<CMat>,
    /// Lead blocks of slots 2 and 6: `η̃_{0,i}(G33)`.
    pub x22_lead: CMat,
    pub x66_lead: CMat,
    /// `ζ̃_k(G33)`: panel blocks of slots 2 and 6 and, negated, of the
    /// cross blocks.
    pub zt: Vec<CMat>,
    /// Cross blocks are dropped in the simplified system.
    pub simplified: bool,
}

/// Output of one inversion of `M = Λ − R − L̄`.
#[derive(Clone, Debug)]
pub(crate) struct ChainOutput {
    pub state: Prop1State,
    pub g17: CMat,
    pub g54: CMat,
    pub log_det: C64,
}

/// Mean blocks and statistics for one `(stats, θ)` pair.
#[derive(Clone, Debug)]
pub struct Prop1System {
    pub stats: ChannelStats,
    pub theta: ThetaState,
    pub layout: Prop1Layout,
    /// `Ḡ_i = [I, R̄_{1,i}Θ_{1,i}, …]`, `R_i × (R_i + L)`.
    pub gbar: [CMat; 2],
    /// `F̄_i = [R̄_{0,i}; F̄_1; …]`, `(R_i + L) × T`.
    pub fbar: [CMat; 2],
    pub simplified: bool,
}

/// Block-diagonal matrix from a lead block and panel blocks.
pub(crate) fn block_diag(lead: &CMat, panels: &[CMat]) -> CMat {
    let n = lead.nrows() + panels.iter().map(|p| p.nrows()).sum::<usize>();
    let mut out = zeros(n, n);
    set_block(&mut out, 0, 0, lead);
    let mut o = lead.nrows();
    for p in panels {
        set_block(&mut out, o, o, p);
        o += p.nrows();
    }
    out
}

/// `(ra + L) × (rb + L)` matrix holding `panels` on the panel diagonal.
pub(crate) fn cross_panels(ra: usize, rb: usize, panels: &[CMat]) -> CMat {
    let l: usize = panels.iter().map(|p| p.nrows()).sum();
    let mut out = zeros(ra + l, rb + l);
    let mut o = 0;
    for p in panels {
        set_block(&mut out, ra + o, rb + o, p);
        o += p.nrows();
    }
    out
}

impl Prop1System {
    pub fn new(stats: &ChannelStats, theta: &ThetaState, simplified: bool) -> Result<Self> {
        stats.validate()?;
        // Coefficients need not be feasible here; derivative probes perturb them.
        if theta.panels() != stats.panel_sizes().as_slice()
            || theta.side(0).len() != theta.side(1).len()
        {
            return Err(Error::Dimension(format!(
                "coefficient panels {:?} do not match channel panels {:?}",
                theta.panels(),
                stats.panel_sizes()
            )));
        }
        let [r1, r2] = stats.rx;
        let t = stats.tx;
        if r2 < t {
            return Err(Error::Contract(format!(
                "the resolvent system needs R2 ≥ T (got R2 = {r2}, T = {t}); augment user 2 first"
            )));
        }
        let panels = stats.panel_sizes();
        let layout = Prop1Layout::new(r1, r2, t, &panels);
        let l = layout.total_elements();
        let mk = |i: usize| {
            let r = stats.rx[i];
            let mut g = zeros(r, r + l);
            set_block(&mut g, 0, 0, &eye(r));
            let mut f = zeros(r + l, t);
            set_block(&mut f, 0, 0, &stats.direct[i].los);
            let mut o = 0;
            for (k, &lk) in panels.iter().enumerate() {
                let rt = scale_cols(&stats.ris_user[k][i].los, theta.panel(k, i));
                set_block(&mut g, 0, r + o, &rt);
                set_block(&mut f, r + o, 0, &stats.bs_ris[k].los);
                o += lk;
            }
            (g, f)
        };
        let (g1, f1) = mk(0);
        let (g2, f2) = mk(1);
        Ok(Prop1System {
            stats: stats.clone(),
            theta: theta.clone(),
            layout,
            gbar: [g1, g2],
            fbar: [f1, f2],
            simplified,
        })
    }

    /// The block map `R(G)`.
    pub fn r_map(&self, g: &Prop1State) -> RBlocks {
        let st = &self.stats;
        let (r1, r2) = (self.layout.r1, self.layout.r2);
        let mut p1 = zeros(r1, r1);
        let mut p5 = zeros(r2, r2);
        let mut y33 = st.direct[0].eta(&g.g22_lead) + st.direct[1].eta(&g.g66_lead);
        let mut q7 = Vec::new();
        let mut q4 = Vec::new();
        let mut zt = Vec::new();
        for k in 0..st.num_panels() {
            let th1 = self.theta.panel(k, 0);
            let th2 = self.theta.panel(k, 1);
            let [u1, u2] = &st.ris_user[k];
            let f = &st.bs_ris[k];
            p1 += &u1.eta_tilde(&conj_diag(th1, &g.g77[k]));
            q7.push(conj_diag_adj(th1, &u1.eta(&g.g11)));
            p5 += &u2.eta_tilde(&conj_diag(th2, &g.g44[k]));
            q4.push(conj_diag_adj(th2, &u2.eta(&g.g55)));
            zt.push(f.eta_tilde(&g.g33));
            let mut arg = &g.g22[k] + &g.g66[k];
            if !self.simplified {
                arg = arg - &g.g26[k] - &g.g62[k];
            }
            y33 += &f.eta(&arg);
        }
        RBlocks {
            p1,
            p5,
            y33,
            q7,
            q4,
            x22_lead: st.direct[0].eta_tilde(&g.g33),
            x66_lead: st.direct[1].eta_tilde(&g.g33),
            zt,
            simplified: self.simplified,
        }
    }

    /// Slot 2 and 6 diagonals and the `+ζ̃` cross matrices in the (2, 6)
    /// and (6, 2) positions.
    fn x_blocks(&self, r: &RBlocks) -> (CMat, CMat, CMat, CMat) {
        let x22 = block_diag(&r.x22_lead, &r.zt);
        let x66 = block_diag(&r.x66_lead, &r.zt);
        let (r1, r2) = (self.layout.r1, self.layout.r2);
        if r.simplified {
            let (a, b) = (x22.nrows(), x66.nrows());
            (x22, x66, zeros(a, b), zeros(b, a))
        } else {
            (
                x22,
                x66,
                cross_panels(r1, r2, &r.zt),
                cross_panels(r2, r1, &r.zt),
            )
        }
    }

    /// Inverts `M = Λ(z) − R − L̄` by eliminating slots 1 and 5 and then
    /// slots 2 and 6 through their identity couplings to slots 7 and 4.
    pub(crate) fn chain(&self, z: C64, r: &RBlocks) -> Result<ChainOutput> {
        let lay = &self.layout;
        let (r1, r2, t) = (lay.r1, lay.r2, lay.t);
        let [g1, g2] = &self.gbar;
        let [f1, f2] = &self.fbar;
        let g1h = adj(g1);
        let g2h = adj(g2);

        let m11 = eye(r1).mapv(|v| v * z) - &r.p1;
        let (m11i, ld1) = inv_logdet(&m11, "slot 1 (z − Φ₁)")?;
        let m55 = -(eye(r2) + &r.p5);
        let (m55i, ld5) = inv_logdet(&m55, "slot 5 (−Φ₂ − I)")?;

        let s7 = -(block_diag(&zeros(r1, r1), &r.q7) + g1h.dot(&m11i).dot(g1));
        let s4 = -(block_diag(&zeros(r2, r2), &r.q4) + g2h.dot(&m55i).dot(g2));

        let (x22, x66, zc, zc62) = self.x_blocks(r);
        // M26 = −R26 = +ζ̃ on panel blocks; likewise M62.
        let m22 = -x22;
        let m23 = -f1;
        let m26 = zc.clone();
        let m32 = -adj(f1);
        let m33 = -r.y33.clone();
        let m36 = adj(f2);
        let m62 = zc62;
        let m63 = f2.clone();
        let m66 = -x66;

        let n7 = r1 + lay.total_elements();
        let n4 = r2 + lay.total_elements();
        let top = concatenate![Axis(1), eye(n7) - m22.dot(&s7), m23, m26.dot(&s4)];
        let mid = concatenate![Axis(1), -m32.dot(&s7), m33, m36.dot(&s4)];
        let bot = concatenate![Axis(1), -m62.dot(&s7), m63, m66.dot(&s4) - eye(n4)];
        let nt = concatenate![Axis(0), top, mid, bot];
        let (e, ldn) = inv_logdet(&nt, "reduced core (slots 2, 3, 6)")?;

        let (a, b) = (n7, n7 + t);
        let c7 = -concatenate![Axis(0), m22, m32, m62];
        let c4 = concatenate![Axis(0), m26, m36, m66];
        let g77 = e.slice(s![..a, ..]).dot(&c7);
        let g44 = e.slice(s![b.., ..]).dot(&c4);
        let g72 = e.slice(s![..a, ..a]).to_owned();
        let g42 = e.slice(s![b.., ..a]).to_owned();
        let g76 = e.slice(s![..a, b..]).to_owned();
        let g46 = e.slice(s![b.., b..]).to_owned();
        let g33 = e.slice(s![a..b, a..b]).to_owned();

        let g22 = -s7.dot(&g72);
        let g62 = s4.dot(&g42);
        let g26 = -s7.dot(&g76);
        let g66 = s4.dot(&g46);

        let g17 = m11i.dot(g1).dot(&g77);
        let g11 = &m11i + &g17.dot(&g1h).dot(&m11i);
        let g54 = -m55i.dot(g2).dot(&g44);
        let g55 = &m55i - &g54.dot(&g2h).dot(&m55i);

        let diag = |m: &CMat, a: usize| -> Vec<CMat> {
            (0..lay.panels.len())
                .map(|k| {
                    let p = lay.panel_local(a, k);
                    m.slice(s![p.clone(), p]).to_owned()
                })
                .collect()
        };
        let cross = |m: &CMat, ra: usize, rb: usize| -> Vec<CMat> {
            let mut o = 0;
            lay.panels
                .iter()
                .map(|&l| {
                    let out = m
                        .slice(s![ra + o..ra + o + l, rb + o..rb + o + l])
                        .to_owned();
                    o += l;
                    out
                })
                .collect()
        };
        let state = Prop1State {
            g22_lead: g22.slice(s![..r1, ..r1]).to_owned(),
            g66_lead: g66.slice(s![..r2, ..r2]).to_owned(),
            g22: diag(&g22, 2),
            g66: diag(&g66, 6),
            g77: diag(&g77, 7),
            g44: diag(&g44, 4),
            g26: cross(&g26, r1, r2),
            g62: cross(&g62, r2, r1),
            g11,
            g33,
            g55,
        };
        // Eliminating slots 2 and 6 through their identity couplings leaves
        // the sign (−1)^(R1 + L).
        let parity = n7 % 2;
        let log_det = ld1 + ld5 + ldn + C64::new(0.0, std::f64::consts::PI * parity as f64);
        Ok(ChainOutput {
            state,
            g17,
            g54,
            log_det,
        })
    }

    /// Deterministic mean `L̄` of the linearization as a dense matrix.
    pub fn lbar_dense(&self) -> CMat {
        let lay = &self.layout;
        let n = lay.n();
        let mut m = zeros(n, n);
        let l = lay.total_elements();
        let (r1, r2) = (lay.r1, lay.r2);
        let mut put = |a: usize, b: usize, x: &CMat| {
            let (ra, rb) = (lay.slot(a), lay.slot(b));
            set_block(&mut m, ra.start, rb.start, x);
            if a != b {
                set_block(&mut m, rb.start, ra.start, &adj(x));
            }
        };
        put(1, 7, &self.gbar[0]);
        put(2, 3, &self.fbar[0]);
        put(2, 7, &(-eye(r1 + l)));
        put(3, 6, &(-adj(&self.fbar[1])));
        put(4, 5, &(-adj(&self.gbar[1])));
        put(4, 6, &eye(r2 + l));
        put(5, 5, &eye(r2));
        m
    }

    /// `R(G)` placed in a dense `n × n` matrix.
    pub fn r_dense(&self, r: &RBlocks) -> CMat {
        let lay = &self.layout;
        let n = lay.n();
        let mut m = zeros(n, n);
        let (x22, x66, zc, zc62) = self.x_blocks(r);
        let place = |m: &mut CMat, a: usize, b: usize, x: &CMat| {
            set_block(m, lay.slot(a).start, lay.slot(b).start, x)
        };
        place(&mut m, 1, 1, &r.p1);
        place(&mut m, 2, 2, &x22);
        place(&mut m, 3, 3, &r.y33);
        place(&mut m, 4, 4, &block_diag(&zeros(lay.r2, lay.r2), &r.q4));
        place(&mut m, 5, 5, &r.p5);
        place(&mut m, 6, 6, &x66);
        place(&mut m, 7, 7, &block_diag(&zeros(lay.r1, lay.r1), &r.q7));
        place(&mut m, 2, 6, &(-&zc));
        place(&mut m, 6, 2, &(-&zc62));
        m
    }

    /// `Λ(z) − R − L̄` as a dense matrix.
    pub fn m_dense(&self, z: C64, r: &RBlocks) -> CMat {
        let mut m = -(self.r_dense(r) + self.lbar_dense());
        for j in 0..self.layout.r1 {
            m[[j, j]] += z;
        }
        m
    }

    /// Reads the retained blocks of a dense `n × n` matrix.
    pub fn extract_state(&self, g: &CMat) -> Prop1State {
        let lay = &self.layout;
        let sub =
            |r: std::ops::Range<usize>, c: std::ops::Range<usize>| g.slice(s![r, c]).to_owned();
        let diag = |a: usize| -> Vec<CMat> {
            (0..lay.panels.len())
                .map(|k| sub(lay.panel_global(a, k), lay.panel_global(a, k)))
                .collect()
        };
        let cross = |a: usize, b: usize| -> Vec<CMat> {
            (0..lay.panels.len())
                .map(|k| sub(lay.panel_global(a, k), lay.panel_global(b, k)))
                .collect()
        };
        Prop1State {
            g11: sub(lay.slot(1), lay.slot(1)),
            g33: sub(lay.slot(3), lay.slot(3)),
            g55: sub(lay.slot(5), lay.slot(5)),
            g22_lead: sub(lay.lead_global(2), lay.lead_global(2)),
            g66_lead: sub(lay.lead_global(6), lay.lead_global(6)),
            g22: diag(2),
            g66: diag(6),
            g77: diag(7),
            g44: diag(4),
            g26: cross(2, 6),
            g62: cross(6, 2),
        }
    }

    /// One sweep `G ↦ E_D[(Λ − R(G) − L̄)⁻¹]` computed densely. Test oracle
    /// for the block elimination.
    pub fn dense_step(&self, z: C64, g: &Prop1State) -> Result<(Prop1State, C64)> {
        let m = self.m_dense(z, &self.r_map(g));
        let (inv, ld) = inv_logdet(&m, "dense linearization")?;
        Ok((self.extract_state(&inv), ld))
    }

    /// One sweep via block elimination.
    pub fn step(&self, z: C64, g: &Prop1State) -> Result<Prop1State> {
        Ok(self.chain(z, &self.r_map(g))?.state)
    }

    /// Solves the fixed point at `z` starting from `init` (or the scaled
    /// identity).
    pub fn solve_from(
        &self,
        z: C64,
        init: Option<&Prop1State>,
        opts: &SolverOptions,
    ) -> Result<FixedPointSolution> {
        let start = init
            .cloned()
            .unwrap_or_else(|| Prop1State::scaled_identity(&self.layout, z));
        let lay = &self.layout;
        let (state, report) = if self.stats.is_deterministic() {
            // The block map vanishes: one elimination is exact.
            let report = IterationReport {
                iterations: 1,
                residual: 0.0,
                history: Vec::new(),
            };
            (start, report)
        } else {
            let (x0, blocks) = start.to_vec();
            let (v, report) = fixed_point(x0, &blocks, opts, |x| {
                let g = Prop1State::from_vec(lay, x);
                Ok(self.step(z, &g)?.to_vec().0)
            })?;
            (Prop1State::from_vec(lay, &v), report)
        };
        let r = self.r_map(&state);
        let out = self.chain(z, &r)?;
        Ok(FixedPointSolution {
            z,
            r: self.r_map(&out.state),
            state: out.state,
            g17: out.g17,
            g54: out.g54,
            log_det: out.log_det,
            report,
            simplified: self.simplified,
        })
    }

    /// Solves at `z` with `Re z < 0`, first from `init` (or the default
    /// start), then cold, and finally by descending onto `z` from
    /// `Re z + i` whenever the fixed point found is not physical.
    pub fn solve_left(
        &self,
        z: C64,
        init: Option<&Prop1State>,
        opts: &SolverOptions,
    ) -> Result<FixedPointSolution> {
        let recoverable =
            |e: &Error| matches!(e, Error::NoConvergence { .. } | Error::Singular { .. });
        match self.solve(z, init, opts) {
            Ok(s) if is_physical(&s) => return Ok(s),
            Ok(_) => {}
            Err(e) if recoverable(&e) && init.is_some() => {}
            Err(e) => return Err(e),
        }
        if init.is_some() {
            match self.solve(z, None, opts) {
                Ok(s) if is_physical(&s) => return Ok(s),
                Ok(_) => {}
                Err(e) if recoverable(&e) => {}
                Err(e) => return Err(e),
            }
        }
        let mut warm: Option<Prop1State> = None;
        let mut iterations = 0;
        for eps in DESCENT.into_iter().filter(|&e| e > z.im) {
            let sol = self.solve_from(C64::new(z.re, eps), warm.as_ref(), opts)?;
            iterations += sol.report.iterations;
            warm = Some(sol.state);
        }
        let mut sol = self.solve_from(z, warm.as_ref(), opts)?;
        sol.report.iterations += iterations;
        if !is_physical(&sol) {
            return Err(Error::Branch(sol.free_energy().im));
        }
        Ok(sol)
    }

    /// Solves at `z`, approaching small imaginary parts to the right of the
    /// origin through a decreasing ladder of offsets when no start is given.
    pub fn solve(
        &self,
        z: C64,
        init: Option<&Prop1State>,
        opts: &SolverOptions,
    ) -> Result<FixedPointSolution> {
        let direct = init.is_some() || z.re <= 0.0 || z.im >= CONTINUATION_LADDER[0];
        if direct || !opts.continuation || self.stats.is_deterministic() {
            return self.solve_from(z, init, opts);
        }
        let mut warm: Option<Prop1State> = None;
        let mut total = 0;
        for &eps in CONTINUATION_LADDER.iter().filter(|&&e| e > z.im) {
            let sol = self.solve_from(C64::new(z.re, eps), warm.as_ref(), opts)?;
            total += sol.report.iterations;
            warm = Some(sol.state);
        }
        let mut sol = self.solve_from(z, warm.as_ref(), opts)?;
        sol.report.iterations += total;
        Ok(sol)
    }
}

/// Largest imaginary residue tolerated in `φ` at real points.
pub const BRANCH_TOL: f64 = 1e-6;

/// Offsets of the path that reaches a point left of the spectrum from the
/// upper half-plane.
const DESCENT: [f64; 8] = [1.0, 0.3, 0.1, 0.03, 0.01, 1e-3, 1e-4, 1e-5];

/// Whether a solution at `Re z < 0` can be the resolvent of `B ⪰ 0`: the
/// spectrum of the Hermitian part of `G11` must lie in `[1/Re z, 0)` and, on
/// the real axis, the free energy must be real. Points with `Re z ≥ 0` pass.
pub fn is_physical(sol: &FixedPointSolution) -> bool {
    let x = sol.z.re;
    if x >= 0.0 {
        return true;
    }
    if sol.z.im == 0.0 && (wrap_phase(2.0 * sol.free_energy().im) / 2.0).abs() > BRANCH_TOL {
        return false;
    }
    let Ok(eigs) = hermitian_eigenvalues(&sol.state.g11) else {
        return false;
    };
    let slack = BRANCH_TOL / x.abs();
    eigs.iter().all(|&e| e >= 1.0 / x - slack && e <= slack)
}

/// Imaginary offsets used to reach the real axis inside the spectrum.
pub const CONTINUATION_LADDER: [f64; 9] = [1.0, 0.3, 0.1, 0.03, 0.01, 3e-3, 1e-3, 1e-4, 1e-5];

/// Converged block-diagonal resolvent at one spectral point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixedPointSolution {
    pub z: C64,
    pub state: Prop1State,
    /// Row-1 × slot-7 block of the resolvent, used by the gradient.
    pub g17: CMat,
    /// Row-5 × slot-4 block of the resolvent, used by the gradient.
    pub g54: CMat,
    /// Block map evaluated at the converged state.
    pub r: RBlocks,
    /// `log det(Λ − R − L̄)` from the elimination pivots.
    pub log_det: C64,
    pub report: IterationReport,
    pub simplified: bool,
}

impl FixedPointSolution {
    pub fn trace_g11(&self) -> C64 {
        trace(&self.state.g11)
    }

    /// `G_B(z) = Tr(G11) / R1`.
    pub fn cauchy_b(&self) -> C64 {
        self.trace_g11() / self.state.g11.nrows() as f64
    }

    /// `log det(Λ − R − L̄) + Tr(Φ₁G11) + Tr(Φ₂G55) + Tr(Ψ G33)`, the
    /// stationary value of the free energy whose derivative in `z` is
    /// `Tr(G11)`.
    pub fn free_energy(&self) -> C64 {
        self.log_det
            + trace_prod(&self.r.p1, &self.state.g11)
            + trace_prod(&self.r.p5, &self.state.g55)
            + trace_prod(&self.r.y33, &self.state.g33)
    }
}

fn check_dims(stats: &ChannelStats, cfg: &SystemConfig) -> Result<()> {
    cfg.validate()?;
    let augmented = stats.rx[1] == cfg.tx && cfg.rx[1] < cfg.tx;
    if stats.tx != cfg.tx
        || stats.rx[0] != cfg.rx[0]
        || (stats.rx[1] != cfg.rx[1] && !augmented)
        || stats.panel_sizes() != cfg.panels
    {
        return Err(Error::Dimension(format!(
            "statistics (T = {}, R = {:?}, panels {:?}) do not match configuration (T = {}, R = {:?}, panels {:?})",
            stats.tx,
            stats.rx,
            stats.panel_sizes(),
            cfg.tx,
            cfg.rx,
            cfg.panels
        )));
    }
    Ok(())
}

/// Solves the resolvent fixed point at `z` with `Im z > 0`.
///
/// For `R2 < T < R1 + R2` the statistics must already carry the augmented
/// user 2 (see [`ChannelStats::augmented`]).
pub fn solve_prop1(
    stats: &ChannelStats,
    theta: &ThetaState,
    cfg: &SystemConfig,
    z: C64,
    opts: &SolverOptions,
) -> Result<FixedPointSolution> {
    check_dims(stats, cfg)?;
    if !(z.im > 0.0) {
        return Err(Error::Contract(format!(
            "spectral point {z} must lie in the upper half-plane"
        )));
    }
    Prop1System::new(stats, theta, false)?.solve(z, None, opts)
}

/// `G_B(z) = Tr(G11(z)) / R1`.
pub fn cauchy_b(sol: &FixedPointSolution) -> C64 {
    sol.cauchy_b()
}

/// Count of ratio-carrying eigenvalues, zero eigenvalues and rows of the
/// matrix whose spectrum is computed, after the swap that puts the larger
/// receiver first.
pub fn spectrum_counts(cfg: &SystemConfig) -> (usize, usize, usize) {
    let n_b = cfg.rx[0].max(cfg.rx[1]);
    let s = cfg.s();
    (s, n_b - n_b.min(cfg.tx), n_b)
}

/// Cauchy transform of the ratio distribution from `G_B`, removing the
/// `n_B − min(n_B, T)` zero eigenvalues of `B`.
pub fn cauchy_mu(g_b: C64, z: C64, cfg: &SystemConfig) -> Result<C64> {
    let (s, zeros_b, n_b) = spectrum_counts(cfg);
    if s == 0 {
        return Err(Error::Contract(
            "no coupled subchannels when T ≥ R1 + R2".into(),
        ));
    }
    if zeros_b > 0 && z.norm() == 0.0 {
        return Err(Error::Contract("pole at z = 0".into()));
    }
    let s = s as f64;
    let mut out = g_b * (n_b as f64 / s);
    if zeros_b > 0 {
        out -= C64::new(zeros_b as f64, 0.0) / (z * s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{complex_gaussian, fro};
    use crate::model::{generate_stats, ScenarioParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small(
        r: [usize; 2],
        t: usize,
        panels: Vec<usize>,
        seed: u64,
    ) -> (SystemConfig, ChannelStats, ThetaState) {
        let cfg = SystemConfig::new(t, r, panels);
        let stats = generate_stats(&cfg, &ScenarioParams::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let theta = ThetaState::random(cfg.panels.clone(), &mut rng);
        (cfg, stats, theta)
    }

    fn random_state(lay: &Prop1Layout, seed: u64) -> Prop1State {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, _) = Prop1State::scaled_identity(lay, C64::new(1.0, 0.0)).to_vec();
        let noise = complex_gaussian(v.len(), 1, 0.1, &mut rng);
        let w: Vec<C64> = v.iter().zip(noise.iter()).map(|(a, b)| a + b).collect();
        Prop1State::from_vec(lay, &w)
    }

    fn phase_gap(a: C64, b: C64) -> f64 {
        crate::linalg::wrap_phase(a.im - b.im).abs()
    }

    #[test]
    fn elimination_matches_dense_inverse() {
        for (dims, t, panels, seed) in [
            ([3, 4], 3, vec![2, 3], 1),
            ([5, 4], 4, vec![3], 2),
            ([2, 3], 2, vec![1, 2, 2], 3),
            ([4, 4], 4, vec![], 4),
            ([3, 3], 3, vec![1], 5),
            ([3, 4], 2, vec![1], 6),
            ([2, 2], 2, vec![1], 7),
            ([2, 3], 3, vec![2], 8),
            ([3, 3], 2, vec![2], 9),
        ] {
            let (_, stats, theta) = small(dims, t, panels, seed);
            for simplified in [false, true] {
                let sys = Prop1System::new(&stats, &theta, simplified).unwrap();
                let g = random_state(&sys.layout, seed + 10);
                let z = C64::new(-0.7, 0.3);
                let r = sys.r_map(&g);
                let chain = sys.chain(z, &r).unwrap();
                let (inv, ld) = inv_logdet(&sys.m_dense(z, &r), "dense").unwrap();
                let dense = sys.extract_state(&inv);
                let scale = dense.g11.iter().map(|v| v.norm()).fold(1.0, f64::max);
                assert!(chain.state.distance(&dense) < 1e-10 * scale, "{dims:?} {t}");
                let lay = &sys.layout;
                let g17 = inv.slice(s![lay.slot(1), lay.slot(7)]).to_owned();
                let g54 = inv.slice(s![lay.slot(5), lay.slot(4)]).to_owned();
                assert!(fro(&(&chain.g17 - &g17)) < 1e-10 * scale);
                assert!(fro(&(&chain.g54 - &g54)) < 1e-10 * scale);
                assert!((chain.log_det.re - ld.re).abs() < 1e-9 * ld.re.abs().max(1.0));
                assert!(
                    phase_gap(chain.log_det, ld) < 1e-8,
                    "{dims:?} {t}: {} vs {ld}",
                    chain.log_det
                );
            }
        }
    }

    #[test]
    fn deterministic_channels_converge_immediately() {
        let (cfg, mut stats, theta) = small([4, 5], 3, vec![2, 2], 5);
        for l in stats
            .bs_ris
            .iter_mut()
            .chain(stats.direct.iter_mut())
            .chain(stats.ris_user.iter_mut().flatten())
        {
            l.profile.fill(0.0);
        }
        let z = C64::new(0.5, 0.2);
        let sol = solve_prop1(&stats, &theta, &cfg, z, &SolverOptions::default()).unwrap();
        assert!(sol.report.iterations <= 2);
        let sys = Prop1System::new(&stats, &theta, false).unwrap();
        let mut lam = sys.lbar_dense().mapv(|v| -v);
        for j in 0..4 {
            lam[[j, j]] += z;
        }
        let inv = crate::linalg::inv(&lam, "test").unwrap();
        let g11 = inv.slice(s![..4, ..4]).to_owned();
        assert!(fro(&(&sol.state.g11 - &g11)) < 1e-10);
        let h1 = sample_h(&stats, &theta, 0);
        let b =
            h1.0.dot(&crate::linalg::inv(&adj(&h1.1).dot(&h1.1), "gram").unwrap())
                .dot(&adj(&h1.0));
        let res = crate::linalg::inv(&(eye(4).mapv(|v| v * z) - b), "res").unwrap();
        assert!(fro(&(&res - &g11)) < 1e-9);
    }

    fn sample_h(stats: &ChannelStats, theta: &ThetaState, seed: u64) -> (CMat, CMat) {
        let r = crate::model::sample_realization(stats, theta, seed).unwrap();
        let [a, b] = r.h;
        (a, b)
    }

    #[test]
    fn converged_state_is_a_dense_fixed_point() {
        let (cfg, stats, theta) = small([4, 5], 3, vec![3, 2], 6);
        let z = C64::new(-1.0, 1e-6);
        let sol = solve_prop1(&stats, &theta, &cfg, z, &SolverOptions::default()).unwrap();
        let sys = Prop1System::new(&stats, &theta, false).unwrap();
        let (again, _) = sys.dense_step(z, &sol.state).unwrap();
        assert!(again.distance(&sol.state) < 1e-7);
    }

    #[test]
    fn resolvent_matches_monte_carlo() {
        let (cfg, stats, theta) = small([6, 5], 4, vec![5, 3], 7);
        let z = C64::new(-2.0, 1e-6);
        let sol = solve_prop1(&stats, &theta, &cfg, z, &SolverOptions::default()).unwrap();
        let n = 4000;
        let mut acc = C64::new(0.0, 0.0);
        for seed in 0..n {
            let (h1, h2) = sample_h(&stats, &theta, seed);
            let b = h1
                .dot(&crate::linalg::inv(&adj(&h2).dot(&h2), "gram").unwrap())
                .dot(&adj(&h1));
            let res = crate::linalg::inv(&(eye(6).mapv(|v| v * z) - b), "res").unwrap();
            acc += trace(&res) / 6.0;
        }
        acc /= n as f64;
        let gb = sol.cauchy_b();
        assert!(
            (gb.re - acc.re).abs() < 0.01 * acc.re.abs(),
            "{gb} vs {acc}"
        );
    }

    #[test]
    fn herglotz_and_tail() {
        let (cfg, stats, theta) = small([4, 4], 3, vec![2, 2], 8);
        let opts = SolverOptions::default();
        for z in [C64::new(0.3, 0.5), C64::new(2.0, 0.1), C64::new(-1.0, 1.0)] {
            let sol = solve_prop1(&stats, &theta, &cfg, z, &opts).unwrap();
            assert!(sol.cauchy_b().im < 0.0);
            assert!(sol.trace_g11().im < 0.0);
        }
        for (y, tol) in [(1e4, 1e-2), (1e6, 1e-4)] {
            let z = C64::new(0.0, y);
            let sol = solve_prop1(&stats, &theta, &cfg, z, &opts).unwrap();
            assert!((z * sol.cauchy_b() - 1.0).norm() < tol);
        }
    }

    #[test]
    fn free_energy_derivative_is_trace() {
        let (cfg, stats, theta) = small([5, 4], 3, vec![3, 2], 9);
        let opts = SolverOptions {
            tolerance: 1e-12,
            ..SolverOptions::default()
        };
        let sys = Prop1System::new(&stats, &theta, false).unwrap();
        let _ = cfg;
        for x in [-0.4, -1.0, -3.0] {
            let h = 1e-4;
            let f = |x: f64| sys.solve(C64::new(x, 0.0), None, &opts).unwrap();
            let d = (f(x + h).free_energy() - f(x - h).free_energy()) / (2.0 * h);
            let tr = f(x).trace_g11();
            assert!(
                (d.re - tr.re).abs() < 1e-6 * tr.re.abs().max(1.0),
                "{d} vs {tr}"
            );
        }
    }

    #[test]
    fn cauchy_mu_branches() {
        let cfg = SystemConfig::new(4, [4, 4], vec![2]);
        let z = C64::new(0.3, 0.2);
        let g = C64::new(0.1, -0.4);
        assert_eq!(cauchy_mu(g, z, &cfg).unwrap(), g);
        let cfg = SystemConfig::new(3, [5, 4], vec![2]);
        let gb = C64::new(1.0, 0.0) / z;
        assert!((cauchy_mu(gb, z, &cfg).unwrap() - gb).norm() < 1e-14);
        assert!(cauchy_mu(gb, C64::new(0.0, 0.0), &cfg).is_err());
        let mixed = SystemConfig::new(6, [5, 4], vec![2]);
        assert!((cauchy_mu(g, z, &mixed).unwrap() - g * (5.0 / 3.0)).norm() < 1e-14);
        assert!(cauchy_mu(g, z, &SystemConfig::new(9, [5, 4], vec![2])).is_err());
    }
}
