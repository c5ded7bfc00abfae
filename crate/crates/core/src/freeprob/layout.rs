//! Index tables of the two linearizations.

use std::ops::Range;

use ndarray::Array2;

/// A rectangular index group kept by the block-diagonal expectation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexGroup {
    pub name: String,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

fn group(name: impl Into<String>, rows: Range<usize>, cols: Range<usize>) -> IndexGroup {
    IndexGroup {
        name: name.into(),
        rows,
        cols,
    }
}

fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut out = vec![0];
    for s in sizes {
        out.push(out.last().unwrap() + s);
    }
    out
}

/// Slot structure of the seven-slot linearization of
/// `B = H1 (H2† H2)⁻¹ H1†`.
///
/// Slot sizes are `[R1, R1+L, T, R2+L, R2, R2+L, R1+L]`. Slots 2, 4, 6 and 7
/// split into a lead block (`R1` or `R2`) followed by one block per panel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prop1Layout {
    pub r1: usize,
    pub r2: usize,
    pub t: usize,
    pub panels: Vec<usize>,
    offsets: Vec<usize>,
}

impl Prop1Layout {
    pub fn new(r1: usize, r2: usize, t: usize, panels: &[usize]) -> Self {
        let l: usize = panels.iter().sum();
        let sizes = [r1, r1 + l, t, r2 + l, r2, r2 + l, r1 + l];
        Prop1Layout {
            r1,
            r2,
            t,
            panels: panels.to_vec(),
            offsets: offsets(&sizes),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.panels.iter().sum()
    }

    /// Dimension `3R1 + 3R2 + 4L + T`.
    pub fn n(&self) -> usize {
        self.offsets[7]
    }

    /// Global index range of slot `a` (1-based).
    pub fn slot(&self, a: usize) -> Range<usize> {
        self.offsets[a - 1]..self.offsets[a]
    }

    fn lead(&self, a: usize) -> usize {
        match a {
            2 | 7 => self.r1,
            4 | 6 => self.r2,
            _ => self.slot(a).len(),
        }
    }

    /// Local range of panel `k` (0-based) inside slot `a`.
    pub fn panel_local(&self, a: usize, k: usize) -> Range<usize> {
        let start = self.lead(a) + self.panels[..k].iter().sum::<usize>();
        start..start + self.panels[k]
    }

    /// Global range of panel `k` inside slot `a`.
    pub fn panel_global(&self, a: usize, k: usize) -> Range<usize> {
        let o = self.offsets[a - 1];
        let r = self.panel_local(a, k);
        o + r.start..o + r.end
    }

    /// Global range of the lead block of slot `a`.
    pub fn lead_global(&self, a: usize) -> Range<usize> {
        let o = self.offsets[a - 1];
        o..o + self.lead(a)
    }

    /// Every index group retained by the expectation: the full diagonal
    /// slots 1, 3, 5; lead and panel blocks of slots 2, 4, 6, 7; and the
    /// lead and panel cross blocks between slots 2 and 6 in both directions.
    pub fn groups(&self) -> Vec<IndexGroup> {
        let mut out = Vec::new();
        for a in [1, 3, 5] {
            out.push(group(format!("slot{a}"), self.slot(a), self.slot(a)));
        }
        for a in [2, 4, 6, 7] {
            out.push(group(
                format!("slot{a}.lead"),
                self.lead_global(a),
                self.lead_global(a),
            ));
            for k in 0..self.panels.len() {
                let p = self.panel_global(a, k);
                out.push(group(format!("slot{a}.panel{}", k + 1), p.clone(), p));
            }
        }
        for (a, b, tag) in [(2, 6, "cross26"), (6, 2, "cross62")] {
            out.push(group(
                format!("{tag}.lead"),
                self.lead_global(a),
                self.lead_global(b),
            ));
            for k in 0..self.panels.len() {
                out.push(group(
                    format!("{tag}.panel{}", k + 1),
                    self.panel_global(a, k),
                    self.panel_global(b, k),
                ));
            }
        }
        out
    }

    /// Boolean mask of the retained entries.
    pub fn mask(&self) -> Array2<bool> {
        mask_from(self.n(), &self.groups())
    }
}

/// Slot structure of the four-slot linearization of `H1†H1 + H2†H2`.
///
/// Slot sizes are `[T, m, R1+R2, m]` with `m = R1 + L + R2 + L`, each
/// `m`-slot ordered as user 1 lead, user 1 panels, user 2 lead, user 2
/// panels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prop2Layout {
    pub r1: usize,
    pub r2: usize,
    pub t: usize,
    pub panels: Vec<usize>,
    offsets: Vec<usize>,
}

impl Prop2Layout {
    pub fn new(r1: usize, r2: usize, t: usize, panels: &[usize]) -> Self {
        let l: usize = panels.iter().sum();
        let m = r1 + r2 + 2 * l;
        Prop2Layout {
            r1,
            r2,
            t,
            panels: panels.to_vec(),
            offsets: offsets(&[t, m, r1 + r2, m]),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.panels.iter().sum()
    }

    pub fn m(&self) -> usize {
        self.r1 + self.r2 + 2 * self.total_elements()
    }

    pub fn n(&self) -> usize {
        self.offsets[4]
    }

    pub fn slot(&self, a: usize) -> Range<usize> {
        self.offsets[a - 1]..self.offsets[a]
    }

    /// Local range of user `i`'s lead block inside an `m`-slot.
    pub fn user_lead(&self, i: usize) -> Range<usize> {
        if i == 0 {
            0..self.r1
        } else {
            let o = self.r1 + self.total_elements();
            o..o + self.r2
        }
    }

    /// Local range of panel `k` of user `i` inside an `m`-slot.
    pub fn user_panel(&self, i: usize, k: usize) -> Range<usize> {
        let start = self.user_lead(i).end + self.panels[..k].iter().sum::<usize>();
        start..start + self.panels[k]
    }

    /// Local range of user `i` inside slot 3.
    pub fn user_rows(&self, i: usize) -> Range<usize> {
        if i == 0 {
            0..self.r1
        } else {
            self.r1..self.r1 + self.r2
        }
    }

    fn shift(&self, a: usize, r: Range<usize>) -> Range<usize> {
        let o = self.offsets[a - 1];
        o + r.start..o + r.end
    }

    /// Retained groups: slot 1; both user blocks of slot 3; panel blocks of
    /// slot 2; lead blocks and the four same-panel blocks of slot 4.
    pub fn groups(&self) -> Vec<IndexGroup> {
        let mut out = vec![group("slot1", self.slot(1), self.slot(1))];
        for i in 0..2 {
            let r = self.shift(3, self.user_rows(i));
            out.push(group(format!("slot3.user{}", i + 1), r.clone(), r));
        }
        for i in 0..2 {
            for k in 0..self.panels.len() {
                let p = self.shift(2, self.user_panel(i, k));
                out.push(group(
                    format!("slot2.user{}.panel{}", i + 1, k + 1),
                    p.clone(),
                    p,
                ));
            }
        }
        for i in 0..2 {
            let r = self.shift(4, self.user_lead(i));
            out.push(group(format!("slot4.user{}.lead", i + 1), r.clone(), r));
        }
        for k in 0..self.panels.len() {
            for i in 0..2 {
                for j in 0..2 {
                    out.push(group(
                        format!("slot4.panel{}.{}{}", k + 1, i + 1, j + 1),
                        self.shift(4, self.user_panel(i, k)),
                        self.shift(4, self.user_panel(j, k)),
                    ));
                }
            }
        }
        out
    }

    pub fn mask(&self) -> Array2<bool> {
        mask_from(self.n(), &self.groups())
    }
}

fn mask_from(n: usize, groups: &[IndexGroup]) -> Array2<bool> {
    let mut m = Array2::from_elem((n, n), false);
    for g in groups {
        for i in g.rows.clone() {
            for j in g.cols.clone() {
                m[[i, j]] = true;
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn find<'a>(groups: &'a [IndexGroup], name: &str) -> &'a IndexGroup {
        groups.iter().find(|g| g.name == name).unwrap()
    }

    // R1 = 2, R2 = 1, T = 3, panels [1, 2]: slot sizes [2, 5, 3, 4, 1, 4, 5].
    #[test]
    fn prop1_tiny_indices() {
        let lay = Prop1Layout::new(2, 1, 3, &[1, 2]);
        assert_eq!(lay.n(), 24);
        assert_eq!(lay.n(), 3 * 2 + 3 * 1 + 4 * 3 + 3);
        let expect = [0..2, 2..7, 7..10, 10..14, 14..15, 15..19, 19..24];
        for (a, r) in expect.iter().enumerate() {
            assert_eq!(lay.slot(a + 1), *r);
        }
        let g = lay.groups();
        assert_eq!(g.len(), 3 + 4 * 3 + 2 * 3);
        assert_eq!(find(&g, "slot2.lead").rows, 2..4);
        assert_eq!(find(&g, "slot2.panel1").rows, 4..5);
        assert_eq!(find(&g, "slot2.panel2").rows, 5..7);
        assert_eq!(find(&g, "slot4.lead").rows, 10..11);
        assert_eq!(find(&g, "slot4.panel2").rows, 12..14);
        assert_eq!(find(&g, "slot6.panel1").rows, 16..17);
        assert_eq!(find(&g, "slot7.panel2").cols, 22..24);
        let c = find(&g, "cross26.lead");
        assert_eq!((c.rows.clone(), c.cols.clone()), (2..4, 15..16));
        let c = find(&g, "cross26.panel2");
        assert_eq!((c.rows.clone(), c.cols.clone()), (5..7, 17..19));
        let c = find(&g, "cross62.panel1");
        assert_eq!((c.rows.clone(), c.cols.clone()), (16..17, 4..5));
        let kept = lay.mask().iter().filter(|&&b| b).count();
        // 4 + 9 + 1 full slots; leads 4+1+1+4; panels 4*(1+4); cross 2*(2+1+4).
        assert_eq!(kept, 14 + 10 + 20 + 14);
    }

    // R1 = 2, R2 = 1, T = 3, panels [1, 2]: m = 9, slot sizes [3, 9, 3, 9].
    #[test]
    fn prop2_tiny_indices() {
        let lay = Prop2Layout::new(2, 1, 3, &[1, 2]);
        assert_eq!(lay.n(), 24);
        assert_eq!(lay.slot(4), 15..24);
        assert_eq!(lay.user_lead(1), 5..6);
        assert_eq!(lay.user_panel(0, 1), 3..5);
        assert_eq!(lay.user_panel(1, 0), 6..7);
        assert_eq!(lay.user_panel(1, 1), 7..9);
        let g = lay.groups();
        let c = find(&g, "slot4.panel2.12");
        assert_eq!((c.rows.clone(), c.cols.clone()), (18..20, 22..24));
        assert_eq!(find(&g, "slot3.user2").rows, 14..15);
        let kept = lay.mask().iter().filter(|&&b| b).count();
        // slot1 9; slot3 4+1; slot2 panels 2*(1+4); slot4 leads 4+1, panels 4*(1+4).
        assert_eq!(kept, 9 + 5 + 10 + 5 + 20);
    }
}
