//! Cyclic shifts of windows, shift-set enumeration, duplicate folding and
//! precomputed index-permutation tables.
//!
//! A shift `(x, y)` moves window content `x` pixels right and `y` pixels down
//! with wrap-around: `out(c, v, u) = w(c, (v − y) mod r, (u − x) mod r)`.
//! Shifts that agree modulo `r` are the same sample; the full set
//! `[−r+1, r−1]²` therefore holds `(2r−1)²` offsets but only `r²` distinct
//! samples.

use crate::error::{contract, Result};
use crate::tensor::logsumexp;
use crate::window::Window;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShiftOffset {
    pub x: i64,
    pub y: i64,
}

impl ShiftOffset {
    pub const ZERO: ShiftOffset = ShiftOffset { x: 0, y: 0 };

    pub fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }

    /// Canonical representative in `[0, r)²`.
    pub fn canonical(self, r: usize) -> ShiftOffset {
        let r = r as i64;
        ShiftOffset {
            x: self.x.rem_euclid(r),
            y: self.y.rem_euclid(r),
        }
    }

    /// Row-major index of the canonical representative among the `r²`
    /// deduplicated offsets.
    pub fn class_index(self, r: usize) -> usize {
        let c = self.canonical(r);
        c.y as usize * r + c.x as usize
    }
}

impl std::ops::Add for ShiftOffset {
    type Output = ShiftOffset;
    fn add(self, o: ShiftOffset) -> ShiftOffset {
        ShiftOffset::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Neg for ShiftOffset {
    type Output = ShiftOffset;
    fn neg(self) -> ShiftOffset {
        ShiftOffset::new(-self.x, -self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftMode {
    /// All `(2r−1)²` offsets in `[−r+1, r−1]²`.
    Full,
    /// The `r²` distinct samples, offsets in `[0, r−1]²`.
    Dedup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSet {
    r: usize,
    mode: ShiftMode,
    offsets: Vec<ShiftOffset>,
    /// For each offset, the index of its canonical class (row-major over `[0, r)²`).
    fold_map: Vec<usize>,
}

impl ShiftSet {
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn mode(&self) -> ShiftMode {
        self.mode
    }

    pub fn offsets(&self) -> &[ShiftOffset] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn fold_map(&self) -> &[usize] {
        &self.fold_map
    }

    pub fn num_classes(&self) -> usize {
        self.r * self.r
    }

    /// Number of offsets in this set that fold onto each class.
    pub fn class_multiplicity(&self) -> Vec<usize> {
        let mut m = vec![0; self.num_classes()];
        for &c in &self.fold_map {
            m[c] += 1;
        }
        m
    }

    /// Position of `off` in this set, if present.
    pub fn position(&self, off: ShiftOffset) -> Option<usize> {
        let r = self.r as i64;
        match self.mode {
            ShiftMode::Full => {
                if off.x.abs() < r && off.y.abs() < r {
                    let side = 2 * r - 1;
                    Some(((off.y + r - 1) * side + off.x + r - 1) as usize)
                } else {
                    None
                }
            }
            ShiftMode::Dedup => {
                if (0..r).contains(&off.x) && (0..r).contains(&off.y) {
                    Some((off.y * r + off.x) as usize)
                } else {
                    None
                }
            }
        }
    }
}

/// Enumerates offsets row-major over `y`, then `x`.
pub fn enumerate_shifts(r: usize, mode: ShiftMode) -> ShiftSet {
    assert!(r >= 1, "window size must be positive");
    let ri = r as i64;
    let range = match mode {
        ShiftMode::Full => -ri + 1..ri,
        ShiftMode::Dedup => 0..ri,
    };
    let mut offsets = Vec::new();
    for y in range.clone() {
        for x in range.clone() {
            offsets.push(ShiftOffset::new(x, y));
        }
    }
    let fold_map = offsets.iter().map(|o| o.class_index(r)).collect();
    ShiftSet {
        r,
        mode,
        offsets,
        fold_map,
    }
}

/// Materializes a cyclically shifted copy of `w`.
pub fn shift_window(w: &Window, off: ShiftOffset) -> Window {
    let r = w.size();
    let c = off.canonical(r);
    let (sx, sy) = (c.x as usize, c.y as usize);
    let mut data = Vec::with_capacity(w.flat().len());
    for ch in 0..w.channels() {
        let plane = w.plane(ch);
        for v in 0..r {
            let row = &plane[((v + r - sy) % r) * r..][..r];
            data.extend_from_slice(&row[r - sx..]);
            data.extend_from_slice(&row[..r - sx]);
        }
    }
    Window::new(w.channels(), r, data).expect("shift preserves shape")
}

/// Per-offset spatial permutations of `[0, r²)`: `forward[i][p]` is the input
/// index read by output position `p` under offset `i`; `inverse[i]` undoes it.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexTable {
    r: usize,
    offsets: Vec<ShiftOffset>,
    forward: Vec<Vec<usize>>,
    inverse: Vec<Vec<usize>>,
}

impl IndexTable {
    pub fn r(&self) -> usize {
        self.r
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn offsets(&self) -> &[ShiftOffset] {
        &self.offsets
    }

    pub fn forward(&self, i: usize) -> &[usize] {
        &self.forward[i]
    }

    pub fn inverse(&self, i: usize) -> &[usize] {
        &self.inverse[i]
    }

    /// Shifted copy of `w` by offset `i`, realized through the table.
    pub fn apply(&self, i: usize, w: &Window) -> Window {
        let mut out = vec![0.0; w.flat().len()];
        gather_planes(w.flat(), &self.forward[i], &mut out);
        Window::new(w.channels(), w.size(), out).expect("gather preserves shape")
    }
}

pub fn build_index_tables(r: usize, shifts: &ShiftSet) -> Result<IndexTable> {
    if shifts.r != r {
        return contract(format!(
            "shift set is for r={}, tables requested for r={r}",
            shifts.r
        ));
    }
    let n = r * r;
    let mut forward = Vec::with_capacity(shifts.len());
    let mut inverse = Vec::with_capacity(shifts.len());
    for off in &shifts.offsets {
        let c = off.canonical(r);
        let (sx, sy) = (c.x as usize, c.y as usize);
        let mut fwd = Vec::with_capacity(n);
        for v in 0..r {
            for u in 0..r {
                fwd.push(((v + r - sy) % r) * r + (u + r - sx) % r);
            }
        }
        let mut inv = vec![0; n];
        for (p, &src) in fwd.iter().enumerate() {
            inv[src] = p;
        }
        forward.push(fwd);
        inverse.push(inv);
    }
    Ok(IndexTable {
        r,
        offsets: shifts.offsets.clone(),
        forward,
        inverse,
    })
}

/// Applies one spatial permutation to every channel plane of `src`.
#[inline]
pub(crate) fn gather_planes(src: &[f64], table: &[usize], out: &mut [f64]) {
    let n = table.len();
    for (s, o) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        for (dst, &i) in o.iter_mut().zip(table) {
            *dst = s[i];
        }
    }
}

/// Folds logits given over a full shift set onto the `r²` distinct samples:
/// each class receives the log-sum-exp of its members. A softmax over the
/// folded logits therefore assigns every class exactly the summed mass the
/// full softmax gives its duplicates.
pub fn fold_duplicate_logits(full: &ShiftSet, logits: &[f64]) -> Result<Vec<f64>> {
    if full.mode != ShiftMode::Full {
        return contract("duplicate folding needs a full shift set");
    }
    if logits.len() != full.len() {
        return contract(format!(
            "expected {} logits for r={}, got {}",
            full.len(),
            full.r,
            logits.len()
        ));
    }
    let mut members: Vec<Vec<f64>> = vec![Vec::with_capacity(4); full.num_classes()];
    for (&class, &l) in full.fold_map.iter().zip(logits) {
        members[class].push(l);
    }
    Ok(members.iter().map(|m| logsumexp(m)).collect())
}
