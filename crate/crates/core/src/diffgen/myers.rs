//! Linear-space shortest edit script search (forward/reverse middle snake).
//!
//! The search works on any `Eq` slice and reports the alignment as a list of
//! matched runs. Callers turn the gaps between runs into delete and insert
//! operations.

use std::ops::{Index, IndexMut, Range};

/// A run of `len` equal units starting at `old` in the first sequence and at
/// `new` in the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Match {
    pub old: usize,
    pub new: usize,
    pub len: usize,
}

/// Furthest-reaching x per diagonal, indexable by negative `k`.
struct V {
    offset: isize,
    v: Vec<usize>,
}

impl V {
    fn new(max_d: usize) -> Self {
        V {
            offset: max_d as isize + 1,
            v: vec![0; 2 * max_d + 3],
        }
    }
}

impl Index<isize> for V {
    type Output = usize;

    fn index(&self, k: isize) -> &usize {
        &self.v[(k + self.offset) as usize]
    }
}

impl IndexMut<isize> for V {
    fn index_mut(&mut self, k: isize) -> &mut usize {
        &mut self.v[(k + self.offset) as usize]
    }
}

fn common_prefix<T: Eq>(a: &[T], b: &[T]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn common_suffix<T: Eq>(a: &[T], b: &[T]) -> usize {
    a.iter()
        .rev()
        .zip(b.iter().rev())
        .take_while(|(x, y)| x == y)
        .count()
}

/// Returns the matched runs of a minimal alignment, ordered and merged.
pub(crate) fn matches<T: Eq>(old: &[T], new: &[T]) -> Vec<Match> {
    let max_d = (old.len() + new.len()).div_ceil(2) + 1;
    let mut vf = V::new(max_d);
    let mut vb = V::new(max_d);
    let mut out = Vec::new();
    conquer(
        old,
        0..old.len(),
        new,
        0..new.len(),
        &mut vf,
        &mut vb,
        &mut out,
    );

    let mut merged: Vec<Match> = Vec::with_capacity(out.len());
    for m in out.into_iter().filter(|m| m.len > 0) {
        match merged.last_mut() {
            Some(last) if last.old + last.len == m.old && last.new + last.len == m.new => {
                last.len += m.len;
            }
            _ => merged.push(m),
        }
    }
    merged
}

fn conquer<T: Eq>(
    old: &[T],
    mut old_r: Range<usize>,
    new: &[T],
    mut new_r: Range<usize>,
    vf: &mut V,
    vb: &mut V,
    out: &mut Vec<Match>,
) {
    let pre = common_prefix(&old[old_r.clone()], &new[new_r.clone()]);
    if pre > 0 {
        out.push(Match {
            old: old_r.start,
            new: new_r.start,
            len: pre,
        });
        old_r.start += pre;
        new_r.start += pre;
    }
    let suf = common_suffix(&old[old_r.clone()], &new[new_r.clone()]);
    old_r.end -= suf;
    new_r.end -= suf;

    if !old_r.is_empty() && !new_r.is_empty() {
        let (x, y) = middle_snake(old, old_r.clone(), new, new_r.clone(), vf, vb);
        conquer(old, old_r.start..x, new, new_r.start..y, vf, vb, out);
        conquer(old, x..old_r.end, new, y..new_r.end, vf, vb, out);
    }

    if suf > 0 {
        out.push(Match {
            old: old_r.end,
            new: new_r.end,
            len: suf,
        });
    }
}

/// Finds a split point on an optimal path. Both ranges are non-empty and
/// share no common prefix or suffix, which guarantees the split is strictly
/// inside the box and recursion makes progress.
fn middle_snake<T: Eq>(
    old: &[T],
    old_r: Range<usize>,
    new: &[T],
    new_r: Range<usize>,
    vf: &mut V,
    vb: &mut V,
) -> (usize, usize) {
    let n = old_r.len();
    let m = new_r.len();
    let delta = n as isize - m as isize;
    let odd = delta & 1 == 1;
    vf[1] = 0;
    vb[1] = 0;
    let d_max = ((n + m).div_ceil(2) + 1) as isize;

    for d in 0..d_max {
        // Forward search. Ties go to the deletion (x + 1) move.
        for k in (-d..=d).rev().step_by(2) {
            let mut x = if k == -d || (k != d && vf[k - 1] < vf[k + 1]) {
                vf[k + 1]
            } else {
                vf[k - 1] + 1
            };
            let y = (x as isize - k) as usize;
            let (x0, y0) = (x, y);
            if x < n && y < m {
                x += common_prefix(
                    &old[old_r.start + x..old_r.end],
                    &new[new_r.start + y..new_r.end],
                );
            }
            vf[k] = x;
            if odd && (k - delta).abs() < d && vf[k] + vb[-(k - delta)] >= n {
                return (old_r.start + x0, new_r.start + y0);
            }
        }

        // Reverse search, measured from the bottom-right corner.
        for k in (-d..=d).rev().step_by(2) {
            let mut x = if k == -d || (k != d && vb[k - 1] < vb[k + 1]) {
                vb[k + 1]
            } else {
                vb[k - 1] + 1
            };
            let mut y = (x as isize - k) as usize;
            if x < n && y < m {
                let adv = common_suffix(
                    &old[old_r.start..old_r.start + n - x],
                    &new[new_r.start..new_r.start + m - y],
                );
                x += adv;
                y += adv;
            }
            vb[k] = x;
            if !odd && (k - delta).abs() <= d && vb[k] + vf[-(k - delta)] >= n {
                return (old_r.start + n - x, new_r.start + m - y);
            }
        }
    }

    unreachable!("an optimal path always exists within d_max steps")
}
