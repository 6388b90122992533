//! Query × key admissibility masks for sliding-window and feedback-memory layouts.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Geometry shared by every mask and cache: block size, cached past blocks,
/// feedback-memory length and the optional TransformerXL-style token window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub block_size: usize,
    pub memory_segments: usize,
    pub fam_len: usize,
    pub xl_window: Option<usize>,
}

impl BlockLayout {
    pub fn new(block_size: usize, memory_segments: usize, fam_len: usize) -> Result<Self> {
        let layout = Self { block_size, memory_segments, fam_len, xl_window: None };
        layout.validate()?;
        Ok(layout)
    }

    pub fn with_xl_window(mut self, w: usize) -> Result<Self> {
        self.xl_window = Some(w);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("block size must be at least 1".into()));
        }
        if self.fam_len > self.block_size {
            return Err(Error::Config(format!(
                "FAM length {} exceeds block size {}",
                self.fam_len, self.block_size
            )));
        }
        if let Some(w) = self.xl_window {
            if w == 0 || w > self.memory_segments * self.block_size {
                return Err(Error::Config(format!(
                    "XL window {w} must lie in 1..={}",
                    self.memory_segments * self.block_size
                )));
            }
        }
        Ok(())
    }

    pub fn has_fam(&self) -> bool {
        self.fam_len > 0
    }
}

/// What a mask row or column stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Query from an input token of the current block.
    Input,
    /// Query from the previous FAM (the "FAM copy").
    FamQuery,
    /// Key cached from a past block.
    Mem,
    /// Key computed from a previous FAM.
    FamKey,
    /// Key from the current block.
    Cur,
}

impl Role {
    pub fn label(self) -> char {
        match self {
            Role::Input => 'i',
            Role::FamQuery => 'q',
            Role::Mem => 'm',
            Role::FamKey => 'f',
            Role::Cur => 'c',
        }
    }
}

/// Boolean query × key admissibility matrix with role labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    admissible: Vec<bool>,
    row_roles: Vec<Role>,
    col_roles: Vec<Role>,
}

impl AttentionMask {
    pub fn from_fn(
        row_roles: Vec<Role>,
        col_roles: Vec<Role>,
        mut allow: impl FnMut(usize, usize) -> bool,
    ) -> Self {
        let (rows, cols) = (row_roles.len(), col_roles.len());
        let mut admissible = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                admissible.push(allow(r, c));
            }
        }
        Self { rows, cols, admissible, row_roles, col_roles }
    }

    /// All-true mask.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(vec![Role::Input; rows], vec![Role::Cur; cols], |_, _| true)
    }

    /// Lower-triangular causal mask over `n` tokens.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(vec![Role::Input; n], vec![Role::Cur; n], |r, c| c <= r)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.admissible[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.admissible[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_roles(&self) -> &[Role] {
        &self.row_roles
    }

    pub fn col_roles(&self) -> &[Role] {
        &self.col_roles
    }

    /// Indices of admissible keys for row `r`.
    pub fn admitted(&self, r: usize) -> Vec<usize> {
        (0..self.cols).filter(|&c| self.allowed(r, c)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for r in 0..self.rows {
            if !self.row(r).iter().any(|&a| a) {
                return Err(Error::EmptyMaskRow { row: r });
            }
        }
        Ok(())
    }

    pub fn count_admissible(&self) -> usize {
        self.admissible.iter().filter(|&&a| a).count()
    }

    /// Text grid: a header line, then one row per query with `#` for
    /// admissible and `.` for masked keys. Masks containing FAM rows or
    /// columns get a key-role line and a role letter in front of each row.
    pub fn render(&self, layout: &BlockLayout) -> String {
        let mut out = String::new();
        let w = layout.xl_window.map_or_else(|| "-".to_string(), |w| w.to_string());
        let _ = writeln!(
            out,
            "b={} m={} f={} w={}",
            layout.block_size, layout.memory_segments, layout.fam_len, w
        );
        let labelled = self.row_roles.contains(&Role::FamQuery)
            || self.col_roles.contains(&Role::FamKey);
        if labelled {
            out.push_str("  ");
            out.extend(self.col_roles.iter().map(|r| r.label()));
            out.push('\n');
        }
        for r in 0..self.rows {
            if labelled {
                out.push(self.row_roles[r].label());
                out.push(' ');
            }
            out.extend(self.row(r).iter().map(|&a| if a { '#' } else { '.' }));
            out.push('\n');
        }
        out
    }
}

/// Full-sequence sliding-window mask over `seq_len` tokens. Query `t` in block
/// `τ` sees every key in blocks `τ-m..τ-1` plus keys `≤ t` of block `τ`; with an
/// XL window `w`, keys must also satisfy `t - key < w`.
pub fn build_bswa_mask(seq_len: usize, layout: &BlockLayout) -> Result<AttentionMask> {
    layout.validate()?;
    if seq_len == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    let b = layout.block_size;
    let m = layout.memory_segments;
    let mask = AttentionMask::from_fn(vec![Role::Input; seq_len], vec![Role::Cur; seq_len], |t, j| {
        if j > t {
            return false;
        }
        let (qb, kb) = (t / b, j / b);
        if qb - kb > m {
            return false;
        }
        layout.xl_window.is_none_or(|w| t - j < w)
    });
    Ok(mask)
}

/// Sizes of the key segments and query groups of one blockwise attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    /// Keys cached from past blocks.
    pub mem_keys: usize,
    /// Keys from all retained FAM sets, oldest first.
    pub fam_keys: usize,
    /// Trailing part of `fam_keys` that belongs to the immediately previous FAM.
    pub prev_fam_keys: usize,
    /// Tokens in the current block.
    pub cur_len: usize,
    /// FAM queries appended after the input queries.
    pub fam_queries: usize,
}

impl BlockGeometry {
    pub fn num_queries(&self) -> usize {
        self.cur_len + self.fam_queries
    }

    pub fn num_keys(&self) -> usize {
        self.mem_keys + self.fam_keys + self.cur_len
    }
}

/// Mask for one block with keys ordered `[mem ‖ fam ‖ cur]` and queries
/// `[input ‖ fam]`.
///
/// Input queries see every memory key, every retained FAM key and the causal
/// prefix of the current block. FAM queries see only the previous FAM and the
/// whole current block. `key_distance`, when given, returns `Some(t - key_pos)`
/// for input row `t` and a memory/current column; keys at distance `>= w` are
/// masked for an XL window `w`.
pub fn block_mask(
    geom: &BlockGeometry,
    xl_window: Option<usize>,
    key_distance: impl Fn(usize, usize) -> i64,
) -> AttentionMask {
    let mut row_roles = vec![Role::Input; geom.cur_len];
    row_roles.extend(std::iter::repeat_n(Role::FamQuery, geom.fam_queries));
    let mut col_roles = vec![Role::Mem; geom.mem_keys];
    col_roles.extend(std::iter::repeat_n(Role::FamKey, geom.fam_keys));
    col_roles.extend(std::iter::repeat_n(Role::Cur, geom.cur_len));
    let fam_start = geom.mem_keys;
    let prev_fam_start = fam_start + geom.fam_keys - geom.prev_fam_keys;
    let cur_start = fam_start + geom.fam_keys;
    AttentionMask::from_fn(row_roles, col_roles, |r, c| {
        if r < geom.cur_len {
            let ok = if c < fam_start {
                true
            } else if c < cur_start {
                return true;
            } else {
                c - cur_start <= r
            };
            ok && xl_window.is_none_or(|w| key_distance(r, c) < w as i64)
        } else {
            (c >= prev_fam_start && c < cur_start) || c >= cur_start
        }
    })
}

/// Single-block FAM mask at full size: `m·b` memory keys, one previous FAM of
/// `f` keys, `b` current keys; `b` input queries followed by `f` FAM queries.
pub fn build_fam_block_mask(layout: &BlockLayout) -> Result<AttentionMask> {
    layout.validate()?;
    if layout.fam_len == 0 {
        return Err(Error::Config("FAM mask requires fam_len >= 1".into()));
    }
    let b = layout.block_size;
    let geom = BlockGeometry {
        mem_keys: layout.memory_segments * b,
        fam_keys: layout.fam_len,
        prev_fam_keys: layout.fam_len,
        cur_len: b,
        fam_queries: layout.fam_len,
    };
    let mem_keys = geom.mem_keys;
    let fam_keys = geom.fam_keys;
    // Query t sits at block offset t; memory key c sits `mem_keys - c` tokens before the block.
    Ok(block_mask(&geom, layout.xl_window, |t, c| {
        if c < mem_keys {
            (t + mem_keys - c) as i64
        } else {
            t as i64 - (c - mem_keys - fam_keys) as i64
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(b: usize, m: usize, f: usize) -> BlockLayout {
        BlockLayout::new(b, m, f).unwrap()
    }

    #[test]
    fn bswa_query_two_sees_previous_block_and_itself() {
        let mask = build_bswa_mask(4, &layout(2, 1, 0)).unwrap();
        assert_eq!(mask.admitted(2), vec![0, 1, 2]);
    }

    #[test]
    fn bswa_with_enough_memory_is_causal() {
        let mask = build_bswa_mask(9, &layout(2, 4, 0)).unwrap();
        assert_eq!(mask.admissible, AttentionMask::causal(9).admissible);
    }

    #[test]
    fn xl_window_masks_distant_keys() {
        let l = layout(2, 1, 0).with_xl_window(2).unwrap();
        let mask = build_bswa_mask(4, &l).unwrap();
        assert_eq!(mask.admitted(3), vec![2, 3]);
    }

    #[test]
    fn xl_window_larger_than_memory_rejected() {
        assert!(layout(2, 1, 0).with_xl_window(3).is_err());
        assert!(BlockLayout::new(2, 1, 3).is_err());
        assert!(BlockLayout::new(0, 1, 0).is_err());
    }

    #[test]
    fn fam_mask_without_memory() {
        let mask = build_fam_block_mask(&layout(2, 0, 1)).unwrap();
        // columns: fam, cur0, cur1
        assert_eq!(mask.admitted(0), vec![0, 1]);
        assert_eq!(mask.admitted(1), vec![0, 1, 2]);
        assert_eq!(mask.admitted(2), vec![0, 1, 2]);
        assert_eq!(mask.row_roles(), &[Role::Input, Role::Input, Role::FamQuery]);
    }

    #[test]
    fn smallest_fam_mask_with_memory() {
        let mask = build_fam_block_mask(&layout(1, 1, 1)).unwrap();
        assert_eq!((mask.rows(), mask.cols()), (2, 3));
        assert_eq!(mask.row(0), &[true, true, true]);
        assert_eq!(mask.row(1), &[false, true, true]);
    }

    #[test]
    fn fam_queries_attend_all_previous_fam_keys() {
        let mask = build_fam_block_mask(&layout(4, 1, 3)).unwrap();
        for r in 4..7 {
            for c in 4..7 {
                assert!(mask.allowed(r, c));
            }
            for c in 0..4 {
                assert!(!mask.allowed(r, c));
            }
        }
    }

    #[test]
    fn older_fam_keys_hidden_from_fam_queries() {
        let geom = BlockGeometry { mem_keys: 0, fam_keys: 4, prev_fam_keys: 2, cur_len: 2, fam_queries: 2 };
        let mask = block_mask(&geom, None, |_, _| 0);
        assert_eq!(mask.row(0), &[true, true, true, true, true, false]);
        assert_eq!(mask.row(2), &[false, false, true, true, true, true]);
    }

    #[test]
    fn render_plain_grid() {
        let l = layout(2, 1, 0);
        let text = build_bswa_mask(4, &l).unwrap().render(&l);
        assert_eq!(text, "b=2 m=1 f=0 w=-\n#...\n##..\n###.\n####\n");
    }

    #[test]
    fn render_labels_fam_grid() {
        let l = layout(2, 1, 1);
        let text = build_fam_block_mask(&l).unwrap().render(&l);
        assert_eq!(text, "b=2 m=1 f=1 w=-\n  mmfcc\ni ####.\ni #####\nq ..###\n");
    }
}
