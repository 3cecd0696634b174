//! Blocked compressed-sparse-row storage.
//!
//! Matrix elements are grouped into dense blocks by block rows and block
//! columns. Only non-zero blocks are stored; each block keeps its payload in
//! row-major order together with its Frobenius norm, which drives both
//! filtering phases of the multiplication:
//!
//! - on the fly, a block pair `(a, b)` is multiplied only if
//!   `norm(a) * norm(b) > threshold`;
//! - after a multiplication, blocks with `norm <= threshold` are dropped.
//!
//! The module also provides the local multiply kernel used by every rank,
//! the serial reference product, and the two serialized forms of a matrix:
//! the text `BCSR1` file format and the binary wire form used by the
//! transport.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while building or combining block-sparse matrices.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("block sizes must be positive, found a zero in the {0} sizes")]
    ZeroBlockSize(&'static str),
    #[error("block ({row}, {col}) is outside the {rows}x{cols} block grid")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("block ({row}, {col}) has {found} values, expected {expected}")]
    ShapeMismatch {
        row: usize,
        col: usize,
        found: usize,
        expected: usize,
    },
    #[error("duplicate block ({row}, {col})")]
    DuplicateBlock { row: usize, col: usize },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("filter threshold must be finite and non-negative, got {0}")]
    InvalidThreshold(f64),
    #[error("malformed BCSR1 input at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("malformed wire panel: {0}")]
    Wire(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Block-size structure of a matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    row_sizes: Vec<usize>,
    col_sizes: Vec<usize>,
    row_offsets: Vec<usize>,
    col_offsets: Vec<usize>,
}

fn prefix_sums(sizes: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(sizes.len() + 1);
    let mut acc = 0;
    out.push(0);
    for &s in sizes {
        acc += s;
        out.push(acc);
    }
    out
}

impl BlockLayout {
    pub fn new(row_sizes: Vec<usize>, col_sizes: Vec<usize>) -> Result<Self, MatrixError> {
        if row_sizes.contains(&0) {
            return Err(MatrixError::ZeroBlockSize("row"));
        }
        if col_sizes.contains(&0) {
            return Err(MatrixError::ZeroBlockSize("column"));
        }
        let row_offsets = prefix_sums(&row_sizes);
        let col_offsets = prefix_sums(&col_sizes);
        Ok(Self {
            row_sizes,
            col_sizes,
            row_offsets,
            col_offsets,
        })
    }

    /// Square layout with `n_blocks` blocks of `block_size` in both dimensions.
    pub fn uniform(n_blocks: usize, block_size: usize) -> Result<Self, MatrixError> {
        Self::new(vec![block_size; n_blocks], vec![block_size; n_blocks])
    }

    /// Square layout that reuses the same size list for rows and columns.
    pub fn symmetric(sizes: Vec<usize>) -> Result<Self, MatrixError> {
        Self::new(sizes.clone(), sizes)
    }

    pub fn n_block_rows(&self) -> usize {
        self.row_sizes.len()
    }

    pub fn n_block_cols(&self) -> usize {
        self.col_sizes.len()
    }

    pub fn total_rows(&self) -> usize {
        self.row_offsets[self.row_sizes.len()]
    }

    pub fn total_cols(&self) -> usize {
        self.col_offsets[self.col_sizes.len()]
    }

    pub fn row_block_sizes(&self) -> &[usize] {
        &self.row_sizes
    }

    pub fn col_block_sizes(&self) -> &[usize] {
        &self.col_sizes
    }

    pub fn row_size(&self, r: usize) -> usize {
        self.row_sizes[r]
    }

    pub fn col_size(&self, c: usize) -> usize {
        self.col_sizes[c]
    }

    /// First element row of block row `r`.
    pub fn row_offset(&self, r: usize) -> usize {
        self.row_offsets[r]
    }

    /// First element column of block column `c`.
    pub fn col_offset(&self, c: usize) -> usize {
        self.col_offsets[c]
    }

    pub fn block_len(&self, r: usize, c: usize) -> usize {
        self.row_sizes[r] * self.col_sizes[c]
    }

    pub fn is_square(&self) -> bool {
        self.row_sizes == self.col_sizes
    }

    /// Layout of `self * rhs`, if the inner block sizes agree.
    pub fn product(&self, rhs: &BlockLayout) -> Result<BlockLayout, MatrixError> {
        if self.col_sizes != rhs.row_sizes {
            return Err(MatrixError::LayoutMismatch(format!(
                "left operand has {} block columns, right operand has {} block rows with different sizes",
                self.col_sizes.len(),
                rhs.row_sizes.len()
            )));
        }
        BlockLayout::new(self.row_sizes.clone(), rhs.col_sizes.clone())
    }
}

/// Filtering parameters shared by the on-the-fly and post-multiplication phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    threshold: f64,
    on_the_fly: bool,
    post_filter: bool,
}

impl FilterConfig {
    pub fn new(threshold: f64, on_the_fly: bool, post_filter: bool) -> Result<Self, MatrixError> {
        if !threshold.is_finite() || threshold < 0.0 {
            return Err(MatrixError::InvalidThreshold(threshold));
        }
        Ok(Self {
            threshold,
            on_the_fly,
            post_filter,
        })
    }

    /// Both filtering phases enabled with the same threshold.
    pub fn with_threshold(threshold: f64) -> Result<Self, MatrixError> {
        Self::new(threshold, true, true)
    }

    /// No filtering at all.
    pub fn disabled() -> Self {
        Self {
            threshold: 0.0,
            on_the_fly: false,
            post_filter: false,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn on_the_fly(&self) -> bool {
        self.on_the_fly
    }

    pub fn post_filter(&self) -> bool {
        self.post_filter
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

/// Borrowed view of one stored block.
#[derive(Debug, Clone, Copy)]
pub struct BlockRef<'a> {
    pub row: usize,
    pub col: usize,
    pub values: &'a [f64],
    pub norm: f64,
}

/// Blocked CSR matrix with per-block Frobenius norms.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCsrMatrix {
    layout: Arc<BlockLayout>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    offsets: Vec<usize>,
    values: Vec<f64>,
    norms: Vec<f64>,
}

pub(crate) fn frobenius(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Appends blocks row by row in canonical order.
struct Assembler {
    layout: Arc<BlockLayout>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    offsets: Vec<usize>,
    values: Vec<f64>,
    norms: Vec<f64>,
}

impl Assembler {
    fn new(layout: Arc<BlockLayout>) -> Self {
        let mut row_ptr = Vec::with_capacity(layout.n_block_rows() + 1);
        row_ptr.push(0);
        Self {
            layout,
            row_ptr,
            col_idx: Vec::new(),
            offsets: vec![0],
            values: Vec::new(),
            norms: Vec::new(),
        }
    }

    fn push(&mut self, col: usize, data: &[f64], norm: f64) {
        self.col_idx.push(col);
        self.values.extend_from_slice(data);
        self.offsets.push(self.values.len());
        self.norms.push(norm);
    }

    fn push_computed(&mut self, col: usize, data: &[f64]) {
        let norm = frobenius(data);
        self.push(col, data, norm);
    }

    fn end_row(&mut self) {
        self.row_ptr.push(self.col_idx.len());
    }

    fn finish(self) -> BlockCsrMatrix {
        debug_assert_eq!(self.row_ptr.len(), self.layout.n_block_rows() + 1);
        BlockCsrMatrix {
            layout: self.layout,
            row_ptr: self.row_ptr,
            col_idx: self.col_idx,
            offsets: self.offsets,
            values: self.values,
            norms: self.norms,
        }
    }
}

/// Per-call counters of the local multiply kernel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProductCounts {
    pub multiplied: u64,
    pub skipped: u64,
}

impl BlockCsrMatrix {
    /// Matrix with no stored blocks.
    pub fn empty(layout: Arc<BlockLayout>) -> Self {
        let n = layout.n_block_rows();
        Self {
            layout,
            row_ptr: vec![0; n + 1],
            col_idx: Vec::new(),
            offsets: vec![0],
            values: Vec::new(),
            norms: Vec::new(),
        }
    }

    /// Builds a matrix from `(block_row, block_col, payload)` triples in any order.
    pub fn build(
        layout: Arc<BlockLayout>,
        entries: Vec<(usize, usize, Vec<f64>)>,
    ) -> Result<Self, MatrixError> {
        let (rows, cols) = (layout.n_block_rows(), layout.n_block_cols());
        for (r, c, data) in &entries {
            if *r >= rows || *c >= cols {
                return Err(MatrixError::IndexOutOfRange {
                    row: *r,
                    col: *c,
                    rows,
                    cols,
                });
            }
            let expected = layout.block_len(*r, *c);
            if data.len() != expected {
                return Err(MatrixError::ShapeMismatch {
                    row: *r,
                    col: *c,
                    found: data.len(),
                    expected,
                });
            }
        }
        let mut entries = entries;
        entries.sort_by_key(|(r, c, _)| (*r, *c));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err(MatrixError::DuplicateBlock {
                    row: pair[0].0,
                    col: pair[0].1,
                });
            }
        }
        let mut asm = Assembler::new(layout);
        let mut it = entries.into_iter().peekable();
        for r in 0..rows {
            while let Some((_, c, data)) = it.next_if(|(er, _, _)| *er == r) {
                asm.push_computed(c, &data);
            }
            asm.end_row();
        }
        Ok(asm.finish())
    }

    /// Expands a row-major dense matrix, storing every block that is not
    /// entirely zero.
    pub fn from_dense(layout: Arc<BlockLayout>, dense: &[f64]) -> Result<Self, MatrixError> {
        let (nr, nc) = (layout.total_rows(), layout.total_cols());
        if dense.len() != nr * nc {
            return Err(MatrixError::LayoutMismatch(format!(
                "dense input has {} values, layout needs {}x{}",
                dense.len(),
                nr,
                nc
            )));
        }
        let mut asm = Assembler::new(layout.clone());
        let mut buf = Vec::new();
        for r in 0..layout.n_block_rows() {
            for c in 0..layout.n_block_cols() {
                buf.clear();
                let (r0, c0) = (layout.row_offset(r), layout.col_offset(c));
                for i in 0..layout.row_size(r) {
                    let start = (r0 + i) * nc + c0;
                    buf.extend_from_slice(&dense[start..start + layout.col_size(c)]);
                }
                if buf.iter().any(|&v| v != 0.0) {
                    asm.push_computed(c, &buf);
                }
            }
            asm.end_row();
        }
        Ok(asm.finish())
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn n_blocks(&self) -> usize {
        self.col_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.col_idx.is_empty()
    }

    /// Number of stored scalar values.
    pub fn n_values(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn block_norms(&self) -> &[f64] {
        &self.norms
    }

    fn block_at(&self, row: usize, b: usize) -> BlockRef<'_> {
        BlockRef {
            row,
            col: self.col_idx[b],
            values: &self.values[self.offsets[b]..self.offsets[b + 1]],
            norm: self.norms[b],
        }
    }

    /// Stored blocks of block row `r`, ascending by column.
    pub fn row(&self, r: usize) -> impl Iterator<Item = BlockRef<'_>> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |b| self.block_at(r, b))
    }

    /// All stored blocks in canonical (row, column) order.
    pub fn blocks(&self) -> impl Iterator<Item = BlockRef<'_>> + '_ {
        (0..self.layout.n_block_rows()).flat_map(move |r| self.row(r))
    }

    pub fn get(&self, r: usize, c: usize) -> Option<BlockRef<'_>> {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()]
            .binary_search(&c)
            .ok()
            .map(|pos| self.block_at(r, range.start + pos))
    }

    /// Fraction of stored elements relative to a fully dense matrix.
    pub fn occupancy(&self) -> f64 {
        let total = self.layout.total_rows() * self.layout.total_cols();
        if total == 0 {
            return 0.0;
        }
        self.values.len() as f64 / total as f64
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius(&self.values)
    }

    /// Row-major dense expansion.
    pub fn to_dense(&self) -> Vec<f64> {
        let nc = self.layout.total_cols();
        let mut dense = vec![0.0; self.layout.total_rows() * nc];
        for blk in self.blocks() {
            let (r0, c0) = (
                self.layout.row_offset(blk.row),
                self.layout.col_offset(blk.col),
            );
            let cs = self.layout.col_size(blk.col);
            for (i, chunk) in blk.values.chunks_exact(cs).enumerate() {
                let start = (r0 + i) * nc + c0;
                dense[start..start + cs].copy_from_slice(chunk);
            }
        }
        dense
    }

    /// Keeps only the blocks for which `keep(row, col, norm)` holds.
    pub fn select<F>(&self, mut keep: F) -> Self
    where
        F: FnMut(usize, usize, f64) -> bool,
    {
        let mut asm = Assembler::new(self.layout.clone());
        for r in 0..self.layout.n_block_rows() {
            for blk in self.row(r) {
                if keep(r, blk.col, blk.norm) {
                    asm.push(blk.col, blk.values, blk.norm);
                }
            }
            asm.end_row();
        }
        asm.finish()
    }

    /// Multiplies every value by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= alpha;
        }
        for (b, n) in out.norms.iter_mut().enumerate() {
            *n = frobenius(&out.values[out.offsets[b]..out.offsets[b + 1]]);
        }
        out
    }

    /// Adds `alpha` to the diagonal of every diagonal block `(r, r)` for which
    /// `owns(r)` holds, creating the block if it is absent.
    pub fn add_scaled_identity<F>(&self, alpha: f64, owns: F) -> Result<Self, MatrixError>
    where
        F: Fn(usize) -> bool,
    {
        let layout = &self.layout;
        let n = layout.n_block_rows().min(layout.n_block_cols());
        let mut asm = Assembler::new(layout.clone());
        let mut buf = Vec::new();
        for r in 0..layout.n_block_rows() {
            let inject = r < n && owns(r);
            if inject && layout.row_size(r) != layout.col_size(r) {
                return Err(MatrixError::LayoutMismatch(format!(
                    "diagonal block {r} is not square"
                )));
            }
            let size = layout.row_size(r);
            let mut placed = !inject;
            for blk in self.row(r) {
                if !placed && blk.col >= r {
                    buf.clear();
                    if blk.col == r {
                        buf.extend_from_slice(blk.values);
                    } else {
                        buf.resize(size * size, 0.0);
                    }
                    for d in 0..size {
                        buf[d * size + d] += alpha;
                    }
                    asm.push_computed(r, &buf);
                    placed = true;
                    if blk.col == r {
                        continue;
                    }
                }
                asm.push(blk.col, blk.values, blk.norm);
            }
            if !placed {
                buf.clear();
                buf.resize(size * size, 0.0);
                for d in 0..size {
                    buf[d * size + d] += alpha;
                }
                asm.push_computed(r, &buf);
            }
            asm.end_row();
        }
        Ok(asm.finish())
    }

    /// Frobenius norm of `self - other` over the union of both patterns.
    pub fn diff_frobenius(&self, other: &Self) -> Result<f64, MatrixError> {
        ensure_same_layout(&self.layout, &other.layout)?;
        let mut sum = 0.0;
        for r in 0..self.layout.n_block_rows() {
            let mut a = self.row(r).peekable();
            let mut b = other.row(r).peekable();
            loop {
                match (a.peek(), b.peek()) {
                    (None, None) => break,
                    (Some(x), Some(y)) if x.col == y.col => {
                        sum += x
                            .values
                            .iter()
                            .zip(y.values)
                            .map(|(p, q)| (p - q) * (p - q))
                            .sum::<f64>();
                        a.next();
                        b.next();
                    }
                    (Some(x), y) if y.is_none_or(|y| x.col < y.col) => {
                        sum += x.norm * x.norm;
                        a.next();
                    }
                    (_, Some(y)) => {
                        sum += y.norm * y.norm;
                        b.next();
                    }
                    (Some(_), None) => unreachable!(),
                }
            }
        }
        Ok(sum.sqrt())
    }

    /// Bytes of metadata in the wire form: block count, then per block the
    /// (row, col) pair and the norm.
    pub fn wire_meta_bytes(&self) -> usize {
        8 + 16 * self.n_blocks()
    }

    /// Bytes of `f64` payload in the wire form.
    pub fn wire_payload_bytes(&self) -> usize {
        8 * self.values.len()
    }

    /// Serializes the stored blocks (little endian).
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_meta_bytes() + self.wire_payload_bytes());
        out.extend_from_slice(&(self.n_blocks() as u64).to_le_bytes());
        for blk in self.blocks() {
            out.extend_from_slice(&(blk.row as u32).to_le_bytes());
            out.extend_from_slice(&(blk.col as u32).to_le_bytes());
            out.extend_from_slice(&blk.norm.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Inverse of [`BlockCsrMatrix::to_wire`] against a known layout.
    pub fn from_wire(layout: Arc<BlockLayout>, bytes: &[u8]) -> Result<Self, MatrixError> {
        let err = |m: &str| MatrixError::Wire(m.to_string());
        if bytes.len() < 8 {
            return Err(err("truncated header"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let meta_end = n
            .checked_mul(16)
            .and_then(|m| m.checked_add(8))
            .ok_or_else(|| err("block count overflow"))?;
        if bytes.len() < meta_end {
            return Err(err("truncated block index"));
        }
        let mut coords = Vec::with_capacity(n);
        let mut expected_values = 0usize;
        let (rows, cols) = (layout.n_block_rows(), layout.n_block_cols());
        for b in 0..n {
            let rec = &bytes[8 + 16 * b..8 + 16 * (b + 1)];
            let r = u32::from_le_bytes(rec[0..4].try_into().unwrap()) as usize;
            let c = u32::from_le_bytes(rec[4..8].try_into().unwrap()) as usize;
            let norm = f64::from_le_bytes(rec[8..16].try_into().unwrap());
            if r >= rows || c >= cols {
                return Err(MatrixError::IndexOutOfRange {
                    row: r,
                    col: c,
                    rows,
                    cols,
                });
            }
            if let Some(&(pr, pc, _)) = coords.last() {
                if (pr, pc) >= (r, c) {
                    return Err(err("blocks not in canonical order"));
                }
            }
            expected_values += layout.block_len(r, c);
            coords.push((r, c, norm));
        }
        if bytes.len() != meta_end + 8 * expected_values {
            return Err(err("payload length does not match block shapes"));
        }
        let mut asm = Assembler::new(layout.clone());
        let mut vals = bytes[meta_end..]
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()));
        let mut buf = Vec::new();
        let mut next = coords.into_iter().peekable();
        for r in 0..rows {
            while let Some((_, c, norm)) = next.next_if(|(br, _, _)| *br == r) {
                buf.clear();
                buf.extend(vals.by_ref().take(layout.block_len(r, c)));
                asm.push(c, &buf, norm);
            }
            asm.end_row();
        }
        Ok(asm.finish())
    }

    /// Writes the `BCSR1` text form.
    pub fn write_bcsr1<W: Write>(&self, mut w: W) -> Result<(), MatrixError> {
        let io = |e: std::io::Error| MatrixError::Io(e.to_string());
        let join = |s: &[usize]| {
            s.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(
            w,
            "BCSR1 {} {}",
            self.layout.n_block_rows(),
            self.layout.n_block_cols()
        )
        .map_err(io)?;
        writeln!(w, "{}", join(self.layout.row_block_sizes())).map_err(io)?;
        writeln!(w, "{}", join(self.layout.col_block_sizes())).map_err(io)?;
        for blk in self.blocks() {
            write!(w, "{} {}", blk.row, blk.col).map_err(io)?;
            for v in blk.values {
                write!(w, " {v:e}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        Ok(())
    }

    /// Reads the `BCSR1` text form.
    pub fn read_bcsr1<R: BufRead>(r: R) -> Result<Self, MatrixError> {
        let mut lines = r.lines().enumerate();
        let mut next_line = |what: &str| -> Result<(usize, String), MatrixError> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(MatrixError::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                }),
                None => Err(MatrixError::Parse {
                    line: 0,
                    msg: format!("unexpected end of input, expected {what}"),
                }),
            }
        };
        let perr = |line: usize, msg: String| MatrixError::Parse { line, msg };
        let (ln, header) = next_line("header")?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() != 3 || toks[0] != "BCSR1" {
            return Err(perr(ln, format!("bad header {header:?}")));
        }
        let parse_usize = |ln: usize, t: &str| {
            t.parse::<usize>()
                .map_err(|e| perr(ln, format!("{t:?}: {e}")))
        };
        let nr = parse_usize(ln, toks[1])?;
        let nc = parse_usize(ln, toks[2])?;
        let mut sizes = |n: usize, what: &str| -> Result<Vec<usize>, MatrixError> {
            let (ln, l) = next_line(what)?;
            let v = l
                .split_whitespace()
                .map(|t| parse_usize(ln, t))
                .collect::<Result<Vec<_>, _>>()?;
            if v.len() != n {
                return Err(perr(ln, format!("expected {n} {what}, found {}", v.len())));
            }
            Ok(v)
        };
        let rs = sizes(nr, "row block sizes")?;
        let cs = sizes(nc, "column block sizes")?;
        let layout = Arc::new(BlockLayout::new(rs, cs)?);
        let mut entries = Vec::new();
        for (i, line) in lines {
            let ln = i + 1;
            let line = line.map_err(|e| perr(ln, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let r = parse_usize(ln, toks.next().unwrap())?;
            let c = parse_usize(
                ln,
                toks.next()
                    .ok_or_else(|| perr(ln, "missing block column".into()))?,
            )?;
            let vals = toks
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| perr(ln, format!("{t:?}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            entries.push((r, c, vals));
        }
        Self::build(layout, entries)
    }
}

pub(crate) fn ensure_same_layout(a: &BlockLayout, b: &BlockLayout) -> Result<(), MatrixError> {
    if a != b {
        return Err(MatrixError::LayoutMismatch(format!(
            "{}x{} blocks vs {}x{} blocks",
            a.n_block_rows(),
            a.n_block_cols(),
            b.n_block_rows(),
            b.n_block_cols()
        )));
    }
    Ok(())
}

/// Occupancy of `m`: stored elements over `total_rows * total_cols`.
pub fn occupancy(m: &BlockCsrMatrix) -> f64 {
    m.occupancy()
}

/// On-the-fly filter test for a block pair.
pub fn block_pair_admissible(norm_a: f64, norm_b: f64, cfg: &FilterConfig) -> bool {
    !cfg.on_the_fly || norm_a * norm_b > cfg.threshold
}

/// `c += a * b` on a row-major block: `a` is `m x k`, `b` is `k x n`.
#[inline]
fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Mutable block sparse sum that stays unassembled across repeated
/// `+= a * b` updates, so each update only touches the rows it reaches.
#[derive(Debug, Clone)]
pub struct BlockAccumulator {
    layout: Arc<BlockLayout>,
    rows: Vec<Vec<(usize, usize)>>,
    values: Vec<f64>,
    slot_of: Vec<usize>,
}

impl BlockAccumulator {
    pub fn new(layout: Arc<BlockLayout>) -> Self {
        let n = layout.n_block_rows();
        let m = layout.n_block_cols();
        Self {
            layout,
            rows: vec![Vec::new(); n],
            values: Vec::new(),
            slot_of: vec![usize::MAX; m],
        }
    }

    /// Starts from the blocks of `c`.
    pub fn from_matrix(c: &BlockCsrMatrix) -> Self {
        let mut acc = Self::new(c.layout().clone());
        acc.values = c.values.clone();
        for r in 0..c.layout.n_block_rows() {
            acc.rows[r] = (c.row_ptr[r]..c.row_ptr[r + 1])
                .map(|k| (c.col_idx[k], c.offsets[k]))
                .collect();
        }
        acc
    }

    pub fn layout(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    /// Adds `a * b` over admissible block pairs. Within a row, contributions
    /// arrive in ascending order of the contraction block index.
    pub fn multiply_accumulate(
        &mut self,
        a: &BlockCsrMatrix,
        b: &BlockCsrMatrix,
        cfg: &FilterConfig,
    ) -> Result<ProductCounts, MatrixError> {
        let (la, lb, lc) = (a.layout(), b.layout(), &self.layout);
        if la.col_block_sizes() != lb.row_block_sizes() {
            return Err(MatrixError::LayoutMismatch(
                "inner block sizes of A and B differ".into(),
            ));
        }
        if lc.row_block_sizes() != la.row_block_sizes()
            || lc.col_block_sizes() != lb.col_block_sizes()
        {
            return Err(MatrixError::LayoutMismatch(
                "C layout does not match the product of A and B".into(),
            ));
        }
        let mut counts = ProductCounts::default();
        for r in 0..lc.n_block_rows() {
            let arow = a.row_ptr[r]..a.row_ptr[r + 1];
            if arow.is_empty() {
                continue;
            }
            let row = &mut self.rows[r];
            for &(col, off) in row.iter() {
                self.slot_of[col] = off;
            }
            let rs = lc.row_size(r);
            for ablk in a.row(r) {
                let ks = la.col_size(ablk.col);
                for bblk in b.row(ablk.col) {
                    if !block_pair_admissible(ablk.norm, bblk.norm, cfg) {
                        counts.skipped += 1;
                        continue;
                    }
                    counts.multiplied += 1;
                    let cs = lc.col_size(bblk.col);
                    let mut off = self.slot_of[bblk.col];
                    if off == usize::MAX {
                        off = self.values.len();
                        self.values.resize(off + rs * cs, 0.0);
                        self.slot_of[bblk.col] = off;
                        row.push((bblk.col, off));
                    }
                    gemm_acc(
                        &mut self.values[off..off + rs * cs],
                        ablk.values,
                        bblk.values,
                        rs,
                        ks,
                        cs,
                    );
                }
            }
            for &(col, _) in row.iter() {
                self.slot_of[col] = usize::MAX;
            }
        }
        Ok(counts)
    }

    /// Assembles the canonical matrix, recomputing block norms.
    pub fn finish(mut self) -> BlockCsrMatrix {
        let mut asm = Assembler::new(self.layout.clone());
        for r in 0..self.layout.n_block_rows() {
            let rs = self.layout.row_size(r);
            let row = &mut self.rows[r];
            row.sort_unstable_by_key(|&(col, _)| col);
            for &(col, off) in row.iter() {
                let len = rs * self.layout.col_size(col);
                asm.push_computed(col, &self.values[off..off + len]);
            }
            asm.end_row();
        }
        asm.finish()
    }
}

/// Returns `c + a * b` restricted to admissible block pairs, with counters.
///
/// Contributions to each result block are summed in ascending order of the
/// contraction block index, starting from the existing `c` block.
pub fn multiply_accumulate_counted(
    c: &BlockCsrMatrix,
    a: &BlockCsrMatrix,
    b: &BlockCsrMatrix,
    cfg: &FilterConfig,
) -> Result<(BlockCsrMatrix, ProductCounts), MatrixError> {
    let mut acc = BlockAccumulator::from_matrix(c);
    let counts = acc.multiply_accumulate(a, b, cfg)?;
    Ok((acc.finish(), counts))
}

/// Returns `c + a * b` restricted to admissible block pairs.
pub fn local_multiply_accumulate(
    c: &BlockCsrMatrix,
    a: &BlockCsrMatrix,
    b: &BlockCsrMatrix,
    cfg: &FilterConfig,
) -> Result<BlockCsrMatrix, MatrixError> {
    multiply_accumulate_counted(c, a, b, cfg).map(|(m, _)| m)
}

/// Drops blocks with `norm <= threshold` when post-filtering is enabled.
pub fn post_filter(m: &BlockCsrMatrix, cfg: &FilterConfig) -> BlockCsrMatrix {
    if !cfg.post_filter {
        return m.clone();
    }
    let t = cfg.threshold;
    m.select(|_, _, norm| norm > t)
}

/// Single-process reference product `a * b` with the same filtering rules
/// as the distributed engines.
pub fn serial_spgemm_oracle(
    a: &BlockCsrMatrix,
    b: &BlockCsrMatrix,
    cfg: &FilterConfig,
) -> Result<BlockCsrMatrix, MatrixError> {
    let layout = Arc::new(a.layout().product(b.layout())?);
    let c = BlockCsrMatrix::empty(layout);
    let prod = local_multiply_accumulate(&c, a, b, cfg)?;
    Ok(post_filter(&prod, cfg))
}

/// Block-wise sum `c + partial` over the union of both patterns.
pub fn add_accumulate(
    c: &BlockCsrMatrix,
    partial: &BlockCsrMatrix,
) -> Result<BlockCsrMatrix, MatrixError> {
    ensure_same_layout(c.layout(), partial.layout())?;
    if partial.is_empty() {
        return Ok(c.clone());
    }
    let mut asm = Assembler::new(c.layout().clone());
    let mut buf = Vec::new();
    for r in 0..c.layout().n_block_rows() {
        let mut x = c.row(r).peekable();
        let mut y = partial.row(r).peekable();
        loop {
            match (x.peek().copied(), y.peek().copied()) {
                (None, None) => break,
                (Some(p), Some(q)) if p.col == q.col => {
                    buf.clear();
                    buf.extend(p.values.iter().zip(q.values).map(|(u, v)| u + v));
                    asm.push_computed(p.col, &buf);
                    x.next();
                    y.next();
                }
                (Some(p), q) if q.is_none_or(|q| p.col < q.col) => {
                    asm.push(p.col, p.values, p.norm);
                    x.next();
                }
                (_, Some(q)) => {
                    asm.push(q.col, q.values, q.norm);
                    y.next();
                }
                (Some(_), None) => unreachable!(),
            }
        }
        asm.end_row();
    }
    Ok(asm.finish())
}
