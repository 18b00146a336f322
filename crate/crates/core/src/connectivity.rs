//! Channel-connectivity formalism: adjacency matrices of layers, the
//! modified Haar matrix realised by the fast wavelet transform, boolean
//! composition and the minimality argument for the transform.
//!
//! Index convention: entry `(i, j)` is set when output channel `i` depends on
//! input channel `j`. Composition `compose(a, b)` models `b` applied first.

use std::fmt;

use serde::ser::{Serialize, SerializeSeq, Serializer};

use crate::error::{Error, Result};
use crate::layers::{wconv_partition_in, wconv_partition_out, SignConvention};

/// Boolean `rows × cols` matrix stored as one bitset per row.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct AdjacencyMatrix {
    rows: usize,
    cols: usize,
    words: usize,
    bits: Vec<u64>,
}

impl AdjacencyMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        let words = cols.div_ceil(64).max(1);
        AdjacencyMatrix {
            rows,
            cols,
            words,
            bits: vec![0; rows * words],
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| i == j)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                if f(i, j) {
                    m.set(i, j, true);
                }
            }
        }
        m
    }

    /// Parses rows of `0`/`1` (other characters ignored).
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        Self::from_fn(rows.len(), cols, |i, j| rows[i].as_ref()[j] != 0)
    }

    /// Block-diagonal support of a grouped convolution with `groups` groups.
    pub fn grouped(rows: usize, cols: usize, groups: usize) -> Self {
        let (rg, cg) = (rows / groups, cols / groups);
        Self::from_fn(rows, cols, |i, j| i / rg == j / cg)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.words + j / 64] >> (j % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        let w = &mut self.bits[i * self.words + j / 64];
        if value {
            *w |= 1 << (j % 64);
        } else {
            *w &= !(1 << (j % 64));
        }
    }

    fn row_words(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    /// Input channels output `i` depends on.
    pub fn row_support(&self, i: usize) -> Vec<usize> {
        (0..self.cols).filter(|&j| self.get(i, j)).collect()
    }

    /// Number of set entries, written ℓ(A).
    pub fn nnz(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_full(&self) -> bool {
        self.nnz() == self.rows * self.cols
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j) as u8).collect())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }
}

impl fmt::Debug for AdjacencyMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AdjacencyMatrix {}x{}", self.rows, self.cols)?;
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for AdjacencyMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let line: String = (0..self.cols)
                .map(|j| if self.get(i, j) { '1' } else { '.' })
                .collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

impl Serialize for AdjacencyMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.rows))?;
        for row in self.to_rows() {
            seq.serialize_element(&row)?;
        }
        seq.end()
    }
}

/// Boolean product `a · b` (OR of ANDs): `b` upstream, `a` downstream.
pub fn compose(a: &AdjacencyMatrix, b: &AdjacencyMatrix) -> Result<AdjacencyMatrix> {
    if a.cols != b.rows {
        return Err(Error::AdjacencyDims {
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = AdjacencyMatrix::empty(a.rows, b.cols);
    for i in 0..a.rows {
        let dst = i * out.words;
        for l in 0..a.cols {
            if a.get(i, l) {
                for (o, &w) in out.bits[dst..dst + out.words]
                    .iter_mut()
                    .zip(b.row_words(l))
                {
                    *o |= w;
                }
            }
        }
    }
    Ok(out)
}

pub fn is_full(a: &AdjacencyMatrix) -> bool {
    a.is_full()
}

pub fn nnz(a: &AdjacencyMatrix) -> usize {
    a.nnz()
}

/// Support of a wavelet convolution: each aligned piece pair is dense, all
/// other entries are zero.
pub fn adjacency_of_wconv(
    in_channels: usize,
    out_channels: usize,
    depth: u32,
) -> Result<AdjacencyMatrix> {
    let ins = wconv_partition_in(in_channels, depth)?;
    let outs = wconv_partition_out(out_channels, depth)?;
    let mut m = AdjacencyMatrix::empty(out_channels, in_channels);
    let (mut is, mut os) = (0, 0);
    for (il, ol) in ins.into_iter().zip(outs) {
        for i in os..os + ol {
            for j in is..is + il {
                m.set(i, j, true);
            }
        }
        is += il;
        os += ol;
    }
    Ok(m)
}

/// Support of the fast wavelet transform, `|H|`.
pub fn adjacency_of_dfwt(channels: usize, depth: u32) -> Result<AdjacencyMatrix> {
    Ok(haar_matrix(channels, depth, SignConvention::Algorithm2)?.support())
}

/// Dense `{-1, 0, +1}` matrix whose broadcast over channels is the fast
/// wavelet transform at the given depth.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct HaarMatrix {
    size: usize,
    depth: u32,
    sign: SignConvention,
    entries: Vec<i8>,
}

fn log2_exact(d: usize) -> Result<u32> {
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(d));
    }
    Ok(d.trailing_zeros())
}

/// Integer trace of the transform on one vector.
fn trace_transform(input: &[i32], depth: u32, sign: SignConvention) -> Vec<i32> {
    let mut current = input.to_vec();
    let mut out = Vec::with_capacity(input.len());
    for _ in 0..depth {
        let h = current.len() / 2;
        let (lo, hi) = current.split_at(h);
        out.extend(lo.iter().zip(hi).map(|(&l, &u)| match sign {
            SignConvention::Algorithm2 => u - l,
            SignConvention::Matrix => l - u,
        }));
        current = lo.iter().zip(hi).map(|(&l, &u)| l + u).collect();
    }
    out.extend(current);
    out
}

/// Builds the matrix column by column by tracing the transform on basis vectors.
pub fn haar_matrix(size: usize, depth: u32, sign: SignConvention) -> Result<HaarMatrix> {
    let k = log2_exact(size)?;
    if depth > k {
        return Err(Error::DepthTooLarge { size, depth });
    }
    let mut entries = vec![0i8; size * size];
    let mut basis = vec![0i32; size];
    for j in 0..size {
        basis[j] = 1;
        for (i, v) in trace_transform(&basis, depth, sign).into_iter().enumerate() {
            entries[i * size + j] = v as i8;
        }
        basis[j] = 0;
    }
    Ok(HaarMatrix {
        size,
        depth,
        sign,
        entries,
    })
}

impl HaarMatrix {
    /// Wraps explicit entries, e.g. a tabulated reference matrix.
    pub fn from_rows(rows: &[Vec<i8>], depth: u32, sign: SignConvention) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::Config("Haar matrix must be square".into()));
        }
        Ok(HaarMatrix {
            size,
            depth,
            sign,
            entries: rows.concat(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn sign(&self) -> SignConvention {
        self.sign
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.entries[i * self.size + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: i8) {
        self.entries[i * self.size + j] = v;
    }

    pub fn rows(&self) -> Vec<Vec<i8>> {
        self.entries
            .chunks_exact(self.size)
            .map(<[i8]>::to_vec)
            .collect()
    }

    /// Row block sizes `{D/2, ..., D/2^κ, D/2^κ}`.
    pub fn row_blocks(&self) -> Vec<usize> {
        wconv_partition_in(self.size, self.depth).expect("size is a power of two")
    }

    pub fn support(&self) -> AdjacencyMatrix {
        AdjacencyMatrix::from_fn(self.size, self.size, |i, j| self.get(i, j) != 0)
    }

    /// Dense matrix-vector product in `f64`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.entries
            .chunks_exact(self.size)
            .map(|row| row.iter().zip(x).map(|(&h, &v)| h as f64 * v).sum())
            .collect()
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.size];
        for (row, &yv) in self.entries.chunks_exact(self.size).zip(y) {
            for (xv, &h) in x.iter_mut().zip(row) {
                *xv += h as f64 * yv;
            }
        }
        x
    }

    /// `H Hᵀ` as integers.
    pub fn gram(&self) -> Vec<Vec<i64>> {
        let rows = self.rows();
        rows.iter()
            .map(|a| {
                rows.iter()
                    .map(|b| a.iter().zip(b).map(|(&p, &q)| p as i64 * q as i64).sum())
                    .collect()
            })
            .collect()
    }

    pub fn row_norms_squared(&self) -> Vec<i64> {
        self.rows()
            .iter()
            .map(|r| r.iter().map(|&v| (v as i64) * (v as i64)).sum())
            .collect()
    }

    /// Solves `H x = y` using row orthogonality: `x = Hᵀ diag(1/‖h_i‖²) y`.
    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = y
            .iter()
            .zip(self.row_norms_squared())
            .map(|(&v, n)| v / n as f64)
            .collect();
        self.apply_transpose(&scaled)
    }

    pub fn to_ascii(&self) -> String {
        let mut s = String::new();
        for row in self.entries.chunks_exact(self.size) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:>2}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

impl Serialize for HaarMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(serializer)
    }
}

/// The Kronecker recursion `H_2 = [[1,-1],[1,1]]`,
/// `H_{2^k} = [I ⊗ [1,-1]; H_{2^(k-1)} ⊗ [1,1]]` at full depth.
///
/// It pairs adjacent channels rather than halves; it equals the traced
/// matrix (matrix sign) up to a bit-reversal of the columns and a
/// reordering of rows within each block.
pub fn haar_kronecker(size: usize) -> Result<Vec<Vec<i8>>> {
    let k = log2_exact(size)?;
    let mut h: Vec<Vec<i8>> = vec![vec![1]];
    for level in 1..=k {
        let n = 1usize << level;
        let half = n / 2;
        let mut next = Vec::with_capacity(n);
        for i in 0..half {
            let mut row = vec![0i8; n];
            row[2 * i] = 1;
            row[2 * i + 1] = -1;
            next.push(row);
        }
        if level == 1 {
            next.push(vec![1, 1]);
        } else {
            for prev in &h {
                next.push(prev.iter().flat_map(|&v| [v, v]).collect());
            }
        }
        h = next;
    }
    Ok(h)
}

/// Region-counting lower bound on ℓ(M) over all `M` with `a · M` full.
///
/// Rows of `a` with pairwise disjoint supports each force at least one
/// nonzero per column of `M` inside their support, so every such group
/// contributes `cols(M) = rows(M)` entries. Distinct supports are taken
/// greedily while disjoint, so the result is a valid bound for any `a`.
pub fn minimality_lower_bound(a: &AdjacencyMatrix) -> usize {
    let mut taken: Vec<Vec<u64>> = Vec::new();
    for i in 0..a.rows() {
        let row = a.row_words(i);
        if row.iter().all(|&w| w == 0) {
            continue;
        }
        let disjoint = taken
            .iter()
            .all(|t| t.iter().zip(row).all(|(&p, &q)| p & q == 0));
        if disjoint {
            taken.push(row.to_vec());
        }
    }
    taken.len() * a.cols()
}

/// Result of enumerating every boolean `D × D` matrix.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ExhaustiveMinimum {
    pub minimum: usize,
    pub minimizers: usize,
    /// Entry `w` counts matrices with ℓ(M) = w whose composition is full.
    pub full_by_weight: Vec<usize>,
}

/// Exhaustive minimum of ℓ(M) with `A_WConv(D, D, log2 D) · M` full.
/// Only `D = 4` (2^16 candidates) is supported.
pub fn minimality_exhaustive(size: usize) -> Result<ExhaustiveMinimum> {
    if size != 4 {
        return Err(Error::Unsupported(format!(
            "exhaustive minimality search is limited to D = 4, got {size}"
        )));
    }
    let a = adjacency_of_wconv(4, 4, 2)?;
    let supports: Vec<Vec<usize>> = (0..4).map(|i| a.row_support(i)).collect();
    let mut full_by_weight = vec![0usize; 17];
    for mask in 0u32..1 << 16 {
        let m = |l: usize, j: usize| mask >> (l * 4 + j) & 1 == 1;
        let full = supports
            .iter()
            .all(|s| (0..4).all(|j| s.iter().any(|&l| m(l, j))));
        if full {
            full_by_weight[mask.count_ones() as usize] += 1;
        }
    }
    let minimum = full_by_weight
        .iter()
        .position(|&c| c > 0)
        .expect("the all-ones matrix always composes to full");
    Ok(ExhaustiveMinimum {
        minimum,
        minimizers: full_by_weight[minimum],
        full_by_weight,
    })
}
