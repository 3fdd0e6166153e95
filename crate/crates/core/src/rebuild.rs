//! Index reconstruction: gather sort keys from the table pages, sort them
//! with the row-column sort, and bulk-load the tree bottom-up.
//!
//! With metadata at hand each row becomes a compressed sort key (the key's
//! bits at the extraction positions followed by the record-ID bits).
//! Without it (first build) rows are sorted on their full keys followed by
//! the record ID, and fresh metadata is derived from the result.
//!
//! Extraction positions are the D-bitmap plus every variant position within
//! `pk` bits after a D-bitmap position, so each leaf's partial key can be
//! read from its own sort key: positions in that window that are not
//! extracted are invariant and come from the reference key.

use std::cmp::Ordering;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::bits::{pdep, read_bits};
use crate::dbits::{build_doffset, dbit_words, BitPos, Bitmap, DOffsetTable, ExtractPlan};
use crate::indextree::{
    entry_meta, BuildConfig, IndexTree, InnerEntry, InnerNode, LeafEntry, LeafNode, TreeError, DBIT_EQUAL, NIL,
};
use crate::keycodec::{compare_words, IndexKey};
use crate::metadata::{DsMetadata, MetaError};
use crate::rcsort::{row_column_sort, tile, SortError, SortParams, WordCounter};
use crate::table::{RecordId, Table};

#[derive(Debug, Error)]
pub enum RebuildError {
    #[error(transparent)]
    Sort(#[from] SortError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error("metadata covers {meta} key bits, table keys have {table}")]
    KeyBits { meta: usize, table: usize },
    #[error("at least one thread is required")]
    NoThreads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Full,
    Compressed,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Compressed => "compressed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RebuildOptions {
    pub threads: usize,
    pub build: BuildConfig,
    /// Forces the sort's blocks per worker.
    pub t_override: Option<usize>,
    /// Overrides the sort's per-worker cache budget.
    pub cache_bytes: Option<usize>,
}

impl Default for RebuildOptions {
    fn default() -> Self {
        RebuildOptions { threads: 1, build: BuildConfig::default(), t_override: None, cache_bytes: None }
    }
}

impl RebuildOptions {
    pub fn with_threads(threads: usize) -> Self {
        RebuildOptions { threads, ..Default::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RebuildReport {
    pub method: Method,
    pub keys: usize,
    pub threads: usize,
    /// Bytes per sorted element, after rounding to whole words.
    pub sort_key_bytes: usize,
    /// Bits each sort key actually carries.
    pub sort_key_bits: usize,
    pub extract_secs: f64,
    pub sort_secs: f64,
    pub build_secs: f64,
    pub meta_secs: f64,
    pub total_secs: f64,
    pub sort_blocks_per_worker: usize,
    pub sort_subblock_elems: usize,
    pub height: usize,
}

impl RebuildReport {
    pub fn phase_sum(&self) -> f64 {
        self.extract_secs + self.sort_secs + self.build_secs + self.meta_secs
    }
}

pub struct Rebuilt {
    pub tree: IndexTree,
    pub meta: DsMetadata,
    pub report: RebuildReport,
}

/// Positions gathered into compressed keys: the D-bitmap plus the variant
/// positions inside each partial-key window.
pub fn extraction_bitmap(meta: &DsMetadata, pk_bits: u32) -> Bitmap {
    let mut ext = meta.dbitmap().spread(pk_bits);
    ext.intersect_with(meta.variant());
    ext.union_with(meta.dbitmap());
    ext
}

// ---------------------------------------------------------------- records

/// Random access to the sorted keys that a tree is loaded from.
pub trait SortedSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn rid(&self, i: usize) -> RecordId;
    fn key_len(&self, i: usize) -> u16;
    /// D-bit and partial key of element `cur` against element `prev`.
    fn meta(&self, prev: usize, cur: usize) -> (u16, u32);
    /// D-bit and partial key of the first element of a level.
    fn first_meta(&self, i: usize) -> (u16, u32);
}

/// Fixed-stride sort keys in one flat buffer.
pub trait RecordView: Sync {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> &[u64];
}

impl<const W: usize> RecordView for [[u64; W]] {
    fn len(&self) -> usize {
        <[[u64; W]]>::len(self)
    }
    #[inline]
    fn get(&self, i: usize) -> &[u64] {
        &self[i]
    }
}

/// Flat buffer read through a sorted permutation.
pub struct Indexed<'a> {
    pub flat: &'a [u64],
    pub stride: usize,
    pub order: Vec<u32>,
}

impl RecordView for Indexed<'_> {
    fn len(&self) -> usize {
        self.order.len()
    }
    #[inline]
    fn get(&self, i: usize) -> &[u64] {
        let o = self.order[i] as usize * self.stride;
        &self.flat[o..o + self.stride]
    }
}

/// Sorted full-key records: key words then one record-ID word.
pub struct FullKeys<'a, R: ?Sized> {
    pub recs: &'a R,
    pub key_words: usize,
    pub table: &'a Table,
    pub pk_bits: u32,
}

impl<R: RecordView + ?Sized> SortedSource for FullKeys<'_, R> {
    fn len(&self) -> usize {
        self.recs.len()
    }
    #[inline]
    fn rid(&self, i: usize) -> RecordId {
        self.recs.get(i)[self.key_words]
    }
    fn key_len(&self, i: usize) -> u16 {
        self.table.key_len(self.rid(i)) as u16
    }
    #[inline]
    fn meta(&self, prev: usize, cur: usize) -> (u16, u32) {
        let k = self.key_words;
        entry_meta(Some(&self.recs.get(prev)[..k]), &self.recs.get(cur)[..k], self.pk_bits)
    }
    fn first_meta(&self, i: usize) -> (u16, u32) {
        entry_meta(None, &self.recs.get(i)[..self.key_words], self.pk_bits)
    }
}

/// How to rebuild a partial key from the compressed bits after one
/// compressed D-bit.
#[derive(Debug, Clone, Copy, Default)]
struct Recipe {
    pos: u16,
    count: u32,
    /// Window bits taken from the compressed key.
    mask: u32,
    /// Window bits fixed by the reference key.
    fixed: u32,
}

fn recipes(ext: &Bitmap, reference: &IndexKey, key_bits: usize, pk: u32) -> Vec<Recipe> {
    ext.iter_ones()
        .map(|d| {
            let mut r = Recipe { pos: d as u16, ..Default::default() };
            for k in 0..pk {
                let q = d as usize + 1 + k as usize;
                let bit = 1u32 << (pk - 1 - k);
                if q >= key_bits {
                    continue;
                }
                if ext.get(q as BitPos) {
                    r.mask |= bit;
                    r.count += 1;
                } else if q < reference.len() * 8 && reference.bit(q) {
                    r.fixed |= bit;
                }
            }
            r
        })
        .collect()
}

/// Sorted compressed sort keys.
pub struct CompressedKeys<'a, R: ?Sized> {
    recs: &'a R,
    plan: &'a ExtractPlan,
    recipes: &'a [Recipe],
    table: &'a Table,
    pk_bits: u32,
}

impl<R: RecordView + ?Sized> SortedSource for CompressedKeys<'_, R> {
    fn len(&self) -> usize {
        self.recs.len()
    }
    #[inline]
    fn rid(&self, i: usize) -> RecordId {
        self.plan.record_id(self.recs.get(i))
    }
    fn key_len(&self, i: usize) -> u16 {
        self.table.key_len(self.rid(i)) as u16
    }
    #[inline]
    fn meta(&self, prev: usize, cur: usize) -> (u16, u32) {
        let b = self.recs.get(cur);
        match dbit_words(self.recs.get(prev), b) {
            Some(ci) if ci < self.plan.key_bits() => {
                let r = &self.recipes[ci as usize];
                let got = if r.count == 0 { 0 } else { pdep(read_bits(b, ci as usize + 1, r.count), r.mask as u64) };
                (r.pos, got as u32 | r.fixed)
            }
            _ => (DBIT_EQUAL, 0),
        }
    }
    fn first_meta(&self, i: usize) -> (u16, u32) {
        entry_meta(None, self.table.key_words(self.rid(i)), self.pk_bits)
    }
}

// ---------------------------------------------------------------- extract

/// What each row turns into.
#[derive(Clone, Copy)]
pub enum Gather<'a> {
    /// Key words zero-padded to `key_words`, then the record ID.
    Full { key_words: usize },
    Compressed(&'a ExtractPlan),
}

/// Bitwise OR and AND over every gathered key, and the OR of record IDs.
#[derive(Debug, Clone)]
struct Spread {
    or: Vec<u64>,
    and: Vec<u64>,
    rids: u64,
}

impl Spread {
    fn new(words: usize) -> Self {
        Spread { or: vec![0; words], and: vec![u64::MAX; words], rids: 0 }
    }

    fn merge(&mut self, o: &Spread) {
        for (a, b) in self.or.iter_mut().zip(&o.or) {
            *a |= b;
        }
        for (a, b) in self.and.iter_mut().zip(&o.and) {
            *a &= b;
        }
        self.rids |= o.rids;
    }

    fn variant(&self, key_bits: usize) -> Bitmap {
        let w: Vec<u64> = self.or.iter().zip(&self.and).map(|(o, a)| o & !a).collect();
        Bitmap::from_words(key_bits, &w)
    }
}

fn run_parallel<I: Send, R: Send>(items: Vec<I>, f: impl Fn(I) -> R + Sync) -> Vec<R> {
    if items.len() == 1 {
        return items.into_iter().map(f).collect();
    }
    std::thread::scope(|s| {
        let f = &f;
        let hs: Vec<_> = items.into_iter().map(|it| s.spawn(move || f(it))).collect();
        hs.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Fill `out` (`stride` words per live row, zeroed) with one sort key per
/// row. Pages are dealt to `p` workers in contiguous runs; rows land in
/// page order.
fn extract_into(t: &Table, gather: Gather<'_>, p: usize, out: &mut [u64], stride: usize) -> Spread {
    let kw = t.key_words_max();
    let pages = t.pages();
    let groups = tile(0..pages.len(), p.max(1));
    let mut parts: Vec<(std::ops::Range<usize>, &mut [u64])> = Vec::with_capacity(groups.len());
    let mut rest = out;
    for g in groups {
        let rows: usize = pages[g.clone()].iter().map(|pg| pg.live_rows()).sum();
        let (head, tail) = rest.split_at_mut(rows * stride);
        parts.push((g, head));
        rest = tail;
    }
    let spreads = run_parallel(parts, |(g, buf)| {
        let mut sp = Spread::new(kw);
        let mut chunks = buf.chunks_exact_mut(stride);
        for pg in &pages[g] {
            for rid in t.page_live_rids(pg) {
                let key = t.key_words(rid);
                for (i, w) in key.iter().enumerate() {
                    sp.or[i] |= w;
                    sp.and[i] &= w;
                }
                for a in &mut sp.and[key.len()..] {
                    *a = 0;
                }
                sp.rids |= rid;
                let rec = chunks.next().expect("row count matches");
                match gather {
                    Gather::Full { key_words } => {
                        rec[..key.len()].copy_from_slice(key);
                        rec[key_words] = rid;
                    }
                    Gather::Compressed(plan) => plan.compress_words_into(key, rid, rec),
                }
            }
        }
        sp
    });
    let mut total = Spread::new(kw);
    for s in &spreads {
        total.merge(s);
    }
    total
}

/// Sort keys of every live row, `stride` words each, in page order.
pub struct SortKeys {
    pub flat: Vec<u64>,
    pub stride: usize,
}

impl SortKeys {
    pub fn len(&self) -> usize {
        self.flat.len().checked_div(self.stride).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn get(&self, i: usize) -> &[u64] {
        &self.flat[i * self.stride..(i + 1) * self.stride]
    }
}

/// Compress every live row of `t` with `p` workers.
pub fn extract_phase(t: &Table, plan: &ExtractPlan, p: usize) -> SortKeys {
    let stride = plan.words();
    let mut flat = vec![0u64; t.len() * stride];
    extract_into(t, Gather::Compressed(plan), p, &mut flat, stride);
    SortKeys { flat, stride }
}

// ---------------------------------------------------------------- build

/// Closed-form shape of a bulk-built tree.
#[derive(Debug, Clone)]
struct Geometry {
    n: usize,
    cap: usize,
    icap: usize,
    sizes: Vec<usize>,
    /// Arena offset of each inner level (index 0 unused).
    offsets: Vec<usize>,
}

impl Geometry {
    fn new(n: usize, cfg: &BuildConfig) -> Self {
        let sizes = cfg.level_sizes(n);
        let mut offsets = vec![0; sizes.len()];
        for l in 2..sizes.len() {
            offsets[l] = offsets[l - 1] + sizes[l - 1];
        }
        Geometry { n, cap: cfg.leaf_cap(), icap: cfg.inner_cap(), sizes, offsets }
    }

    fn height(&self) -> usize {
        self.sizes.len()
    }

    fn span(&self, level: usize) -> usize {
        self.cap * self.icap.pow(level as u32)
    }

    /// Index of the last element under node `j` of `level`.
    fn high(&self, level: usize, j: usize) -> usize {
        ((j + 1) * self.span(level)).min(self.n) - 1
    }

    fn arena(&self, level: usize, j: usize) -> u64 {
        if level == 0 {
            j as u64
        } else {
            (self.offsets[level] + j) as u64
        }
    }

    fn inner_total(&self) -> usize {
        self.sizes.iter().skip(1).sum()
    }
}

fn fill_leaf<S: SortedSource + ?Sized>(src: &S, geo: &Geometry, j: usize, node: &mut LeafNode, dbits: &mut Bitmap) {
    let lo = j * geo.cap;
    let hi = (lo + geo.cap).min(geo.n);
    let mut v = [LeafEntry::default(); crate::indextree::LEAF_FANOUT];
    for (e, i) in v.iter_mut().zip(lo..hi) {
        let (dbit, pk) = if i == 0 { src.first_meta(0) } else { src.meta(i - 1, i) };
        if i > 0 && dbit != DBIT_EQUAL {
            dbits.set(dbit as BitPos);
        }
        *e = LeafEntry { pk, dbit, key_len: src.key_len(i), rid: src.rid(i) };
    }
    node.set_entries(&v[..hi - lo]);
    node.next = if j + 1 < geo.sizes[0] { (j + 1) as u64 } else { NIL as u64 };
}

fn fill_inner<S: SortedSource + ?Sized>(src: &S, geo: &Geometry, level: usize, j: usize, node: &mut InnerNode) {
    let lo = j * geo.icap;
    let hi = (lo + geo.icap).min(geo.sizes[level - 1]);
    let mut v = [InnerEntry::default(); crate::indextree::INNER_FANOUT];
    for (e, c) in v.iter_mut().zip(lo..hi) {
        let h = geo.high(level - 1, c);
        let (dbit, pk) = if c == 0 { src.first_meta(h) } else { src.meta(geo.high(level - 1, c - 1), h) };
        *e = InnerEntry { pk, dbit, key_len: src.key_len(h), child: geo.arena(level - 1, c), high: src.rid(h) };
    }
    node.set_entries(&v[..hi - lo]);
    node.next = if j + 1 < geo.sizes[level] { geo.arena(level, j + 1) } else { NIL as u64 };
}

/// Split `s` into consecutive pieces of the given lengths.
fn carve<'a, T>(mut s: &'a mut [T], lens: impl IntoIterator<Item = usize>) -> Vec<&'a mut [T]> {
    let mut out = Vec::new();
    for l in lens {
        let (h, t) = s.split_at_mut(l);
        out.push(h);
        s = t;
    }
    out
}

/// Level at which the build is divided among workers: the highest one
/// with at least `p` nodes (the leaves when none has).
fn split_level(sizes: &[usize], p: usize) -> usize {
    sizes.iter().rposition(|&s| s >= p).unwrap_or(0)
}

/// Bulk-load a tree from sorted keys with `p` workers. Each worker fills
/// a run of nodes at the split level together with everything below them,
/// into its own slice of each level; the few levels above are then built
/// over all of those nodes at once, so the tree has the height of a
/// sequential build. Returns the tree and the D-bits seen between
/// adjacent elements.
pub fn parallel_build<S: SortedSource + ?Sized>(
    src: &S,
    cfg: &BuildConfig,
    p: usize,
    key_bits: usize,
) -> (IndexTree, Bitmap) {
    let n = src.len();
    let geo = Geometry::new(n, cfg);
    let h = geo.height();
    if h == 0 {
        return (IndexTree::new(cfg.pk_bits), Bitmap::new(key_bits));
    }
    let mut leaves = vec![LeafNode::EMPTY; geo.sizes[0]];
    let mut inners = vec![InnerNode::EMPTY; geo.inner_total()];
    let k = split_level(&geo.sizes, p.max(1));
    let groups = tile(0..geo.sizes[k], p.max(1));
    // node range of group g at level l <= k
    let range_at = |g: &std::ops::Range<usize>, l: usize| {
        let f = geo.icap.pow((k - l) as u32);
        let lo = (g.start * f).min(geo.sizes[l]);
        let hi = (g.end * f).min(geo.sizes[l]);
        lo..hi
    };
    let mut per_level: Vec<Vec<&mut [InnerNode]>> = Vec::new();
    {
        let level_slices = carve(&mut inners[..], geo.sizes.iter().skip(1).copied());
        for (i, sl) in level_slices.into_iter().enumerate() {
            let l = i + 1;
            if l <= k {
                per_level.push(carve(sl, groups.iter().map(|g| range_at(g, l).len())));
            } else {
                per_level.push(vec![sl]);
            }
        }
        let leaf_parts = carve(&mut leaves[..], groups.iter().map(|g| range_at(g, 0).len()));
        let mut work = Vec::with_capacity(groups.len());
        let mut level_iters: Vec<_> = per_level.iter_mut().take(k).map(|v| v.drain(..)).collect();
        for (g, lp) in groups.iter().zip(leaf_parts) {
            let ins: Vec<&mut [InnerNode]> = level_iters.iter_mut().map(|it| it.next().unwrap()).collect();
            work.push((g.clone(), lp, ins));
        }
        drop(level_iters);
        let maps = run_parallel(work, |(g, lp, ins)| {
            let mut dbits = Bitmap::new(key_bits);
            let r0 = range_at(&g, 0);
            for (node, j) in lp.iter_mut().zip(r0) {
                fill_leaf(src, &geo, j, node, &mut dbits);
            }
            for (i, sl) in ins.into_iter().enumerate() {
                let l = i + 1;
                for (node, j) in sl.iter_mut().zip(range_at(&g, l)) {
                    fill_inner(src, &geo, l, j, node);
                }
            }
            dbits
        });
        let mut dbits = Bitmap::new(key_bits);
        for m in &maps {
            dbits.union_with(m);
        }
        // top layers over the workers' nodes
        for l in k + 1..h {
            let sl = &mut per_level[l - 1][0];
            for (j, node) in sl.iter_mut().enumerate() {
                fill_inner(src, &geo, l, j, node);
            }
        }
        let root = if h == 1 { 0 } else { geo.arena(h - 1, 0) as u32 };
        drop(per_level);
        let tree = IndexTree::from_arenas(leaves, inners, root, h, n, cfg.pk_bits);
        (tree, dbits)
    }
}

/// Height a tree would get by building one subtree per final sort block
/// and then linking the subtree roots under new upper levels.
pub fn naive_link_height(n: usize, p: usize, cfg: &BuildConfig) -> usize {
    let blocks: Vec<usize> = tile(0..n, p.max(1)).iter().map(|r| r.len()).filter(|&l| l > 0).collect();
    let sub = blocks.iter().map(|&b| cfg.height(b)).max().unwrap_or(0);
    if blocks.len() <= 1 {
        return sub;
    }
    let mut roots = blocks.len();
    let mut h = sub;
    while roots > 1 {
        roots = roots.div_ceil(cfg.inner_cap());
        h += 1;
    }
    h
}

// ---------------------------------------------------------------- pipeline

const WIDTHS: &[usize] = &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 20, 24, 28, 32, 40, 48, 56, 64];

/// Record width in words used for sort keys of `words` words: the next
/// width with a fixed-size code path, or `words` itself past the largest.
pub fn padded_width(words: usize) -> usize {
    WIDTHS.iter().copied().find(|&w| w >= words).unwrap_or(words)
}

struct Plan<'a> {
    table: &'a Table,
    gather: Gather<'a>,
    /// Words each record carries before padding.
    words: usize,
    bits: usize,
    opts: &'a RebuildOptions,
    counter: Option<&'a WordCounter>,
    method: Method,
}

struct Sorted {
    spread: Spread,
    extract_secs: f64,
    sort_secs: f64,
    t: usize,
    c: usize,
}

fn sort_params(n: usize, elem_bytes: usize, opts: &RebuildOptions) -> SortParams {
    let mut sp = SortParams::new(n, opts.threads, elem_bytes);
    if let Some(c) = opts.cache_bytes {
        sp.cache_bytes = c;
    }
    sp.t_override = opts.t_override;
    sp
}

fn counted<'a, T: AsRef<[u64]>>(counter: &'a WordCounter) -> impl Fn(&T, &T) -> Ordering + Sync + 'a {
    move |a: &T, b: &T| {
        let (o, w) = compare_words(a.as_ref(), b.as_ref());
        counter.record(w);
        o
    }
}

fn run_fixed<const W: usize>(pl: &Plan<'_>) -> Result<(Vec<[u64; W]>, Sorted), RebuildError> {
    let n = pl.table.len();
    let start = Instant::now();
    let mut recs = vec![[0u64; W]; n];
    let spread = extract_into(pl.table, pl.gather, pl.opts.threads, recs.as_flattened_mut(), W);
    let extract_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let sp = sort_params(n, W * 8, pl.opts);
    let out = match pl.counter {
        Some(c) => row_column_sort(&mut recs, &sp, &counted::<[u64; W]>(c))?,
        None => row_column_sort(&mut recs, &sp, &|a: &[u64; W], b: &[u64; W]| a.cmp(b))?,
    };
    let sort_secs = start.elapsed().as_secs_f64();
    Ok((recs, Sorted { spread, extract_secs, sort_secs, t: out.t, c: out.c }))
}

fn run_indexed(pl: &Plan<'_>, stride: usize) -> Result<(Vec<u64>, Vec<u32>, Sorted), RebuildError> {
    let n = pl.table.len();
    let start = Instant::now();
    let mut flat = vec![0u64; n * stride];
    let spread = extract_into(pl.table, pl.gather, pl.opts.threads, &mut flat, stride);
    let extract_secs = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let mut order: Vec<u32> = (0..n as u32).collect();
    let rec = |i: &u32| &flat[*i as usize * stride..(*i as usize + 1) * stride];
    let sp = sort_params(n, 4, pl.opts);
    let out = match pl.counter {
        Some(c) => row_column_sort(&mut order, &sp, &|a: &u32, b: &u32| {
            let (o, w) = compare_words(rec(a), rec(b));
            c.record(w);
            o
        })?,
        None => row_column_sort(&mut order, &sp, &|a: &u32, b: &u32| rec(a).cmp(rec(b)))?,
    };
    let sort_secs = start.elapsed().as_secs_f64();
    Ok((flat, order, Sorted { spread, extract_secs, sort_secs, t: out.t, c: out.c }))
}

/// State shared by the build step of both methods.
struct Finish<'a> {
    pl: &'a Plan<'a>,
    recipes: Option<(&'a ExtractPlan, Vec<Recipe>)>,
}

impl Finish<'_> {
    fn build<R: RecordView + ?Sized>(&self, recs: &R, sorted: Sorted, padded: usize) -> Result<Rebuilt, RebuildError> {
        let pl = self.pl;
        let t = pl.table;
        let opts = pl.opts;
        let key_bits = t.key_bits();
        let start = Instant::now();
        let (tree, dbits, first_rid) = match (&self.recipes, pl.gather) {
            (Some((plan, rec)), _) => {
                let src = CompressedKeys { recs, plan, recipes: rec, table: t, pk_bits: opts.build.pk_bits };
                let (tr, d) = parallel_build(&src, &opts.build, opts.threads, key_bits);
                (tr, d, (!src.is_empty()).then(|| src.rid(0)))
            }
            (None, Gather::Full { key_words }) => {
                let src = FullKeys { recs, key_words, table: t, pk_bits: opts.build.pk_bits };
                let (tr, d) = parallel_build(&src, &opts.build, opts.threads, key_bits);
                (tr, d, (!src.is_empty()).then(|| src.rid(0)))
            }
            (None, Gather::Compressed(_)) => unreachable!("compressed gather always carries recipes"),
        };
        let build_secs = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let meta = match first_rid {
            None => DsMetadata::empty(key_bits),
            Some(r) => DsMetadata::from_parts(dbits, sorted.spread.variant(key_bits), t.key(r), sorted.spread.rids)?,
        };
        let meta_secs = start.elapsed().as_secs_f64();
        let report = RebuildReport {
            method: pl.method,
            keys: t.len(),
            threads: opts.threads,
            sort_key_bytes: padded * 8,
            sort_key_bits: pl.bits,
            extract_secs: sorted.extract_secs,
            sort_secs: sorted.sort_secs,
            build_secs,
            meta_secs,
            total_secs: 0.0,
            sort_blocks_per_worker: sorted.t,
            sort_subblock_elems: sorted.c,
            height: tree.height(),
        };
        Ok(Rebuilt { tree, meta, report })
    }
}

macro_rules! dispatch {
    ($w:expr, $fin:expr, $pl:expr; $($n:literal)*) => {
        match $w {
            $($n => {
                let (recs, sorted) = run_fixed::<$n>($pl)?;
                $fin.build(&recs[..], sorted, $n)
            })*
            w => {
                let (flat, order, sorted) = run_indexed($pl, w)?;
                $fin.build(&Indexed { flat: &flat, stride: w, order }, sorted, w)
            }
        }
    };
}

fn execute(pl: Plan<'_>, recipes: Option<(&ExtractPlan, Vec<Recipe>)>) -> Result<Rebuilt, RebuildError> {
    if pl.opts.threads == 0 {
        return Err(RebuildError::NoThreads);
    }
    pl.opts.build.validate()?;
    let start = Instant::now();
    let width = padded_width(pl.words);
    let fin = Finish { pl: &pl, recipes };
    let mut out = dispatch!(width, fin, &pl; 1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16 20 24 28 32 40 48 56 64)?;
    out.report.total_secs = start.elapsed().as_secs_f64();
    Ok(out)
}

/// First build: sort full keys (with the record ID appended) and derive
/// metadata from the result.
pub fn reconstruct_full(t: &Table, opts: &RebuildOptions, counter: Option<&WordCounter>) -> Result<Rebuilt, RebuildError> {
    let kw = t.key_words_max();
    let pl = Plan {
        table: t,
        gather: Gather::Full { key_words: kw },
        words: kw + 1,
        bits: (kw + 1) * 64,
        opts,
        counter,
        method: Method::Full,
    };
    execute(pl, None)
}

/// Rebuild from metadata: sort compressed keys.
pub fn reconstruct_compressed(
    t: &Table,
    meta: &DsMetadata,
    opts: &RebuildOptions,
    counter: Option<&WordCounter>,
) -> Result<Rebuilt, RebuildError> {
    if meta.key_bits() != t.key_bits() {
        return Err(RebuildError::KeyBits { meta: meta.key_bits(), table: t.key_bits() });
    }
    let ext = extraction_bitmap(meta, opts.build.pk_bits);
    let rid_mask = t.live_rids().fold(meta.rid_mask(), |a, r| a | r);
    let plan = ExtractPlan::new(&ext, rid_mask);
    let rec = recipes(&ext, meta.reference(), t.key_bits(), opts.build.pk_bits);
    let pl = Plan {
        table: t,
        gather: Gather::Compressed(&plan),
        words: plan.words(),
        bits: plan.total_bits() as usize,
        opts,
        counter,
        method: Method::Compressed,
    };
    execute(pl, Some((&plan, rec)))
}

/// Rebuild with compressed keys when metadata is given, else with full keys.
pub fn reconstruct(t: &Table, meta: Option<&DsMetadata>, opts: &RebuildOptions) -> Result<Rebuilt, RebuildError> {
    match meta {
        Some(m) => reconstruct_compressed(t, m, opts, None),
        None => reconstruct_full(t, opts, None),
    }
}

/// D-offset table of the extraction positions for `meta`.
pub fn extraction_doffset(meta: &DsMetadata, pk_bits: u32) -> DOffsetTable {
    build_doffset(&extraction_bitmap(meta, pk_bits))
}
