//! Row-column sort: a barrier-phased parallel comparison sort.
//!
//! 1. The input is cut into `t·p` blocks, `t` per worker. Each block is cut
//!    into cache-sized sub-blocks which are quicksorted in place, then
//!    merged with a loser tree into the matching range of a second array.
//! 2. Worker `i` finds the cut through all sorted blocks below global rank
//!    `i·n/p` (a multisequence selection).
//! 3. Worker `i` merges the `i`-th slice of every sorted block back into
//!    the `i`-th final block of the input array.
//!
//! Phases are separated by joining the scoped workers. Indivisible sizes
//! are handled by letting the last block of each tiling take the
//! remainder.

use std::cmp::Ordering;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use thiserror::Error;

pub const INSERTION_THRESHOLD: usize = 16;
const FALLBACK_CACHE_PER_THREAD: usize = 2 << 20;
pub const CACHE_ENV: &str = "DSLICE_CACHE_BYTES";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SortError {
    #[error("split rank {x} outside 0..={n}")]
    RankOutOfRange { x: usize, n: usize },
    #[error("thread count must be at least 1")]
    NoThreads,
}

/// Half-open range of element indices.
pub type BlockRange = Range<usize>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SortParams {
    pub n: usize,
    pub p: usize,
    /// Element size in bytes.
    pub elem_bytes: usize,
    /// Last-level cache bytes available to one worker.
    pub cache_bytes: usize,
    /// Forces the number of blocks per worker.
    pub t_override: Option<usize>,
}

impl SortParams {
    pub fn new(n: usize, p: usize, elem_bytes: usize) -> Self {
        SortParams { n, p, elem_bytes, cache_bytes: cache_per_thread(p), t_override: None }
    }

    /// Elements per cache-sized sub-block.
    pub fn c(&self) -> usize {
        (self.cache_bytes / self.elem_bytes.max(1)).max(1)
    }

    /// Blocks per worker, chosen so that the sub-block merge fan-in and the
    /// final merge fan-in come out about equal.
    pub fn t(&self) -> usize {
        if let Some(t) = self.t_override {
            return t.max(1);
        }
        let r = ((self.n as f64 / self.c() as f64).sqrt() / self.p.max(1) as f64).floor() as usize;
        r.max(1)
    }
}

/// L3 size in bytes from sysfs, if available.
pub fn detect_l3_bytes() -> Option<usize> {
    let s = std::fs::read_to_string("/sys/devices/system/cpu/cpu0/cache/index3/size").ok()?;
    parse_size(s.trim())
}

fn parse_size(s: &str) -> Option<usize> {
    let (num, mult) = match s.as_bytes().last()? {
        b'K' | b'k' => (&s[..s.len() - 1], 1usize << 10),
        b'M' | b'm' => (&s[..s.len() - 1], 1 << 20),
        b'G' | b'g' => (&s[..s.len() - 1], 1 << 30),
        _ => (s, 1),
    };
    num.trim().parse::<usize>().ok().map(|v| v * mult)
}

/// Per-worker cache budget: the env override, else L3 / p, else 2 MiB.
pub fn cache_per_thread(p: usize) -> usize {
    if let Some(v) = std::env::var(CACHE_ENV).ok().and_then(|v| parse_size(v.trim())) {
        return v.max(1);
    }
    detect_l3_bytes().map(|l3| (l3 / p.max(1)).max(1)).unwrap_or(FALLBACK_CACHE_PER_THREAD)
}

/// `parts` ranges tiling `range`; the last one absorbs the remainder.
pub fn tile(range: BlockRange, parts: usize) -> Vec<BlockRange> {
    let parts = parts.max(1);
    let len = range.len();
    let size = len / parts;
    (0..parts)
        .map(|i| {
            let s = range.start + i * size;
            let e = if i + 1 == parts { range.end } else { s + size };
            s..e
        })
        .collect()
}

// ---------------------------------------------------------------- basic sort

/// In-cache quicksort: ninther pivot, three-way partition, insertion sort
/// below [`INSERTION_THRESHOLD`] elements.
pub fn basic_sort<T: Copy, F: Fn(&T, &T) -> Ordering>(v: &mut [T], cmp: &F) {
    let mut v = v;
    while v.len() > INSERTION_THRESHOLD {
        let pivot = v[ninther(v, cmp)];
        // v[..lt] < pivot, v[lt..i] == pivot, v[gt..] > pivot
        let (mut lt, mut i, mut gt) = (0, 0, v.len());
        while i < gt {
            match cmp(&v[i], &pivot) {
                Ordering::Less => {
                    v.swap(lt, i);
                    lt += 1;
                    i += 1;
                }
                Ordering::Greater => {
                    gt -= 1;
                    v.swap(i, gt);
                }
                Ordering::Equal => i += 1,
            }
        }
        let (left, rest) = v.split_at_mut(lt);
        let right = &mut rest[gt - lt..];
        if left.len() < right.len() {
            basic_sort(left, cmp);
            v = right;
        } else {
            basic_sort(right, cmp);
            v = left;
        }
    }
    insertion_sort(v, cmp);
}

fn insertion_sort<T: Copy, F: Fn(&T, &T) -> Ordering>(v: &mut [T], cmp: &F) {
    for i in 1..v.len() {
        let x = v[i];
        let mut j = i;
        while j > 0 && cmp(&x, &v[j - 1]) == Ordering::Less {
            v[j] = v[j - 1];
            j -= 1;
        }
        v[j] = x;
    }
}

fn median3<T, F: Fn(&T, &T) -> Ordering>(v: &[T], a: usize, b: usize, c: usize, cmp: &F) -> usize {
    let lt = |x: usize, y: usize| cmp(&v[x], &v[y]) == Ordering::Less;
    if lt(a, b) {
        if lt(b, c) {
            b
        } else if lt(a, c) {
            c
        } else {
            a
        }
    } else if lt(a, c) {
        a
    } else if lt(b, c) {
        c
    } else {
        b
    }
}

fn ninther<T, F: Fn(&T, &T) -> Ordering>(v: &[T], cmp: &F) -> usize {
    let n = v.len();
    let s = n / 8;
    let m = n / 2;
    let l = n - 1;
    let a = median3(v, 0, s, 2 * s, cmp);
    let b = median3(v, m - s, m, m + s, cmp);
    let c = median3(v, l - 2 * s, l - s, l, cmp);
    median3(v, a, b, c, cmp)
}

// ------------------------------------------------------------- loser tree merge

/// Merge sorted runs into `out` (length = total run length) with a loser
/// tree. Ties go to the run with the lower index.
pub fn multiway_merge<T: Copy, F: Fn(&T, &T) -> Ordering>(runs: &[&[T]], out: &mut [T], cmp: &F) {
    debug_assert_eq!(runs.iter().map(|r| r.len()).sum::<usize>(), out.len());
    let runs: Vec<&[T]> = runs.iter().copied().filter(|r| !r.is_empty()).collect();
    match runs.len() {
        0 => {}
        1 => out.copy_from_slice(runs[0]),
        2 => merge2(runs[0], runs[1], out, cmp),
        _ => LoserTree::new(&runs, cmp).drain_into(out),
    }
}

fn merge2<T: Copy, F: Fn(&T, &T) -> Ordering>(a: &[T], b: &[T], out: &mut [T], cmp: &F) {
    let (mut i, mut j) = (0, 0);
    for slot in out.iter_mut() {
        let take_a = j == b.len() || (i < a.len() && cmp(&b[j], &a[i]) != Ordering::Less);
        if take_a {
            *slot = a[i];
            i += 1;
        } else {
            *slot = b[j];
            j += 1;
        }
    }
}

struct LoserTree<'a, T, F> {
    runs: &'a [&'a [T]],
    pos: Vec<usize>,
    /// tree[0] is the current winner; tree[1..k] hold losers.
    tree: Vec<usize>,
    k: usize,
    cmp: &'a F,
}

impl<'a, T: Copy, F: Fn(&T, &T) -> Ordering> LoserTree<'a, T, F> {
    fn new(runs: &'a [&'a [T]], cmp: &'a F) -> Self {
        let k = runs.len().next_power_of_two();
        let mut lt = LoserTree { runs, pos: vec![0; runs.len()], tree: vec![usize::MAX; k], k, cmp };
        let w = lt.init(1);
        lt.tree[0] = w;
        lt
    }

    fn init(&mut self, node: usize) -> usize {
        if node >= self.k {
            return node - self.k;
        }
        let l = self.init(2 * node);
        let r = self.init(2 * node + 1);
        if self.beats(l, r) {
            self.tree[node] = r;
            l
        } else {
            self.tree[node] = l;
            r
        }
    }

    #[inline]
    fn head(&self, r: usize) -> Option<&T> {
        self.runs.get(r).and_then(|run| run.get(self.pos[r]))
    }

    /// Whether run `a`'s head comes out before run `b`'s.
    #[inline]
    fn beats(&self, a: usize, b: usize) -> bool {
        match (self.head(a), self.head(b)) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(x), Some(y)) => match (self.cmp)(x, y) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => a < b,
            },
        }
    }

    fn drain_into(mut self, out: &mut [T]) {
        for slot in out.iter_mut() {
            let mut w = self.tree[0];
            *slot = *self.head(w).expect("runs shorter than output");
            self.pos[w] += 1;
            let mut node = (w + self.k) / 2;
            while node >= 1 {
                let l = self.tree[node];
                if self.beats(l, w) {
                    self.tree[node] = w;
                    w = l;
                }
                node /= 2;
            }
            self.tree[0] = w;
        }
    }
}

// ------------------------------------------------------------- selection

/// Cut every sorted block so that exactly `x` elements fall below the cuts
/// and none of them is greater than any element above. Returns the number
/// of elements each block contributes below the cut.
///
/// Each round pivots on the middle element of the widest remaining window,
/// counts lower and upper bounds of the pivot in every window, and either
/// stops (the rank falls among copies of the pivot, which are handed out
/// to blocks in order) or discards one side of every window.
pub fn x_split<T, F: Fn(&T, &T) -> Ordering>(blocks: &[&[T]], x: usize, cmp: &F) -> Result<Vec<usize>, SortError> {
    let n: usize = blocks.iter().map(|b| b.len()).sum();
    if x > n {
        return Err(SortError::RankOutOfRange { x, n });
    }
    let mut lo = vec![0usize; blocks.len()];
    let mut hi: Vec<usize> = blocks.iter().map(|b| b.len()).collect();
    loop {
        let Some((j, _)) = (0..blocks.len()).map(|i| (i, hi[i] - lo[i])).filter(|w| w.1 > 0).max_by_key(|w| w.1) else {
            debug_assert_eq!(lo.iter().sum::<usize>(), x);
            return Ok(lo);
        };
        let pivot = &blocks[j][lo[j] + (hi[j] - lo[j]) / 2];
        let mut lb = Vec::with_capacity(blocks.len());
        let mut ub = Vec::with_capacity(blocks.len());
        for (i, b) in blocks.iter().enumerate() {
            let w = &b[lo[i]..hi[i]];
            lb.push(lo[i] + w.partition_point(|e| cmp(e, pivot) == Ordering::Less));
            ub.push(lo[i] + w.partition_point(|e| cmp(e, pivot) != Ordering::Greater));
        }
        let below: usize = lb.iter().sum();
        let upto: usize = ub.iter().sum();
        if x < below {
            hi = lb;
        } else if x > upto {
            lo = ub;
        } else {
            let mut rem = x - below;
            for i in 0..blocks.len() {
                let take = rem.min(ub[i] - lb[i]);
                lb[i] += take;
                rem -= take;
            }
            return Ok(lb);
        }
    }
}

/// Cut positions of a perfect p-partition. `cuts[b]` holds `p + 1`
/// absolute indices into the sorted array for sorted block `b`; column `j`
/// of block `b` is `cuts[b][j]..cuts[b][j + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub cuts: Vec<Vec<usize>>,
    /// Global rank at which each column starts, plus `n`.
    pub ranks: Vec<usize>,
}

impl Split {
    pub fn columns(&self) -> usize {
        self.ranks.len() - 1
    }

    pub fn column(&self, b: usize, j: usize) -> BlockRange {
        self.cuts[b][j]..self.cuts[b][j + 1]
    }

    pub fn column_len(&self, j: usize) -> usize {
        (0..self.cuts.len()).map(|b| self.column(b, j).len()).sum()
    }
}

/// Column start ranks `i·n/p` (integer division), with `n` appended.
pub fn column_ranks(n: usize, p: usize) -> Vec<usize> {
    (0..=p).map(|i| if i == p { n } else { i * n / p }).collect()
}

/// Perfect p-partition of sorted blocks lying at `ranges` of `data`; one
/// x-split per worker, run concurrently.
pub fn perfect_partition<T: Sync, F: Fn(&T, &T) -> Ordering + Sync>(
    data: &[T],
    ranges: &[BlockRange],
    p: usize,
    cmp: &F,
) -> Split {
    let n: usize = ranges.iter().map(|r| r.len()).sum();
    let ranks = column_ranks(n, p);
    let blocks: Vec<&[T]> = ranges.iter().map(|r| &data[r.clone()]).collect();
    let inner: Vec<usize> = ranks[1..p].to_vec();
    let splits: Vec<Vec<usize>> = if p <= 1 {
        Vec::new()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = inner
                .iter()
                .map(|&x| {
                    let blocks = &blocks;
                    s.spawn(move || x_split(blocks, x, cmp).expect("rank within bounds"))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("split worker panicked")).collect()
        })
    };
    let cuts = ranges
        .iter()
        .enumerate()
        .map(|(b, r)| {
            let mut c = Vec::with_capacity(p + 1);
            c.push(r.start);
            c.extend(splits.iter().map(|sp| r.start + sp[b]));
            c.push(r.end);
            c
        })
        .collect();
    Split { cuts, ranks }
}

// ------------------------------------------------------------- driver

/// Layout produced by [`row_column_sort`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortOutcome {
    pub t: usize,
    pub c: usize,
    /// Final block of each worker, in order.
    pub final_blocks: Vec<BlockRange>,
    pub split: Split,
}

/// Split `v` into consecutive mutable pieces at the given range boundaries.
fn carve<'a, T>(mut v: &'a mut [T], ranges: &[BlockRange]) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(ranges.len());
    let mut at = 0;
    for r in ranges {
        debug_assert_eq!(r.start, at);
        let (head, tail) = std::mem::take(&mut v).split_at_mut(r.len());
        out.push(head);
        v = tail;
        at = r.end;
    }
    out
}

/// Run `f(i, item)` for every item, on its own scoped thread unless there is
/// only one.
fn run_workers<I: Send, F: Fn(usize, I) + Sync>(items: Vec<I>, f: F) {
    if items.len() <= 1 {
        for (i, it) in items.into_iter().enumerate() {
            f(i, it);
        }
        return;
    }
    std::thread::scope(|s| {
        let f = &f;
        let hs: Vec<_> = items.into_iter().enumerate().map(|(i, it)| s.spawn(move || f(i, it))).collect();
        for h in hs {
            h.join().expect("sort worker panicked");
        }
    });
}

/// Sort `keys` with `params.p` workers. On return `keys` is sorted and
/// split into `p` final blocks, one per worker.
pub fn row_column_sort<T, F>(keys: &mut [T], params: &SortParams, cmp: &F) -> Result<SortOutcome, SortError>
where
    T: Copy + Send + Sync,
    F: Fn(&T, &T) -> Ordering + Sync,
{
    let p = params.p;
    if p == 0 {
        return Err(SortError::NoThreads);
    }
    let n = keys.len();
    let t = params.t();
    let c = params.c();
    let final_ranges: Vec<BlockRange> = column_ranks(n, p).windows(2).map(|w| w[0]..w[1]).collect();
    if n == 0 {
        let split = Split { cuts: vec![vec![0; p + 1]; t * p], ranks: vec![0; p + 1] };
        return Ok(SortOutcome { t, c, final_blocks: final_ranges, split });
    }
    let mut temp: Vec<T> = keys.to_vec();

    // phase 1: sort sub-blocks in Key, merge each init block into Temp
    let blocks = tile(0..n, t * p);
    let worker_ranges: Vec<BlockRange> = (0..p).map(|i| blocks[i * t].start..blocks[i * t + t - 1].end).collect();
    {
        let key_parts = carve(keys, &worker_ranges);
        let tmp_parts = carve(&mut temp, &worker_ranges);
        let work: Vec<_> = key_parts.into_iter().zip(tmp_parts).collect();
        let blocks = &blocks;
        run_workers(work, |i, (kp, tp): (&mut [T], &mut [T])| {
            let base = blocks[i * t].start;
            for b in &blocks[i * t..i * t + t] {
                let local = b.start - base..b.end - base;
                let subs = tile(local.clone(), (b.len() / c).max(1));
                for s in &subs {
                    basic_sort(&mut kp[s.clone()], cmp);
                }
                let runs: Vec<&[T]> = subs.iter().map(|s| &kp[s.clone()]).collect();
                multiway_merge(&runs, &mut tp[local], cmp);
            }
        });
    }

    // phase 2: perfect partition of the sorted blocks
    let split = perfect_partition(&temp, &blocks, p, cmp);

    // phase 3: merge column i of every sorted block into final block i
    {
        let outs = carve(keys, &final_ranges);
        let temp = &temp;
        let split = &split;
        run_workers(outs, |i, out: &mut [T]| {
            let runs: Vec<&[T]> = (0..split.cuts.len()).map(|b| &temp[split.column(b, i)]).collect();
            multiway_merge(&runs, out, cmp);
        });
    }
    Ok(SortOutcome { t, c, final_blocks: final_ranges, split })
}

// ------------------------------------------------------------- instrumentation

const SHARDS: usize = 64;

#[repr(align(64))]
#[derive(Default)]
struct Shard {
    compares: AtomicU64,
    words: AtomicU64,
}

/// Counts comparisons and the 8-byte words they examined. Each thread
/// updates its own cache-line shard; totals are summed on read.
pub struct WordCounter {
    shards: Box<[Shard]>,
}

impl Default for WordCounter {
    fn default() -> Self {
        WordCounter { shards: (0..SHARDS).map(|_| Shard::default()).collect() }
    }
}

fn shard_index() -> usize {
    use std::cell::Cell;
    use std::sync::atomic::AtomicUsize;
    static NEXT: AtomicUsize = AtomicUsize::new(0);
    thread_local!(static IDX: Cell<usize> = const { Cell::new(usize::MAX) });
    IDX.with(|c| {
        if c.get() == usize::MAX {
            c.set(NEXT.fetch_add(1, AtomicOrdering::Relaxed) % SHARDS);
        }
        c.get()
    })
}

impl WordCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn record(&self, words: u32) {
        let s = &self.shards[shard_index()];
        s.compares.fetch_add(1, AtomicOrdering::Relaxed);
        s.words.fetch_add(words as u64, AtomicOrdering::Relaxed);
    }

    pub fn compares(&self) -> u64 {
        self.shards.iter().map(|s| s.compares.load(AtomicOrdering::Relaxed)).sum()
    }

    pub fn words(&self) -> u64 {
        self.shards.iter().map(|s| s.words.load(AtomicOrdering::Relaxed)).sum()
    }

    /// Average words per comparison.
    pub fn average(&self) -> f64 {
        let c = self.compares();
        if c == 0 {
            0.0
        } else {
            self.words() as f64 / c as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::AtomicUsize;

    fn ord(a: &u64, b: &u64) -> Ordering {
        a.cmp(b)
    }

    #[test]
    fn params_formulas() {
        let sp = SortParams { n: 1_000_000, p: 4, elem_bytes: 48, cache_bytes: 48 * 1000, t_override: None };
        assert_eq!(sp.c(), 1000);
        // sqrt(1000)/4 = 7.9
        assert_eq!(sp.t(), 7);
        let toy = SortParams { n: 32, p: 4, elem_bytes: 1, cache_bytes: 2, t_override: None };
        assert_eq!((toy.c(), toy.t()), (2, 1));
        assert_eq!(SortParams { t_override: Some(3), ..toy }.t(), 3);
        assert_eq!(SortParams { cache_bytes: 1, elem_bytes: 48, ..toy }.c(), 1);
        assert_eq!(parse_size("107520K"), Some(107520 << 10));
        assert_eq!(parse_size("8M"), Some(8 << 20));
    }

    #[test]
    fn tiling_absorbs_remainder() {
        assert_eq!(tile(0..10, 3), vec![0..3, 3..6, 6..10]);
        assert_eq!(tile(5..7, 4), vec![5..5, 5..5, 5..5, 5..7]);
        assert_eq!(column_ranks(10, 4), vec![0, 2, 5, 7, 10]);
    }

    #[test]
    fn basic_sort_cases() {
        let mut sorted: Vec<u64> = (0..1000).collect();
        basic_sort(&mut sorted, &ord);
        assert_eq!(sorted, (0..1000).collect::<Vec<_>>());
        let mut rev: Vec<u64> = (0..1000).rev().collect();
        basic_sort(&mut rev, &ord);
        assert_eq!(rev, (0..1000).collect::<Vec<_>>());
        let mut eq = vec![7u64; 5000];
        basic_sort(&mut eq, &ord);
        assert_eq!(eq, vec![7u64; 5000]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut r: Vec<u64> = (0..20_000).map(|_| rng.gen_range(0..500)).collect();
        let mut oracle = r.clone();
        oracle.sort_unstable();
        basic_sort(&mut r, &ord);
        assert_eq!(r, oracle);
    }

    #[test]
    fn merge_cases() {
        let a = [1u64, 4, 9];
        let mut out = [0u64; 3];
        multiway_merge(&[&a], &mut out, &ord);
        assert_eq!(out, a);

        let (x, y) = ([1u64, 3, 5, 7], [2u64, 4, 6, 8, 9]);
        let mut out = [0u64; 9];
        multiway_merge(&[&x, &y], &mut out, &ord);
        assert_eq!(out, [1, 2, 3, 4, 5, 6, 7, 8, 9]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let runs: Vec<Vec<u64>> = (0..16)
            .map(|_| {
                let mut v: Vec<u64> = (0..rng.gen_range(0..50)).map(|_| rng.gen_range(0..100)).collect();
                v.sort_unstable();
                v
            })
            .collect();
        let slices: Vec<&[u64]> = runs.iter().map(Vec::as_slice).collect();
        let mut all: Vec<u64> = runs.concat();
        let mut out = vec![0u64; all.len()];
        multiway_merge(&slices, &mut out, &ord);
        all.sort_unstable();
        assert_eq!(out, all);
    }

    #[test]
    fn loser_tree_ties_prefer_lower_run() {
        let runs: Vec<Vec<(u64, usize)>> = (0..5).map(|r| vec![(1, r), (2, r)]).collect();
        let slices: Vec<&[(u64, usize)]> = runs.iter().map(Vec::as_slice).collect();
        let mut out = vec![(0, 0); 10];
        multiway_merge(&slices, &mut out, &|a: &(u64, usize), b: &(u64, usize)| a.0.cmp(&b.0));
        let tags: Vec<usize> = out.iter().map(|e| e.1).collect();
        assert_eq!(tags, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
    }

    /// Four sorted blocks of eight where the eight smallest values sit as
    /// {4}, {0,2,3}, {5,7}, {1,6}, and block 2 holds nothing of ranks 8..16.
    fn toy_blocks() -> Vec<Vec<u64>> {
        vec![
            vec![4, 8, 9, 10, 11, 12, 13, 14],
            vec![0, 2, 3, 24, 25, 26, 27, 28],
            vec![5, 7, 15, 16, 17, 18, 19, 29],
            vec![1, 6, 20, 21, 22, 23, 30, 31],
        ]
    }

    fn rank_oracle(blocks: &[Vec<u64>], x: usize) -> Vec<usize> {
        let mut all: Vec<u64> = blocks.concat();
        all.sort_unstable();
        let below: Vec<u64> = all[..x].to_vec();
        blocks.iter().map(|b| b.iter().filter(|v| below.contains(v)).count()).collect()
    }

    #[test]
    fn toy_split() {
        let blocks = toy_blocks();
        let slices: Vec<&[u64]> = blocks.iter().map(Vec::as_slice).collect();
        assert_eq!(x_split(&slices, 0, &ord).unwrap(), vec![0; 4]);
        assert_eq!(x_split(&slices, 32, &ord).unwrap(), vec![8; 4]);
        assert!(x_split(&slices, 33, &ord).is_err());
        let s8 = x_split(&slices, 8, &ord).unwrap();
        assert_eq!(s8, rank_oracle(&blocks, 8));
        assert_eq!(s8, vec![1, 3, 2, 2]);
        let data: Vec<u64> = blocks.concat();
        let ranges = tile(0..32, 4);
        let split = perfect_partition(&data, &ranges, 4, &ord);
        // second sorted block contributes nothing to the second column
        assert!(split.column(1, 1).is_empty());
        for j in 0..4 {
            assert_eq!(split.column_len(j), 8);
        }
    }

    #[test]
    fn toy_end_to_end() {
        let mut data: Vec<u64> = toy_blocks().concat();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in (1..data.len()).rev() {
            data.swap(i, rng.gen_range(0..=i));
        }
        let params = SortParams { n: 32, p: 4, elem_bytes: 1, cache_bytes: 2, t_override: None };
        let out = row_column_sort(&mut data, &params, &ord).unwrap();
        assert_eq!(data, (0..32).collect::<Vec<_>>());
        assert_eq!(out.t, 1);
        assert_eq!(out.final_blocks, vec![0..8, 8..16, 16..24, 24..32]);
    }

    #[test]
    fn x_split_with_duplicates_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let blocks: Vec<Vec<u64>> = (0..rng.gen_range(1..7))
                .map(|_| {
                    let mut v: Vec<u64> = (0..rng.gen_range(0..30)).map(|_| rng.gen_range(0..6)).collect();
                    v.sort_unstable();
                    v
                })
                .collect();
            let slices: Vec<&[u64]> = blocks.iter().map(Vec::as_slice).collect();
            let n: usize = blocks.iter().map(Vec::len).sum();
            let x = rng.gen_range(0..=n);
            let cut = x_split(&slices, x, &ord).unwrap();
            assert_eq!(cut.iter().sum::<usize>(), x);
            let lmax = blocks.iter().zip(&cut).filter(|(_, &c)| c > 0).map(|(b, &c)| b[c - 1]).max();
            let hmin = blocks.iter().zip(&cut).filter(|(b, &c)| c < b.len()).map(|(b, &c)| b[c]).min();
            if let (Some(l), Some(h)) = (lmax, hmin) {
                assert!(l <= h);
            }
        }
    }

    #[test]
    fn final_merge_comparison_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tp = 12usize;
        let runs: Vec<Vec<u64>> = (0..tp)
            .map(|_| {
                let mut v: Vec<u64> = (0..500).map(|_| rng.gen()).collect();
                v.sort_unstable();
                v
            })
            .collect();
        let slices: Vec<&[u64]> = runs.iter().map(Vec::as_slice).collect();
        let calls = AtomicUsize::new(0);
        let counting = |a: &u64, b: &u64| {
            calls.fetch_add(1, AtomicOrdering::Relaxed);
            a.cmp(b)
        };
        let mut out = vec![0u64; tp * 500];
        LoserTree::new(&slices, &counting).drain_into(&mut out);
        let per = calls.load(AtomicOrdering::Relaxed) as f64 / out.len() as f64;
        let bound = (tp as f64).log2().ceil() + 1.0;
        assert!(per <= bound, "{per} > {bound}");
    }

    #[test]
    fn word_counter_sums_across_threads() {
        let wc = WordCounter::new();
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for _ in 0..1000 {
                        wc.record(3);
                    }
                });
            }
        });
        assert_eq!(wc.compares(), 4000);
        assert_eq!(wc.words(), 12000);
        assert_eq!(wc.average(), 3.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sort_matches_reference(
            v in proptest::collection::vec(0u64..200, 0..3000),
            p in 1usize..6,
            t in 1usize..4,
            cache in 1usize..400,
        ) {
            let mut a = v.clone();
            let params = SortParams { n: a.len(), p, elem_bytes: 8, cache_bytes: cache, t_override: Some(t) };
            let out = row_column_sort(&mut a, &params, &ord).unwrap();
            let mut oracle = v;
            oracle.sort_unstable();
            prop_assert_eq!(&a, &oracle);
            let ranks = column_ranks(a.len(), p);
            for j in 0..p {
                prop_assert_eq!(out.split.column_len(j), ranks[j + 1] - ranks[j]);
            }
        }
    }
}
