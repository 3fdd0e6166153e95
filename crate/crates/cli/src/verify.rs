use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dslice_core::dbits::{adjacent_dbits, build_dbitmap, dbit_pair, ExtractPlan};
use dslice_core::keycodec::compare_keys;
use dslice_core::metadata::DsMetadata;
use dslice_core::rebuild::{reconstruct_compressed, reconstruct_full};
use dslice_core::table::Table;

use crate::bench::same_tree;
use crate::{load_table, write_json, TreeArgs, SCHEMA_VERSION};

#[derive(Args)]
pub struct VerifyArgs {
    dataset: PathBuf,
    /// Metadata to check; by default it is derived from a full-key build.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Subsets drawn per sample size for the distinction-bit theorems.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    tree: TreeArgs,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Check {
    name: &'static str,
    pass: bool,
    detail: String,
}

const SAMPLE_SIZES: [usize; 3] = [8, 64, 512];

pub fn run(a: &VerifyArgs) -> Result<bool> {
    let t = load_table(&a.dataset)?;
    let opts = a.tree.options(a.tree.threads)?;
    let mut checks = Vec::new();

    let full = reconstruct_full(&t, &opts, None)?;
    let errs = full.tree.verify(&t);
    let want_h = opts.build.height(t.len());
    checks.push(Check {
        name: "tree structure (full-key build)",
        pass: errs.is_empty() && full.tree.height() == want_h && full.tree.len() == t.len(),
        detail: format!(
            "height {} (closed form {want_h}), {} entries, {} violations{}",
            full.tree.height(),
            full.tree.len(),
            errs.len(),
            errs.first().map(|e| format!(", first: {e}")).unwrap_or_default()
        ),
    });

    let meta = match &a.meta {
        Some(p) => DsMetadata::load_for(p, t.key_bits()).with_context(|| format!("reading {}", p.display()))?,
        None => full.meta.clone(),
    };

    checks.push(sampled_theorems(&t, &meta, a.trials, a.seed));
    checks.push(order_sufficient(&t, &meta));

    let comp = reconstruct_compressed(&t, &meta, &opts, None)?;
    let errs = comp.tree.verify(&t);
    let same = same_tree(&full.tree, &comp.tree);
    checks.push(Check {
        name: "compressed rebuild equals full rebuild",
        pass: errs.is_empty() && same,
        detail: format!("scan-identical {same}, {} violations", errs.len()),
    });

    for c in &checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let ok = checks.iter().all(|c| c.pass);
    println!("{}", if ok { "all checks passed" } else { "checks failed" });
    if let Some(p) = &a.json_out {
        write_json(
            p,
            &serde_json::json!({ "schema_version": SCHEMA_VERSION, "command": "verify", "pass": ok, "checks": checks }),
        )?;
    }
    Ok(ok)
}

fn sorted_distinct(t: &Table, rids: impl Iterator<Item = u64>) -> Vec<Vec<u8>> {
    let mut keys: Vec<Vec<u8>> = rids.map(|r| t.key(r).into_bytes()).collect();
    keys.sort_by(|a, b| compare_keys(a, b).0);
    keys.dedup_by(|a, b| compare_keys(a, b).0 == Ordering::Equal);
    keys
}

/// On random subsets: the adjacent D-bits are all the pairwise D-bits, each
/// pair's D-bit is the minimum over the adjacent pairs between them, and the
/// subset's D-bits lie inside the dataset's D-bitmap.
fn sampled_theorems(t: &Table, meta: &DsMetadata, trials: usize, seed: u64) -> Check {
    let live: Vec<u64> = t.live_rids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut problems = Vec::new();
    let mut sets = 0;
    for &size in &SAMPLE_SIZES {
        let size = size.min(live.len());
        if size < 2 {
            continue;
        }
        for _ in 0..trials {
            let pick = sample(&mut rng, live.len(), size);
            let keys = sorted_distinct(t, pick.iter().map(|i| live[i]));
            sets += 1;
            let adj = adjacent_dbits(&keys).expect("sorted distinct keys");
            let mut all_pairs = BTreeSet::new();
            for i in 0..keys.len() {
                let mut lo = u32::MAX;
                for j in i + 1..keys.len() {
                    lo = lo.min(adj[j - 1]);
                    let d = dbit_pair(&keys[i], &keys[j]).expect("distinct keys");
                    if d != lo {
                        problems.push(format!("pair ({i},{j}) of a {size}-key sample: D-bit {d}, adjacent minimum {lo}"));
                    }
                    all_pairs.insert(d);
                }
            }
            if all_pairs != adj.iter().copied().collect() {
                problems.push(format!("{size}-key sample: pairwise D-bit set differs from the adjacent set"));
            }
            let bm = build_dbitmap(&keys, t.key_bits()).expect("sorted distinct keys");
            let missing: Vec<_> = bm.iter_ones().filter(|&p| !meta.dbitmap().get(p)).collect();
            if !missing.is_empty() {
                problems.push(format!("{size}-key sample: D-bits {missing:?} missing from the D-bitmap"));
            }
        }
    }
    Check {
        name: "distinction bit theorems on samples",
        pass: problems.is_empty(),
        detail: match problems.first() {
            None => format!("{sets} subsets of up to {} keys", SAMPLE_SIZES[SAMPLE_SIZES.len() - 1]),
            Some(p) => format!("{} problems in {sets} subsets, first: {p}", problems.len()),
        },
    }
}

/// Sorting keys sliced by the D-bitmap alone, record-ID bits appended,
/// yields the (key, record ID) order.
fn order_sufficient(t: &Table, meta: &DsMetadata) -> Check {
    let rid_mask = t.live_rids().fold(meta.rid_mask(), |a, r| a | r);
    let plan = ExtractPlan::new(meta.dbitmap(), rid_mask);
    let w = plan.words();
    let rids: Vec<u64> = t.live_rids().collect();
    let mut flat = vec![0u64; rids.len() * w];
    for (r, out) in rids.iter().zip(flat.chunks_exact_mut(w.max(1))) {
        plan.compress_words_into(t.key_words(*r), *r, out);
    }
    let mut order: Vec<usize> = (0..rids.len()).collect();
    order.sort_unstable_by(|&a, &b| flat[a * w..(a + 1) * w].cmp(&flat[b * w..(b + 1) * w]));
    let mut bad = 0usize;
    let mut first = None;
    for (i, pair) in order.windows(2).enumerate() {
        let (a, b) = (rids[pair[0]], rids[pair[1]]);
        let ok = match compare_keys(t.key(a).as_bytes(), t.key(b).as_bytes()).0 {
            Ordering::Less => true,
            Ordering::Equal => a < b,
            Ordering::Greater => false,
        };
        if !ok {
            bad += 1;
            first.get_or_insert(i);
        }
    }
    Check {
        name: "compressed keys determine the sorted order",
        pass: bad == 0,
        detail: match first {
            None => format!("{} keys, {} D-bits, {} record-ID bits", rids.len(), meta.dbitmap().count_ones(), plan.rid_bits()),
            Some(i) => format!("{bad} adjacent pairs out of order, first at sorted position {i}"),
        },
    }
}
