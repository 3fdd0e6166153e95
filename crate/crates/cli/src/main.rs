mod bench;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dslice_core::datagen::{compute_stats, measure_word_comparisons, zipf_generate, ZipfSpec};
use dslice_core::indextree::{BuildConfig, IndexTree};
use dslice_core::metadata::DsMetadata;
use dslice_core::rebuild::{reconstruct_compressed, reconstruct_full, RebuildOptions, RebuildReport};
use dslice_core::table::{load, Table};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "dslice", version, about = "Distinction-bit key compression for index rebuilds")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a Zipf(s,n,m) dataset.
    Gen(GenArgs),
    /// Key statistics: compression, sort key sizes, word comparisons.
    Stats {
        dataset: PathBuf,
        /// Skip the two instrumented sorts behind the word comparison ratio.
        #[arg(long)]
        no_wcc: bool,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// First build from full keys; optionally persists the metadata.
    Build {
        dataset: PathBuf,
        #[command(flatten)]
        opts: TreeArgs,
        #[arg(long)]
        meta_out: Option<PathBuf>,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Rebuild from compressed keys using saved metadata.
    Rebuild {
        dataset: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[command(flatten)]
        opts: TreeArgs,
        /// Where to write the refreshed metadata.
        #[arg(long)]
        meta_out: Option<PathBuf>,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
    /// Full-key vs compressed-key rebuild over a sweep of thread counts.
    Bench(bench::BenchArgs),
    /// Run the invariant checks against a dataset and, optionally, metadata.
    Verify(verify::VerifyArgs),
    /// Metadata files.
    Meta {
        #[command(subcommand)]
        cmd: MetaCmd,
    },
}

#[derive(Subcommand)]
enum MetaCmd {
    /// Print a metadata file.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        json_out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenArgs {
    /// Zipf exponent.
    #[arg(long)]
    s: f64,
    /// Key length in bytes, a multiple of 8.
    #[arg(long, value_parser = parse_key_len)]
    n: usize,
    /// Fixed bytes at the start of every 8-byte word.
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..8))]
    m: u8,
    #[arg(long)]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_key_len(s: &str) -> Result<usize, String> {
    let n: usize = s.parse().map_err(|e| format!("{e}"))?;
    if n == 0 || n % 8 != 0 {
        return Err(format!("{n} is not a positive multiple of 8"));
    }
    Ok(n)
}

#[derive(Args, Clone, Copy)]
pub struct TreeArgs {
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Bulk-load fill factor.
    #[arg(long, default_value_t = 0.9)]
    pub fill: f64,
    /// Partial key bits per entry.
    #[arg(long, default_value_t = 32)]
    pub pk: u32,
    /// Skip the structural check of the finished tree.
    #[arg(long)]
    pub no_check: bool,
}

impl TreeArgs {
    pub fn options(&self, threads: usize) -> Result<RebuildOptions> {
        let build = BuildConfig { fill: self.fill, pk_bits: self.pk };
        build.validate()?;
        Ok(RebuildOptions { threads, build, ..Default::default() })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// `Ok(false)` when a check failed.
fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Gen(a) => {
            let spec = ZipfSpec { s: a.s, n: a.n, m: a.m as usize, count: a.count, seed: a.seed };
            zipf_generate(&spec, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
            println!("wrote {} keys of {} bytes to {}", a.count, a.n, a.out.display());
            Ok(true)
        }
        Cmd::Stats { dataset, no_wcc, json_out } => stats(&dataset, no_wcc, json_out.as_deref()),
        Cmd::Build { dataset, opts, meta_out, json_out } => {
            let t = load_table(&dataset)?;
            let r = reconstruct_full(&t, &opts.options(opts.threads)?, None)?;
            if let Some(p) = &meta_out {
                r.meta.save(p).with_context(|| format!("writing {}", p.display()))?;
            }
            finish_build(&t, &r.tree, &r.report, &opts, json_out.as_deref())
        }
        Cmd::Rebuild { dataset, meta, opts, meta_out, json_out } => {
            let t = load_table(&dataset)?;
            let m = DsMetadata::load_for(&meta, t.key_bits()).with_context(|| format!("reading {}", meta.display()))?;
            let r = reconstruct_compressed(&t, &m, &opts.options(opts.threads)?, None)?;
            if let Some(p) = &meta_out {
                r.meta.save(p).with_context(|| format!("writing {}", p.display()))?;
            }
            finish_build(&t, &r.tree, &r.report, &opts, json_out.as_deref())
        }
        Cmd::Bench(a) => bench::run(&a),
        Cmd::Verify(a) => verify::run(&a),
        Cmd::Meta { cmd: MetaCmd::Inspect { path, json_out } } => {
            let m = DsMetadata::load(&path).with_context(|| format!("reading {}", path.display()))?;
            print!("{}", m.pretty());
            if let Some(p) = json_out {
                write_json(
                    &p,
                    &serde_json::json!({
                        "schema_version": SCHEMA_VERSION,
                        "command": "meta inspect",
                        "key_bits": m.key_bits(),
                        "dbits": m.dbitmap().iter_ones().collect::<Vec<_>>(),
                        "variant": m.variant().iter_ones().collect::<Vec<_>>(),
                        "reference": hex(m.reference().as_bytes()),
                        "rid_mask": m.rid_mask(),
                    }),
                )?;
            }
            Ok(true)
        }
    }
}

pub fn load_table(path: &Path) -> Result<Table> {
    load(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    std::fs::write(path, s + "\n").with_context(|| format!("writing {}", path.display()))
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn stats(dataset: &Path, no_wcc: bool, json_out: Option<&Path>) -> Result<bool> {
    let t = load_table(dataset)?;
    let opts = RebuildOptions::default();
    let (meta, wcc) = if no_wcc {
        (reconstruct_full(&t, &opts, None)?.meta, None)
    } else {
        let (f, c, meta) = measure_word_comparisons(&t, &opts)?;
        (meta, Some((f, c)))
    };
    let st = compute_stats(&t, &meta, wcc);
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    let rows = [
        ("keys", st.keys.to_string()),
        ("key length min/avg/max", format!("{} / {:.1} / {}", st.min_len, st.avg_len, st.max_len)),
        ("full key bits", st.full_key_bits.to_string()),
        ("distinction bits", st.distinction_bits.to_string()),
        ("record ID variant bits", st.rid_variant_bits.to_string()),
        ("compression ratio", format!("{:.2}", st.compression_ratio)),
        ("full sort key (B)", st.full_sort_key_bytes.to_string()),
        ("compressed sort key (B)", st.compressed_sort_key_bytes.to_string()),
        ("sort key ratio", format!("{:.2}", st.sort_key_ratio)),
        ("words per comparison, full", opt(st.wcc_full)),
        ("words per comparison, compressed", opt(st.wcc_comp)),
        ("word comparison ratio", opt(st.word_comparison_ratio)),
    ];
    for (k, v) in rows {
        println!("{k:<34}{v:>16}");
    }
    if let Some(p) = json_out {
        write_json(p, &serde_json::json!({ "schema_version": SCHEMA_VERSION, "command": "stats", "stats": st }))?;
    }
    Ok(true)
}

fn finish_build(t: &Table, tree: &IndexTree, report: &RebuildReport, opts: &TreeArgs, json_out: Option<&Path>) -> Result<bool> {
    let errors = if opts.no_check { Vec::new() } else { tree.verify(t) };
    println!(
        "{} rebuild: {} keys, {} threads, sort key {} B",
        report.method.name(),
        report.keys,
        report.threads,
        report.sort_key_bytes
    );
    println!(
        "  extract {:.3}s  sort {:.3}s  build {:.3}s  meta {:.3}s  total {:.3}s",
        report.extract_secs, report.sort_secs, report.build_secs, report.meta_secs, report.total_secs
    );
    println!(
        "  tree: height {}, {} leaves, {} inner nodes, {} bytes",
        tree.height(),
        tree.leaf_count(),
        tree.inner_count(),
        tree.node_bytes()
    );
    for e in errors.iter().take(20) {
        println!("  FAIL {e}");
    }
    if !opts.no_check {
        println!("  structure check: {}", if errors.is_empty() { "PASS" } else { "FAIL" });
    }
    if let Some(p) = json_out {
        write_json(
            p,
            &serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "command": report.method.name(),
                "report": report,
                "tree": {
                    "height": tree.height(),
                    "leaves": tree.leaf_count(),
                    "inner_nodes": tree.inner_count(),
                    "bytes": tree.node_bytes(),
                },
                "structure_errors": errors,
            }),
        )?;
    }
    Ok(errors.is_empty())
}
