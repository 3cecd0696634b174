use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use bsmm::blockcsr::{serial_spgemm_oracle, BlockCsrMatrix, FilterConfig};
use bsmm::costmodel::{buffer_count, comm_volume, model_csv, model_table, PanelSizes};
use bsmm::exec::{split_images, BufferLedger, MultiplyOutcome};
use bsmm::gridplan::{
    build_schedule, make_distribution, partition, validate_l, verify_coverage, DimDistribution,
    DistributedMatrix, Distribution, ProcessGrid, Topology, TopologyError,
};
use bsmm::multiply_ptp::cannon_multiply_on;
use bsmm::multiply_rma::rma_multiply_on;
use bsmm::signdriver::{
    involution_residual, sign_iterate_on, spectral_scale, Engine, SignRunConfig, SignStep,
};
use bsmm::synth::{generate as synthesize, BenchmarkProfile, Pattern};
use bsmm::transport::{trace_csv, CommStats, Runtime, TransportConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{
    Alg, EngineArgs, GenerateArgs, GridSpec, ModelArgs, MultiplyArgs, ProfileArgs, ProfileName,
    ScheduleArgs, SignArgs,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn config_hash<T: Serialize>(args: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(args)?))
}

fn bcsr1_bytes(m: &BlockCsrMatrix) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    m.write_bcsr1(&mut buf)?;
    Ok(buf)
}

fn checksum(m: &BlockCsrMatrix) -> Result<String> {
    Ok(sha256_hex(&bcsr1_bytes(m)?))
}

fn read_matrix(path: &Path) -> Result<BlockCsrMatrix> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    BlockCsrMatrix::read_bcsr1(BufReader::new(f))
        .with_context(|| format!("reading {}", path.display()))
}

fn write_matrix(path: &Path, m: &BlockCsrMatrix) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    m.write_bcsr1(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn profile(args: &ProfileArgs, seed: u64) -> BenchmarkProfile {
    let name = match args.profile {
        ProfileName::H2o => "h2o",
        ProfileName::Se => "se",
        ProfileName::Dense => "dense",
    };
    let mut p = BenchmarkProfile::by_name(name, args.blocks, seed).expect("known profile");
    if let Some(bs) = args.block_size {
        p.block_size = bs;
    }
    if let Some(pat) = args.pattern {
        p.pattern = pat.into();
    }
    if let Some(o) = args.occupancy {
        p.target_occupancy = o;
    }
    if p.pattern == Pattern::Dense {
        p.target_occupancy = 1.0;
    }
    p
}

fn grid(g: GridSpec) -> Result<ProcessGrid> {
    Ok(ProcessGrid::new(g.rows, g.cols)?)
}

fn filter(e: &EngineArgs) -> Result<FilterConfig> {
    Ok(FilterConfig::new(
        e.threshold,
        !e.no_on_the_fly,
        !e.no_post_filter,
    )?)
}

fn warn_fallback(f: &Option<TopologyError>, requested: usize) {
    if let Some(e) = f {
        eprintln!("warning: L = {requested} rejected ({e}); ran with L = 1");
    }
}

pub fn generate(args: &GenerateArgs) -> Result<bool> {
    let p = profile(&args.profile, args.seed);
    let m = synthesize(&p)?;
    write_matrix(&args.out, &m)?;
    println!(
        "{}: {} block rows of {}, {} blocks, occupancy {:.6}, checksum {}",
        p.name,
        p.n_block_rows,
        p.block_size,
        m.n_blocks(),
        m.occupancy(),
        checksum(&m)?
    );
    Ok(true)
}

/// Mean transfer sizes of the images every rank publishes, and of the C panels.
fn mean_sizes(
    a: &DistributedMatrix,
    b: &DistributedMatrix,
    c: &DistributedMatrix,
) -> Result<PanelSizes> {
    let g = a.grid();
    let v = g.v();
    let (sc, sr) = (v / g.p_cols(), v / g.p_rows());
    let (mut sa, mut na, mut sb, mut nb) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..g.p_rows() {
        for j in 0..g.p_cols() {
            for img in split_images(a.panel(i, j), a.distribution().cols(), true, j * sc, sc) {
                sa += img.wire_payload_bytes();
                na += 1;
            }
            for img in split_images(b.panel(i, j), b.distribution().rows(), false, i * sr, sr) {
                sb += img.wire_payload_bytes();
                nb += 1;
            }
        }
    }
    let s_c = c
        .panels()
        .iter()
        .map(|p| p.wire_payload_bytes())
        .sum::<usize>() as f64
        / g.size() as f64;
    Ok(PanelSizes::new(
        sa as f64 / na as f64,
        sb as f64 / nb as f64,
        s_c,
    )?)
}

#[derive(Debug, Serialize)]
struct MatrixSummary {
    block_rows: usize,
    block_cols: usize,
    blocks: usize,
    occupancy: f64,
    checksum: String,
}

impl MatrixSummary {
    fn of(m: &BlockCsrMatrix) -> Result<Self> {
        Ok(Self {
            block_rows: m.layout().n_block_rows(),
            block_cols: m.layout().n_block_cols(),
            blocks: m.n_blocks(),
            occupancy: m.occupancy(),
            checksum: checksum(m)?,
        })
    }
}

#[derive(Debug, Serialize)]
struct ModelComparison {
    sizes: PanelSizes,
    model_bytes_per_rank: f64,
    measured_bytes_per_rank: f64,
    delta_bytes: f64,
    relative_delta: f64,
}

#[derive(Debug, Serialize)]
struct Seeds {
    seed: u64,
    a: Option<u64>,
    b: Option<u64>,
    distribution: u64,
}

#[derive(Debug, Serialize)]
struct MultiplyReport<'a> {
    version: &'static str,
    config_hash: String,
    config: &'a MultiplyArgs,
    seeds: Seeds,
    topology: &'a Topology,
    fallback: &'a Option<TopologyError>,
    a: MatrixSummary,
    b: MatrixSummary,
    result: MatrixSummary,
    oracle_checksum: String,
    oracle_residual: f64,
    residual_ok: bool,
    pairs_multiplied: u64,
    pairs_skipped: u64,
    comm_total: CommStats,
    comm_per_rank: &'a [CommStats],
    buffers: &'a [BufferLedger],
    expected_buffers: Option<usize>,
    model: ModelComparison,
    epoch: u64,
    window_reallocations: u64,
}

fn distribute_operands(
    a: &BlockCsrMatrix,
    b: &BlockCsrMatrix,
    g: ProcessGrid,
    seed: u64,
) -> Result<(DistributedMatrix, DistributedMatrix, DistributedMatrix)> {
    ensure!(
        a.layout().col_block_sizes() == b.layout().row_block_sizes(),
        "inner block sizes of A and B differ"
    );
    let da = Arc::new(make_distribution(a.layout(), g, seed)?);
    let b_cols = if b.layout() == a.layout() {
        da.cols().clone()
    } else {
        Arc::new(DimDistribution::new(
            b.layout().n_block_cols(),
            g.v(),
            seed.wrapping_add(1),
        ))
    };
    let db = Arc::new(Distribution::new(g, da.cols().clone(), b_cols.clone()));
    let dc = Arc::new(Distribution::new(g, da.rows().clone(), b_cols));
    let clayout = Arc::new(a.layout().product(b.layout())?);
    Ok((
        partition(a, da)?,
        partition(b, db)?,
        DistributedMatrix::zeros(dc, clayout)?,
    ))
}

fn run_engine(
    rt: &Runtime,
    e: &EngineArgs,
    a: &DistributedMatrix,
    b: &DistributedMatrix,
    c: &DistributedMatrix,
    cfg: &FilterConfig,
) -> Result<MultiplyOutcome> {
    Ok(match e.alg {
        Alg::Ptp => {
            if e.l != 1 {
                eprintln!("warning: --L {} ignored by the point-to-point engine", e.l);
            }
            cannon_multiply_on(rt, a, b, c, cfg)?
        }
        Alg::Rma => rma_multiply_on(rt, a, b, c, cfg, e.l)?,
    })
}

pub fn multiply(args: &MultiplyArgs) -> Result<bool> {
    let seed = args.seed;
    let (a_seed, b_seed) = (seed, seed.wrapping_add(1));
    let (a, a_gen) = match &args.a {
        Some(p) => (read_matrix(p)?, None),
        None => (synthesize(&profile(&args.profile, a_seed))?, Some(a_seed)),
    };
    let (b, b_gen) = match (&args.b, &args.a) {
        (Some(p), _) => (read_matrix(p)?, None),
        (None, Some(_)) => (a.clone(), None),
        (None, None) => (synthesize(&profile(&args.profile, b_seed))?, Some(b_seed)),
    };
    let g = grid(args.engine.grid)?;
    let cfg = filter(&args.engine)?;
    let (da, db, dc) = distribute_operands(&a, &b, g, seed)?;

    let rt = Runtime::new(
        g,
        TransportConfig {
            trace: args.trace.is_some(),
            ..TransportConfig::default()
        },
    );
    let out = run_engine(&rt, &args.engine, &da, &db, &dc, &cfg)?;
    warn_fallback(&out.fallback, args.engine.l);

    let result = out.result.reassemble();
    let oracle = serial_spgemm_oracle(&a, &b, &cfg)?;
    let on = oracle.frobenius_norm();
    let diff = result.diff_frobenius(&oracle)?;
    let residual = if on > 0.0 { diff / on } else { diff };
    let residual_ok = residual.is_finite() && residual <= args.tol;

    let sizes = mean_sizes(&da, &db, &out.result)?;
    let total = out.total_stats();
    let nranks = g.size() as f64;
    let measured = (total.payload_a + total.payload_b + total.payload_c) as f64 / nranks;
    let model = comm_volume(&out.topology, &sizes);
    let delta = measured - model;

    let report = MultiplyReport {
        version: VERSION,
        config_hash: config_hash(args)?,
        config: args,
        seeds: Seeds {
            seed,
            a: a_gen,
            b: b_gen,
            distribution: seed,
        },
        topology: &out.topology,
        fallback: &out.fallback,
        a: MatrixSummary::of(&a)?,
        b: MatrixSummary::of(&b)?,
        result: MatrixSummary::of(&result)?,
        oracle_checksum: checksum(&oracle)?,
        oracle_residual: residual,
        residual_ok,
        pairs_multiplied: out.products.multiplied,
        pairs_skipped: out.products.skipped,
        comm_total: total.clone(),
        comm_per_rank: &out.stats,
        buffers: &out.buffers,
        expected_buffers: (args.engine.alg == Alg::Rma).then(|| buffer_count(&out.topology)),
        model: ModelComparison {
            sizes,
            model_bytes_per_rank: model,
            measured_bytes_per_rank: measured,
            delta_bytes: delta,
            relative_delta: if model > 0.0 { delta / model } else { delta },
        },
        epoch: out.epoch,
        window_reallocations: out.reallocations,
    };

    if let Some(p) = &args.trace {
        write_text(p, &trace_csv(&out.trace))?;
    }
    if let Some(p) = &args.report {
        write_json(p, &report)?;
    }
    if let Some(p) = &args.out {
        write_matrix(p, &result)?;
    }
    println!(
        "{:?} on {}x{} L={}: residual {:.3e} ({}), A+B+C bytes/rank {} vs model {:.1} (delta {:+.1}), checksum {}",
        args.engine.alg,
        g.p_rows(),
        g.p_cols(),
        out.topology.l(),
        residual,
        if residual_ok { "ok" } else { "FAILED" },
        measured,
        model,
        delta,
        report.result.checksum
    );
    Ok(residual_ok)
}

#[derive(Debug, Serialize)]
struct SignReportOut<'a> {
    version: &'static str,
    config_hash: String,
    config: &'a SignArgs,
    seed: u64,
    input: MatrixSummary,
    result: MatrixSummary,
    converged: bool,
    iterations: usize,
    multiplications: usize,
    involution_residual: f64,
    fallback: &'a Option<TopologyError>,
    steps: &'a [SignStep],
}

pub fn sign(args: &SignArgs) -> Result<bool> {
    let x = match &args.a {
        Some(p) => read_matrix(p)?,
        None => synthesize(&profile(&args.profile, args.seed))?,
    };
    let g = grid(args.engine.grid)?;
    let cfg = filter(&args.engine)?;
    let dist = Arc::new(make_distribution(x.layout(), g, args.seed)?);
    let mut dx = partition(&x, dist)?;
    if !args.no_scale {
        dx = spectral_scale(&dx)?;
    }
    let engine = match args.engine.alg {
        Alg::Ptp => Engine::Ptp,
        Alg::Rma => Engine::Rma { l: args.engine.l },
    };
    let run = SignRunConfig::new(args.max_iter, args.tol, cfg, engine)?;
    let rt = Runtime::new(g, TransportConfig::default());
    let (s, report) = sign_iterate_on(&rt, &dx, &run)?;
    warn_fallback(&report.fallback, args.engine.l);
    let residual = involution_residual(&rt, &s, &run)?;
    let result = s.reassemble();

    if let Some(p) = &args.csv {
        write_text(p, &report.to_csv())?;
    }
    if let Some(p) = &args.out {
        write_matrix(p, &result)?;
    }
    let out = SignReportOut {
        version: VERSION,
        config_hash: config_hash(args)?,
        config: args,
        seed: args.seed,
        input: MatrixSummary::of(&x)?,
        result: MatrixSummary::of(&result)?,
        converged: report.converged,
        iterations: report.steps.len(),
        multiplications: report.multiplications,
        involution_residual: residual,
        fallback: &report.fallback,
        steps: &report.steps,
    };
    if let Some(p) = &args.report {
        write_json(p, &out)?;
    }
    let last = report.steps.last().map_or(f64::NAN, |s| s.delta_norm);
    println!(
        "{} after {} iterations ({} multiplications): last increment {:.3e}, ||X^2 - I||/||I|| {:.3e}, occupancy {:.4}",
        if report.converged { "converged" } else { "NOT converged" },
        out.iterations,
        out.multiplications,
        last,
        residual,
        result.occupancy()
    );
    Ok(report.converged)
}

pub fn model(args: &ModelArgs) -> Result<bool> {
    let g = grid(args.grid)?;
    let mut ls = args.l.clone();
    ls.push(1);
    ls.sort_unstable();
    ls.dedup();
    let mut ok = true;
    for &l in &ls {
        if let Err(e) = validate_l(g.p_rows(), g.p_cols(), l) {
            eprintln!("warning: L = {l} skipped: {e}");
            ok = false;
        }
    }
    let sizes = match &args.sizes {
        Some(s) => match s[..] {
            [a, b, c] => PanelSizes::new(a, b, c)?,
            _ => bail!("--sizes takes exactly three values, got {}", s.len()),
        },
        None => {
            let bytes = (args.n * args.n * std::mem::size_of::<f64>()) as f64;
            let v = g.v() as f64;
            let (pr, pc) = (g.p_rows() as f64, g.p_cols() as f64);
            PanelSizes::new(bytes / (pr * v), bytes / (v * pc), bytes / (pr * pc))?
        }
    };
    let rows = model_table(&[g], &ls, &sizes);
    let csv = model_csv(&rows);
    match &args.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(base) = rows.iter().find(|r| r.l == 1) {
        for r in rows.iter().filter(|r| r.l > 1) {
            eprintln!(
                "ratio L=1 / L={}: {:.4}",
                r.l,
                base.comm_volume_bytes / r.comm_volume_bytes
            );
        }
    }
    Ok(ok)
}

pub fn schedule_dump(args: &ScheduleArgs) -> Result<bool> {
    let t = match validate_l(args.grid.rows, args.grid.cols, args.l) {
        Ok(t) => t,
        Err(e) => bail!("cannot build a schedule: {e}"),
    };
    let s = build_schedule(&t);
    let csv = s.to_csv();
    match &args.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    let violations = verify_coverage(&s);
    for v in &violations {
        eprintln!("coverage violation: {v:?}");
    }
    eprintln!(
        "{}x{} L={}: {} ranks, {} ticks, {} violations",
        t.p_rows(),
        t.p_cols(),
        t.l(),
        s.ranks.len(),
        t.n_ticks(),
        violations.len()
    );
    Ok(violations.is_empty())
}
