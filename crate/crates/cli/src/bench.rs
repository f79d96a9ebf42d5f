use std::io::Write;
use std::path::Path;
use std::time::Instant;

use pkm::memory::{combine_topk, half_topk, Distance};
use pkm::metrics::OpCounts;
use pkm::numerics::{DenseMatrix, Rng};
use pkm::oracle::naive_topk;
use pkm::{PkmError, Result};

pub const HEADER: &str = "size,n1,n2,k,two_stage_ops,naive_ops,two_stage_ns_per_query,naive_ns_per_query";

/// Parses `4096` (a perfect square) or `64x64`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || PkmError::Config(format!("bad size {s:?}: expected a perfect square or n1xn2"));
    let s = s.trim();
    if let Some((a, b)) = s.split_once(['x', 'X']) {
        let n1 = a.trim().parse().map_err(|_| bad())?;
        let n2 = b.trim().parse().map_err(|_| bad())?;
        if n1 == 0 || n2 == 0 {
            return Err(bad());
        }
        return Ok((n1, n2));
    }
    let n: usize = s.parse().map_err(|_| bad())?;
    let r = (n as f64).sqrt().round() as usize;
    if n == 0 || r * r != n {
        return Err(bad());
    }
    Ok((r, r))
}

fn random(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect()).expect("sized")
}

pub fn run(
    sizes: &[String],
    k: usize,
    repeats: usize,
    half_dim: usize,
    queries: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    if k == 0 || half_dim == 0 || queries == 0 {
        return Err(PkmError::Config("k, half_dim and queries must be >= 1".into()));
    }
    let parsed = sizes.iter().map(|s| parse_size(s)).collect::<Result<Vec<_>>>()?;
    let mut lines = vec![HEADER.to_string()];
    for (n1, n2) in parsed {
        if k > n1.min(n2) {
            return Err(PkmError::Config(format!("k = {k} exceeds min(n1, n2) for {n1}x{n2}")));
        }
        let mut rng = Rng::with_stream(seed, (n1 * n2) as u64);
        let k1 = random(n1, half_dim, &mut rng);
        let k2 = random(n2, half_dim, &mut rng);
        let qs = random(queries, 2 * half_dim, &mut rng);

        let mut ops = OpCounts::default();
        let mut naive_ops = 0u64;
        for q in 0..queries {
            let (a, b) = qs.row(q).split_at(half_dim);
            let t1 = half_topk(a, &k1, k, Distance::Dot, &mut ops);
            let t2 = half_topk(b, &k2, k, Distance::Dot, &mut ops);
            combine_topk(&t1, &t2, n2, k, &mut ops);
            naive_ops += naive_topk(a, b, &k1, &k2, k, Distance::Dot).scores_evaluated;
        }

        let time = |f: &mut dyn FnMut()| {
            let mut best = f64::INFINITY;
            for _ in 0..repeats.max(1) {
                let t = Instant::now();
                f();
                best = best.min(t.elapsed().as_nanos() as f64 / queries as f64);
            }
            best
        };
        let two_ns = time(&mut || {
            let mut o = OpCounts::default();
            for q in 0..queries {
                let (a, b) = qs.row(q).split_at(half_dim);
                let t1 = half_topk(a, &k1, k, Distance::Dot, &mut o);
                let t2 = half_topk(b, &k2, k, Distance::Dot, &mut o);
                std::hint::black_box(combine_topk(&t1, &t2, n2, k, &mut o));
            }
        });
        let naive_ns = time(&mut || {
            for q in 0..queries {
                let (a, b) = qs.row(q).split_at(half_dim);
                std::hint::black_box(naive_topk(a, b, &k1, &k2, k, Distance::Dot));
            }
        });
        lines.push(format!(
            "{},{n1},{n2},{k},{},{},{two_ns:.0},{naive_ns:.0}",
            n1 * n2,
            ops.score_evals / queries as u64,
            naive_ops / queries as u64
        ));
    }
    let text = lines.join("\n") + "\n";
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}
