//! Ratio-allocation sweeps: one channel walks a grid while the remaining
//! budget is shared equally by the other two.

use std::path::Path;

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::experiment::{craft_with, evaluate_targets, target_eligibility, ExperimentInputs, ReportRow, REPORT_HEADER};
use super::MaskStrategy;
use crate::error::{Error, Result};
use crate::frequency::{CB, CR, Y};
use crate::tensor::{l2_per_sample, linf_per_sample};

/// Parses `y`, `cb` or `cr` into a channel index.
pub fn parse_channel(s: &str) -> Result<usize> {
    match s.to_ascii_lowercase().as_str() {
        "y" => Ok(Y),
        "cb" => Ok(CB),
        "cr" => Ok(CR),
        other => Err(Error::config(format!("unknown channel {other:?}; expected y, cb or cr"))),
    }
}

pub fn channel_name(c: usize) -> &'static str {
    ["y", "cb", "cr"].get(c).copied().unwrap_or("?")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub channel: usize,
    /// Ratio of the swept channel.
    pub r: f64,
    pub ratios: [f64; 3],
    pub feasible: bool,
}

/// `steps` evenly spaced values of the swept ratio over `[0, 1]`; the other
/// two channels each receive `(total − r) / 2`.
pub fn sweep_grid(channel: usize, steps: usize, total: f64) -> Result<Vec<SweepPoint>> {
    if channel > CR {
        return Err(Error::config(format!("channel index {channel} out of range")));
    }
    if steps < 2 {
        return Err(Error::config("a sweep needs at least two steps"));
    }
    Ok((0..steps)
        .map(|i| {
            let r = i as f64 / (steps - 1) as f64;
            let rest = (total - r) / 2.0;
            let mut ratios = [rest; 3];
            ratios[channel] = r;
            let feasible = ratios.iter().all(|v| (0.0..=1.0).contains(v));
            SweepPoint {
                channel,
                r,
                ratios,
                feasible,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: SweepPoint,
    /// `None` for infeasible grid points.
    pub row: Option<ReportRow>,
}

/// Runs the centralized attack at every feasible grid point for every
/// variant, T and seed of `cfg`, and evaluates all targets.
pub fn ratio_sweep(
    cfg: &ExperimentConfig,
    inputs: &ExperimentInputs,
    channel: usize,
    steps: usize,
    total: f64,
) -> Result<Vec<SweepRow>> {
    let cfg = ExperimentConfig {
        centralize: true,
        ..cfg.clone()
    };
    cfg.validate()?;
    let points = sweep_grid(channel, steps, total)?;
    let eligible = target_eligibility(&cfg, inputs)?;
    let n = inputs.data.len() as f64;

    let mut jobs = Vec::new();
    for (pi, p) in points.iter().enumerate() {
        if !p.feasible {
            continue;
        }
        for &v in &cfg.variants {
            for &t in &cfg.iters {
                for &s in &cfg.seeds {
                    jobs.push((pi, v, t, s));
                }
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|&(pi, variant, iters, seed)| {
            let quant = crate::quantization::QuantConfig {
                ratios: points[pi].ratios,
                ..cfg.quant.clone()
            };
            let x_adv = craft_with(&cfg, &quant, inputs, variant, iters, seed)?;
            let counts = evaluate_targets(&cfg, inputs, &eligible, &x_adv)?;
            let linf = linf_per_sample(&x_adv, &inputs.data.images).iter().sum::<f64>() / n;
            let l2 = l2_per_sample(&x_adv, &inputs.data.images).iter().sum::<f64>() / n;
            Ok((counts, linf, l2))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::new();
    let mut job = jobs.iter().zip(results).peekable();
    for (pi, p) in points.iter().enumerate() {
        if !p.feasible {
            out.push(SweepRow { point: *p, row: None });
            continue;
        }
        while let Some((&(_, variant, iters, seed), (counts, linf, l2))) = job.next_if(|(j, _)| j.0 == pi) {
            for (t, c) in inputs.targets.iter().zip(counts) {
                out.push(SweepRow {
                    point: *p,
                    row: Some(ReportRow {
                        experiment_id: format!("{}-sweep-{}{:.2}-{}-t{}-s{}", cfg.id, channel_name(channel), p.r, variant, iters, seed),
                        source: inputs.source.id.clone(),
                        target: t.id.clone(),
                        variant,
                        centralized: true,
                        strategy: MaskStrategy::Optimized,
                        defense: cfg.defense.to_string(),
                        iters,
                        seed,
                        ratios: p.ratios,
                        n_eligible: c.eligible,
                        n_fooled: c.fooled,
                        fooling_rate: c.rate(),
                        mean_linf: linf,
                        mean_l2: l2,
                    }),
                });
            }
        }
    }
    Ok(out)
}

pub fn sweep_bytes(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["channel", "grid_r", "status"];
    header.extend(REPORT_HEADER);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            channel_name(r.point.channel).to_string(),
            format!("{:.4}", r.point.r),
            if r.point.feasible { "ok" } else { "infeasible" }.to_string(),
        ];
        match &r.row {
            Some(row) => rec.extend(row.to_record()),
            None => {
                let mut blank = vec![String::new(); REPORT_HEADER.len()];
                for c in 0..3 {
                    blank[9 + c] = format!("{:.4}", r.point.ratios[c]);
                }
                rec.extend(blank);
            }
        }
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    std::fs::write(path, sweep_bytes(rows)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_grid_points() {
        let g = sweep_grid(Y, 11, 1.0).unwrap();
        assert_eq!(g.len(), 11);
        let p9 = g[9];
        assert!((p9.r - 0.9).abs() < 1e-12);
        assert!((p9.ratios[CB] - 0.05).abs() < 1e-12 && (p9.ratios[CR] - 0.05).abs() < 1e-12);
        assert_eq!(g[10].ratios, [1.0, 0.0, 0.0]);
        for p in &g {
            assert!(p.feasible);
            assert!((p.ratios.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_points_are_flagged() {
        // with a total of 2.5 the other channels exceed 1 when r is small
        let g = sweep_grid(CB, 3, 2.5).unwrap();
        assert!(!g[0].feasible);
        assert!(g[2].feasible);
        let rows: Vec<SweepRow> = g.iter().map(|p| SweepRow { point: *p, row: None }).collect();
        let text = String::from_utf8(sweep_bytes(&rows).unwrap()).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("cb,0.0000,infeasible,"));
    }

    #[test]
    fn channel_parsing() {
        assert_eq!(parse_channel("Cr").unwrap(), CR);
        assert!(parse_channel("u").is_err());
        assert!(sweep_grid(3, 11, 1.0).is_err());
        assert!(sweep_grid(Y, 1, 1.0).is_err());
    }
}
