//! Forward-diffusion comparison and noise-bank size ablation drivers, with
//! CSV and bare-bones SVG output.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::bank::NoiseBank;
use crate::controller::{evaluate_checkpoint, run_training, validation_items, TrainingConfig};
use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::{normalized_mutual_information, psnr, DEFAULT_PEAK, NMI_BINS};
use crate::rng;
use crate::semantics::Scene;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdRow {
    pub t: usize,
    pub psnr_fd: f64,
    pub psnr_nrfd: f64,
    pub nmi_fd: f64,
    pub nmi_nrfd: f64,
}

/// Steps `stride, 2·stride, …` up to `T`.
pub fn sampled_steps(steps: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || stride > steps {
        return Err(Error::config(format!("stride must be in 1..={steps}, got {stride}")));
    }
    Ok((1..=steps / stride).map(|k| k * stride).collect())
}

/// Mean PSNR and NMI of `x_t` against `x0` at each sampled step, with the
/// two noises for image `j` at step `t` supplied by `noises(j, t)` as
/// `(fresh, bank)`.
pub fn fd_comparison_with<F>(
    x0s: &[Tensor],
    schedule: &NoiseSchedule,
    stride: usize,
    noises: F,
) -> Result<Vec<FdRow>>
where
    F: Fn(usize, usize) -> Result<(Tensor, Tensor)> + Sync,
{
    if x0s.is_empty() {
        return Err(Error::config("comparison needs at least one image"));
    }
    let n = x0s.len() as f64;
    sampled_steps(schedule.steps(), stride)?
        .into_iter()
        .map(|t| {
            let per_image: Vec<[f64; 4]> = x0s
                .par_iter()
                .enumerate()
                .map(|(j, x0)| {
                    let (fresh, banked) = noises(j, t)?;
                    let a = forward_diffuse(x0, t, &fresh, schedule)?;
                    let b = forward_diffuse(x0, t, &banked, schedule)?;
                    Ok([
                        psnr(x0, &a, DEFAULT_PEAK)?,
                        psnr(x0, &b, DEFAULT_PEAK)?,
                        normalized_mutual_information(x0, &a, NMI_BINS)?,
                        normalized_mutual_information(x0, &b, NMI_BINS)?,
                    ])
                })
                .collect::<Result<_>>()?;
            let mean = |k: usize| per_image.iter().map(|v| v[k]).sum::<f64>() / n;
            Ok(FdRow {
                t,
                psnr_fd: mean(0),
                psnr_nrfd: mean(1),
                nmi_fd: mean(2),
                nmi_nrfd: mean(3),
            })
        })
        .collect()
}

/// Plain diffusion with fresh Gaussian noise versus noise-restricted
/// diffusion with a uniformly drawn bank vector.
pub fn fd_comparison(
    x0s: &[Tensor],
    bank: &NoiseBank,
    schedule: &NoiseSchedule,
    stride: usize,
    seed: u64,
) -> Result<Vec<FdRow>> {
    let steps = schedule.steps() as u64;
    fd_comparison_with(x0s, schedule, stride, |j, t| {
        let mut r = rng::seeded(rng::derive_seed(
            seed,
            rng::stream::EXPERIMENT,
            j as u64 * steps + t as u64,
        ));
        let fresh = Tensor::randn(bank.shape(), &mut r);
        let banked = bank.tensor(r.gen_range(0..bank.len()))?;
        Ok((fresh, banked))
    })
}

pub fn fd_csv(rows: &[FdRow]) -> String {
    let mut s = String::from("t,psnr_fd,psnr_nrfd,nmi_fd,nmi_nrfd\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.t, r.psnr_fd, r.psnr_nrfd, r.nmi_fd, r.nmi_nrfd);
    }
    s
}

pub fn fd_svg(rows: &[FdRow]) -> String {
    let pts = |f: fn(&FdRow) -> f64| rows.iter().map(|r| (r.t as f64, f(r))).collect::<Vec<_>>();
    line_plot(
        "PSNR of x_t against x_0",
        "t",
        "dB",
        &[
            ("plain", pts(|r| r.psnr_fd)),
            ("bank-restricted", pts(|r| r.psnr_nrfd)),
        ],
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub nb_size: usize,
    pub seed: u64,
    pub final_proxy: f64,
    pub steps_run: u64,
}

/// Trains one model per `(size, seed)` under the same budget and reports
/// the final validation proxy.
pub fn nb_size_ablation(
    sizes: &[usize],
    seeds: &[u64],
    base: &TrainingConfig,
    train: &[Scene],
    validation: &[Scene],
) -> Result<Vec<AblationRow>> {
    if sizes.is_empty() || seeds.is_empty() {
        return Err(Error::config("ablation needs at least one size and one seed"));
    }
    let items = validation_items(
        validation.get(..base.validation_size).ok_or_else(|| {
            Error::config(format!("need {} validation scenes", base.validation_size))
        })?,
        base.edge_threshold,
    )?;
    let mut rows = Vec::with_capacity(sizes.len() * seeds.len());
    for &nb_size in sizes {
        for &seed in seeds {
            let config = TrainingConfig {
                bank_size: nb_size,
                seed,
                ..base.clone()
            };
            let out = run_training(train, validation, &config, None)?;
            let final_proxy = evaluate_checkpoint(
                &out.model,
                &out.bank,
                out.model.schedule(),
                &items,
                rng::derive_seed(seed, rng::stream::VALIDATION, 1),
            )?;
            log::info!("nb_size {nb_size} seed {seed}: proxy {final_proxy:.4}");
            rows.push(AblationRow {
                nb_size,
                seed,
                final_proxy,
                steps_run: out.log.steps(),
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("nb_size,seed,final_proxy,steps_run\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.nb_size, r.seed, r.final_proxy, r.steps_run);
    }
    s
}

pub fn ablation_svg(rows: &[AblationRow]) -> String {
    let pts = rows
        .iter()
        .map(|r| ((r.nb_size as f64).log10(), r.final_proxy))
        .collect();
    line_plot("Final proxy by bank size", "log10 N", "proxy", &[("proxy", pts)])
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Minimal SVG line chart with linear axes.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, w / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#, h / 2.0, h / 2.0, escape(y_label));
    for (v, anchor, x, y) in [
        (x0, "start", m, h - m + 14.0),
        (x1, "end", w - m, h - m + 14.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.3}</text>"#);
    }
    for (v, y) in [(y0, h - m), (y1, m)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, m - 4.0, y + 4.0);
    }
    for (k, (name, pts)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| format!("{}{:.2} {:.2}", if i == 0 { 'M' } else { 'L' }, sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#, d.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            w - m - 100.0,
            m + 14.0 * (k as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::build_bank;
    use crate::diffusion::ScheduleKind;
    use crate::tensor::Shape;

    #[test]
    fn step_sampling() {
        assert_eq!(sampled_steps(100, 10).unwrap().len(), 10);
        assert_eq!(sampled_steps(10, 3).unwrap(), vec![3, 6, 9]);
        assert!(sampled_steps(10, 0).is_err());
    }

    #[test]
    fn forced_equal_noise_gives_equal_columns() {
        let shape = Shape::new(3, 8, 8);
        let bank = build_bank(1, 4, shape).unwrap();
        let schedule = NoiseSchedule::new(20, ScheduleKind::Linear, 1e-3, 0.2).unwrap();
        let mut r = rng::seeded(0);
        let x0s: Vec<Tensor> = (0..3).map(|_| Tensor::randn(shape, &mut r).clamp(-1.0, 1.0)).collect();
        let rows = fd_comparison_with(&x0s, &schedule, 5, |j, _| {
            let v = bank.tensor(j % 4)?;
            Ok((v.clone(), v))
        })
        .unwrap();
        assert_eq!(rows.len(), 4);
        for row in rows {
            assert_eq!(row.psnr_fd, row.psnr_nrfd);
            assert_eq!(row.nmi_fd, row.nmi_nrfd);
        }
    }

    #[test]
    fn csv_and_svg_render() {
        let rows = vec![FdRow {
            t: 10,
            psnr_fd: 12.0,
            psnr_nrfd: 12.5,
            nmi_fd: 0.3,
            nmi_nrfd: 0.31,
        }];
        assert_eq!(fd_csv(&rows), "t,psnr_fd,psnr_nrfd,nmi_fd,nmi_nrfd\n10,12,12.5,0.3,0.31\n");
        let svg = fd_svg(&rows);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        let a = vec![AblationRow {
            nb_size: 10,
            seed: 1,
            final_proxy: 0.5,
            steps_run: 20,
        }];
        assert_eq!(ablation_csv(&a), "nb_size,seed,final_proxy,steps_run\n10,1,0.5,20\n");
        assert!(ablation_svg(&a).contains("<path"));
    }
}
