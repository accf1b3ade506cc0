//! Scatter-and-quiver plots of 2D transport maps as SVG, with the same
//! data as CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use pfgen::problems::{write_csv, ProblemSpec};
use pfgen::trainer::sub_seed;

use crate::error::{io, CliError};

pub struct PlotData {
    pub mu: Array2<f64>,
    pub nu: Array2<f64>,
    pub pushed: Array2<f64>,
    /// Rows `(x1, x2, y1, y2)` for the arrows `x -> G(x)`.
    pub arrows: Array2<f64>,
    /// Arrows of the analytic map from the same starting points.
    pub reference: Option<Array2<f64>>,
}

fn arrow_rows(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Array2<f64> {
    ndarray::concatenate![ndarray::Axis(1), x, y]
}

/// Samples `num_samples` points of each distribution and pushes the `mu`
/// samples through `map`; the first `num_arrows` of them get arrows.
pub fn plot_data<E: std::fmt::Display>(
    map: impl Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>, E>,
    problem: &ProblemSpec,
    num_samples: usize,
    num_arrows: usize,
    seed: u64,
) -> Result<PlotData, CliError> {
    if problem.dim != 2 {
        return Err(CliError::Config(format!(
            "plots need a 2D problem, {} has dimension {}",
            problem.name, problem.dim
        )));
    }
    let mu = problem.mu.sample_seeded(num_samples, sub_seed(seed, 1));
    let nu = problem.nu.sample_seeded(num_samples, sub_seed(seed, 2));
    let pushed = map(mu.view()).map_err(|e| CliError::Diverged(e.to_string()))?;
    let k = num_arrows.min(num_samples);
    let x = mu.slice(s![..k, ..]);
    let arrows = arrow_rows(x, pushed.slice(s![..k, ..]));
    let reference = problem.analytic_map.as_ref().map(|f| arrow_rows(x, f.apply(x).view()));
    Ok(PlotData {
        mu,
        nu,
        pushed,
        arrows,
        reference,
    })
}

const SIZE: f64 = 600.0;
const MARGIN: f64 = 20.0;

/// Renders the plot: `mu` purple, `nu` orange, `G#mu` green, estimated
/// arrows red and analytic arrows black.
pub fn render_svg(d: &PlotData) -> String {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut extend = |a: ArrayView2<'_, f64>| {
        for r in a.rows() {
            for k in 0..2 {
                if r[k].is_finite() {
                    lo[k] = lo[k].min(r[k]);
                    hi[k] = hi[k].max(r[k]);
                }
            }
        }
    };
    extend(d.mu.view());
    extend(d.nu.view());
    extend(d.pushed.view());
    let span = (0..2).map(|k| hi[k] - lo[k]).fold(1e-9f64, f64::max);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let px = |x: f64, y: f64| (MARGIN + (x - lo[0]) * scale, SIZE - MARGIN - (y - lo[1]) * scale);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    s.push_str(concat!(
        "<defs>",
        r#"<marker id="red-head" markerWidth="6" markerHeight="6" refX="5" refY="3" orient="auto"><path d="M0,0 L6,3 L0,6 z" fill="red"/></marker>"#,
        r#"<marker id="black-head" markerWidth="6" markerHeight="6" refX="5" refY="3" orient="auto"><path d="M0,0 L6,3 L0,6 z" fill="black"/></marker>"#,
        "</defs>\n",
        r#"<rect width="100%" height="100%" fill="white"/>"#,
        "\n"
    ));
    for (pts, color, class) in [
        (&d.mu, "purple", "mu"),
        (&d.nu, "orange", "nu"),
        (&d.pushed, "green", "pushed"),
    ] {
        let _ = writeln!(s, r#"<g class="{class}" fill="{color}" fill-opacity="0.4">"#);
        for r in pts.rows() {
            let (x, y) = px(r[0], r[1]);
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.5"/>"#);
        }
        s.push_str("</g>\n");
    }
    let lines = [
        (d.reference.as_ref(), "black", "reference"),
        (Some(&d.arrows), "red", "estimated"),
    ];
    for (arrows, color, class) in lines {
        let Some(arrows) = arrows else { continue };
        let _ = writeln!(s, r#"<g class="{class}" stroke="{color}" stroke-width="1">"#);
        for r in arrows.rows() {
            let (x1, y1) = px(r[0], r[1]);
            let (x2, y2) = px(r[2], r[3]);
            let _ = writeln!(
                s,
                r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" marker-end="url(#{color}-head)"/>"#
            );
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `plot.svg`, `samples.csv` (columns `set,x1,x2`) and `arrows.csv`.
pub fn write_plot(d: &PlotData, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let svg = out.join("plot.svg");
    fs::write(&svg, render_svg(d)).map_err(|e| io(&svg, e))?;
    let mut csv = String::from("set,x1,x2\n");
    for (pts, name) in [(&d.mu, "mu"), (&d.nu, "nu"), (&d.pushed, "pushed")] {
        for r in pts.rows() {
            let _ = writeln!(csv, "{name},{},{}", r[0], r[1]);
        }
    }
    let path = out.join("samples.csv");
    fs::write(&path, csv).map_err(|e| io(&path, e))?;
    write_csv(out.join("arrows.csv"), d.arrows.view())?;
    Ok(())
}
