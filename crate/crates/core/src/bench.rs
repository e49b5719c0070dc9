//! Wall-clock scaling measurements for the attention mechanisms.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, reference, AttentionSpec, Kernel, MaskMode, Mechanism, PaddingMask};
use crate::autodiff::{grad, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "mechanism,kernel,mask,N,d,H,repeat_idx,seconds";

/// Sequence length of the pre-timing correctness check.
const CHECK_LEN: usize = 24;
/// Smallest accepted sample, in multiples of the timer resolution.
const MIN_TICKS: f64 = 100.0;

/// Head count that may depend on the model width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heads {
    /// One head per feature (`H = d`).
    PerFeature,
    Fixed(usize),
}

impl Heads {
    pub fn at(self, d: usize) -> usize {
        match self {
            Heads::PerFeature => d,
            Heads::Fixed(h) => h,
        }
    }
}

/// A mechanism configuration timed across widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTarget {
    pub mechanism: Mechanism,
    pub kernel: Kernel,
    pub heads: Heads,
    pub mask: MaskMode,
}

impl BenchTarget {
    pub fn new(mechanism: Mechanism, heads: Heads) -> Self {
        let kernel = AttentionSpec::preset(mechanism, 8, 1).kernel;
        Self {
            mechanism,
            kernel,
            heads,
            mask: MaskMode::Bidirectional,
        }
    }

    pub fn spec(&self, d: usize) -> AttentionSpec {
        let mut spec = AttentionSpec::preset(self.mechanism, d, self.heads.at(d)).with_mask(self.mask);
        spec.heads = self.heads.at(d);
        spec.kernel = self.kernel;
        spec
    }

    pub fn label(&self) -> String {
        let h = match self.heads {
            Heads::PerFeature => "H=d".to_string(),
            Heads::Fixed(h) => format!("H={h}"),
        };
        format!("{} ({h}, {})", self.mechanism, self.mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub kernel: Kernel,
    pub mask: MaskMode,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    /// Seconds per pass, one per repeat.
    pub samples: Vec<f64>,
    pub median: f64,
    pub mad: f64,
    /// Passes per sample (raised when a single pass is below timer resolution).
    pub inner: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingOptions {
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Time forward + backward instead of forward only.
    pub backward: bool,
}

impl Default for TimingOptions {
    fn default() -> Self {
        Self {
            repeats: 5,
            warmup: 2,
            seed: 0,
            backward: false,
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median absolute deviation from the median.
pub fn mad(xs: &[f64]) -> f64 {
    let m = median(xs);
    median(&xs.iter().map(|x| (x - m).abs()).collect::<Vec<_>>())
}

/// Smallest nonzero step observed on the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..50 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

/// Compares the vectorised mechanism against its loop oracle on one small
/// instance at width `d`.
pub fn cross_check(spec: &AttentionSpec, d: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let n = CHECK_LEN;
    let q = Tensor::<f64>::randn(&[n, d], &mut rng);
    let k = Tensor::<f64>::randn(&[n, d], &mut rng);
    let v = Tensor::<f64>::randn(&[n, d], &mut rng);
    let mask = PaddingMask::all_valid(n);
    let fast = attention::attend_tensors(spec, &q, &k, &v, &mask)?;
    let slow = reference::attend(spec, &q, &k, &v, &mask.valid)?;
    let scale = slow.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let err = fast.max_abs_diff(&slow)? / scale;
    if err > 1e-9 {
        return Err(Error::NonFinite(format!(
            "{} disagrees with its reference at d={d} (relative error {err:e}); refusing to time it",
            spec.label()
        )));
    }
    Ok(err)
}

impl TimingOptions {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.repeats < 5 {
            v.push(format!("repeats ({}) must be at least 5", self.repeats));
        }
        if self.warmup < 1 {
            v.push("warmup must be at least 1".into());
        }
        v
    }
}

/// Times one `(spec, N, d)` cell after an oracle cross-check.
pub fn time_mechanism(spec: &AttentionSpec, n: usize, d: usize, opts: &TimingOptions) -> Result<BenchRecord> {
    let v = opts.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    spec.validate(d)?;
    cross_check(spec, d, opts.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let q = Tensor::<f32>::randn(&[1, n, d], &mut rng);
    let k = Tensor::<f32>::randn(&[1, n, d], &mut rng);
    let v = Tensor::<f32>::randn(&[1, n, d], &mut rng);
    let valid = vec![true; n];
    let pass = || -> Result<()> {
        if opts.backward {
            let (q, k, v) = (Var::param(q.clone()), Var::param(k.clone()), Var::param(v.clone()));
            let out = attention::attend(spec, &q, &k, &v, &valid)?;
            grad(&out.sum_all(), &[q, k, v])?;
        } else {
            let (q, k, v) = (Var::constant(q.clone()), Var::constant(k.clone()), Var::constant(v.clone()));
            std::hint::black_box(attention::attend(spec, &q, &k, &v, &valid)?);
        }
        Ok(())
    };

    for _ in 0..opts.warmup {
        pass()?;
    }
    let resolution = timer_resolution().as_secs_f64();
    let mut inner = 1usize;
    loop {
        let t0 = Instant::now();
        for _ in 0..inner {
            pass()?;
        }
        if t0.elapsed().as_secs_f64() >= MIN_TICKS * resolution {
            break;
        }
        inner *= 2;
    }
    if inner > 1 {
        log::warn!(
            "{} at N={n}, d={d}: one pass is below {MIN_TICKS}× timer resolution; timing {inner} passes per sample",
            spec.label()
        );
    }
    let mut samples = Vec::with_capacity(opts.repeats);
    for _ in 0..opts.repeats {
        let t0 = Instant::now();
        for _ in 0..inner {
            pass()?;
        }
        samples.push(t0.elapsed().as_secs_f64() / inner as f64);
    }
    Ok(BenchRecord {
        mechanism: spec.mechanism,
        kernel: spec.kernel,
        mask: spec.mask_mode,
        n,
        d,
        heads: spec.heads,
        median: median(&samples),
        mad: mad(&samples),
        samples,
        inner,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub points: usize,
}

/// Least-squares line through `(ln size, ln time)`.
pub fn fit_scaling_exponent(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 4 {
        return Err(Error::Input(format!("need at least 4 points to fit a slope, got {}", points.len())));
    }
    if points.iter().any(|&(s, t)| !(s > 0.0 && t > 0.0)) {
        return Err(Error::Input("sizes and times must be positive".into()));
    }
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(0.0, f64::max);
    if hi / lo < 8.0 {
        return Err(Error::Input(format!("sizes span only {:.2}×; need at least 8×", hi / lo)));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let stderr = (sse / (n - 2.0) / sxx).sqrt();
    Ok(ScalingFit {
        slope,
        intercept,
        stderr,
        points: points.len(),
    })
}

/// Which dimension a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    N,
    D,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::N => "N",
            Axis::D => "d",
        }
    }

    fn of(self, r: &BenchRecord) -> usize {
        match self {
            Axis::N => r.n,
            Axis::D => r.d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchGrid {
    pub targets: Vec<BenchTarget>,
    /// Sequence lengths for the N sweep, at width `fixed_d`.
    pub n_values: Vec<usize>,
    pub fixed_d: usize,
    /// Widths for the d sweep, at length `fixed_n`.
    pub d_values: Vec<usize>,
    pub fixed_n: usize,
    /// Per-mechanism cap on N (dot-product memory/time), if any.
    pub max_n_dot_product: Option<usize>,
    pub timing: TimingOptions,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            targets: vec![
                BenchTarget::new(Mechanism::DotProduct, Heads::Fixed(8)),
                BenchTarget::new(Mechanism::Linear, Heads::Fixed(8)),
                BenchTarget::new(Mechanism::Hydra, Heads::PerFeature),
                BenchTarget::new(Mechanism::EfficientSeparateSoftmax, Heads::Fixed(8)),
            ],
            n_values: vec![256, 512, 1024, 2048, 4096, 8192],
            fixed_d: 64,
            d_values: vec![16, 32, 64, 128, 256, 512],
            fixed_n: 2048,
            max_n_dot_product: None,
            timing: TimingOptions::default(),
        }
    }
}

/// One sweep's measurements for one target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub target: BenchTarget,
    pub axis: Axis,
    pub records: Vec<BenchRecord>,
    pub fit: Option<ScalingFit>,
}

impl Series {
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.records.iter().map(|r| (self.axis.of(r) as f64, r.median)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub series: Vec<Series>,
}

impl SuiteResult {
    pub fn find(&self, mechanism: Mechanism, axis: Axis) -> Option<&Series> {
        self.series.iter().find(|s| s.target.mechanism == mechanism && s.axis == axis)
    }
}

/// Runs the N sweep then the d sweep for every target, sequentially.
pub fn run_suite(grid: &BenchGrid, mut progress: impl FnMut(&BenchRecord)) -> Result<SuiteResult> {
    let mut out = SuiteResult::default();
    for axis in [Axis::N, Axis::D] {
        for target in &grid.targets {
            let cells: Vec<(usize, usize)> = match axis {
                Axis::N => grid
                    .n_values
                    .iter()
                    .filter(|&&n| target.mechanism != Mechanism::DotProduct || grid.max_n_dot_product.is_none_or(|m| n <= m))
                    .map(|&n| (n, grid.fixed_d))
                    .collect(),
                Axis::D => grid.d_values.iter().map(|&d| (grid.fixed_n, d)).collect(),
            };
            let mut records = Vec::with_capacity(cells.len());
            for (n, d) in cells {
                let spec = target.spec(d);
                if !spec.violations(d).is_empty() {
                    log::warn!("skipping {} at d={d}: {}", target.label(), spec.violations(d).join("; "));
                    continue;
                }
                let r = time_mechanism(&spec, n, d, &grid.timing)?;
                progress(&r);
                records.push(r);
            }
            let mut series = Series {
                target: target.clone(),
                axis,
                records,
                fit: None,
            };
            series.fit = fit_scaling_exponent(&series.points()).ok();
            out.series.push(series);
        }
    }
    Ok(out)
}

/// One row per timed sample. Empty input gives the header alone.
pub fn to_csv(result: &SuiteResult) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for series in &result.series {
        for r in &series.records {
            for (i, t) in r.samples.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{},{},{},{},{:.9e}", r.mechanism, r.kernel, r.mask, r.n, r.d, r.heads, i, t);
            }
        }
    }
    s
}

/// Markdown table of fitted slopes.
pub fn slope_table(result: &SuiteResult) -> String {
    let mut s = String::from("| mechanism | kernel | heads | varies | fixed | slope | stderr | points |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for series in &result.series {
        let t = &series.target;
        let heads = match t.heads {
            Heads::PerFeature => "d".to_string(),
            Heads::Fixed(h) => h.to_string(),
        };
        let fixed = match (series.axis, series.records.first()) {
            (Axis::N, Some(r)) => format!("d={}", r.d),
            (Axis::D, Some(r)) => format!("N={}", r.n),
            _ => "-".to_string(),
        };
        let (slope, se) = series
            .fit
            .map_or(("-".to_string(), "-".to_string()), |f| (format!("{:.3}", f.slope), format!("{:.3}", f.stderr)));
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            t.mechanism,
            t.kernel,
            heads,
            series.axis.name(),
            fixed,
            slope,
            se,
            series.records.len()
        );
    }
    s
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Log–log line chart of median time against the swept dimension.
pub fn svg_chart(result: &SuiteResult, axis: Axis, title: &str) -> String {
    let series: Vec<&Series> = result.series.iter().filter(|s| s.axis == axis && !s.records.is_empty()).collect();
    let (w, h, left, right, top, bottom) = (720.0, 460.0, 80.0, 220.0, 40.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points()).collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        left + pw / 2.0,
        escape(title)
    );
    if pts.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let decade = |v: f64, up: bool| if up { 10f64.powf(v.log10().ceil()) } else { 10f64.powf(v.log10().floor()) };
    let x_lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_hi = pts.iter().map(|p| p.0).fold(0.0, f64::max);
    let (x_lo, x_hi) = (x_lo.log2().floor(), x_hi.log2().ceil().max(x_lo.log2().floor() + 1.0));
    let y_lo = decade(pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min), false).log10();
    let y_hi = decade(pts.iter().map(|p| p.1).fold(0.0, f64::max), true).log10().max(y_lo + 1.0);
    let sx = |x: f64| left + (x.log2() - x_lo) / (x_hi - x_lo) * pw;
    let sy = |y: f64| top + ph - (y.log10() - y_lo) / (y_hi - y_lo) * ph;

    let _ = writeln!(
        svg,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#333\"/>"
    );
    let mut e = x_lo;
    while e <= x_hi + 1e-9 {
        let x = sx(2f64.powf(e));
        let _ = writeln!(
            svg,
            "<line x1=\"{x:.1}\" y1=\"{top}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\
             <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            top + ph,
            top + ph + 18.0,
            2f64.powf(e)
        );
        e += 1.0;
    }
    let mut e = y_lo;
    while e <= y_hi + 1e-9 {
        let y = sy(10f64.powf(e));
        let _ = writeln!(
            svg,
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">1e{e}</text>",
            left + pw,
            left - 6.0,
            y + 4.0
        );
        e += 1.0;
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{} (log scale)</text>\n\
         <text transform=\"translate(20 {:.1}) rotate(-90)\" text-anchor=\"middle\">median seconds per pass (log scale)</text>",
        left + pw / 2.0,
        h - 15.0,
        axis.name(),
        top + ph / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = s.points().iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            path.join(" ")
        );
        for &(x, y) in &s.points() {
            let _ = writeln!(svg, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", sx(x), sy(y));
        }
        let ly = top + 16.0 + 20.0 * i as f64;
        let slope = s.fit.map_or(String::new(), |f| format!(" slope {:.2}", f.slope));
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\">{}{}</text>",
            left + pw + 12.0,
            left + pw + 32.0,
            left + pw + 38.0,
            ly + 4.0,
            escape(&s.target.label()),
            slope
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
