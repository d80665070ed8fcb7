//! Overhead benchmark: guarded against unguarded runs of synthetic
//! insert-only extensions over random DOMs.
//!
//! For each DOM size one tree and a fixed list of equal-weight extensions
//! are generated; the configuration with `n` extensions uses the first `n`
//! of them, so consecutive rows differ by exactly one extension. Times are medians over
//! repetitions measured with a monotonic clock.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::dom::{el, serialize, text, DomNode, DomTree};
use crate::extension::{Action, EffectProgram, Extension, InsertIndex, Manifest, Phase, Rule, RunAt, Scope, Selector};
use crate::gen::{random_dom, rng};
use crate::monitor::{guard, run_guarded, MonitorConfig};
use crate::pipeline::{run_pipeline, Registry};
use crate::records::format_table;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad range {0:?}: expected N, A..B or A..B:STEP with 1 <= A <= B")]
pub struct RangeError(pub String);

/// Parses `N`, `A..B` (at most ten evenly spaced points, endpoints
/// included) or `A..B:STEP`.
pub fn parse_range(text: &str) -> Result<Vec<usize>, RangeError> {
    let err = || RangeError(text.to_string());
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| err());
    let Some((a, rest)) = text.split_once("..") else {
        let n = num(text)?;
        return if n == 0 { Err(err()) } else { Ok(vec![n]) };
    };
    let (b, step) = match rest.split_once(':') {
        Some((b, s)) => (num(b)?, Some(num(s)?)),
        None => (num(rest)?, None),
    };
    let a = num(a)?;
    if a == 0 || a > b || step == Some(0) {
        return Err(err());
    }
    Ok(match step {
        Some(s) => (a..=b).step_by(s).collect(),
        None if b - a < 10 => (a..=b).collect(),
        None => {
            let mut v: Vec<usize> = (0..10).map(|i| a + (b - a) * i / 9).collect();
            v.dedup();
            v
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub dom_size: usize,
    pub extensions: usize,
    pub unguarded_slots: usize,
    pub guarded_slots: usize,
    pub unguarded: Duration,
    pub guarded: Duration,
    /// Median over repetitions of guarded minus unguarded time, each pair
    /// measured back to back.
    pub overhead_ns: f64,
    /// Rough bytes of trees and store alive at once.
    pub unguarded_peak_bytes: usize,
    pub guarded_peak_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `ys` on `xs`. `None` with fewer than two
/// distinct x values.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs[..n].iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs[..n].iter().zip(&ys[..n]).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys[..n].iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs[..n]
        .iter()
        .zip(&ys[..n])
        .map(|(x, y)| (y - (slope * x + intercept)).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

fn median(mut samples: Vec<Duration>) -> Duration {
    samples.sort_unstable();
    let m = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[m]
    } else {
        (samples[m - 1] + samples[m]) / 2
    }
}

fn median_f64(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    let m = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[m]
    } else {
        (samples[m - 1] + samples[m]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub repetitions: usize,
    pub seed: u64,
}

impl BenchTable {
    /// Fit of the paired overhead against extension count, for one DOM size.
    pub fn overhead_fit(&self, dom_size: usize) -> Option<LinearFit> {
        let rows: Vec<&BenchRow> = self.rows.iter().filter(|r| r.dom_size == dom_size).collect();
        let xs: Vec<f64> = rows.iter().map(|r| r.extensions as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.overhead_ns).collect();
        linear_fit(&xs, &ys)
    }

    pub fn dom_sizes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.rows.iter().map(|r| r.dom_size).collect();
        v.dedup();
        v
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# reps {} seed {}", self.repetitions, self.seed);
        let _ = writeln!(
            out,
            "{:>5} {:>4} {:>7} {:>7} {:>13} {:>13} {:>13} {:>11} {:>11}",
            "dom", "n", "slots_u", "slots_g", "median_u_ns", "median_g_ns", "overhead_ns", "peak_u_b", "peak_g_b"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>5} {:>4} {:>7} {:>7} {:>13} {:>13} {:>13.0} {:>11} {:>11}",
                r.dom_size,
                r.extensions,
                r.unguarded_slots,
                r.guarded_slots,
                r.unguarded.as_nanos(),
                r.guarded.as_nanos(),
                r.overhead_ns,
                r.unguarded_peak_bytes,
                r.guarded_peak_bytes
            );
        }
        for d in self.dom_sizes() {
            match self.overhead_fit(d) {
                Some(f) => {
                    let _ = writeln!(
                        out,
                        "# fit dom={d}: overhead = {:.0} ns/ext * n + {:.0} ns, r2 {:.4}",
                        f.slope, f.intercept, f.r_squared
                    );
                }
                None => {
                    let _ = writeln!(out, "# fit dom={d}: needs at least two extension counts");
                }
            }
        }
        out
    }
}

/// Extensions of equal weight: each appends one fresh two-node element to
/// the root and one fresh leaf to the first node with the tag picked for
/// this DOM, so adding an extension adds a fixed amount of work.
fn synthetic_extensions(dom0: &DomTree, count: usize) -> Vec<Extension> {
    let tag = match dom0.root().children().iter().find_map(DomNode::as_element) {
        Some(e) => e.tag().to_string(),
        None => dom0.root_element().tag().to_string(),
    };
    (0..count)
        .map(|i| {
            let manifest = Manifest::new(&format!("e{i}"), RunAt::DocumentEnd, Phase::Bubble, i as u64);
            let program = EffectProgram::new(vec![
                Rule::new(
                    Selector::Root,
                    Action::InsertChild {
                        node: el(&format!("x{i}")).with_child(text("t")).into(),
                        index: InsertIndex::Append,
                    },
                    Scope::FirstMatch,
                ),
                Rule::new(
                    Selector::Tag(tag.clone()),
                    Action::InsertChild {
                        node: el(&format!("y{i}")).into(),
                        index: InsertIndex::Append,
                    },
                    Scope::FirstMatch,
                ),
            ]);
            Extension::new(manifest, program)
        })
        .collect()
}

fn registry_of(exts: &[Extension]) -> Registry {
    let mut r = Registry::new();
    for e in exts {
        r.install(e.clone()).expect("synthetic ids and times are distinct");
    }
    r
}

/// Runs per timed sample. Each run's result is dropped inside the timed
/// region so the heap stays level between samples.
const BATCH: u32 = 8;

fn time_unguarded(template: &Registry, dom0: &DomTree) -> Duration {
    let mut copies: Vec<Registry> = (0..BATCH).map(|_| template.clone()).collect();
    let clock = Instant::now();
    for r in &mut copies {
        drop(std::hint::black_box(run_pipeline(r, dom0).expect("n >= 1")));
    }
    clock.elapsed() / BATCH
}

fn time_guarded(template: &Registry, dom0: &DomTree) -> Duration {
    let copies: Vec<Registry> = (0..BATCH).map(|_| template.clone()).collect();
    let clock = Instant::now();
    for r in copies {
        let mut g = guard(r, MonitorConfig::default()).expect("n >= 1");
        drop(std::hint::black_box(run_guarded(&mut g, dom0).expect("insert-only runs do not conflict")));
    }
    clock.elapsed() / BATCH
}

/// Runs the benchmark grid. `repetitions` is clamped to at least one.
///
/// Repetitions go round-robin over the extension counts after one
/// discarded warm-up round, so a slow stretch of wall time spreads over
/// every configuration instead of skewing one.
pub fn bench_command(extension_counts: &[usize], dom_sizes: &[usize], repetitions: usize, seed: u64) -> BenchTable {
    let reps = repetitions.max(1);
    let max_n = extension_counts.iter().copied().max().unwrap_or(0);
    let mut rows = Vec::new();
    for &d in dom_sizes {
        let dom0 = random_dom(&mut rng(seed.wrapping_add(d as u64)), d);
        let tree_bytes = serialize(&dom0).len();
        let exts = synthetic_extensions(&dom0, max_n);
        let templates: Vec<Registry> = extension_counts.iter().map(|&n| registry_of(&exts[..n])).collect();
        let mut plain = vec![Vec::with_capacity(reps); templates.len()];
        let mut guarded = vec![Vec::with_capacity(reps); templates.len()];
        let store_bytes: Vec<usize> = templates
            .iter()
            .map(|t| {
                let mut g = guard(t.clone(), MonitorConfig::default()).expect("n >= 1");
                let run = run_guarded(&mut g, &dom0).expect("insert-only runs do not conflict");
                format_table(&run.store).len()
            })
            .collect();
        for round in 0..=reps {
            for (k, template) in templates.iter().enumerate() {
                let u = time_unguarded(template, &dom0);
                let g = time_guarded(template, &dom0);
                if round > 0 {
                    plain[k].push(u);
                    guarded[k].push(g);
                }
            }
        }
        for (k, &n) in extension_counts.iter().enumerate() {
            rows.push(BenchRow {
                dom_size: d,
                extensions: n,
                unguarded_slots: n,
                guarded_slots: 2 * n + 1,
                overhead_ns: median_f64(plain[k].iter().zip(&guarded[k]).map(|(u, g)| g.as_nanos() as f64 - u.as_nanos() as f64).collect()),
                unguarded: median(std::mem::take(&mut plain[k])),
                guarded: median(std::mem::take(&mut guarded[k])),
                // input and output alive at once
                unguarded_peak_bytes: 2 * tree_bytes,
                // DOM_0, victim input, victim output, stripped tree, store
                guarded_peak_bytes: 4 * tree_bytes + store_bytes[k],
            });
        }
    }
    BenchTable {
        rows,
        repetitions: reps,
        seed,
    }
}
