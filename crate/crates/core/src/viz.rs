//! Sentence-vector export, a deterministic 2-D PCA projection, and SVG
//! scatter plots of the joint representation space.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::system::System;
use crate::transformer::TokenId;

const CHUNK: usize = 64;
const PALETTE: [&str; 6] = ["#f2c500", "#2ca02c", "#1f77b4", "#d62728", "#9467bd", "#8c564b"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub language: String,
    pub index: usize,
    pub vector: Vec<f64>,
}

/// Pooled sentence vectors, tagged by language and sentence index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub dim: usize,
    pub model_hash: String,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingDump {
    pub fn new(dim: usize, model_hash: String, rows: Vec<EmbeddingRow>) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|r| r.vector.len() != dim) {
            return Err(Error::Shape(format!(
                "row ({}, {}) has {} values, header says {dim}",
                bad.language,
                bad.index,
                bad.vector.len()
            )));
        }
        Ok(EmbeddingDump { dim, model_hash, rows })
    }

    /// Header `#dim=D<TAB>model=HASH`, then `lang<TAB>index<TAB>v1..vD`.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("#dim={}\tmodel={}\n", self.dim, self.model_hash);
        for r in &self.rows {
            write!(out, "{}\t{}", r.language, r.index).unwrap();
            for v in &r.vector {
                write!(out, "\t{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            message: format!("line {line}: {message}"),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let (dim, hash) = header
            .strip_prefix("#dim=")
            .and_then(|h| h.split_once("\tmodel="))
            .and_then(|(d, m)| Some((d.parse::<usize>().ok()?, m.to_string())))
            .ok_or_else(|| err(1, format!("bad header {header:?}")))?;
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut fields = line.split('\t');
            let language = fields.next().unwrap_or_default().to_string();
            let index = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| err(i + 2, "missing sentence index".into()))?;
            let vector = fields
                .map(|f| f.parse::<f64>().map_err(|e| err(i + 2, format!("{f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(EmbeddingRow { language, index, vector });
        }
        Self::new(dim, hash, rows).map_err(|e| err(0, e.to_string()))
    }
}

/// Pooled pre-quantization vectors for every sentence of every given side.
pub fn export_embeddings(system: &System, sides: &[(&str, &[Vec<TokenId>])]) -> Result<EmbeddingDump> {
    let mut rows = Vec::new();
    for (lang, seqs) in sides {
        for (c, chunk) in seqs.chunks(CHUNK).enumerate() {
            let pooled = system.pooled(lang, chunk)?;
            for i in 0..chunk.len() {
                rows.push(EmbeddingRow {
                    language: lang.to_string(),
                    index: c * CHUNK + i,
                    vector: pooled.row(i).to_vec(),
                });
            }
        }
    }
    EmbeddingDump::new(system.model.d_model, system.param_hash(), rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedRow {
    pub language: String,
    pub index: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub method: String,
    pub rows: Vec<ProjectedRow>,
    /// Variance captured by each component.
    pub explained_variance: [f64; 2],
    pub total_variance: f64,
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize_in_place(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Makes `v` a unit vector orthogonal to `basis`; falls back to the standard
/// basis vector least aligned with `basis` when `v` collapses.
fn orthonormalize(v: &mut Vec<f64>, basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
    if normalize_in_place(v) > 1e-12 {
        return;
    }
    let dim = v.len();
    let axis = (0..dim)
        .min_by(|&i, &j| {
            let wi: f64 = basis.iter().map(|b| b[i] * b[i]).sum();
            let wj: f64 = basis.iter().map(|b| b[j] * b[j]).sum();
            wi.total_cmp(&wj)
        })
        .unwrap_or(0);
    *v = vec![0.0; dim];
    v[axis] = 1.0;
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
    normalize_in_place(v);
}

/// Top two principal components by subspace iteration with a final
/// Rayleigh-Ritz rotation. Variances use the `1/N` normalization.
pub fn pca_project(dump: &EmbeddingDump, seed: u64) -> Result<Projection2D> {
    let n = dump.rows.len();
    if n < 3 {
        return Err(Error::Contract(format!("PCA needs at least 3 rows, got {n}")));
    }
    let d = dump.dim;
    let mut mean = vec![0.0; d];
    for r in &dump.rows {
        mean.iter_mut().zip(&r.vector).for_each(|(m, v)| *m += v / n as f64);
    }
    let centered: Vec<Vec<f64>> =
        dump.rows.iter().map(|r| r.vector.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for x in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += x[i] * x[j] / n as f64;
            }
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i][i]).sum();
    let apply = |v: &[f64]| -> Vec<f64> { cov.iter().map(|row| dot(row, v)).collect() };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        orthonormalize(&mut v, &q);
        q.push(v);
    }
    for _ in 0..2000 {
        let mut next: Vec<Vec<f64>> = Vec::new();
        for v in &q {
            let mut z = apply(v);
            orthonormalize(&mut z, &next);
            next.push(z);
        }
        let moved = q
            .iter()
            .zip(&next)
            .map(|(a, b)| 1.0 - dot(a, b).abs())
            .fold(0.0, f64::max);
        q = next;
        if moved < 1e-15 {
            break;
        }
    }
    // Rayleigh-Ritz on the 2-D subspace.
    let (a0, a1) = (apply(&q[0]), apply(&q[1]));
    let (t00, t01, t11) = (dot(&q[0], &a0), dot(&q[0], &a1), dot(&q[1], &a1));
    let theta = 0.5 * (2.0 * t01).atan2(t00 - t11);
    let (c, s) = (theta.cos(), theta.sin());
    let mut comps: [Vec<f64>; 2] = [
        q[0].iter().zip(&q[1]).map(|(u, v)| c * u + s * v).collect(),
        q[0].iter().zip(&q[1]).map(|(u, v)| -s * u + c * v).collect(),
    ];
    let mut variances = [dot(&comps[0], &apply(&comps[0])), dot(&comps[1], &apply(&comps[1]))];
    if variances[1] > variances[0] {
        comps.swap(0, 1);
        variances.swap(0, 1);
    }
    for comp in &mut comps {
        // Sign convention: the largest-magnitude coordinate is positive.
        let lead = comp.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            comp.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let rows = dump
        .rows
        .iter()
        .zip(&centered)
        .map(|(r, x)| ProjectedRow { language: r.language.clone(), index: r.index, x: dot(x, &comps[0]), y: dot(x, &comps[1]) })
        .collect();
    Ok(Projection2D {
        method: "pca".into(),
        rows,
        explained_variance: [variances[0].max(0.0), variances[1].max(0.0)],
        total_variance,
        mean,
        components: comps,
    })
}

impl Projection2D {
    /// `mean + x * c1 + y * c2` for row `i`.
    pub fn reconstruct(&self, i: usize) -> Vec<f64> {
        let r = &self.rows[i];
        (0..self.mean.len()).map(|k| self.mean[k] + r.x * self.components[0][k] + r.y * self.components[1][k]).collect()
    }

    /// Languages in order of first appearance.
    pub fn languages(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.language.as_str()) {
                seen.push(&r.language);
            }
        }
        seen
    }

    /// Mean silhouette of the 2-D points under the language labels; `None`
    /// unless there are at least two languages. Diagnostic only.
    pub fn silhouette(&self) -> Option<f64> {
        let labels = self.languages();
        if labels.len() < 2 {
            return None;
        }
        let mut by_label: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for r in &self.rows {
            by_label.entry(&r.language).or_default().push((r.x, r.y));
        }
        let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        let mut total = 0.0;
        for r in &self.rows {
            let p = (r.x, r.y);
            let own = &by_label[r.language.as_str()];
            if own.len() < 2 {
                continue;
            }
            let a = own.iter().map(|&q| dist(p, q)).sum::<f64>() / (own.len() - 1) as f64;
            let b = by_label
                .iter()
                .filter(|(l, _)| **l != r.language)
                .map(|(_, pts)| pts.iter().map(|&q| dist(p, q)).sum::<f64>() / pts.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
        Some(total / self.rows.len() as f64)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static SVG scatter plot: one circle per row colored by language, a
/// legend, axes, and optionally a segment between the i-th rows of the first
/// two languages.
pub fn render_scatter(proj: &Projection2D, pair_lines: bool) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const M: f64 = 48.0;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in &proj.rows {
        x0 = x0.min(r.x);
        x1 = x1.max(r.x);
        y0 = y0.min(r.y);
        y1 = y1.max(r.y);
    }
    let span = |lo: f64, hi: f64| if hi - lo > 1e-12 { hi - lo } else { 1.0 };
    let (sx, sy) = ((W - 2.0 * M) / span(x0, x1), (H - 2.0 * M) / span(y0, y1));
    let px = |x: f64| M + (x - x0) * sx;
    let py = |y: f64| H - M - (y - y0) * sy;
    let langs = proj.languages();
    let color = |l: &str| PALETTE[langs.iter().position(|x| *x == l).unwrap_or(0) % PALETTE.len()];

    let mut out = String::new();
    writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(
        out,
        "<desc>2-D {} projection (linear, not UMAP); explained variance {:.6} and {:.6} of total {:.6}</desc>",
        proj.method.to_uppercase(),
        proj.explained_variance[0],
        proj.explained_variance[1],
        proj.total_variance
    )
    .unwrap();
    writeln!(out, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<g stroke="black" stroke-width="1"><line class="axis" x1="{M}" y1="{b}" x2="{r}" y2="{b}"/><line class="axis" x1="{M}" y1="{M}" x2="{M}" y2="{b}"/></g>"#,
        b = H - M,
        r = W - M
    )
    .unwrap();
    writeln!(out, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">PC1</text>"#, W / 2.0, H - M / 3.0).unwrap();
    writeln!(out, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 {0} {1})">PC2</text>"#, M / 3.0, H / 2.0).unwrap();

    if pair_lines && langs.len() >= 2 {
        let side = |l: &str| -> Vec<&ProjectedRow> { proj.rows.iter().filter(|r| r.language == l).collect() };
        out.push_str(r##"<g stroke="#999999" stroke-width="0.5">"##);
        out.push('\n');
        for (a, b) in side(langs[0]).into_iter().zip(side(langs[1])) {
            writeln!(
                out,
                r#"<line class="pair" x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/>"#,
                px(a.x),
                py(a.y),
                px(b.x),
                py(b.y)
            )
            .unwrap();
        }
        out.push_str("</g>\n");
    }
    for r in &proj.rows {
        writeln!(
            out,
            r#"<circle class="point" cx="{:.3}" cy="{:.3}" r="3" fill="{}"><title>{} {}</title></circle>"#,
            px(r.x),
            py(r.y),
            color(&r.language),
            escape(&r.language),
            r.index
        )
        .unwrap();
    }
    for (i, l) in langs.iter().enumerate() {
        let y = M / 2.0 + 16.0 * i as f64;
        writeln!(
            out,
            r#"<g class="legend"><circle cx="{:.1}" cy="{y:.1}" r="4" fill="{}"/><text x="{:.1}" y="{:.1}" font-size="12">{}</text></g>"#,
            W - M - 60.0,
            color(l),
            W - M - 50.0,
            y + 4.0,
            escape(l)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

pub fn write_scatter(proj: &Projection2D, path: &Path, pair_lines: bool) -> Result<()> {
    std::fs::write(path, render_scatter(proj, pair_lines)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dump(rows: &[(&str, Vec<f64>)]) -> EmbeddingDump {
        let rows: Vec<EmbeddingRow> = rows
            .iter()
            .enumerate()
            .map(|(i, (l, v))| EmbeddingRow { language: l.to_string(), index: i, vector: v.clone() })
            .collect();
        EmbeddingDump::new(rows[0].vector.len(), "h".into(), rows).unwrap()
    }

    #[test]
    fn collinear_points_have_no_second_component() {
        let d = dump(&[("a", vec![0., 0., 0.]), ("a", vec![1., 2., 3.]), ("b", vec![2., 4., 6.])]);
        let p = pca_project(&d, 0).unwrap();
        assert!(p.explained_variance[1].abs() < 1e-12);
        assert!((p.explained_variance[0] - p.total_variance).abs() < 1e-9);
        assert!(dot(&p.components[0], &p.components[1]).abs() < 1e-9);
    }

    #[test]
    fn too_few_rows() {
        let d = dump(&[("a", vec![0., 1.]), ("b", vec![1., 0.])]);
        assert!(matches!(pca_project(&d, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn tsv_round_trip() {
        let d = dump(&[("a", vec![0.1, -2.5e-17]), ("b", vec![1.0 / 3.0, 7.0])]);
        let back = EmbeddingDump::from_tsv(&d.to_tsv(), Path::new("mem")).unwrap();
        assert_eq!(back, d);
        assert!(EmbeddingDump::from_tsv("#dim=3\tmodel=x\na\t0\t1\n", Path::new("mem")).is_err());
    }

    #[test]
    fn silhouette_separates_clusters() {
        let d = dump(&[
            ("a", vec![0., 0.]),
            ("a", vec![0.1, 0.]),
            ("b", vec![10., 0.]),
            ("b", vec![10.1, 0.]),
        ]);
        let s = pca_project(&d, 0).unwrap().silhouette().unwrap();
        assert!(s > 0.9);
    }
}
