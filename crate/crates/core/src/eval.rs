//! Similarity metrics, the held-out benchmark and its CSV/SVG outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};

use crate::codec::Image;
use crate::config::RunConfig;
use crate::data::{is_attribute_symbol, probe, vocab, Dataset, Split};
use crate::encoders::cosine_rows;
use crate::error::{io_err, Error, Result};
use crate::inference::{sample_batch, ConditionBundle, SampleResult};
use crate::models::{scene_prompt, Models};
use crate::training::load_inference_models;

fn batch(models: &Models, images: &[&Image]) -> Result<Tensor> {
    Ok(Image::batch_tensor(images, &models.device)?.to_dtype(models.dtype)?)
}

fn to_f64s(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Row-wise cosine of identity embeddings.
pub fn identity_similarity_batch(models: &Models, a: &[&Image], b: &[&Image]) -> Result<Vec<f64>> {
    let enc = models.identity()?;
    to_f64s(&cosine_rows(&enc.embed(&batch(models, a)?)?, &enc.embed(&batch(models, b)?)?)?)
}

pub fn identity_similarity(models: &Models, a: &Image, b: &Image) -> Result<f64> {
    Ok(identity_similarity_batch(models, &[a], &[b])?[0])
}

/// Row-wise cosine of pooled semantic features.
pub fn image_similarity_batch(models: &Models, a: &[&Image], b: &[&Image]) -> Result<Vec<f64>> {
    let enc = models.semantic()?;
    to_f64s(&cosine_rows(&enc.encode(&batch(models, a)?)?.pooled, &enc.encode(&batch(models, b)?)?.pooled)?)
}

pub fn image_similarity(models: &Models, a: &Image, b: &Image) -> Result<f64> {
    Ok(image_similarity_batch(models, &[a], &[b])?[0])
}

/// Fraction of the caption's checkable attribute symbols the probe recovers
/// from `img`; other symbols (pose, padding) are not scored. Symbols outside
/// the vocabulary count as unsatisfied.
pub fn instruction_alignment(img: &Image, caption: &[String]) -> f64 {
    let found = probe(img).symbols();
    let (mut total, mut hit) = (0usize, 0usize);
    for s in caption {
        if !vocab().contains(s) {
            eprintln!("warning: unknown caption symbol `{s}` counted as unsatisfied");
            total += 1;
        } else if is_attribute_symbol(s) {
            total += 1;
            hit += usize::from(found.contains(s));
        }
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub variant: String,
    pub id_sim: f64,
    pub img_sim: f64,
    pub instr_sim: f64,
    /// Standard deviation of the per-seed means.
    pub id_sim_std: f64,
    pub img_sim_std: f64,
    pub instr_sim_std: f64,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    /// Set when the variant's checkpoint was missing; metrics are then NaN.
    pub missing: bool,
}

impl MetricsRow {
    fn gap(variant: &str, seeds: &[u64]) -> Self {
        Self {
            variant: variant.to_string(),
            id_sim: f64::NAN,
            img_sim: f64::NAN,
            instr_sim: f64::NAN,
            id_sim_std: f64::NAN,
            img_sim_std: f64::NAN,
            instr_sim_std: f64::NAN,
            n_samples: 0,
            seeds: seeds.to_vec(),
            missing: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn row(&self, variant: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,id_sim,img_sim,instr_sim,id_sim_std,img_sim_std,instr_sim_std,n_samples,seed_set\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            if r.missing {
                let _ = writeln!(s, "{},MISSING,MISSING,MISSING,,,,0,{}", r.variant, seeds.join(" "));
                continue;
            }
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
                r.variant,
                r.id_sim,
                r.img_sim,
                r.instr_sim,
                r.id_sim_std,
                r.img_sim_std,
                r.instr_sim_std,
                r.n_samples,
                seeds.join(" ")
            );
        }
        s
    }
}

/// Mean over all values and the population std of the per-group means.
pub fn mean_and_seed_std(per_seed: &[Vec<f64>]) -> (f64, f64) {
    let all: Vec<f64> = per_seed.iter().flatten().copied().collect();
    let mean = all.iter().sum::<f64>() / all.len().max(1) as f64;
    let means: Vec<f64> = per_seed.iter().map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64).collect();
    let mm = means.iter().sum::<f64>() / means.len().max(1) as f64;
    let var = means.iter().map(|m| (m - mm).powi(2)).sum::<f64>() / means.len().max(1) as f64;
    (mean, var.sqrt())
}

/// One benchmark case: a reference render and a target scene of the same identity.
#[derive(Debug, Clone)]
pub struct BenchCase {
    pub reference: usize,
    pub target: usize,
}

/// Scene 0 of each of the first `identities` test identities is the
/// reference; scenes `1..=prompts` supply the prompt, pose and ground truth.
pub fn benchmark_cases(ds: &Dataset, identities: usize, prompts: usize) -> Result<Vec<BenchCase>> {
    let groups = ds.groups(Split::Test);
    if groups.len() < identities {
        return Err(Error::InvalidInput(format!("benchmark needs {identities} test identities, dataset has {}", groups.len())));
    }
    let mut out = Vec::new();
    for g in groups.iter().take(identities) {
        if g.len() < prompts + 1 {
            return Err(Error::InvalidInput(format!("benchmark needs {} scenes per identity, found {}", prompts + 1, g.len())));
        }
        out.extend((1..=prompts).map(|k| BenchCase { reference: g[0], target: g[k] }));
    }
    Ok(out)
}

pub fn bundle_for(ds: &Dataset, case: &BenchCase, cfg: &RunConfig, seed: u64) -> ConditionBundle {
    ConditionBundle {
        dense_refs: vec![ds.images[case.reference].clone()],
        sparse_map: Some(ds.pose_maps[case.target].clone()),
        instruction: scene_prompt(&ds.records[case.target].caption),
        alpha: cfg.alpha,
        beta: cfg.beta,
        skip_t: cfg.skip_t,
        seed,
    }
}

/// Per-sample metrics for one variant over all cases and seeds; outer index is the seed.
pub struct VariantScores {
    pub id_sim: Vec<Vec<f64>>,
    pub img_sim: Vec<Vec<f64>>,
    pub instr_sim: Vec<Vec<f64>>,
    pub samples: Vec<Vec<SampleResult>>,
}

pub fn score_variant(models: &Models, ds: &Dataset, cases: &[BenchCase], seeds: &[u64]) -> Result<VariantScores> {
    let cfg = &models.cfg;
    let mut out = VariantScores { id_sim: Vec::new(), img_sim: Vec::new(), instr_sim: Vec::new(), samples: Vec::new() };
    for &seed in seeds {
        let bundles: Vec<ConditionBundle> = cases
            .iter()
            .enumerate()
            .map(|(i, c)| bundle_for(ds, c, cfg, crate::data::derive_seed(&[seed, i as u64])))
            .collect();
        let results = sample_batch(models, &bundles, cfg.steps)?;
        let gen: Vec<&Image> = results.iter().map(|r| &r.generated).collect();
        let refs: Vec<&Image> = cases.iter().map(|c| &ds.images[c.reference]).collect();
        let truth: Vec<&Image> = cases.iter().map(|c| &ds.images[c.target]).collect();
        out.id_sim.push(identity_similarity_batch(models, &gen, &refs)?);
        out.img_sim.push(image_similarity_batch(models, &gen, &truth)?);
        out.instr_sim.push(
            results.iter().zip(cases).map(|(r, c)| instruction_alignment(&r.generated, &ds.records[c.target].caption)).collect(),
        );
        out.samples.push(results);
    }
    Ok(out)
}

/// A benchmarked model: its control-branch checkpoint tag and config.
#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub ipcn_tag: String,
    pub cfg: RunConfig,
}

/// Samples every variant on the test split; variants without a checkpoint
/// get a gap row instead of metrics.
pub fn run_benchmark(run_dir: &Path, ds: &Dataset, variants: &[Variant], seeds: &[u64]) -> Result<MetricsTable> {
    let mut table = MetricsTable::default();
    for v in variants {
        let models = match load_inference_models(&v.cfg, run_dir, &v.ipcn_tag) {
            Ok(m) => m,
            Err(Error::MissingCheckpoint { stage, path }) => {
                eprintln!("warning: variant `{}` skipped, no `{stage}` checkpoint at {}", v.name, path.display());
                table.rows.push(MetricsRow::gap(&v.name, seeds));
                continue;
            }
            Err(e) => return Err(e),
        };
        if !models.has(crate::models::Group::Identity) {
            return Err(Error::MissingCheckpoint {
                stage: "identity".into(),
                path: crate::training::checkpoint_path(run_dir, "identity"),
            });
        }
        let cases = benchmark_cases(ds, v.cfg.bench_identities, v.cfg.bench_prompts)?;
        let sc = score_variant(&models, ds, &cases, seeds)?;
        let (id_sim, id_sim_std) = mean_and_seed_std(&sc.id_sim);
        let (img_sim, img_sim_std) = mean_and_seed_std(&sc.img_sim);
        let (instr_sim, instr_sim_std) = mean_and_seed_std(&sc.instr_sim);
        table.rows.push(MetricsRow {
            variant: v.name.clone(),
            id_sim,
            img_sim,
            instr_sim,
            id_sim_std,
            img_sim_std,
            instr_sim_std,
            n_samples: cases.len() * seeds.len(),
            seeds: seeds.to_vec(),
            missing: false,
        });
    }
    Ok(table)
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart of the three metrics per variant.
pub fn metrics_svg(table: &MetricsTable, title: &str) -> String {
    let (w, h, pad) = (160.0 + 150.0 * table.rows.len() as f64, 320.0, 50.0);
    let plot_h = h - 2.0 * pad;
    let colors = ["#4e79a7", "#f28e2b", "#59a14f"];
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = write!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, svg_escape(title));
    // Values span [-1, 1]; the axis covers [0, 1] and clips negatives to the baseline.
    let y = |v: f64| pad + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let _ = write!(s, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, y(0.0), w - pad, y(0.0));
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{tick:.2}</text>"#, pad - 4.0, y(tick) + 4.0);
    }
    for (i, r) in table.rows.iter().enumerate() {
        let x0 = pad + 20.0 + 150.0 * i as f64;
        for (k, v) in [r.id_sim, r.img_sim, r.instr_sim].iter().enumerate() {
            if v.is_finite() {
                let x = x0 + 36.0 * k as f64;
                let _ = write!(s, r#"<rect x="{x}" y="{}" width="30" height="{}" fill="{}"/>"#, y(*v), y(0.0) - y(*v), colors[k]);
                let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{v:.3}</text>"#, x + 15.0, y(*v) - 3.0);
            }
        }
        let label = if r.missing { format!("{} (missing)", r.variant) } else { r.variant.clone() };
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x0 + 51.0, h - pad + 16.0, svg_escape(&label));
    }
    for (k, name) in ["id_sim", "img_sim", "instr_sim"].iter().enumerate() {
        let x = w - 110.0;
        let yy = 34.0 + 14.0 * k as f64;
        let _ = write!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{name}</text>"#, yy - 9.0, colors[k], x + 14.0, yy);
    }
    s.push_str("</svg>\n");
    s
}

/// Line chart of one or more `(x, y)` series.
pub fn line_svg(series: &[(String, Vec<(f64, f64)>)], title: &str, y_label: &str) -> String {
    let (w, h, pad) = (640.0, 360.0, 55.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| pad + (w - 2.0 * pad) * (x - x0) / (x1 - x0);
    let py = |y: f64| h - pad - (h - 2.0 * pad) * (y - y0) / (y1 - y0);
    let colors = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948"];
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = write!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, svg_escape(title));
    let _ = write!(
        s,
        r#"<polyline points="{pad},{pad} {pad},{} {},{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad
    );
    let _ = write!(s, r#"<text x="{pad}" y="{}" text-anchor="start">{x0:.0}</text>"#, h - pad + 14.0);
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{x1:.0}</text>"#, w - pad, h - pad + 14.0);
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#, pad - 4.0, h - pad);
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, pad - 4.0, pad + 4.0);
    let _ = write!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#, h / 2.0, h / 2.0, svg_escape(y_label));
    for (i, (name, p)) in series.iter().enumerate() {
        let c = colors[i % colors.len()];
        let path: Vec<String> =
            p.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = write!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, path.join(" "));
        let yy = pad + 14.0 * i as f64;
        let _ = write!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/><text x="{}" y="{}">{}</text>"#, w - pad - 120.0, yy - 9.0, w - pad - 106.0, yy, svg_escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv` and `<stem>.svg` into `dir`.
pub fn write_table(dir: &Path, stem: &str, table: &MetricsTable, title: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, table.to_csv()).map_err(io_err(&csv))?;
    let svg = dir.join(format!("{stem}.svg"));
    std::fs::write(&svg, metrics_svg(table, title)).map_err(io_err(&svg))?;
    Ok((csv, svg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{caption, render, IdentitySpec, SceneSpec};
    use rand::SeedableRng;

    #[test]
    fn alignment_of_ground_truth_and_flipped_colour() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for id in 0..20 {
            let ident = IdentitySpec::from_seed(9, id);
            let scene = SceneSpec::random(&mut rng);
            let (img, _, cap) = render(&ident, &scene, 64).unwrap();
            assert_eq!(instruction_alignment(&img, &cap), 1.0);
            let mut other = ident;
            other.primary_color = (ident.primary_color + 1) % crate::data::NUM_COLORS as u8;
            if other.primary_color == other.secondary_color {
                other.primary_color = (other.primary_color + 1) % crate::data::NUM_COLORS as u8;
            }
            let flipped = caption(&other, &scene);
            assert!(instruction_alignment(&img, &flipped) < 1.0);
        }
    }

    #[test]
    fn alignment_edge_cases() {
        let img = Image::filled(32, 32, [0.5, 0.5, 0.5]).unwrap();
        assert_eq!(instruction_alignment(&img, &[]), 1.0);
        // Pose and padding symbols are not scored.
        let pad = vocab()[0].clone();
        assert_eq!(instruction_alignment(&img, &[pad]), 1.0);
        assert_eq!(instruction_alignment(&img, &["not_a_symbol".to_string()]), 0.0);
    }

    #[test]
    fn seed_statistics() {
        let (m, s) = mean_and_seed_std(&[vec![1.0, 3.0], vec![5.0, 7.0]]);
        assert_eq!(m, 4.0);
        assert_eq!(s, 2.0);
    }

    #[test]
    fn csv_marks_missing_variants() {
        let t = MetricsTable { rows: vec![MetricsRow::gap("no_dve", &[0, 1])] };
        let csv = t.to_csv();
        assert!(csv.starts_with("variant,id_sim,img_sim,instr_sim,"));
        assert!(csv.contains("no_dve,MISSING"));
        assert!(metrics_svg(&t, "x").contains("(missing)"));
    }
}
