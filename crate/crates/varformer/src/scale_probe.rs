//! Scale-replacement probe: swap selected encoder scales for predicted
//! ones, decode the mix, and quantify how far degraded latents sit from
//! clean ones — per scale, for both the encoder and the predictor path.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};

use crate::degradations::{apply, psnr, save_png, DegradationSpec, ImageF};
use crate::error::{Result, VarError};
use crate::msvq::{accumulate, tokens_to_maps, MsvqModel, MultiScaleLatent, Provenance};
use crate::nn::{ParamStore, Session};
use crate::scalar::Scalar;
use crate::var_transformer::VarTransformer;

/// Set of 1-based scale indices whose encoder features get replaced.
/// Pure set semantics: construction order never matters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplacementSet {
    indices: BTreeSet<usize>,
    k: usize,
}

impl ReplacementSet {
    /// Validates every index against `1..=k`.
    pub fn new(indices: impl IntoIterator<Item = usize>, k: usize) -> Result<Self> {
        let indices: BTreeSet<usize> = indices.into_iter().collect();
        if let Some(&bad) = indices.iter().find(|&&i| i < 1 || i > k) {
            return Err(VarError::domain(format!(
                "replacement index {bad} outside 1..={k}"
            )));
        }
        Ok(ReplacementSet { indices, k })
    }

    pub fn empty(k: usize) -> Self {
        ReplacementSet {
            indices: BTreeSet::new(),
            k,
        }
    }

    pub fn full(k: usize) -> Self {
        ReplacementSet {
            indices: (1..=k).collect(),
            k,
        }
    }

    /// Parses a `+`-joined label such as `"1+2+3"`; `"-"` is the empty set.
    pub fn parse(label: &str, k: usize) -> Result<Self> {
        if label == "-" {
            return Ok(Self::empty(k));
        }
        let mut indices = Vec::new();
        for part in label.split('+') {
            let i: usize = part
                .trim()
                .parse()
                .map_err(|_| VarError::data(format!("bad replacement label {label:?}")))?;
            indices.push(i);
        }
        Self::new(indices, k)
    }

    /// Number of scales in the schedule this set was built for.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.contains(&i)
    }

    /// Indices in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.indices.iter().copied().collect()
    }

    /// `{1..K}` minus this set, ascending.
    pub fn complement(&self) -> Vec<usize> {
        (1..=self.k).filter(|i| !self.indices.contains(i)).collect()
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ReplacementSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.indices.is_empty() {
            return write!(f, "-");
        }
        let parts: Vec<String> = self.indices.iter().map(|i| i.to_string()).collect();
        write!(f, "{}", parts.join("+"))
    }
}

/// Decode a latent whose scales come from `enc` outside `c` and from `pred`
/// inside `c`. The per-scale maps are merged *before* a single shared
/// accumulation pass, so the empty-set, full-set, and `pred == enc` cases
/// reproduce the plain reconstruction bit for bit.
pub fn replace_and_decode<F: Scalar>(
    store: &ParamStore<F>,
    model: &MsvqModel,
    enc: &MultiScaleLatent<F>,
    pred: &MultiScaleLatent<F>,
    c: &ReplacementSet,
) -> Result<Array3<F>> {
    let schedule = &model.schedule;
    if c.k() != schedule.k() {
        return Err(VarError::shape(format!(
            "replacement set built for {} scales, schedule has {}",
            c.k(),
            schedule.k()
        )));
    }
    enc.validate(schedule, model.d_code)?;
    pred.validate(schedule, model.d_code)?;

    let merged = MultiScaleLatent {
        per_scale: (1..=schedule.k())
            .map(|k| {
                if c.contains(k) {
                    pred.per_scale[k - 1].clone()
                } else {
                    enc.per_scale[k - 1].clone()
                }
            })
            .collect(),
        provenance: enc.provenance,
    };
    let all: Vec<usize> = (1..=schedule.k()).collect();
    let latent = accumulate(&merged, schedule, &all)?;

    let mut s: Session<'_, F> = Session::new(store, &[]);
    let lv = s.g.constant(latent.into_dyn());
    let img = model.decode(&mut s, lv)?;
    Ok(s
        .g
        .value(img)
        .clone()
        .into_dimensionality::<Ix3>()
        .unwrap())
}

/// Spatial mean of one scale's feature map: `(d, h, w)` → length-`d` vector.
fn sample_mean<F: Scalar>(ms: &MultiScaleLatent<F>, k: usize) -> Result<Vec<f64>> {
    if k < 1 || k > ms.per_scale.len() {
        return Err(VarError::domain(format!(
            "scale {k} outside 1..={}",
            ms.per_scale.len()
        )));
    }
    let map = &ms.per_scale[k - 1];
    let (d, h, w) = map.dim();
    let inv = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; d];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += map[[c, y, x]].as_f64();
            }
        }
        *slot = acc * inv;
    }
    Ok(out)
}

/// Mean of the per-sample spatial means of set `set` at scale `k`.
fn set_mean<F: Scalar>(set: &[MultiScaleLatent<F>], k: usize) -> Result<Vec<f64>> {
    let mut mean: Option<Vec<f64>> = None;
    for ms in set {
        let v = sample_mean(ms, k)?;
        match &mut mean {
            None => mean = Some(v),
            Some(m) => {
                if m.len() != v.len() {
                    return Err(VarError::shape("inconsistent feature widths in sample set"));
                }
                for (a, b) in m.iter_mut().zip(v) {
                    *a += b;
                }
            }
        }
    }
    let mut m = mean.expect("caller checks non-empty");
    let inv = 1.0 / set.len() as f64;
    for a in &mut m {
        *a *= inv;
    }
    Ok(m)
}

/// Distance between two sets of multi-scale latents at scale `k`: each
/// sample is spatially averaged to one feature vector, each set averaged to
/// one mean vector, and the Euclidean distance between the means returned.
/// Symmetric, non-negative, zero on identical sets.
pub fn distribution_gap<F: Scalar>(
    a: &[MultiScaleLatent<F>],
    b: &[MultiScaleLatent<F>],
    k: usize,
) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(VarError::domain(format!(
            "distribution gap needs at least 2 samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ma = set_mean(a, k)?;
    let mb = set_mean(b, k)?;
    if ma.len() != mb.len() {
        return Err(VarError::shape("sets have different feature widths"));
    }
    let d2: f64 = ma
        .iter()
        .zip(&mb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(d2.sqrt())
}

/// Per-scale gaps of one degradation: encoder path vs predictor path, both
/// measured against the same clean reference set.
#[derive(Debug, Clone)]
pub struct GapReport {
    pub degradation: String,
    pub per_scale_gap_encoder: Vec<f64>,
    pub per_scale_gap_transformer: Vec<f64>,
}

impl GapReport {
    /// Gaps of `deg_enc` and `deg_pred` against `clean`, at every scale.
    pub fn compute<F: Scalar>(
        degradation: impl Into<String>,
        clean: &[MultiScaleLatent<F>],
        deg_enc: &[MultiScaleLatent<F>],
        deg_pred: &[MultiScaleLatent<F>],
    ) -> Result<GapReport> {
        let k = clean
            .first()
            .ok_or_else(|| VarError::domain("empty clean sample set"))?
            .per_scale
            .len();
        let mut enc = Vec::with_capacity(k);
        let mut pred = Vec::with_capacity(k);
        for scale in 1..=k {
            enc.push(distribution_gap(clean, deg_enc, scale)?);
            pred.push(distribution_gap(clean, deg_pred, scale)?);
        }
        let report = GapReport {
            degradation: degradation.into(),
            per_scale_gap_encoder: enc,
            per_scale_gap_transformer: pred,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_scale_gap_encoder.len() != self.per_scale_gap_transformer.len() {
            return Err(VarError::shape("gap vectors differ in length"));
        }
        let all = self
            .per_scale_gap_encoder
            .iter()
            .chain(&self.per_scale_gap_transformer);
        for &g in all {
            if !g.is_finite() || g < 0.0 {
                return Err(VarError::domain(format!("gap {g} is not a finite non-negative")));
            }
        }
        Ok(())
    }

    /// Count of scales where the predictor path sits at least as close to
    /// the clean set as the encoder path.
    pub fn scales_improved(&self) -> usize {
        self.per_scale_gap_transformer
            .iter()
            .zip(&self.per_scale_gap_encoder)
            .filter(|(t, e)| t <= e)
            .count()
    }

    /// True when [`Self::scales_improved`] covers more than half the scales.
    pub fn majority_improved(&self) -> bool {
        2 * self.scales_improved() > self.per_scale_gap_encoder.len()
    }
}

/// Default replacement patterns: prefixes `{1}, {1,2}, …, {1..K}`, then
/// suffixes `{K}, {K-1,K}, …, {2..K}`.
pub fn default_patterns(k: usize) -> Vec<ReplacementSet> {
    let mut out = Vec::with_capacity(2 * k - 1);
    for hi in 1..=k {
        out.push(ReplacementSet::new(1..=hi, k).expect("prefix in range"));
    }
    for lo in (2..=k).rev() {
        out.push(ReplacementSet::new(lo..=k, k).expect("suffix in range"));
    }
    out
}

/// One decoded grid cell of [`probe_sweep`].
#[derive(Debug, Clone)]
pub struct ProbeCell {
    pub pair_id: usize,
    pub degradation: String,
    pub pattern: String,
    pub output_path: PathBuf,
    pub psnr_vs_clean: f64,
}

/// For every (clean image, degradation, pattern): degrade, encode, predict
/// each scale from the encoded prefix, decode with the pattern's scales
/// replaced, and save the result. Writes one PNG per cell plus
/// `manifest.csv`, and returns the manifest rows. Fully deterministic given
/// the degradation seeds.
pub fn probe_sweep<F: Scalar>(
    store: &ParamStore<F>,
    msvq: &MsvqModel,
    var: &VarTransformer,
    cleans: &[ImageF],
    degradations: &[DegradationSpec],
    patterns: &[ReplacementSet],
    out_dir: &Path,
) -> Result<Vec<ProbeCell>> {
    std::fs::create_dir_all(out_dir)?;
    let codebook = msvq.codebook(store);
    let mut cells = Vec::with_capacity(cleans.len() * degradations.len() * patterns.len());

    for (pair_id, clean) in cleans.iter().enumerate() {
        for (di, spec) in degradations.iter().enumerate() {
            let degraded = apply(spec, clean)?;

            // encoder tokens of the degraded image, frozen weights
            let tokens = {
                let mut s: Session<'_, F> = Session::new(store, &[]);
                let img = s.g.constant(to_scalar_image::<F>(&degraded).into_dyn());
                let enc = msvq.encode(&mut s, img)?;
                msvq.quantize(&mut s, enc.latent)?.tokens
            };
            let enc_ms = tokens_to_maps(&tokens, &codebook, &msvq.schedule, Provenance::Encoder)?;
            let (_, pred_ms) = var.predict_all_scales(store, &codebook, &tokens, None)?;

            for pattern in patterns {
                let out = replace_and_decode(store, msvq, &enc_ms, &pred_ms, pattern)?;
                let img = to_f64_image(&out);
                let name = format!(
                    "pair{pair_id:02}_d{di}_{}_{}.png",
                    spec.family(),
                    pattern.label()
                );
                let output_path = out_dir.join(name);
                save_png(&output_path, &img)?;
                cells.push(ProbeCell {
                    pair_id,
                    degradation: spec.family().to_string(),
                    pattern: pattern.label(),
                    output_path,
                    psnr_vs_clean: psnr(clean, &img)?,
                });
            }
        }
    }

    let mut w = csv::Writer::from_path(out_dir.join("manifest.csv")).map_err(csv_err)?;
    w.write_record(["pair_id", "degradation", "pattern", "output_path", "psnr_vs_clean"])
        .map_err(csv_err)?;
    for c in &cells {
        w.write_record([
            c.pair_id.to_string(),
            c.degradation.clone(),
            c.pattern.clone(),
            c.output_path.display().to_string(),
            format!("{:.6}", c.psnr_vs_clean),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(cells)
}

/// Project each sample's scale-`k` mean feature vector of two sets onto
/// their joint top-two principal axes and write `set,sample,x,y` rows.
/// Deterministic: fixed-start power iteration, no randomness.
pub fn pca_scatter_csv<F: Scalar>(
    a: &[MultiScaleLatent<F>],
    b: &[MultiScaleLatent<F>],
    k: usize,
    out_path: &Path,
) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(VarError::domain("scatter needs non-empty sets"));
    }
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(a.len() + b.len());
    for ms in a {
        rows.push((0, sample_mean(ms, k)?));
    }
    for ms in b {
        rows.push((1, sample_mean(ms, k)?));
    }
    let d = rows[0].1.len();
    if rows.iter().any(|(_, v)| v.len() != d) {
        return Err(VarError::shape("inconsistent feature widths in sample sets"));
    }

    // center
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for (_, v) in &rows {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|(_, v)| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    // covariance (d ≤ a few dozen, samples a handful: dense is fine)
    let mut cov = vec![vec![0.0; d]; d];
    for v in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += v[i] * v[j];
            }
        }
    }
    let inv = 1.0 / (n.max(2) - 1) as f64;
    for row in &mut cov {
        for x in row.iter_mut() {
            *x *= inv;
        }
    }

    let p1 = top_eigenvector(&cov);
    deflate(&mut cov, &p1);
    let p2 = top_eigenvector(&cov);

    let mut w = csv::Writer::from_path(out_path).map_err(csv_err)?;
    w.write_record(["set", "sample", "x", "y"]).map_err(csv_err)?;
    for (i, ((set, _), v)) in rows.iter().zip(&centered).enumerate() {
        let x: f64 = v.iter().zip(&p1).map(|(a, b)| a * b).sum();
        let y: f64 = v.iter().zip(&p2).map(|(a, b)| a * b).sum();
        let name = if *set == 0 { "a" } else { "b" };
        w.write_record([name.to_string(), i.to_string(), format!("{x:.9}"), format!("{y:.9}")])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> VarError {
    VarError::data(format!("csv write failed: {e}"))
}

/// Dominant eigenvector by power iteration from a fixed start; the zero
/// vector when the matrix is (numerically) zero.
fn top_eigenvector(m: &[Vec<f64>]) -> Vec<f64> {
    let d = m.len();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    for _ in 0..256 {
        let mut next = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                next[i] += m[i][j] * v[j];
            }
        }
        let norm: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return vec![0.0; d];
        }
        for x in &mut next {
            *x /= norm;
        }
        v = next;
    }
    v
}

/// Remove a unit direction's component: `m -= λ v vᵀ` with `λ = vᵀ m v`.
fn deflate(m: &mut [Vec<f64>], v: &[f64]) {
    let d = m.len();
    let mut mv = vec![0.0; d];
    for i in 0..d {
        for j in 0..d {
            mv[i] += m[i][j] * v[j];
        }
    }
    let lambda: f64 = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
    for i in 0..d {
        for j in 0..d {
            m[i][j] -= lambda * v[i] * v[j];
        }
    }
}

/// `(3, H, W)` f64 image → scalar type `F`.
pub fn to_scalar_image<F: Scalar>(img: &ImageF) -> Array3<F> {
    img.mapv(F::cast)
}

/// `(3, H, W)` scalar image → f64 for metrics and PNG export.
pub fn to_f64_image<F: Scalar>(img: &Array3<F>) -> ImageF {
    img.mapv(|v| v.as_f64())
}
