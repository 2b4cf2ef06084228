//! Multi-scale residual vector-quantized autoencoder: a conv encoder to a
//! 16×16 latent, residual quantization across a coarse-to-fine scale
//! schedule against one shared codebook, and a conv decoder back to pixels.
//!
//! Scale indices are 1-based everywhere in this API (`k = 1..=K`), matching
//! the probe's replacement-set notation.

use crate::error::{Result, VarError};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, ParamStore, Session};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, ArrayD, ArrayView2, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Coarse-to-fine token grid sizes, ending at the latent resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSchedule {
    sizes: Vec<(usize, usize)>,
}

impl ScaleSchedule {
    /// Validates: K ≥ 2, first entry (1,1), strictly increasing in both
    /// dimensions, and every entry divides the final (latent) size — the
    /// divisibility is what makes block pooling between scales exact.
    pub fn new(sizes: Vec<(usize, usize)>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(VarError::shape("schedule needs K >= 2 scales"));
        }
        if sizes[0] != (1, 1) {
            return Err(VarError::shape("schedule must start at (1,1)"));
        }
        for w in sizes.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(VarError::shape(
                    "schedule sizes must be strictly increasing in both dimensions",
                ));
            }
        }
        let last = *sizes.last().unwrap();
        for &(h, w) in &sizes {
            if last.0 % h != 0 || last.1 % w != 0 {
                return Err(VarError::shape(format!(
                    "scale ({h},{w}) must divide the latent size ({},{})",
                    last.0, last.1
                )));
            }
        }
        Ok(ScaleSchedule { sizes })
    }

    /// The default five-scale schedule for a 16×16 latent.
    pub fn default_16() -> Self {
        ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4), (8, 8), (16, 16)]).unwrap()
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    /// Size of scale `k` (1-based).
    pub fn size(&self, k: usize) -> (usize, usize) {
        assert!(k >= 1 && k <= self.k(), "scale index {k} out of 1..={}", self.k());
        self.sizes[k - 1]
    }

    pub fn latent_size(&self) -> (usize, usize) {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[(usize, usize)] {
        &self.sizes
    }

    /// Token count over all scales.
    pub fn total_tokens(&self) -> usize {
        self.sizes.iter().map(|&(h, w)| h * w).sum()
    }

    /// 1-based scale index owning each flat token position.
    pub fn scale_of_positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_tokens());
        for (i, &(h, w)) in self.sizes.iter().enumerate() {
            out.extend(std::iter::repeat(i + 1).take(h * w));
        }
        out
    }
}

/// Shared quantization dictionary: `V` rows of dimension `d_code`.
#[derive(Debug, Clone)]
pub struct Codebook<F: Scalar> {
    entries: Array2<F>,
    contains_zero: bool,
}

impl<F: Scalar> Codebook<F> {
    pub fn new(entries: Array2<F>, contains_zero: bool) -> Result<Self> {
        if entries.nrows() < 2 {
            return Err(VarError::shape("codebook needs V >= 2 rows"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(VarError::domain("codebook entries must be finite"));
        }
        if contains_zero && entries.row(0).iter().any(|&v| v != F::zero()) {
            return Err(VarError::domain(
                "contains_zero requires row 0 to be exactly zero",
            ));
        }
        Ok(Codebook {
            entries,
            contains_zero,
        })
    }

    pub fn v(&self) -> usize {
        self.entries.nrows()
    }

    pub fn d(&self) -> usize {
        self.entries.ncols()
    }

    pub fn contains_zero(&self) -> bool {
        self.contains_zero
    }

    pub fn entries(&self) -> ArrayView2<'_, F> {
        self.entries.view()
    }
}

/// Integer token grid for one scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMap {
    /// 1-based scale index.
    pub scale_index: usize,
    pub indices: Array2<usize>,
}

impl TokenMap {
    /// Flat row-major token list.
    pub fn flat(&self) -> Vec<usize> {
        self.indices.iter().copied().collect()
    }
}

/// Where a set of per-scale feature maps came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Encoder,
    Transformer,
    Adapter,
}

/// Per-scale continuous feature maps, map `k` of shape `(d_code, h_k, w_k)`.
#[derive(Debug, Clone)]
pub struct MultiScaleLatent<F: Scalar> {
    pub per_scale: Vec<Array3<F>>,
    pub provenance: Provenance,
}

impl<F: Scalar> MultiScaleLatent<F> {
    pub fn validate(&self, schedule: &ScaleSchedule, d_code: usize) -> Result<()> {
        if self.per_scale.len() != schedule.k() {
            return Err(VarError::shape(format!(
                "expected {} scale maps, got {}",
                schedule.k(),
                self.per_scale.len()
            )));
        }
        for (i, m) in self.per_scale.iter().enumerate() {
            let (h, w) = schedule.size(i + 1);
            if m.dim() != (d_code, h, w) {
                return Err(VarError::shape(format!(
                    "scale {} map has shape {:?}, want ({d_code},{h},{w})",
                    i + 1,
                    m.dim()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(VarError::domain(format!("scale {} map not finite", i + 1)));
            }
        }
        Ok(())
    }
}

/// Nearest codebook row by squared Euclidean distance; ties break to the
/// lowest index. This IS the exhaustive scan — no shortcut arithmetic, so
/// oracle comparisons are exact.
pub fn nn_lookup<F: Scalar>(query: &[F], codebook: &Codebook<F>) -> Result<usize> {
    if query.iter().any(|v| !v.is_finite()) {
        return Err(VarError::domain("nn_lookup query must be finite"));
    }
    assert_eq!(query.len(), codebook.d(), "query dimension mismatch");
    let entries = codebook.entries();
    let mut best = 0usize;
    let mut best_d = F::infinity();
    for (i, row) in entries.rows().into_iter().enumerate() {
        let mut d = F::zero();
        for (q, c) in query.iter().zip(row.iter()) {
            let diff = *q - *c;
            d = d + diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// Token indices for every position of a `(d_code, h, w)` map, row-major.
fn lookup_grid<F: Scalar>(map: &ArrayD<F>, codebook: &Codebook<F>) -> Result<Vec<usize>> {
    let shape = map.shape();
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let mut idx = Vec::with_capacity(h * w);
    let mut q = vec![F::zero(); d];
    for y in 0..h {
        for x in 0..w {
            for c in 0..d {
                q[c] = map[IxDyn(&[c, y, x])];
            }
            idx.push(nn_lookup(&q, codebook)?);
        }
    }
    Ok(idx)
}

/// Dequantized `(d_code, h, w)` map from flat tokens.
fn dequantize_grid<F: Scalar>(
    idx: &[usize],
    codebook: &Codebook<F>,
    h: usize,
    w: usize,
) -> Array3<F> {
    let d = codebook.d();
    let entries = codebook.entries();
    let mut out = Array3::<F>::zeros((d, h, w));
    for (t, &i) in idx.iter().enumerate() {
        for c in 0..d {
            out[[c, t / w, t % w]] = entries[[i, c]];
        }
    }
    out
}

/// Dequantize one token map to its `(d_code, h_k, w_k)` feature map.
pub fn dequantize_tokens<F: Scalar>(
    tokens: &TokenMap,
    codebook: &Codebook<F>,
    schedule: &ScaleSchedule,
) -> Result<Array3<F>> {
    let (h, w) = schedule.size(tokens.scale_index);
    if tokens.indices.dim() != (h, w) {
        return Err(VarError::shape(format!(
            "token map for scale {} has shape {:?}, want ({h},{w})",
            tokens.scale_index,
            tokens.indices.dim()
        )));
    }
    if let Some(&i) = tokens.indices.iter().find(|&&i| i >= codebook.v()) {
        return Err(VarError::domain(format!(
            "token index {i} outside codebook of {} rows",
            codebook.v()
        )));
    }
    Ok(dequantize_grid(&tokens.flat(), codebook, h, w))
}

/// Convert token maps back to per-scale dequantized feature maps.
pub fn tokens_to_maps<F: Scalar>(
    tokens: &[TokenMap],
    codebook: &Codebook<F>,
    schedule: &ScaleSchedule,
    provenance: Provenance,
) -> Result<MultiScaleLatent<F>> {
    if tokens.len() != schedule.k() {
        return Err(VarError::shape("token map count mismatch"));
    }
    let mut per_scale = Vec::with_capacity(tokens.len());
    for (i, tm) in tokens.iter().enumerate() {
        let (h, w) = schedule.size(i + 1);
        if tm.indices.dim() != (h, w) {
            return Err(VarError::shape(format!("token map {} shape mismatch", i + 1)));
        }
        per_scale.push(dequantize_grid(&tm.flat(), codebook, h, w));
    }
    Ok(MultiScaleLatent {
        per_scale,
        provenance,
    })
}

/// Graph-level residual quantization output.
pub struct QuantizeOut {
    pub tokens: Vec<TokenMap>,
    /// Per-scale straight-through nodes, shape `(d_code, h_k, w_k)`:
    /// values are the dequantized maps, gradients pass to the residual path.
    pub deq_scales: Vec<Var>,
    /// Σ_k upsample(deq_k): the quantized approximation of the latent.
    pub latent_q: Var,
    /// Codebook pull + 0.25·commitment, summed over scales.
    pub vq_loss: Var,
}

/// Residual quantization against the codebook bound at `cb_var`.
///
/// Per scale: block-average the running residual down to `(h_k, w_k)`,
/// quantize every position, replicate the dequantized map back up, subtract.
/// Block pooling (not interpolation) is what makes the residual norm
/// provably non-increasing when the zero codeword is available.
pub fn residual_quantize_graph<F: Scalar>(
    s: &mut Session<F>,
    latent: Var,
    cb_var: Var,
    codebook: &Codebook<F>,
    schedule: &ScaleSchedule,
) -> Result<QuantizeOut> {
    let (hl, wl) = schedule.latent_size();
    let shape = s.g.shape(latent).to_vec();
    if shape != [codebook.d(), hl, wl] {
        return Err(VarError::shape(format!(
            "latent shape {shape:?}, want [{}, {hl}, {wl}]",
            codebook.d()
        )));
    }
    let mut residual = latent;
    let mut tokens = Vec::with_capacity(schedule.k());
    let mut deq_scales = Vec::with_capacity(schedule.k());
    let mut latent_q: Option<Var> = None;
    let mut vq_loss: Option<Var> = None;
    for k in 1..=schedule.k() {
        let (h, w) = schedule.size(k);
        let down = s.g.avg_pool_to(residual, h, w);
        let idx = lookup_grid(s.g.value(down), codebook)?;
        let deq_value = dequantize_grid(&idx, codebook, h, w);

        // codebook pull: selected rows move toward the (frozen) pooled residual
        let rows = s.g.gather_rows(cb_var, idx.clone());
        let deq_graph = s.g.tc_to_chw(rows, h, w);
        let down_frozen = s.g.detach(down);
        let pull = s.g.mse(deq_graph, down_frozen);
        // commitment: the encoder is pulled toward the selected codewords
        let deq_const = s.g.constant(deq_value.clone().into_dyn());
        let commit = s.g.mse(down, deq_const);
        let commit = s.g.scale(commit, 0.25);
        let term = s.g.add(pull, commit);
        vq_loss = Some(match vq_loss {
            Some(acc) => s.g.add(acc, term),
            None => term,
        });

        // straight-through: value is the dequantized map, gradient is identity
        let ste = s.g.straight_through(down, deq_value.into_dyn());
        deq_scales.push(ste);
        let up = s.g.upsample_replicate(ste, hl, wl);
        latent_q = Some(match latent_q {
            Some(acc) => s.g.add(acc, up),
            None => up,
        });
        residual = s.g.sub(residual, up);

        tokens.push(TokenMap {
            scale_index: k,
            indices: Array2::from_shape_vec((h, w), idx).unwrap(),
        });
    }
    Ok(QuantizeOut {
        tokens,
        deq_scales,
        latent_q: latent_q.unwrap(),
        vq_loss: vq_loss.unwrap(),
    })
}

/// Value-level residual quantization (no gradients, no session).
pub fn residual_quantize<F: Scalar>(
    latent: &Array3<F>,
    schedule: &ScaleSchedule,
    codebook: &Codebook<F>,
) -> Result<(Vec<TokenMap>, MultiScaleLatent<F>)> {
    let store: ParamStore<F> = ParamStore::new();
    let mut s = Session::new(&store, &[]);
    let latent_var = s.g.constant(latent.clone().into_dyn());
    let cb_var = s.g.constant(codebook.entries().to_owned().into_dyn());
    let out = residual_quantize_graph(&mut s, latent_var, cb_var, codebook, schedule)?;
    let per_scale = out
        .deq_scales
        .iter()
        .map(|&v| {
            s.g.value(v)
                .clone()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap()
        })
        .collect();
    Ok((
        out.tokens,
        MultiScaleLatent {
            per_scale,
            provenance: Provenance::Encoder,
        },
    ))
}

/// Sum the selected per-scale maps (1-based selector), each replicated up to
/// the latent grid. Empty selector → zero grid. One shared implementation
/// serves the probe and training, so selector identities hold bit-exactly.
pub fn accumulate_graph<F: Scalar>(
    g: &mut Graph<F>,
    scale_maps: &[Var],
    selector: &[usize],
    schedule: &ScaleSchedule,
    d_code: usize,
) -> Result<Var> {
    let (hl, wl) = schedule.latent_size();
    for &k in selector {
        if k < 1 || k > schedule.k() {
            return Err(VarError::domain(format!(
                "selector index {k} outside 1..={}",
                schedule.k()
            )));
        }
    }
    let mut acc: Option<Var> = None;
    // iterate in scale order so duplicates in the selector are harmless
    for k in 1..=schedule.k() {
        if !selector.contains(&k) {
            continue;
        }
        let up = g.upsample_replicate(scale_maps[k - 1], hl, wl);
        acc = Some(match acc {
            Some(a) => g.add(a, up),
            None => up,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(ArrayD::zeros(IxDyn(&[d_code, hl, wl])))))
}

/// Value-level accumulate over a [`MultiScaleLatent`].
pub fn accumulate<F: Scalar>(
    ms: &MultiScaleLatent<F>,
    schedule: &ScaleSchedule,
    selector: &[usize],
) -> Result<Array3<F>> {
    let d_code = ms.per_scale[0].dim().0;
    ms.validate(schedule, d_code)?;
    let mut g: Graph<F> = Graph::new();
    let maps: Vec<Var> = ms
        .per_scale
        .iter()
        .map(|m| g.constant(m.clone().into_dyn()))
        .collect();
    let out = accumulate_graph(&mut g, &maps, selector, schedule, d_code)?;
    Ok(g.value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap())
}

/// Encoder features exposed for downstream guidance, coarsest last.
#[derive(Debug)]
pub struct EncodeOut {
    pub latent: Var,
    /// Levels at full, half, quarter resolution with [`PYRAMID_CHANNELS`].
    pub pyramid: Vec<Var>,
}

/// Channel widths of the encoder pyramid levels (full → quarter resolution).
pub const PYRAMID_CHANNELS: [usize; 3] = [24, 48, 96];

/// Total spatial downsampling factor of the autoencoder.
pub const DOWN_FACTOR: usize = 4;

/// The autoencoder + codebook parameter family ("msvq/…").
pub struct MsvqModel {
    pub schedule: ScaleSchedule,
    pub v: usize,
    pub d_code: usize,
    enc: Vec<Conv2d>,
    latent_head: Conv2d,
    dec_head: Conv2d,
    dec: Vec<Conv2d>,
    out_conv: Conv2d,
}

impl MsvqModel {
    pub const CODEBOOK: &'static str = "msvq/codebook";

    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        schedule: ScaleSchedule,
        v: usize,
        d_code: usize,
    ) -> Self {
        let [c1, c2, c3] = PYRAMID_CHANNELS;
        let enc = vec![
            Conv2d::init(store, rng, "msvq/enc/c0", 3, c1, 3, 1, 1, true),
            Conv2d::init(store, rng, "msvq/enc/c1", c1, c2, 3, 2, 1, true),
            Conv2d::init(store, rng, "msvq/enc/c2", c2, c2, 3, 1, 1, true),
            Conv2d::init(store, rng, "msvq/enc/c3", c2, c3, 3, 2, 1, true),
            Conv2d::init(store, rng, "msvq/enc/c4", c3, c3, 3, 1, 1, true),
        ];
        let latent_head = Conv2d::init(store, rng, "msvq/enc/head", c3, d_code, 1, 1, 0, true);
        let dec_head = Conv2d::init(store, rng, "msvq/dec/head", d_code, c3, 1, 1, 0, true);
        let dec = vec![
            Conv2d::init(store, rng, "msvq/dec/c0", c3, c2, 3, 1, 1, true),
            Conv2d::init(store, rng, "msvq/dec/c1", c2, c1, 3, 1, 1, true),
            Conv2d::init(store, rng, "msvq/dec/c2", c1, c1, 3, 1, 1, true),
        ];
        let out_conv = Conv2d::init(store, rng, "msvq/dec/out", c1, 3, 3, 1, 1, true);

        // codebook with row 0 pinned to zero
        let mut entries = crate::nn::normal_init::<F>(rng, &[v, d_code], 0.2);
        for c in 0..d_code {
            entries[[0, c]] = F::zero();
        }
        store.insert(Self::CODEBOOK, entries);

        MsvqModel {
            schedule,
            v,
            d_code,
            enc,
            latent_head,
            dec_head,
            dec,
            out_conv,
        }
    }

    /// Current codebook snapshot from the store.
    pub fn codebook<F: Scalar>(&self, store: &ParamStore<F>) -> Codebook<F> {
        let entries = store
            .get(Self::CODEBOOK)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        Codebook::new(entries, true).expect("stored codebook is valid")
    }

    /// Image `(3, H, W)` → latent `(d_code, H/4, W/4)` plus the pyramid.
    pub fn encode<F: Scalar>(&self, s: &mut Session<F>, image: Var) -> Result<EncodeOut> {
        let shape = s.g.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(VarError::shape(format!("encode wants (3,H,W), got {shape:?}")));
        }
        if shape[1] % DOWN_FACTOR != 0 || shape[2] % DOWN_FACTOR != 0 {
            return Err(VarError::shape(format!(
                "encode needs H and W divisible by {DOWN_FACTOR}, got {}x{}",
                shape[1], shape[2]
            )));
        }
        let mut pyramid = Vec::with_capacity(3);
        let x = self.enc[0].forward(s, image);
        let x = s.g.silu(x);
        pyramid.push(x);
        let x = self.enc[1].forward(s, x);
        let x = s.g.silu(x);
        let x = self.enc[2].forward(s, x);
        let x = s.g.silu(x);
        pyramid.push(x);
        let x = self.enc[3].forward(s, x);
        let x = s.g.silu(x);
        let x = self.enc[4].forward(s, x);
        let x = s.g.silu(x);
        pyramid.push(x);
        let latent = self.latent_head.forward(s, x);
        Ok(EncodeOut { latent, pyramid })
    }

    /// Latent `(d_code, H_lat, W_lat)` → image `(3, 4·H_lat, 4·W_lat)` in (0,1).
    pub fn decode<F: Scalar>(&self, s: &mut Session<F>, latent: Var) -> Result<Var> {
        let shape = s.g.shape(latent).to_vec();
        let (hl, wl) = self.schedule.latent_size();
        if shape != [self.d_code, hl, wl] {
            return Err(VarError::shape(format!(
                "decode wants [{}, {hl}, {wl}], got {shape:?}",
                self.d_code
            )));
        }
        if s.g.value(latent).iter().any(|v| !v.is_finite()) {
            return Err(VarError::domain("decode input must be finite"));
        }
        let x = self.dec_head.forward(s, latent);
        let x = s.g.silu(x);
        let x = self.dec[0].forward(s, x);
        let x = s.g.silu(x);
        let x = s.g.resize_bilinear(x, hl * 2, wl * 2);
        let x = self.dec[1].forward(s, x);
        let x = s.g.silu(x);
        let x = s.g.resize_bilinear(x, hl * 4, wl * 4);
        let x = self.dec[2].forward(s, x);
        let x = s.g.silu(x);
        let x = self.out_conv.forward(s, x);
        Ok(s.g.sigmoid(x))
    }

    /// Graph-level residual quantization using the stored codebook.
    pub fn quantize<F: Scalar>(&self, s: &mut Session<F>, latent: Var) -> Result<QuantizeOut> {
        let cb_var = s.p(Self::CODEBOOK);
        let entries = s
            .g
            .value(cb_var)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let codebook = Codebook::new(entries, true)?;
        residual_quantize_graph(s, latent, cb_var, &codebook, &self.schedule)
    }
}
