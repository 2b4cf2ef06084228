//! Block-causal next-scale autoregressive transformer over token maps.
//!
//! Positions are grouped by scale: attention is full within a scale and
//! causal across scales (scale k sees scales ≤ k). The input for scale k is
//! the accumulated dequantized reconstruction of scales < k, resized to the
//! scale-k grid; scale 1 starts from a learned embedding. Externally supplied
//! multi-scale features can be injected through per-scale cross-attention
//! whose output projection starts at zero (a no-op until trained).

use crate::error::{Result, VarError};
use crate::msvq::{
    accumulate_graph, dequantize_tokens, Codebook, MultiScaleLatent, Provenance, ScaleSchedule,
    TokenMap,
};
use crate::nn::{LayerNorm, Linear, Mha, ParamStore, Session, MASK_BLOCK};
use crate::scalar::Scalar;
use crate::graph::Var;
use ndarray::{Array2, Array3, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Flattened token sequence over all scales, with span bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSequence {
    /// All tokens in scale order, each scale row-major.
    pub tokens: Vec<usize>,
    /// Start offset of each scale's span; strictly increasing.
    pub starts: Vec<usize>,
}

impl ScaleSequence {
    pub fn from_maps(maps: &[TokenMap], schedule: &ScaleSchedule) -> Result<Self> {
        if maps.len() != schedule.k() {
            return Err(VarError::shape(format!(
                "expected {} token maps, got {}",
                schedule.k(),
                maps.len()
            )));
        }
        let mut tokens = Vec::with_capacity(schedule.total_tokens());
        let mut starts = Vec::with_capacity(schedule.k());
        for (i, m) in maps.iter().enumerate() {
            let (h, w) = schedule.size(i + 1);
            if m.indices.dim() != (h, w) {
                return Err(VarError::shape(format!("token map {} shape mismatch", i + 1)));
            }
            starts.push(tokens.len());
            tokens.extend(m.indices.iter().copied());
        }
        Ok(ScaleSequence { tokens, starts })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Half-open token range of scale `k` (1-based).
    pub fn span(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.starts[k - 1];
        let end = self
            .starts
            .get(k)
            .copied()
            .unwrap_or_else(|| self.tokens.len());
        start..end
    }
}

/// Allowed-attention matrix: entry `(i, j)` is true iff the scale owning
/// position `j` is ≤ the scale owning position `i`.
pub fn block_causal_mask(schedule: &ScaleSchedule) -> Array2<bool> {
    let owners = schedule.scale_of_positions();
    let t = owners.len();
    Array2::from_shape_fn((t, t), |(i, j)| owners[j] <= owners[i])
}

/// Additive form of the mask: 0 where allowed, a large negative constant
/// where blocked (softmax weight underflows to exactly zero).
pub fn additive_mask<F: Scalar>(schedule: &ScaleSchedule) -> Array2<F> {
    block_causal_mask(schedule).map(|&ok| if ok { F::zero() } else { F::cast(MASK_BLOCK) })
}

/// Index of the row maximum; ties break to the lowest index.
pub fn argmax_lowest<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Block {
    ln1: LayerNorm,
    attn: Mha,
    lnc: LayerNorm,
    cross: Mha,
    ln2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
}

/// The autoregressive prior parameter family ("var/…").
pub struct VarTransformer {
    pub schedule: ScaleSchedule,
    pub v: usize,
    pub d_code: usize,
    pub d_model: usize,
    blocks: Vec<Block>,
    in_proj: Linear,
    inject: Linear,
    ln_f: LayerNorm,
    head: Linear,
}

impl VarTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        schedule: ScaleSchedule,
        v: usize,
        d_code: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
    ) -> Self {
        let blocks = (0..n_layers)
            .map(|i| Block {
                ln1: LayerNorm::init(store, &format!("var/l{i}/ln1"), d_model),
                attn: Mha::init(store, rng, &format!("var/l{i}/attn"), d_model, n_heads, false),
                lnc: LayerNorm::init(store, &format!("var/l{i}/lnc"), d_model),
                // zero output projection: injection starts as a no-op
                cross: Mha::init(store, rng, &format!("var/l{i}/cross"), d_model, n_heads, true),
                ln2: LayerNorm::init(store, &format!("var/l{i}/ln2"), d_model),
                mlp1: Linear::init(store, rng, &format!("var/l{i}/mlp1"), d_model, 2 * d_model, true),
                mlp2: Linear::init(store, rng, &format!("var/l{i}/mlp2"), 2 * d_model, d_model, true),
            })
            .collect();
        let in_proj = Linear::init(store, rng, "var/in_proj", d_code, d_model, true);
        let inject = Linear::init(store, rng, "var/inject", d_code, d_model, true);
        let ln_f = LayerNorm::init(store, "var/ln_f", d_model);
        let head = Linear::init(store, rng, "var/head", d_model, v, true);

        let (hl, wl) = schedule.latent_size();
        store.insert("var/start", crate::nn::normal_init::<F>(rng, &[1, d_model], 0.02));
        store.insert(
            "var/pos/scale",
            crate::nn::normal_init::<F>(rng, &[schedule.k(), d_model], 0.02),
        );
        store.insert("var/pos/row", crate::nn::normal_init::<F>(rng, &[hl, d_model], 0.02));
        store.insert("var/pos/col", crate::nn::normal_init::<F>(rng, &[wl, d_model], 0.02));

        VarTransformer {
            schedule,
            v,
            d_code,
            d_model,
            blocks,
            in_proj,
            inject,
            ln_f,
            head,
        }
    }

    fn check_maps<F: Scalar>(&self, s: &Session<F>, maps: &[Var], what: &str) -> Result<()> {
        if maps.len() != self.schedule.k() {
            return Err(VarError::shape(format!(
                "{what}: expected {} scale maps, got {}",
                self.schedule.k(),
                maps.len()
            )));
        }
        for (i, &m) in maps.iter().enumerate() {
            let (h, w) = self.schedule.size(i + 1);
            if s.g.shape(m) != [self.d_code, h, w] {
                return Err(VarError::shape(format!(
                    "{what}: scale {} map has shape {:?}, want [{}, {h}, {w}]",
                    i + 1,
                    s.g.shape(m),
                    self.d_code
                )));
            }
        }
        Ok(())
    }

    /// Teacher-forced logits `(T, V)`.
    ///
    /// `scale_maps[k]` is the dequantized `(d_code, h_k, w_k)` map of scale
    /// k+1; the input embedding for scale k is built from maps of scales < k
    /// only, so logits at scale k are predictions given the prefix. When
    /// `ctx` is given, scale-k queries additionally cross-attend to the
    /// injected map of the same scale.
    pub fn forward_teacher_forced<F: Scalar>(
        &self,
        s: &mut Session<F>,
        scale_maps: &[Var],
        ctx: Option<&[Var]>,
    ) -> Result<Var> {
        self.check_maps(s, scale_maps, "sequence")?;
        if let Some(c) = ctx {
            self.check_maps(s, c, "injection")?;
        }
        let k_total = self.schedule.k();
        let (hl, wl) = self.schedule.latent_size();

        // per-scale input embeddings
        let mut spans = Vec::with_capacity(k_total);
        for k in 1..=k_total {
            let (h, w) = self.schedule.size(k);
            let mut x = if k == 1 {
                s.p("var/start")
            } else {
                let prefix: Vec<usize> = (1..k).collect();
                let acc =
                    accumulate_graph(&mut s.g, scale_maps, &prefix, &self.schedule, self.d_code)?;
                let resized = s.g.resize_bilinear(acc, h, w);
                let tokens = s.g.chw_to_tc(resized);
                self.in_proj.forward(s, tokens)
            };
            // positional terms: scale embedding + within-scale 2D embedding
            // sampled from the latent-grid tables at the scale's stride
            let (sy, sx) = (hl / h, wl / w);
            let mut rows = Vec::with_capacity(h * w);
            let mut cols = Vec::with_capacity(h * w);
            for y in 0..h {
                for xw in 0..w {
                    rows.push(y * sy);
                    cols.push(xw * sx);
                }
            }
            let row_t = s.p("var/pos/row");
            let col_t = s.p("var/pos/col");
            let scale_t = s.p("var/pos/scale");
            let re = s.g.gather_rows(row_t, rows);
            let ce = s.g.gather_rows(col_t, cols);
            let se = s.g.gather_rows(scale_t, vec![k - 1; h * w]);
            x = s.g.add(x, re);
            x = s.g.add(x, ce);
            x = s.g.add(x, se);
            spans.push(x);
        }
        let mut x = s.g.concat(&spans, 0);

        let mask = additive_mask::<F>(&self.schedule);
        let starts: Vec<usize> = {
            let mut v = Vec::with_capacity(k_total);
            let mut acc = 0;
            for k in 1..=k_total {
                v.push(acc);
                let (h, w) = self.schedule.size(k);
                acc += h * w;
            }
            v
        };
        let total = self.schedule.total_tokens();

        for b in &self.blocks {
            let n = b.ln1.forward(s, x);
            let a = b.attn.forward(s, n, n, Some(&mask));
            x = s.g.add(x, a);

            if let Some(cmaps) = ctx {
                let n = b.lnc.forward(s, x);
                let mut outs = Vec::with_capacity(k_total);
                for k in 1..=k_total {
                    let lo = starts[k - 1];
                    let hi = if k == k_total { total } else { starts[k] };
                    let q = s.g.slice_axis(n, 0, lo, hi);
                    let kv_tokens = s.g.chw_to_tc(cmaps[k - 1]);
                    let kv = self.inject.forward(s, kv_tokens);
                    outs.push(b.cross.forward(s, q, kv, None));
                }
                let c = s.g.concat(&outs, 0);
                x = s.g.add(x, c);
            }

            let n = b.ln2.forward(s, x);
            let m = self_mlp(s, b, n);
            x = s.g.add(x, m);
        }
        let x = self.ln_f.forward(s, x);
        Ok(self.head.forward(s, x))
    }

    /// Greedy token map for scale `prefix.len()+1` given decoded prefix maps,
    /// with the frozen parameter store. Returns the map and its dequantized
    /// features.
    pub fn predict_scale_features<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        codebook: &Codebook<F>,
        prefix: &[TokenMap],
        ctx: Option<&MultiScaleLatent<F>>,
    ) -> Result<(TokenMap, Array3<F>)> {
        let k = prefix.len() + 1;
        if k > self.schedule.k() {
            return Err(VarError::shape(format!(
                "prefix already covers all {} scales",
                self.schedule.k()
            )));
        }
        let mut s: Session<'_, F> = Session::new(store, &[]);
        let mut maps = Vec::with_capacity(self.schedule.k());
        for j in 1..=self.schedule.k() {
            let (h, w) = self.schedule.size(j);
            let arr = if j < k {
                dequantize_tokens(&prefix[j - 1], codebook, &self.schedule)?
            } else {
                // future scales: placeholders that causality keeps invisible
                Array3::<F>::zeros((self.d_code, h, w))
            };
            maps.push(s.g.constant(arr.into_dyn()));
        }
        let ctx_vars = match ctx {
            Some(ms) => {
                ms.validate(&self.schedule, self.d_code)?;
                Some(
                    ms.per_scale
                        .iter()
                        .map(|m| s.g.constant(m.clone().into_dyn()))
                        .collect::<Vec<_>>(),
                )
            }
            None => None,
        };
        let logits = self.forward_teacher_forced(&mut s, &maps, ctx_vars.as_deref())?;
        let lv = s.g.value(logits);
        let (h, w) = self.schedule.size(k);
        let start: usize = (1..k)
            .map(|j| {
                let (hj, wj) = self.schedule.size(j);
                hj * wj
            })
            .sum();
        let mut idx = Vec::with_capacity(h * w);
        for t in 0..h * w {
            let row: Vec<F> = (0..self.v).map(|c| lv[IxDyn(&[start + t, c])]).collect();
            idx.push(argmax_lowest(&row));
        }
        let tm = TokenMap {
            scale_index: k,
            indices: Array2::from_shape_vec((h, w), idx).unwrap(),
        };
        let deq = dequantize_tokens(&tm, codebook, &self.schedule)?;
        Ok((tm, deq))
    }

    /// Per-scale greedy predictions, each conditioned on the *reference*
    /// prefix (not on earlier predictions): one teacher-forced pass over
    /// `reference`, argmax within every scale span. Equivalent to calling
    /// [`Self::predict_scale_features`] once per scale with the reference
    /// prefix, but K× cheaper.
    pub fn predict_all_scales<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        codebook: &Codebook<F>,
        reference: &[TokenMap],
        ctx: Option<&MultiScaleLatent<F>>,
    ) -> Result<(Vec<TokenMap>, MultiScaleLatent<F>)> {
        if reference.len() != self.schedule.k() {
            return Err(VarError::shape(format!(
                "reference must cover all {} scales",
                self.schedule.k()
            )));
        }
        let mut s: Session<'_, F> = Session::new(store, &[]);
        let mut maps = Vec::with_capacity(self.schedule.k());
        for tm in reference {
            let arr = dequantize_tokens(tm, codebook, &self.schedule)?;
            maps.push(s.g.constant(arr.into_dyn()));
        }
        let ctx_vars = match ctx {
            Some(ms) => {
                ms.validate(&self.schedule, self.d_code)?;
                Some(
                    ms.per_scale
                        .iter()
                        .map(|m| s.g.constant(m.clone().into_dyn()))
                        .collect::<Vec<_>>(),
                )
            }
            None => None,
        };
        let logits = self.forward_teacher_forced(&mut s, &maps, ctx_vars.as_deref())?;
        let lv = s.g.value(logits);

        let mut tokens = Vec::with_capacity(self.schedule.k());
        let mut per_scale = Vec::with_capacity(self.schedule.k());
        let mut start = 0;
        for k in 1..=self.schedule.k() {
            let (h, w) = self.schedule.size(k);
            let mut idx = Vec::with_capacity(h * w);
            for t in 0..h * w {
                let row: Vec<F> = (0..self.v).map(|c| lv[IxDyn(&[start + t, c])]).collect();
                idx.push(argmax_lowest(&row));
            }
            start += h * w;
            let tm = TokenMap {
                scale_index: k,
                indices: Array2::from_shape_vec((h, w), idx).unwrap(),
            };
            per_scale.push(dequantize_tokens(&tm, codebook, &self.schedule)?);
            tokens.push(tm);
        }
        Ok((
            tokens,
            MultiScaleLatent {
                per_scale,
                provenance: Provenance::Transformer,
            },
        ))
    }

    /// Full greedy K-scale decode: the transformer-predicted token maps and
    /// their dequantized multi-scale features.
    pub fn greedy_decode<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        codebook: &Codebook<F>,
        ctx: Option<&MultiScaleLatent<F>>,
    ) -> Result<(Vec<TokenMap>, MultiScaleLatent<F>)> {
        let mut tokens: Vec<TokenMap> = Vec::with_capacity(self.schedule.k());
        let mut per_scale = Vec::with_capacity(self.schedule.k());
        for _ in 0..self.schedule.k() {
            let (tm, deq) = self.predict_scale_features(store, codebook, &tokens, ctx)?;
            tokens.push(tm);
            per_scale.push(deq);
        }
        Ok((
            tokens,
            MultiScaleLatent {
                per_scale,
                provenance: Provenance::Transformer,
            },
        ))
    }
}

fn self_mlp<F: Scalar>(s: &mut Session<F>, b: &Block, n: Var) -> Var {
    let h = b.mlp1.forward(s, n);
    let h = s.g.silu(h);
    b.mlp2.forward(s, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_for;
    use ndarray::ArrayD;

    fn tiny_schedule() -> ScaleSchedule {
        ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)]).unwrap()
    }

    fn toy_codebook(v: usize, d: usize, seed: u64) -> Codebook<f32> {
        let mut rng = rng_for(seed, 0);
        let mut entries = crate::nn::normal_init::<f32>(&mut rng, &[v, d], 1.0)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for c in 0..d {
            entries[[0, c]] = 0.0;
        }
        Codebook::new(entries, true).unwrap()
    }

    fn random_maps(schedule: &ScaleSchedule, d_code: usize, seed: u64) -> Vec<Array3<f32>> {
        let mut rng = rng_for(seed, 0);
        (1..=schedule.k())
            .map(|k| {
                let (h, w) = schedule.size(k);
                crate::nn::normal_init::<f32>(&mut rng, &[d_code, h, w], 1.0)
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
            })
            .collect()
    }

    fn forward_values(
        model: &VarTransformer,
        store: &ParamStore<f32>,
        maps: &[Array3<f32>],
        ctx: Option<&[Array3<f32>]>,
    ) -> ndarray::ArrayD<f32> {
        let mut s = Session::new(store, &[]);
        let vars: Vec<Var> = maps
            .iter()
            .map(|m| s.g.constant(m.clone().into_dyn()))
            .collect();
        let ctx_vars: Option<Vec<Var>> = ctx.map(|c| {
            c.iter()
                .map(|m| s.g.constant(m.clone().into_dyn()))
                .collect()
        });
        let logits = model
            .forward_teacher_forced(&mut s, &vars, ctx_vars.as_deref())
            .unwrap();
        s.g.value(logits).clone()
    }

    #[test]
    fn mask_matches_definition() {
        let schedule = ScaleSchedule::new(vec![(1, 1), (2, 2)]).unwrap();
        let m = block_causal_mask(&schedule);
        assert_eq!(m.dim(), (5, 5));
        // first scale sees only itself
        assert!(m[[0, 0]]);
        for j in 1..5 {
            assert!(!m[[0, j]]);
        }
        // second scale sees everything
        for i in 1..5 {
            for j in 0..5 {
                assert!(m[[i, j]]);
            }
        }
        // entries depend only on the (scale(i), scale(j)) pair
        let owners = schedule.scale_of_positions();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m[[i, j]], owners[j] <= owners[i]);
            }
        }
    }

    #[test]
    fn sequence_spans() {
        let schedule = tiny_schedule();
        let maps: Vec<TokenMap> = (1..=3)
            .map(|k| {
                let (h, w) = schedule.size(k);
                TokenMap {
                    scale_index: k,
                    indices: Array2::zeros((h, w)),
                }
            })
            .collect();
        let seq = ScaleSequence::from_maps(&maps, &schedule).unwrap();
        assert_eq!(seq.len(), 21);
        assert_eq!(seq.starts, vec![0, 1, 5]);
        assert_eq!(seq.span(1), 0..1);
        assert_eq!(seq.span(2), 1..5);
        assert_eq!(seq.span(3), 5..21);
    }

    #[test]
    fn logits_shape_and_determinism() {
        let schedule = tiny_schedule();
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = rng_for(30, 0);
        let model =
            VarTransformer::init(&mut store, &mut rng, schedule.clone(), 16, 4, 16, 2, 2);
        let maps = random_maps(&schedule, 4, 31);
        let a = forward_values(&model, &store, &maps, None);
        let b = forward_values(&model, &store, &maps, None);
        assert_eq!(a.shape(), &[21, 16]);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn block_causality_under_perturbation() {
        let schedule = tiny_schedule();
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = rng_for(32, 0);
        let model =
            VarTransformer::init(&mut store, &mut rng, schedule.clone(), 16, 4, 16, 2, 2);
        let maps = random_maps(&schedule, 4, 33);
        let base = forward_values(&model, &store, &maps, None);

        for k in 1..=schedule.k() {
            let mut pert = maps.clone();
            pert[k - 1].mapv_inplace(|v| v + 7.5);
            let out = forward_values(&model, &store, &pert, None);
            let end: usize = (1..=k)
                .map(|j| {
                    let (h, w) = schedule.size(j);
                    h * w
                })
                .sum();
            // logits for scales <= k are bit-identical
            for t in 0..end {
                for c in 0..16 {
                    let d = (base[IxDyn(&[t, c])] - out[IxDyn(&[t, c])]).abs();
                    assert_eq!(d, 0.0, "scale {k}: leak at token {t}, class {c}");
                }
            }
            // and scales > k actually see the change
            if k < schedule.k() {
                let later = (end..21)
                    .any(|t| (0..16).any(|c| base[IxDyn(&[t, c])] != out[IxDyn(&[t, c])]));
                assert!(later, "perturbing scale {k} should reach later scales");
            }
        }
    }

    #[test]
    fn zeroed_injection_is_inert_and_trained_injection_is_not() {
        let schedule = tiny_schedule();
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = rng_for(34, 0);
        let model =
            VarTransformer::init(&mut store, &mut rng, schedule.clone(), 16, 4, 16, 2, 2);
        let maps = random_maps(&schedule, 4, 35);
        let ctx = random_maps(&schedule, 4, 36);

        // fresh init: cross-attention output projections are zero
        let off = forward_values(&model, &store, &maps, None);
        let on = forward_values(&model, &store, &maps, Some(&ctx));
        assert_eq!(off, on, "zeroed injection must be a no-op");

        // give the first block's cross output projection real weights
        let w = crate::nn::normal_init::<f32>(&mut rng, &[16, 16], 0.5);
        store.set("var/l0/cross/wo", w);
        let on2 = forward_values(&model, &store, &maps, Some(&ctx));
        assert_ne!(off, on2, "nonzero injection must change logits");
    }

    #[test]
    fn greedy_prediction_matches_argmax() {
        let schedule = tiny_schedule();
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = rng_for(37, 0);
        let model =
            VarTransformer::init(&mut store, &mut rng, schedule.clone(), 16, 4, 16, 2, 2);
        let cb = toy_codebook(16, 4, 38);

        let (tokens, ms) = model.greedy_decode(&store, &cb, None).unwrap();
        assert_eq!(tokens.len(), 3);
        for k in 1..=3 {
            let (h, w) = schedule.size(k);
            assert_eq!(tokens[k - 1].indices.dim(), (h, w));
            assert_eq!(ms.per_scale[k - 1].dim(), (4, h, w));
        }
        ms.validate(&schedule, 4).unwrap();

        // replay scale 2 by hand: teacher-force the decoded prefix and argmax
        let prefix_map = dequantize_tokens(&tokens[0], &cb, &schedule).unwrap();
        let mut maps = vec![prefix_map];
        for k in 2..=3 {
            let (h, w) = schedule.size(k);
            maps.push(Array3::zeros((4, h, w)));
        }
        let logits = forward_values(&model, &store, &maps, None);
        for t in 0..4 {
            let row: Vec<f32> = (0..16).map(|c| logits[IxDyn(&[1 + t, c])]).collect();
            assert_eq!(tokens[1].indices[[t / 2, t % 2]], argmax_lowest(&row));
        }
    }

    #[test]
    fn batched_prediction_matches_per_scale_calls() {
        let schedule = tiny_schedule();
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = rng_for(47, 0);
        let model =
            VarTransformer::init(&mut store, &mut rng, schedule.clone(), 16, 4, 16, 2, 2);
        let cb = toy_codebook(16, 4, 48);

        // a reference token pyramid standing in for encoder output
        let reference: Vec<TokenMap> = (1..=3)
            .map(|k| {
                let (h, w) = schedule.size(k);
                let mut r = rng_for(49, k as u64);
                use rand::Rng;
                TokenMap {
                    scale_index: k,
                    indices: Array2::from_shape_fn((h, w), |_| r.gen_range(0..16)),
                }
            })
            .collect();

        let (tokens, ms) = model.predict_all_scales(&store, &cb, &reference, None).unwrap();
        assert_eq!(tokens.len(), 3);
        ms.validate(&schedule, 4).unwrap();
        assert_eq!(ms.provenance, Provenance::Transformer);

        // must agree bit-exactly with one predict call per scale, each
        // conditioned on the reference prefix
        for k in 1..=3usize {
            let (tm, deq) = model
                .predict_scale_features(&store, &cb, &reference[..k - 1], None)
                .unwrap();
            assert_eq!(tm.indices, tokens[k - 1].indices, "scale {k}");
            assert_eq!(deq, ms.per_scale[k - 1], "scale {k}");
        }

        // wrong reference length is rejected
        assert!(matches!(
            model.predict_all_scales(&store, &cb, &reference[..2], None),
            Err(crate::VarError::Shape(_))
        ));
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax_lowest(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_lowest(&[5.0f32, 5.0, 5.0]), 0);
        assert_eq!(argmax_lowest(&[-2.0f32, -1.0]), 1);
    }

    #[test]
    fn masked_attention_rows_are_probabilities() {
        // the additive mask must leave every softmax row summing to one
        let schedule = tiny_schedule();
        let mask = additive_mask::<f64>(&schedule);
        let mut g: crate::graph::Graph<f64> = crate::graph::Graph::new();
        let mut rng = rng_for(39, 0);
        let scores = crate::nn::normal_init::<f64>(&mut rng, &[21, 21], 2.0);
        let sv = g.constant(scores);
        let mv = g.constant(mask.into_dyn());
        let masked = g.add(sv, mv);
        let p = g.softmax_rows(masked);
        let pv = g.value(p);
        for i in 0..21 {
            let s: f64 = (0..21).map(|j| pv[IxDyn(&[i, j])]).sum();
            assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let schedule = ScaleSchedule::new(vec![(1, 1), (2, 2)]).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rng_for(40, 0);
        let model = VarTransformer::init(&mut store, &mut rng, schedule.clone(), 6, 3, 8, 1, 2);
        // give the cross path real output weights so its gradients are live
        let w = crate::nn::normal_init::<f64>(&mut rng, &[8, 8], 0.5);
        store.set("var/l0/cross/wo", w);

        let maps: Vec<ArrayD<f64>> = (1..=2)
            .map(|k| {
                let (h, w) = schedule.size(k);
                crate::nn::normal_init::<f64>(&mut rng, &[3, h, w], 1.0)
            })
            .collect();
        let ctx: Vec<ArrayD<f64>> = (1..=2)
            .map(|k| {
                let (h, w) = schedule.size(k);
                crate::nn::normal_init::<f64>(&mut rng, &[3, h, w], 1.0)
            })
            .collect();
        let targets = vec![3usize, 0, 5, 1, 2];

        let loss_of = |st: &ParamStore<f64>| -> f64 {
            let mut s = Session::new(st, &[]);
            let vars: Vec<Var> = maps.iter().map(|m| s.g.constant(m.clone())).collect();
            let cvars: Vec<Var> = ctx.iter().map(|m| s.g.constant(m.clone())).collect();
            let logits = model
                .forward_teacher_forced(&mut s, &vars, Some(&cvars))
                .unwrap();
            let l = s.g.cross_entropy_sum(logits, targets.clone());
            s.g.value(l)[IxDyn(&[0])]
        };

        // analytic gradients for every parameter
        let named = {
            let mut s = Session::new(&store, &["var/"]);
            let vars: Vec<Var> = maps.iter().map(|m| s.g.constant(m.clone())).collect();
            let cvars: Vec<Var> = ctx.iter().map(|m| s.g.constant(m.clone())).collect();
            let logits = model
                .forward_teacher_forced(&mut s, &vars, Some(&cvars))
                .unwrap();
            let loss = s.g.cross_entropy_sum(logits, targets.clone());
            let grads = s.g.backward(loss);
            s.trainable_grads(&grads)
        };

        let eps = 1e-5;
        let mut checked = 0usize;
        for (name, g) in &named {
            let g = g.as_ref().expect("all parameters reachable");
            let n = g.len();
            // probe a few spread-out coordinates of each tensor
            let stride = (n / 3).max(1);
            for flat in (0..n).step_by(stride) {
                let base = store.get(name).clone();
                let mut up = base.clone();
                up.as_slice_mut().unwrap()[flat] += eps;
                store.set(name, up);
                let lp = loss_of(&store);
                let mut dn = base.clone();
                dn.as_slice_mut().unwrap()[flat] -= eps;
                store.set(name, dn);
                let lm = loss_of(&store);
                store.set(name, base);
                let fd = (lp - lm) / (2.0 * eps);
                let an = g.as_slice().unwrap()[flat];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1.0);
                assert!(rel < 1e-3, "{name}[{flat}]: analytic {an}, fd {fd}");
                checked += 1;
            }
        }
        assert!(checked > 50, "checked only {checked} coordinates");
    }
}
