//! Encoder–decoder transformer over fused visual tokens, with relative
//! positions in self-attention, plus the visual extractor, fusion and text
//! bridge parameters that feed it.

pub mod attention;
mod decode;
mod layers;

use serde::{Deserialize, Serialize};

use crate::cha::{
    alignment_loss, fuse, fuse_backward, fuse_coarse, fuse_coarse_backward, AlignOptions,
    AlignmentLossReport, AlignmentWeights,
};
use crate::error::{Error, Result};
use crate::numerics::kernels::{log_softmax_rows, matmul, matmul_nt, matmul_tn};
use crate::numerics::{Grads, ParamGroup, ParamId, ParamStore, Rng, Tensor};
use crate::text::{PyramidIds, TextFeatures, BOS, EOS, PAD};
use crate::visual::{project_backward, project_with, FeaturePyramid, GridSpec, Patches};

pub use attention::{relation_index, RelPosTable};
pub use decode::Decoding;
use layers::{AttnIds, DecLayerCache, DecLayerIds, EncLayerCache, EncLayerIds, FfnIds, LnIds};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub ffn_mult: usize,
    /// Largest relative distance with its own embedding.
    pub clip_k: usize,
    /// Longest decoder input, BOS included.
    pub max_len: usize,
    pub rpe_in_encoder: bool,
    pub rpe_in_decoder: bool,
    /// Sinusoidal positions on encoder inputs.
    pub encoder_abs_pos: bool,
    /// Fuse all three grid levels; otherwise the encoder sees only the coarsest grid.
    pub pyramid: bool,
    /// Visual feature width.
    pub feature_dim: usize,
    pub text_dim: usize,
    pub grid: GridSpec,
    pub init_std: f64,
    pub unfreeze_text: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            ffn_mult: 4,
            clip_k: 3,
            max_len: 60,
            rpe_in_encoder: false,
            rpe_in_decoder: true,
            encoder_abs_pos: true,
            pyramid: true,
            feature_dim: 64,
            text_dim: 64,
            grid: GridSpec::default(),
            init_std: 0.02,
            unfreeze_text: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.clip_k < 1 {
            return bad("clip_k must be >= 1".into());
        }
        if self.max_len < 2 {
            return bad("max_len must be >= 2".into());
        }
        if self.n_layers == 0 || self.ffn_mult == 0 || self.feature_dim == 0 || self.text_dim == 0 {
            return bad("layer count and widths must be positive".into());
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be > 0".into());
        }
        self.grid.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Sinusoidal absolute positions, `T × d`.
pub fn sinusoidal(t: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[t, d]);
    for pos in 0..t {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Mean negative log-likelihood over kept positions and its logit gradient.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], keep: &[bool]) -> Result<(f64, Tensor)> {
    if logits.rows() != targets.len() || targets.len() != keep.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.rows(),
            targets.len(),
            keep.len()
        )));
    }
    let n = keep.iter().filter(|&&k| k).count();
    if n == 0 {
        return Err(Error::Empty("every target position is padding".into()));
    }
    let logp = log_softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (t, (&y, &k)) in targets.iter().zip(keep).enumerate() {
        if !k {
            continue;
        }
        if y >= logits.cols() {
            return Err(Error::Dimension(format!("target {y} outside vocabulary")));
        }
        loss -= logp.get(t, y);
        for (g, lp) in grad.row_mut(t).iter_mut().zip(logp.row(t)) {
            *g = lp.exp() / n as f64;
        }
        grad.row_mut(t)[y] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

#[derive(Clone, Debug)]
struct Ids {
    vis_proj: [ParamId; 3],
    vis_bias: [ParamId; 3],
    fusion: ParamId,
    bridge: ParamId,
    text: ParamId,
    enc: Vec<EncLayerIds>,
    embed: ParamId,
    out_bias: ParamId,
    dec: Vec<DecLayerIds>,
}

/// One training example, with inputs precomputed.
#[derive(Clone, Debug)]
pub struct Example {
    pub patches: Patches,
    pub text: PyramidIds,
    /// Report token ids without BOS/EOS.
    pub target: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub ce: f64,
    pub alignment: Option<AlignmentLossReport>,
}

impl SampleLoss {
    pub fn total(&self) -> f64 {
        self.ce + self.alignment.as_ref().map_or(0.0, |r| r.total)
    }
}

struct EncoderCache {
    layers: Vec<EncLayerCache>,
}

struct DecoderCache {
    inputs: Vec<usize>,
    layers: Vec<DecLayerCache>,
    hidden: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamStore,
    ids: Ids,
}

impl Model {
    pub fn new(cfg: ModelConfig, vocab_size: usize, seed: u64) -> Result<Model> {
        cfg.validate()?;
        if vocab_size <= EOS {
            return Err(Error::Config(format!("vocabulary of {vocab_size} lacks reserved ids")));
        }
        let mut rng = Rng::new(seed);
        let mut p = ParamStore::new();
        let (d, fd, std) = (cfg.d_model, cfg.feature_dim, cfg.init_std);
        let k = cfg.grid.patch_dim();
        let levels = ["s", "m", "h"];
        // Fan-in scaled.
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let vis_proj = levels.map(|l| {
            p.add_normal(&format!("visual.proj.{l}"), ParamGroup::Visual, &[k, fd], fan(k), &mut rng)
        });
        let vis_bias = levels.map(|l| p.add_zeros(&format!("visual.bias.{l}"), ParamGroup::Visual, &[fd]));
        let fusion = p.add_normal("fusion.proj", ParamGroup::Model, &[3 * fd, d], fan(3 * fd), &mut rng);
        let bridge = p.add_normal("bridge.proj", ParamGroup::Model, &[cfg.text_dim, fd], fan(cfg.text_dim), &mut rng);
        let text = p.add_normal("text.embedding", ParamGroup::Text, &[vocab_size, cfg.text_dim], 0.02, &mut rng);
        p.set_trainable(text, cfg.unfreeze_text);
        let rel_rows = 2 * cfg.clip_k + 1;
        let hd = cfg.head_dim();
        let ffn = d * cfg.ffn_mult;
        let mut enc = Vec::new();
        for l in 0..cfg.n_layers {
            let pre = format!("enc.{l}");
            let attn = AttnIds::new(&mut p, &format!("{pre}.self"), d, std, &mut rng);
            let rel = cfg.rpe_in_encoder.then(|| {
                (
                    p.add_normal(&format!("{pre}.rel.key"), ParamGroup::Model, &[rel_rows, hd], std, &mut rng),
                    p.add_normal(&format!("{pre}.rel.value"), ParamGroup::Model, &[rel_rows, hd], std, &mut rng),
                )
            });
            enc.push(EncLayerIds {
                attn,
                rel,
                ln1: LnIds::new(&mut p, &format!("{pre}.ln1"), d),
                ffn: FfnIds::new(&mut p, &format!("{pre}.ffn"), d, ffn, std, &mut rng),
                ln2: LnIds::new(&mut p, &format!("{pre}.ln2"), d),
            });
        }
        let embed = p.add_normal("dec.embed", ParamGroup::Model, &[vocab_size, d], std, &mut rng);
        let out_bias = p.add_zeros("dec.out_bias", ParamGroup::Model, &[vocab_size]);
        let mut dec = Vec::new();
        for l in 0..cfg.n_layers {
            let pre = format!("dec.{l}");
            let self_attn = AttnIds::new(&mut p, &format!("{pre}.self"), d, std, &mut rng);
            let rel = cfg.rpe_in_decoder.then(|| {
                (
                    p.add_normal(&format!("{pre}.rel.key"), ParamGroup::Model, &[rel_rows, hd], std, &mut rng),
                    p.add_normal(&format!("{pre}.rel.value"), ParamGroup::Model, &[rel_rows, hd], std, &mut rng),
                )
            });
            dec.push(DecLayerIds {
                self_attn,
                rel,
                ln1: LnIds::new(&mut p, &format!("{pre}.ln1"), d),
                cross: AttnIds::new(&mut p, &format!("{pre}.cross"), d, std, &mut rng),
                ln2: LnIds::new(&mut p, &format!("{pre}.ln2"), d),
                ffn: FfnIds::new(&mut p, &format!("{pre}.ffn"), d, ffn, std, &mut rng),
                ln3: LnIds::new(&mut p, &format!("{pre}.ln3"), d),
            });
        }
        let ids = Ids { vis_proj, vis_bias, fusion, bridge, text, enc, embed, out_bias, dec };
        Ok(Model { cfg, vocab_size, params: p, ids })
    }

    fn v(&self, id: ParamId) -> &Tensor {
        self.params.value(id)
    }

    pub fn text_table(&self) -> &Tensor {
        self.v(self.ids.text)
    }

    pub fn pyramid(&self, patches: &Patches) -> Result<FeaturePyramid> {
        let i = &self.ids;
        project_with(
            patches,
            i.vis_proj.map(|id| self.v(id)),
            i.vis_bias.map(|id| self.v(id)),
        )
    }

    /// Text units of every level mapped into the visual feature space.
    pub fn bridged_text(&self, ids: &PyramidIds) -> Result<(TextFeatures, TextFeatures)> {
        let raw = ids.encode(self.text_table())?;
        let b = self.v(self.ids.bridge);
        let bridged = TextFeatures {
            paragraph: matmul(&raw.paragraph, b)?,
            sentences: matmul(&raw.sentences, b)?,
            words: matmul(&raw.words, b)?,
        };
        Ok((raw, bridged))
    }

    /// Alignment losses and plans for one example.
    pub fn alignment(
        &self,
        patches: &Patches,
        text: &PyramidIds,
        w: &AlignmentWeights,
        opts: &AlignOptions,
    ) -> Result<AlignmentLossReport> {
        self.align_pyramid(&self.pyramid(patches)?, text, w, opts)
    }

    /// Alignment losses against an already extracted feature pyramid.
    pub fn align_pyramid(
        &self,
        pyr: &FeaturePyramid,
        text: &PyramidIds,
        w: &AlignmentWeights,
        opts: &AlignOptions,
    ) -> Result<AlignmentLossReport> {
        if pyr.dim() != self.cfg.feature_dim {
            return Err(Error::Dimension(format!(
                "features of width {} for a model with feature_dim {}",
                pyr.dim(),
                self.cfg.feature_dim
            )));
        }
        let (_, bridged) = self.bridged_text(text)?;
        alignment_loss(pyr, &bridged, w, opts).map(|(r, _)| r)
    }

    fn fused(&self, pyr: &FeaturePyramid) -> Result<Tensor> {
        let proj = self.v(self.ids.fusion);
        Ok(if self.cfg.pyramid { fuse(pyr, proj)? } else { fuse_coarse(pyr, proj)? }.tokens)
    }

    fn encoder_input(&self, fused: Tensor) -> Tensor {
        let mut x = fused;
        if self.cfg.encoder_abs_pos {
            x.add_assign(&sinusoidal(x.rows(), x.cols()));
        }
        x
    }

    fn encode_tokens(&self, x: &Tensor) -> Result<(Tensor, EncoderCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.ids.enc.len());
        for layer in &self.ids.enc {
            let (out, cache) = layer.forward(&self.params, &h, self.cfg.n_heads, self.cfg.clip_k)?;
            caches.push(cache);
            h = out;
        }
        Ok((h, EncoderCache { layers: caches }))
    }

    /// Encoder input tokens for the given pre-extracted patches.
    pub fn encoder_tokens(&self, patches: &Patches) -> Result<Tensor> {
        Ok(self.encoder_input(self.fused(&self.pyramid(patches)?)?))
    }

    /// Encoder memory over raw input tokens.
    pub fn encode(&self, tokens: &Tensor) -> Result<Tensor> {
        self.encode_tokens(tokens).map(|(m, _)| m)
    }

    /// Encoder memory for an image's patches.
    pub fn memory(&self, patches: &Patches) -> Result<Tensor> {
        self.encode(&self.encoder_tokens(patches)?)
    }

    fn decoder_input(&self, prefix: &[usize]) -> Result<Tensor> {
        if prefix.len() > self.cfg.max_len {
            return Err(Error::Length { len: prefix.len(), max: self.cfg.max_len });
        }
        if prefix.first() != Some(&BOS) {
            return Err(Error::Config("decoder prefix must start with BOS".into()));
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Dimension(format!("token {bad} outside vocabulary")));
        }
        let emb = self.v(self.ids.embed);
        let scale = (self.cfg.d_model as f64).sqrt();
        let rows: Vec<Vec<f64>> = prefix.iter().map(|&t| emb.row(t).iter().map(|v| v * scale).collect()).collect();
        let mut x = Tensor::from_rows(&rows)?;
        if !self.cfg.rpe_in_decoder {
            x.add_assign(&sinusoidal(x.rows(), x.cols()));
        }
        Ok(x)
    }

    fn decode_tokens(&self, memory: &Tensor, prefix: &[usize]) -> Result<(Tensor, DecoderCache)> {
        let mut h = self.decoder_input(prefix)?;
        let mut caches = Vec::with_capacity(self.ids.dec.len());
        for layer in &self.ids.dec {
            let (out, cache) = layer.forward(&self.params, &h, memory, self.cfg.n_heads, self.cfg.clip_k)?;
            caches.push(cache);
            h = out;
        }
        let logits = crate::numerics::kernels::add_row(
            &matmul_nt(&h, self.v(self.ids.embed))?,
            self.v(self.ids.out_bias),
        );
        Ok((logits, DecoderCache { inputs: prefix.to_vec(), layers: caches, hidden: h }))
    }

    /// Next-token logits for every prefix position, `T × vocab`.
    pub fn decoder_forward(&self, memory: &Tensor, prefix: &[usize]) -> Result<Tensor> {
        self.decode_tokens(memory, prefix).map(|(l, _)| l)
    }

    /// Attention weights of every decoder self-attention head, per layer.
    pub fn decoder_self_attention(&self, memory: &Tensor, prefix: &[usize]) -> Result<Vec<Vec<Tensor>>> {
        let (_, cache) = self.decode_tokens(memory, prefix)?;
        Ok(cache.layers.iter().map(|c| c.self_attn.alpha.clone()).collect())
    }

    /// Backward through the decoder; returns the memory gradient.
    fn decoder_backward(&self, memory: &Tensor, cache: &DecoderCache, dlogits: &Tensor, g: &mut Grads) -> Result<Tensor> {
        let emb = self.v(self.ids.embed);
        g.get_mut(self.ids.embed).add_assign(&matmul_tn(dlogits, &cache.hidden)?);
        g.get_mut(self.ids.out_bias).add_assign(&Tensor::vector(dlogits.col_sums())?);
        let mut dh = matmul(dlogits, emb)?;
        let mut dmem = Tensor::zeros(memory.shape());
        for (layer, lc) in self.ids.dec.iter().zip(&cache.layers).rev() {
            let (dx, dm) = layer.backward(&self.params, lc, &dh, self.cfg.clip_k, g)?;
            dmem.add_assign(&dm);
            dh = dx;
        }
        let scale = (self.cfg.d_model as f64).sqrt();
        let demb = g.get_mut(self.ids.embed);
        for (t, &tok) in cache.inputs.iter().enumerate() {
            for (o, v) in demb.row_mut(tok).iter_mut().zip(dh.row(t)) {
                *o += v * scale;
            }
        }
        Ok(dmem)
    }

    fn encoder_backward(&self, cache: &EncoderCache, dmem: &Tensor, g: &mut Grads) -> Result<Tensor> {
        let mut dx = dmem.clone();
        for (layer, lc) in self.ids.enc.iter().zip(&cache.layers).rev() {
            dx = layer.backward(&self.params, lc, &dx, self.cfg.clip_k, g)?;
        }
        Ok(dx)
    }

    /// Teacher-forcing inputs `[BOS] + y` and targets `y + [EOS]`, truncated to `max_len`.
    pub fn teacher_forcing(&self, target: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let n = target.len().min(self.cfg.max_len - 1);
        let mut input = vec![BOS];
        input.extend_from_slice(&target[..n]);
        let mut out = target[..n].to_vec();
        out.push(EOS);
        (input, out)
    }

    /// Cross-entropy plus alignment loss of one example; gradients are added into `g`.
    pub fn sample_grads(
        &self,
        ex: &Example,
        w: &AlignmentWeights,
        opts: &AlignOptions,
        g: &mut Grads,
    ) -> Result<SampleLoss> {
        let pyr = self.pyramid(&ex.patches)?;
        let mut dpyr = pyr.zeros_like();

        let alignment = if w.is_zero() {
            None
        } else {
            let (raw, bridged) = self.bridged_text(&ex.text)?;
            let (report, ag) = alignment_loss(&pyr, &bridged, w, opts)?;
            dpyr = ag.visual;
            let b = self.v(self.ids.bridge);
            let db = g.get_mut(self.ids.bridge);
            for (x, dy) in [
                (&raw.paragraph, &ag.text.paragraph),
                (&raw.sentences, &ag.text.sentences),
                (&raw.words, &ag.text.words),
            ] {
                db.add_assign(&matmul_tn(x, dy)?);
            }
            if self.params.param(self.ids.text).trainable {
                let draw = TextFeatures {
                    paragraph: matmul_nt(&ag.text.paragraph, b)?,
                    sentences: matmul_nt(&ag.text.sentences, b)?,
                    words: matmul_nt(&ag.text.words, b)?,
                };
                ex.text.encode_backward(&draw, g.get_mut(self.ids.text));
            }
            Some(report)
        };

        let fused = self.fused(&pyr)?;
        let x0 = self.encoder_input(fused);
        let (memory, enc_cache) = self.encode_tokens(&x0)?;
        let (input, targets) = self.teacher_forcing(&ex.target);
        let (logits, dec_cache) = self.decode_tokens(&memory, &input)?;
        let keep: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
        let (ce, dlogits) = cross_entropy(&logits, &targets, &keep)?;
        if !ce.is_finite() {
            return Err(Error::Numerical(format!("cross-entropy is {ce}")));
        }

        let dmem = self.decoder_backward(&memory, &dec_cache, &dlogits, g)?;
        let dx0 = self.encoder_backward(&enc_cache, &dmem, g)?;
        let proj = self.v(self.ids.fusion);
        let (dp, dfusion) = if self.cfg.pyramid {
            fuse_backward(&pyr, proj, &dx0)?
        } else {
            fuse_coarse_backward(&pyr, proj, &dx0)?
        };
        g.get_mut(self.ids.fusion).add_assign(&dfusion);
        for (acc, part) in [&mut dpyr.v_s, &mut dpyr.v_m, &mut dpyr.v_h].into_iter().zip(dp.levels()) {
            acc.add_assign(part);
        }
        let (dproj, dbias) = project_backward(&ex.patches, &dpyr)?;
        for l in 0..3 {
            g.get_mut(self.ids.vis_proj[l]).add_assign(&dproj[l]);
            g.get_mut(self.ids.vis_bias[l]).add_assign(&dbias[l]);
        }
        Ok(SampleLoss { ce, alignment })
    }

    /// Token ids of a generated report (BOS/EOS stripped) and its total log-probability.
    pub fn generate_scored(&self, memory: &Tensor, mode: Decoding, max_len: usize) -> Result<(Vec<usize>, f64)> {
        decode::generate(self, memory, mode, max_len)
    }

    pub fn generate(&self, memory: &Tensor, mode: Decoding, max_len: usize) -> Result<Vec<usize>> {
        self.generate_scored(memory, mode, max_len).map(|(t, _)| t)
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.get(name)
    }
}
