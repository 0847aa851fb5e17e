//! End-to-end assembly: question encoding, per-modality filtering,
//! coarse and fine bilinear fusion, and the reasoning head, plus the
//! parameter registry and checkpoint format.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleBundle;
use crate::error::{CfrError, Result};
use crate::filtering::{apply_filter_cached, filter_backward, FilterCache, FilterParams};
use crate::fusion::{fuse_backward, fuse_cached, BilinearParams, FuseCache, SoftmaxAxis};
use crate::gru::{gru_backward, gru_encode, GruCache, GruParams};
use crate::head::{
    answer_distribution_cached, head_backward, top_k, HeadCache, HeadParams, PathWeighting,
};
use crate::matrix::Matrix;
use crate::text::{embed_predicates, question_predicates, EmbeddingTable, Vocabulary};

/// Model dimensions and behavior flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfrConfig {
    /// Word-embedding dimension (GRU input and predicate features).
    pub d_emb: usize,
    /// GRU hidden size, i.e. the question feature dimension.
    pub d_q: usize,
    /// Image feature dimension.
    pub d_i: usize,
    /// Filtered-information dimension.
    pub d_psi: usize,
    /// Coarse joint-representation dimension.
    pub d_cg: usize,
    /// Fine joint-representation dimension.
    pub d_fg: usize,
    /// Answer vocabulary size.
    pub n_answers: usize,
    pub softmax_axis: SoftmaxAxis,
    pub learnable_channel_scale: bool,
    pub seed: u64,
}

impl CfrConfig {
    /// Desk-scale defaults: joint dimension 32 (the paper-scale 768 is a
    /// flag away).
    pub fn desk(d_emb: usize, d_i: usize, n_answers: usize) -> Self {
        CfrConfig {
            d_emb,
            d_q: 32,
            d_i,
            d_psi: 32,
            d_cg: 32,
            d_fg: 32,
            n_answers,
            softmax_axis: SoftmaxAxis::Flat,
            learnable_channel_scale: false,
            seed: 0,
        }
    }

    pub fn with_joint_dim(mut self, d: usize) -> Self {
        self.d_q = d;
        self.d_psi = d;
        self.d_cg = d;
        self.d_fg = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_emb", self.d_emb),
            ("d_q", self.d_q),
            ("d_i", self.d_i),
            ("d_psi", self.d_psi),
            ("d_cg", self.d_cg),
            ("d_fg", self.d_fg),
            ("n_answers", self.n_answers),
        ] {
            if v < 1 {
                return Err(CfrError::argument(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Every learnable tensor in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct CfrParams {
    pub gru: GruParams,
    pub filter_image: FilterParams,
    pub filter_question: FilterParams,
    pub fusion_cg: BilinearParams,
    pub fusion_fg: BilinearParams,
    pub head: HeadParams,
}

impl CfrParams {
    pub fn zeros(config: &CfrConfig) -> Self {
        CfrParams {
            gru: GruParams::zeros(config.d_emb, config.d_q),
            filter_image: FilterParams::zeros(
                config.d_i,
                config.d_emb,
                config.d_psi,
                config.learnable_channel_scale,
            ),
            filter_question: FilterParams::zeros(
                config.d_q,
                config.d_emb,
                config.d_psi,
                config.learnable_channel_scale,
            ),
            fusion_cg: BilinearParams::zeros(config.d_q, config.d_i, config.d_cg),
            fusion_fg: BilinearParams::zeros(config.d_psi, config.d_psi, config.d_fg),
            head: HeadParams::zeros(config.d_cg, config.d_fg, config.n_answers),
        }
    }

    /// Stable checkpoint-schema ordering of every tensor.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = Vec::new();
        for (gate, g) in [
            ("update", &self.gru.update),
            ("reset", &self.gru.reset),
            ("candidate", &self.gru.candidate),
        ] {
            out.push((format!("gru.{gate}.wx"), &g.wx));
            out.push((format!("gru.{gate}.wh"), &g.wh));
            out.push((format!("gru.{gate}.b"), &g.b));
        }
        for (side, f) in [("image", &self.filter_image), ("question", &self.filter_question)] {
            out.push((format!("filter.{side}.tau_f.w"), &f.tau_f_w));
            out.push((format!("filter.{side}.tau_f.b"), &f.tau_f_b));
            out.push((format!("filter.{side}.tau_p.w"), &f.tau_p_w));
            out.push((format!("filter.{side}.tau_p.b"), &f.tau_p_b));
            if let Some(c) = &f.chan_scale {
                out.push((format!("filter.{side}.chan_scale"), c));
            }
        }
        for (level, b) in [("cg", &self.fusion_cg), ("fg", &self.fusion_fg)] {
            out.push((format!("fusion.{level}.Mq"), &b.m_q));
            out.push((format!("fusion.{level}.Mi"), &b.m_i));
            out.push((format!("fusion.{level}.Mq_att"), &b.m_q_att));
            out.push((format!("fusion.{level}.Mi_att"), &b.m_i_att));
        }
        out.push(("head.W_raw".into(), &self.head.w_raw));
        out.push(("head.Wp_raw".into(), &self.head.wp_raw));
        out.push(("head.tau.w".into(), &self.head.tau_w));
        out.push(("head.tau.b".into(), &self.head.tau_b));
        out.push(("head.taup.w".into(), &self.head.taup_w));
        out.push(("head.taup.b".into(), &self.head.taup_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = Vec::new();
        for (gate, g) in [
            ("update", &mut self.gru.update),
            ("reset", &mut self.gru.reset),
            ("candidate", &mut self.gru.candidate),
        ] {
            out.push((format!("gru.{gate}.wx"), &mut g.wx));
            out.push((format!("gru.{gate}.wh"), &mut g.wh));
            out.push((format!("gru.{gate}.b"), &mut g.b));
        }
        for (side, f) in
            [("image", &mut self.filter_image), ("question", &mut self.filter_question)]
        {
            out.push((format!("filter.{side}.tau_f.w"), &mut f.tau_f_w));
            out.push((format!("filter.{side}.tau_f.b"), &mut f.tau_f_b));
            out.push((format!("filter.{side}.tau_p.w"), &mut f.tau_p_w));
            out.push((format!("filter.{side}.tau_p.b"), &mut f.tau_p_b));
            if let Some(c) = &mut f.chan_scale {
                out.push((format!("filter.{side}.chan_scale"), c));
            }
        }
        for (level, b) in [("cg", &mut self.fusion_cg), ("fg", &mut self.fusion_fg)] {
            out.push((format!("fusion.{level}.Mq"), &mut b.m_q));
            out.push((format!("fusion.{level}.Mi"), &mut b.m_i));
            out.push((format!("fusion.{level}.Mq_att"), &mut b.m_q_att));
            out.push((format!("fusion.{level}.Mi_att"), &mut b.m_i_att));
        }
        out.push(("head.W_raw".into(), &mut self.head.w_raw));
        out.push(("head.Wp_raw".into(), &mut self.head.wp_raw));
        out.push(("head.tau.w".into(), &mut self.head.tau_w));
        out.push(("head.tau.b".into(), &mut self.head.tau_b));
        out.push(("head.taup.w".into(), &mut self.head.taup_w));
        out.push(("head.taup.b".into(), &mut self.head.taup_b));
        out
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for (_, t) in self.named_tensors_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".b")
}

fn is_channel_scale(name: &str) -> bool {
    name.ends_with("chan_scale")
}

/// Glorot-uniform weights, zero biases, unit channel scales.
/// Deterministic for a given seed.
pub fn init_params(config: &CfrConfig, seed: u64) -> CfrParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = CfrParams::zeros(config);
    for (name, t) in params.named_tensors_mut() {
        if is_bias(&name) {
            continue;
        }
        if is_channel_scale(&name) {
            for v in t.data_mut() {
                *v = 1.0;
            }
            continue;
        }
        let fan_in = t.rows() as f64;
        let fan_out = t.cols() as f64;
        let a = (6.0 / (fan_in + fan_out)).sqrt();
        for v in t.data_mut() {
            *v = rng.random_range(-a..a);
        }
    }
    params
}

/// Frozen text-side context shared by every forward call.
#[derive(Debug, Clone)]
pub struct TextContext {
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    pub question_filter: HashSet<String>,
}

/// Which paths of the model are live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AblationMode {
    #[default]
    Full,
    /// Raw-feature fusion only; predicates are never read.
    CoarseOnly,
    /// Filtered-information fusion only.
    FineOnly,
}

impl AblationMode {
    pub fn weighting(self) -> PathWeighting {
        match self {
            AblationMode::Full => PathWeighting::Adaptive,
            AblationMode::CoarseOnly => PathWeighting::CoarseOnly,
            AblationMode::FineOnly => PathWeighting::FineOnly,
        }
    }

    pub fn uses_coarse(self) -> bool {
        !matches!(self, AblationMode::FineOnly)
    }

    pub fn uses_fine(self) -> bool {
        !matches!(self, AblationMode::CoarseOnly)
    }
}

impl std::str::FromStr for AblationMode {
    type Err = CfrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationMode::Full),
            "coarse_only" => Ok(AblationMode::CoarseOnly),
            "fine_only" => Ok(AblationMode::FineOnly),
            other => Err(CfrError::argument(format!("unknown ablation mode '{other}'"))),
        }
    }
}

/// Per-sample interpretability record.
#[derive(Debug, Clone, Serialize)]
pub struct Explanation {
    pub psi_hat_image: Vec<f64>,
    pub psi_hat_question: Vec<f64>,
    pub a_cg: Vec<Vec<f64>>,
    pub a_fg: Vec<Vec<f64>>,
    /// Per-answer (w_cg, w_fg) for the top answers.
    pub adaptive: Vec<AdaptiveShare>,
    pub top_k: Vec<AnswerScore>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptiveShare {
    pub answer: usize,
    pub w_cg: f64,
    pub w_fg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnswerScore {
    pub answer: usize,
    pub confidence: f64,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Everything backward needs.
pub struct ForwardCache {
    pub gru: GruCache,
    pub question_features: Matrix,
    pub question_predicate_features: Option<Matrix>,
    pub image_predicate_features: Option<Matrix>,
    pub filter_image: Option<FilterCache>,
    pub filter_question: Option<FilterCache>,
    pub fuse_cg: Option<FuseCache>,
    pub fuse_fg: Option<FuseCache>,
    pub j_cg: Vec<f64>,
    pub j_fg: Vec<f64>,
    pub head: HeadCache,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        CfrError::Shape(msg) => CfrError::Shape(format!("{name}: {msg}")),
        other => other,
    })
}

/// Full pipeline on one sample. Deterministic and pure in its inputs.
pub fn forward(
    sample: &SampleBundle,
    params: &CfrParams,
    ctx: &TextContext,
    config: &CfrConfig,
    mode: AblationMode,
) -> Result<(Vec<f64>, Explanation)> {
    let (rho, explanation, _) = forward_cached(sample, params, ctx, config, mode)?;
    Ok((rho, explanation))
}

pub fn forward_cached(
    sample: &SampleBundle,
    params: &CfrParams,
    ctx: &TextContext,
    config: &CfrConfig,
    mode: AblationMode,
) -> Result<(Vec<f64>, Explanation, ForwardCache)> {
    sample.validate()?;
    if sample.image_features.cols() != config.d_i {
        return Err(CfrError::shape(format!(
            "sample {}: image feature dim {} vs configured {}",
            sample.id,
            sample.image_features.cols(),
            config.d_i
        )));
    }

    let (f_q, gru_cache) = stage(
        "gru",
        gru_encode(&sample.question_tokens, &ctx.vocab, &ctx.table, &params.gru),
    )?;
    let f_i = &sample.image_features;

    let mut cache = ForwardCache {
        gru: gru_cache,
        question_features: f_q.clone(),
        question_predicate_features: None,
        image_predicate_features: None,
        filter_image: None,
        filter_question: None,
        fuse_cg: None,
        fuse_fg: None,
        j_cg: vec![0.0; config.d_cg],
        j_fg: vec![0.0; config.d_fg],
        head: HeadCache {
            z_cg: vec![],
            z_fg: vec![],
            w: vec![],
            wp: vec![],
            logits: vec![],
            rho: vec![],
        },
    };

    if mode.uses_coarse() {
        let (j_cg, fc) =
            stage("fusion.cg", fuse_cached(&f_q, f_i, &params.fusion_cg, config.softmax_axis))?;
        cache.j_cg = j_cg;
        cache.fuse_cg = Some(fc);
    }

    if mode.uses_fine() {
        let q_preds = question_predicates(&sample.question_tokens, &ctx.question_filter);
        let p_q = stage("text.embed", embed_predicates(&q_preds, &ctx.vocab, &ctx.table))?;
        let p_i = stage(
            "text.embed",
            embed_predicates(&sample.image_predicates, &ctx.vocab, &ctx.table),
        )?;

        let (_, filt_i) =
            stage("filter.image", apply_filter_cached(f_i, &p_i, &params.filter_image))?;
        let (_, filt_q) = stage(
            "filter.question",
            apply_filter_cached(&f_q, &p_q, &params.filter_question),
        )?;
        let (j_fg, ff) = stage(
            "fusion.fg",
            fuse_cached(&filt_q.psi, &filt_i.psi, &params.fusion_fg, config.softmax_axis),
        )?;

        cache.question_predicate_features = Some(p_q);
        cache.image_predicate_features = Some(p_i);
        cache.filter_image = Some(filt_i);
        cache.filter_question = Some(filt_q);
        cache.j_fg = j_fg;
        cache.fuse_fg = Some(ff);
    }

    cache.head = stage(
        "head",
        answer_distribution_cached(&cache.j_cg, &cache.j_fg, &params.head, mode.weighting()),
    )?;
    let rho = cache.head.rho.clone();

    let k = 5.min(rho.len());
    let top = top_k(&rho, k)?;
    let explanation = Explanation {
        psi_hat_image: cache
            .filter_image
            .as_ref()
            .map(|c| c.psi_hat.clone())
            .unwrap_or_default(),
        psi_hat_question: cache
            .filter_question
            .as_ref()
            .map(|c| c.psi_hat.clone())
            .unwrap_or_default(),
        a_cg: cache.fuse_cg.as_ref().map(|c| rows_of(&c.attention)).unwrap_or_default(),
        a_fg: cache.fuse_fg.as_ref().map(|c| rows_of(&c.attention)).unwrap_or_default(),
        adaptive: top
            .iter()
            .map(|&(answer, _)| AdaptiveShare {
                answer,
                w_cg: cache.head.w[answer],
                w_fg: cache.head.wp[answer],
            })
            .collect(),
        top_k: top
            .into_iter()
            .map(|(answer, confidence)| AnswerScore { answer, confidence })
            .collect(),
    };
    Ok((rho, explanation, cache))
}

/// Backward of `forward_cached` given dL/d(head logits); accumulates
/// into `grads`.
pub fn backward(
    sample: &SampleBundle,
    params: &CfrParams,
    config: &CfrConfig,
    mode: AblationMode,
    cache: &ForwardCache,
    d_logits: &[f64],
    grads: &mut CfrParams,
) -> Result<()> {
    let (d_j_cg, d_j_fg) = head_backward(
        &cache.j_cg,
        &cache.j_fg,
        &params.head,
        &cache.head,
        mode.weighting(),
        d_logits,
        &mut grads.head,
    )?;

    let f_q = &cache.question_features;
    let mut d_f_q = Matrix::zeros(f_q.rows(), f_q.cols());

    if mode.uses_coarse() {
        let fc = cache.fuse_cg.as_ref().expect("coarse cache present");
        let (dq, _di) = fuse_backward(
            f_q,
            &sample.image_features,
            &params.fusion_cg,
            config.softmax_axis,
            fc,
            &d_j_cg,
            &mut grads.fusion_cg,
        )?;
        d_f_q.add_assign(&dq)?;
    }

    if mode.uses_fine() {
        let ff = cache.fuse_fg.as_ref().expect("fine cache present");
        let filt_q = cache.filter_question.as_ref().expect("question filter cache");
        let filt_i = cache.filter_image.as_ref().expect("image filter cache");
        let p_q = cache.question_predicate_features.as_ref().expect("question predicates");
        let p_i = cache.image_predicate_features.as_ref().expect("image predicates");

        let (d_psi_q, d_psi_i) = fuse_backward(
            &filt_q.psi,
            &filt_i.psi,
            &params.fusion_fg,
            config.softmax_axis,
            ff,
            &d_j_fg,
            &mut grads.fusion_fg,
        )?;

        // image features are inputs, their gradient is dropped
        filter_backward(
            &sample.image_features,
            p_i,
            &params.filter_image,
            filt_i,
            &d_psi_i,
            &mut grads.filter_image,
        )?;
        let dq = filter_backward(
            f_q,
            p_q,
            &params.filter_question,
            filt_q,
            &d_psi_q,
            &mut grads.filter_question,
        )?;
        d_f_q.add_assign(&dq)?;
    }

    gru_backward(&params.gru, &cache.gru, &d_f_q, &mut grads.gru)
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "CFRC", u8 version, length-prefixed config
// JSON, tensor count, then repeated (name, matrix container).
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"CFRC";
const CKPT_VERSION: u8 = 1;

pub fn save_checkpoint(params: &CfrParams, config: &CfrConfig, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&[CKPT_VERSION])?;
    let json = serde_json::to_vec(config).map_err(|e| CfrError::format(e.to_string()))?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let tensors = params.named_tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        t.write_binary(&mut w)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CfrParams, CfrConfig)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut head = [0u8; 5];
    r.read_exact(&mut head).map_err(|_| CfrError::format("truncated checkpoint"))?;
    if &head[0..4] != CKPT_MAGIC {
        return Err(CfrError::format("bad checkpoint magic"));
    }
    if head[4] != CKPT_VERSION {
        return Err(CfrError::format(format!("unsupported checkpoint version {}", head[4])));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| CfrError::format("truncated checkpoint"))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|_| CfrError::format("truncated checkpoint"))?;
    let config: CfrConfig =
        serde_json::from_slice(&json).map_err(|e| CfrError::format(e.to_string()))?;
    config.validate()?;

    let mut count = [0u8; 4];
    r.read_exact(&mut count).map_err(|_| CfrError::format("truncated checkpoint"))?;
    let count = u32::from_le_bytes(count) as usize;

    let mut params = CfrParams::zeros(&config);
    let mut expected: std::collections::HashMap<String, &mut Matrix> =
        params.named_tensors_mut().into_iter().collect();
    if count != expected.len() {
        return Err(CfrError::Integrity(format!(
            "checkpoint has {count} tensors, model expects {}",
            expected.len()
        )));
    }
    let mut seen = HashSet::new();
    for _ in 0..count {
        let mut nlen = [0u8; 2];
        r.read_exact(&mut nlen).map_err(|_| CfrError::format("truncated checkpoint"))?;
        let mut name = vec![0u8; u16::from_le_bytes(nlen) as usize];
        r.read_exact(&mut name).map_err(|_| CfrError::format("truncated checkpoint"))?;
        let name =
            String::from_utf8(name).map_err(|_| CfrError::format("non-utf8 tensor name"))?;
        let tensor = Matrix::read_binary(&mut r)?;
        let slot = expected.get_mut(&name).ok_or_else(|| {
            CfrError::Integrity(format!("unknown tensor name '{name}' in checkpoint"))
        })?;
        if tensor.rows() != slot.rows() || tensor.cols() != slot.cols() {
            return Err(CfrError::Integrity(format!(
                "tensor '{}' has shape {}x{}, config requires {}x{}",
                name,
                tensor.rows(),
                tensor.cols(),
                slot.rows(),
                slot.cols()
            )));
        }
        **slot = tensor;
        if !seen.insert(name.clone()) {
            return Err(CfrError::Integrity(format!("duplicate tensor '{name}'")));
        }
    }
    Ok((params, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::text::build_filter;

    pub(crate) fn tiny_setup() -> (Vec<SampleBundle>, CfrParams, TextContext, CfrConfig) {
        let scfg = SynthConfig {
            objects: 5,
            attrs: 3,
            emb_dim: 6,
            scene_min: 2,
            scene_max: 3,
            noise: 0.1,
            dropout: 0.0,
            ghost_rate: 0.5,
            train_n: 6,
            val_n: 0,
            seed: 3,
        };
        let data = gen_synthetic(&scfg).unwrap();
        let config = CfrConfig {
            d_emb: scfg.emb_dim,
            d_q: 5,
            d_i: scfg.feature_dim(),
            d_psi: 4,
            d_cg: 4,
            d_fg: 4,
            n_answers: scfg.attrs,
            softmax_axis: SoftmaxAxis::Flat,
            learnable_channel_scale: false,
            seed: 1,
        };
        let params = init_params(&config, 1);
        let filter = build_filter(&data.stop_words, &data.vocab, 0);
        let ctx = TextContext { vocab: data.vocab, table: data.table, question_filter: filter };
        (data.train, params, ctx, config)
    }

    #[test]
    fn forward_is_deterministic() {
        let (samples, params, ctx, config) = tiny_setup();
        let (r1, _) = forward(&samples[0], &params, &ctx, &config, AblationMode::Full).unwrap();
        let (r2, _) = forward(&samples[0], &params, &ctx, &config, AblationMode::Full).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn rho_is_probability_vector() {
        let (samples, params, ctx, config) = tiny_setup();
        for s in &samples {
            let (rho, _) = forward(s, &params, &ctx, &config, AblationMode::Full).unwrap();
            let sum: f64 = rho.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(rho.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn explanation_matches_filter_module() {
        use crate::filtering::apply_filter;
        use crate::text::embed_predicates;

        let (samples, params, ctx, config) = tiny_setup();
        let s = &samples[0];
        let (_, expl) = forward(s, &params, &ctx, &config, AblationMode::Full).unwrap();

        let p_i = embed_predicates(&s.image_predicates, &ctx.vocab, &ctx.table).unwrap();
        let out = apply_filter(&s.image_features, &p_i, &params.filter_image).unwrap();
        assert_eq!(expl.psi_hat_image, out.psi_hat);

        let sum: f64 = expl.psi_hat_question.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        for share in &expl.adaptive {
            assert!((share.w_cg + share.w_fg - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn coarse_mode_ignores_predicates() {
        let (samples, params, ctx, config) = tiny_setup();
        let mut mutated = samples[0].clone();
        mutated.image_predicates = vec![crate::text::Predicate::obj("garbage")];
        let (r1, _) =
            forward(&samples[0], &params, &ctx, &config, AblationMode::CoarseOnly).unwrap();
        let (r2, _) = forward(&mutated, &params, &ctx, &config, AblationMode::CoarseOnly).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn init_params_deterministic_and_bounded() {
        let (_, _, _, config) = tiny_setup();
        let a = init_params(&config, 42);
        let b = init_params(&config, 42);
        assert_eq!(a, b);
        let c = init_params(&config, 43);
        assert_ne!(a, c);

        for (name, t) in a.named_tensors() {
            if is_bias(&name) {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} should be zero");
            } else {
                let bound = (6.0 / (t.rows() as f64 + t.cols() as f64)).sqrt();
                assert!(
                    t.data().iter().all(|&v| v.abs() < bound),
                    "{name} exceeds glorot bound"
                );
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let (samples, params, ctx, config) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cfr");
        save_checkpoint(&params, &config, &path).unwrap();
        let (loaded, loaded_config) = load_checkpoint(&path).unwrap();
        assert_eq!(config, loaded_config);
        assert_eq!(params, loaded);

        let (r1, _) = forward(&samples[0], &params, &ctx, &config, AblationMode::Full).unwrap();
        let (r2, _) = forward(&samples[0], &loaded, &ctx, &config, AblationMode::Full).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn checkpoint_corruption_detected() {
        let (_, params, _, config) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cfr");
        save_checkpoint(&params, &config, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("trunc.cfr");
        std::fs::write(&truncated, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_checkpoint(&truncated).is_err());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let badpath = dir.path().join("bad.cfr");
        std::fs::write(&badpath, &bad).unwrap();
        assert!(load_checkpoint(&badpath).is_err());
    }

    #[test]
    fn checkpoint_unknown_tensor_name_rejected() {
        let (_, params, _, config) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cfr");
        save_checkpoint(&params, &config, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // corrupt the first tensor name in place ("gru.update.wx")
        let pos = bytes.windows(13).position(|w| w == b"gru.update.wx").unwrap();
        bytes[pos..pos + 13].copy_from_slice(b"gru.bogus..wx");
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("gru.bogus..wx"), "{err}");
    }
}
