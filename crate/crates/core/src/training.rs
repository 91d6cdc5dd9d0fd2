//! Joint optimization of every encoder and decoder under the interlingual
//! loss `L_XX + L_YY + L_XY + L_YX + d(h(X), h(Y))`, with Adam.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ParallelCorpus;
use crate::error::{Error, Result};
use crate::latent::{corr_distance, correlation_value, max_distance, pool, quantize, Codebook, CODEBOOK_PREFIX};
use crate::system::System;
use crate::tensor::{Tape, Tensor, Var};
use crate::transformer::{
    decode_teacher_forced, encode, teacher_forcing_pair, Dropout, LanguageModule, ModelConfig, TokenBatch, TokenId,
    PAD,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    Corr,
    Max,
    None,
}

impl std::str::FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corr" => Ok(DistanceMode::Corr),
            "max" => Ok(DistanceMode::Max),
            "none" => Ok(DistanceMode::None),
            other => Err(Error::Config(format!("unknown distance mode '{other}' (corr|max|none)"))),
        }
    }
}

/// Weights of `[L_XX, L_YY, L_XY, L_YX, d]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossWeights(pub [f64; 5]);

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights([1.0; 5])
    }
}

impl LossWeights {
    pub fn src_auto(&self) -> f64 {
        self.0[0]
    }
    pub fn tgt_auto(&self) -> f64 {
        self.0[1]
    }
    pub fn src_to_tgt(&self) -> f64 {
        self.0[2]
    }
    pub fn tgt_to_src(&self) -> f64 {
        self.0[3]
    }
    pub fn distance(&self) -> f64 {
        self.0[4]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Sentence pairs per step.
    pub batch_size: usize,
    pub max_steps: u64,
    pub distance: DistanceMode,
    pub quantize: bool,
    pub n_tables: usize,
    pub codebook_entries: usize,
    pub commitment_weight: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// When extending a system, also update the pivot language's module.
    pub joint_finetune: bool,
    /// When extending a system, keep the pivot's autoencoding term in the loss.
    pub anchor_pivot: bool,
    /// Steps between checkpoints (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            batch_size: 32,
            max_steps: 1000,
            distance: DistanceMode::Corr,
            quantize: false,
            n_tables: 2,
            codebook_entries: 32,
            commitment_weight: crate::latent::COMMITMENT_WEIGHT,
            loss_weights: LossWeights::default(),
            seed: 0,
            joint_finetune: false,
            anchor_pivot: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return fail("adam betas must lie in [0, 1) and eps must be > 0".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.distance == DistanceMode::Corr && self.batch_size < 2 {
            return fail("correlation distance needs batch_size >= 2".into());
        }
        if self.loss_weights.0.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return fail(format!("loss weights must be finite and >= 0: {:?}", self.loss_weights.0));
        }
        if self.quantize && (self.n_tables == 0 || self.codebook_entries == 0) {
            return fail("quantization needs n_tables >= 1 and codebook_entries >= 1".into());
        }
        Ok(())
    }
}

/// Unweighted loss terms for one batch. `None` marks a term that was not
/// computed because its weight is zero (or, for `corr_distance`, because the
/// batch has a single row).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub src_auto: Option<f64>,
    pub tgt_auto: Option<f64>,
    pub src_to_tgt: Option<f64>,
    pub tgt_to_src: Option<f64>,
    pub distance: Option<f64>,
    pub codebook: Option<f64>,
    pub commitment: Option<f64>,
    /// The weighted loss that was differentiated.
    pub total: f64,
    /// `1 - correlation` of the pooled batch, measured regardless of mode.
    pub corr_distance: Option<f64>,
}

impl LossComponents {
    /// Recomputes the weighted sum from the components.
    pub fn weighted_sum(&self, w: &LossWeights, commitment_weight: f64) -> f64 {
        let terms = [self.src_auto, self.tgt_auto, self.src_to_tgt, self.tgt_to_src, self.distance];
        let mut total: f64 = terms.iter().zip(w.0).map(|(t, w)| t.map_or(0.0, |v| v * w)).sum();
        total += self.codebook.unwrap_or(0.0) + commitment_weight * self.commitment.unwrap_or(0.0);
        total
    }

    fn all_finite(&self) -> bool {
        let terms = [
            self.src_auto,
            self.tgt_auto,
            self.src_to_tgt,
            self.tgt_to_src,
            self.distance,
            self.codebook,
            self.commitment,
        ];
        self.total.is_finite() && terms.iter().flatten().all(|v| v.is_finite())
    }
}

/// One aligned batch: `src[i]` translates `tgt[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub src: Vec<Vec<TokenId>>,
    pub tgt: Vec<Vec<TokenId>>,
}

impl PairBatch {
    pub fn from_corpus(corpus: &ParallelCorpus, indices: &[usize]) -> Self {
        PairBatch {
            src: indices.iter().map(|&i| corpus.src[i].clone()).collect(),
            tgt: indices.iter().map(|&i| corpus.tgt[i].clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// The two language modules (and optional codebook) a joint loss runs over.
pub struct PairModules<'a> {
    pub src: &'a LanguageModule<Var>,
    pub tgt: &'a LanguageModule<Var>,
    pub codebook: Option<&'a Codebook<Var>>,
}

/// The distance term for `mode`, or `None` for the ablation.
pub fn distance_term(tape: &mut Tape, mode: DistanceMode, hx: Var, hy: Var) -> Result<Option<Var>> {
    match mode {
        DistanceMode::Corr => {
            let rows = tape.shape(hx)[0];
            if rows < 2 {
                return Err(Error::Config(format!("correlation distance needs >= 2 sentences per batch, got {rows}")));
            }
            corr_distance(tape, hx, hy).map(Some)
        }
        DistanceMode::Max => max_distance(tape, hx, hy).map(Some),
        DistanceMode::None => Ok(None),
    }
}

fn cross_entropy_term(
    tape: &mut Tape,
    decoder: &LanguageModule<Var>,
    model: &ModelConfig,
    latent: Var,
    src_keep: &[bool],
    target: &[Vec<TokenId>],
    dropout: &mut Dropout,
) -> Result<Var> {
    let (input, output) = teacher_forcing_pair(target)?;
    let dec = decode_teacher_forced(tape, decoder, model, latent, src_keep, &input, dropout)?;
    tape.cross_entropy(dec.logits, output.ids(), PAD as usize)
}

/// Cross-entropy of decoding `tgt` with `decoder` from `encoder`'s states of
/// `src`, without quantization. Useful for checking the joint loss term by
/// term.
pub fn direction_loss(
    tape: &mut Tape,
    encoder: &LanguageModule<Var>,
    decoder: &LanguageModule<Var>,
    model: &ModelConfig,
    src: &[Vec<TokenId>],
    tgt: &[Vec<TokenId>],
) -> Result<Var> {
    let batch = TokenBatch::from_sequences(src)?;
    let states = encode(tape, encoder, model, &batch, &mut Dropout::off())?;
    cross_entropy_term(tape, decoder, model, states, &batch.keep_mask(), tgt, &mut Dropout::off())
}

/// Builds the weighted joint loss. Each encoder runs once; all four decoding
/// directions reuse those two latents.
pub fn joint_loss(
    tape: &mut Tape,
    mods: &PairModules,
    model: &ModelConfig,
    cfg: &TrainConfig,
    batch: &PairBatch,
    dropout: &mut Dropout,
) -> Result<(Var, LossComponents)> {
    if batch.src.len() != batch.tgt.len() || batch.is_empty() {
        return Err(Error::Alignment(format!("batch has {} source and {} target rows", batch.src.len(), batch.tgt.len())));
    }
    let w = cfg.loss_weights;
    let xb = TokenBatch::from_sequences(&batch.src)?;
    let yb = TokenBatch::from_sequences(&batch.tgt)?;
    let (xkeep, ykeep) = (xb.keep_mask(), yb.keep_mask());
    let raw_x = encode(tape, mods.src, model, &xb, dropout)?;
    let raw_y = encode(tape, mods.tgt, model, &yb, dropout)?;
    let hx = pool(tape, raw_x, &xkeep)?;
    let hy = pool(tape, raw_y, &ykeep)?;

    let mut comps = LossComponents::default();
    let mut weighted: Vec<Var> = Vec::new();
    let (lat_x, lat_y) = match mods.codebook {
        Some(cb) => {
            let qx = quantize(tape, cb, raw_x, Some(&xkeep))?;
            let qy = quantize(tape, cb, raw_y, Some(&ykeep))?;
            let cb_loss = tape.add(qx.codebook_loss, qy.codebook_loss)?;
            let commit = tape.add(qx.commitment_loss, qy.commitment_loss)?;
            comps.codebook = Some(tape.value(cb_loss).item());
            comps.commitment = Some(tape.value(commit).item());
            weighted.push(cb_loss);
            weighted.push(tape.scale(commit, cfg.commitment_weight));
            (qx.output, qy.output)
        }
        None => (raw_x, raw_y),
    };

    let directions: [(f64, &LanguageModule<Var>, Var, &[bool], &[Vec<TokenId>]); 4] = [
        (w.src_auto(), mods.src, lat_x, &xkeep, &batch.src),
        (w.tgt_auto(), mods.tgt, lat_y, &ykeep, &batch.tgt),
        (w.src_to_tgt(), mods.tgt, lat_x, &xkeep, &batch.tgt),
        (w.tgt_to_src(), mods.src, lat_y, &ykeep, &batch.src),
    ];
    let mut values = [None; 4];
    for (slot, (weight, decoder, latent, keep, target)) in values.iter_mut().zip(directions) {
        if weight == 0.0 {
            continue;
        }
        let ce = cross_entropy_term(tape, decoder, model, latent, keep, target, dropout)?;
        *slot = Some(tape.value(ce).item());
        weighted.push(tape.scale(ce, weight));
    }
    [comps.src_auto, comps.tgt_auto, comps.src_to_tgt, comps.tgt_to_src] = values;

    if w.distance() != 0.0 {
        if let Some(d) = distance_term(tape, cfg.distance, hx, hy)? {
            comps.distance = Some(tape.value(d).item());
            weighted.push(tape.scale(d, w.distance()));
        }
    }
    if batch.len() >= 2 {
        comps.corr_distance = Some(1.0 - correlation_value(tape.value(hx), tape.value(hy))?);
    }

    let mut total = match weighted.first() {
        Some(&v) => v,
        None => return Err(Error::Config("every loss weight is zero".into())),
    };
    for &v in &weighted[1..] {
        total = tape.add(total, v)?;
    }
    comps.total = tape.value(total).item();
    Ok((total, comps))
}

/// Adam first and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
    pub history: Vec<LossComponents>,
}

/// Which parts of a system receive updates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Frozen {
    pub languages: BTreeSet<String>,
    pub codebook: bool,
}

/// One training step's log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub src_lang: String,
    pub tgt_lang: String,
    #[serde(flatten)]
    pub components: LossComponents,
    pub wall_ms: f64,
}

/// Deterministic 64-bit seed for `tag` under `seed`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{tag}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Fresh system with one randomly initialized module per `(language,
/// vocab_len, vocab_hash)`, plus a codebook when `cfg.quantize` is set.
pub fn init_system(model: &ModelConfig, cfg: &TrainConfig, languages: &[(&str, usize, String)]) -> Result<System> {
    cfg.validate()?;
    let mut system = System::new(model.clone())?;
    for (lang, vocab_len, hash) in languages {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("module/{lang}")));
        system.add_module(LanguageModule::new(lang, *vocab_len, model, &mut rng)?, hash.clone())?;
    }
    if cfg.quantize {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, CODEBOOK_PREFIX));
        system.codebook = Some(Codebook::new(cfg.n_tables, cfg.codebook_entries, model.d_model, &mut rng)?);
    }
    Ok(system)
}

/// Corpus row indices used at `step`: a fresh seeded permutation per epoch,
/// cut into `n / batch_size` consecutive batches.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    if batch_size >= n {
        return (0..n).collect();
    }
    let per_epoch = (n / batch_size) as u64;
    let (epoch, pos) = (step / per_epoch, (step % per_epoch) as usize);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch/{epoch}"))));
    let mut batch = perm[pos * batch_size..(pos + 1) * batch_size].to_vec();
    batch.sort_unstable();
    batch
}

/// Loss and per-parameter gradients of the joint loss for one batch.
/// Frozen parts are recorded as constants and get no entry.
pub fn compute_gradients(
    system: &System,
    src_lang: &str,
    tgt_lang: &str,
    batch: &PairBatch,
    cfg: &TrainConfig,
    frozen: &Frozen,
    dropout_seed: u64,
) -> Result<(LossComponents, BTreeMap<String, Tensor>)> {
    if src_lang == tgt_lang {
        return Err(Error::Config(format!("joint loss needs two distinct languages, got '{src_lang}' twice")));
    }
    let mut tape = Tape::new();
    let mut bound_vars = Vec::new();
    let mut bind = |tape: &mut Tape, lang: &str| -> Result<LanguageModule<Var>> {
        let (m, vars) = system.module(lang)?.bind(tape, !frozen.languages.contains(lang));
        if !frozen.languages.contains(lang) {
            bound_vars.extend(vars);
        }
        Ok(m)
    };
    let src = bind(&mut tape, src_lang)?;
    let tgt = bind(&mut tape, tgt_lang)?;
    let codebook = match (&system.codebook, cfg.quantize) {
        (Some(cb), true) => {
            let (b, vars) = cb.bind(&mut tape, !frozen.codebook);
            if !frozen.codebook {
                bound_vars.extend(vars);
            }
            Some(b)
        }
        (None, true) => return Err(Error::Config("quantization enabled but the system has no codebook".into())),
        _ => None,
    };
    let mods = PairModules { src: &src, tgt: &tgt, codebook: codebook.as_ref() };
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut dropout = if system.model.dropout > 0.0 {
        Dropout::train(system.model.dropout, &mut rng)
    } else {
        Dropout::off()
    };
    let (loss, comps) = joint_loss(&mut tape, &mods, &system.model, cfg, batch, &mut dropout)?;
    if !comps.all_finite() {
        return Ok((comps, BTreeMap::new()));
    }
    let mut grads = tape.backward(loss)?;
    let named = bound_vars
        .into_iter()
        .map(|(name, v)| {
            let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            (name, g)
        })
        .collect();
    Ok((comps, named))
}

fn adam_update(param: &mut Tensor, grad: &Tensor, moments: &mut Moments, cfg: &TrainConfig, t: u64) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let (m, v) = (moments.m.data_mut(), moments.v.data_mut());
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
    }
}

/// One backward pass over the joint loss and one Adam update of every
/// unfrozen parameter.
pub fn train_step(
    system: &mut System,
    state: &mut TrainState,
    src_lang: &str,
    tgt_lang: &str,
    batch: &PairBatch,
    cfg: &TrainConfig,
    frozen: &Frozen,
) -> Result<LossComponents> {
    let next = state.step + 1;
    let dropout_seed = derive_seed(cfg.seed, &format!("dropout/{next}"));
    let (comps, grads) = compute_gradients(system, src_lang, tgt_lang, batch, cfg, frozen, dropout_seed)?;
    if !comps.all_finite() {
        let components = serde_json::to_string(&comps).unwrap_or_default();
        return Err(Error::Divergence { step: next, components });
    }
    system.visit_params_mut(&mut |name, param| {
        if let Some(g) = grads.get(name) {
            let moments = state
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments { m: Tensor::zeros(param.shape()), v: Tensor::zeros(param.shape()) });
            adam_update(param, g, moments, cfg, next);
        }
    });
    state.step = next;
    state.history.push(comps.clone());
    Ok(comps)
}

/// Runs `steps` training steps on the pair `(corpus.src_lang,
/// corpus.tgt_lang)`, continuing from `state.step`. `on_step` sees every
/// record; an error from it stops training.
pub fn train(
    system: &mut System,
    state: &mut TrainState,
    corpus: &ParallelCorpus,
    cfg: &TrainConfig,
    steps: u64,
    frozen: &Frozen,
    mut on_step: impl FnMut(&System, &TrainState, &StepRecord) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Degenerate("training corpus is empty".into()));
    }
    if cfg.distance == DistanceMode::Corr && corpus.len() < 2 {
        return Err(Error::Config("correlation distance needs a corpus of at least 2 pairs".into()));
    }
    let (src, tgt) = (corpus.src_lang.as_str(), corpus.tgt_lang.as_str());
    for _ in 0..steps {
        let start = Instant::now();
        let idx = batch_indices(corpus.len(), cfg.batch_size, cfg.seed, state.step);
        let batch = PairBatch::from_corpus(corpus, &idx);
        let components = train_step(system, state, src, tgt, &batch, cfg, frozen)?;
        let record = StepRecord {
            step: state.step,
            src_lang: src.to_string(),
            tgt_lang: tgt.to_string(),
            components,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_step(system, state, &record)?;
    }
    Ok(())
}

/// Adds `module` to a trained system using only `corpus`, which pairs an
/// existing pivot language (`corpus.src_lang`) with the new language
/// (`corpus.tgt_lang`). Trains `L_PN + L_NP + L_NN + d(h(P), h(N))`; the pivot
/// (and any codebook) stays frozen unless `cfg.joint_finetune` is set.
pub fn add_language(
    system: &mut System,
    module: LanguageModule,
    vocab_hash: String,
    corpus: &ParallelCorpus,
    cfg: &TrainConfig,
    steps: u64,
    on_step: impl FnMut(&System, &TrainState, &StepRecord) -> Result<()>,
) -> Result<TrainState> {
    let pivot = corpus.src_lang.clone();
    system.module(&pivot)?;
    if module.language != corpus.tgt_lang {
        return Err(Error::Config(format!(
            "module language '{}' does not match corpus target '{}'",
            module.language, corpus.tgt_lang
        )));
    }
    system.add_module(module, vocab_hash)?;
    let mut cfg = cfg.clone();
    if !cfg.anchor_pivot {
        cfg.loss_weights.0[0] = 0.0;
    }
    cfg.quantize = system.codebook.is_some();
    let frozen = if cfg.joint_finetune {
        Frozen::default()
    } else {
        Frozen { languages: BTreeSet::from([pivot]), codebook: true }
    };
    let mut state = TrainState::default();
    train(system, &mut state, corpus, &cfg, steps, &frozen, on_step)?;
    Ok(state)
}
