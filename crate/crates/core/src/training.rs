//! Staged training: caption-only, image-only with a frozen text model,
//! joint fine-tuning, and the two ablations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generation::{argmax_token, build_teacher_forcing_mask};
use crate::model::{Dropout, Model, ModelConfig};
use crate::multimodal::{assemble_input, AssembledInput, InputMode, Slot, VisualSequence};
use crate::numerics::{
    adam_step, clip_grad_norm, cross_entropy, lr_schedule, AdamConfig, OptimizerState, Tape,
    Tensor, Var,
};
use crate::TokenId;

/// Target id that the loss skips.
pub const IGNORE_ID: TokenId = TokenId::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainingStage {
    CaptionOnly,
    ImageOnly,
    ImageOnlyUnfrozen,
    Joint,
    JointFromScratch,
}

impl TrainingStage {
    pub const ALL: [TrainingStage; 5] = [
        Self::CaptionOnly,
        Self::ImageOnly,
        Self::ImageOnlyUnfrozen,
        Self::Joint,
        Self::JointFromScratch,
    ];

    /// Short name used on the command line and in logs.
    pub fn name(self) -> &'static str {
        match self {
            Self::CaptionOnly => "1",
            Self::ImageOnly => "2",
            Self::ImageOnlyUnfrozen => "2u",
            Self::Joint => "3",
            Self::JointFromScratch => "3scratch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown stage {s:?}; expected 1, 2, 2u, 3 or 3scratch"
                ))
            })
    }

    pub fn mode(self) -> InputMode {
        match self {
            Self::CaptionOnly => InputMode::CaptionOnly,
            Self::ImageOnly | Self::ImageOnlyUnfrozen => InputMode::ImageOnly,
            Self::Joint | Self::JointFromScratch => InputMode::ImagePlusCaption,
        }
    }

    /// Whether the parameter called `name` is updated in this stage.
    pub fn trains(self, name: &str) -> bool {
        match self {
            Self::CaptionOnly => !Model::is_projection(name),
            Self::ImageOnly => Model::is_projection(name),
            _ => true,
        }
    }

    pub fn needs_caption_model(self) -> bool {
        matches!(
            self,
            Self::ImageOnly | Self::ImageOnlyUnfrozen | Self::Joint
        )
    }

    pub fn needs_image_model(self) -> bool {
        self == Self::Joint
    }
}

/// One image with its caption and reference questions, already tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingItem {
    pub visual: Option<VisualSequence>,
    pub caption: Vec<TokenId>,
    pub questions: Vec<Vec<TokenId>>,
}

/// One input paired with one target question.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: AssembledInput,
    /// Question tokens without `[EOS]`.
    pub target: Vec<TokenId>,
    /// Index of the source item.
    pub item: usize,
}

impl Example {
    /// Number of predicted tokens, `[EOS]` included.
    pub fn num_predictions(&self) -> usize {
        self.target.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub examples: Vec<Example>,
}

/// One example per reference question, in corpus order. A question plus
/// `[EOS]` must fit in `max_question_len`.
pub fn expand_examples(
    items: &[TrainingItem],
    mode: InputMode,
    model: &Model,
) -> Result<Vec<Example>> {
    let cfg = model.config();
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let input = assemble_input(
            mode,
            item.visual.as_ref(),
            Some(&item.caption),
            model.specials(),
            cfg,
        )?;
        for q in &item.questions {
            if q.len() + 1 > cfg.max_question_len {
                return Err(Error::Validation(format!(
                    "item {i}: question of {} tokens plus [EOS] exceeds max_question_len {}",
                    q.len(),
                    cfg.max_question_len
                )));
            }
            out.push(Example {
                input: input.clone(),
                target: q.clone(),
                item: i,
            });
        }
    }
    Ok(out)
}

/// Example indices for one epoch: a seeded permutation cut into batches.
/// The last batch may be short.
pub fn shuffle_batches(
    num_examples: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if num_examples == 0 {
        return Err(Error::Empty("no training examples".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..num_examples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Expands, shuffles and batches `items` for one epoch.
pub fn make_batches(
    items: &[TrainingItem],
    mode: InputMode,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    model: &Model,
) -> Result<Vec<Batch>> {
    let examples = expand_examples(items, mode, model)?;
    Ok(shuffle_batches(examples.len(), batch_size, seed, epoch)?
        .into_iter()
        .map(|idx| Batch {
            examples: idx.into_iter().map(|i| examples[i].clone()).collect(),
        })
        .collect())
}

/// Slots, positions and mask for predicting every target token in one pass.
///
/// Layout: `X ⊕ y_1..y_T ⊕ [MASK]_1..[MASK]_{T+1}`. The `t`-th `[MASK]`
/// sits at the position `y_t` occupies and sees `X` and `y_<t` only, so its
/// prediction equals step `t` of greedy generation on the gold prefix.
fn teacher_forcing_layout(model: &Model, ex: &Example) -> (Vec<Slot>, Vec<usize>, usize) {
    let n = ex.input.len();
    let t = ex.target.len();
    let mut slots = ex.input.slots.clone();
    slots.extend(ex.target.iter().map(|&y| Slot::Token(y)));
    slots.extend(std::iter::repeat(Slot::Token(model.specials().mask)).take(t + 1));
    let positions: Vec<usize> = (0..n + t).chain(n..=n + t).collect();
    (slots, positions, n + t)
}

fn targets_with_eos(model: &Model, ex: &Example) -> Vec<TokenId> {
    let mut t = ex.target.clone();
    t.push(model.specials().eos);
    t
}

/// Records the teacher-forced logits (`(T+1) x V`) of `ex` on `tape`.
pub fn record_teacher_forced(
    model: &Model,
    tape: &mut Tape,
    ex: &Example,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let (slots, positions, first_query) = teacher_forcing_layout(model, ex);
    let mask = build_teacher_forcing_mask(ex.input.len(), ex.target.len());
    let x = model.embed_sequence(tape, &slots, &positions)?;
    let enc = model.encode(tape, x, &mask, dropout)?;
    let last = enc.last();
    let rows: Vec<(Var, usize)> = (first_query..slots.len()).map(|r| (last, r)).collect();
    let picked = tape.stack_rows(&rows)?;
    model.decode_logits(tape, picked)
}

/// Teacher-forced logits for `y_1..y_T, [EOS]`, without dropout.
pub fn teacher_forced_logits(model: &Model, ex: &Example) -> Result<Tensor> {
    let mut tape = Tape::new(model.params());
    let logits = record_teacher_forced(model, &mut tape, ex, None)?;
    Ok(tape.value(logits).clone())
}

/// Mean negative log-likelihood per predicted token over the batch.
pub fn stage_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in &batch.examples {
        let logits = teacher_forced_logits(model, ex)?;
        let k = ex.num_predictions();
        total += cross_entropy(&logits, &targets_with_eos(model, ex), IGNORE_ID)? * k as f64;
        count += k;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / count as f64)
}

/// Fraction of target tokens, `[EOS]` included, that the teacher-forced
/// argmax predicts correctly.
pub fn teacher_forced_accuracy(model: &Model, examples: &[Example]) -> Result<f64> {
    let sp = model.specials();
    let (mut right, mut total) = (0usize, 0usize);
    for ex in examples {
        let logits = teacher_forced_logits(model, ex)?;
        for (row, &y) in targets_with_eos(model, ex).iter().enumerate() {
            right += usize::from(argmax_token(logits.row(row), &[sp.pad, sp.mask]) == y);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("no examples to score".into()));
    }
    Ok(right as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: TrainingStage,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Stop after this many updates even if epochs remain.
    pub max_steps: Option<u64>,
}

impl StagePlan {
    pub const DEFAULT_EPOCHS: usize = 5;
    pub const DEFAULT_BATCH_SIZE: usize = 32;
    pub const DEFAULT_CLIP_NORM: f64 = 1.0;
    pub const DEFAULT_DROPOUT: f64 = 0.1;

    pub fn new(stage: TrainingStage, seed: u64) -> Self {
        Self {
            stage,
            epochs: Self::DEFAULT_EPOCHS,
            batch_size: Self::DEFAULT_BATCH_SIZE,
            adam: AdamConfig::default(),
            clip_norm: Self::DEFAULT_CLIP_NORM,
            dropout: Self::DEFAULT_DROPOUT,
            seed,
            max_steps: None,
        }
    }

    pub fn total_steps(&self, num_examples: usize) -> u64 {
        let per_epoch = num_examples.div_ceil(self.batch_size.max(1)) as u64;
        let planned = per_epoch * self.epochs as u64;
        self.max_steps.map_or(planned, |m| m.min(planned))
    }
}

/// Checkpoints a stage starts from.
#[derive(Clone, Copy, Debug, Default)]
pub struct StageInputs<'a> {
    pub caption_model: Option<&'a Model>,
    pub image_model: Option<&'a Model>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub stage: &'static str,
    pub lr: f64,
    pub loss: f64,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        format!(
            "step={} stage={} lr={:.8e} loss={:.6}",
            self.step, self.stage, self.lr, self.loss
        )
    }
}

pub struct StageOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
}

/// Builds the starting model of a stage from its prerequisites.
pub fn initial_model(plan: &StagePlan, config: &ModelConfig, inputs: StageInputs) -> Result<Model> {
    let stage = plan.stage;
    let missing = |what: &str| {
        Error::Prerequisite(format!(
            "stage {} requires the {what} checkpoint",
            stage.name()
        ))
    };
    let forbid = |what: &str| {
        Error::Prerequisite(format!(
            "stage {} starts from scratch and takes no {what} checkpoint",
            stage.name()
        ))
    };
    let fresh = Model::init(config.clone(), plan.seed)?;
    match stage {
        TrainingStage::CaptionOnly | TrainingStage::JointFromScratch => {
            if inputs.caption_model.is_some() {
                return Err(forbid("stage 1"));
            }
            if inputs.image_model.is_some() {
                return Err(forbid("stage 2"));
            }
            Ok(fresh)
        }
        TrainingStage::ImageOnly | TrainingStage::ImageOnlyUnfrozen => {
            let text = inputs.caption_model.ok_or_else(|| missing("stage 1"))?;
            if inputs.image_model.is_some() {
                return Err(Error::Prerequisite(format!(
                    "stage {} takes no stage 2 checkpoint",
                    stage.name()
                )));
            }
            // Text model from stage 1, a fresh projection.
            let mut m = fresh;
            m.copy_from(text, |n| !Model::is_projection(n))?;
            Ok(m)
        }
        TrainingStage::Joint => {
            let text = inputs.caption_model.ok_or_else(|| missing("stage 1"))?;
            let image = inputs.image_model.ok_or_else(|| missing("stage 2"))?;
            let mut m = fresh;
            m.copy_from(text, |n| !Model::is_projection(n))?;
            m.copy_from(image, Model::is_projection)?;
            Ok(m)
        }
    }
}

/// Runs one stage of training over the examples of its input mode.
pub fn run_stage(
    plan: &StagePlan,
    config: &ModelConfig,
    items: &[TrainingItem],
    inputs: StageInputs,
) -> Result<StageOutcome> {
    let mut model = initial_model(plan, config, inputs)?;
    let stage = plan.stage;
    model.params_mut().set_trainable(|n| stage.trains(n));
    let examples = expand_examples(items, stage.mode(), &model)?;
    let total = plan.total_steps(examples.len());
    if total == 0 {
        return Err(Error::Config("the plan performs no updates".into()));
    }
    let mut opt = OptimizerState::new(plan.adam, total);
    let mut dropout = Dropout::new(plan.dropout, plan.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(total as usize);
    let mut epoch = 0u64;
    'outer: loop {
        for batch in shuffle_batches(examples.len(), plan.batch_size, plan.seed, epoch)? {
            let step = opt.step + 1;
            let loss = train_step(
                &mut model,
                &examples,
                &batch,
                &mut dropout,
                plan.clip_norm,
                &mut opt,
            )
            .map_err(|e| match e {
                Error::NonFinite { detail, .. } => Error::NonFinite {
                    step,
                    stage: stage.name().to_string(),
                    detail,
                },
                other => other,
            })?;
            log.push(LogRecord {
                step,
                stage: stage.name(),
                lr: lr_schedule(&opt, step),
                loss,
            });
            if opt.step >= total {
                break 'outer;
            }
        }
        epoch += 1;
    }
    Ok(StageOutcome { model, log })
}

/// One clipped Adam update on a batch; returns the batch loss.
fn train_step(
    model: &mut Model,
    examples: &[Example],
    batch: &[usize],
    dropout: &mut Dropout,
    clip_norm: f64,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let count: usize = batch.iter().map(|&i| examples[i].num_predictions()).sum();
    model.params_mut().zero_grad();
    let mut batch_loss = 0.0;
    for &i in batch {
        let ex = &examples[i];
        let grads = {
            let mut tape = Tape::new(model.params());
            let logits = record_teacher_forced(model, &mut tape, ex, Some(dropout))?;
            let loss = tape.cross_entropy(logits, &targets_with_eos(model, ex), IGNORE_ID)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(non_finite(format!(
                    "loss {value} on example of item {}",
                    ex.item
                )));
            }
            batch_loss += value * ex.num_predictions() as f64;
            tape.backward(loss)?
        };
        model
            .params_mut()
            .accumulate(&grads, ex.num_predictions() as f64 / count as f64);
    }
    let norm = clip_grad_norm(model.params_mut(), clip_norm);
    if !norm.is_finite() {
        return Err(non_finite(format!("gradient norm {norm}")));
    }
    adam_step(model.params_mut(), opt);
    Ok(batch_loss / count as f64)
}

fn non_finite(detail: String) -> Error {
    Error::NonFinite {
        step: 0,
        stage: String::new(),
        detail,
    }
}
