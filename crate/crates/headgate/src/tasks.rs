//! Synthetic task generators with ground-truth oracles.
//!
//! The central construction is the planted-head task: a teacher model equal
//! to the base model plus known edits (gates fixed to 1) on a known set of
//! heads labels random prompts. Training on those labels must rediscover the
//! planted heads, which gives localization claims a checkable ground truth.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interventions::{FrozenEdit, FrozenMap, Site};
use crate::model::{Batch, Transformer};
use crate::numerics::RngStream;

pub const TASK_FORMAT_VERSION: u32 = 1;

/// One multiple-choice example: a token sequence whose answer position holds
/// the correct choice token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub answer_pos: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub n_choices: usize,
    /// Token id of each choice; predictions are argmax restricted to these.
    pub answer_tokens: Vec<usize>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskSpec {
    pub fn validate(&self, vocab: usize, max_seq: usize) -> Result<()> {
        if self.answer_tokens.len() != self.n_choices {
            return Err(Error::Invalid(format!(
                "task {}: {} answer tokens for {} choices",
                self.name,
                self.answer_tokens.len(),
                self.n_choices
            )));
        }
        for split in [&self.train, &self.val, &self.test] {
            for ex in split {
                if ex.tokens.len() > max_seq {
                    return Err(Error::Invalid(format!(
                        "task {}: example length {} exceeds max_seq {max_seq}",
                        self.name,
                        ex.tokens.len()
                    )));
                }
                if ex.answer_pos == 0 || ex.answer_pos >= ex.tokens.len() {
                    return Err(Error::Invalid(format!(
                        "task {}: answer position {} invalid for length {}",
                        self.name,
                        ex.answer_pos,
                        ex.tokens.len()
                    )));
                }
                if ex.label >= self.n_choices {
                    return Err(Error::Invalid(format!(
                        "task {}: label {} out of range",
                        self.name, ex.label
                    )));
                }
                if ex.tokens.iter().any(|&t| t >= vocab) {
                    return Err(Error::Invalid(format!(
                        "task {}: token id out of vocab {vocab}",
                        self.name
                    )));
                }
                if ex.tokens[ex.answer_pos] != self.answer_tokens[ex.label] {
                    return Err(Error::Invalid(format!(
                        "task {}: answer slot does not hold the label's token",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_task_file(
            path,
            &TaskFile {
                format_version: TASK_FORMAT_VERSION,
                task: self.clone(),
                plant: None,
            },
        )
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&TaskFile {
            format_version: TASK_FORMAT_VERSION,
            task: self.clone(),
            plant: None,
        })
        .expect("task serialization")
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

/// Which edit roles the teacher uses on the planted heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    Additive,
    Multiplicative,
    Hybrid,
}

/// Ground truth recorded alongside a planted task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantInfo {
    pub kind: PlantKind,
    pub planted_heads: Vec<(usize, usize)>,
    /// Per planted head: the additive offset a* (empty for multiplicative
    /// plants).
    pub offsets_a: Vec<Vec<f64>>,
    /// Per planted head: the scaling vector m* (empty for additive plants).
    pub offsets_m: Vec<Vec<f64>>,
    /// Scale the generator settled on after gap escalation.
    pub offset_scale_used: f64,
    /// Mean logit gap (label token vs best other choice) under the teacher.
    pub teacher_margin: f64,
    /// Fraction of (example, position) pairs where teacher logits differ
    /// from base logits, measured during generation.
    pub logit_change_frac: f64,
    /// Base-model accuracy on the task labels, measured on the val split.
    pub base_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTask {
    pub task: TaskSpec,
    pub plant: PlantInfo,
}

impl PlantedTask {
    /// The teacher's edits as a frozen map: gates 1 on planted heads only.
    /// Applying this map reproduces teacher logits exactly.
    pub fn teacher_map(&self, d_head: usize) -> FrozenMap {
        let entries = self
            .plant
            .planted_heads
            .iter()
            .enumerate()
            .map(|(i, &(layer, head))| {
                let a = self
                    .plant
                    .offsets_a
                    .get(i)
                    .filter(|v| !v.is_empty())
                    .cloned()
                    .unwrap_or_else(|| vec![0.0; d_head]);
                let m = self
                    .plant
                    .offsets_m
                    .get(i)
                    .filter(|v| !v.is_empty())
                    .cloned()
                    .unwrap_or_else(|| vec![0.0; d_head]);
                FrozenEdit {
                    layer,
                    head,
                    g_a: if self.plant.offsets_a.get(i).map_or(false, |v| !v.is_empty()) {
                        1.0
                    } else {
                        0.0
                    },
                    g_m: if self.plant.offsets_m.get(i).map_or(false, |v| !v.is_empty()) {
                        1.0
                    } else {
                        0.0
                    },
                    a,
                    m,
                }
            })
            .collect();
        FrozenMap {
            site: Site::AttentionHead,
            d_head,
            epsilon: 0.0,
            entries,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_task_file(
            path,
            &TaskFile {
                format_version: TASK_FORMAT_VERSION,
                task: self.task.clone(),
                plant: Some(self.plant.clone()),
            },
        )
    }

    pub fn load(path: &Path) -> Result<PlantedTask> {
        let file = load_task_file(path)?;
        let plant = file.plant.ok_or_else(|| {
            Error::Parse(format!("{}: task file has no plant section", path.display()))
        })?;
        Ok(PlantedTask {
            task: file.task,
            plant,
        })
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&TaskFile {
            format_version: TASK_FORMAT_VERSION,
            task: self.task.clone(),
            plant: Some(self.plant.clone()),
        })
        .expect("task serialization")
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

#[derive(Serialize, Deserialize)]
struct TaskFile {
    format_version: u32,
    task: TaskSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plant: Option<PlantInfo>,
}

fn save_task_file(path: &Path, file: &TaskFile) -> Result<()> {
    let text = serde_json::to_string_pretty(file).expect("task serialization");
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_task_file(path: &Path) -> Result<TaskFile> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Parse(format!("{}: missing format_version", path.display())))?
        as u32;
    if found != TASK_FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: TASK_FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Load either a plain task or a planted task from a file.
pub fn load_task(path: &Path) -> Result<(TaskSpec, Option<PlantInfo>)> {
    let file = load_task_file(path)?;
    Ok((file.task, file.plant))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Batch a slice of equal-length examples.
pub fn batch_examples(examples: &[Example], vocab: usize) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::Invalid("cannot batch zero examples".into()));
    }
    let t = examples[0].tokens.len();
    if examples.iter().any(|e| e.tokens.len() != t) {
        return Err(Error::Invalid("examples have unequal lengths".into()));
    }
    let mut tokens = Array2::zeros((examples.len(), t));
    let mut mask = Array2::from_elem((examples.len(), t), false);
    for (b, ex) in examples.iter().enumerate() {
        for (ti, &tok) in ex.tokens.iter().enumerate() {
            tokens[(b, ti)] = tok;
        }
        mask[(b, ex.answer_pos)] = true;
    }
    Batch::new(tokens, mask, vocab)
}

/// Accuracy of a (possibly edited) model on examples: the prediction is the
/// argmax over the task's choice tokens at each answer position, and an
/// example counts only if every answer token matches.
pub fn accuracy(
    model: &Transformer,
    maps: &[&FrozenMap],
    examples: &[Example],
    answer_tokens: &[usize],
    eval_batch: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Invalid("cannot evaluate zero examples".into()));
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(eval_batch.max(1)) {
        let batch = batch_examples(chunk, model.cfg().vocab)?;
        let logits = model.forward_frozen(&batch, maps)?;
        for (b, ex) in chunk.iter().enumerate() {
            let row = logits.slice(ndarray::s![b, ex.answer_pos - 1, ..]);
            let pred = restricted_argmax(&row.to_vec(), answer_tokens);
            if pred == ex.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

fn restricted_argmax(logits: &[f64], answer_tokens: &[usize]) -> usize {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &tok) in answer_tokens.iter().enumerate() {
        if logits[tok] > best_v {
            best_v = logits[tok];
            best = i;
        }
    }
    best
}

/// Options for planted-task generation.
#[derive(Debug, Clone)]
pub struct PlantOptions {
    pub k_heads: usize,
    pub offset_scale: f64,
    pub n_examples: usize,
    pub seed: u64,
    pub kind: PlantKind,
    pub n_choices: usize,
    pub prompt_len: usize,
    pub val_examples: usize,
    pub test_examples: usize,
    /// Minimum base-to-teacher accuracy gap; generation escalates the plant
    /// scale until the base model trails the teacher by at least this much.
    pub min_gap: f64,
}

impl Default for PlantOptions {
    fn default() -> Self {
        PlantOptions {
            k_heads: 4,
            offset_scale: 1.0,
            n_examples: 2000,
            seed: 42,
            kind: PlantKind::Additive,
            n_choices: 4,
            prompt_len: 12,
            val_examples: 300,
            test_examples: 300,
            min_gap: 0.2,
        }
    }
}

/// Generate a planted-head task.
///
/// Picks `k_heads` heads uniformly at random, draws plant vectors from a
/// seeded Gaussian at `offset_scale`, labels random prompts with the
/// teacher's restricted argmax, and escalates the scale (up to 10 times)
/// until base-model accuracy trails teacher accuracy by `min_gap`. The
/// teacher scores exactly 1.0 on its own labels by construction.
pub fn gen_planted_task(model: &Transformer, opts: &PlantOptions) -> Result<PlantedTask> {
    let cfg = model.cfg();
    let dh = cfg.d_head();
    if opts.k_heads > cfg.total_heads() {
        return Err(Error::Invalid(format!(
            "k_heads {} exceeds total heads {}",
            opts.k_heads,
            cfg.total_heads()
        )));
    }
    if opts.prompt_len + 1 > cfg.max_seq {
        return Err(Error::Invalid(format!(
            "prompt_len {} + answer exceeds max_seq {}",
            opts.prompt_len, cfg.max_seq
        )));
    }
    if opts.n_choices > cfg.n_favored {
        return Err(Error::Invalid(format!(
            "{} choices exceed the model's favored-token range {}",
            opts.n_choices, cfg.n_favored
        )));
    }
    // Prompt fillers stay clear of the favored range so choice tokens only
    // ever appear in the answer slot.
    let reserved = cfg.n_favored.max(opts.n_choices) + 1;
    if cfg.vocab <= reserved + 8 {
        return Err(Error::Invalid(format!(
            "vocab {} too small for {} choices",
            cfg.vocab, opts.n_choices
        )));
    }
    if !(opts.offset_scale > 0.0) {
        return Err(Error::Invalid("offset_scale must be positive".into()));
    }

    let root = RngStream::new(opts.seed);
    // Head choice and prompts stay fixed across escalations; only the plant
    // vectors rescale.
    let planted_heads: Vec<(usize, usize)> = {
        let mut rng = root.split("heads");
        rng.choose_k(cfg.total_heads(), opts.k_heads)
            .into_iter()
            .map(|i| (i / cfg.n_heads, i % cfg.n_heads))
            .collect()
    };
    let unit_a: Vec<Vec<f64>> = {
        let mut rng = root.split("offsets-a");
        (0..opts.k_heads).map(|_| rng.normal_vec(dh)).collect()
    };
    let unit_m: Vec<Vec<f64>> = {
        let mut rng = root.split("offsets-m");
        (0..opts.k_heads).map(|_| rng.normal_vec(dh)).collect()
    };

    // Choice tokens are ids 1..=n_choices; prompt tokens avoid them.
    let answer_tokens: Vec<usize> = (1..=opts.n_choices).collect();
    let total = opts.n_examples + opts.val_examples + opts.test_examples;
    let prompts: Vec<Vec<usize>> = {
        let mut rng = root.split("prompts");
        (0..total)
            .map(|_| {
                (0..opts.prompt_len)
                    .map(|_| reserved + rng.below(cfg.vocab - reserved))
                    .collect()
            })
            .collect()
    };

    let mut scale = opts.offset_scale;
    for attempt in 0..10 {
        let scale_a = if matches!(opts.kind, PlantKind::Additive | PlantKind::Hybrid) {
            scale
        } else {
            0.0
        };
        let scale_m = if matches!(opts.kind, PlantKind::Multiplicative | PlantKind::Hybrid) {
            scale
        } else {
            0.0
        };
        let offsets_a: Vec<Vec<f64>> = if scale_a > 0.0 {
            unit_a
                .iter()
                .map(|v| v.iter().map(|x| x * scale_a).collect())
                .collect()
        } else {
            vec![Vec::new(); opts.k_heads]
        };
        let offsets_m: Vec<Vec<f64>> = if scale_m > 0.0 {
            unit_m
                .iter()
                .map(|v| v.iter().map(|x| x * scale_m).collect())
                .collect()
        } else {
            vec![Vec::new(); opts.k_heads]
        };

        let teacher = FrozenMap {
            site: Site::AttentionHead,
            d_head: dh,
            epsilon: 0.0,
            entries: planted_heads
                .iter()
                .enumerate()
                .map(|(i, &(layer, head))| FrozenEdit {
                    layer,
                    head,
                    g_a: if offsets_a[i].is_empty() { 0.0 } else { 1.0 },
                    g_m: if offsets_m[i].is_empty() { 0.0 } else { 1.0 },
                    a: if offsets_a[i].is_empty() {
                        vec![0.0; dh]
                    } else {
                        offsets_a[i].clone()
                    },
                    m: if offsets_m[i].is_empty() {
                        vec![0.0; dh]
                    } else {
                        offsets_m[i].clone()
                    },
                })
                .collect(),
        };

        let labeled = label_prompts(model, &teacher, &prompts, &answer_tokens, opts.prompt_len)?;

        let mut examples = labeled.examples;
        let test = examples.split_off(opts.n_examples + opts.val_examples);
        let val = examples.split_off(opts.n_examples);
        let train = examples;

        let task = TaskSpec {
            name: format!(
                "planted-{}-k{}-seed{}",
                kind_tag(opts.kind),
                opts.k_heads,
                opts.seed
            ),
            n_choices: opts.n_choices,
            answer_tokens: answer_tokens.clone(),
            train,
            val,
            test,
        };

        // Degenerate plant: labels equal base argmax; no gap to enforce.
        if opts.k_heads == 0 {
            return Ok(PlantedTask {
                task,
                plant: PlantInfo {
                    kind: opts.kind,
                    planted_heads: planted_heads.clone(),
                    offsets_a,
                    offsets_m,
                    offset_scale_used: scale,
                    teacher_margin: labeled.teacher_margin,
                    logit_change_frac: labeled.logit_change_frac,
                    base_accuracy: 1.0,
                },
            });
        }

        let base_acc = accuracy(model, &[], &task.val, &answer_tokens, 64)?;
        if base_acc <= 1.0 - opts.min_gap {
            return Ok(PlantedTask {
                task,
                plant: PlantInfo {
                    kind: opts.kind,
                    planted_heads: planted_heads.clone(),
                    offsets_a,
                    offsets_m,
                    offset_scale_used: scale,
                    teacher_margin: labeled.teacher_margin,
                    logit_change_frac: labeled.logit_change_frac,
                    base_accuracy: base_acc,
                },
            });
        }
        let _ = attempt;
        scale *= 1.5;
    }
    Err(Error::Invalid(format!(
        "could not reach a base-to-teacher accuracy gap of {} after 10 scale escalations",
        opts.min_gap
    )))
}

fn kind_tag(kind: PlantKind) -> &'static str {
    match kind {
        PlantKind::Additive => "add",
        PlantKind::Multiplicative => "mul",
        PlantKind::Hybrid => "hyb",
    }
}

struct LabeledPrompts {
    examples: Vec<Example>,
    teacher_margin: f64,
    logit_change_frac: f64,
}

/// Run teacher and base over prompts, label each with the teacher's
/// restricted argmax, and record the margin and logit-change statistics.
fn label_prompts(
    model: &Transformer,
    teacher: &FrozenMap,
    prompts: &[Vec<usize>],
    answer_tokens: &[usize],
    answer_pos: usize,
) -> Result<LabeledPrompts> {
    let vocab = model.cfg().vocab;
    let mut examples = Vec::with_capacity(prompts.len());
    let mut margin_sum = 0.0;
    let mut changed = 0usize;
    let mut positions = 0usize;
    for chunk in prompts.chunks(128) {
        // Placeholder answer token; logits at answer_pos - 1 only see the
        // prompt, so the label does not depend on it.
        let stub: Vec<Example> = chunk
            .iter()
            .map(|p| {
                let mut tokens = p.clone();
                tokens.push(answer_tokens[0]);
                Example {
                    tokens,
                    answer_pos,
                    label: 0,
                }
            })
            .collect();
        let batch = batch_examples(&stub, vocab)?;
        let t_logits = model.forward_frozen(&batch, &[teacher])?;
        let b_logits = model.forward_base(&batch)?;
        for (b, p) in chunk.iter().enumerate() {
            let row = t_logits.slice(ndarray::s![b, answer_pos - 1, ..]).to_vec();
            let label = restricted_argmax(&row, answer_tokens);
            let best = row[answer_tokens[label]];
            let runner_up = answer_tokens
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != label)
                .map(|(_, &tok)| row[tok])
                .fold(f64::NEG_INFINITY, f64::max);
            margin_sum += best - runner_up;
            let mut tokens = p.clone();
            tokens.push(answer_tokens[label]);
            examples.push(Example {
                tokens,
                answer_pos,
                label,
            });
            for ti in 0..answer_pos {
                positions += 1;
                let differs = (0..vocab)
                    .any(|vi| t_logits[(b, ti, vi)] != b_logits[(b, ti, vi)]);
                if differs {
                    changed += 1;
                }
            }
        }
    }
    Ok(LabeledPrompts {
        teacher_margin: margin_sum / prompts.len() as f64,
        logit_change_frac: changed as f64 / positions.max(1) as f64,
        examples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    Copy,
    Parity,
    KeyValue,
}

/// Generate a rule-based multiple-choice task.
///
/// Labels are exactly balanced by construction (cycled then shuffled), and
/// every task has a closed-form oracle: copy exposes the answer token in the
/// prompt, parity counts marked bits, keyvalue pairs a queried key with its
/// value.
pub fn gen_toy_choice_task(kind: ToyKind, n: usize, seed: u64, vocab: usize) -> Result<TaskSpec> {
    if n == 0 {
        return Err(Error::Invalid("toy task needs n > 0".into()));
    }
    let root = RngStream::new(seed);
    let (name, n_choices) = match kind {
        ToyKind::Copy => ("toy-copy", 4),
        ToyKind::Parity => ("toy-parity", 2),
        ToyKind::KeyValue => ("toy-keyvalue", 4),
    };
    if vocab < 32 {
        return Err(Error::Invalid(format!("vocab {vocab} too small for toy tasks")));
    }
    let answer_tokens: Vec<usize> = (1..=n_choices).collect();

    let gen_split = |label_rng: &mut RngStream, n: usize| -> Vec<Example> {
        // Cycle labels for exact balance, then shuffle example order.
        let mut labels: Vec<usize> = (0..n).map(|i| i % n_choices).collect();
        label_rng.shuffle(&mut labels);
        labels
            .into_iter()
            .map(|label| gen_toy_example(kind, label, &answer_tokens, label_rng, vocab))
            .collect()
    };

    let mut rng = root.split("examples");
    let train = gen_split(&mut rng, n);
    let mut rng = root.split("val");
    let val = gen_split(&mut rng, 300.min(n.max(60)));
    let mut rng = root.split("test");
    let test = gen_split(&mut rng, 300.min(n.max(60)));

    Ok(TaskSpec {
        name: format!("{name}-seed{seed}"),
        n_choices,
        answer_tokens,
        train,
        val,
        test,
    })
}

/// Toy-task token layout, kept clear of the model's favored range: 0
/// unused, 1..=4 choices (inside the favored set), 9 separator, 10..=11
/// bits, 12..=19 keys, 20.. filler.
const TOY_SEP: usize = 9;
const TOY_BIT0: usize = 10;
const TOY_KEYS: std::ops::Range<usize> = 12..20;
const TOY_FILLER_LO: usize = 20;

fn gen_toy_example(
    kind: ToyKind,
    label: usize,
    answer_tokens: &[usize],
    rng: &mut RngStream,
    vocab: usize,
) -> Example {
    let sep = TOY_SEP;
    let bit0 = TOY_BIT0;
    let keys: Vec<usize> = TOY_KEYS.collect();
    let filler_lo = TOY_FILLER_LO;
    let filler = |rng: &mut RngStream| filler_lo + rng.below(vocab - filler_lo);
    let mut tokens: Vec<usize> = Vec::new();
    match kind {
        ToyKind::Copy => {
            // The answer token appears once in the prompt among filler.
            let len = 8;
            let pos = rng.below(len);
            for i in 0..len {
                if i == pos {
                    tokens.push(answer_tokens[label]);
                } else {
                    tokens.push(filler(rng));
                }
            }
            tokens.push(sep);
        }
        ToyKind::Parity => {
            // Parity of marked bits decides the label; last bit fixes it.
            let len = 8;
            let mut ones = 0usize;
            for _ in 0..len - 1 {
                let b = rng.below(2);
                ones += b;
                tokens.push(bit0 + b);
            }
            let want_odd = label == 1;
            let need = if (ones % 2 == 1) == want_odd { 0 } else { 1 };
            ones += need;
            let _ = ones;
            tokens.push(bit0 + need);
            tokens.push(sep);
        }
        ToyKind::KeyValue => {
            // Pairs k v ... then sep and the queried key; the queried key's
            // value is the answer.
            let n_pairs = 3;
            let mut pool = keys.clone();
            rng.shuffle(&mut pool);
            let used: Vec<usize> = pool.into_iter().take(n_pairs).collect();
            let query_slot = rng.below(n_pairs);
            let mut values: Vec<usize> = (0..n_pairs)
                .map(|i| {
                    if i == query_slot {
                        label
                    } else {
                        rng.below(answer_tokens.len())
                    }
                })
                .collect();
            for (k, v) in used.iter().zip(values.iter()) {
                tokens.push(*k);
                tokens.push(answer_tokens[*v]);
            }
            values.clear();
            tokens.push(sep);
            tokens.push(used[query_slot]);
        }
    }
    tokens.push(answer_tokens[label]);
    let answer_pos = tokens.len() - 1;
    Example {
        tokens,
        answer_pos,
        label,
    }
}

/// Rule-based oracle for toy tasks; returns the label implied by the prompt.
pub fn toy_oracle(kind: ToyKind, ex: &Example, answer_tokens: &[usize]) -> usize {
    match kind {
        ToyKind::Copy => {
            for &t in &ex.tokens[..ex.answer_pos] {
                if let Some(i) = answer_tokens.iter().position(|&a| a == t) {
                    return i;
                }
            }
            unreachable!("copy prompt always shows the answer token");
        }
        ToyKind::Parity => {
            let ones = ex.tokens[..ex.answer_pos]
                .iter()
                .filter(|&&t| t == TOY_BIT0 + 1)
                .count();
            ones % 2
        }
        ToyKind::KeyValue => {
            let query = ex.tokens[ex.answer_pos - 1];
            let mut i = 0;
            while i + 1 < ex.answer_pos {
                if ex.tokens[i] == query {
                    let v = ex.tokens[i + 1];
                    return answer_tokens.iter().position(|&a| a == v).unwrap();
                }
                i += 2;
            }
            unreachable!("keyvalue prompt always contains the queried key");
        }
    }
}

/// Deterministic subsample of the train split; val and test are untouched.
///
/// Uses a seeded shuffle of train indices and takes the first n, so smaller
/// samples are prefixes of larger ones under the same seed; the selected
/// examples keep their original relative order.
pub fn sample_low_resource(task: &TaskSpec, n: usize, seed: u64) -> Result<TaskSpec> {
    if n > task.train.len() {
        return Err(Error::Invalid(format!(
            "requested {n} examples but the train pool has {}",
            task.train.len()
        )));
    }
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    RngStream::new(seed).split("low-resource").shuffle(&mut order);
    let mut selected: Vec<usize> = order.into_iter().take(n).collect();
    selected.sort_unstable();
    Ok(TaskSpec {
        name: task.name.clone(),
        n_choices: task.n_choices,
        answer_tokens: task.answer_tokens.clone(),
        train: selected.into_iter().map(|i| task.train[i].clone()).collect(),
        val: task.val.clone(),
        test: task.test.clone(),
    })
}

/// The shuffle order used by [`sample_low_resource`], exposed for tests of
/// the prefix property.
pub fn low_resource_order(pool: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool).collect();
    RngStream::new(seed).split("low-resource").shuffle(&mut order);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_model() -> Transformer {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_ff: 64,
            vocab: 96,
            max_seq: 16,
            init_seed: 11,
            ..ModelConfig::default()
        };
        Transformer::init(&cfg).unwrap()
    }

    fn small_opts() -> PlantOptions {
        PlantOptions {
            k_heads: 2,
            n_examples: 120,
            val_examples: 80,
            test_examples: 40,
            prompt_len: 8,
            seed: 42,
            ..PlantOptions::default()
        }
    }

    #[test]
    fn planted_teacher_scores_one_on_own_labels() {
        let model = small_model();
        let planted = gen_planted_task(&model, &small_opts()).unwrap();
        let teacher = planted.teacher_map(model.cfg().d_head());
        for split in [&planted.task.train, &planted.task.val, &planted.task.test] {
            let acc = accuracy(&model, &[&teacher], split, &planted.task.answer_tokens, 64)
                .unwrap();
            assert_eq!(acc, 1.0);
        }
    }

    #[test]
    fn planted_base_accuracy_gap() {
        let model = small_model();
        let planted = gen_planted_task(&model, &small_opts()).unwrap();
        assert!(planted.plant.base_accuracy <= 0.8);
        let measured = accuracy(
            &model,
            &[],
            &planted.task.val,
            &planted.task.answer_tokens,
            64,
        )
        .unwrap();
        assert_eq!(measured, planted.plant.base_accuracy);
    }

    #[test]
    fn planted_teacher_changes_most_positions() {
        let model = small_model();
        let planted = gen_planted_task(&model, &small_opts()).unwrap();
        assert!(
            planted.plant.logit_change_frac > 0.99,
            "changed fraction {}",
            planted.plant.logit_change_frac
        );
        assert!(planted.plant.teacher_margin > 0.0);
    }

    #[test]
    fn planted_degenerate_k0() {
        let model = small_model();
        let mut opts = small_opts();
        opts.k_heads = 0;
        let planted = gen_planted_task(&model, &opts).unwrap();
        // Labels equal base argmax, so the base model is already perfect.
        let acc = accuracy(
            &model,
            &[],
            &planted.task.val,
            &planted.task.answer_tokens,
            64,
        )
        .unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn planted_generation_is_deterministic() {
        let model = small_model();
        let a = gen_planted_task(&model, &small_opts()).unwrap();
        let b = gen_planted_task(&model, &small_opts()).unwrap();
        assert_eq!(a, b);
        let mut opts2 = small_opts();
        opts2.seed = 43;
        let c = gen_planted_task(&model, &opts2).unwrap();
        assert_ne!(a.plant.planted_heads, c.plant.planted_heads);
    }

    #[test]
    fn toy_tasks_obey_their_oracles() {
        for kind in [ToyKind::Copy, ToyKind::Parity, ToyKind::KeyValue] {
            let task = gen_toy_choice_task(kind, 200, 42, 96).unwrap();
            task.validate(96, 16).unwrap();
            for ex in task.train.iter().chain(&task.val).chain(&task.test) {
                assert_eq!(toy_oracle(kind, ex, &task.answer_tokens), ex.label);
            }
        }
    }

    #[test]
    fn toy_labels_balanced() {
        let task = gen_toy_choice_task(ToyKind::Copy, 2000, 7, 96).unwrap();
        let mut counts = vec![0usize; task.n_choices];
        for ex in &task.train {
            counts[ex.label] += 1;
        }
        let expect = 2000.0 / task.n_choices as f64;
        for c in counts {
            assert!(
                (c as f64 - expect).abs() / expect < 0.05,
                "class count {c} vs expected {expect}"
            );
        }
    }

    #[test]
    fn toy_generation_deterministic() {
        let a = gen_toy_choice_task(ToyKind::KeyValue, 100, 9, 96).unwrap();
        let b = gen_toy_choice_task(ToyKind::KeyValue, 100, 9, 96).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn low_resource_full_size_is_identity() {
        let task = gen_toy_choice_task(ToyKind::Copy, 50, 3, 96).unwrap();
        let sub = sample_low_resource(&task, 50, 42).unwrap();
        assert_eq!(sub, task);
    }

    #[test]
    fn low_resource_deterministic_and_prefix() {
        let task = gen_toy_choice_task(ToyKind::Copy, 400, 3, 96).unwrap();
        let a = sample_low_resource(&task, 200, 42).unwrap();
        let b = sample_low_resource(&task, 200, 42).unwrap();
        assert_eq!(a, b);

        let small = sample_low_resource(&task, 100, 42).unwrap();
        // The 100-sample selection is a prefix of the 200-sample selection
        // under the fixed shuffle.
        let order = low_resource_order(task.train.len(), 42);
        let first100: std::collections::BTreeSet<usize> =
            order[..100].iter().copied().collect();
        let first200: std::collections::BTreeSet<usize> =
            order[..200].iter().copied().collect();
        assert!(first100.is_subset(&first200));
        for ex in &small.train {
            assert!(a.train.contains(ex));
        }
        assert_eq!(small.val, task.val);
        assert_eq!(small.test, task.test);
    }

    #[test]
    fn low_resource_rejects_oversample() {
        let task = gen_toy_choice_task(ToyKind::Copy, 50, 3, 96).unwrap();
        assert!(sample_low_resource(&task, 51, 42).is_err());
    }

    #[test]
    fn task_file_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.json");
        let model = small_model();
        let planted = gen_planted_task(&model, &small_opts()).unwrap();
        planted.save(&path).unwrap();
        let loaded = PlantedTask::load(&path).unwrap();
        assert_eq!(loaded, planted);
        assert_eq!(loaded.content_hash(), planted.content_hash());
    }
}
