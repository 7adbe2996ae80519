//! Session mechanics for few-shot class-incremental learning: deterministic
//! splits, the strictly ordered session loop, cumulative evaluation, and the
//! base/novel accuracy breakdowns.

use std::cell::RefCell;
use std::collections::BTreeSet;

use crate::classifier::ClassId;
use crate::tensor::{Rng, Tensor};
use crate::{LgspError, Result};

/// Benchmark layout: one base session plus `sessions` novel sessions of
/// `n_way` classes x `k_shot` samples.
#[derive(Debug, Clone)]
pub struct FscilSpec {
    pub base_classes: usize,
    pub base_shots: usize,
    /// number of novel sessions (T)
    pub sessions: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

/// One labeled image with a stable id.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub class: ClassId,
    /// [1, C, H, W]
    pub data: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Pretext,
}

impl std::str::FromStr for Split {
    type Err = LgspError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "pretext" => Ok(Split::Pretext),
            other => Err(LgspError::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
            Split::Pretext => write!(f, "pretext"),
        }
    }
}

/// A loaded dataset item (manifest row plus pixels).
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub id: usize,
    pub class: ClassId,
    pub split: Split,
    pub data: Tensor,
}

/// Training and test data introduced by one session.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub index: usize,
    pub classes: Vec<ClassId>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Deterministic seeded assignment of classes and samples to sessions.
///
/// Session 0 holds `base_classes` classes with `base_shots` training samples
/// each; sessions 1..=T hold `n_way` classes with `k_shot` samples. Class
/// sets are mutually exclusive by construction.
pub fn build_sessions(spec: &FscilSpec, items: &[DatasetItem]) -> Result<Vec<SessionData>> {
    let mut classes: Vec<ClassId> = items
        .iter()
        .filter(|i| i.split != Split::Pretext)
        .map(|i| i.class)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let needed = spec.base_classes + spec.sessions * spec.n_way;
    if classes.len() < needed {
        return Err(LgspError::Protocol(format!(
            "need {needed} classes, dataset has {}",
            classes.len()
        )));
    }
    let mut rng = Rng::new(spec.seed);
    rng.shuffle(&mut classes);

    let take = |class: ClassId, split: Split, count: usize| -> Result<Vec<Sample>> {
        let mut members: Vec<&DatasetItem> = items
            .iter()
            .filter(|i| i.class == class && i.split == split)
            .collect();
        members.sort_by_key(|i| i.id);
        if members.len() < count {
            return Err(LgspError::Protocol(format!(
                "class {class} has {} {split} samples, need {count}",
                members.len()
            )));
        }
        Ok(members[..count]
            .iter()
            .map(|i| Sample {
                id: i.id,
                class: i.class,
                data: i.data.clone(),
            })
            .collect())
    };

    let mut sessions = Vec::with_capacity(spec.sessions + 1);
    let mut cursor = 0usize;
    for t in 0..=spec.sessions {
        let (n_classes, shots) = if t == 0 {
            (spec.base_classes, spec.base_shots)
        } else {
            (spec.n_way, spec.k_shot)
        };
        let session_classes: Vec<ClassId> = classes[cursor..cursor + n_classes].to_vec();
        cursor += n_classes;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &session_classes {
            train.extend(take(c, Split::Train, shots)?);
            test.extend(take(c, Split::Test, spec.test_per_class)?);
        }
        sessions.push(SessionData {
            index: t,
            classes: session_classes,
            train,
            test,
        });
    }
    Ok(sessions)
}

/// Records which training sample ids a session trainer touched; the session
/// loop verifies the set stays inside the session's own data.
#[derive(Debug, Default)]
pub struct LeakageGuard {
    allowed: BTreeSet<usize>,
    used: RefCell<BTreeSet<usize>>,
}

impl LeakageGuard {
    pub fn new(allowed: impl IntoIterator<Item = usize>) -> Self {
        Self {
            allowed: allowed.into_iter().collect(),
            used: RefCell::new(BTreeSet::new()),
        }
    }

    /// Trainers call this for every sample that contributes a gradient.
    pub fn touch(&self, sample_id: usize) {
        self.used.borrow_mut().insert(sample_id);
    }

    pub fn verify(&self) -> Result<()> {
        let used = self.used.borrow();
        if let Some(&bad) = used.difference(&self.allowed).next() {
            return Err(LgspError::Protocol(format!(
                "training touched sample {bad} outside the current session"
            )));
        }
        Ok(())
    }
}

/// Per-epoch training log row.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub alpha_l: f64,
    pub alpha_g: f64,
}

/// What the session loop needs from a trainable model.
pub trait FscilModel {
    /// Registers prototypes for the session's new classes (pre-training).
    fn begin_session(&mut self, session: usize, data: &SessionData) -> Result<()>;

    /// Gradient training restricted to this session's data. Implementations
    /// must report every sample they use to the guard.
    fn train_session(
        &mut self,
        session: usize,
        data: &SessionData,
        guard: &LeakageGuard,
    ) -> Result<Vec<EpochLog>>;

    /// Refit of the new classes' prototypes after training (mean embedding).
    fn finish_session(&mut self, session: usize, data: &SessionData) -> Result<()>;

    /// Full score vector over all seen classes, ascending class id.
    fn score(&self, sample: &Sample) -> Result<Vec<(ClassId, f64)>>;

    /// Current fusion scalars (NaN if the model has none).
    fn alphas(&self) -> (f64, f64) {
        (f64::NAN, f64::NAN)
    }
}

/// One metrics row per session.
#[derive(Debug, Clone)]
pub struct SessionMetrics {
    pub session: usize,
    pub acc: f64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub b2bn: f64,
    pub n2bn: f64,
    pub b2b: f64,
    pub n2n: f64,
    pub alpha_l: f64,
    pub alpha_g: f64,
    pub seed: u64,
}

/// Accumulated metrics with the averaging convention: the mean over every
/// recorded session row.
#[derive(Debug, Clone, Default)]
pub struct MetricsRecord {
    pub rows: Vec<SessionMetrics>,
}

impl MetricsRecord {
    pub fn average(&self) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(|r| r.acc).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("session,acc,base_acc,novel_acc,b2bn,n2bn,b2b,n2n,alpha_l,alpha_g,seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.session,
                r.acc,
                r.base_acc,
                r.novel_acc,
                r.b2bn,
                r.n2bn,
                r.b2b,
                r.n2n,
                r.alpha_l,
                r.alpha_g,
                r.seed
            ));
        }
        out
    }

    /// Reparses a CSV produced by [`Self::to_csv`] and recomputes the mean
    /// session accuracy.
    pub fn average_from_csv(csv: &str) -> Result<f64> {
        let mut accs = Vec::new();
        for line in csv.lines().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 2 {
                return Err(LgspError::Format(format!("bad metrics row {line:?}")));
            }
            accs.push(fields[1].parse::<f64>().map_err(|e| {
                LgspError::Format(format!("bad accuracy field {:?}: {e}", fields[1]))
            })?);
        }
        if accs.is_empty() {
            return Err(LgspError::Format("metrics CSV has no rows".into()));
        }
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// Evolving state across the session loop.
#[derive(Debug, Clone)]
pub struct SessionState {
    /// index of the next session expected to run
    pub next_session: usize,
    pub base_classes: Vec<ClassId>,
    pub seen_classes: Vec<ClassId>,
    pub cumulative_test: Vec<Sample>,
}

impl SessionState {
    pub fn new() -> Self {
        Self {
            next_session: 0,
            base_classes: Vec::new(),
            seen_classes: Vec::new(),
            cumulative_test: Vec::new(),
        }
    }
}

impl Default for SessionState {
    fn default() -> Self {
        Self::new()
    }
}

/// The four base/novel accuracy splits of a cumulative evaluation.
///
/// `b2bn`/`n2bn` take the argmax over every seen class; `b2b`/`n2n`
/// restrict the competition to the base or novel label space. Splits with
/// no samples report NaN.
pub fn breakdown(
    base_classes: &[ClassId],
    predictions: &[(ClassId, Vec<(ClassId, f64)>)],
) -> (f64, f64, f64, f64) {
    let base: BTreeSet<ClassId> = base_classes.iter().cloned().collect();
    let argmax = |scores: &[(ClassId, f64)], restrict: Option<&BTreeSet<ClassId>>| -> ClassId {
        let mut best: Option<(ClassId, f64)> = None;
        for &(c, s) in scores {
            if let Some(set) = restrict {
                if !set.contains(&c) {
                    continue;
                }
            }
            match best {
                None => best = Some((c, s)),
                Some((_, bs)) if s > bs => best = Some((c, s)),
                _ => {}
            }
        }
        best.expect("nonempty score vector").0
    };
    let mut counts = [(0usize, 0usize); 4]; // (correct, total) for b2bn, n2bn, b2b, n2n
    for (truth, scores) in predictions {
        let is_base = base.contains(truth);
        let novel: BTreeSet<ClassId> = scores
            .iter()
            .map(|&(c, _)| c)
            .filter(|c| !base.contains(c))
            .collect();
        if is_base {
            counts[0].1 += 1;
            if argmax(scores, None) == *truth {
                counts[0].0 += 1;
            }
            counts[2].1 += 1;
            if argmax(scores, Some(&base)) == *truth {
                counts[2].0 += 1;
            }
        } else {
            counts[1].1 += 1;
            if argmax(scores, None) == *truth {
                counts[1].0 += 1;
            }
            counts[3].1 += 1;
            if argmax(scores, Some(&novel)) == *truth {
                counts[3].0 += 1;
            }
        }
    }
    let ratio = |(c, t): (usize, usize)| if t == 0 { f64::NAN } else { c as f64 / t as f64 };
    (
        ratio(counts[0]),
        ratio(counts[1]),
        ratio(counts[2]),
        ratio(counts[3]),
    )
}

/// Runs session `t`: train on `data` only, fit the new prototypes, evaluate
/// on the expanded cumulative test set, and append a metrics row.
pub fn run_session(
    t: usize,
    state: &mut SessionState,
    model: &mut dyn FscilModel,
    data: &SessionData,
    seed: u64,
) -> Result<(SessionMetrics, Vec<EpochLog>)> {
    if t != state.next_session {
        return Err(LgspError::Protocol(format!(
            "session {t} out of order; expected {}",
            state.next_session
        )));
    }
    if data.index != t {
        return Err(LgspError::Protocol(format!(
            "session data index {} does not match session {t}",
            data.index
        )));
    }
    for c in &data.classes {
        if state.seen_classes.contains(c) {
            return Err(LgspError::Protocol(format!(
                "class {c} reappears in session {t}; class sets must be disjoint"
            )));
        }
    }

    model.begin_session(t, data)?;
    let guard = LeakageGuard::new(data.train.iter().map(|s| s.id));
    let logs = model.train_session(t, data, &guard)?;
    guard.verify()?;
    model.finish_session(t, data)?;

    if t == 0 {
        state.base_classes = data.classes.clone();
    }
    state.seen_classes.extend(data.classes.iter().cloned());
    state.cumulative_test.extend(data.test.iter().cloned());

    // cumulative evaluation
    let mut predictions = Vec::with_capacity(state.cumulative_test.len());
    let mut correct = 0usize;
    for sample in &state.cumulative_test {
        let scores = model.score(sample)?;
        let mut best = scores[0];
        for &(c, s) in &scores[1..] {
            if s > best.1 {
                best = (c, s);
            }
        }
        if best.0 == sample.class {
            correct += 1;
        }
        predictions.push((sample.class, scores));
    }
    let acc = correct as f64 / state.cumulative_test.len() as f64;
    let (b2bn, n2bn, b2b, n2n) = breakdown(&state.base_classes, &predictions);
    let (alpha_l, alpha_g) = model.alphas();

    state.next_session += 1;
    Ok((
        SessionMetrics {
            session: t,
            acc,
            base_acc: b2bn,
            novel_acc: n2bn,
            b2bn,
            n2bn,
            b2b,
            n2n,
            alpha_l,
            alpha_g,
            seed,
        },
        logs,
    ))
}
