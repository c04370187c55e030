//! Design-space reduction over attention kinds and insertion positions:
//! a single-position sweep with two anchors, accuracy-vs-speed pruning,
//! a budgeted combination search, and the placement-rule report.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneConfig, InsertionPlan, Model, ModelError};
use crate::blocks::{AttentionKind, AttentionSpec, DEFAULT_REDUCTION};
use crate::cost::{count_macs, pareto_filter, CostReport, ParetoError, ParetoSplit};
use crate::data::Dataset;
use crate::eval::{evaluate_model, Metric};
use crate::training::{train, LossKind, TrainConfig, TrainError};
use crate::SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum NasError {
    #[error("pruning removed every candidate ({rejected} trials rejected)")]
    EmptySpace { rejected: usize },
    #[error("search space has max_blocks = 0")]
    NoBlocks,
    #[error("trial {key}: {msg}")]
    Trial { key: String, msg: String },
    #[error(transparent)]
    Pareto(#[from] ParetoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("trials file: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NasError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anchor {
    /// The attention-free backbone.
    Baseline,
    /// The deeper attention-free reference.
    Deep,
}

impl Anchor {
    pub fn name(self) -> &'static str {
        match self {
            Anchor::Baseline => "baseline",
            Anchor::Deep => "deep",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub plan: InsertionPlan,
    pub anchor: Option<Anchor>,
    pub loss: LossKind,
    pub seeds: Vec<u64>,
    pub map_runs: Vec<f64>,
    pub map_mean: f64,
    pub map_std: f64,
    pub rank1_mean: f64,
    pub cost: CostReport,
}

impl TrialResult {
    pub fn new(plan: InsertionPlan, anchor: Option<Anchor>, loss: LossKind, runs: &[(u64, f64, f64)], cost: CostReport) -> Self {
        let maps: Vec<f64> = runs.iter().map(|r| r.1).collect();
        let (map_mean, map_std) = mean_std(&maps);
        let rank1_mean = runs.iter().map(|r| r.2).sum::<f64>() / runs.len().max(1) as f64;
        Self {
            plan,
            anchor,
            loss,
            seeds: runs.iter().map(|r| r.0).collect(),
            map_runs: maps,
            map_mean,
            map_std,
            rank1_mean,
            cost,
        }
    }

    /// Stable identity of a trial: plan, anchor role and loss.
    pub fn key(&self) -> String {
        trial_key(&self.plan, self.anchor, self.loss)
    }

    pub fn speed(&self) -> Option<f64> {
        self.cost.batches_per_second
    }

    pub fn is_single(&self) -> bool {
        self.anchor.is_none() && self.plan.len() == 1
    }
}

pub fn trial_key(plan: &InsertionPlan, anchor: Option<Anchor>, loss: LossKind) -> String {
    match anchor {
        Some(Anchor::Deep) => format!("deep|{}", loss.name()),
        _ => format!("{plan}|{}", loss.name()),
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Candidate (kind, position) pairs and search limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub candidates: BTreeSet<(AttentionKind, usize)>,
    pub max_blocks: usize,
    pub seeds: Vec<u64>,
    /// Channel reduction used for every channel-wise block.
    pub reduction: usize,
}

impl SearchSpace {
    /// Every kind at every position of a backbone.
    pub fn full(kinds: &[AttentionKind], cfg: &BackboneConfig) -> Self {
        Self {
            candidates: kinds
                .iter()
                .flat_map(|&k| (1..=cfg.num_positions()).map(move |p| (k, p)))
                .collect(),
            max_blocks: 3,
            seeds: vec![0, 1, 2],
            reduction: DEFAULT_REDUCTION,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn kinds(&self) -> BTreeSet<AttentionKind> {
        self.candidates.iter().map(|c| c.0).collect()
    }

    pub fn spec(&self, kind: AttentionKind) -> AttentionSpec {
        AttentionSpec::new(kind).with_reduction(self.reduction)
    }
}

/// mAP and rank-1 of one training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOutcome {
    pub map: f64,
    pub rank1: f64,
}

/// Something that can score a plan: real training, or a planted objective.
pub trait TrialRunner: Sync {
    fn backbone(&self) -> &BackboneConfig;
    /// Train and evaluate one seed.
    fn run(&self, plan: &InsertionPlan, anchor: Option<Anchor>, seed: u64) -> Result<RunOutcome>;
    /// Cost of a plan, with `batches_per_second` filled in.
    fn cost(&self, plan: &InsertionPlan, anchor: Option<Anchor>) -> Result<CostReport>;
}

/// How trial speed is obtained. The analytic model keeps searches
/// reproducible; wall-clock measurement does not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedModel {
    /// `macs_per_second / (MACs per image × batch)`.
    Analytic { macs_per_second: f64, batch_size: usize },
    Measured(crate::cost::BenchConfig),
}

impl Default for SpeedModel {
    fn default() -> Self {
        SpeedModel::Analytic {
            macs_per_second: 1e10,
            batch_size: crate::cost::DEFAULT_BENCH_BATCH,
        }
    }
}

fn anchor_model(cfg: &BackboneConfig, plan: &InsertionPlan, anchor: Option<Anchor>, seed: u64) -> std::result::Result<Model<f32>, ModelError> {
    match anchor {
        Some(Anchor::Deep) => Model::resnet101_reference(cfg, seed),
        _ => Model::new(cfg.clone(), plan.clone(), seed),
    }
}

/// Score plans by training on a dataset and evaluating its test split.
pub struct TrainingContext {
    pub backbone: BackboneConfig,
    pub data: Dataset,
    pub train: TrainConfig,
    pub speed: SpeedModel,
}

impl TrainingContext {
    pub fn new(backbone: BackboneConfig, data: Dataset, train: TrainConfig) -> Self {
        let backbone = BackboneConfig {
            num_classes: data.num_train_ids(),
            ..backbone
        };
        Self {
            backbone,
            data,
            train,
            speed: SpeedModel::default(),
        }
    }
}

impl TrialRunner for TrainingContext {
    fn backbone(&self) -> &BackboneConfig {
        &self.backbone
    }

    fn run(&self, plan: &InsertionPlan, anchor: Option<Anchor>, seed: u64) -> Result<RunOutcome> {
        let mut model = anchor_model(&self.backbone, plan, anchor, seed)?;
        let cfg = TrainConfig {
            seed,
            ..self.train.clone()
        };
        train(&mut model, &self.data, &cfg)?;
        let r = evaluate_model(&model, &self.data, Metric::Cosine, 64).map_err(TrainError::from)?;
        Ok(RunOutcome {
            map: r.map,
            rank1: r.rank1(),
        })
    }

    fn cost(&self, plan: &InsertionPlan, anchor: Option<Anchor>) -> Result<CostReport> {
        let model = anchor_model(&self.backbone, plan, anchor, 0)?;
        match &self.speed {
            SpeedModel::Analytic {
                macs_per_second,
                batch_size,
            } => {
                let mut r = count_macs(&model);
                let bps = macs_per_second / (r.total_macs as f64 * *batch_size as f64);
                r.batch_size = Some(*batch_size);
                r.batches_per_second = Some(bps);
                r.ms_per_batch = Some(1000.0 / bps);
                Ok(r)
            }
            SpeedModel::Measured(b) => crate::cost::benchmark_latency(&model, b).map_err(|e| NasError::Trial {
                key: trial_key(plan, anchor, self.train.loss),
                msg: e.to_string(),
            }),
        }
    }
}

/// A synthetic objective for testing the search: mAP is a planted function
/// of the plan and speed follows the analytic MAC count.
pub struct PlantedObjective {
    pub backbone: BackboneConfig,
    /// mAP of the empty plan.
    pub base_map: f64,
    pub deep_map: f64,
    /// Gain of each (kind, position) when used alone.
    pub gains: BTreeMap<(AttentionKind, usize), f64>,
    /// Extra gain when all of these positions are used together.
    pub synergy: Vec<(BTreeSet<usize>, f64)>,
    pub speed: SpeedModel,
}

impl PlantedObjective {
    pub fn score(&self, plan: &InsertionPlan, anchor: Option<Anchor>) -> f64 {
        if anchor == Some(Anchor::Deep) {
            return self.deep_map;
        }
        let mut m = self.base_map;
        for (&p, s) in &plan.entries {
            m += self.gains.get(&(s.kind, p)).copied().unwrap_or(-0.05);
        }
        let positions: BTreeSet<usize> = plan.entries.keys().copied().collect();
        for (set, bonus) in &self.synergy {
            if set.is_subset(&positions) {
                m += bonus;
            }
        }
        m
    }
}

impl TrialRunner for PlantedObjective {
    fn backbone(&self) -> &BackboneConfig {
        &self.backbone
    }

    fn run(&self, plan: &InsertionPlan, anchor: Option<Anchor>, seed: u64) -> Result<RunOutcome> {
        // tiny seed-dependent jitter so std is exercised, far below any planted gap
        let jitter = ((seed % 7) as f64 - 3.0) * 1e-6;
        let map = self.score(plan, anchor) + jitter;
        Ok(RunOutcome { map, rank1: map })
    }

    fn cost(&self, plan: &InsertionPlan, anchor: Option<Anchor>) -> Result<CostReport> {
        let ctx_cost = |model: &Model<f32>| {
            let mut r = count_macs(model);
            if let SpeedModel::Analytic {
                macs_per_second,
                batch_size,
            } = self.speed
            {
                let bps = macs_per_second / (r.total_macs as f64 * batch_size as f64);
                r.batch_size = Some(batch_size);
                r.batches_per_second = Some(bps);
                r.ms_per_batch = Some(1000.0 / bps);
            }
            r
        };
        let model = anchor_model(&self.backbone, plan, anchor, 0)?;
        Ok(ctx_cost(&model))
    }
}

type Sink<'a> = Box<dyn FnMut(&TrialResult) -> std::io::Result<()> + 'a>;

/// Runs trials through a runner, reusing results already known by key.
pub struct Search<'a> {
    runner: &'a dyn TrialRunner,
    pub loss: LossKind,
    pub seeds: Vec<u64>,
    /// Worker threads used for the seeds of a trial.
    pub threads: usize,
    pub completed: BTreeMap<String, TrialResult>,
    /// Trials actually executed (not served from `completed`).
    pub executed: Vec<String>,
    sink: Option<Sink<'a>>,
}

impl<'a> Search<'a> {
    pub fn new(runner: &'a dyn TrialRunner, loss: LossKind, seeds: Vec<u64>) -> Self {
        Self {
            runner,
            loss,
            seeds,
            threads: 1,
            completed: BTreeMap::new(),
            executed: Vec::new(),
            sink: None,
        }
    }

    /// Seed the cache with earlier results, e.g. from a trials file.
    pub fn with_completed(mut self, trials: impl IntoIterator<Item = TrialResult>) -> Self {
        for t in trials {
            self.completed.insert(t.key(), t);
        }
        self
    }

    /// Called once for every newly executed trial.
    pub fn on_trial(mut self, f: impl FnMut(&TrialResult) -> std::io::Result<()> + 'a) -> Self {
        self.sink = Some(Box::new(f));
        self
    }

    pub fn backbone(&self) -> &BackboneConfig {
        self.runner.backbone()
    }

    pub fn trial(&mut self, plan: &InsertionPlan, anchor: Option<Anchor>) -> Result<TrialResult> {
        let key = trial_key(plan, anchor, self.loss);
        if let Some(t) = self.completed.get(&key) {
            return Ok(t.clone());
        }
        let runner = self.runner;
        let outcomes: Vec<Result<RunOutcome>> = if self.threads <= 1 || self.seeds.len() < 2 {
            self.seeds.iter().map(|&s| runner.run(plan, anchor, s)).collect()
        } else {
            let mut out: Vec<Option<Result<RunOutcome>>> = (0..self.seeds.len()).map(|_| None).collect();
            for chunk in self.seeds.iter().enumerate().collect::<Vec<_>>().chunks(self.threads) {
                std::thread::scope(|sc| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|&(i, &s)| (i, sc.spawn(move || runner.run(plan, anchor, s))))
                        .collect();
                    for (i, h) in handles {
                        out[i] = Some(h.join().expect("trial worker panicked"));
                    }
                });
            }
            out.into_iter().map(|o| o.expect("every seed ran")).collect()
        };
        let mut runs = Vec::with_capacity(outcomes.len());
        for (&s, o) in self.seeds.iter().zip(outcomes) {
            let o = o?;
            runs.push((s, o.map, o.rank1));
        }
        let cost = runner.cost(plan, anchor)?;
        let t = TrialResult::new(plan.clone(), anchor, self.loss, &runs, cost);
        if let Some(sink) = self.sink.as_mut() {
            sink(&t)?;
        }
        self.executed.push(key.clone());
        self.completed.insert(key, t.clone());
        Ok(t)
    }

    pub fn anchors(&mut self) -> Result<(TrialResult, TrialResult)> {
        let base = self.trial(&InsertionPlan::empty(), Some(Anchor::Baseline))?;
        let deep = self.trial(&InsertionPlan::empty(), Some(Anchor::Deep))?;
        Ok((base, deep))
    }
}

/// One trial per candidate (kind, position), preceded by the baseline and
/// deep anchors.
pub fn sweep_single_positions(space: &SearchSpace, search: &mut Search<'_>) -> Result<Vec<TrialResult>> {
    let (base, deep) = search.anchors()?;
    let mut out = vec![base, deep];
    for &(kind, p) in &space.candidates {
        out.push(search.trial(&InsertionPlan::single(p, space.spec(kind)), None)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub space: SearchSpace,
    pub split: ParetoSplit,
    /// Kinds dropped because another kind beat them at every surviving position.
    pub dominated_kinds: Vec<AttentionKind>,
}

fn dominates(a: &TrialResult, b: &TrialResult) -> bool {
    let (sa, sb) = (a.speed().unwrap_or(0.0), b.speed().unwrap_or(0.0));
    a.map_mean >= b.map_mean && sa >= sb && (a.map_mean > b.map_mean || sa > sb)
}

/// Apply the accuracy-vs-speed exclusion to single-position trials, then
/// drop kinds dominated by another kind at every position where they survive.
pub fn prune_design_space(
    trials: &[TrialResult],
    baseline: &TrialResult,
    deep: &TrialResult,
    template: &SearchSpace,
) -> Result<PruneOutcome> {
    let singles: Vec<TrialResult> = trials.iter().filter(|t| t.is_single()).cloned().collect();
    let split = pareto_filter(&singles, baseline, deep)?;
    let mut by_pos: BTreeMap<usize, Vec<&TrialResult>> = BTreeMap::new();
    for t in &split.kept {
        by_pos.entry(t.plan.positions()[0]).or_default().push(t);
    }
    let kind_of = |t: &TrialResult| t.plan.kinds()[0];
    let mut dominated_kinds = Vec::new();
    let kinds: BTreeSet<AttentionKind> = split.kept.iter().map(kind_of).collect();
    for &k in &kinds {
        let mine: Vec<&TrialResult> = split.kept.iter().filter(|t| kind_of(t) == k).collect();
        let beaten_everywhere = mine.iter().all(|t| {
            by_pos[&t.plan.positions()[0]]
                .iter()
                .any(|o| kind_of(o) != k && dominates(o, t))
        });
        if beaten_everywhere {
            dominated_kinds.push(k);
        }
    }
    let candidates: BTreeSet<(AttentionKind, usize)> = split
        .kept
        .iter()
        .map(|t| (kind_of(t), t.plan.positions()[0]))
        .filter(|(k, _)| !dominated_kinds.contains(k))
        .collect();
    if candidates.is_empty() {
        return Err(NasError::EmptySpace {
            rejected: split.rejected.len(),
        });
    }
    Ok(PruneOutcome {
        space: SearchSpace {
            candidates,
            ..template.clone()
        },
        split,
        dominated_kinds,
    })
}

fn pairwise_distances(ps: &[usize]) -> Vec<usize> {
    let mut d = Vec::new();
    for i in 0..ps.len() {
        for j in i + 1..ps.len() {
            d.push(ps[j].abs_diff(ps[i]));
        }
    }
    d
}

/// Mean absolute difference over all position pairs of a plan.
pub fn mean_pairwise_distance(plan: &InsertionPlan) -> f64 {
    let d = pairwise_distances(&plan.positions());
    if d.is_empty() {
        0.0
    } else {
        d.iter().sum::<usize>() as f64 / d.len() as f64
    }
}

/// Ordering key of a candidate plan: single-kind before mixed, more
/// stage-end positions, more distinct stages, larger minimum and total
/// pairwise distance; ties by the plan text.
fn priority(plan: &InsertionPlan, cfg: &BackboneConfig) -> (bool, std::cmp::Reverse<usize>, std::cmp::Reverse<usize>, std::cmp::Reverse<usize>, std::cmp::Reverse<usize>, String) {
    use std::cmp::Reverse;
    let ps = plan.positions();
    let ends = cfg.stage_end_positions();
    let stage_ends = ps.iter().filter(|p| ends.contains(p)).count();
    let stages: BTreeSet<usize> = ps.iter().map(|&p| cfg.stage_of(p)).collect();
    let d = pairwise_distances(&ps);
    (
        plan.kinds().len() > 1,
        Reverse(stage_ends),
        Reverse(stages.len()),
        Reverse(d.iter().copied().min().unwrap_or(0)),
        Reverse(d.iter().sum()),
        plan.to_string(),
    )
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Every plan of 2..=max_blocks candidates at distinct positions, in
/// heuristic priority order.
pub fn candidate_plans(space: &SearchSpace, cfg: &BackboneConfig) -> Result<Vec<InsertionPlan>> {
    if space.max_blocks == 0 {
        return Err(NasError::NoBlocks);
    }
    let cands: Vec<(AttentionKind, usize)> = space.candidates.iter().copied().collect();
    let mut plans = BTreeSet::new();
    for k in 2..=space.max_blocks.min(cands.len()) {
        for combo in combinations(cands.len(), k) {
            let positions: BTreeSet<usize> = combo.iter().map(|&i| cands[i].1).collect();
            if positions.len() < k {
                continue;
            }
            let plan = InsertionPlan {
                entries: combo.iter().map(|&i| (cands[i].1, space.spec(cands[i].0))).collect(),
            };
            plans.insert(plan.to_string());
        }
    }
    let mut plans: Vec<InsertionPlan> = plans.iter().map(|s| s.parse()).collect::<std::result::Result<_, _>>()?;
    plans.sort_by_cached_key(|p| priority(p, cfg));
    Ok(plans)
}

/// Sort by mAP (descending), then speed (descending), then key.
pub fn rank_trials(trials: &mut [TrialResult]) {
    trials.sort_by(|a, b| {
        b.map_mean
            .total_cmp(&a.map_mean)
            .then(b.speed().unwrap_or(0.0).total_cmp(&a.speed().unwrap_or(0.0)))
            .then_with(|| a.key().cmp(&b.key()))
    });
}

/// Train the highest-priority `budget` combinations (all of them when
/// `None`) and return them ranked.
pub fn search_combinations(space: &SearchSpace, search: &mut Search<'_>, budget: Option<usize>) -> Result<Vec<TrialResult>> {
    let plans = candidate_plans(space, search.backbone())?;
    let n = budget.map_or(plans.len(), |b| b.min(plans.len()));
    let mut out = Vec::with_capacity(n);
    for plan in &plans[..n] {
        out.push(search.trial(plan, None)?);
    }
    rank_trials(&mut out);
    Ok(out)
}

/// Everything a full search produced.
#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub sweep: Vec<TrialResult>,
    pub pruned: PruneOutcome,
    pub combinations: Vec<TrialResult>,
}

/// sweep → prune → combine.
pub fn run_pipeline(space: &SearchSpace, search: &mut Search<'_>, budget: Option<usize>) -> Result<PipelineResult> {
    let sweep = sweep_single_positions(space, search)?;
    let pruned = prune_design_space(&sweep, &sweep[0], &sweep[1], space)?;
    let combinations = search_combinations(&pruned.space, search, budget)?;
    Ok(PipelineResult {
        sweep,
        pruned,
        combinations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBest {
    pub stage: usize,
    pub kind: AttentionKind,
    pub position: usize,
    #[serde(rename = "mAP")]
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEndRule {
    pub stage_end_mean: f64,
    pub interior_mean: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRule {
    /// (mean pairwise distance, mAP) of every single-kind combination.
    pub points: Vec<(f64, f64)>,
    /// Pearson correlation of the two.
    pub correlation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedKindRule {
    pub mixed_mean_map: f64,
    pub single_kind_mean_map: f64,
    pub mixed_mean_macs: f64,
    pub single_kind_mean_macs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub config_id: String,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub batches_per_second: f64,
    pub anchor: Option<Anchor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RulesReport {
    pub schema_version: u32,
    /// Set when some rule lacked the trials it needs.
    pub partial: bool,
    pub notes: Vec<String>,
    pub per_stage_best: Vec<StageBest>,
    pub stage_end: Option<StageEndRule>,
    pub distance: Option<DistanceRule>,
    pub mixed_kinds: Option<MixedKindRule>,
    pub points: Vec<PlotPoint>,
}

pub fn pearson(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let vx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let vy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Quantitative evidence for the placement rules.
pub fn derive_rules_report(trials: &[TrialResult], cfg: &BackboneConfig) -> RulesReport {
    let mut notes = Vec::new();
    let singles: Vec<&TrialResult> = trials.iter().filter(|t| t.is_single()).collect();
    let combos: Vec<&TrialResult> = trials.iter().filter(|t| t.anchor.is_none() && t.plan.len() > 1).collect();

    let mut best: BTreeMap<usize, StageBest> = BTreeMap::new();
    for t in &singles {
        let p = t.plan.positions()[0];
        let stage = cfg.stage_of(p);
        if best.get(&stage).is_none_or(|b| t.map_mean > b.map) {
            best.insert(
                stage,
                StageBest {
                    stage,
                    kind: t.plan.kinds()[0],
                    position: p,
                    map: t.map_mean,
                },
            );
        }
    }

    let ends = cfg.stage_end_positions();
    let (end, interior): (Vec<&&TrialResult>, Vec<&&TrialResult>) =
        singles.iter().partition(|t| ends.contains(&t.plan.positions()[0]));
    let stage_end = if end.is_empty() || interior.is_empty() {
        notes.push("rule 1: need single-position trials at stage-end and interior positions".into());
        None
    } else {
        let m = |v: &[&&TrialResult]| v.iter().map(|t| t.map_mean).sum::<f64>() / v.len() as f64;
        let (a, b) = (m(&end), m(&interior));
        Some(StageEndRule {
            stage_end_mean: a,
            interior_mean: b,
            gap: a - b,
        })
    };

    let single_kind: Vec<&&TrialResult> = combos.iter().filter(|t| t.plan.kinds().len() == 1).collect();
    let distance = if single_kind.len() < 2 {
        notes.push("rule 2: need at least two single-kind combinations".into());
        None
    } else {
        let points: Vec<(f64, f64)> = single_kind.iter().map(|t| (mean_pairwise_distance(&t.plan), t.map_mean)).collect();
        Some(DistanceRule {
            correlation: pearson(&points),
            points,
        })
    };

    let mixed: Vec<&&TrialResult> = combos.iter().filter(|t| t.plan.kinds().len() > 1).collect();
    let mixed_kinds = if mixed.is_empty() || single_kind.is_empty() {
        notes.push("rule 3: need both mixed-kind and single-kind combinations".into());
        None
    } else {
        let mm = |v: &[&&TrialResult]| v.iter().map(|t| t.map_mean).sum::<f64>() / v.len() as f64;
        let mc = |v: &[&&TrialResult]| v.iter().map(|t| t.cost.total_macs as f64).sum::<f64>() / v.len() as f64;
        Some(MixedKindRule {
            mixed_mean_map: mm(&mixed),
            single_kind_mean_map: mm(&single_kind),
            mixed_mean_macs: mc(&mixed),
            single_kind_mean_macs: mc(&single_kind),
        })
    };

    let points = trials
        .iter()
        .map(|t| PlotPoint {
            config_id: t.key(),
            map: t.map_mean,
            batches_per_second: t.speed().unwrap_or(f64::NAN),
            anchor: t.anchor,
        })
        .collect();

    RulesReport {
        schema_version: SCHEMA_VERSION,
        partial: !notes.is_empty(),
        notes,
        per_stage_best: best.into_values().collect(),
        stage_end,
        distance,
        mixed_kinds,
        points,
    }
}

impl RulesReport {
    /// Human-readable rendering.
    pub fn to_text(&self) -> String {
        let mut s = format!("rules report (schema {})\n", self.schema_version);
        if self.partial {
            s.push_str("PARTIAL: some rules lack the trials they need\n");
        }
        for n in &self.notes {
            s.push_str(&format!("  note: {n}\n"));
        }
        s.push_str("best single position per stage:\n");
        for b in &self.per_stage_best {
            s.push_str(&format!("  stage {}: {}@{} mAP {:.4}\n", b.stage, b.kind, b.position, b.map));
        }
        if let Some(r) = &self.stage_end {
            s.push_str(&format!(
                "rule 1 (stage ends): stage-end mean mAP {:.4}, interior {:.4}, gap {:+.4}\n",
                r.stage_end_mean, r.interior_mean, r.gap
            ));
        }
        if let Some(r) = &self.distance {
            s.push_str(&format!(
                "rule 2 (spread): correlation of mean pairwise distance with mAP {:+.4} over {} combinations\n",
                r.correlation,
                r.points.len()
            ));
        }
        if let Some(r) = &self.mixed_kinds {
            s.push_str(&format!(
                "rule 3 (single kind): mixed mean mAP {:.4} at {:.0} MACs, single-kind {:.4} at {:.0} MACs\n",
                r.mixed_mean_map, r.mixed_mean_macs, r.single_kind_mean_map, r.single_kind_mean_macs
            ));
        }
        s
    }
}

pub const TRIALS_HEADER: [&str; 15] = [
    "schema_version",
    "key",
    "plan",
    "anchor",
    "loss",
    "seeds",
    "map_runs",
    "map_mean",
    "map_std",
    "rank1_mean",
    "macs",
    "params",
    "batches_per_sec",
    "ms_per_batch",
    "config_id",
];

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One trials-file row; floats use the shortest exact representation so a
/// written file reads back identically.
pub fn trial_row(t: &TrialResult) -> Vec<String> {
    vec![
        SCHEMA_VERSION.to_string(),
        t.key(),
        t.plan.to_string(),
        t.anchor.map(|a| a.name().to_string()).unwrap_or_default(),
        t.loss.name().to_string(),
        join(&t.seeds),
        join(&t.map_runs),
        t.map_mean.to_string(),
        t.map_std.to_string(),
        t.rank1_mean.to_string(),
        t.cost.total_macs.to_string(),
        t.cost.total_params.to_string(),
        opt(t.cost.batches_per_second),
        opt(t.cost.ms_per_batch),
        t.cost.config_id.clone(),
    ]
}

pub fn write_trials(trials: &[TrialResult], w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(TRIALS_HEADER).map_err(|e| NasError::Csv(e.to_string()))?;
    for t in trials {
        wr.write_record(trial_row(t)).map_err(|e| NasError::Csv(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(|v| v.parse::<T>().map_err(|_| format!("bad list item {v:?}"))).collect()
}

/// Read a trials file written by [`write_trials`]. The per-layer breakdown
/// is not stored, so reloaded cost reports only carry totals.
pub fn read_trials(r: impl Read) -> Result<Vec<TrialResult>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers().map_err(|e| NasError::Csv(e.to_string()))?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| NasError::Csv(format!("missing column {name}")))
    };
    let idx: Vec<usize> = TRIALS_HEADER.iter().map(|h| col(h)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| NasError::Csv(e.to_string()))?;
        let f = |i: usize| rec.get(idx[i]).unwrap_or("");
        let bad = |m: String| NasError::Csv(format!("row {}: {m}", line + 2));
        let version: u32 = f(0).parse().map_err(|_| bad(format!("bad schema version {:?}", f(0))))?;
        if version != SCHEMA_VERSION {
            return Err(bad(format!("schema version {version}, expected {SCHEMA_VERSION}")));
        }
        let num = |i: usize| -> Result<f64> { f(i).parse::<f64>().map_err(|_| bad(format!("bad number {:?} in {}", f(i), TRIALS_HEADER[i]))) };
        let onum = |i: usize| -> Result<Option<f64>> { if f(i).is_empty() { Ok(None) } else { num(i).map(Some) } };
        let int = |i: usize| -> Result<u64> { f(i).parse::<u64>().map_err(|_| bad(format!("bad integer {:?} in {}", f(i), TRIALS_HEADER[i]))) };
        let anchor = match f(3) {
            "" => None,
            "baseline" => Some(Anchor::Baseline),
            "deep" => Some(Anchor::Deep),
            other => return Err(bad(format!("bad anchor {other:?}"))),
        };
        let mut cost = CostReport::from_layers(f(14), Vec::new());
        cost.total_macs = int(10)?;
        cost.total_params = int(11)?;
        cost.batches_per_second = onum(12)?;
        cost.ms_per_batch = onum(13)?;
        let t = TrialResult {
            plan: f(2).parse().map_err(|e: ModelError| bad(e.to_string()))?,
            anchor,
            loss: f(4).parse().map_err(bad)?,
            seeds: parse_list(f(5)).map_err(bad)?,
            map_runs: parse_list(f(6)).map_err(bad)?,
            map_mean: num(7)?,
            map_std: num(8)?,
            rank1_mean: num(9)?,
            cost,
        };
        if t.key() != f(1) {
            return Err(bad(format!("key {:?} does not match plan/anchor/loss", f(1))));
        }
        out.push(t);
    }
    Ok(out)
}
