//! Evolutionary search with hardware-aware fitness.
//!
//! Each generation: evaluate every candidate that has no measurement yet
//! (train, optionally fine-tune, measure on the simulated device), rank by
//! fitness, then build the next population from elites, fresh random
//! samples and crossover+mutation offspring of the top half.

mod gap;
mod log;

pub use gap::{paired_gap_report, recovered_fraction, BranchGap, GapReport};
pub use log::{history_csv, median, parse_history, GenerationLog, LogRow, CSV_HEADER};

use std::cmp::Ordering;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::device::{measure, DeviceProfile, Measurement};
use crate::genotype::{crossover, mutate, sample_random, validate, Genotype, SearchSpaceConfig};
use crate::network::Network;
use crate::precision::PrecisionConfig;
use crate::seed::{derive_seed, rng_for};
use crate::trainer::{evaluate, finetune_fp16_aware, train_fp32, EvalMode, TrainConfig, TrainError};

const INIT_STREAM: u64 = 0x494e_4954;
const EVOLVE_STREAM: u64 = 0x4556_4f4c;
/// Attempts at a cap-respecting offspring before falling back to a random
/// sample.
const OFFSPRING_TRIES: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("invalid GA config: {0}")]
    Config(String),
    #[error("invalid history: {0}")]
    BadHistory(String),
    #[error("histories cannot be paired: {0}")]
    Mismatch(String),
    #[error("candidate gen {gen} slot {slot}: {source}")]
    Candidate {
        gen: usize,
        slot: usize,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("thread pool: {0}")]
    Threads(String),
    #[error("{0}")]
    Hook(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub k_best: usize,
    pub n_random: usize,
    pub p_mut: f64,
    pub mating_fraction: f64,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 16,
            generations: 10,
            k_best: 1,
            n_random: 6,
            p_mut: 0.15,
            mating_fraction: 0.5,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn mating_pool_size(&self) -> usize {
        (self.population_size as f64 * self.mating_fraction).floor() as usize
    }

    pub fn offspring_count(&self) -> usize {
        self.population_size.saturating_sub(self.k_best + self.n_random)
    }

    pub fn check(&self) -> Result<(), SearchError> {
        let err = |m: String| Err(SearchError::Config(m));
        if self.population_size == 0 {
            return err("population_size must be >= 1".into());
        }
        if self.k_best + self.n_random > self.population_size {
            return err(format!(
                "k_best + n_random = {} exceeds population_size {}",
                self.k_best + self.n_random,
                self.population_size
            ));
        }
        if !(0.0..=1.0).contains(&self.p_mut) {
            return err(format!("p_mut {} outside [0, 1]", self.p_mut));
        }
        if !(self.mating_fraction > 0.0 && self.mating_fraction <= 1.0) {
            return err(format!("mating_fraction {} outside (0, 1]", self.mating_fraction));
        }
        if self.offspring_count() > 0 && self.mating_pool_size() < 2 {
            return err(format!(
                "mating pool of {} cannot supply parent pairs",
                self.mating_pool_size()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitnessConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for FitnessConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 1.0,
            gamma: 2.0,
        }
    }
}

impl FitnessConfig {
    pub fn check(&self) -> Result<(), SearchError> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SearchError::Config(format!("fitness coefficients must be >= 0, got {all:?}")));
        }
        if all.iter().all(|&v| v == 0.0) {
            return Err(SearchError::Config("fitness coefficients are all zero".into()));
        }
        Ok(())
    }
}

/// `alpha * fps + beta * metric * exp(gamma * metric)`.
pub fn fitness(fps: f64, metric: f64, cfg: &FitnessConfig) -> f64 {
    cfg.alpha * fps + cfg.beta * metric * (cfg.gamma * metric).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// FP32 training, then direct deployment.
    Ptq,
    /// FP32 training, FP16-aware fine-tuning, then deployment.
    Aligned,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ptq => "ptq",
            Self::Aligned => "aligned",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ptq" => Some(Self::Ptq),
            "aligned" => Some(Self::Aligned),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Initial,
    Elite,
    Random,
    Offspring,
    /// A random sample standing in for offspring that kept breaking the
    /// parameter cap.
    Fallback,
}

impl Operator {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Initial => "initial",
            Self::Elite => "elite",
            Self::Random => "random",
            Self::Offspring => "crossover+mutate",
            Self::Fallback => "random-fallback",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Initial, Self::Elite, Self::Random, Self::Offspring, Self::Fallback]
            .into_iter()
            .find(|o| o.as_str() == s)
    }
}

/// Where a candidate came from. Parents are slots of the previous
/// generation; an elite names its own previous slot as `parent_a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lineage {
    pub generation: usize,
    pub operator: Operator,
    pub parent_a: Option<usize>,
    pub parent_b: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub slot: usize,
    pub genotype: Genotype,
    /// Seed of this slot; drives weight init, shuffling and dropout.
    pub seed: u64,
    pub params: usize,
    pub lineage: Lineage,
    /// `None` before evaluation or after divergence.
    pub measurement: Option<Measurement>,
    /// Plain FP32 mIoU of the FP32-trained weights.
    pub gpu_miou: Option<f64>,
    /// NaN before evaluation, `-inf` after divergence.
    pub fitness: f64,
    pub failure: Option<String>,
    pub network: Option<Arc<Network<f32>>>,
}

impl Candidate {
    fn new(slot: usize, genotype: Genotype, seed: u64, params: usize, lineage: Lineage) -> Self {
        Self {
            slot,
            genotype,
            seed,
            params,
            lineage,
            measurement: None,
            gpu_miou: None,
            fitness: f64::NAN,
            failure: None,
            network: None,
        }
    }

    pub fn is_evaluated(&self) -> bool {
        !self.fitness.is_nan()
    }
}

/// Descending fitness; ties go to fewer parameters, then to the
/// lexicographically smaller genotype string.
pub fn rank_cmp(a: &Candidate, b: &Candidate) -> Ordering {
    b.fitness
        .total_cmp(&a.fitness)
        .then(a.params.cmp(&b.params))
        .then_with(|| a.genotype.to_string().cmp(&b.genotype.to_string()))
}

pub fn rank(mut population: Vec<Candidate>) -> Vec<Candidate> {
    population.sort_by(rank_cmp);
    population
}

pub fn slot_seed(run_seed: u64, gen: usize, slot: usize) -> u64 {
    derive_seed(&[run_seed, gen as u64, slot as u64])
}

fn params_of(g: &Genotype, space: &SearchSpaceConfig) -> usize {
    crate::genotype::param_count(g, space)
}

/// Generation 0: `population_size` random samples.
pub fn initial_population(ga: &GaConfig, space: &SearchSpaceConfig) -> Vec<Candidate> {
    let mut rng = rng_for(&[ga.seed, INIT_STREAM]);
    (0..ga.population_size)
        .map(|slot| {
            let g = sample_random(space, &mut rng);
            let params = params_of(&g, space);
            let lineage = Lineage {
                generation: 0,
                operator: Operator::Initial,
                parent_a: None,
                parent_b: None,
            };
            Candidate::new(slot, g, slot_seed(ga.seed, 0, slot), params, lineage)
        })
        .collect()
}

/// Builds generation `next_gen` from the ranked, evaluated previous one:
/// `k_best` elites (weights and measurements kept), `n_random` fresh
/// samples, and offspring of parent pairs drawn uniformly from the mating
/// pool with the two parents always distinct.
pub fn evolve_generation<R: Rng>(
    ranked: &[Candidate],
    ga: &GaConfig,
    space: &SearchSpaceConfig,
    next_gen: usize,
    rng: &mut R,
) -> Result<Vec<Candidate>, SearchError> {
    ga.check()?;
    if ranked.len() != ga.population_size {
        return Err(SearchError::Config(format!(
            "population has {} candidates, expected {}",
            ranked.len(),
            ga.population_size
        )));
    }
    let mut next = Vec::with_capacity(ga.population_size);
    let lineage = |operator, parent_a, parent_b| Lineage {
        generation: next_gen,
        operator,
        parent_a,
        parent_b,
    };
    for e in &ranked[..ga.k_best] {
        let slot = next.len();
        let mut c = e.clone();
        c.slot = slot;
        c.seed = slot_seed(ga.seed, next_gen, slot);
        c.lineage = lineage(Operator::Elite, Some(e.slot), None);
        next.push(c);
    }
    for _ in 0..ga.n_random {
        let slot = next.len();
        let g = sample_random(space, rng);
        let p = params_of(&g, space);
        next.push(Candidate::new(slot, g, slot_seed(ga.seed, next_gen, slot), p, lineage(Operator::Random, None, None)));
    }
    let pool = &ranked[..ga.mating_pool_size().min(ranked.len())];
    for _ in 0..ga.offspring_count() {
        let slot = next.len();
        let mut made = None;
        for _ in 0..OFFSPRING_TRIES {
            let i = rng.gen_range(0..pool.len());
            let mut j = rng.gen_range(0..pool.len() - 1);
            if j >= i {
                j += 1;
            }
            // Parents are drawn in random order, so keeping the head-of-`i`
            // child loses nothing.
            let (child, _) = crossover(&pool[i].genotype, &pool[j].genotype, space, rng);
            let child = mutate(&child, ga.p_mut, space, rng);
            if validate(&child, space).is_empty() {
                made = Some((child, lineage(Operator::Offspring, Some(pool[i].slot), Some(pool[j].slot))));
                break;
            }
        }
        let (g, lin) = made.unwrap_or_else(|| (sample_random(space, rng), lineage(Operator::Fallback, None, None)));
        let p = params_of(&g, space);
        next.push(Candidate::new(slot, g, slot_seed(ga.seed, next_gen, slot), p, lin));
    }
    Ok(next)
}

/// Everything a search run needs besides its configs.
#[derive(Debug, Clone)]
pub struct SearchSetup<'a> {
    pub ga: GaConfig,
    pub fitness: FitnessConfig,
    pub train: TrainConfig,
    pub precision: PrecisionConfig,
    pub space: SearchSpaceConfig,
    pub profile: DeviceProfile,
    pub branch: Branch,
    pub train_data: &'a Dataset,
    pub eval_data: &'a Dataset,
    /// Worker threads; `None` uses [`thread_count`].
    pub threads: Option<usize>,
}

/// Worker cap from `LPNAS_THREADS`, else the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var("LPNAS_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains and measures one candidate according to `branch`.
pub fn evaluate_candidate(
    setup: &SearchSetup<'_>,
    genotype: &Genotype,
    seed: u64,
) -> Result<(Network<f32>, Measurement, f64), TrainError> {
    let mut net = genotype
        .build_network::<f32>(setup.space.in_channels, setup.space.num_classes, seed)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let tc = TrainConfig { seed, ..setup.train };
    train_fp32(&mut net, setup.train_data, &tc)?;
    let gpu = evaluate(&net, setup.eval_data, EvalMode::Fp32)?;
    if setup.branch == Branch::Aligned {
        finetune_fp16_aware(&mut net, setup.train_data, &tc, &setup.precision)?;
    }
    let m = measure(&net, setup.eval_data, &setup.profile).map_err(TrainError::Device)?;
    Ok((net, m, gpu))
}

/// Search progress after some number of completed generations.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub history: Vec<GenerationLog>,
    /// Ranked last completed generation.
    pub population: Vec<Candidate>,
}

impl SearchState {
    pub fn completed(&self) -> usize {
        self.history.len()
    }

    pub fn best(&self) -> Option<&Candidate> {
        self.population.first()
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub history: Vec<GenerationLog>,
    pub best: Candidate,
}

fn evaluate_population(setup: &SearchSetup<'_>, gen: usize, pop: &mut [Candidate]) -> Result<(), SearchError> {
    let results: Vec<Option<Result<(Network<f32>, Measurement, f64), TrainError>>> = pop
        .par_iter()
        .map(|c| (!c.is_evaluated()).then(|| evaluate_candidate(setup, &c.genotype, c.seed)))
        .collect();
    for (c, r) in pop.iter_mut().zip(results) {
        match r {
            None => {}
            Some(Ok((net, m, gpu))) => {
                c.fitness = fitness(m.fps, m.miou_device, &setup.fitness);
                c.measurement = Some(m);
                c.gpu_miou = Some(gpu);
                c.network = Some(Arc::new(net));
            }
            Some(Err(e @ TrainError::Diverged { .. })) => {
                c.fitness = f64::NEG_INFINITY;
                c.failure = Some(e.to_string());
            }
            Some(Err(e)) => {
                return Err(SearchError::Candidate {
                    gen,
                    slot: c.slot,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(())
}

/// Runs (or continues) a search. `on_generation` sees the state after each
/// completed generation; its error aborts the run.
pub fn run_search_from(
    setup: &SearchSetup<'_>,
    resume: Option<SearchState>,
    mut on_generation: impl FnMut(&SearchState) -> Result<(), SearchError>,
) -> Result<SearchResult, SearchError> {
    setup.ga.check()?;
    setup.fitness.check()?;
    setup.space.check().map_err(|e| SearchError::Config(e.to_string()))?;
    setup.train.check().map_err(|e| SearchError::Config(e.to_string()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(setup.threads.unwrap_or_else(thread_count))
        .build()
        .map_err(|e| SearchError::Threads(e.to_string()))?;
    let mut state = resume.unwrap_or(SearchState {
        history: Vec::new(),
        population: Vec::new(),
    });
    while state.completed() < setup.ga.generations {
        let gen = state.completed();
        let mut pop = if gen == 0 {
            initial_population(&setup.ga, &setup.space)
        } else {
            let mut rng = rng_for(&[setup.ga.seed, EVOLVE_STREAM, gen as u64]);
            evolve_generation(&state.population, &setup.ga, &setup.space, gen, &mut rng)?
        };
        pool.install(|| evaluate_population(setup, gen, &mut pop))?;
        let rows = pop.iter().map(|c| LogRow::from_candidate(gen, setup.branch, c)).collect();
        state.history.push(GenerationLog::from_rows(gen, rows));
        let mut ranked = rank(pop);
        // Only elites (and the best) carry weights forward.
        let keep = setup.ga.k_best.max(1);
        for c in ranked.iter_mut().skip(keep) {
            c.network = None;
        }
        state.population = ranked;
        on_generation(&state)?;
    }
    let best = state
        .population
        .first()
        .cloned()
        .ok_or_else(|| SearchError::Config("generations must be >= 1".into()))?;
    Ok(SearchResult {
        history: state.history,
        best,
    })
}

pub fn run_search(setup: &SearchSetup<'_>) -> Result<SearchResult, SearchError> {
    run_search_from(setup, None, |_| Ok(()))
}

/// Rebuilds a resumable state from a history and the weights of the last
/// generation's top candidates (looked up by slot through `load`).
pub fn state_from_history(
    history: Vec<GenerationLog>,
    ga: &GaConfig,
    mut load: impl FnMut(usize) -> Option<Network<f32>>,
) -> Result<SearchState, SearchError> {
    let Some(last) = history.last() else {
        return Ok(SearchState {
            history,
            population: Vec::new(),
        });
    };
    let gen = last.generation;
    let mut pop = Vec::with_capacity(last.rows.len());
    for r in &last.rows {
        let bad = |m: String| SearchError::BadHistory(format!("gen {gen} slot {}: {m}", r.slot));
        let genotype: Genotype = r.genotype.parse().map_err(|e| bad(format!("{e}")))?;
        let operator = Operator::parse(&r.operator).ok_or_else(|| bad(format!("operator {:?}", r.operator)))?;
        let measurement = match (r.fps, r.latency_ms, r.device_miou, r.macs) {
            (Some(fps), Some(latency_ms), Some(miou_device), Some(macs)) => Some(Measurement {
                fps,
                latency_ms,
                miou_device,
                param_count: r.params,
                macs,
            }),
            _ => None,
        };
        pop.push(Candidate {
            slot: r.slot,
            genotype,
            seed: r.seed,
            params: r.params,
            lineage: Lineage {
                generation: gen,
                operator,
                parent_a: r.parent_a,
                parent_b: r.parent_b,
            },
            measurement,
            gpu_miou: r.gpu_miou,
            fitness: r.fitness,
            failure: r.fitness.is_infinite().then(|| "diverged".to_string()),
            network: None,
        });
    }
    let mut ranked = rank(pop);
    if ranked.len() != ga.population_size {
        return Err(SearchError::BadHistory(format!(
            "last generation has {} rows, expected {}",
            ranked.len(),
            ga.population_size
        )));
    }
    for c in ranked.iter_mut().take(ga.k_best.max(1)) {
        if c.fitness.is_finite() {
            let net = load(c.slot).ok_or_else(|| SearchError::BadHistory(format!("missing weights for slot {}", c.slot)))?;
            if net.tokens() != c.genotype.tokens() {
                return Err(SearchError::BadHistory(format!("weights for slot {} have another genotype", c.slot)));
            }
            c.network = Some(Arc::new(net));
        }
    }
    Ok(SearchState {
        history,
        population: ranked,
    })
}

#[cfg(test)]
mod tests;
