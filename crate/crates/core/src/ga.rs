//! Genetic algorithm with hybrid roulette-wheel / tournament parent selection.
//!
//! Every mating pair samples `r, t ~ U(0, 1)` and uses roulette-wheel
//! selection when `r >= t`, tournament selection otherwise. Children come
//! from uniform crossover followed by Gaussian mutation. Fitness is
//! minimized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::track::splitmix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Hybrid,
    Roulette,
    Tournament,
}

impl SelectionMode {
    pub const ALL: [SelectionMode; 3] = [SelectionMode::Hybrid, SelectionMode::Roulette, SelectionMode::Tournament];

    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::Hybrid => "hybrid",
            SelectionMode::Roulette => "rws",
            SelectionMode::Tournament => "ts",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub generations: usize,
    pub pop_size: usize,
    pub offspring_fraction: f64,
    pub beta: f64,
    pub mutation_rate: f64,
    pub mutation_sigma: f64,
    pub tournament_size: usize,
    pub elite_count: usize,
    pub selection: SelectionMode,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            generations: 15,
            pop_size: 20,
            offspring_fraction: 0.8,
            beta: 0.75,
            mutation_rate: 0.3,
            mutation_sigma: 0.15,
            tournament_size: 3,
            elite_count: 1,
            selection: SelectionMode::Hybrid,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.generations < 1 {
            return bad("generations must be >= 1");
        }
        if self.pop_size < 4 || self.pop_size % 2 != 0 {
            return bad("pop_size must be even and >= 4");
        }
        if !(self.offspring_fraction > 0.0 && self.offspring_fraction <= 1.0) {
            return bad("offspring_fraction must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) || !(self.mutation_sigma >= 0.0) || !(self.beta >= 0.0) {
            return bad("mutation_rate in [0, 1], mutation_sigma >= 0 and beta >= 0 required");
        }
        if self.tournament_size < 2 || self.tournament_size > self.pop_size {
            return bad("tournament_size must be in [2, pop_size]");
        }
        if self.elite_count >= self.pop_size {
            return bad("elite_count must be below pop_size");
        }
        Ok(())
    }

    /// Number of children bred per generation. The remaining slots are
    /// filled with the best individuals of the previous generation, at
    /// least `elite_count` of them.
    pub fn n_offspring(&self) -> usize {
        let n = (self.offspring_fraction * self.pop_size as f64).round() as usize;
        n.clamp(1, self.pop_size - self.elite_count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chromosome {
    pub genes: Vec<f64>,
    pub bounds: Vec<[f64; 2]>,
    pub fitness: f64,
}

impl Chromosome {
    pub fn new(genes: Vec<f64>, bounds: Vec<[f64; 2]>) -> Self {
        Self { genes, bounds, fitness: f64::INFINITY }
    }

    pub fn random<R: Rng>(bounds: &[[f64; 2]], rng: &mut R) -> Self {
        let genes = bounds.iter().map(|&[lo, hi]| if hi > lo { rng.gen_range(lo..=hi) } else { lo }).collect();
        Self::new(genes, bounds.to_vec())
    }

    pub fn within_bounds(&self) -> bool {
        self.genes.iter().zip(&self.bounds).all(|(g, [lo, hi])| *lo <= *g && *g <= *hi)
    }
}

/// Objective minimized by [`run_ga`].
pub trait Fitness {
    fn bounds(&self) -> Vec<[f64; 2]>;

    /// `stream` is a per-evaluation seed derived from the GA seed, the
    /// generation and the individual's index.
    fn evaluate(&self, genes: &[f64], stream: u64) -> f64;
}

pub fn sphere_fitness(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub dim: usize,
    pub half_width: f64,
}

impl Default for Sphere {
    fn default() -> Self {
        Self { dim: 5, half_width: 100.0 }
    }
}

impl Fitness for Sphere {
    fn bounds(&self) -> Vec<[f64; 2]> {
        vec![[-self.half_width, self.half_width]; self.dim]
    }

    fn evaluate(&self, genes: &[f64], _stream: u64) -> f64 {
        sphere_fitness(genes)
    }
}

fn roulette<'a, R: Rng>(pop: &'a [Chromosome], beta: f64, rng: &mut R) -> &'a Chromosome {
    let mean = pop.iter().map(|c| c.fitness).sum::<f64>() / pop.len() as f64;
    let best = pop.iter().map(|c| c.fitness).fold(f64::INFINITY, f64::min);
    // Shifting by the best fitness leaves the normalized weights unchanged
    // and keeps the largest weight at exactly 1.
    let weights: Vec<f64> = if mean.is_finite() && mean > 0.0 {
        pop.iter().map(|c| (-beta * (c.fitness - best) / mean).exp()).collect()
    } else {
        vec![1.0; pop.len()]
    };
    let total: f64 = weights.iter().sum();
    let mut target = rng.gen::<f64>() * total;
    for (c, w) in pop.iter().zip(&weights) {
        if target < *w {
            return c;
        }
        target -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).map_or(&pop[pop.len() - 1], |i| &pop[i])
}

fn tournament<'a, R: Rng>(pop: &'a [Chromosome], size: usize, rng: &mut R) -> &'a Chromosome {
    let picks = rand::seq::index::sample(rng, pop.len(), size.min(pop.len()));
    picks.iter().map(|i| &pop[i]).min_by(|a, b| a.fitness.total_cmp(&b.fitness)).unwrap()
}

fn use_roulette<R: Rng>(mode: SelectionMode, rng: &mut R) -> bool {
    match mode {
        SelectionMode::Hybrid => {
            let r: f64 = rng.gen();
            let t: f64 = rng.gen();
            r >= t
        }
        SelectionMode::Roulette => true,
        SelectionMode::Tournament => false,
    }
}

fn select_with<'a, R: Rng>(pop: &'a [Chromosome], roulette_branch: bool, rng: &mut R, cfg: &GaConfig) -> &'a Chromosome {
    if roulette_branch {
        roulette(pop, cfg.beta, rng)
    } else {
        tournament(pop, cfg.tournament_size, rng)
    }
}

/// Draws one parent according to `cfg.selection`.
pub fn select_parent<'a, R: Rng>(pop: &'a [Chromosome], rng: &mut R, cfg: &GaConfig) -> &'a Chromosome {
    let branch = use_roulette(cfg.selection, rng);
    select_with(pop, branch, rng, cfg)
}

/// Draws a mating pair. Both parents come from the same branch.
pub fn select_pair<'a, R: Rng>(
    pop: &'a [Chromosome],
    rng: &mut R,
    cfg: &GaConfig,
) -> (&'a Chromosome, &'a Chromosome) {
    let branch = use_roulette(cfg.selection, rng);
    (select_with(pop, branch, rng, cfg), select_with(pop, branch, rng, cfg))
}

pub fn uniform_crossover<R: Rng>(p1: &Chromosome, p2: &Chromosome, rng: &mut R) -> (Chromosome, Chromosome) {
    assert_eq!(p1.genes.len(), p2.genes.len(), "parents differ in length");
    let mut c1 = Chromosome::new(p1.genes.clone(), p1.bounds.clone());
    let mut c2 = Chromosome::new(p2.genes.clone(), p2.bounds.clone());
    for j in 0..c1.genes.len() {
        if rng.gen_bool(0.5) {
            std::mem::swap(&mut c1.genes[j], &mut c2.genes[j]);
        }
    }
    (c1, c2)
}

pub fn gaussian_mutation<R: Rng>(mut c: Chromosome, rng: &mut R, cfg: &GaConfig) -> Chromosome {
    if cfg.mutation_rate <= 0.0 || cfg.mutation_sigma <= 0.0 {
        return c;
    }
    for (g, &[lo, hi]) in c.genes.iter_mut().zip(&c.bounds) {
        if rng.gen::<f64>() < cfg.mutation_rate {
            let sd = cfg.mutation_sigma * (hi - lo);
            if sd > 0.0 {
                *g = (*g + Normal::new(0.0, sd).unwrap().sample(rng)).clamp(lo, hi);
            }
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub gen: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaResult {
    pub best: Chromosome,
    /// Entry 0 is the initial population, then one entry per generation.
    pub history: Vec<GenerationStats>,
    pub evaluations: usize,
}

impl GaResult {
    pub fn write_history_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for h in &self.history {
            wr.serialize(h)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn stream_seed(seed: u64, gen: usize, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64((gen as u64) << 32 ^ index as u64))
}

fn evaluate_all<F: Fitness + ?Sized>(f: &F, pop: &mut [Chromosome], seed: u64, gen: usize) {
    for (i, c) in pop.iter_mut().enumerate() {
        let v = f.evaluate(&c.genes, stream_seed(seed, gen, i));
        c.fitness = if v.is_nan() { f64::INFINITY } else { v };
    }
}

fn stats(pop: &[Chromosome], gen: usize) -> GenerationStats {
    GenerationStats {
        gen,
        best_fitness: pop.iter().map(|c| c.fitness).fold(f64::INFINITY, f64::min),
        mean_fitness: pop.iter().map(|c| c.fitness).sum::<f64>() / pop.len() as f64,
    }
}

fn sort_by_fitness(pop: &mut [Chromosome]) {
    pop.sort_by(|a, b| a.fitness.total_cmp(&b.fitness));
}

pub fn run_ga<F: Fitness + ?Sized>(fitness: &F, cfg: &GaConfig) -> Result<GaResult> {
    cfg.validate()?;
    let bounds = fitness.bounds();
    if bounds.is_empty() || bounds.iter().any(|[lo, hi]| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::Config("gene bounds must be finite with lo <= hi".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop: Vec<Chromosome> = (0..cfg.pop_size).map(|_| Chromosome::random(&bounds, &mut rng)).collect();
    evaluate_all(fitness, &mut pop, cfg.seed, 0);
    sort_by_fitness(&mut pop);
    let mut history = vec![stats(&pop, 0)];
    let mut evaluations = pop.len();
    let n_off = cfg.n_offspring();

    for gen in 1..=cfg.generations {
        let mut children = Vec::with_capacity(n_off + 1);
        while children.len() < n_off {
            let (p1, p2) = select_pair(&pop, &mut rng, cfg);
            let (c1, c2) = uniform_crossover(p1, p2, &mut rng);
            children.push(gaussian_mutation(c1, &mut rng, cfg));
            children.push(gaussian_mutation(c2, &mut rng, cfg));
        }
        children.truncate(n_off);
        evaluate_all(fitness, &mut children, cfg.seed, gen);
        evaluations += children.len();

        // `pop` is sorted, so its head holds the survivors.
        pop.truncate(cfg.pop_size - n_off);
        pop.extend(children);
        sort_by_fitness(&mut pop);
        let s = stats(&pop, gen);
        log::debug!("gen {gen}: best {:.6} mean {:.6}", s.best_fitness, s.mean_fitness);
        history.push(s);
    }
    Ok(GaResult { best: pop[0].clone(), history, evaluations })
}

/// Final best sphere costs for `n_seeds` seeded runs of one selector.
pub fn bench_sphere(cfg: &GaConfig, sphere: &Sphere, n_seeds: u64) -> Result<Vec<GaResult>> {
    (0..n_seeds)
        .map(|s| run_ga(sphere, &GaConfig { seed: cfg.seed.wrapping_add(s), ..cfg.clone() }))
        .collect()
}
