//! Stage II: constrained NSGA-II over subnet configurations. Objectives are
//! (validation policy loss, latency) — or parameter count instead of latency
//! — with latency and memory budgets as constraints under the standard
//! constrained-dominance rule. Fitness inherits supernet weights; nothing is
//! retrained.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng as _;
use rand::SeedableRng;

use crate::configspace::{Genome, SearchSpace, SubnetConfig};
use crate::costmodel::{estimate_latency, estimate_memory, is_feasible, DeviceProfile};
use crate::env::{Action, Obs};
use crate::supernet::{Supernet, SupernetError};
use crate::trainer::bc_mse;
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchObjective {
    /// (val_loss, latency_ms)
    Latency,
    /// (val_loss, parameter count)
    ParamCount,
}

#[derive(Debug, Clone, Copy)]
pub struct SearchParams {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    /// Per-gene mutation probability; `None` means 1/genome_length.
    pub mutation_rate: Option<f64>,
    pub objective: SearchObjective,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            population: 64,
            generations: 40,
            crossover_rate: 0.9,
            mutation_rate: None,
            objective: SearchObjective::Latency,
        }
    }
}

/// One evaluated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub genome: Genome,
    pub val_loss: f64,
    pub latency_ms: f64,
    pub param_count: u64,
    pub memory_bytes: u64,
    pub feasible: bool,
    pub violation: f64,
    /// 1-based front rank after the last sort.
    pub rank: usize,
    pub crowding: f64,
}

impl Individual {
    pub fn objectives(&self, objective: SearchObjective) -> [f64; 2] {
        match objective {
            SearchObjective::Latency => [self.val_loss, self.latency_ms],
            SearchObjective::ParamCount => [self.val_loss, self.param_count as f64],
        }
    }
}

/// Nondominated feasible set, sorted by ascending latency. When nothing is
/// feasible the flag is false and the members are the minimum-violation
/// nondominated individuals instead (lowest violation first).
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoFront {
    pub members: Vec<Individual>,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SearchError {
    Supernet(SupernetError),
    EmptyFront,
    EmptyValidationSet,
}

impl fmt::Display for SearchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SearchError::Supernet(e) => write!(f, "fitness evaluation: {e}"),
            SearchError::EmptyFront => write!(f, "selection from an empty front"),
            SearchError::EmptyValidationSet => write!(f, "empty validation set"),
        }
    }
}

impl core::error::Error for SearchError {}

impl From<SupernetError> for SearchError {
    fn from(e: SupernetError) -> Self {
        SearchError::Supernet(e)
    }
}

/// Constrained dominance: feasible beats infeasible; two infeasible compare
/// by violation; two feasible compare by Pareto dominance (minimization).
pub fn dominates(a: &Individual, b: &Individual, objective: SearchObjective) -> bool {
    match (a.feasible, b.feasible) {
        (true, false) => true,
        (false, true) => false,
        (false, false) => a.violation < b.violation,
        (true, true) => {
            let (oa, ob) = (a.objectives(objective), b.objectives(objective));
            oa[0] <= ob[0] && oa[1] <= ob[1] && (oa[0] < ob[0] || oa[1] < ob[1])
        }
    }
}

/// Fast nondominated sort; returns fronts of indices, best first.
pub fn nondominated_sort(
    population: &[Individual],
    objective: SearchObjective,
) -> Vec<Vec<usize>> {
    let n = population.len();
    let mut dominated: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut count = vec![0usize; n];
    let mut fronts: Vec<Vec<usize>> = Vec::new();
    for p in 0..n {
        for q in p + 1..n {
            if dominates(&population[p], &population[q], objective) {
                dominated[p].push(q);
                count[q] += 1;
            } else if dominates(&population[q], &population[p], objective) {
                dominated[q].push(p);
                count[p] += 1;
            }
        }
    }
    let mut current: Vec<usize> = (0..n).filter(|&i| count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &p in &current {
            for &q in &dominated[p] {
                count[q] -= 1;
                if count[q] == 0 {
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        fronts.push(core::mem::take(&mut current));
        current = next;
    }
    fronts
}

/// Crowding distance over one front: per objective, boundary individuals get
/// infinity, interior ones the normalized gap between neighbours.
pub fn crowding_distances(
    population: &[Individual],
    front: &[usize],
    objective: SearchObjective,
) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0f64; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let mut any_spread = false;
    for obj in 0..2 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            let a = population[front[i]].objectives(objective)[obj];
            let b = population[front[j]].objectives(objective)[obj];
            a.partial_cmp(&b).expect("finite objectives")
        });
        let lo = population[front[order[0]]].objectives(objective)[obj];
        let hi = population[front[order[n - 1]]].objectives(objective)[obj];
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        any_spread = true;
        for w in 1..n - 1 {
            let prev = population[front[order[w - 1]]].objectives(objective)[obj];
            let next = population[front[order[w + 1]]].objectives(objective)[obj];
            if dist[order[w]].is_finite() {
                dist[order[w]] += (next - prev) / range;
            }
        }
    }
    if !any_spread {
        // every member coincides: all of them are boundary points
        return vec![f64::INFINITY; n];
    }
    dist
}

/// Held-out fitness data plus the cost model; fitness is a pure function of
/// the genome given this context.
pub struct FitnessContext<'a> {
    pub net: &'a Supernet,
    pub profile: &'a DeviceProfile,
    pub val_obs: &'a [Obs],
    pub val_actions: &'a [Action],
}

impl FitnessContext<'_> {
    /// Evaluate one genome: held-out behavior-cloning loss via weight
    /// inheritance plus table-driven costs.
    pub fn evaluate(&self, genome: &Genome) -> Result<Individual, SearchError> {
        let space = &self.net.space;
        let config = space.decode(genome).map_err(SupernetError::Space)?;
        let pred = self.net.forward_infer(&config, self.val_obs)?;
        let val_loss = bc_mse(&pred, self.val_actions);
        let latency_ms = estimate_latency(self.profile, space, &config);
        let memory_bytes =
            estimate_memory(self.profile, space, &config, &self.net.dims).total_bytes;
        let feas = is_feasible(self.profile, space, &config, &self.net.dims);
        Ok(Individual {
            genome: genome.clone(),
            val_loss,
            latency_ms,
            param_count: self.net.subnet_param_count(&config),
            memory_bytes,
            feasible: feas.feasible,
            violation: feas.violation,
            rank: 0,
            crowding: 0.0,
        })
    }
}

/// Search trace for invariants and reporting.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub front: ParetoFront,
    /// Best feasible val_loss in the population after each generation
    /// (NaN while nothing is feasible).
    pub best_feasible_history: Vec<f64>,
    pub evaluations: usize,
    /// The final population after the last environmental selection.
    pub final_population: Vec<Individual>,
}

fn assign_ranks_and_crowding(pop: &mut [Individual], objective: SearchObjective) {
    let fronts = nondominated_sort(pop, objective);
    for (rank, front) in fronts.iter().enumerate() {
        let dist = crowding_distances(pop, front, objective);
        for (i, &idx) in front.iter().enumerate() {
            pop[idx].rank = rank + 1;
            pop[idx].crowding = dist[i];
        }
    }
}

fn tournament<'a>(pop: &'a [Individual], rng: &mut Rng) -> &'a Individual {
    let a = &pop[rng.gen_range(0..pop.len())];
    let b = &pop[rng.gen_range(0..pop.len())];
    if a.rank < b.rank {
        a
    } else if b.rank < a.rank {
        b
    } else if b.crowding > a.crowding {
        b
    } else {
        a
    }
}

/// Elitist environmental selection over parents + offspring.
fn select_next(
    mut combined: Vec<Individual>,
    target: usize,
    objective: SearchObjective,
) -> Vec<Individual> {
    assign_ranks_and_crowding(&mut combined, objective);
    let fronts = nondominated_sort(&combined, objective);
    let mut next: Vec<Individual> = Vec::with_capacity(target);
    for front in fronts {
        if next.len() == target {
            break;
        }
        if next.len() + front.len() <= target {
            for &i in &front {
                next.push(combined[i].clone());
            }
        } else {
            let dist = crowding_distances(&combined, &front, objective);
            let mut order: Vec<usize> = (0..front.len()).collect();
            // stable sort on descending crowding keeps ties deterministic
            order.sort_by(|&i, &j| dist[j].partial_cmp(&dist[i]).expect("crowding is ordered"));
            for &w in order.iter().take(target - next.len()) {
                next.push(combined[front[w]].clone());
            }
        }
    }
    next
}

/// Run the constrained NSGA-II search. Deterministic given the seed; fitness
/// values are cached by genome.
pub fn run_search(
    ctx: &FitnessContext<'_>,
    params: &SearchParams,
    seed: u64,
) -> Result<SearchOutcome, SearchError> {
    if ctx.val_obs.is_empty() || ctx.val_obs.len() != ctx.val_actions.len() {
        return Err(SearchError::EmptyValidationSet);
    }
    let space = &ctx.net.space;
    let mut rng = Rng::seed_from_u64(seed);
    let p_mut = params
        .mutation_rate
        .unwrap_or(1.0 / space.genome_len() as f64);
    let mut cache: BTreeMap<Genome, Individual> = BTreeMap::new();
    let mut evaluations = 0usize;
    let eval = |genome: &Genome,
                    cache: &mut BTreeMap<Genome, Individual>,
                    evaluations: &mut usize|
     -> Result<Individual, SearchError> {
        if let Some(ind) = cache.get(genome) {
            return Ok(ind.clone());
        }
        *evaluations += 1;
        let ind = ctx.evaluate(genome)?;
        cache.insert(genome.clone(), ind.clone());
        Ok(ind)
    };

    // seeded initial population: the extremes plus uniform samples
    let mut genomes: Vec<Genome> = Vec::with_capacity(params.population);
    genomes.push(space.encode(&space.largest_config()).expect("largest in space"));
    genomes.push(space.encode(&space.smallest_config()).expect("smallest in space"));
    while genomes.len() < params.population {
        genomes.push(space.encode(&space.sample_uniform(&mut rng)).expect("sample in space"));
    }
    let mut population: Vec<Individual> = Vec::with_capacity(params.population);
    for g in &genomes {
        population.push(eval(g, &mut cache, &mut evaluations)?);
    }
    assign_ranks_and_crowding(&mut population, params.objective);

    let mut best_feasible_history = Vec::with_capacity(params.generations);
    for _ in 0..params.generations {
        let mut offspring: Vec<Individual> = Vec::with_capacity(params.population);
        while offspring.len() < params.population {
            let p1 = tournament(&population, &mut rng).genome.clone();
            let p2 = tournament(&population, &mut rng).genome.clone();
            let (c1, c2) = if rng.gen::<f64>() < params.crossover_rate {
                space.crossover(&p1, &p2, &mut rng)
            } else {
                (p1, p2)
            };
            for child in [c1, c2] {
                if offspring.len() == params.population {
                    break;
                }
                let mutated = space.mutate(&child, p_mut, &mut rng);
                offspring.push(eval(&mutated, &mut cache, &mut evaluations)?);
            }
        }
        let mut combined = population;
        combined.extend(offspring);
        population = select_next(combined, params.population, params.objective);
        let best = population
            .iter()
            .filter(|i| i.feasible)
            .map(|i| i.val_loss)
            .fold(f64::NAN, |acc, v| if acc.is_nan() || v < acc { v } else { acc });
        best_feasible_history.push(best);
    }

    assign_ranks_and_crowding(&mut population, params.objective);
    let front = extract_front(&population, params.objective);
    Ok(SearchOutcome { front, best_feasible_history, evaluations, final_population: population })
}

/// The feasible nondominated set of a population (or the flagged
/// minimum-violation set when nothing is feasible).
pub fn extract_front(population: &[Individual], objective: SearchObjective) -> ParetoFront {
    let fronts = nondominated_sort(population, objective);
    let first = &fronts[0];
    let any_feasible = population.iter().any(|i| i.feasible);
    let mut members: Vec<Individual> = first
        .iter()
        .map(|&i| population[i].clone())
        .filter(|i| i.feasible == any_feasible)
        .collect();
    if any_feasible {
        members.sort_by(|a, b| {
            a.latency_ms
                .partial_cmp(&b.latency_ms)
                .expect("finite latency")
                .then(a.val_loss.partial_cmp(&b.val_loss).expect("finite loss"))
        });
        // drop exact duplicates (same genome reached twice)
        members.dedup_by(|a, b| a.genome == b.genome);
    } else {
        members.sort_by(|a, b| a.violation.partial_cmp(&b.violation).expect("finite violation"));
        members.dedup_by(|a, b| a.genome == b.genome);
    }
    ParetoFront { members, feasible: any_feasible }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionRule {
    /// Feasible member with the smallest validation loss.
    MinLossUnderBudget,
    /// Maximum-bend member of the loss/latency trade-off.
    Knee,
}

/// Pick the deployment config from a front.
pub fn select_deployment(
    front: &ParetoFront,
    rule: SelectionRule,
    space: &SearchSpace,
) -> Result<SubnetConfig, SearchError> {
    if front.members.is_empty() {
        return Err(SearchError::EmptyFront);
    }
    let pick = match rule {
        SelectionRule::MinLossUnderBudget => front
            .members
            .iter()
            .min_by(|a, b| {
                a.val_loss
                    .partial_cmp(&b.val_loss)
                    .expect("finite loss")
                    .then(a.latency_ms.partial_cmp(&b.latency_ms).expect("finite latency"))
            })
            .expect("non-empty front"),
        SelectionRule::Knee => knee_point(&front.members),
    };
    Ok(space.decode(&pick.genome).map_err(SupernetError::Space)?)
}

/// Largest normalized distance from the line between the front's endpoints
/// in (loss, latency) space.
fn knee_point(members: &[Individual]) -> &Individual {
    if members.len() < 3 {
        return &members[0];
    }
    let lo_lat = members.first().expect("non-empty");
    let hi_lat = members.last().expect("non-empty");
    let (x0, y0) = (norm01(members, lo_lat, 0), norm01(members, lo_lat, 1));
    let (x1, y1) = (norm01(members, hi_lat, 0), norm01(members, hi_lat, 1));
    let mut best = &members[0];
    let mut best_d = f64::NEG_INFINITY;
    for m in members {
        let (x, y) = (norm01(members, m, 0), norm01(members, m, 1));
        // distance from the chord, up to a constant factor
        let d = ((y1 - y0) * x - (x1 - x0) * y + x1 * y0 - y1 * x0).abs();
        if d > best_d {
            best_d = d;
            best = m;
        }
    }
    best
}

fn norm01(members: &[Individual], m: &Individual, obj: usize) -> f64 {
    let get = |i: &Individual| if obj == 0 { i.val_loss } else { i.latency_ms };
    let lo = members.iter().map(&get).fold(f64::INFINITY, f64::min);
    let hi = members.iter().map(&get).fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        (get(m) - lo) / (hi - lo)
    } else {
        0.0
    }
}
