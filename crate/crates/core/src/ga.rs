//! Genetic-algorithm wavelength selection.
//!
//! Individuals are band-inclusion bitmasks. Fitness is the k-fold
//! cross-validated PLSR RMSE on the selected bands, minimized over the
//! latent-variable count, so lower is better. Selection is tournament,
//! crossover single-point, mutation an independent per-gene flip with
//! repair back into the band-count bounds, and the top half of each
//! generation is carried over unchanged.

use crate::chemometrics::{fit_plsr_path, ChemError, SpectraTable};
use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GaError {
    #[error("invalid GA config: {0}")]
    BadConfig(String),
    #[error("genome selects no bands")]
    EmptyGenome,
    #[error("band bounds [{min}, {max}] infeasible for {bands} bands")]
    InfeasibleBounds {
        min: usize,
        max: usize,
        bands: usize,
    },
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Operator settings. The published operator choices are tournament
/// selection, single-point crossover, a 3% mutation rate and 50% elitism;
/// the remaining knobs are desk-scale defaults.
#[derive(Debug, Clone)]
pub struct GaConfig {
    pub population_size: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub mutation_rate: f64,
    pub elitism_rate: f64,
    pub min_bands: usize,
    pub max_bands: usize,
    pub cv_folds: usize,
    pub max_lv: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 50,
            generations: 100,
            tournament_size: 3,
            mutation_rate: 0.03,
            elitism_rate: 0.5,
            min_bands: 3,
            max_bands: 15,
            cv_folds: 5,
            max_lv: 10,
            seed: 0,
        }
    }
}

impl GaConfig {
    fn validate(&self, bands: usize) -> Result<(), GaError> {
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(GaError::BadConfig(format!(
                "mutation rate {} outside [0,1]",
                self.mutation_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.elitism_rate) {
            return Err(GaError::BadConfig(format!(
                "elitism rate {} outside [0,1]",
                self.elitism_rate
            )));
        }
        if self.tournament_size < 2 || self.tournament_size > self.population_size {
            return Err(GaError::BadConfig(format!(
                "tournament size {} outside 2..={}",
                self.tournament_size, self.population_size
            )));
        }
        if self.population_size < 2 {
            return Err(GaError::BadConfig("population must hold at least 2".into()));
        }
        if bands < 2 {
            return Err(GaError::BadConfig(format!(
                "need at least 2 candidate bands, got {bands}"
            )));
        }
        if self.min_bands == 0 || self.min_bands > self.max_bands || self.max_bands > bands {
            return Err(GaError::InfeasibleBounds {
                min: self.min_bands,
                max: self.max_bands,
                bands,
            });
        }
        if self.cv_folds < 2 {
            return Err(GaError::BadConfig("cv_folds must be at least 2".into()));
        }
        Ok(())
    }
}

/// Band-inclusion genome with a cached fitness (lower is better).
#[derive(Debug, Clone)]
pub struct Individual {
    pub genome: Vec<bool>,
    pub fitness: Option<f64>,
}

impl Individual {
    pub fn selected_count(&self) -> usize {
        self.genome.iter().filter(|&&g| g).count()
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.genome
            .iter()
            .enumerate()
            .filter_map(|(i, &g)| g.then_some(i))
            .collect()
    }
}

/// Search outcome: best genome, its wavelengths, and per-generation history.
#[derive(Debug, Clone)]
pub struct GaResult {
    pub best_genome: Vec<bool>,
    pub best_fitness: f64,
    pub selected_wavelengths: Vec<f64>,
    /// best fitness after each generation
    pub best_history: Vec<f64>,
    /// population mean fitness after each generation
    pub mean_history: Vec<f64>,
}

/// Cross-validated PLSR RMSE of the genome's band subset, minimized over
/// 1..=max_lv latent variables. Folds are assigned round-robin by row
/// index, so the score is deterministic.
pub fn fitness(
    genome: &[bool],
    table: &SpectraTable,
    cv_folds: usize,
    max_lv: usize,
) -> Result<f64, GaError> {
    let bands: Vec<usize> = genome
        .iter()
        .enumerate()
        .filter_map(|(i, &g)| g.then_some(i))
        .collect();
    if bands.is_empty() {
        return Err(GaError::EmptyGenome);
    }
    let sub = table.subset_bands(&bands);
    let n = sub.n_samples();
    let folds = cv_folds.min(n);
    let lv_cap = max_lv.min(bands.len()).max(1);

    let mut sq_err = vec![0.0f64; lv_cap];
    for fold in 0..folds {
        let train_rows: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
        let test_rows: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
        if train_rows.len() < 2 || test_rows.is_empty() {
            continue;
        }
        let path = fit_plsr_path(&sub.subset_rows(&train_rows), lv_cap.min(train_rows.len() - 1))?;
        let models: Vec<_> = (1..=lv_cap).map(|lv| path.model(lv)).collect();
        for &row in &test_rows {
            let x: Vec<f64> = sub.x.row(row).to_vec();
            for (lv, model) in models.iter().enumerate() {
                let pred = model.predict_one(&x)?;
                let e = pred - sub.y[row];
                sq_err[lv] += e * e;
            }
        }
    }
    let best = sq_err
        .iter()
        .map(|s| (s / n as f64).sqrt())
        .fold(f64::INFINITY, f64::min);
    Ok(best)
}

/// Best-fitness member of `k` candidates drawn uniformly without
/// replacement. Unevaluated members lose to any evaluated one.
pub fn tournament_select<'a, R: Rng>(
    population: &'a [Individual],
    k: usize,
    rng: &mut R,
) -> &'a Individual {
    assert!(k >= 1 && k <= population.len(), "tournament size");
    let picks = index::sample(rng, population.len(), k);
    picks
        .iter()
        .map(|i| &population[i])
        .min_by(|a, b| {
            let fa = a.fitness.unwrap_or(f64::INFINITY);
            let fb = b.fitness.unwrap_or(f64::INFINITY);
            fa.partial_cmp(&fb).unwrap()
        })
        .expect("non-empty tournament")
}

/// Swap genome suffixes at `point` (1..=len-1).
pub fn single_point_crossover(
    a: &Individual,
    b: &Individual,
    point: usize,
) -> (Individual, Individual) {
    assert_eq!(a.genome.len(), b.genome.len(), "genome lengths");
    assert!(point >= 1 && point < a.genome.len(), "crossover point");
    let mut c1 = a.genome.clone();
    let mut c2 = b.genome.clone();
    c1[point..].copy_from_slice(&b.genome[point..]);
    c2[point..].copy_from_slice(&a.genome[point..]);
    (
        Individual {
            genome: c1,
            fitness: None,
        },
        Individual {
            genome: c2,
            fitness: None,
        },
    )
}

/// Flip each gene independently with probability `rate`, then repair the
/// genome back into `[min, max]` selected bands by random flips toward
/// feasibility.
pub fn mutate<R: Rng>(
    ind: &Individual,
    rate: f64,
    min: usize,
    max: usize,
    rng: &mut R,
) -> Individual {
    let mut genome = ind.genome.clone();
    for g in genome.iter_mut() {
        if rng.random::<f64>() < rate {
            *g = !*g;
        }
    }
    repair(&mut genome, min, max, rng);
    Individual {
        genome,
        fitness: None,
    }
}

/// Random flips toward feasibility until the selected count is in bounds.
fn repair<R: Rng>(genome: &mut [bool], min: usize, max: usize, rng: &mut R) {
    let mut count = genome.iter().filter(|&&g| g).count();
    while count < min {
        let zeros: Vec<usize> = genome
            .iter()
            .enumerate()
            .filter_map(|(i, &g)| (!g).then_some(i))
            .collect();
        genome[zeros[rng.random_range(0..zeros.len())]] = true;
        count += 1;
    }
    while count > max {
        let ones: Vec<usize> = genome
            .iter()
            .enumerate()
            .filter_map(|(i, &g)| g.then_some(i))
            .collect();
        genome[ones[rng.random_range(0..ones.len())]] = false;
        count -= 1;
    }
}

fn random_individual<R: Rng>(bands: usize, min: usize, max: usize, rng: &mut R) -> Individual {
    let target = rng.random_range(min..=max);
    let picks = index::sample(rng, bands, target);
    let mut genome = vec![false; bands];
    for i in picks {
        genome[i] = true;
    }
    Individual {
        genome,
        fitness: None,
    }
}

/// Run the search. Deterministic for a fixed seed, config and table.
pub fn run_ga(table: &SpectraTable, config: &GaConfig) -> Result<GaResult, GaError> {
    let bands = table.n_bands();
    config.validate(bands)?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);

    let mut population: Vec<Individual> = (0..config.population_size)
        .map(|_| random_individual(bands, config.min_bands, config.max_bands, &mut rng))
        .collect();
    for ind in &mut population {
        ind.fitness = Some(fitness(&ind.genome, table, config.cv_folds, config.max_lv)?);
    }
    sort_by_fitness(&mut population);

    let n_elite = ((config.population_size as f64) * config.elitism_rate).floor() as usize;
    let mut best_history = Vec::with_capacity(config.generations);
    let mut mean_history = Vec::with_capacity(config.generations);

    for _ in 0..config.generations {
        let mut next: Vec<Individual> = population[..n_elite].to_vec();
        while next.len() < config.population_size {
            let a = tournament_select(&population, config.tournament_size, &mut rng).clone();
            let b = tournament_select(&population, config.tournament_size, &mut rng).clone();
            let point = rng.random_range(1..bands);
            let (c1, c2) = single_point_crossover(&a, &b, point);
            for child in [c1, c2] {
                if next.len() == config.population_size {
                    break;
                }
                next.push(mutate(
                    &child,
                    config.mutation_rate,
                    config.min_bands,
                    config.max_bands,
                    &mut rng,
                ));
            }
        }
        for ind in &mut next {
            if ind.fitness.is_none() {
                ind.fitness = Some(fitness(&ind.genome, table, config.cv_folds, config.max_lv)?);
            }
        }
        sort_by_fitness(&mut next);
        population = next;
        best_history.push(population[0].fitness.unwrap());
        let mean = population
            .iter()
            .map(|i| i.fitness.unwrap())
            .sum::<f64>()
            / population.len() as f64;
        mean_history.push(mean);
    }

    let best = &population[0];
    let selected_wavelengths = best
        .selected_indices()
        .iter()
        .map(|&i| table.wavelengths[i])
        .collect();
    Ok(GaResult {
        best_genome: best.genome.clone(),
        best_fitness: best.fitness.unwrap(),
        selected_wavelengths,
        best_history,
        mean_history,
    })
}

fn sort_by_fitness(population: &mut [Individual]) {
    population.sort_by(|a, b| {
        a.fitness
            .unwrap_or(f64::INFINITY)
            .partial_cmp(&b.fitness.unwrap_or(f64::INFINITY))
            .unwrap()
    });
}

/// Write the per-generation history as CSV.
pub fn write_history_csv(result: &GaResult, path: &Path) -> Result<(), GaError> {
    let mut text = String::from("generation,best_fitness,mean_fitness\n");
    for (g, (b, m)) in result
        .best_history
        .iter()
        .zip(&result.mean_history)
        .enumerate()
    {
        text.push_str(&format!("{g},{b},{m}\n"));
    }
    fs::write(path, text).map_err(|source| GaError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Write the selected wavelengths, one per line.
pub fn write_selected_wavelengths(result: &GaResult, path: &Path) -> Result<(), GaError> {
    let mut text = String::new();
    for w in &result.selected_wavelengths {
        text.push_str(&format!("{w}\n"));
    }
    fs::write(path, text).map_err(|source| GaError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a wavelength list written by [`write_selected_wavelengths`].
pub fn read_selected_wavelengths(path: &Path) -> Result<Vec<f64>, GaError> {
    let text = fs::read_to_string(path).map_err(|source| GaError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .filter_map(|l| l.trim().parse::<f64>().ok())
        .collect())
}
