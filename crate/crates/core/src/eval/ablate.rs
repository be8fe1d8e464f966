//! Grids over bridge, decoding and loss settings, scored on the test set.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::info;
use serde::{Deserialize, Serialize};

use super::translate::evaluate_cascade;
use crate::cascade::{
    finetune_from_artifacts, load_cascade, load_test, ArtifactPaths, CascadeModel, FinetuneConfig, LossWeights,
    PipelineConfig,
};
use crate::decoding::{BeamConfig, CascadeDecodeConfig, PivotInput};
use crate::error::{Error, Result};
use crate::seed::derive;
use crate::softbridge::{BridgeConfig, CorrectionMode};
use crate::transformer::checkpoint;

/// Values to try per axis. Missing axes keep the run's configured value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub correction: Option<Vec<CorrectionMode>>,
    pub n_pivot: Option<Vec<usize>>,
    pub m_target: Option<Vec<usize>>,
    pub beam: Option<Vec<usize>>,
    pub alpha_train: Option<Vec<f64>>,
    pub alpha_decode: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    /// Artifact directory of a completed pipeline run.
    pub run_dir: PathBuf,
    /// Fine-tuning seeds. The run's own seed reuses its fine-tuned checkpoints.
    pub seeds: Vec<u64>,
    /// Output prefix for `<out>.txt` and `<out>.tsv`.
    pub out: PathBuf,
    #[serde(default)]
    pub grid: Grid,
    /// Only decode the first `limit` test sentences.
    #[serde(default)]
    pub limit: Option<usize>,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// One fully specified grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub correction: CorrectionMode,
    pub n_pivot: usize,
    pub m_target: usize,
    pub beam: usize,
    pub alpha_train: f64,
    pub alpha_decode: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl GridPoint {
    fn base(cfg: &PipelineConfig) -> Self {
        Self {
            correction: cfg.finetune.bridge.correction,
            n_pivot: cfg.decode.n_pivot,
            m_target: cfg.decode.m_target,
            beam: cfg.decode.pivot.beam_size,
            alpha_train: cfg.finetune.bridge.alpha_train,
            alpha_decode: cfg.finetune.bridge.alpha_decode,
            beta: cfg.finetune.weights.beta,
            gamma: cfg.finetune.weights.gamma,
        }
    }

    fn training_key(&self) -> (u64, u64, u64) {
        (self.alpha_train.to_bits(), self.beta.to_bits(), self.gamma.to_bits())
    }

    fn bridge(&self) -> BridgeConfig {
        BridgeConfig {
            alpha_train: self.alpha_train,
            alpha_decode: self.alpha_decode,
            correction: self.correction,
            normalize_after_correction: false,
        }
    }

    fn decode(&self, base: &CascadeDecodeConfig) -> CascadeDecodeConfig {
        let beam = |b: &BeamConfig| BeamConfig {
            beam_size: self.beam,
            ..b.clone()
        };
        CascadeDecodeConfig {
            pivot: beam(&base.pivot),
            target: beam(&base.target),
            n_pivot: self.n_pivot,
            m_target: self.m_target,
            selection: base.selection,
        }
    }
}

/// Cartesian product in axis order correction, n_pivot, m_target, beam,
/// alpha_train, alpha_decode, beta, gamma (last axis varies fastest).
pub fn expand(grid: &Grid, base: &PipelineConfig) -> Result<Vec<GridPoint>> {
    let b = GridPoint::base(base);
    let mut points = vec![b];
    macro_rules! axis {
        ($field:ident) => {
            if let Some(values) = &grid.$field {
                if values.is_empty() {
                    return Err(Error::Config(format!(
                        "grid axis {} is empty",
                        stringify!($field)
                    )));
                }
                points = points
                    .iter()
                    .flat_map(|p| {
                        values.iter().map(move |v| GridPoint {
                            $field: v.clone(),
                            ..p.clone()
                        })
                    })
                    .collect();
            }
        };
    }
    axis!(correction);
    axis!(n_pivot);
    axis!(m_target);
    axis!(beam);
    axis!(alpha_train);
    axis!(alpha_decode);
    axis!(beta);
    axis!(gamma);
    Ok(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub point: GridPoint,
    /// Per seed, in spec order.
    pub bleu: Vec<f64>,
    pub mean: f64,
    pub stdev: f64,
    pub inconsistency_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: String,
    /// Axes that take more than one value.
    pub varied: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// Sample mean and standard deviation (n − 1; zero for one value).
pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn axis_value(p: &GridPoint, axis: &str) -> String {
    match axis {
        "correction" => p.correction.to_string(),
        "n_pivot" => p.n_pivot.to_string(),
        "m_target" => p.m_target.to_string(),
        "beam" => p.beam.to_string(),
        "alpha_train" => p.alpha_train.to_string(),
        "alpha_decode" => p.alpha_decode.to_string(),
        "beta" => p.beta.to_string(),
        _ => p.gamma.to_string(),
    }
}

const AXES: [&str; 8] = [
    "correction",
    "n_pivot",
    "m_target",
    "beam",
    "alpha_train",
    "alpha_decode",
    "beta",
    "gamma",
];

impl AblationTable {
    fn columns(&self) -> Vec<String> {
        let mut cols = self.varied.clone();
        cols.extend(["bleu_mean", "bleu_stdev", "inconsistency_rate", "seeds"].map(String::from));
        cols
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut c: Vec<String> = self.varied.iter().map(|a| axis_value(&r.point, a)).collect();
                c.push(format!("{:.2}", r.mean));
                c.push(format!("{:.2}", r.stdev));
                c.push(format!("{:.4}", r.inconsistency_rate));
                c.push(r.bleu.len().to_string());
                c
            })
            .collect()
    }

    /// Space-aligned text table.
    pub fn to_text(&self) -> String {
        let cols = self.columns();
        let cells = self.cells();
        let widths: Vec<usize> = (0..cols.len())
            .map(|i| cells.iter().map(|r| r[i].len()).chain([cols[i].len()]).max().unwrap())
            .collect();
        let line = |row: &[String]| {
            row.iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = format!("{}\n", self.name);
        writeln!(out, "{}", line(&cols)).unwrap();
        writeln!(
            out,
            "{}",
            widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")
        )
        .unwrap();
        for r in &cells {
            writeln!(out, "{}", line(r)).unwrap();
        }
        out
    }

    /// Tab-separated values with a header row.
    pub fn to_tsv(&self) -> String {
        let mut out = self.columns().join("\t") + "\n";
        for r in self.cells() {
            out.push_str(&r.join("\t"));
            out.push('\n');
        }
        out
    }
}

/// Run `f` over `0..n` on up to `jobs` threads; results in index order.
fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every index ran"))
        .collect()
}

fn cache_dir(paths: &ArtifactPaths, p: &GridPoint, seed: u64) -> PathBuf {
    paths
        .root
        .join("ablate-cache")
        .join(format!("at{}-b{}-g{}-s{seed}", p.alpha_train, p.beta, p.gamma))
}

/// The fine-tuned cascade for `p`'s training settings and `seed`, reusing the
/// run's own checkpoints or a cached model when possible.
fn tuned_model(base: &PipelineConfig, paths: &ArtifactPaths, p: &GridPoint, seed: u64) -> Result<CascadeModel> {
    let b = GridPoint::base(base);
    if seed == base.seed && p.training_key() == b.training_key() {
        return load_cascade(paths, true);
    }
    let dir = cache_dir(paths, p, seed);
    let (sp, pt) = (dir.join("cascade.sp.ckpt"), dir.join("cascade.pt.ckpt"));
    if sp.exists() && pt.exists() {
        return CascadeModel::new(checkpoint::load(&sp)?, checkpoint::load(&pt)?);
    }
    info!("fine-tuning for {:?} seed {seed}", p.training_key());
    let fcfg = FinetuneConfig {
        train: crate::cascade::TrainConfig {
            seed: derive(seed, "finetune"),
            ..base.finetune.train.clone()
        },
        weights: LossWeights {
            beta: p.beta,
            gamma: p.gamma,
        },
        bridge: p.bridge(),
        ..base.finetune.clone()
    };
    let out = finetune_from_artifacts(base, paths, &fcfg)?;
    checkpoint::save(&out.model.sp, &sp)?;
    checkpoint::save(&out.model.pt, &pt)?;
    Ok(out.model)
}

/// Score every grid point for every seed and write `<out>.txt` / `<out>.tsv`.
pub fn ablate(spec: &ExperimentSpec, jobs: usize) -> Result<AblationTable> {
    if spec.seeds.is_empty() {
        return Err(Error::Config("experiment needs at least one seed".into()));
    }
    let paths = ArtifactPaths::new(&spec.run_dir);
    let base = paths.config()?;
    let points = expand(&spec.grid, &base)?;
    let (mut test, _) = load_test(&paths)?;
    if let Some(n) = spec.limit {
        test.truncate(n);
    }

    // Fine-tune each distinct (training settings, seed) once, sequentially
    // per key so cache directories are never written twice.
    let mut keys: Vec<(GridPoint, u64)> = Vec::new();
    for p in &points {
        for &s in &spec.seeds {
            if !keys
                .iter()
                .any(|(q, t)| q.training_key() == p.training_key() && *t == s)
            {
                keys.push((p.clone(), s));
            }
        }
    }
    let models = parallel_map(keys.len(), jobs, |i| tuned_model(&base, &paths, &keys[i].0, keys[i].1))?;

    let tasks: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..spec.seeds.len()).map(move |s| (p, s)))
        .collect();
    let scores = parallel_map(tasks.len(), jobs, |i| {
        let (pi, si) = tasks[i];
        let p = &points[pi];
        let k = keys
            .iter()
            .position(|(q, t)| q.training_key() == p.training_key() && *t == spec.seeds[si])
            .unwrap();
        let bridge = p.bridge();
        let r = evaluate_cascade(&models[k], &test, PivotInput::Soft(&bridge), &p.decode(&base.decode))?;
        Ok((r.bleu, r.inconsistency_rate))
    })?;

    let rows = points
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            let s = &scores[pi * spec.seeds.len()..(pi + 1) * spec.seeds.len()];
            let bleu: Vec<f64> = s.iter().map(|x| x.0).collect();
            let (mean, stdev) = mean_stdev(&bleu);
            let inc = s.iter().map(|x| x.1).sum::<f64>() / s.len() as f64;
            AblationRow {
                point: p.clone(),
                bleu,
                mean,
                stdev,
                inconsistency_rate: inc,
            }
        })
        .collect();
    let varied = AXES
        .iter()
        .filter(|a| {
            let first = axis_value(&points[0], a);
            points.iter().any(|p| axis_value(p, a) != first)
        })
        .map(|a| a.to_string())
        .collect();
    let table = AblationTable {
        name: spec.name.clone(),
        varied,
        rows,
    };
    if let Some(dir) = spec.out.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(spec.out.with_extension("txt"), table.to_text())?;
    fs::write(spec.out.with_extension("tsv"), table.to_tsv())?;
    Ok(table)
}
