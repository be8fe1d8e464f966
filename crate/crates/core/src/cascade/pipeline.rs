//! Resumable end-to-end run: data, pretraining, pseudo-pivots, fine-tuning,
//! evaluation. Each step reads its inputs from and writes its outputs to an
//! artifact directory:
//!
//! ```text
//! corpora/      text corpora and vocabularies
//! checkpoints/  sp, pt, direct, cascade.sp, cascade.pt
//! reports/      JSON loss curves and test scores
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use super::train::{
    encode_pairs, finetune, generate_pseudo_pivot, pretrain, FinetuneConfig, FinetuneOutcome, Pair, TrainConfig,
};
use super::{CascadeModel, TrilingualExample};
use crate::data::{
    generate_synthetic, read_corpus, read_trilingual, write_corpus, write_trilingual, ParallelCorpus,
    SyntheticTaskSpec, TrilingualCorpus, Vocab,
};
use crate::decoding::{BeamConfig, CascadeDecodeConfig, PivotInput};
use crate::error::{Error, Result};
use crate::eval::{evaluate_cascade, evaluate_direct, TestReport};
use crate::seed::derive;
use crate::transformer::{checkpoint, TransformerConfig, TransformerModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Run seed for initialization, batching and dropout. The data has its own
    /// seed in `data.seed`.
    pub seed: u64,
    pub data: SyntheticTaskSpec,
    /// Architecture shared by every model; vocabulary sizes are filled in from
    /// the data.
    pub model: TransformerConfig,
    pub pretrain: TrainConfig,
    pub pseudo_pivot: BeamConfig,
    pub finetune: FinetuneConfig,
    pub decode: CascadeDecodeConfig,
    /// Also train a source→target model on the scarce direct data.
    pub train_direct: bool,
    /// Validation sentences used for BLEU during fine-tuning.
    pub finetune_valid_sentences: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: SyntheticTaskSpec::default(),
            model: TransformerConfig::default(),
            pretrain: TrainConfig::default(),
            pseudo_pivot: BeamConfig::default(),
            finetune: FinetuneConfig::default(),
            decode: CascadeDecodeConfig::default(),
            train_direct: true,
            finetune_valid_sentences: 100,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable hash of the serialized config.
    pub fn hash(&self) -> u64 {
        derive(0, &self.to_toml())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate(Some(self.model.max_len))?;
        self.pretrain.validate()?;
        self.finetune.train.validate()?;
        self.finetune.bridge.validate()?;
        self.pseudo_pivot.validate()?;
        if self.pseudo_pivot.max_len < self.data.max_len + 1 || self.pseudo_pivot.max_len >= self.model.max_len {
            return Err(Error::Config(format!(
                "pseudo_pivot.max_len must lie in {}..{}",
                self.data.max_len + 1,
                self.model.max_len
            )));
        }
        Ok(())
    }

    pub fn train_cfg(&self, base: &TrainConfig, label: &str) -> TrainConfig {
        TrainConfig {
            seed: derive(self.seed, label),
            ..base.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Step {
    GenData,
    Pretrain,
    PseudoPivot,
    Finetune,
    Evaluate,
}

impl Step {
    pub const ALL: [Step; 5] = [
        Step::GenData,
        Step::Pretrain,
        Step::PseudoPivot,
        Step::Finetune,
        Step::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Step::GenData => "gen-data",
            Step::Pretrain => "pretrain",
            Step::PseudoPivot => "pseudo-pivot",
            Step::Finetune => "finetune",
            Step::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Step {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown step {s:?}")))
    }
}

/// File layout under an artifact root.
#[derive(Clone, Debug)]
pub struct ArtifactPaths {
    pub root: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Prefix for `<name>.src` / `.piv` / `.tgt`.
    pub fn corpus(&self, name: &str) -> PathBuf {
        self.root.join("corpora").join(name)
    }

    pub fn vocab(&self, side: &str) -> PathBuf {
        self.root.join("corpora").join(format!("{side}.vocab"))
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    /// Read the config a run was started with.
    pub fn config(&self) -> Result<PipelineConfig> {
        PipelineConfig::load(&require(self.root.join("config.toml"), "config")?)
    }

    /// Files whose presence marks `step` as done.
    pub fn outputs(&self, step: Step, cfg: &PipelineConfig) -> Vec<PathBuf> {
        match step {
            Step::GenData => vec![self.vocab("tgt"), self.corpus("test").with_extension("tgt")],
            Step::Pretrain => {
                let mut v = vec![self.checkpoint("sp"), self.checkpoint("pt")];
                if cfg.train_direct {
                    v.push(self.checkpoint("direct"));
                }
                v
            }
            Step::PseudoPivot => vec![
                self.corpus("st_pseudo").with_extension("tgt"),
                self.corpus("st_valid_pseudo").with_extension("tgt"),
            ],
            Step::Finetune => vec![self.checkpoint("cascade.sp"), self.checkpoint("cascade.pt")],
            Step::Evaluate => vec![self.report("eval")],
        }
    }
}

fn require(path: PathBuf, step: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { step, path })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub direct: Option<TestReport>,
    pub pivot: TestReport,
    pub cascade: TestReport,
}

#[derive(Clone, Debug, Default)]
pub struct PipelineReport {
    pub ran: Vec<Step>,
    pub skipped: Vec<Step>,
    pub eval: Option<EvalSummary>,
}

struct Vocabs {
    src: Vocab,
    piv: Vocab,
    tgt: Vocab,
}

fn load_vocabs(paths: &ArtifactPaths, step: &'static str) -> Result<Vocabs> {
    Ok(Vocabs {
        src: Vocab::read(&require(paths.vocab("src"), step)?)?,
        piv: Vocab::read(&require(paths.vocab("piv"), step)?)?,
        tgt: Vocab::read(&require(paths.vocab("tgt"), step)?)?,
    })
}

fn load_corpus(paths: &ArtifactPaths, name: &str, step: &'static str) -> Result<ParallelCorpus> {
    let prefix = paths.corpus(name);
    require(prefix.with_extension("src"), step)?;
    read_corpus(&prefix)
}

fn load_checkpoint(paths: &ArtifactPaths, name: &str, step: &'static str) -> Result<TransformerModel> {
    checkpoint::load(&require(paths.checkpoint(name), step)?)
}

fn gen_data(cfg: &PipelineConfig, paths: &ArtifactPaths) -> Result<()> {
    let task = generate_synthetic(&cfg.data)?;
    fs::create_dir_all(paths.root.join("corpora"))?;
    for (name, c) in [
        ("sp", &task.sp),
        ("pt", &task.pt),
        ("st", &task.st),
        ("sp_valid", &task.sp_valid),
        ("pt_valid", &task.pt_valid),
        ("st_valid", &task.st_valid),
        ("test", &task.st_test),
    ] {
        write_corpus(&paths.corpus(name), c)?;
    }
    let src = Vocab::build(task.sp.src.iter().chain(&task.st.src).map(String::as_str));
    let piv = Vocab::build(task.sp.tgt.iter().chain(&task.pt.src).map(String::as_str));
    let tgt = Vocab::build(task.pt.tgt.iter().chain(&task.st.tgt).map(String::as_str));
    src.write(&paths.vocab("src"))?;
    piv.write(&paths.vocab("piv"))?;
    tgt.write(&paths.vocab("tgt"))
}

fn pretrain_step(cfg: &PipelineConfig, paths: &ArtifactPaths) -> Result<()> {
    const STEP: &str = "pretrain";
    let v = load_vocabs(paths, STEP)?;
    let mut jobs = vec![("sp", "sp", &v.src, &v.piv), ("pt", "pt", &v.piv, &v.tgt)];
    if cfg.train_direct {
        jobs.push(("direct", "st", &v.src, &v.tgt));
    }
    for (name, corpus, sv, tv) in jobs {
        let train = encode_pairs(&load_corpus(paths, corpus, STEP)?, sv, tv);
        let valid = encode_pairs(&load_corpus(paths, &format!("{corpus}_valid"), STEP)?, sv, tv);
        let mcfg = TransformerConfig {
            src_vocab_size: sv.len(),
            tgt_vocab_size: tv.len(),
            ..cfg.model.clone()
        };
        let init = TransformerModel::init(mcfg, derive(cfg.seed, &format!("{name}/init")))?;
        info!(
            "pretraining {name}: {} parameters, {} pairs",
            init.num_parameters(),
            train.len()
        );
        let out = pretrain(init, &train, &valid, &cfg.train_cfg(&cfg.pretrain, name))?;
        checkpoint::save(&out.model, &paths.checkpoint(name))?;
        write_json(&paths.report(&format!("pretrain.{name}")), &out.curve)?;
    }
    Ok(())
}

fn pseudo_pivot_step(cfg: &PipelineConfig, paths: &ArtifactPaths) -> Result<()> {
    const STEP: &str = "pseudo-pivot";
    let v = load_vocabs(paths, STEP)?;
    let sp = load_checkpoint(paths, "sp", STEP)?;
    for (name, out) in [("st", "st_pseudo"), ("st_valid", "st_valid_pseudo")] {
        let c = load_corpus(paths, name, STEP)?;
        let srcs: Vec<Vec<usize>> = c.src.iter().map(|s| v.src.encode(s)).collect();
        let piv = generate_pseudo_pivot(&sp, &srcs, &cfg.pseudo_pivot)?;
        let tri = TrilingualCorpus {
            src: c.src.clone(),
            piv: piv.iter().map(|p| v.piv.decode(p)).collect(),
            tgt: c.tgt.clone(),
        };
        write_trilingual(&paths.corpus(out), &tri)?;
    }
    Ok(())
}

fn load_triples(paths: &ArtifactPaths, name: &str, v: &Vocabs, step: &'static str) -> Result<Vec<TrilingualExample>> {
    let prefix = paths.corpus(name);
    require(prefix.with_extension("piv"), step)?;
    let c = read_trilingual(&prefix)?;
    Ok((0..c.len())
        .map(|i| TrilingualExample {
            src: v.src.encode(&c.src[i]),
            piv: v.piv.encode(&c.piv[i]),
            tgt: v.tgt.encode(&c.tgt[i]),
        })
        .collect())
}

/// Fine-tune the pretrained halves under `root` with `fcfg`.
pub fn finetune_from_artifacts(
    cfg: &PipelineConfig,
    paths: &ArtifactPaths,
    fcfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    const STEP: &str = "finetune";
    let v = load_vocabs(paths, STEP)?;
    let cm = load_cascade(paths, false)?;
    let train = load_triples(paths, "st_pseudo", &v, STEP)?;
    let mut valid = load_triples(paths, "st_valid_pseudo", &v, STEP)?;
    valid.truncate(cfg.finetune_valid_sentences.max(1));
    finetune(cm, &train, &valid, fcfg)
}

fn finetune_step(cfg: &PipelineConfig, paths: &ArtifactPaths) -> Result<()> {
    let fcfg = FinetuneConfig {
        train: cfg.train_cfg(&cfg.finetune.train, "finetune"),
        ..cfg.finetune.clone()
    };
    let out = finetune_from_artifacts(cfg, paths, &fcfg)?;
    checkpoint::save(&out.model.sp, &paths.checkpoint("cascade.sp"))?;
    checkpoint::save(&out.model.pt, &paths.checkpoint("cascade.pt"))?;
    write_json(&paths.report("finetune"), &out.curve)
}

/// The pretrained (`tuned = false`) or fine-tuned cascade under `paths`.
pub fn load_cascade(paths: &ArtifactPaths, tuned: bool) -> Result<CascadeModel> {
    const STEP: &str = "evaluate";
    let (a, b) = if tuned {
        ("cascade.sp", "cascade.pt")
    } else {
        ("sp", "pt")
    };
    CascadeModel::new(load_checkpoint(paths, a, STEP)?, load_checkpoint(paths, b, STEP)?)
}

/// Test pairs in id form.
pub fn load_test(paths: &ArtifactPaths) -> Result<(Vec<Pair>, Vocab)> {
    const STEP: &str = "evaluate";
    let v = load_vocabs(paths, STEP)?;
    let test = encode_pairs(&load_corpus(paths, "test", STEP)?, &v.src, &v.tgt);
    Ok((test, v.tgt))
}

fn evaluate_step(cfg: &PipelineConfig, paths: &ArtifactPaths) -> Result<EvalSummary> {
    const STEP: &str = "evaluate";
    let (test, _) = load_test(paths)?;
    let direct = if cfg.train_direct {
        let m = load_checkpoint(paths, "direct", STEP)?;
        Some(evaluate_direct(&m, &test, &cfg.decode.target)?)
    } else {
        None
    };
    let base = load_cascade(paths, false)?;
    let tuned = load_cascade(paths, true)?;
    let summary = EvalSummary {
        direct,
        pivot: evaluate_cascade(&base, &test, PivotInput::Hard, &cfg.decode)?,
        cascade: evaluate_cascade(&tuned, &test, PivotInput::Soft(&cfg.finetune.bridge), &cfg.decode)?,
    };
    write_json(&paths.report("eval"), &summary)?;
    Ok(summary)
}

/// Run `steps` in order. A step whose outputs already exist is skipped unless
/// `force` is set; a step whose inputs are missing fails with
/// [`Error::MissingArtifact`].
pub fn run_pipeline(cfg: &PipelineConfig, root: &Path, steps: &[Step], force: bool) -> Result<PipelineReport> {
    cfg.validate()?;
    let paths = ArtifactPaths::new(root);
    fs::create_dir_all(root)?;
    fs::write(root.join("config.toml"), cfg.to_toml())?;
    let mut report = PipelineReport::default();
    for &step in steps {
        if !force && paths.outputs(step, cfg).iter().all(|p| p.exists()) {
            info!("{step}: outputs present, skipping");
            report.skipped.push(step);
            continue;
        }
        info!("{step}: running");
        match step {
            Step::GenData => gen_data(cfg, &paths)?,
            Step::Pretrain => pretrain_step(cfg, &paths)?,
            Step::PseudoPivot => pseudo_pivot_step(cfg, &paths)?,
            Step::Finetune => finetune_step(cfg, &paths)?,
            Step::Evaluate => report.eval = Some(evaluate_step(cfg, &paths)?),
        }
        report.ran.push(step);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::AdamConfig;

    fn small() -> PipelineConfig {
        let train = TrainConfig {
            steps: 4,
            max_tokens: 64,
            optim: AdamConfig {
                peak_lr: 1e-3,
                warmup_steps: 2,
                ..Default::default()
            },
            eval_every: 2,
            seed: 0,
        };
        PipelineConfig {
            data: SyntheticTaskSpec {
                latent_vocab_size: 5,
                min_len: 1,
                max_len: 3,
                sp_size: 20,
                pt_size: 20,
                st_size: 10,
                valid_size: 4,
                test_size: 4,
                ..Default::default()
            },
            model: TransformerConfig {
                num_layers: 1,
                d_model: 8,
                num_heads: 2,
                d_ff: 16,
                max_len: 6,
                ..Default::default()
            },
            pretrain: train.clone(),
            pseudo_pivot: BeamConfig {
                beam_size: 2,
                max_len: 5,
                ..Default::default()
            },
            finetune: FinetuneConfig {
                train,
                max_decode_len: 5,
                ..Default::default()
            },
            decode: CascadeDecodeConfig {
                pivot: BeamConfig {
                    beam_size: 2,
                    max_len: 5,
                    ..Default::default()
                },
                target: BeamConfig {
                    beam_size: 2,
                    max_len: 5,
                    ..Default::default()
                },
                ..Default::default()
            },
            finetune_valid_sentences: 3,
            ..Default::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = small();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.hash(), small().hash());
        let partial = PipelineConfig::from_toml("seed = 9\n[data]\nst_size = 50\n").unwrap();
        assert_eq!((partial.seed, partial.data.st_size), (9, 50));
        assert_eq!(partial.data.sp_size, SyntheticTaskSpec::default().sp_size);
        assert!(matches!(
            PipelineConfig::from_toml("seed = \"x\""),
            Err(Error::Config(_))
        ));
        let ft = PipelineConfig::from_toml("[finetune.train]\nsteps = 5\n[finetune.train.optim]\nclip_norm = 2.0\n")
            .unwrap()
            .finetune
            .train;
        let d = FinetuneConfig::default().train;
        assert_eq!(ft.steps, 5);
        assert_eq!(ft.optim.clip_norm, 2.0);
        assert_eq!(
            (ft.optim.peak_lr, ft.optim.warmup_steps),
            (d.optim.peak_lr, d.optim.warmup_steps)
        );
    }

    #[test]
    fn missing_inputs_name_the_artifact() {
        let dir = tempfile::tempdir().unwrap();
        match run_pipeline(&small(), dir.path(), &[Step::Finetune], false) {
            Err(Error::MissingArtifact { step, path }) => {
                assert_eq!(step, "finetune");
                assert!(path.ends_with("src.vocab"), "{path:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn full_run_then_resume() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let r = run_pipeline(&cfg, dir.path(), &Step::ALL, false).unwrap();
        assert_eq!(r.ran, Step::ALL.to_vec());
        let eval = r.eval.unwrap();
        assert_eq!(eval.cascade.sentences, 4);
        assert!(eval.direct.is_some());
        for name in ["sp", "pt", "direct", "cascade.sp", "cascade.pt"] {
            assert!(ArtifactPaths::new(dir.path()).checkpoint(name).exists(), "{name}");
        }
        let again = run_pipeline(&cfg, dir.path(), &Step::ALL, false).unwrap();
        assert_eq!(again.skipped, Step::ALL.to_vec());
        let saved: EvalSummary =
            serde_json::from_str(&fs::read_to_string(dir.path().join("reports/eval.json")).unwrap()).unwrap();
        assert_eq!(saved.cascade.bleu, eval.cascade.bleu);
    }
}
