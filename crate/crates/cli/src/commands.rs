//! Subcommand implementations. Each one resolves its settings, validates
//! them, does its work, writes outputs under the output directory and
//! finishes with a manifest.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use embedrank::eval::{evaluate_method_with, SweepRow};
use embedrank::{
    alpha_grid, k_sweep, load_dataset, load_model, margin_sweep, rerank_with_cab, save_model,
    synth_generate, train_embednet, train_mlp, write_dataset, write_oracle, CabConfig,
    EmbedNetParams, Method, MlpParams, Model, RerankMode, SweepTable, TextMatch, TrainConfig,
    WordSample, WraReport,
};
use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::cli::{
    CabMode, Cli, Command, EvalArgs, MethodName, RerankArgs, SweepKArgs, SweepMarginArgs,
    SynthArgs, TrainArgs, TrainCommand, TuneAlphaArgs,
};
use crate::settings::{
    usage, write_manifest, ConfigFile, EvalSettings, RerankSettings, SweepKSettings,
    SweepMarginSettings, TrainSettings, TuneAlphaSettings, DEFAULT_OUT_DIR,
};

/// Values shared by every subcommand after resolution.
struct Run {
    file: ConfigFile,
    seed_flag: Option<u64>,
    out_dir: PathBuf,
    threads: Option<usize>,
}

impl Run {
    fn seed(&self, default: u64) -> Result<u64> {
        Ok(match self.seed_flag {
            Some(s) => s,
            None => self.file.seed()?.unwrap_or(default),
        })
    }

    fn manifest<T: Serialize>(&self, key: &str, seed: u64, settings: &T) -> Result<()> {
        let path = write_manifest(&self.out_dir, key, seed, self.threads, settings)?;
        info!("wrote {}", path.display());
        Ok(())
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = ConfigFile::load(cli.config.as_deref())?;
    let out_dir = match cli.out_dir {
        Some(d) => d,
        None => file.out_dir()?.unwrap_or_else(|| DEFAULT_OUT_DIR.into()),
    };
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => file.threads()?,
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    let run = Run {
        file,
        seed_flag: cli.seed,
        out_dir,
        threads,
    };
    let key = cli.command.key();
    match cli.command {
        Command::Synth(a) => synth(&run, key, &a),
        Command::Train(TrainCommand::Embednet(a)) => train(&run, key, &a, true),
        Command::Train(TrainCommand::Mlp(a)) => train(&run, key, &a, false),
        Command::Rerank(a) => rerank(&run, key, &a),
        Command::Eval(a) => eval(&run, key, &a),
        Command::SweepK(a) => sweep_k(&run, key, &a),
        Command::SweepMargin(a) => sweep_margin(&run, key, &a),
        Command::TuneAlpha(a) => tune_alpha(&run, key, &a),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| {
        usage(format!(
            "missing required {what} path (--{what} or config file)"
        ))
    })
}

fn load_split(path: &Path) -> Result<Vec<WordSample>> {
    let (samples, report) = load_dataset(path).context("cannot load dataset")?;
    if report.clamped_confidences > 0 {
        warn!(
            "{}: clamped {} confidences into [0, 1]",
            path.display(),
            report.clamped_confidences
        );
    }
    if samples.is_empty() {
        anyhow::bail!("dataset {} has no samples", path.display());
    }
    info!("loaded {} samples from {}", samples.len(), path.display());
    Ok(samples)
}

fn load_any_model(path: &Path) -> Result<Model> {
    Ok(load_model(path).context("cannot load model")?.model)
}

fn load_embednet(path: &Path) -> Result<EmbedNetParams> {
    match load_any_model(path)? {
        Model::EmbedNet(m) => Ok(m),
        Model::Mlp(_) => anyhow::bail!("{} holds an MLP, expected an EmbedNet", path.display()),
    }
}

fn load_mlp(path: &Path) -> Result<MlpParams> {
    match load_any_model(path)? {
        Model::Mlp(m) => Ok(m),
        Model::EmbedNet(_) => {
            anyhow::bail!("{} holds an EmbedNet, expected an MLP", path.display())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn validate_train(cfg: &TrainConfig) -> Result<()> {
    cfg.validate().map_err(|e| usage(e.to_string()))
}

fn synth(run: &Run, key: &str, args: &SynthArgs) -> Result<()> {
    let mut cfg = run
        .file
        .resolve(key, embedrank::SynthConfig::default(), args)?;
    cfg.seed = run.seed(cfg.seed)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ds = synth_generate(&cfg)?;
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        write_dataset(&split.samples, &run.out(&format!("{name}.jsonl")))?;
        write_oracle(split, &run.out(&format!("oracle-{name}.tsv")))?;
    }
    println!(
        "wrote {} / {} / {} samples (K={}, dim={}) to {}",
        cfg.n_train,
        cfg.n_val,
        cfg.n_test,
        cfg.k,
        cfg.dim,
        run.out_dir.display()
    );
    run.manifest(key, cfg.seed, &cfg)
}

fn train(run: &Run, key: &str, args: &TrainArgs, embednet: bool) -> Result<()> {
    let defaults = TrainSettings {
        train: None,
        val: None,
        config: if embednet {
            TrainConfig::embednet_default()
        } else {
            TrainConfig::mlp_default()
        },
    };
    let mut s: TrainSettings = run.file.resolve(key, defaults, args)?;
    s.config.seed = run.seed(s.config.seed)?;
    validate_train(&s.config)?;
    let train_path = required(&s.train, "train")?;
    let val_path = required(&s.val, "val")?;
    let (train, val) = (load_split(train_path)?, load_split(val_path)?);
    let name = if embednet { "embednet" } else { "mlp" };
    let (model, history) = if embednet {
        let (m, h) = train_embednet(&train, &val, &s.config)?;
        (Model::EmbedNet(m), h)
    } else {
        let (m, h) = train_mlp(&train, &val, &s.config)?;
        (Model::Mlp(m), h)
    };
    let model_path = run.out(&format!("{name}.model"));
    save_model(&model_path, &model, Some(&s.config))?;
    history.write_tsv(&run.out(&format!("{name}.history.tsv")))?;
    let best = history.best().expect("training records at least one epoch");
    println!(
        "{name}: {} epochs, best epoch {} (val loss {:.6}); model {}",
        history.records.len(),
        history.best_epoch,
        best.val_loss,
        model_path.display()
    );
    run.manifest(key, s.config.seed, &s)
}

fn rerank(run: &Run, key: &str, args: &RerankArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Flags<'a> {
        #[serde(flatten)]
        args: &'a RerankArgs,
        #[serde(skip_serializing_if = "Option::is_none")]
        cab_enabled: Option<bool>,
    }
    let flags = Flags {
        args,
        cab_enabled: args.no_cab.then_some(false),
    };
    let s: RerankSettings = run.file.resolve(key, RerankSettings::default(), &flags)?;
    let cab = if s.cab_enabled {
        CabConfig::new(s.alpha).map_err(|e| usage(e.to_string()))?
    } else {
        CabConfig::disabled()
    };
    if s.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let samples = load_split(required(&s.data, "data")?)?;
    let model = s.model.as_deref().map(load_any_model).transpose()?;
    let mode = match &model {
        None => RerankMode::Raw,
        Some(Model::EmbedNet(m)) => RerankMode::EmbedNet(m),
        Some(Model::Mlp(m)) => RerankMode::Mlp(m),
    };
    let lists = samples
        .par_iter()
        .map(|x| rerank_with_cab(x, mode, s.k, &cab))
        .collect::<embedrank::Result<Vec<_>>>()?;
    let path = run.out("rankings.jsonl");
    let f = fs::File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut w = BufWriter::new(f);
    for l in &lists {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("ranked {} samples into {}", lists.len(), path.display());
    let seed = run.seed(0)?;
    run.manifest(key, seed, &s)
}

/// Models named by an evaluation command, loaded once.
struct Models {
    embednet: Option<EmbedNetParams>,
    mlp: Option<MlpParams>,
}

impl Models {
    fn load(embednet: &Option<PathBuf>, mlp: &Option<PathBuf>) -> Result<Self> {
        Ok(Models {
            embednet: embednet.as_deref().map(load_embednet).transpose()?,
            mlp: mlp.as_deref().map(load_mlp).transpose()?,
        })
    }

    fn method(&self, name: MethodName) -> Result<Method<'_>> {
        Ok(match name {
            MethodName::Crnn => Method::CrnnTop1,
            MethodName::Raw => Method::Raw,
            MethodName::Mlp => Method::Mlp(
                self.mlp
                    .as_ref()
                    .ok_or_else(|| usage("method mlp needs a model (--mlp)"))?,
            ),
            MethodName::Embednet => Method::EmbedNet(
                self.embednet
                    .as_ref()
                    .ok_or_else(|| usage("method embednet needs a model (--embednet)"))?,
            ),
        })
    }

    /// Every (method, fusion) pair to report. The recognizer baseline is
    /// listed once since fusion does not apply to it.
    fn plan(
        &self,
        names: &Option<Vec<MethodName>>,
        cab: CabMode,
        alpha: f64,
    ) -> Result<Vec<(Method<'_>, CabConfig)>> {
        let on = CabConfig::new(alpha).map_err(|e| usage(e.to_string()))?;
        let names = match names {
            Some(n) if n.is_empty() => return Err(usage("--methods is empty")),
            Some(n) => n.clone(),
            None => {
                let mut n = vec![MethodName::Crnn, MethodName::Raw];
                if self.mlp.is_some() {
                    n.push(MethodName::Mlp);
                }
                if self.embednet.is_some() {
                    n.push(MethodName::Embednet);
                }
                n
            }
        };
        let mut plan = Vec::new();
        for name in names {
            let m = self.method(name)?;
            if name == MethodName::Crnn {
                plan.push((m, CabConfig::disabled()));
                continue;
            }
            if matches!(cab, CabMode::Off | CabMode::Both) {
                plan.push((m, CabConfig::disabled()));
            }
            if matches!(cab, CabMode::On | CabMode::Both) {
                plan.push((m, on));
            }
        }
        Ok(plan)
    }
}

fn text_match(normalize: bool) -> TextMatch {
    if normalize {
        TextMatch::TrimLowercase
    } else {
        TextMatch::Exact
    }
}

fn report_table(reports: &[WraReport]) -> String {
    let mut out = format!(
        "{:<14} {:>4} {:>6} {:>10} {:>12}\n",
        "method", "K", "alpha", "WRA", "correct"
    );
    for r in reports {
        let alpha = r
            .alpha
            .map(|a| format!("{a}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<14} {:>4} {:>6} {:>10.3} {:>12}",
            r.method,
            r.k,
            alpha,
            r.wra,
            format!("{}/{}", r.correct, r.total)
        );
    }
    out
}

fn eval(run: &Run, key: &str, args: &EvalArgs) -> Result<()> {
    let s: EvalSettings = run.file.resolve(key, EvalSettings::default(), args)?;
    if s.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let data = required(&s.data, "data")?;
    let models = Models::load(&s.embednet, &s.mlp)?;
    let plan = models.plan(&s.methods, s.cab, s.alpha)?;
    let samples = load_split(data)?;
    let reports = plan
        .iter()
        .map(|(m, cab)| evaluate_method_with(&samples, *m, cab, s.k, text_match(s.normalize_text)))
        .collect::<embedrank::Result<Vec<_>>>()?;
    let json = run.out("eval.json");
    write_text(&json, &(serde_json::to_string_pretty(&reports)? + "\n"))?;
    let table = report_table(&reports);
    write_text(&run.out("eval.txt"), &table)?;
    print!("{table}");
    let seed = run.seed(0)?;
    run.manifest(key, seed, &s)
}

fn write_sweep(run: &Run, stem: &str, table: &SweepTable) -> Result<()> {
    let text = table.to_text();
    write_text(&run.out(&format!("{stem}.txt")), &text)?;
    table.write_rows(&run.out(&format!("{stem}.jsonl")))?;
    print!("{text}");
    Ok(())
}

fn sweep_k(run: &Run, key: &str, args: &SweepKArgs) -> Result<()> {
    let s: SweepKSettings = run.file.resolve(key, SweepKSettings::default(), args)?;
    let data = required(&s.data, "data")?;
    if s.ks.is_empty() || s.ks.contains(&0) || s.ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(usage("--ks must be nonempty, strictly increasing and >= 1"));
    }
    let models = Models::load(&s.embednet, &s.mlp)?;
    let plan = models.plan(&s.methods, s.cab, s.alpha)?;
    let samples = load_split(data)?;
    let matching = text_match(s.normalize_text);
    let table = if matching == TextMatch::Exact {
        k_sweep(&samples, &plan, &s.ks)?
    } else {
        let rows =
            s.ks.iter()
                .map(|&k| {
                    Ok(SweepRow {
                        value: k as f64,
                        reports: plan
                            .iter()
                            .map(|(m, cab)| evaluate_method_with(&samples, *m, cab, k, matching))
                            .collect::<embedrank::Result<_>>()?,
                    })
                })
                .collect::<embedrank::Result<_>>()?;
        SweepTable {
            axis: "K".into(),
            rows,
        }
    };
    write_sweep(run, "sweep-k", &table)?;
    let seed = run.seed(0)?;
    run.manifest(key, seed, &s)
}

fn sweep_margin(run: &Run, key: &str, args: &SweepMarginArgs) -> Result<()> {
    let mut s: SweepMarginSettings = run
        .file
        .resolve(key, SweepMarginSettings::default(), args)?;
    s.config.seed = run.seed(s.config.seed)?;
    validate_train(&s.config)?;
    if s.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    if s.gammas.is_empty()
        || s.gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite()))
        || s.gammas.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(usage(
            "--gammas must be nonempty, strictly increasing and >= 0",
        ));
    }
    let train = load_split(required(&s.train, "train")?)?;
    let val = load_split(required(&s.val, "val")?)?;
    let (best, table, models) = margin_sweep(&train, &val, &s.gammas, &s.config, s.k)?;
    write_sweep(run, "sweep-margin", &table)?;
    let idx = s
        .gammas
        .iter()
        .position(|g| *g == best)
        .expect("best margin is in the grid");
    let cfg = TrainConfig {
        margin: embedrank::Margin::new(best)?,
        ..s.config.clone()
    };
    let path = run.out("sweep-margin-best.model");
    save_model(&path, &Model::EmbedNet(models[idx].clone()), Some(&cfg))?;
    println!("best margin {best}; model {}", path.display());
    run.manifest(key, s.config.seed, &s)
}

fn tune_alpha(run: &Run, key: &str, args: &TuneAlphaArgs) -> Result<()> {
    let s: TuneAlphaSettings = run.file.resolve(key, TuneAlphaSettings::default(), args)?;
    if s.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    if s.alphas.is_empty()
        || s.alphas.iter().any(|a| !(0.0..1.0).contains(a))
        || s.alphas.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(usage(
            "--alphas must be nonempty, strictly increasing and in [0, 1)",
        ));
    }
    let models = match s.method {
        MethodName::Crnn => return Err(usage("fusion does not apply to the crnn method")),
        MethodName::Raw => Models {
            embednet: None,
            mlp: None,
        },
        MethodName::Mlp => Models::load(&None, &Some(required(&s.model, "model")?.to_path_buf()))?,
        MethodName::Embednet => {
            Models::load(&Some(required(&s.model, "model")?.to_path_buf()), &None)?
        }
    };
    let method = models.method(s.method)?;
    let val = load_split(required(&s.val, "val")?)?;
    let (best, table) = alpha_grid(&val, method, s.k, &s.alphas)?;
    write_sweep(run, "tune-alpha", &table)?;
    println!("best alpha {best}");
    let seed = run.seed(0)?;
    run.manifest(key, seed, &s)
}
