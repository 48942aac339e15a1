use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qbayes::eval::{self, MetricReport};
use qbayes::quantile::{
    contour_sets_with_features, convex_hull_2d, coordinate_pairs, hull_records, sample_credible_set,
    sample_directions, sample_posterior, write_hulls_json, write_samples_csv, HullRecord,
};
use qbayes::training::{multi_restart_train_with, RestartOutcome};
use qbayes::{io, DataMatrix, PotentialModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{self, AnySimulator, ExperimentConfig, LoadedConfig, Metric, SimulatorBlock};

pub const OUT_ENV: &str = "QBAYES_OUT";

/// Independent random streams derived from one seed.
#[derive(Clone, Copy)]
pub enum Stream {
    Observed = 1,
    Sampling = 2,
    Evaluation = 3,
    Directions = 4,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// `--out`, then the config's `output_dir`, then `$QBAYES_OUT/<name>`, then
/// `qbayes-out/<name>`.
pub fn resolve_out(flag: Option<&Path>, cfg: Option<&ExperimentConfig>, name: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = cfg.and_then(|c| c.output_dir.clone()) {
        return p;
    }
    let root = std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("qbayes-out"));
    root.join(name)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'a str,
    version: &'a str,
    format_version: u32,
    command: &'a str,
    seed: u64,
    paper_scale: bool,
    config_sha256: Option<String>,
    config_path: Option<String>,
    config: Option<&'a str>,
    args: Vec<String>,
    files: Vec<String>,
}

/// Files written by one command, recorded in its manifest.
struct OutDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    fn create(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn writer(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(name.to_string());
        Ok(BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        ))
    }

    fn path(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(name.to_string());
        Ok(path)
    }

    fn finish(mut self, command: &str, seed: u64, paper_scale: bool, cfg: Option<&LoadedConfig>) -> Result<PathBuf> {
        self.files.sort();
        let manifest = Manifest {
            tool: "qbayes",
            version: env!("CARGO_PKG_VERSION"),
            format_version: io::FORMAT_VERSION,
            command,
            seed,
            paper_scale,
            config_sha256: cfg.map(|c| c.sha256()),
            config_path: cfg.map(|c| c.path.display().to_string()),
            config: cfg.map(|c| c.text.as_str()),
            args: std::env::args().skip(1).collect(),
            files: self.files.clone(),
        };
        let path = self.dir.join("manifest.json");
        let mut f = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(self.dir)
    }
}

fn read_x_file(path: &Path) -> Result<DataMatrix> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (_, rows) = io::read_matrix_csv(f).with_context(|| format!("reading {}", path.display()))?;
    if rows.is_empty() {
        bail!("{} has no observations", path.display());
    }
    let d_x = rows[0].len();
    Ok(DataMatrix::from_observations(d_x, rows.concat())?)
}

/// Observed data described by the evaluation block.
pub fn observed_from_config(cfg: &ExperimentConfig, sim: &AnySimulator, seed: u64) -> Result<DataMatrix> {
    let e = &cfg.evaluation;
    let s = sim.as_dyn();
    let x = if let Some(v) = e.x {
        if s.d_x() != 1 {
            bail!("evaluation.x: a replicated scalar needs d_x = 1, the simulator has d_x = {}", s.d_x());
        }
        DataMatrix::replicated(v, s.n())
    } else if let Some(p) = &e.x_file {
        read_x_file(p)?
    } else if let Some(t) = &e.theta_star {
        s.simulate(t, &mut rng_for(seed, Stream::Observed))
            .context("simulating the observed data at evaluation.theta_star")?
    } else {
        bail!("evaluation: one of x, x_file or theta_star is required to condition on data");
    };
    check_observed(&x, s.d_x(), Some(s.n()))?;
    Ok(x)
}

fn check_observed(x: &DataMatrix, d_x: usize, n: Option<usize>) -> Result<()> {
    if x.d_x() != d_x {
        bail!("observed data has {} columns, expected d_x = {d_x}", x.d_x());
    }
    if let Some(n) = n {
        if x.n() != n {
            bail!("observed data has {} rows, expected n = {n}", x.n());
        }
    }
    Ok(())
}

fn write_csv_rows<S: AsRef<str>>(out: &mut OutDir, name: &str, header: &[S], rows: &[Vec<f64>]) -> Result<()> {
    let header: Vec<String> = header.iter().map(|s| s.as_ref().to_string()).collect();
    io::write_matrix_csv(out.writer(name)?, &header, rows)?;
    Ok(())
}

fn train_model(
    cfg: &ExperimentConfig,
    sim: &AnySimulator,
    out: &mut OutDir,
    prefix: &str,
) -> Result<RestartOutcome> {
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config();
    let every = cfg.training.checkpoint_every;
    let mut checkpoints = Vec::new();
    let outcome = multi_restart_train_with(&model_cfg, sim.as_dyn(), &train_cfg, &mut |r, rec, model| {
        if let Some(k) = every {
            if k > 0 && rec.epoch % k == 0 {
                let name = format!("{prefix}checkpoints/restart{r}_epoch{}.json", rec.epoch);
                let path = out.dir.join(&name);
                fs::create_dir_all(path.parent().expect("has parent"))?;
                model.save(&path)?;
                checkpoints.push(name);
            }
        }
        Ok(())
    })?;
    out.files.extend(checkpoints);
    outcome.model.save(out.path(&format!("{prefix}model.json"))?)?;
    outcome.history.write_csv(out.writer(&format!("{prefix}loss.csv"))?)?;
    let rows: Vec<Vec<f64>> = outcome
        .seeds
        .iter()
        .zip(&outcome.heldout)
        .enumerate()
        .map(|(r, (s, l))| {
            vec![
                r as f64,
                *s as f64,
                l.unwrap_or(f64::NAN),
                if r == outcome.selected { 1.0 } else { 0.0 },
            ]
        })
        .collect();
    write_csv_rows(out, &format!("{prefix}restarts.csv"), &["restart", "seed", "heldout_loss", "selected"], &rows)?;
    Ok(outcome)
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub out: Option<&'a Path>,
    pub seed: Option<u64>,
    pub paper_scale: bool,
}

pub fn cmd_train(args: TrainArgs<'_>) -> Result<PathBuf> {
    let loaded = config::load(args.config)?;
    let mut cfg = loaded.config.clone();
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.paper_scale {
        cfg.apply_paper_scale();
    }
    let sim = cfg.simulator.build()?;
    let mut out = OutDir::create(resolve_out(args.out, Some(&cfg), &cfg.name))?;
    let outcome = train_model(&cfg, &sim, &mut out, "")?;
    eprintln!(
        "trained {} restart(s); selected restart {} (held-out loss {:.6})",
        outcome.seeds.len(),
        outcome.selected,
        outcome.heldout[outcome.selected].unwrap_or(f64::NAN)
    );
    out.finish("train", cfg.seed, args.paper_scale, Some(&loaded))
}

pub struct SampleArgs<'a> {
    pub model: &'a Path,
    pub config: Option<&'a Path>,
    pub x: Option<f64>,
    pub n: Option<usize>,
    pub x_file: Option<&'a Path>,
    pub count: usize,
    pub tau: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
}

/// The config recorded in the manifest written next to a trained model, if any.
fn config_beside(model: &Path) -> Result<Option<LoadedConfig>> {
    let path = model.with_file_name("manifest.json");
    let Ok(text) = std::fs::read_to_string(&path) else {
        return Ok(None);
    };
    let manifest: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))?;
    let Some(text) = manifest["config"].as_str() else {
        return Ok(None);
    };
    let config = config::parse(text).with_context(|| format!("config recorded in {}", path.display()))?;
    Ok(Some(LoadedConfig {
        config,
        text: text.to_string(),
        path,
    }))
}

pub fn cmd_sample(args: SampleArgs<'_>) -> Result<PathBuf> {
    let model = PotentialModel::load(args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let loaded = match args.config {
        Some(p) => Some(config::load(p)?),
        None => config_beside(args.model)?,
    };
    let cfg = loaded.as_ref().map(|l| &l.config);
    let seed = args.seed.or(cfg.map(|c| c.seed)).unwrap_or(0);
    let sim = cfg.map(|c| c.simulator.build()).transpose()?;
    if let Some(s) = &sim {
        if s.as_dyn().theta_dim() != model.d() || s.as_dyn().d_x() != model.d_x() {
            bail!(
                "model has d = {}, d_x = {} but the config's simulator has d = {}, d_x = {}",
                model.d(),
                model.d_x(),
                s.as_dyn().theta_dim(),
                s.as_dyn().d_x()
            );
        }
    }
    let expected_n = sim.as_ref().map(|s| s.as_dyn().n());
    let x = match (args.x, args.x_file) {
        (Some(_), Some(_)) => bail!("give either --x or --x-file, not both"),
        (Some(v), None) => {
            let n = args
                .n
                .or(expected_n)
                .context("--x needs --n (or a --config naming the simulator)")?;
            DataMatrix::replicated(v, n)
        }
        (None, Some(p)) => read_x_file(p)?,
        (None, None) => match (cfg, &sim) {
            (Some(c), Some(s)) => observed_from_config(c, s, seed)?,
            _ => bail!("no observed data: pass --x with --n, --x-file, or a --config with an evaluation block"),
        },
    };
    check_observed(&x, model.d_x(), expected_n)?;
    if args.count < 1 {
        bail!("--count must be >= 1");
    }

    let name = cfg.map(|c| c.name.clone()).unwrap_or_else(|| "samples".into());
    let mut out = OutDir::create(resolve_out(args.out, cfg, &name))?;
    let mut rng = rng_for(seed, Stream::Sampling);
    let draws = sample_posterior(&model, &x, args.count, &mut rng)?;
    write_samples_csv(out.writer("samples.csv")?, &draws.points, model.d())?;
    if let Some(tau) = args.tau {
        let set = sample_credible_set(&model, &x, tau, args.count.max(model.d() + 1), &mut rng)?;
        if set.is_degenerate() {
            eprintln!("warning: the tau = {tau} credible hull is degenerate");
        }
        write_samples_csv(out.writer("credible.csv")?, &set.points, model.d())?;
        write_hulls_json(out.writer("hulls.json")?, &hull_records(&[set]))?;
    }
    write_csv_rows(&mut out, "observed.csv", &observed_header(x.d_x()), &observed_rows(&x))?;
    out.finish("sample", seed, false, loaded.as_ref())
}

fn observed_header(d_x: usize) -> Vec<String> {
    (1..=d_x).map(|k| format!("x{k}")).collect()
}

fn observed_rows(x: &DataMatrix) -> Vec<Vec<f64>> {
    (0..x.n()).map(|j| x.observation(j).to_vec()).collect()
}

pub struct EvalArgs<'a> {
    pub model: &'a Path,
    pub config: &'a Path,
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
}

pub fn cmd_eval(args: EvalArgs<'_>) -> Result<PathBuf> {
    let loaded = config::load(args.config)?;
    let cfg = &loaded.config;
    let seed = args.seed.unwrap_or(cfg.seed);
    let model = PotentialModel::load(args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let sim = cfg.simulator.build()?;
    let s = sim.as_dyn();
    if s.theta_dim() != model.d() || s.d_x() != model.d_x() {
        bail!(
            "model has d = {}, d_x = {} but the simulator has d = {}, d_x = {}",
            model.d(),
            model.d_x(),
            s.theta_dim(),
            s.d_x()
        );
    }
    let e = &cfg.evaluation;
    if e.metrics.is_empty() {
        bail!("evaluation.metrics: no metrics requested");
    }
    let needs_data = e.metrics.iter().any(|m| *m != Metric::Dtm);
    let x = if needs_data { Some(observed_from_config(cfg, &sim, seed)?) } else { None };
    let oracle = match &x {
        Some(x) if e.metrics.iter().any(|m| matches!(m, Metric::Mmd | Metric::W2)) => Some(
            s.oracle(x)
                .with_context(|| format!("metrics mmd and w2 need an exact posterior, which `{}` does not have", s.name()))??,
        ),
        _ => None,
    };

    let mut out = OutDir::create(resolve_out(args.out, Some(cfg), &cfg.name))?;
    let mut rng = rng_for(seed, Stream::Evaluation);
    let mut reports = Vec::new();
    for metric in &e.metrics {
        match metric {
            Metric::Mmd => {
                let x = x.as_ref().expect("data");
                let o = oracle.as_ref().expect("oracle");
                let gen = sample_posterior(&model, x, e.samples, &mut rng)?.points;
                let a = o.sample_n(e.samples, &mut rng);
                let b = o.sample_n(e.samples, &mut rng);
                let t = eval::mmd_null_test(&gen, &a, &b, e.permutations, 0.95, &mut rng)?;
                reports.push(
                    MetricReport::new("mmd", t.statistic, vec![e.samples, e.samples], seed)?
                        .with("kernel", "rbf")
                        .with("bandwidth", t.bandwidth.value)
                        .with("bandwidth_fallback", t.bandwidth.fallback)
                        .with("permutations", t.permutations)
                        .with("null_p95", t.threshold)
                        .with("below_null_p95", t.passed),
                );
                if t.bandwidth.fallback {
                    eprintln!("warning: zero median distance, MMD bandwidth fell back to 1");
                }
            }
            Metric::Dtm => {
                let v = eval::dtm(&model, s, e.dtm_j, e.dtm_i, &mut rng)?;
                reports.push(
                    MetricReport::new("dtm", v, vec![e.dtm_j, e.dtm_i], seed)?
                        .with("J", e.dtm_j)
                        .with("I", e.dtm_i),
                );
            }
            Metric::Coverage => {
                let x = x.as_ref().expect("data");
                let reps = eval::coverage_levels(&model, x, &e.tau, e.coverage_set, e.coverage_test, &mut rng)?;
                for r in reps {
                    if r.degenerate {
                        eprintln!("warning: degenerate hull at tau = {}", r.tau);
                    }
                    reports.push(
                        MetricReport::new("coverage", r.fraction, vec![r.n_set, r.n_test], seed)?
                            .with("tau", r.tau)
                            .with("degenerate", r.degenerate),
                    );
                }
            }
            Metric::W2 => {
                let x = x.as_ref().expect("data");
                let o = oracle.as_ref().expect("oracle");
                let gen = sample_posterior(&model, x, e.samples, &mut rng)?.points;
                let truth = o.sample_n(e.samples, &mut rng);
                for k in 0..model.d() {
                    let a: Vec<f64> = gen.iter().map(|p| p[k]).collect();
                    let b: Vec<f64> = truth.iter().map(|p| p[k]).collect();
                    reports.push(
                        MetricReport::new("w2", eval::w2_1d(&a, &b)?, vec![e.samples, e.samples], seed)?
                            .with("coordinate", k + 1),
                    );
                }
            }
            Metric::HullArea => {
                let x = x.as_ref().expect("data");
                let feats = model.features_of(x)?;
                let dirs = sample_directions(model.d(), e.coverage_set, &mut rng);
                let sets = contour_sets_with_features(&model, &feats, &e.tau, &dirs)?;
                for set in &sets {
                    for h in &set.hulls {
                        let (area, degenerate) = eval::hull_area(&h.hull);
                        if degenerate {
                            eprintln!("warning: degenerate hull at tau = {} for pair {:?}", set.tau, h.pair);
                        }
                        reports.push(
                            MetricReport::new("hull_area", area, vec![e.coverage_set], seed)?
                                .with("tau", set.tau)
                                .with("pair", vec![h.pair[0] + 1, h.pair[1] + 1])
                                .with("degenerate", degenerate),
                        );
                    }
                }
            }
        }
    }
    let mut w = out.writer("metrics.jsonl")?;
    eval::write_reports_jsonl(&mut w, &reports)?;
    w.flush()?;
    drop(w);
    out.finish("eval", seed, false, Some(&loaded))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Figure {
    GaussianShrinkage,
    BrockHommesContours,
}

const GAUSSIAN_SHRINKAGE: &str = r#"version = 1
name = "gaussian-shrinkage"
seed = 2024

[simulator]
kind = "gaussian"
n = 2

[network]
q1 = 2

[training]
restarts = 3

[evaluation]
tau = [0.9]
x = 0.5
"#;

const BROCK_HOMMES_CONTOURS: &str = r#"version = 1
name = "brock-hommes-contours"
seed = 2024

[simulator]
kind = "brock_hommes"

[network]
q1 = 4
q2 = 4

[training]
restarts = 1

[evaluation]
tau = [0.5, 0.6, 0.7, 0.8, 0.9]
theta_star = [0.9, 0.2, 0.9, -0.2]
samples = 10000
"#;

pub const SHRINKAGE_NS: [usize; 3] = [2, 8, 32];

/// Number of shared directions for contour hulls in figure bundles.
const CONTOUR_DIRECTIONS: usize = 2000;

pub struct ReproduceArgs<'a> {
    pub figure: Figure,
    pub config: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub seed: Option<u64>,
    pub paper_scale: bool,
}

pub fn cmd_reproduce(args: ReproduceArgs<'_>) -> Result<PathBuf> {
    let loaded = match args.config {
        Some(p) => config::load(p)?,
        None => {
            let text = match args.figure {
                Figure::GaussianShrinkage => GAUSSIAN_SHRINKAGE,
                Figure::BrockHommesContours => BROCK_HOMMES_CONTOURS,
            };
            LoadedConfig {
                config: config::parse(text)?,
                text: text.to_string(),
                path: PathBuf::from("<built-in>"),
            }
        }
    };
    let mut cfg = loaded.config.clone();
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.paper_scale {
        cfg.apply_paper_scale();
    }
    let mut out = OutDir::create(resolve_out(args.out, Some(&cfg), &cfg.name))?;
    match args.figure {
        Figure::GaussianShrinkage => gaussian_shrinkage(&cfg, &mut out)?,
        Figure::BrockHommesContours => brock_hommes_contours(&cfg, &mut out)?,
    }
    out.finish("reproduce", cfg.seed, args.paper_scale, Some(&loaded))
}

fn gaussian_shrinkage(cfg: &ExperimentConfig, out: &mut OutDir) -> Result<()> {
    let SimulatorBlock::Gaussian(base) = &cfg.simulator else {
        bail!("simulator.kind: gaussian-shrinkage needs the gaussian simulator");
    };
    let xv = cfg.evaluation.x.unwrap_or(0.5);
    let mut areas = Vec::new();
    let mut all = Vec::new();
    for n in SHRINKAGE_NS {
        let mut panel = cfg.clone();
        panel.simulator = SimulatorBlock::Gaussian(qbayes::simulators::GaussianConjugateConfig { n, ..base.clone() });
        let sim = panel.simulator.build()?;
        let prefix = format!("n{n}/");
        let outcome = train_model(&panel, &sim, out, &prefix)?;
        let x = DataMatrix::replicated(xv, n);
        let model = &outcome.model;
        let draws = sample_posterior(model, &x, panel.evaluation.samples, &mut rng_for(cfg.seed, Stream::Sampling))?;
        write_samples_csv(out.writer(&format!("{prefix}samples.csv"))?, &draws.points, model.d())?;
        let dirs = sample_directions(model.d(), CONTOUR_DIRECTIONS, &mut rng_for(cfg.seed, Stream::Directions));
        let sets = contour_sets_with_features(model, &model.features_of(&x)?, &panel.evaluation.tau, &dirs)?;
        for s in &sets {
            areas.push(vec![n as f64, s.tau, s.hulls[0].hull.area()]);
        }
        let records = hull_records(&sets);
        write_hulls_json(out.writer(&format!("{prefix}hulls.json"))?, &records)?;
        all.extend(records.into_iter().map(|r| PanelHull { n, hull: r }));
        eprintln!("n = {n}: trained and wrote contours");
    }
    write_csv_rows(out, "areas.csv", &["n", "tau", "area"], &areas)?;
    let mut w = out.writer("hulls.json")?;
    serde_json::to_writer_pretty(&mut w, &all)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PanelHull {
    n: usize,
    #[serde(flatten)]
    hull: HullRecord,
}

fn brock_hommes_contours(cfg: &ExperimentConfig, out: &mut OutDir) -> Result<()> {
    if !matches!(cfg.simulator, SimulatorBlock::BrockHommes(_)) {
        bail!("simulator.kind: brock-hommes-contours needs the brock_hommes simulator");
    }
    let sim = cfg.simulator.build()?;
    let x = observed_from_config(cfg, &sim, cfg.seed)?;
    write_csv_rows(out, "observed.csv", &observed_header(x.d_x()), &observed_rows(&x))?;
    let outcome = train_model(cfg, &sim, out, "")?;
    let model = &outcome.model;
    let d = model.d();
    let draws = sample_posterior(model, &x, cfg.evaluation.samples, &mut rng_for(cfg.seed, Stream::Sampling))?;
    write_samples_csv(out.writer("samples.csv")?, &draws.points, d)?;
    let dirs = sample_directions(d, CONTOUR_DIRECTIONS, &mut rng_for(cfg.seed, Stream::Directions));
    let sets = contour_sets_with_features(model, &model.features_of(&x)?, &cfg.evaluation.tau, &dirs)?;
    let mut records = hull_records(&sets);
    for pair in coordinate_pairs(d) {
        let pts: Vec<[f64; 2]> = draws.points.iter().map(|p| [p[pair[0]], p[pair[1]]]).collect();
        let hull = convex_hull_2d(&pts);
        records.push(HullRecord {
            level: 1.0,
            pair,
            vertices: hull.vertices,
            degenerate: hull.degenerate,
        });
    }
    write_hulls_json(out.writer("hulls.json")?, &records)?;
    if let Some(t) = &cfg.evaluation.theta_star {
        let inside: Vec<Vec<f64>> = sets
            .iter()
            .map(|s| vec![s.tau, s.pairs_containing(t, 0.0) as f64, s.hulls.len() as f64])
            .collect();
        write_csv_rows(out, "theta_star_containment.csv", &["tau", "pairs_containing", "pairs"], &inside)?;
    }
    Ok(())
}
