use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use headlab::data::{dataset as make_dataset, dataset_manifest};
use headlab::dit::parse_cond;
use headlab::io::tables::{self, parse_pairs};
use headlab::io::{self as hio, load_checkpoint, load_selection, save_checkpoint, save_selection, SelectionDoc};
use headlab::objectives::Objective;
use headlab::search::{headhunt as run_search, GuidedEvaluator, Pair};
use headlab::train::LossCurve;
use headlab::{
    sample as draw, sweep as run_sweep, DitWeights, GuidanceConfig, HeadId, ObjectiveId, PerturbMethod, PerturbSpec,
    SearchConfig, SweepConfig,
};

use crate::args::*;
use crate::config;
use crate::heads::{parse_grid, parse_heads};

fn with_extension(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn load_model(path: &Path) -> Result<DitWeights> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn objective(s: &str) -> Result<ObjectiveId> {
    s.parse().with_context(|| format!("objective `{s}`"))
}

fn method(s: &str) -> Result<PerturbMethod> {
    s.parse().with_context(|| format!("method `{s}`"))
}

fn guidance(a: &GuidanceArgs, w_pert: f64) -> Result<GuidanceConfig> {
    let g = GuidanceConfig {
        w_cfg: a.w_cfg,
        w_pert,
        steps: a.steps,
        pert_anchor: a.pert_anchor.parse()?,
        ..GuidanceConfig::default()
    };
    g.validate()?;
    Ok(g)
}

fn pairs(path: Option<&Path>, class_count: usize) -> Result<Vec<Pair>> {
    let pairs = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading pairs {}", p.display()))?;
            parse_pairs(&text)?
        }
        None => (0..class_count).map(|c| (Some(c), c as u64)).collect(),
    };
    if pairs.is_empty() {
        bail!("no (cond, seed) pairs given");
    }
    Ok(pairs)
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = config::load(&a.config)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let data = make_dataset(cfg.data.count, cfg.data.seed, cfg.data.noise)?;
    let mut weights = DitWeights::init(&cfg.model, cfg.train.seed)?;
    log::info!(
        "training {} parameters for {} steps on {} samples",
        weights.param_count(),
        cfg.train.steps,
        data.len()
    );
    let curve: LossCurve = headlab::train(&mut weights, &data, &cfg.train, |_, _| {})?;
    save_checkpoint(&weights, &a.out)?;
    let loss_path = with_extension(&a.out, ".loss.csv");
    hio::write_text(&loss_path, &tables::loss_csv(&curve))?;
    match (curve.initial(), curve.final_window(), curve.ratio()) {
        (Some(i), Some(f), Some(r)) => println!("initial loss {i:.6}  final loss {f:.6}  ratio {r:.4}"),
        _ => println!("no training steps run"),
    }
    println!("checkpoint {}", a.out.display());
    println!("loss curve {}", loss_path.display());
    Ok(())
}

/// Head list and method from either `--heads` or `--selection`.
fn head_source(
    heads: Option<&str>,
    selection: Option<&Path>,
    weights: &DitWeights,
) -> Result<(Vec<HeadId>, Option<SelectionDoc>)> {
    match (heads, selection) {
        (Some(h), _) => Ok((parse_heads(h, &weights.config)?, None)),
        (None, Some(p)) => {
            let doc = load_selection(p).with_context(|| format!("selection {}", p.display()))?;
            Ok((doc.selected.clone(), Some(doc)))
        }
        (None, None) => Ok((Vec::new(), None)),
    }
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let weights = load_model(&a.ckpt)?;
    let (heads, _) = head_source(a.heads.as_deref(), a.selection.as_deref(), &weights)?;
    let spec = PerturbSpec::new(heads, method(&a.perturb.method)?, a.perturb.u, a.perturb.tau)?;
    let mut g = guidance(&a.guidance, a.w_pert)?;
    g.cond = parse_cond(&a.cond)?;
    g.seed = a.seed;

    let base = draw(&weights, &g.unguided(), &PerturbSpec::none())?;
    let guided = draw(&weights, &g, &spec)?.with_reference(&base)?;
    hio::write_pgm(&guided.export_image(), a.out.join("sample.pgm"))?;
    hio::write_text(&a.out.join("trajectory.csv"), &tables::trajectory_csv(&guided.trajectory))?;
    let img = guided.export_image();
    println!(
        "sample: {} perturbed heads, mean {:.6}, l2 to unguided {:.6}",
        spec.heads().len(),
        img.mean(),
        guided.trajectory.last().and_then(|r| r.l2_to_unguided).unwrap_or(0.0)
    );
    Ok(())
}

pub fn headhunt(a: HeadhuntArgs) -> Result<()> {
    let weights = load_model(&a.ckpt)?;
    let cfg = SearchConfig {
        k: a.k,
        rounds: a.rounds,
        pairs: pairs(a.pairs.as_deref(), weights.config.class_count)?,
        guidance: guidance(&a.guidance, a.w_pert)?,
        method: method(&a.perturb.method)?,
        u: a.perturb.u,
        tau: a.perturb.tau,
        objective: objective(&a.objective)?,
    };
    cfg.validate()?;
    let pool = thread_pool(a.jobs)?;
    pool.install(|| -> Result<()> {
        let state = run_search(&weights, &cfg)?;
        let eval = GuidedEvaluator::new(&weights, &cfg);
        let mut curve = Vec::new();
        for r in 0..=state.completed_rounds() {
            let samples = eval.samples(state.selection_after(r))?;
            let images: Vec<_> = samples.iter().map(|s| s.export_image()).collect();
            let scores = images
                .iter()
                .zip(&cfg.pairs)
                .map(|(img, &(cond, _))| cfg.objective.score(img, cond))
                .collect::<headlab::Result<Vec<f64>>>()?;
            curve.push(scores.iter().sum::<f64>() / scores.len() as f64);
            let grid = hio::tile_row(&images, 1, -3.0)?;
            hio::write_pgm(&grid, a.out.join(format!("grids/round_{r}.pgm")))?;
        }
        hio::write_text(&a.out.join("ledger.csv"), &tables::ledger_csv(&state.ledger))?;
        hio::write_text(&a.out.join("curve.csv"), &tables::curve_csv(&curve))?;
        let doc = SelectionDoc::new(&state, &cfg, &weights.config)?;
        save_selection(&doc, a.out.join("selection.json"))?;

        println!("round 0 (unguided): {:.6}", curve[0]);
        for (r, round) in state.ledger.iter().enumerate() {
            let names: Vec<String> = round.winners.iter().map(ToString::to_string).collect();
            println!("round {}: +[{}] -> {:.6}", r + 1, names.join(" "), curve[r + 1]);
        }
        println!("selected {} heads, written to {}", state.selected.len(), a.out.display());
        Ok(())
    })
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let weights = load_model(&a.ckpt)?;
    let (heads, _) = head_source(a.heads.as_deref(), a.selection.as_deref(), &weights)?;
    if heads.is_empty() {
        bail!("sweep needs --heads or --selection");
    }
    let cfg = SweepConfig {
        heads,
        method: method(&a.method)?,
        tau: a.tau,
        w_grid: parse_grid(&a.w_grid).context("--w-grid")?,
        u_grid: parse_grid(&a.u_grid).context("--u-grid")?,
        pairs: pairs(a.pairs.as_deref(), weights.config.class_count)?,
        guidance: guidance(&a.guidance, 0.0)?,
        objective: objective(&a.objective)?,
    };
    cfg.validate()?;
    let result = thread_pool(a.jobs)?.install(|| run_sweep(&weights, &cfg))?;
    hio::write_text(&a.out, &tables::sweep_rows_csv(&result))?;
    let matrix_path = with_extension(&a.out, ".matrix.csv");
    hio::write_text(&matrix_path, &tables::sweep_matrix_csv(&result))?;
    let (w, u, s) = result.best();
    let best = serde_json::json!({ "w": w, "u": u, "score": s });
    hio::write_text(&with_extension(&a.out, ".best.json"), &format!("{best}\n"))?;
    print!("{}", tables::sweep_matrix_csv(&result));
    println!("best cell: w={w} u={u} score={s:.6}");
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let doc = load_selection(&a.selection).with_context(|| format!("selection {}", a.selection.display()))?;
    if let Some(p) = &a.ckpt {
        let w = load_model(p)?;
        if w.config != doc.model {
            bail!("selection was made for a different model configuration");
        }
    }
    let mut hist = vec![0usize; doc.model.layers];
    for h in &doc.selected {
        hist[h.layer] += 1;
    }
    println!(
        "selection: {} heads, objective {}, method {} (u={}, tau={})",
        doc.selected.len(),
        doc.search.objective,
        doc.search.method,
        doc.search.u,
        doc.search.tau
    );
    println!("per-layer histogram: {hist:?}");
    for (l, n) in hist.iter().enumerate() {
        println!("  layer {l}: {} {n}", "#".repeat(*n));
    }
    for r in &doc.rounds {
        let names: Vec<String> = r.winners.iter().map(ToString::to_string).collect();
        println!(
            "round {}: {} candidates, winners [{}], ledger sha256 {}",
            r.round,
            r.candidates,
            names.join(" "),
            &r.sha256[..16]
        );
    }
    if let Some(p) = &a.compare {
        let other = load_selection(p).with_context(|| format!("selection {}", p.display()))?;
        let x: BTreeSet<_> = doc.selected.iter().collect();
        let y: BTreeSet<_> = other.selected.iter().collect();
        let shared = x.intersection(&y).count();
        let union = x.union(&y).count();
        println!(
            "overlap with {}: {shared} shared heads, {:.1}% of union",
            p.display(),
            100.0 * shared as f64 / union.max(1) as f64
        );
    }
    Ok(())
}

pub fn dataset(a: DatasetArgs) -> Result<()> {
    let data = make_dataset(a.count, a.seed, a.noise)?;
    for (i, (img, cond)) in data.iter().enumerate() {
        let bytes = hio::pgm_bytes_range(img, 0.0, 1.0)?;
        let class = cond.expect("dataset samples are labelled");
        hio::write_bytes(&a.out.join(format!("{i:05}_c{class}.pgm")), &bytes)?;
    }
    hio::write_text(&a.out.join("manifest.csv"), &tables::manifest_csv(&dataset_manifest(a.count, a.seed)))?;
    println!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}
