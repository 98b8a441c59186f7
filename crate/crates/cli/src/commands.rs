use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gridood::checkpoint::{Checkpoint, Mode};
use gridood::config::validate_p_triple;
use gridood::report::{
    default_methods, encode_pgm, evaluate, metrics_csv, overlay, write_evaluation, write_file, EvalReport,
};
use gridood::scenes::{decode_ppm, encode_ppm, generate_split, write_dataset, Dataset, Split};
use gridood::score::heatmap as head_heatmap;
use gridood::{train_from, AggregationChoice, Error, Method, Network, Result, RunConfig, TrainLog};

pub fn load(path: &Option<PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p, overrides),
        None => RunConfig::from_json_with_overrides("{}", overrides),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// Loads a checkpoint given on the command line; a missing or unreadable
/// file is a usage problem rather than a runtime failure.
fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> Result<Checkpoint> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("model.gridood"));
    Checkpoint::load(&path).map_err(|e| match e {
        Error::Io { path, source } => Error::Usage(format!("cannot read checkpoint {}: {source}", path.display())),
        other => other,
    })
}

pub fn gen(cfg: &RunConfig) -> Result<()> {
    let dataset = Dataset {
        train: generate_split(&cfg.dataset, Split::Train)?,
        val: generate_split(&cfg.dataset, Split::Val)?,
        test_id: generate_split(&cfg.dataset, Split::TestId)?,
        test_ood: generate_split(&cfg.dataset, Split::TestOod)?,
    };
    let dir = cfg.output_dir.join("data");
    write_dataset(&dataset, cfg.dataset.image_size, &dir)?;
    log::info!("wrote dataset to {}", dir.display());
    Ok(())
}

fn train_model(cfg: &RunConfig, init: Network) -> Result<(Checkpoint, TrainLog)> {
    let train_set = generate_split(&cfg.dataset, Split::Train)?;
    let val_set = generate_split(&cfg.dataset, Split::Val)?;
    train_from(init, &train_set, &val_set, &cfg.train)
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let init = match resume {
        Some(path) => {
            let ck = load_checkpoint(cfg, Some(path))?;
            if ck.config != cfg.network {
                return Err(Error::Config(format!(
                    "checkpoint network (num_classes {}, image_size {}) does not match the config \
                     (num_classes {}, image_size {})",
                    ck.config.num_classes, ck.config.image_size, cfg.network.num_classes, cfg.network.image_size
                )));
            }
            if ck.meta.mode != cfg.train.mode {
                return Err(Error::Config(format!(
                    "checkpoint mode {:?} does not match train.mode {:?}",
                    ck.meta.mode, cfg.train.mode
                )));
            }
            Network::from_params(ck.config, ck.params)?
        }
        None => Network::init(cfg.network.clone(), cfg.train.seed)?,
    };
    create_dir(&cfg.output_dir)?;
    match train_model(cfg, init) {
        Ok((ck, log)) => {
            ck.save(&cfg.output_dir.join("model.gridood"))?;
            write_file(&cfg.output_dir.join("train_log.jsonl"), log.to_jsonl()?.as_bytes())?;
            log::info!("saved {}", cfg.output_dir.join("model.gridood").display());
            Ok(())
        }
        Err(Error::Diverged {
            epoch,
            reason,
            last_good,
        }) => {
            let path = cfg.output_dir.join("last_good.gridood");
            last_good.save(&path)?;
            log::error!("kept the last good checkpoint at {}", path.display());
            Err(Error::Diverged {
                epoch,
                reason,
                last_good,
            })
        }
        Err(e) => Err(e),
    }
}

fn test_splits(cfg: &RunConfig) -> Result<(Vec<gridood::Scene>, Vec<gridood::Scene>)> {
    Ok((
        generate_split(&cfg.dataset, Split::TestId)?,
        generate_split(&cfg.dataset, Split::TestOod)?,
    ))
}

/// Splits `a,b(c,d)` on the commas outside parentheses.
fn split_methods(list: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, ch) in list.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&list[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&list[start..]);
    out
}

fn parse_methods(lists: &[String]) -> Result<Vec<Method>> {
    lists
        .iter()
        .flat_map(|l| split_methods(l))
        .map(|m| m.trim().parse())
        .collect()
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, methods: &[String], out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    let methods = if !methods.is_empty() {
        parse_methods(methods)?
    } else if !cfg.methods.is_empty() {
        parse_methods(&cfg.methods)?
    } else {
        default_methods(ck.meta.mode)
    };
    gridood::report::check_methods(ck.meta.mode, &methods)?;
    let (id, ood) = test_splits(cfg)?;
    let evaluation = evaluate(&ck, &id, &ood, &methods)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("eval"));
    write_evaluation(&dir, &evaluation)?;
    print!("{}", metrics_csv(&evaluation.report));
    Ok(())
}

fn parse_triple(s: &str) -> Result<[f64; 3]> {
    let vals = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Config(format!("p triple `{s}` is not three numbers")))?;
    <[f64; 3]>::try_from(vals).map_err(|_| Error::Config(format!("p triple `{s}` is not three numbers")))
}

pub fn sweep_p(cfg: &RunConfig, triples: &[String]) -> Result<()> {
    let grid = if triples.is_empty() {
        cfg.p_grid.clone()
    } else {
        triples.iter().map(|t| parse_triple(t)).collect::<Result<Vec<_>>>()?
    };
    if grid.is_empty() {
        return Err(Error::Config("p_grid is empty".into()));
    }
    for p in &grid {
        validate_p_triple(*p)?;
    }
    if cfg.train.mode != Mode::Yolood {
        return Err(Error::Config("sweep-p needs train.mode = yolood".into()));
    }
    let train_set = generate_split(&cfg.dataset, Split::Train)?;
    let val_set = generate_split(&cfg.dataset, Split::Val)?;
    let (id, ood) = test_splits(cfg)?;
    let mut rows = Vec::with_capacity(grid.len());
    for p in grid {
        log::info!("sweep: p = {p:?}");
        let mut train_cfg = cfg.train.clone();
        train_cfg.p = gridood::ResponsibilityConfig::new(p)?;
        let init = Network::init(cfg.network.clone(), train_cfg.seed)?;
        let (ck, log) = train_from(init, &train_set, &val_set, &train_cfg)?;
        let val_map = log.records.last().map_or(f64::NAN, |r| r.val_macro_ap);
        let ev = evaluate(&ck, &id, &ood, &[Method::Yolood])?;
        rows.push((p, val_map, ev.report.metrics[0].clone()));
    }
    let mut ranked: Vec<usize> = (0..rows.len()).collect();
    ranked.sort_by(|&a, &b| rows[b].1.total_cmp(&rows[a].1));
    let mut rank = vec![0; rows.len()];
    for (r, &i) in ranked.iter().enumerate() {
        rank[i] = r + 1;
    }
    let mut csv = String::from("p1,p2,p3,val_macro_ap,map_rank,fpr95,auroc,aupr\n");
    for (i, (p, val_map, m)) in rows.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            p[0], p[1], p[2], val_map, rank[i], m.fpr95, m.auroc, m.aupr
        );
    }
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("sweep_p.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

/// The nine ablation rows: six aggregation combinations, then the
/// single-factor and energy scores.
pub fn ablation_methods() -> Vec<Method> {
    let mut m: Vec<Method> = AggregationChoice::all().into_iter().map(Method::YoloodAgg).collect();
    m.extend([Method::YoloodObj, Method::YoloodCls, Method::YoloodJointEnergy]);
    m
}

pub fn ablate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    if ck.meta.mode != Mode::Yolood {
        return Err(Error::Usage("ablate needs a yolood checkpoint".into()));
    }
    let (id, ood) = test_splits(cfg)?;
    let ev = evaluate(&ck, &id, &ood, &ablation_methods())?;
    create_dir(&cfg.output_dir)?;
    write_report(&cfg.output_dir.join("ablation.json"), &ev.report)?;
    let csv = metrics_csv(&ev.report);
    write_file(&cfg.output_dir.join("ablation.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write_file(path, json.as_bytes())
}

pub enum HeatmapSource {
    Scene(Split, usize),
    File(PathBuf),
}

pub fn heatmap(cfg: &RunConfig, checkpoint: Option<&Path>, source: &HeatmapSource, out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    if ck.meta.mode != Mode::Yolood {
        return Err(Error::Usage("heatmaps need a yolood checkpoint".into()));
    }
    let image = match source {
        HeatmapSource::Scene(split, index) => {
            let scenes = generate_split(&cfg.dataset, *split)?;
            scenes
                .into_iter()
                .nth(*index)
                .ok_or_else(|| Error::Usage(format!("{} has no scene {index}", split.name())))?
                .image
        }
        HeatmapSource::File(path) => {
            let bytes = std::fs::read(path)
                .map_err(|e| Error::Usage(format!("cannot read image {}: {e}", path.display())))?;
            decode_ppm(&bytes)?
        }
    };
    let network = Network::from_params(ck.config, ck.params)?;
    let grids = network.forward(&image)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("heatmap"));
    create_dir(&dir)?;
    for k in 1..=grids.heads.len() {
        let map = head_heatmap(&grids, k)?;
        write_file(&dir.join(format!("head{k}.pgm")), &encode_pgm(&map))?;
    }
    let finest = head_heatmap(&grids, grids.heads.len())?;
    write_file(&dir.join("overlay.ppm"), &encode_ppm(&overlay(&image, &finest)))?;
    log::info!("wrote heatmaps to {}", dir.display());
    Ok(())
}
