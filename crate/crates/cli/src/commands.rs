use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use planesac_core::eval::{emit_report, read_report_json, ReportRow};
use planesac_core::gradcheck::{run_gradcheck, GradcheckOptions};
use planesac_core::hypo::{Architecture, NopeSacParams, TrainConfig, Trainer, LOG_HEADER};
use planesac_core::matcher::PlaneMatcher;
use planesac_core::pipeline::{estimate_all, report_row, EstimateOptions, Method, SceneEstimate};
use planesac_core::synth::{generate_dataset, Dataset, SceneConfig};
use planesac_core::tinynn::Checkpoint;

use crate::config::{load, EstimateFile};
use crate::{ArchChoice, BaselineArgs, EstimateArgs, EstimateShared, Failure, GenArgs, GradcheckArgs, GridChoice, ReportArgs, SweepArgs, TrainArgs};

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn read_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

pub fn gen(a: GenArgs) -> Result<(), Failure> {
    let (mut cfg, seeded): (SceneConfig, bool) = load(a.config.as_deref())?;
    if !seeded && a.seed.is_none() {
        return Err(invalid("a seed is required (--seed or `seed` in the config file)"));
    }
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(seed, scenes, offset_noise, normal_noise_deg, outlier_rate, distractors, init_rotation_sigma_deg, init_translation_sigma);
    cfg.validate().map_err(invalid)?;
    let ds = generate_dataset(&cfg).map_err(runtime)?;
    ds.write(&a.out).map_err(runtime)?;
    let planes: usize = ds.scenes.iter().map(|s| s.planes.len()).sum();
    println!(
        "wrote {} scenes ({planes} planes) to {}; plane noise {} m / {} deg, outlier rate {}, distractors {}",
        ds.scenes.len(),
        a.out.display(),
        cfg.offset_noise,
        cfg.normal_noise_deg,
        cfg.outlier_rate,
        cfg.distractors
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let (mut cfg, seeded): (TrainConfig, bool) = load(a.config.as_deref())?;
    if !seeded && a.seed.is_none() {
        return Err(invalid("a seed is required (--seed or `seed` in the config file)"));
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(arch) = a.architecture {
        cfg.architecture = match arch {
            ArchChoice::Full => Architecture::full(),
            ArchChoice::Compact => Architecture::compact(),
            ArchChoice::Tiny => Architecture::tiny(),
        };
    }
    if let Some(n) = a.aim_steps {
        cfg.aim.steps = n;
    }
    if let Some(n) = a.refine_steps {
        cfg.refine.steps = n;
    }
    cfg.validate().map_err(invalid)?;
    let ds = read_dataset(&a.data)?;
    if cfg.refine.steps > 0 && ds.scenes.len() <= cfg.validation_scenes {
        return Err(invalid(format!(
            "{} scenes leave none for training after holding out {} for validation",
            ds.scenes.len(),
            cfg.validation_scenes
        )));
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            Trainer::resume(cfg.clone(), &ds.scenes, &ck).map_err(invalid)?
        }
        None => Trainer::new(cfg.clone(), &ds.scenes).map_err(runtime)?,
    };
    let mut log = match &a.log {
        Some(path) => {
            let fresh = a.resume.is_none();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(path)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            if fresh {
                writeln!(f, "{LOG_HEADER}").map_err(runtime)?;
            }
            Some(f)
        }
        None => None,
    };
    let mut io_error = None;
    let result = trainer.run(a.max_steps, &mut |row| {
        if let Some(v) = row.val_rot_median {
            println!("step {} {:?}: loss {:.6}, validation {v:.4} deg / {:.4} m", row.step, row.stage, row.loss.total, row.val_trans_median.unwrap_or(f64::NAN));
        }
        if let Some(f) = log.as_mut() {
            if let Err(e) = writeln!(f, "{}", row.to_csv()) {
                io_error.get_or_insert(e);
            }
        }
    });
    if let Some(e) = io_error {
        return Err(runtime(e));
    }
    result.map_err(runtime)?;
    trainer.checkpoint().write(&a.out).map_err(runtime)?;
    println!(
        "step {}/{}{}; checkpoint {}",
        trainer.step,
        cfg.total_steps(),
        if trainer.finished() { " (finished)" } else { "" },
        a.out.display()
    );
    Ok(())
}

struct Setup {
    file: EstimateFile,
    opts: EstimateOptions,
    params: Option<NopeSacParams>,
    dataset: Dataset,
}

fn setup(shared: &EstimateShared) -> Result<Setup, Failure> {
    let (file, _): (EstimateFile, bool) = load(shared.config.as_deref())?;
    let mut matcher = PlaneMatcher::default();
    if let Some(t) = shared.threshold.or(file.threshold) {
        if !(t > 0.0 && t < 1.0) {
            return Err(invalid(format!("threshold {t} must lie in (0, 1)")));
        }
        matcher.threshold = t;
    }
    let params = match &shared.checkpoint {
        Some(path) => {
            let ck = Checkpoint::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            Some(NopeSacParams::read_from(&ck).map_err(runtime)?)
        }
        None => None,
    };
    if let Some(b) = shared.bin_score.or(file.bin_score) {
        matcher.bin_score = b;
    } else if let Some(p) = &params {
        matcher.bin_score = p.bin_score;
    }
    let opts = EstimateOptions { method: file.method, fusion: file.fusion, matcher, warp: file.warp, nume_ref: file.nume_ref };
    let dataset = read_dataset(&shared.data)?;
    if dataset.scenes.is_empty() {
        return Err(invalid("the scene file holds no scenes"));
    }
    Ok(Setup { file, opts, params, dataset })
}

fn run_method(setup: &Setup, dataset: &Dataset, opts: &EstimateOptions) -> Result<Vec<SceneEstimate>, Failure> {
    if opts.method.needs_model() && setup.params.is_none() {
        return Err(invalid(format!("{} needs --checkpoint", opts.method.name())));
    }
    estimate_all(&dataset.scenes, setup.params.as_ref(), opts).map_err(runtime)
}

fn print_row(r: &ReportRow) {
    let label = if r.cell.is_empty() { r.method.clone() } else { format!("{} [{}]", r.method, r.cell) };
    println!(
        "{label}: rot median {:.3} deg, mean {:.3}; trans median {:.4} m, mean {:.4}; AP(all, 30deg/1m) {:.3}; match P/R {:.3}/{:.3}",
        r.pose.rot_median, r.pose.rot_mean, r.pose.trans_median, r.pose.trans_mean, r.ap.values[0][0], r.matching.precision, r.matching.recall
    );
}

fn write_rows(rows: &[ReportRow], shared: &EstimateShared) -> Result<(), Failure> {
    rows.iter().for_each(print_row);
    emit_report(rows, &shared.out, shared.format.into()).map_err(runtime)
}

pub fn estimate(a: EstimateArgs) -> Result<(), Failure> {
    let mut s = setup(&a.shared)?;
    if let Some(m) = a.method {
        s.opts.method = m.into();
    }
    if let Some(f) = a.fusion {
        s.opts.fusion = f.into();
    }
    let est = run_method(&s, &s.dataset, &s.opts)?;
    let row = report_row(s.opts.method.name(), "", &s.dataset.scenes, &est).map_err(runtime)?;
    let costs: Vec<f64> = est.iter().filter_map(|e| e.mean_costs).map(|(r, t)| r + t).collect();
    if !costs.is_empty() {
        println!("mean fused-pose cost (rot + trans): {:.3e}", costs.iter().sum::<f64>() / costs.len() as f64);
    }
    if let Some(path) = &a.per_scene {
        let text = serde_json::to_string_pretty(&est).map_err(runtime)?;
        std::fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    write_rows(&[row], &a.shared)
}

pub fn baseline(a: BaselineArgs) -> Result<(), Failure> {
    let s = setup(&a.shared)?;
    let methods: Vec<Method> = if a.method.is_empty() {
        vec![Method::HomoRef, Method::NumeRef1, Method::NumeRef2, Method::InitOnly]
    } else {
        a.method.iter().map(|m| (*m).into()).collect()
    };
    if methods.iter().any(|m| m.needs_model()) {
        return Err(invalid("baseline runs classical methods only; use `estimate` for nope-sac"));
    }
    let mut rows = Vec::with_capacity(methods.len());
    for method in methods {
        let opts = EstimateOptions { method, ..s.opts };
        let est = run_method(&s, &s.dataset, &opts)?;
        rows.push(report_row(method.name(), "", &s.dataset.scenes, &est).map_err(runtime)?);
    }
    write_rows(&rows, &a.shared)
}

pub fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let mut s = setup(&a.shared)?;
    if let Some(m) = a.method {
        s.opts.method = m.into();
    }
    if let Some(f) = a.fusion {
        s.opts.fusion = f.into();
    }
    let name = s.opts.method.name();
    let mut rows = Vec::new();
    match a.grid {
        GridChoice::Threshold => {
            let grid = a.thresholds.clone().unwrap_or_else(|| s.file.thresholds.clone());
            if grid.is_empty() {
                return Err(invalid("the threshold grid is empty"));
            }
            if let Some(t) = grid.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
                return Err(invalid(format!("threshold {t} must lie in (0, 1)")));
            }
            for t in grid {
                let opts = EstimateOptions { matcher: PlaneMatcher { threshold: t, ..s.opts.matcher }, ..s.opts };
                let est = run_method(&s, &s.dataset, &opts)?;
                rows.push(report_row(name, &format!("threshold={t}"), &s.dataset.scenes, &est).map_err(runtime)?);
            }
        }
        GridChoice::Noise => {
            if s.file.noise_levels.is_empty() {
                return Err(invalid("the noise grid is empty"));
            }
            let cells = std::iter::once(("clean".to_string(), 0.0, 0.0))
                .chain(s.file.noise_levels.iter().map(|&(o, n)| (format!("noise={o}m/{n}deg"), o, n)));
            for (label, offset, normal) in cells {
                let cfg = SceneConfig { offset_noise: offset, normal_noise_deg: normal, ..s.dataset.config.clone() };
                let ds = generate_dataset(&cfg).map_err(invalid)?;
                let est = run_method(&s, &ds, &s.opts)?;
                rows.push(report_row(name, &label, &ds.scenes, &est).map_err(runtime)?);
            }
        }
    }
    write_rows(&rows, &a.shared)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    if a.instances == 0 {
        return Err(invalid("--instances must be positive"));
    }
    let report = run_gradcheck(&GradcheckOptions { seed: a.seed, instances: a.instances, corrupt: a.corrupt, ..GradcheckOptions::default() });
    for s in &report.suites {
        println!(
            "{:<20} {}  checked {:>6}  kinks {:>4}  max rel error {:.2e}",
            s.name,
            if s.passed { "pass" } else { "FAIL" },
            s.checked,
            s.kinks,
            s.max_rel_error
        );
    }
    println!("{:.1} s", report.seconds);
    if let Some(path) = &a.out {
        let text = serde_json::to_string_pretty(&report.suites).map_err(runtime)?;
        std::fs::write(path, text + "\n").map_err(runtime)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed = report.suites.iter().filter(|s| !s.passed).count();
        Err(runtime(format!("{failed} gradient suites failed")))
    }
}

pub fn report(a: ReportArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for path in &a.inputs {
        rows.extend(read_report_json(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?);
    }
    rows.iter().for_each(print_row);
    emit_report(&rows, &a.out, a.format.into()).map_err(runtime)
}
