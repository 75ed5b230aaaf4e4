use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use aat_core::analysis::{grad_visual, invert_representation, ImageArtifact, Provenance};
use aat_core::attack::{max_perturbation, pgd, AttackConfig};
use aat_core::config::{DataSource, RunConfig, Split, PRESETS};
use aat_core::data::{self, CheckpointMeta, Dataset};
use aat_core::dilemma::{self, DilemmaSpec};
use aat_core::eval::{self, EVAL_BATCH};
use aat_core::model::{Representation, ThreeWayModel, Way};
use aat_core::training::{self, LossConfig};
use aat_core::{Error, Tensor};
use serde::Serialize;
use serde_json::json;

use crate::{
    AttackArgs, AttackOverride, ConfigArgs, ConfigSel, DilemmaArgs, EvalArgs, FetchArgs, GradVizArgs, InvertArgs,
    TrainArgs,
};

pub const MNIST_BASE_URL: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";
const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
];
const BUNDLED_DATA: &str = "data/mnist-desk";

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn config(m: impl Into<String>) -> Self {
        CliError { code: 2, message: m.into() }
    }

    fn data(m: impl Into<String>) -> Self {
        CliError { code: 3, message: m.into() }
    }

    fn io(m: impl Into<String>) -> Self {
        CliError { code: 5, message: m.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Format(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io(_) => 5,
            _ => 2,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn resolve_config(sel: &ConfigSel, checkpoint: Option<&Path>) -> CliResult<RunConfig> {
    if let Some(path) = &sel.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        return Ok(RunConfig::from_json(&text)?);
    }
    if let Some(name) = &sel.preset {
        return Ok(RunConfig::preset(name)?);
    }
    if let Some(ckpt) = checkpoint {
        let beside = ckpt.with_file_name("config.json");
        if beside.exists() {
            let text = fs::read_to_string(&beside)?;
            return Ok(RunConfig::from_json(&text)?);
        }
    }
    Ok(RunConfig::preset("mnist-aat++-desk")?)
}

fn apply_attack(a: &mut AttackConfig, o: &AttackOverride) -> CliResult {
    if let Some(n) = &o.attack_norm {
        a.norm = n.parse()?;
    }
    if let Some(e) = o.eps {
        a.epsilon = e;
    }
    if let Some(al) = o.alpha {
        a.alpha = al;
    }
    if let Some(k) = o.steps {
        a.steps = k;
    }
    Ok(())
}

fn overrides_given(o: &AttackOverride) -> bool {
    o.attack_norm.is_some() || o.eps.is_some() || o.alpha.is_some() || o.steps.is_some()
}

fn data_dir(sel: &ConfigSel, configured: &Option<String>) -> CliResult<PathBuf> {
    if let Some(d) = &sel.data_dir {
        return Ok(d.clone());
    }
    if let Some(d) = configured {
        return Ok(PathBuf::from(d));
    }
    if let Ok(d) = std::env::var("AAT_DATA_DIR") {
        return Ok(PathBuf::from(d));
    }
    if Path::new(BUNDLED_DATA).is_dir() {
        return Ok(PathBuf::from(BUNDLED_DATA));
    }
    Err(CliError::data("no data directory: pass --data-dir or set AAT_DATA_DIR"))
}

fn load_data(cfg: &RunConfig, sel: &ConfigSel, split: Split) -> CliResult<Dataset> {
    let dir = match &cfg.data {
        DataSource::Mnist { dir, .. } => data_dir(sel, dir)?,
        DataSource::Dilemma { .. } => PathBuf::new(),
    };
    cfg.load_split(split, &dir, sel.subset).map_err(|e| match e {
        Error::Io(_) | Error::Format(_) => CliError::data(e.to_string()),
        other => other.into(),
    })
}

fn load_model(path: &Path, cfg: &RunConfig) -> CliResult<(ThreeWayModel<f32>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let (model, meta) = data::decode_checkpoint(&bytes)?;
    if model.spec().input_shape() != cfg.model.input_shape() {
        return Err(CliError::config(format!(
            "checkpoint takes inputs {:?} but the config's data is {:?}",
            model.spec().input_shape(),
            cfg.model.input_shape()
        )));
    }
    Ok((model, meta))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn make_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))
}

pub fn train(a: TrainArgs) -> CliResult {
    let mut cfg = resolve_config(&a.sel, None)?;
    if let Some(seed) = a.sel.seed {
        cfg.train.seed = seed;
    }
    if let Some(l) = &a.loss {
        cfg.train.loss = l.parse::<LossConfig>()?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    apply_attack(&mut cfg.train.attack_train, &a.attack)?;
    if let (Some(k), DataSource::Mnist { train_subset, .. }) = (a.sel.subset, &mut cfg.data) {
        *train_subset = Some(k);
    }
    cfg.validate()?;
    let train_set = load_data(&cfg, &a.sel, Split::Train)?;
    let monitor = load_data(&cfg, &ConfigSel { subset: None, ..a.sel.clone() }, Split::Test)?;

    make_dir(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let mut log = BufWriter::new(File::create(a.out.join("train.jsonl"))?);
    let mut model = ThreeWayModel::<f32>::init(&cfg.model, cfg.train.seed)?;
    log::info!(
        "training {} samples, loss {}, {} epochs, {} parameters",
        train_set.len(),
        cfg.train.loss,
        cfg.train.epochs,
        model.num_params()
    );
    let logs = training::train(&mut model, &train_set, Some(&monitor), &cfg.train, &mut log)?;
    log.flush()?;
    let meta = CheckpointMeta {
        spec: cfg.model.clone(),
        config_hash: cfg.hash(),
        epoch: cfg.train.epochs,
        seed: cfg.train.seed,
    };
    data::save_checkpoint(&model, &meta, a.out.join("checkpoint.aatd"))?;
    if let Some(last) = logs.last() {
        println!(
            "clean S/R/N {:.2}/{:.2}/{:.2} after {} epochs",
            last.clean.standard, last.clean.robust, last.clean.nonrobust, cfg.train.epochs
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

struct EvalCtx {
    cfg: RunConfig,
    model: ThreeWayModel<f32>,
    test: Dataset,
    attacks: Vec<AttackConfig>,
}

fn eval_ctx(a: &EvalArgs) -> CliResult<EvalCtx> {
    let mut cfg = resolve_config(&a.sel, Some(&a.checkpoint))?;
    if let Some(seed) = a.sel.seed {
        cfg.eval.mixture_seed = seed;
    }
    let mut attacks = cfg.attack_test.clone();
    if overrides_given(&a.attack) {
        let mut base = attacks.first().cloned().unwrap_or_else(AttackConfig::mnist_test);
        apply_attack(&mut base, &a.attack)?;
        attacks = vec![base];
    }
    for atk in &attacks {
        atk.validate()?;
    }
    cfg.validate()?;
    let (model, _) = load_model(&a.checkpoint, &cfg)?;
    let test = load_data(&cfg, &a.sel, Split::Test)?;
    Ok(EvalCtx { cfg, model, test, attacks })
}

fn first_attack(ctx: &EvalCtx) -> CliResult<AttackConfig> {
    ctx.attacks
        .first()
        .cloned()
        .ok_or_else(|| CliError::config("no evaluation attack configured"))
}

pub fn eval(a: EvalArgs) -> CliResult {
    let ctx = eval_ctx(&a)?;
    let seed = (!ctx.attacks.is_empty()).then_some(ctx.cfg.eval.mixture_seed);
    let report = eval::full_report(&ctx.model, &ctx.test, &ctx.attacks, seed)?;
    let table = report.to_table();
    if a.json {
        println!("{}", report.to_json()?);
    } else {
        print!("{table}");
    }
    if let Some(out) = &a.out {
        make_dir(out)?;
        write_json(&out.join("report.json"), &report)?;
        fs::write(out.join("report.txt"), table)?;
    }
    Ok(())
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

pub fn detect(a: EvalArgs) -> CliResult {
    let ctx = eval_ctx(&a)?;
    let attack = first_attack(&ctx)?;
    let mixed = eval::build_mixed_set(&ctx.model, &ctx.test, &attack, ctx.cfg.eval.mixture_seed)?;
    let rad = eval::rad(&ctx.model, &mixed)?;
    let cal = eval::calibrate(&ctx.model, &mixed)?;
    let out = json!({
        "attack": attack,
        "samples": mixed.data.len(),
        "rad": rad,
        "raw": cal.raw,
        "calibrated": cal.calibrated,
    });
    if a.json {
        print_json(&out);
    } else {
        println!(
            "{} mixed samples ({}): RAD {:.2}  raw {:.2}  calibrated {:.2}",
            mixed.data.len(),
            attack.label(),
            rad,
            cal.raw,
            cal.calibrated
        );
    }
    if let Some(dir) = &a.out {
        make_dir(dir)?;
        write_json(&dir.join("detect.json"), &out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CalibratedSample {
    label: usize,
    adversarial: bool,
    standard: usize,
    robust: usize,
    nonrobust: usize,
    flagged: bool,
    calibrated: usize,
}

pub fn calibrate(a: EvalArgs) -> CliResult {
    let ctx = eval_ctx(&a)?;
    let attack = first_attack(&ctx)?;
    let mixed = eval::build_mixed_set(&ctx.model, &ctx.test, &attack, ctx.cfg.eval.mixture_seed)?;
    let mut samples = Vec::with_capacity(mixed.data.len());
    for idx in mixed.data.batches(EVAL_BATCH, 0, false) {
        let (x, y) = mixed.data.gather::<f32>(&idx);
        let out = ctx.model.forward_all(&x)?;
        let (s, r, n) = (out.standard.argmax_rows(), out.robust.argmax_rows(), out.nonrobust.argmax_rows());
        for (k, &i) in idx.iter().enumerate() {
            let flagged = r[k] != n[k];
            samples.push(CalibratedSample {
                label: y[k],
                adversarial: mixed.adversarial[i],
                standard: s[k],
                robust: r[k],
                nonrobust: n[k],
                flagged,
                calibrated: if flagged { r[k] } else { s[k] },
            });
        }
    }
    let cal = eval::calibrate(&ctx.model, &mixed)?;
    let summary = json!({ "attack": attack, "samples": samples.len(), "raw": cal.raw, "calibrated": cal.calibrated });
    if a.json {
        print_json(&summary);
    } else {
        println!("raw {:.2} -> calibrated {:.2} on {} mixed samples", cal.raw, cal.calibrated, samples.len());
    }
    if let Some(dir) = &a.out {
        make_dir(dir)?;
        write_json(&dir.join("calibration.json"), &json!({ "summary": summary, "samples": samples }))?;
    }
    Ok(())
}

pub fn attack(a: AttackArgs) -> CliResult {
    let way: Way = a.way.parse()?;
    let ctx = eval_ctx(&a.eval)?;
    let attack = first_attack(&ctx)?;
    let mut adv_data = Vec::with_capacity(ctx.test.data().len());
    let mut clean_hits = [0usize; 3];
    let mut adv_hits = [0usize; 3];
    let mut worst = 0.0f64;
    for idx in ctx.test.batches(EVAL_BATCH, 0, false) {
        let (x, y) = ctx.test.gather::<f32>(&idx);
        let adv = pgd(&ctx.model, &x, &y, way, &attack)?;
        worst = worst.max(max_perturbation(&x, &adv, attack.norm));
        let (c, d) = (ctx.model.forward_all(&x)?, ctx.model.forward_all(&adv)?);
        for (k, w) in Way::ALL.into_iter().enumerate() {
            let hit = |t: &Tensor<f32>| t.argmax_rows().iter().zip(&y).filter(|(p, l)| p == l).count();
            clean_hits[k] += hit(c.get(w));
            adv_hits[k] += hit(d.get(w));
        }
        adv_data.extend_from_slice(adv.data());
    }
    let n = ctx.test.len() as f64;
    let pct = |h: [usize; 3]| json!({ "standard": 100.0 * h[0] as f64 / n, "robust": 100.0 * h[1] as f64 / n, "nonrobust": 100.0 * h[2] as f64 / n });
    let summary = json!({
        "attack": attack,
        "target_way": way,
        "samples": ctx.test.len(),
        "clean": pct(clean_hits),
        "adversarial": pct(adv_hits),
        "max_perturbation": worst,
        "within_budget": worst <= attack.epsilon + 1e-5,
    });
    print_json(&summary);
    if let Some(dir) = &a.eval.out {
        make_dir(dir)?;
        write_json(&dir.join("attack.json"), &summary)?;
        if let [1, h, w] = *ctx.test.sample_shape() {
            let bytes: Vec<u8> = adv_data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
            data::write_idx_images(dir.join("adv-images-idx3-ubyte"), ctx.test.len(), h, w, &bytes)?;
            let labels: Vec<u8> = ctx.test.labels().iter().map(|&l| l as u8).collect();
            data::write_idx_labels(dir.join("adv-labels-idx1-ubyte"), &labels)?;
        }
    }
    Ok(())
}

fn dilemma_spec(a: &DilemmaArgs) -> CliResult<DilemmaSpec> {
    let mut spec = if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        match RunConfig::from_json(&text)?.data {
            DataSource::Dilemma { spec, .. } => spec,
            DataSource::Mnist { .. } => return Err(CliError::config("config has no dilemma data section")),
        }
    } else if let Some(name) = &a.preset {
        match RunConfig::preset(name)?.data {
            DataSource::Dilemma { spec, .. } => spec,
            DataSource::Mnist { .. } => return Err(CliError::config(format!("preset '{name}' is not a dilemma preset"))),
        }
    } else {
        DilemmaSpec::default()
    };
    if let Some(p) = a.p {
        spec.p = p;
    }
    if let Some(eta) = &a.eta {
        spec.eta = eta
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::config(format!("bad --eta: {e}")))?;
        spec.d = spec.eta.len();
    }
    if let Some(d) = a.d {
        if a.eta.is_none() && d != spec.d {
            return Err(CliError::config("--d without --eta must match the eta length"));
        }
        spec.d = d;
    }
    if let Some(e) = a.eps {
        spec.epsilon = e;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn dilemma(a: DilemmaArgs) -> CliResult {
    let spec = dilemma_spec(&a)?;
    let report = dilemma::report(&spec, a.n, a.seed)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.to_table());
        if report.rows.iter().any(|r| r.quoted_standard.is_some()) {
            println!("quoted: truncated closed forms; exact columns are full enumeration");
        }
    }
    if let Some(dir) = &a.out {
        make_dir(dir)?;
        write_json(&dir.join("dilemma.json"), &report)?;
    }
    Ok(())
}

fn sample_tensor(ds: &Dataset, index: usize) -> CliResult<(Tensor<f32>, usize)> {
    if index >= ds.len() {
        return Err(CliError::data(format!("sample index {index} out of range ({} samples)", ds.len())));
    }
    let x = Tensor::new(ds.sample_shape().to_vec(), ds.sample(index).to_vec())?;
    Ok((x, ds.labels()[index]))
}

fn image_of(x: &Tensor<f32>, index: usize) -> CliResult<ImageArtifact> {
    Ok(ImageArtifact::new(
        x.shape(),
        x.data().to_vec(),
        Provenance { sample: Some(index), source: "input".into(), operation: "identity".into() },
    )?)
}

pub fn invert(a: InvertArgs) -> CliResult {
    let cfg = resolve_config(&a.sel, Some(&a.checkpoint))?;
    let reps = match a.rep.as_str() {
        "both" => vec![Representation::Robust, Representation::NonRobust],
        other => vec![other.parse::<Representation>()?],
    };
    let (model, _) = load_model(&a.checkpoint, &cfg)?;
    let test = load_data(&cfg, &ConfigSel { subset: None, ..a.sel.clone() }, Split::Test)?;
    let (x, label) = sample_tensor(&test, a.index)?;
    make_dir(&a.out)?;
    image_of(&x, a.index)?.write_pnm(a.out.join("sample.pgm"))?;
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(x.shape());
    let xb = x.clone().reshape(&batch_shape)?;
    let mut results = Vec::new();
    for rep in reps {
        let target = model.encode(&xb, rep)?.into_data();
        let inv = invert_representation(&model, &target, rep, a.steps, a.lr, a.sel.seed.unwrap_or(0))?;
        let mut img = inv.image.clone();
        img.provenance.sample = Some(a.index);
        img.write_pnm(a.out.join(format!("invert-{rep}.pgm")))?;
        println!(
            "{rep}: distance {:.6} -> {:.6} (relative {:.6})",
            inv.initial_distance,
            inv.distance,
            inv.relative_distance()
        );
        results.push(json!({
            "representation": rep,
            "initial_distance": inv.initial_distance,
            "distance": inv.distance,
            "relative_distance": inv.relative_distance(),
        }));
    }
    write_json(
        &a.out.join("inversion.json"),
        &json!({ "index": a.index, "label": label, "steps": a.steps, "lr": a.lr, "results": results }),
    )
}

pub fn grad_viz(a: GradVizArgs) -> CliResult {
    let cfg = resolve_config(&a.sel, Some(&a.checkpoint))?;
    let ways = match a.way.as_str() {
        "all" => Way::ALL.to_vec(),
        other => vec![other.parse::<Way>()?],
    };
    let (model, _) = load_model(&a.checkpoint, &cfg)?;
    let test = load_data(&cfg, &ConfigSel { subset: None, ..a.sel.clone() }, Split::Test)?;
    let (x, label) = sample_tensor(&test, a.index)?;
    make_dir(&a.out)?;
    image_of(&x, a.index)?.write_pnm(a.out.join("sample.pgm"))?;
    for way in ways {
        let img = grad_visual(&model, &x, label, way, Some(a.index))?;
        let path = a.out.join(format!("grad-{way}.pgm"));
        img.write_pnm(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn fetch(a: FetchArgs) -> CliResult {
    let dest = match (&a.dest, std::env::var("AAT_DATA_DIR")) {
        (Some(d), _) => d.clone(),
        (None, Ok(d)) => PathBuf::from(d),
        (None, Err(_)) => return Err(CliError::config("pass --dest or set AAT_DATA_DIR")),
    };
    make_dir(&dest)?;
    for name in MNIST_FILES {
        let url = format!("{}/{name}", a.base_url.trim_end_matches('/'));
        log::info!("fetching {url}");
        let mut resp = ureq::get(&url).call().map_err(|e| CliError::io(format!("{url}: {e}")))?;
        let mut bytes = Vec::new();
        resp.body_mut()
            .as_reader()
            .read_to_end(&mut bytes)
            .map_err(|e| CliError::io(format!("{url}: {e}")))?;
        fs::write(dest.join(name), bytes)?;
    }
    for split in ["train", "t10k"] {
        let ds = data::load_mnist_split(&dest, split).map_err(|e| CliError::data(e.to_string()))?;
        println!("{split}: {} samples", ds.len());
    }
    Ok(())
}

pub fn config(a: ConfigArgs) -> CliResult {
    if a.list {
        for name in PRESETS {
            println!("{name}");
        }
        return Ok(());
    }
    let sel = ConfigSel { config: a.config, preset: a.preset, ..ConfigSel::default() };
    if sel.config.is_none() && sel.preset.is_none() {
        return Err(CliError::config("pass --config, --preset or --list"));
    }
    let cfg = resolve_config(&sel, None)?;
    cfg.validate()?;
    println!("{}", cfg.to_json()?);
    log::info!("config hash {}", cfg.hash());
    Ok(())
}
