use std::fs;
use std::path::{Path, PathBuf};

use abcm_core::abcm::{GateConfig, GateMode, DEFAULT_EPSILON, DEFAULT_TAU};
use abcm_core::codec::{ChannelConfig, CodecModel};
use abcm_core::container::{load_model, save_model};
use abcm_core::cost::{bench as time_model, compare, count_flops, speedup, CostTable, DEFAULT_ROUNDS, DEFAULT_WARMUP};
use abcm_core::greedy::{greedy_search, LayerOrder, SearchConfig};
use abcm_core::images::{load_images, synthetic, ImageRecord};
use abcm_core::pruner::{extract_plan, prune as prune_model, verify_equivalence};
use abcm_core::report::{bar_chart, f, line_plot, Csv};
use abcm_core::trainer::{evaluate, gamma_sweep, train as train_model, TrainConfig};
use abcm_core::{RngState, Tensor};

use crate::settings::Settings;
use crate::{BenchArgs, CliError, EvalArgs, ModelArgs, PruneArgs, SearchArgs, SweepArgs, TrainArgs, TrainingArgs};

const TOOL: &str = concat!("abcm ", env!("CARGO_PKG_VERSION"));
const FLOP_CONVENTION: &str = "multiply-add = 2 FLOPs; transposed conv MACs at input size; GDN (2C^2+4C)HW; mask CHW; entropy 13/element";

pub struct Ctx {
    out_dir: PathBuf,
    settings: Settings,
}

impl Ctx {
    pub fn new(out_dir: PathBuf, settings: Settings) -> Result<Self, CliError> {
        fs::create_dir_all(&out_dir).map_err(|e| CliError::failed(format!("{}: {e}", out_dir.display())))?;
        Ok(Self { out_dir, settings })
    }

    /// A table whose header records the tool and the effective settings.
    fn table(&self, command: &str, columns: &[&str]) -> Csv {
        let mut csv = Csv::new(columns);
        csv.comment("tool", TOOL).comment("command", command);
        for (k, v) in self.settings.effective() {
            csv.comment(format!("config.{k}"), v.clone());
        }
        csv
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::failed(format!("{}: {e}", path.display())))?;
        println!("wrote {}", path.display());
        Ok(path)
    }

    fn meta(&self, command: &str) -> Vec<(String, String)> {
        let mut meta = vec![("tool".to_string(), TOOL.to_string()), ("command".to_string(), command.to_string())];
        meta.extend(self.settings.effective().iter().map(|(k, v)| (format!("config.{k}"), v.clone())));
        meta
    }

    fn save(&self, name: &str, model: &CodecModel, command: &str) -> Result<(), CliError> {
        let path = self.out_dir.join(name);
        save_model(&path, model, &self.meta(command))?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn required(ctx: &mut Ctx, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let v: Option<String> = ctx.settings.get_opt(key, flag.map(|p| p.display().to_string()))?;
    v.map(PathBuf::from)
        .ok_or_else(|| CliError::usage(format!("missing --{} (or `{key}` in the config file)", key.replace('_', "-"))))
}

fn images(spec: &str) -> Result<Vec<ImageRecord>, CliError> {
    Ok(load_images(spec)?)
}

fn tensors(records: &[ImageRecord]) -> Result<Vec<Tensor>, CliError> {
    records
        .iter()
        .map(|r| {
            r.to_tensor(16)
                .ok_or_else(|| CliError::failed(format!("{} is smaller than 16x16", r.source)))
        })
        .collect()
}

fn load(path: &Path) -> Result<CodecModel, CliError> {
    Ok(load_model(path)?.model)
}

fn build_model(ctx: &mut Ctx, a: &ModelArgs, seed: u64) -> Result<CodecModel, CliError> {
    let s = &mut ctx.settings;
    let hidden = s.get("hidden", a.hidden, 8usize)?;
    let latent = s.get("latent", a.latent, 12usize)?;
    let gate = s.get("gate", a.gate.clone(), "deterministic".to_string())?;
    let epsilon = s.get("epsilon", a.epsilon, DEFAULT_EPSILON)?;
    let tau = s.get("tau", a.tau, DEFAULT_TAU)?;
    let gate = match gate.as_str() {
        "none" => None,
        other => Some(GateConfig {
            mode: other.parse::<GateMode>()?,
            epsilon,
            tau,
        }),
    };
    let config = ChannelConfig::new(hidden, latent);
    Ok(CodecModel::new(config, gate, &mut RngState::new(seed).fork(0))?)
}

fn train_config(ctx: &mut Ctx, a: &TrainingArgs) -> Result<(TrainConfig, String, String), CliError> {
    let s = &mut ctx.settings;
    let d = TrainConfig::default();
    let data = s.get("data", a.data.clone(), "synthetic:0:16:64".to_string())?;
    let eval = s.get("eval", a.eval.clone(), "synthetic:1:4:64".to_string())?;
    let cfg = TrainConfig {
        lambda: s.get("lambda", a.lambda, d.lambda)?,
        gamma: s.get("gamma", a.gamma, d.gamma)?,
        lr: s.get("lr", a.lr, d.lr)?,
        mask_lr: Some(s.get("mask_lr", a.mask_lr, d.mask_lr.unwrap_or(d.lr))?),
        steps: s.get("steps", a.steps, d.steps)?,
        batch_size: s.get("batch", a.batch, d.batch_size)?,
        patch: s.get("patch", a.patch, d.patch)?,
        seed: s.get("seed", a.seed, d.seed)?,
        lr_halve_at: s.get_opt("lr_halve_at", a.lr_halve_at)?,
    };
    cfg.validate()?;
    Ok((cfg, data, eval))
}

pub fn train(ctx: &mut Ctx, a: TrainArgs) -> Result<(), CliError> {
    let (cfg, data_spec, eval_spec) = train_config(ctx, &a.training)?;
    let mut model = build_model(ctx, &a.model, cfg.seed)?;
    let model_out = ctx.settings.get("model_out", a.model_out, "model.abcm".to_string())?;
    let data = images(&data_spec)?;
    let eval_set = images(&eval_spec)?;
    eprintln!("train: {} steps on {} images", cfg.steps, data.len());
    let report = train_model(&mut model, &data, &eval_set, &cfg)?;

    let mut curve = ctx.table("train", &["step", "lr", "rate_bpp", "distortion_mse", "s_mean", "total"]);
    for r in &report.curve {
        let l = &r.loss;
        curve.row(vec![
            r.step.to_string(),
            r.lr.to_string(),
            f(l.rate, 6),
            f(l.distortion, 4),
            f(l.s_mean, 6),
            f(l.total, 6),
        ]);
    }
    ctx.write("train_curve.csv", &curve.render())?;
    let mut usage = ctx.table("train", &["layer", "kept", "channels", "ratio"]);
    for l in &report.usage.layers {
        usage.row(vec![l.slot.to_string(), l.kept.to_string(), l.channels.to_string(), f(l.ratio(), 6)]);
    }
    usage.comment("mean_ratio", f(report.usage.mean_ratio, 6));
    ctx.write("train_usage.csv", &usage.render())?;

    if let Some(step) = report.diverged_at {
        return Err(CliError::failed(format!("training diverged at step {step}; model not written")));
    }
    let mut summary = ctx.table("train", &["images", "bpp", "psnr_db", "mse", "mean_ratio"]);
    if let Some(e) = &report.eval {
        summary.row(vec![
            e.images.to_string(),
            f(e.bpp, 6),
            f(e.psnr, 4),
            f(e.mse, 4),
            f(report.usage.mean_ratio, 6),
        ]);
    }
    ctx.write("train_eval.csv", &summary.render())?;
    ctx.save(&model_out, &model, "train")
}

pub fn prune(ctx: &mut Ctx, a: PruneArgs) -> Result<(), CliError> {
    let path = required(ctx, "model", a.model)?;
    let inputs_spec = ctx.settings.get("inputs", a.inputs, "synthetic:2:8:64".to_string())?;
    let tolerance = ctx.settings.get("tolerance", a.tolerance, 0.0f32)?;
    let out = ctx.settings.get("out", a.out, "slim.abcm".to_string())?;
    let model = load(&path)?;
    let plan = extract_plan(&model)?;
    let slim = prune_model(&model, &plan)?;
    let inputs = tensors(&images(&inputs_spec)?)?;
    let report = verify_equivalence(&model, &slim, &inputs, tolerance)?;

    let diff = plan.config_diff();
    let mut lines = diff.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let mut config = ctx.table("prune", &header);
    config.comment("keep_plan", plan.encode());
    config.comment("pruning_ratio", f(plan.pruning_ratio(), 6));
    for line in lines {
        config.row(line.split(',').map(str::to_string).collect());
    }
    ctx.write("prune_config.csv", &config.render())?;

    let mut eq = ctx.table(
        "prune",
        &["input", "latent_max_diff", "reconstruction_max_diff", "bits_masked", "bits_pruned", "psnr_masked", "psnr_pruned"],
    );
    eq.comment("tolerance", tolerance.to_string());
    eq.comment("max_diff", report.max_diff.to_string());
    eq.comment("pass", report.pass.to_string());
    if let Some(w) = &report.worst {
        eq.comment(
            "worst",
            format!("input {} {} {:?}: masked {} pruned {}", w.input, w.tensor, w.index, w.masked, w.pruned),
        );
    }
    for (i, c) in report.inputs.iter().enumerate() {
        eq.row(vec![
            i.to_string(),
            c.latent_max_diff.to_string(),
            c.reconstruction_max_diff.to_string(),
            f(c.bits_masked, 4),
            f(c.bits_pruned, 4),
            f(c.psnr_masked, 6),
            f(c.psnr_pruned, 6),
        ]);
    }
    ctx.write("equivalence.csv", &eq.render())?;
    if !report.pass {
        return Err(CliError::failed(format!(
            "equivalence check failed: max difference {} exceeds tolerance {tolerance}; slim model not written",
            report.max_diff
        )));
    }
    eprintln!(
        "prune: kept {} of {} masked channels",
        plan.kept_total(),
        plan.channels_total()
    );
    ctx.save(&out, &slim, "prune")
}

pub fn search(ctx: &mut Ctx, a: SearchArgs) -> Result<(), CliError> {
    let path = required(ctx, "model", a.model)?;
    let eval_spec = ctx.settings.get("eval", a.eval, "synthetic:1:4:64".to_string())?;
    let threshold_pct = ctx.settings.get("threshold", a.threshold, 1.0f64)?;
    let order = ctx.settings.get("order", a.order, LayerOrder::default().as_str().to_string())?;
    let cfg = SearchConfig {
        threshold_pct,
        order: order.parse()?,
        slots: None,
    };
    let model = load(&path)?;
    let set = tensors(&images(&eval_spec)?)?;
    let r = greedy_search(&model, &set, &cfg)?;

    let mut curve = ctx.table("search", &["removal", "layer", "channel", "pruning_ratio", "psnr_drop_pct"]);
    curve.comment("baseline_psnr_db", f(r.baseline_psnr, 6));
    curve.comment("total_channels", r.total_channels.to_string());
    curve.comment("evaluations", r.evaluations.to_string());
    curve.comment("keep_plan", r.plan.encode());
    for (i, p) in r.curve.iter().enumerate() {
        curve.row(vec![
            (i + 1).to_string(),
            p.slot.to_string(),
            p.channel.to_string(),
            f(p.ratio, 6),
            f(p.drop_pct, 6),
        ]);
    }
    ctx.write("search_curve.csv", &curve.render())?;
    let mut log = ctx.table("search", &["round", "layer", "channel", "psnr_drop_pct", "removed"]);
    for (i, step) in r.log.iter().enumerate() {
        for &(c, d) in &step.candidates {
            log.row(vec![
                i.to_string(),
                step.slot.to_string(),
                c.to_string(),
                f(d, 6),
                u8::from(step.removed == Some(c)).to_string(),
            ]);
        }
    }
    ctx.write("search_log.csv", &log.render())?;
    let points: Vec<(f64, f64)> = std::iter::once((0.0, 0.0))
        .chain(r.curve.iter().map(|p| (p.ratio, p.drop_pct)))
        .collect();
    let svg = line_plot(
        &format!("Greedy search, threshold {threshold_pct}%"),
        "pruning ratio",
        "PSNR drop (%)",
        &[("greedy".to_string(), points)],
    );
    ctx.write("search_curve.svg", &svg)?;
    eprintln!(
        "search: pruned {} of {} channels, drop {:.3}%",
        r.curve.len(),
        r.total_channels,
        r.final_drop_pct()
    );
    Ok(())
}

fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::usage(format!("size must look like 256x256, got `{s}`"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

/// A deterministic `h x w` input for timing.
fn bench_input(h: usize, w: usize) -> Result<Tensor, CliError> {
    let img = synthetic(0, 1, h.max(w)).remove(0);
    Ok(Tensor::new(&[1, 3, h, w], img.crop_planar(0, 0, w, h))?)
}

fn cost_rows(csv: &mut Csv, tag: &str, table: &CostTable) {
    for l in &table.layers {
        csv.row(vec![
            tag.to_string(),
            l.name.clone(),
            l.kind.as_str().to_string(),
            l.params.to_string(),
            l.flops.to_string(),
        ]);
    }
    csv.row(vec![
        tag.to_string(),
        "network".into(),
        "total".into(),
        table.network_params().to_string(),
        table.network_flops().to_string(),
    ]);
}

pub fn bench(ctx: &mut Ctx, a: BenchArgs) -> Result<(), CliError> {
    let path = required(ctx, "model", a.model)?;
    let baseline_path: Option<String> = ctx.settings.get_opt("baseline", a.baseline.map(|p| p.display().to_string()))?;
    let eval_spec = ctx.settings.get("eval", a.eval, "synthetic:1:4:64".to_string())?;
    let size = ctx.settings.get("size", a.size, "256x256".to_string())?;
    let warmup = ctx.settings.get("warmup", a.warmup, DEFAULT_WARMUP)?;
    let rounds = ctx.settings.get("rounds", a.rounds, DEFAULT_ROUNDS)?;
    let (h, w) = parse_size(&size)?;
    let model = load(&path)?;
    let baseline = baseline_path.map(|p| load(Path::new(&p))).transpose()?;
    let input = bench_input(h, w)?;

    let mut cost = ctx.table("bench", &["model", "layer", "kind", "params", "flops"]);
    cost.comment("flop_convention", FLOP_CONVENTION);
    cost.comment("input", format!("{h}x{w}"));
    let table = count_flops(&model, h, w)?;
    if let Some(b) = &baseline {
        cost_rows(&mut cost, "baseline", &count_flops(b, h, w)?);
    }
    cost_rows(&mut cost, "model", &table);
    ctx.write("cost.csv", &cost.render())?;
    let bars: Vec<(String, f64)> = table.layers.iter().map(|l| (l.name.clone(), l.flops as f64)).collect();
    ctx.write("cost_flops.svg", &bar_chart(&format!("FLOPs per layer, {h}x{w}"), "FLOPs", &bars))?;

    if let Some(b) = &baseline {
        let set = tensors(&images(&eval_spec)?)?;
        let r = compare(b, &model, &set, h, w)?;
        let mut cmp = ctx.table(
            "bench",
            &["psnr_baseline_db", "psnr_model_db", "psnr_drop_pct", "params_ratio", "flops_ratio"],
        );
        cmp.comment("flop_convention", FLOP_CONVENTION);
        cmp.row(vec![
            f(r.baseline_eval.psnr, 6),
            f(r.pruned_eval.psnr, 6),
            f(r.psnr_drop_pct, 6),
            f(r.params_ratio, 6),
            f(r.flops_ratio, 6),
        ]);
        ctx.write("comparison.csv", &cmp.render())?;
    }

    eprintln!("bench: {warmup} warm-up and {rounds} timed rounds at {h}x{w}");
    let mut timing = ctx.table("bench", &["model", "warmup", "rounds", "mean_s", "speedup"]);
    let mut per_round = ctx.table("bench", &["model", "round", "seconds"]);
    let base_timing = baseline.as_ref().map(|b| time_model(b, &input, warmup, rounds)).transpose()?;
    let timed = time_model(&model, &input, warmup, rounds)?;
    let mut entries = Vec::new();
    if let Some(t) = &base_timing {
        entries.push(("baseline", t, String::new()));
    }
    let gain = base_timing.as_ref().map_or(String::new(), |b| f(speedup(b, &timed), 4));
    entries.push(("model", &timed, gain));
    for (tag, t, gain) in entries {
        timing.row(vec![tag.into(), t.warmup.to_string(), t.rounds.to_string(), format!("{:.6e}", t.mean), gain]);
        for (i, s) in t.samples.iter().enumerate() {
            per_round.row(vec![tag.into(), i.to_string(), format!("{s:.6e}")]);
        }
    }
    ctx.write("timing.csv", &timing.render())?;
    ctx.write("timing_rounds.csv", &per_round.render())?;
    Ok(())
}

pub fn eval(ctx: &mut Ctx, a: EvalArgs) -> Result<(), CliError> {
    let path = required(ctx, "model", a.model)?;
    let eval_spec = ctx.settings.get("eval", a.eval, "synthetic:1:4:64".to_string())?;
    let model = load(&path)?;
    let set = images(&eval_spec)?;
    let mut csv = ctx.table("eval", &["image", "bpp", "psnr_db", "mse"]);
    for img in &set {
        let e = evaluate(&model, std::slice::from_ref(img))?;
        csv.row(vec![img.source.clone(), f(e.bpp, 6), f(e.psnr, 4), f(e.mse, 4)]);
    }
    let all = evaluate(&model, &set)?;
    csv.row(vec!["mean".into(), f(all.bpp, 6), f(all.psnr, 4), f(all.mse, 4)]);
    ctx.write("eval.csv", &csv.render())?;
    eprintln!("eval: {:.4} bpp, {:.2} dB over {} images", all.bpp, all.psnr, all.images);
    Ok(())
}

pub fn sweep(ctx: &mut Ctx, a: SweepArgs) -> Result<(), CliError> {
    let (cfg, data_spec, eval_spec) = train_config(ctx, &a.training)?;
    let template = build_model(ctx, &a.model, cfg.seed)?;
    if !template.has_abcm() {
        return Err(CliError::usage("sweep needs masking modules; use --gate deterministic or stochastic"));
    }
    let list = ctx.settings.get("gammas", a.gammas, "0,0.01,0.1".to_string())?;
    let gammas = list
        .split(',')
        .map(|g| g.trim().parse::<f32>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::usage(format!("gammas `{list}`: {e}")))?;
    let data = images(&data_spec)?;
    let eval_set = images(&eval_spec)?;
    eprintln!("sweep: {} runs of {} steps", gammas.len(), cfg.steps);
    let (rows, _) = gamma_sweep(&template, &data, &eval_set, &cfg, &gammas)?;

    let slots: Vec<String> = template.masks().map(|(s, _)| format!("kept_{s}")).collect();
    let mut columns = vec!["gamma", "psnr_db", "bpp", "mean_ratio"];
    columns.extend(slots.iter().map(String::as_str));
    columns.push("diverged_at");
    let mut csv = ctx.table("sweep", &columns);
    for r in &rows {
        let mut cells = vec![r.gamma.to_string(), f(r.psnr, 4), f(r.bpp, 6), f(r.mean_ratio, 6)];
        cells.extend(r.usage.layers.iter().map(|l| l.kept.to_string()));
        cells.push(r.diverged_at.map_or(String::new(), |s| s.to_string()));
        csv.row(cells);
    }
    ctx.write("sweep.csv", &csv.render())?;
    let ratio: Vec<(f64, f64)> = rows.iter().map(|r| (r.gamma as f64, r.mean_ratio)).collect();
    let svg = line_plot("Effective channels vs sparsity weight", "gamma", "mean kept ratio", &[("mean ratio".into(), ratio)]);
    ctx.write("sweep.svg", &svg)?;
    Ok(())
}
