use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use lrnet::cost::{check_target, lr_layer_flops, network_cost, published_target};
use lrnet::gradcheck::{default_base_config, run_cases, sweep_configs, GradCheckOptions, Mutation};
use lrnet::local_relation::{lr_forward, lr_forward_optimized, materialize_prior, LocalRelationConfig, LocalRelationParams};
use lrnet::model::{plan_network, Layer, NetSpec, NetworkInstance};
use lrnet::ops::{conv2d_fwd, Conv2d};
use lrnet::train::data::{cifar10_files, load_cifar10_dir};
use lrnet::train::{evaluate, load_network, metrics_csv, synthetic_blobs, train, Dataset, CIFAR_NORMALIZATION};
use lrnet::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DataConfig, RunConfig};
use crate::{Cli, Command, DataArgs, Failure, MutationArg};

pub fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    if let Some(m) = &g.model {
        cfg.model = m.clone();
    }
    cfg.lr.merge(&g.lr_overrides());
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(w) = g.workers {
        cfg.workers = Some(w);
    }
    cfg.train.seed = cfg.seed;
    match &cli.command {
        Command::Train { data, epochs, batch_size, base_lr, out_dir } => {
            apply_data_args(&mut cfg, data);
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = *b;
            }
            if let Some(lr) = base_lr {
                cfg.train.schedule.base_lr = *lr;
            }
            if let Some(d) = out_dir {
                cfg.out_dir = d.clone();
            }
        }
        Command::Eval { data, .. } => apply_data_args(&mut cfg, data),
        _ => {}
    }
    let workers = match cli.command {
        Command::Gradcheck { .. } => 1,
        _ => cfg.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
    };
    if workers == 0 {
        return Err(Failure::Usage("--workers must be positive".into()));
    }
    cfg.echo();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| match cli.command {
        Command::Gradcheck { mutate, json } => gradcheck(&cfg, mutate, json),
        Command::Flops { spec, assert_paper, csv } => flops(&cfg, spec.as_deref(), assert_paper, csv.as_deref()),
        Command::Bench { shape, repeats, kernels } => bench(&cfg, &shape, repeats, &kernels),
        Command::Train { .. } => train_cmd(&cfg),
        Command::Eval { checkpoint, .. } => eval_cmd(&cfg, &checkpoint),
        Command::ExportPrior { checkpoint, layer, out } => export_prior(&cfg, checkpoint.as_deref(), &layer, out.as_deref()),
    })
}

fn apply_data_args(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(dir) = &a.data_dir {
        cfg.data = DataConfig::Cifar10 { dir: dir.clone(), train_subset: None, val_subset: None };
    }
    if let DataConfig::Cifar10 { train_subset, val_subset, .. } = &mut cfg.data {
        if a.train_subset.is_some() {
            *train_subset = a.train_subset;
        }
        if a.val_subset.is_some() {
            *val_subset = a.val_subset;
        }
    }
}

fn gradcheck(cfg: &RunConfig, mutate: Option<MutationArg>, json: bool) -> Result<(), Failure> {
    let mut base = default_base_config();
    if let Some(k) = cfg.lr.kernel {
        base.kernel = k;
    }
    if let Some(d) = cfg.lr.qk_dim {
        base.qk_dim = d;
    }
    if let Some(m) = cfg.lr.channels_per_group {
        if m == 0 || m > 16 {
            return Err(Failure::Usage(format!("gradcheck supports channel_share 1..=16, got {m}")));
        }
        base.channels_per_group = m;
        base.channels = m * (8 / m).max(1);
    }
    let side = if base.kernel > 5 { 8 } else { 6 };
    let shape = Shape::new(2, base.channels, side, side);
    let (variant, geo, norm) = (cfg.lr.variant()?, cfg.lr.geo()?, cfg.lr.norm()?);
    let cases: Vec<LocalRelationConfig> = sweep_configs(&base)
        .into_iter()
        .filter(|c| variant.is_none_or(|v| v == c.variant))
        .filter(|c| geo.is_none_or(|g| g == c.geo_mode))
        .filter(|c| norm.is_none_or(|n| n == c.normalization))
        .collect();
    for c in &cases {
        c.validate()?;
    }
    let mutation = match mutate {
        None => Mutation::None,
        Some(MutationArg::NegateThetaG) => Mutation::NegateThetaG,
        Some(MutationArg::DropQkPath) => Mutation::DropQueryKeyPath,
    };
    let opts = GradCheckOptions { mutation, ..Default::default() };
    let report = run_cases(&cases, shape, cfg.seed, &opts)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(lrnet::Error::from)?);
    } else {
        print!("{}", report.to_text());
    }
    if report.passed() {
        Ok(())
    } else {
        let failing: Vec<String> = report
            .cases
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{} ({})", c.label, c.failing_groups().join(",")))
            .collect();
        Err(Failure::Check(format!("gradient mismatch in {}", failing.join("; "))))
    }
}

fn flops(cfg: &RunConfig, spec_path: Option<&Path>, assert_paper: bool, csv: Option<&Path>) -> Result<(), Failure> {
    let spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
            let mut s = NetSpec::from_json(&text)?;
            cfg.lr.apply(&mut s.lr)?;
            s
        }
        None => {
            let mut s = cfg.preset()?.spec();
            cfg.lr.apply(&mut s.lr)?;
            s
        }
    };
    spec.validate()?;
    let report = network_cost(&plan_network(&spec)?);
    print!("{}", report.to_text());
    if !report.lr_checks.is_empty() {
        let lo = report.lr_checks.iter().map(|c| c.ratio).fold(f64::INFINITY, f64::min);
        let hi = report.lr_checks.iter().map(|c| c.ratio).fold(f64::NEG_INFINITY, f64::max);
        println!("local relation layers {}  exact/formula ratio {lo:.3}..{hi:.3}", report.lr_checks.len());
    }
    if let Some(p) = csv {
        fs::write(p, report.to_csv())?;
    }
    if assert_paper {
        let preset = match spec_path {
            Some(_) => spec.name.parse()?,
            None => cfg.preset()?,
        };
        let target = published_target(preset).ok_or_else(|| Failure::Usage(format!("no published size for {preset}")))?;
        let check = check_target(&report, &target);
        println!(
            "target {preset}: params {:.2}M vs {:.1}M ({:+.2}%, tol {:.0}%) {}; flops {:.3}G vs {:.1}G ({:+.2}%, tol {:.0}%) {}",
            report.total_params as f64 / 1e6,
            target.params / 1e6,
            check.params_rel * 100.0,
            target.params_tol * 100.0,
            if check.params_ok { "ok" } else { "FAIL" },
            report.total_flops as f64 / 1e9,
            target.flops / 1e9,
            check.flops_rel * 100.0,
            target.flops_tol * 100.0,
            if check.flops_ok { "ok" } else { "FAIL" },
        );
        if !check.passed() {
            return Err(Failure::Check(format!("{preset} totals outside the published tolerance")));
        }
    }
    Ok(())
}

fn parse_shape(s: &str) -> Result<Shape, Failure> {
    let d: Vec<usize> = s
        .split('x')
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("shape `{s}` is not NxCxHxW")))?;
    match d[..] {
        [n, c, h, w] if n > 0 && c > 0 && h > 0 && w > 0 => Ok(Shape::new(n, c, h, w)),
        _ => Err(Failure::Usage(format!("shape `{s}` is not NxCxHxW with positive extents"))),
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * p).round() as usize]
}

fn bench(cfg: &RunConfig, shape: &str, repeats: usize, kernels: &[String]) -> Result<(), Failure> {
    if repeats == 0 {
        return Err(Failure::Usage("repeats must be positive".into()));
    }
    for k in kernels {
        if !["reference", "optimized", "conv3x3"].contains(&k.as_str()) {
            return Err(Failure::Usage(format!("unknown kernel `{k}` (expected reference|optimized|conv3x3)")));
        }
    }
    let shape = parse_shape(shape)?;
    let mut lr_cfg = LocalRelationConfig { channels: shape.c, stride: 1, out_channels: None, ..lrnet::model::spec::default_lr_template() };
    cfg.lr.apply(&mut lr_cfg)?;
    lr_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = Tensor::<f32>::randn(shape, 1.0, &mut rng);
    let params = LocalRelationParams::<f32>::init(&lr_cfg, &mut rng)?;
    let per_image = lr_layer_flops(&lr_cfg, shape.h, shape.w).exact();
    let conv_out = ((per_image as f64 / (9 * shape.c * shape.h * shape.w) as f64).round() as usize).max(1);
    let conv = Conv2d::init_he(conv_out, shape.c, 3, 1, &mut rng);
    eprintln!("local relation {} flops/image; conv3x3 {}->{conv_out} for equal cost", per_image, shape.c);
    let mut out = String::from("kernel,shape,median_us,p10_us,p90_us\n");
    let mut medians = Vec::new();
    for k in kernels {
        let run = || -> Result<(), Failure> {
            match k.as_str() {
                "reference" => drop(lr_forward(&x, &params, &lr_cfg)?),
                "optimized" => drop(lr_forward_optimized(&x, &params, &lr_cfg)?),
                _ => drop(conv2d_fwd(&x, &conv)?),
            }
            Ok(())
        };
        run()?;
        let mut t = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            run()?;
            t.push(start.elapsed().as_secs_f64() * 1e6);
        }
        t.sort_by(f64::total_cmp);
        let med = percentile(&t, 0.5);
        medians.push((k.clone(), med));
        let _ = writeln!(
            out,
            "{k},{}x{}x{}x{},{med:.1},{:.1},{:.1}",
            shape.n,
            shape.c,
            shape.h,
            shape.w,
            percentile(&t, 0.1),
            percentile(&t, 0.9)
        );
    }
    print!("{out}");
    let find = |name: &str| medians.iter().find(|(k, _)| k == name).map(|(_, m)| *m);
    if let (Some(r), Some(o)) = (find("reference"), find("optimized")) {
        eprintln!("optimized speedup over reference: {:.2}x", r / o);
    }
    Ok(())
}

fn load_data(data: &DataConfig) -> Result<(Dataset, Dataset), Failure> {
    match data {
        DataConfig::Cifar10 { dir, train_subset, val_subset } => {
            if !dir.is_dir() {
                return Err(Failure::Usage(format!("dataset directory {} does not exist", dir.display())));
            }
            let (train_files, test_file) = cifar10_files(dir);
            if let Some(missing) = train_files.iter().chain([&test_file]).find(|f| !f.is_file()) {
                return Err(Failure::Usage(format!("dataset file {} does not exist", missing.display())));
            }
            let (mut tr, mut va) = load_cifar10_dir(dir, &CIFAR_NORMALIZATION)?;
            if let Some(n) = train_subset {
                tr = tr.take(*n);
            }
            if let Some(n) = val_subset {
                va = va.take(*n);
            }
            Ok((tr, va))
        }
        DataConfig::Synthetic { blobs, n_train, n_val } => Ok(synthetic_blobs(blobs, *n_train, *n_val)?),
    }
}

fn train_cmd(cfg: &RunConfig) -> Result<(), Failure> {
    let (tr, va) = load_data(&cfg.data)?;
    let spec = cfg.net_spec()?;
    let mut net = NetworkInstance::<f32>::build(&spec, cfg.seed)?;
    eprintln!("{}: {} parameters, {} train / {} val examples", spec.name, net.num_params(), tr.len(), va.len());
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.json"), serde_json::to_string_pretty(cfg).map_err(lrnet::Error::from)?)?;
    let rows = train(&mut net, &tr, &va, &cfg.train, Some(&cfg.out_dir))?;
    print!("{}", metrics_csv(&rows));
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, checkpoint: &Path) -> Result<(), Failure> {
    if !checkpoint.is_file() {
        return Err(Failure::Usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let (_, va) = load_data(&cfg.data)?;
    let (net, meta) = load_network::<f32>(checkpoint)?;
    let (loss, top1) = evaluate(&net, &va, cfg.train.eval_batch_size)?;
    println!("epoch,val_loss,val_top1");
    println!("{},{loss},{top1}", meta.epoch);
    Ok(())
}

fn export_prior(cfg: &RunConfig, checkpoint: Option<&Path>, layer: &str, out: Option<&Path>) -> Result<(), Failure> {
    let net = match checkpoint {
        Some(p) if !p.is_file() => return Err(Failure::Usage(format!("checkpoint {} does not exist", p.display()))),
        Some(p) => load_network::<f32>(p)?.0,
        None => NetworkInstance::build(&cfg.net_spec()?, cfg.seed)?,
    };
    let named = net.find_layer(layer).ok_or_else(|| lrnet::Error::UnknownLayer(layer.to_string()))?;
    let Layer::Lr { cfg: lr_cfg, params } = &named.layer else {
        return Err(Failure::Usage(format!("layer `{layer}` is not a local relation layer")));
    };
    let table = materialize_prior(params, lr_cfg)?;
    let soft = table.softmax();
    let k = table.kernel;
    let mut s = String::from("group,row");
    for i in 0..k {
        let _ = write!(s, ",logit_{i}");
    }
    for i in 0..k {
        let _ = write!(s, ",softmax_{i}");
    }
    s.push('\n');
    for g in 0..table.groups {
        for row in 0..k {
            let at = (g * k + row) * k;
            let _ = write!(s, "{g},{row}");
            for v in &table.values[at..at + k] {
                let _ = write!(s, ",{v}");
            }
            for v in &soft[at..at + k] {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    match out {
        Some(p) => fs::write(p, s)?,
        None => print!("{s}"),
    }
    Ok(())
}
