use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use weightcert::analysis::{
    bound_statistics, generalization_bound, quantize, rademacher_psi_term_multi,
};
use weightcert::attack::{robust_accuracy_sweep_with, weight_pgd, DEFAULT_STEPS};
use weightcert::bounds::{certified_fraction, certify_dataset};
use weightcert::data::{load_idx, subsample};
use weightcert::io::{
    attack_rows, load_network, save_network, write_certificates, write_rows, write_run_record,
    AnalysisRow, QuantizeRow, SweepRow, KIND_ANALYSIS, KIND_ATTACK, KIND_QUANTIZE, KIND_SWEEP,
};
use weightcert::network::accuracy;
use weightcert::trainer::{train_with, LayerNorms};
use weightcert::{AttackConfig, Dataset, Network, PerturbationSpec};

use crate::config::{RunConfig, DEFAULT_EPS_GRID};

#[derive(Debug, Args)]
pub struct DataArgs {
    /// IDX image file.
    #[arg(long)]
    pub data_images: PathBuf,
    /// IDX label file.
    #[arg(long)]
    pub data_labels: PathBuf,
    /// Use only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let data = load_dataset(&self.data_images, &self.data_labels)?;
        Ok(match self.limit {
            Some(n) => data.head(n.min(data.len())),
            None => data,
        })
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Perturbation radius applied to every listed layer.
    #[arg(long)]
    pub eps: f64,
    /// Comma-separated 1-based layers to perturb; all layers when omitted.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated ascending test radii.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_EPS_GRID.to_vec())]
    pub eps: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    /// Samples per attack step; full set when omitted.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Radius for the robust complexity terms.
    #[arg(long, default_value_t = 0.01)]
    pub eps: f64,
    /// Perturbed layer for the single-layer terms.
    #[arg(long, default_value_t = 1)]
    pub layer: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Free-form label stored in the `setting` column.
    #[arg(long, default_value = "")]
    pub setting: String,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bits: u32,
    /// Evaluation images; accuracy columns need both data flags.
    #[arg(long, requires = "data_labels")]
    pub data_images: Option<PathBuf>,
    #[arg(long, requires = "data_images")]
    pub data_labels: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    load_idx(images, labels)
        .with_context(|| format!("loading {} / {}", images.display(), labels.display()))
}

fn load_model(path: &Path) -> Result<Network> {
    load_network(path).with_context(|| format!("loading model {}", path.display()))
}

fn check_dims(net: &Network, data: &Dataset) -> Result<()> {
    if net.input_dim() != data.input_dim() {
        bail!(weightcert::Error::InvalidConfig(format!(
            "model expects {} inputs but the data has {}",
            net.input_dim(),
            data.input_dim()
        )));
    }
    Ok(())
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(weightcert::Error::from)
        .with_context(|| format!("creating {}", dir.display()))
}

/// Training and optional test data for a config, subsampled as requested.
fn load_config_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let (ti, tl) = cfg.train_paths()?;
    let train = load_dataset(ti, tl)?;
    let test = match cfg.test_paths()? {
        Some((i, l)) => {
            let t = load_dataset(i, l)?;
            Some(match cfg.test_subset_size {
                Some(n) => subsample(&t, n, cfg.seed)?,
                None => t,
            })
        }
        None => None,
    };
    Ok((train, test))
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let spec = cfg.network_spec()?;
    let tcfg = cfg.train_config()?;
    let (train, test) = load_config_data(&cfg)?;
    let (net, run) = train_with(&spec, &train, test.as_ref(), &tcfg, |_, rec| {
        println!(
            "epoch {:>3}  loss {:.6}  train_acc {:.4}{}",
            rec.epoch,
            rec.train_loss,
            rec.train_accuracy,
            rec.test_accuracy
                .map_or(String::new(), |a| format!("  test_acc {a:.4}"))
        );
        Ok(())
    })?;
    let out = args.out.clone().unwrap_or(cfg.out_dir);
    create_out(&out)?;
    save_network(&net, out.join("model.json"))?;
    write_run_record(out.join("run.csv"), &run)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn certify(args: &CertifyArgs) -> Result<()> {
    let net = load_model(&args.model)?;
    let data = args.data.load()?;
    check_dims(&net, &data)?;
    let spec = if args.layers.is_empty() {
        PerturbationSpec::all_layers(net.num_layers(), args.eps)?
    } else {
        PerturbationSpec::new(args.layers.iter().map(|&k| (k, args.eps)))?
    };
    let certs = certify_dataset(&net, &data, &spec)?;
    create_out(&args.out)?;
    write_certificates(args.out.join("certificates.csv"), &certs)?;
    println!("certified fraction {:.6}", certified_fraction(&certs));
    Ok(())
}

pub fn attack(args: &AttackArgs) -> Result<()> {
    let net = load_model(&args.model)?;
    let data = args.data.load()?;
    check_dims(&net, &data)?;
    let base = AttackConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        seed: args.seed,
        ..AttackConfig::default()
    };
    let curve = robust_accuracy_sweep_with(&net, &data, &args.eps, &base)?;
    let rows = attack_rows(&curve);
    for r in &rows {
        println!("eps {:<8} accuracy {:.4}", r.eps, r.accuracy);
    }
    create_out(&args.out)?;
    write_rows(args.out.join("attack.csv"), KIND_ATTACK, &rows)?;
    println!("auc {:.6}", curve.auc());
    Ok(())
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let net = load_model(&args.model)?;
    let data = args.data.load()?;
    check_dims(&net, &data)?;
    let stats = bound_statistics(&net);
    let bound = generalization_bound(&net, &data, args.layer, args.eps, args.gamma, args.delta)?;
    let all = PerturbationSpec::all_layers(net.num_layers(), args.eps)?;
    let psi_all = rademacher_psi_term_multi(&net, data.inputs(), &all, data.len())?;
    let row = AnalysisRow {
        model: args.model.display().to_string(),
        setting: args.setting.clone(),
        samples: data.len(),
        accuracy: accuracy(&net, &data)?,
        prod_spectral: stats.prod_spectral,
        spectral_of_product: stats.spectral_of_product,
        log_ratio: stats.log_ratio,
        layer: args.layer,
        eps: args.eps,
        gamma: args.gamma,
        delta: args.delta,
        empirical_risk: bound.empirical_risk,
        margin_complexity: bound.margin_complexity,
        psi_complexity: bound.psi_complexity,
        psi_complexity_all_layers: psi_all,
        confidence: bound.confidence,
        bound_total: bound.total,
    };
    create_out(&args.out)?;
    write_rows(args.out.join("analysis.csv"), KIND_ANALYSIS, &[row.clone()])?;
    println!(
        "prod_spectral {:.6e}  spectral_of_product {:.6e}  log_ratio {:.6}  bound {:.6e}",
        row.prod_spectral, row.spectral_of_product, row.log_ratio, row.bound_total
    );
    Ok(())
}

pub fn quantize_cmd(args: &QuantizeArgs) -> Result<()> {
    let net = load_model(&args.model)?;
    let q = quantize(&net, args.bits)?;
    let data = match (&args.data_images, &args.data_labels) {
        (Some(i), Some(l)) => Some(load_dataset(i, l)?),
        _ => None,
    };
    let max_abs_error = net
        .weights()
        .iter()
        .zip(q.weights())
        .map(|(a, b)| a.max_abs_diff(b).expect("same shapes"))
        .fold(0.0, f64::max);
    let row = match &data {
        Some(d) => {
            check_dims(&net, d)?;
            let (before, after) = (accuracy(&net, d)?, accuracy(&q, d)?);
            println!("accuracy {before:.4} -> {after:.4}");
            Some(QuantizeRow {
                bits: args.bits,
                accuracy: after,
                accuracy_drop: before - after,
                max_abs_error,
            })
        }
        None => None,
    };
    create_out(&args.out)?;
    save_network(&q, args.out.join(format!("model_q{}.json", args.bits)))?;
    if let Some(row) = row {
        write_rows(args.out.join("quantize.csv"), KIND_QUANTIZE, &[row])?;
    }
    println!("max abs weight error {max_abs_error:.6e}");
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let grid = cfg.sweep.clone().unwrap_or_default();
    let spec = cfg.network_spec()?;
    let (train_full, test) = load_config_data(&cfg)?;
    let Some(test) = test else {
        bail!(weightcert::Error::InvalidConfig(
            "sweep needs test_images and test_labels".into()
        ));
    };
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let lambdas = or(&grid.lambda, cfg.lambda);
    let mus = or(&grid.mu, cfg.mu);
    let eps_trains = or(&grid.eps_train, cfg.eps_train);
    let sizes: Vec<Option<usize>> = if grid.train_sizes.is_empty() {
        vec![cfg.subset_size]
    } else {
        grid.train_sizes.iter().map(|&n| Some(n)).collect()
    };
    let seeds = if grid.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        grid.seeds.clone()
    };
    let mut eps_test = grid.eps_test.clone();
    eps_test.sort_by(f64::total_cmp);
    let attack_base = AttackConfig {
        steps: grid.attack_steps,
        ..AttackConfig::default()
    };

    let mut rows = Vec::new();
    for &size in &sizes {
        for &seed in &seeds {
            for &lambda in &lambdas {
                for &mu in &mus {
                    for &eps_train in &eps_trains {
                        let tcfg = cfg.train_config_with(lambda, mu, eps_train, seed, size)?;
                        let train = match size {
                            Some(n) => subsample(&train_full, n, seed)?,
                            None => train_full.clone(),
                        };
                        let (net, _) = train_with(&spec, &train, None, &tcfg, |_, _| Ok(()))?;
                        let stats = bound_statistics(&net);
                        let curve =
                            robust_accuracy_sweep_with(&net, &test, &eps_test, &attack_base)?;
                        for (k, &e) in eps_test.iter().enumerate() {
                            let cfg_e = AttackConfig {
                                eps_test: e,
                                ..attack_base.clone()
                            };
                            let train_acc = accuracy(&weight_pgd(&net, &train, &cfg_e)?, &train)?;
                            let test_acc = curve.points[k].1;
                            rows.push(SweepRow {
                                lambda,
                                mu,
                                eps_train,
                                train_size: train.len(),
                                seed,
                                eps_test: e,
                                train_acc,
                                test_acc,
                                gap: train_acc - test_acc,
                                auc: curve.auc(),
                                prod_spectral: stats.prod_spectral,
                                spectral_of_product: stats.spectral_of_product,
                                log_ratio: stats.log_ratio,
                            });
                        }
                        println!(
                            "lambda {lambda} mu {mu} eps_train {eps_train} n {} seed {seed}: auc {:.4}, norms {:?}",
                            train.len(),
                            curve.auc(),
                            net.weights().iter().map(|w| LayerNorms::of(w).spectral).collect::<Vec<_>>()
                        );
                    }
                }
            }
        }
    }
    let out = args.out.clone().unwrap_or(cfg.out_dir);
    create_out(&out)?;
    write_rows(out.join("sweep.csv"), KIND_SWEEP, &rows)?;
    println!(
        "wrote {} rows to {}",
        rows.len(),
        out.join("sweep.csv").display()
    );
    Ok(())
}
