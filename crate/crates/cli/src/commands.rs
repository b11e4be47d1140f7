use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::Args;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use treefeat::ebm::{optimal_nce_loss, sample_dirichlet_target, train_nce_with, EbmModel, NceTrainConfig};
use treefeat::embed::{embed_dense, embed_two_pass, one_hot_tips, reconstruct_topology, TipFeatures};
use treefeat::math::{logsumexp, unrooted_tree_count};
use treefeat::neural::{GnnConfig, Variant};
use treefeat::phylo::{log_likelihood_grad, parse_fasta, Alignment};
use treefeat::sbn::{build_support, SbnCheckpoint, SbnModel};
use treefeat::tree::{
    enumerate_unrooted, parse_newick, parse_newick_with_lengths, serialize_newick, split_set, splits_of, TaxaSet,
    TreeTopology, MAX_ENUMERATION_TAXA,
};
use treefeat::vbpi::{Annealing, BranchKind, GapConfig, VbpiConfig, VbpiState};

use crate::run::{inside, resolve, ConfigMap, RunDir};
use crate::{Classify, CliError};

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn newick_source(inline: &Option<String>, file: &Option<PathBuf>) -> Result<String, CliError> {
    match (inline, file) {
        (Some(s), None) => Ok(s.clone()),
        (None, Some(p)) => Ok(read(p)?.trim().to_string()),
        _ => Err(CliError::Invalid("give exactly one of --newick and --newick-file".into())),
    }
}

/// Non-empty lines of a file, each one Newick tree.
fn read_tree_list(path: &Path, taxa: Option<Arc<TaxaSet>>) -> Result<Vec<TreeTopology>, CliError> {
    let text = read(path)?;
    let mut taxa = taxa;
    let mut trees = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let t = parse_newick(line, taxa.clone()).invalid()?;
        let t = if t.is_rooted() { t.to_unrooted().invalid()? } else { t };
        taxa.get_or_insert_with(|| t.taxa().clone());
        trees.push(t);
    }
    if trees.is_empty() {
        return Err(CliError::Invalid(format!("{}: no trees", path.display())));
    }
    Ok(trees)
}

fn emit(out: Option<&Path>, command: &str, config: &impl Serialize, name: &str, text: &str) -> Result<(), CliError> {
    match out {
        Some(dir) => {
            let mut run = RunDir::create(dir, command, config)?;
            run.write(name, text)?;
            run.finish()
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn seed_for(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream)
}

// ---------------------------------------------------------------- embed

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    /// Tree in Newick format.
    #[arg(long)]
    newick: Option<String>,
    /// File holding one Newick tree.
    #[arg(long)]
    newick_file: Option<PathBuf>,
    /// `two-pass` (linear time) or `dense` (reference linear solve).
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    #[serde(default)]
    newick: Option<String>,
    #[serde(default)]
    newick_file: Option<PathBuf>,
    #[serde(default = "two_pass")]
    method: String,
    #[serde(default)]
    out: Option<PathBuf>,
}

fn two_pass() -> String {
    "two-pass".into()
}

pub fn embed(args: EmbedArgs, file: ConfigMap) -> Result<(), CliError> {
    let cfg: EmbedConfig = resolve(&args, file)?;
    let tree = parse_newick(&newick_source(&cfg.newick, &cfg.newick_file)?, None).invalid()?;
    let tree = if tree.is_rooted() { tree.to_unrooted().invalid()? } else { tree };
    let tips = one_hot_tips(&tree);
    let x = match cfg.method.as_str() {
        "two-pass" => embed_two_pass(&tree, &tips).failed()?,
        "dense" => embed_dense(&tree, &tips).failed()?,
        m => return Err(CliError::Invalid(format!("unknown method `{m}`"))),
    };
    let mut csv = String::from("node_id,is_leaf,taxon");
    for k in 0..x.dim() {
        write!(csv, ",f_{k}").unwrap();
    }
    csv.push('\n');
    for u in 0..tree.n_nodes() {
        let name = tree.taxon(u).map_or("", |t| tree.taxa().name(t));
        write!(csv, "{u},{},{name}", u8::from(tree.is_leaf(u))).unwrap();
        for v in x.row(u) {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }
    emit(cfg.out.as_deref(), "embed", &cfg, "embedding.csv", &csv)
}

// ---------------------------------------------------------- reconstruct

#[derive(Debug, Args, Serialize)]
pub struct ReconstructArgs {
    /// Embedding CSV as written by `embed` (one-hot tips).
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructConfig {
    features: PathBuf,
    #[serde(default)]
    out: Option<PathBuf>,
}

pub fn reconstruct(args: ReconstructArgs, file: ConfigMap) -> Result<(), CliError> {
    let cfg: ReconstructConfig = resolve(&args, file)?;
    let text = read(&cfg.features)?;
    let bad = |line: usize, what: &str| CliError::Invalid(format!("{} line {line}: {what}", cfg.features.display()));
    let mut leaves = Vec::new();
    let mut interior = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 4 {
            return Err(bad(i + 1, "too few columns"));
        }
        let feats = cols[3..].iter().map(|c| c.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad(i + 1, "bad number"))?;
        if *dim.get_or_insert(feats.len()) != feats.len() {
            return Err(bad(i + 1, "ragged row"));
        }
        match cols[1].trim() {
            "1" => leaves.push((cols[2].trim().to_string(), feats)),
            "0" => interior.push(feats),
            _ => return Err(bad(i + 1, "is_leaf must be 0 or 1")),
        }
    }
    let n = leaves.len();
    if n < 3 || dim != Some(n) {
        return Err(CliError::Invalid("expected at least 3 leaves with one-hot features".into()));
    }
    // Order taxa by the position of their one-hot entry.
    let mut names = vec![String::new(); n];
    for (name, f) in &leaves {
        let k = f.iter().position(|&v| v == 1.0).filter(|_| f.iter().filter(|&&v| v != 0.0).count() == 1);
        let k = k.ok_or_else(|| CliError::Invalid(format!("leaf `{name}` is not one-hot")))?;
        names[k] = name.clone();
    }
    let taxa = Arc::new(TaxaSet::new(names).invalid()?);
    let rows = Array2::from_shape_vec((interior.len(), n), interior.concat()).invalid()?;
    let tree = reconstruct_topology(rows.view(), &TipFeatures::one_hot(n), taxa).failed()?;
    let text = format!("{}\n", serialize_newick(&tree));
    emit(cfg.out.as_deref(), "reconstruct", &cfg, "tree.nwk", &text)
}

// ------------------------------------------------------------ enumerate

#[derive(Debug, Args, Serialize)]
pub struct EnumerateArgs {
    /// Number of taxa (named A, B, C, ...).
    #[arg(long)]
    taxa: Option<usize>,
    /// Print only the number of topologies.
    #[arg(long)]
    count_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnumerateConfig {
    taxa: usize,
    #[serde(default)]
    count_only: bool,
    #[serde(default)]
    out: Option<PathBuf>,
}

pub fn enumerate(args: EnumerateArgs, file: ConfigMap) -> Result<(), CliError> {
    let cfg: EnumerateConfig = resolve(&args, file)?;
    if !(3..=26).contains(&cfg.taxa) {
        return Err(CliError::Invalid("--taxa must be between 3 and 26".into()));
    }
    let text = if cfg.count_only {
        let count = unrooted_tree_count(cfg.taxa).ok_or_else(|| CliError::Invalid("count overflows 64 bits".into()))?;
        format!("{count}\n")
    } else {
        if cfg.taxa > MAX_ENUMERATION_TAXA {
            return Err(CliError::Invalid(format!("listing supports at most {MAX_ENUMERATION_TAXA} taxa; use --count-only")));
        }
        let trees = enumerate_unrooted(Arc::new(TaxaSet::letters(cfg.taxa))).failed()?;
        trees.iter().map(|t| serialize_newick(t) + "\n").collect()
    };
    emit(cfg.out.as_deref(), "enumerate", &cfg, "trees.nwk", &text)
}

// --------------------------------------------------------------- loglik

#[derive(Debug, Args, Serialize)]
pub struct LoglikArgs {
    /// Tree with branch lengths on every edge.
    #[arg(long)]
    newick: Option<String>,
    #[arg(long)]
    newick_file: Option<PathBuf>,
    #[arg(long)]
    fasta: Option<PathBuf>,
    /// Also print the per-edge gradient as CSV.
    #[arg(long)]
    grad: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoglikConfig {
    #[serde(default)]
    newick: Option<String>,
    #[serde(default)]
    newick_file: Option<PathBuf>,
    fasta: PathBuf,
    #[serde(default)]
    grad: bool,
    #[serde(default)]
    out: Option<PathBuf>,
}

fn load_alignment(path: &Path) -> Result<Alignment, CliError> {
    parse_fasta(&read(path)?).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

pub fn loglik(args: LoglikArgs, file: ConfigMap) -> Result<(), CliError> {
    let cfg: LoglikConfig = resolve(&args, file)?;
    let aln = load_alignment(&cfg.fasta)?;
    let (tree, q) = parse_newick_with_lengths(&newick_source(&cfg.newick, &cfg.newick_file)?, Some(aln.taxa().clone())).invalid()?;
    let q = q.ok_or_else(|| CliError::Invalid("the tree needs a branch length on every edge".into()))?;
    if tree.is_rooted() {
        return Err(CliError::Invalid("give an unrooted tree (a trifurcation at the top level)".into()));
    }
    let (value, grad) = log_likelihood_grad(&tree, &q, &aln).failed()?;
    let mut text = format!("{value}\n");
    if cfg.grad {
        text.push_str("edge,clade,length,gradient\n");
        for (e, s) in splits_of(&tree).failed()?.iter().enumerate() {
            let clade: Vec<&str> = s.clade().taxa().map(|t| tree.taxa().name(t)).collect();
            writeln!(text, "{e},{},{},{}", clade.join("+"), q.0[e], grad[e]).unwrap();
        }
    }
    emit(cfg.out.as_deref(), "loglik", &cfg, "loglik.txt", &text)
}

// ------------------------------------------------------------ sbn-check

#[derive(Debug, Args, Serialize)]
pub struct SbnCheckArgs {
    /// Trees defining the support, one Newick per line.
    #[arg(long)]
    trees: Option<PathBuf>,
    /// Sampler draws compared with exact probabilities.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbnCheckConfig {
    trees: PathBuf,
    #[serde(default = "default_samples")]
    samples: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    out: Option<PathBuf>,
}

fn default_samples() -> usize {
    10_000
}

#[derive(Debug, Serialize)]
struct SbnSummary {
    n_taxa: usize,
    input_trees: usize,
    distinct_input_trees: usize,
    root_subsplits: usize,
    parent_child_pairs: usize,
    parameters: usize,
    /// Σ over every enumerated topology (small taxon counts only).
    total_probability: Option<f64>,
    trees_in_support: Option<usize>,
    samples: usize,
    sampler_kl: f64,
}

pub fn sbn_check(args: SbnCheckArgs, file: ConfigMap) -> Result<(), CliError> {
    let cfg: SbnCheckConfig = resolve(&args, file)?;
    let trees = read_tree_list(&cfg.trees, None)?;
    let taxa = trees[0].taxa().clone();
    let support = Arc::new(build_support(&trees).invalid()?);
    let model = SbnModel::uniform(support.clone());
    let distinct = trees.iter().map(split_set).collect::<treefeat::Result<BTreeSet<_>>>().failed()?;

    let (total_probability, trees_in_support) = if taxa.len() <= 8 {
        let all = enumerate_unrooted(taxa.clone()).failed()?;
        let lp: Vec<f64> = all.iter().filter_map(|t| model.log_prob_unrooted(t).ok()).collect();
        (Some(logsumexp(&lp).exp()), Some(lp.len()))
    } else {
        (None, None)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut counts: BTreeMap<_, (usize, f64)> = BTreeMap::new();
    for _ in 0..cfg.samples {
        let t = model.sample_tree(&mut rng).failed()?;
        let lp = model.log_prob_unrooted(&t).failed()?;
        counts.entry(split_set(&t).failed()?).or_insert((0, lp)).0 += 1;
    }
    let n = cfg.samples.max(1) as f64;
    let sampler_kl = counts.values().map(|&(c, lp)| (c as f64 / n) * ((c as f64 / n).ln() - lp)).sum();

    let summary = SbnSummary {
        n_taxa: taxa.len(),
        input_trees: trees.len(),
        distinct_input_trees: distinct.len(),
        root_subsplits: support.root_subsplits().len(),
        parent_child_pairs: support.n_parent_child_pairs(),
        parameters: support.n_params(),
        total_probability,
        trees_in_support,
        samples: cfg.samples,
        sampler_kl,
    };
    let text = serde_json::to_string_pretty(&summary).failed()? + "\n";
    match &cfg.out {
        Some(dir) => {
            let mut run = RunDir::create(dir, "sbn-check", &cfg)?;
            run.write("summary.json", &text)?;
            let path = run.file("sbn.json")?;
            SbnCheckpoint::from_model(&model).save(&path).failed()?;
            run.finish()
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

// ------------------------------------------------------------ ebm-train

#[derive(Debug, Args, Serialize)]
pub struct EbmTrainArgs {
    #[arg(long)]
    taxa: Option<usize>,
    /// Dirichlet concentration of the target.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Message-passing rounds.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Learning-rate multiplier reached at the last step.
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (trace.csv, summary.json, model, manifest).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EbmTrainConfig {
    #[serde(default = "eight")]
    taxa: usize,
    #[serde(default = "default_beta")]
    beta: f64,
    #[serde(default = "ggnn")]
    variant: Variant,
    #[serde(default = "default_hidden")]
    hidden: usize,
    #[serde(default = "two")]
    layers: usize,
    #[serde(default = "default_ebm_steps")]
    steps: usize,
    #[serde(default = "default_batch")]
    batch: usize,
    #[serde(default = "default_ebm_lr")]
    lr: f64,
    #[serde(default = "default_lr_decay")]
    lr_decay: f64,
    #[serde(default = "default_eval_every")]
    eval_every: usize,
    seed: u64,
    out: PathBuf,
}

fn eight() -> usize {
    8
}
fn default_beta() -> f64 {
    0.008
}
fn ggnn() -> Variant {
    Variant::Ggnn
}
fn default_hidden() -> usize {
    32
}
fn two() -> usize {
    2
}
fn default_ebm_steps() -> usize {
    50_000
}
fn default_batch() -> usize {
    128
}
fn default_ebm_lr() -> f64 {
    3e-3
}
fn default_lr_decay() -> f64 {
    0.01
}
fn default_eval_every() -> usize {
    500
}

#[derive(Debug, Serialize)]
struct EbmSummary {
    trees: usize,
    optimal_nce_loss: f64,
    final_nce_loss: f64,
    final_kl: f64,
    final_log_z: f64,
    seconds: f64,
}

pub fn ebm_train(args: EbmTrainArgs, file: ConfigMap) -> Result<(), CliError> {
    let cfg: EbmTrainConfig = resolve(&args, file)?;
    if !(4..=MAX_ENUMERATION_TAXA).contains(&cfg.taxa) {
        return Err(CliError::Invalid(format!("--taxa must be between 4 and {MAX_ENUMERATION_TAXA}")));
    }
    if !(cfg.beta > 0.0) || cfg.hidden == 0 || cfg.steps == 0 {
        return Err(CliError::Invalid("--beta, --hidden and --steps must be positive".into()));
    }
    let train = NceTrainConfig {
        steps: cfg.steps,
        batch: cfg.batch,
        lr: cfg.lr,
        lr_decay: cfg.lr_decay,
        seed: seed_for(cfg.seed, 2),
        eval_every: cfg.eval_every,
    };
    if train.batch == 0 || train.eval_every == 0 || !(train.lr > 0.0) || !(train.lr_decay > 0.0) {
        return Err(CliError::Invalid("--batch, --eval-every, --lr and --lr-decay must be positive".into()));
    }
    let gnn = GnnConfig { layers: cfg.layers, ..GnnConfig::new(cfg.variant, cfg.hidden) };
    let mut run = RunDir::create(&cfg.out, "ebm-train", &cfg)?;
    let table = sample_dirichlet_target(cfg.taxa, cfg.beta, seed_for(cfg.seed, 0)).failed()?;
    let mut model = EbmModel::new(gnn, cfg.taxa, table.len() as f64, seed_for(cfg.seed, 1)).invalid()?;
    let start = Instant::now();
    let mut csv = String::from("step,nce_loss,kl,logZ\n");
    let trace = train_nce_with(&mut model, &table, &train, |r| {
        writeln!(csv, "{},{},{},{}", r.step, r.nce_loss, r.kl, r.log_z).unwrap();
    })
    .failed()?;
    let last = trace.last().expect("the trace has a final record");
    run.write("trace.csv", &csv)?;
    let summary = EbmSummary {
        trees: table.len(),
        optimal_nce_loss: optimal_nce_loss(&table.probs),
        final_nce_loss: last.nce_loss,
        final_kl: last.kl,
        final_log_z: last.log_z,
        seconds: start.elapsed().as_secs_f64(),
    };
    run.write_json("summary.json", &summary)?;
    let base = run.file("model.bin")?.with_extension("");
    run.file("model.json")?;
    model.store.save(&base).failed()?;
    run.finish()
}

// ----------------------------------------------------------- vbpi-train

#[derive(Debug, Args, Serialize)]
pub struct VbpiTrainArgs {
    #[arg(long)]
    fasta: Option<PathBuf>,
    /// File of Newick trees (one per line) or `enumerate`.
    #[arg(long)]
    support: Option<String>,
    /// Branch-length parameterization: split, psp or gnn.
    #[arg(long)]
    branch: Option<BranchKind>,
    /// GNN variant for the gnn parameterization.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Samples in the multi-sample bound.
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr_phi: Option<f64>,
    #[arg(long)]
    lr_psi: Option<f64>,
    /// Initial likelihood weight of the annealing schedule.
    #[arg(long)]
    anneal_initial: Option<f64>,
    /// Updates until the likelihood weight reaches 1 (0 disables annealing).
    #[arg(long)]
    anneal_steps: Option<usize>,
    /// Rows in metrics.csv are averages over this many updates.
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint directory, relative to --out.
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VbpiTrainConfig {
    fasta: PathBuf,
    #[serde(default = "enumerate_support")]
    support: String,
    #[serde(default = "split_kind")]
    branch: BranchKind,
    #[serde(default = "edge")]
    variant: Variant,
    #[serde(default = "default_vbpi_hidden")]
    hidden: usize,
    #[serde(default = "ten")]
    k: usize,
    #[serde(default = "default_vbpi_steps")]
    steps: usize,
    #[serde(default = "default_vbpi_lr")]
    lr_phi: f64,
    #[serde(default = "default_vbpi_lr")]
    lr_psi: f64,
    #[serde(default = "default_anneal_initial")]
    anneal_initial: f64,
    #[serde(default = "default_anneal_steps")]
    anneal_steps: usize,
    #[serde(default = "default_log_every")]
    log_every: usize,
    seed: u64,
    out: PathBuf,
    #[serde(default = "checkpoint_dir")]
    checkpoint_out: PathBuf,
}

fn enumerate_support() -> String {
    "enumerate".into()
}
fn split_kind() -> BranchKind {
    BranchKind::Split
}
fn edge() -> Variant {
    Variant::Edge
}
fn default_vbpi_hidden() -> usize {
    100
}
fn ten() -> usize {
    10
}
fn default_vbpi_steps() -> usize {
    10_000
}
fn default_vbpi_lr() -> f64 {
    1e-3
}
fn default_anneal_initial() -> f64 {
    0.001
}
fn default_anneal_steps() -> usize {
    100_000
}
fn default_log_every() -> usize {
    100
}
fn checkpoint_dir() -> PathBuf {
    PathBuf::from("checkpoint")
}

#[derive(Debug, Serialize)]
struct VbpiTrainSummary {
    support_trees: usize,
    steps: usize,
    final_lambda: f64,
    final_window_elbo: f64,
    seconds: f64,
}

pub fn vbpi_train(args: VbpiTrainArgs, file: ConfigMap) -> Result<(), CliError> {
    let cfg: VbpiTrainConfig = resolve(&args, file)?;
    if cfg.k < 2 || cfg.steps == 0 || cfg.log_every == 0 || cfg.hidden == 0 {
        return Err(CliError::Invalid("--K must be at least 2; --steps, --log-every and --hidden must be positive".into()));
    }
    if !(cfg.anneal_initial > 0.0 && cfg.anneal_initial <= 1.0) {
        return Err(CliError::Invalid("--anneal-initial must be in (0, 1]".into()));
    }
    let ckpt = inside(&cfg.out, &cfg.checkpoint_out)?;
    let aln = load_alignment(&cfg.fasta)?;
    let trees = if cfg.support == "enumerate" {
        if aln.n_taxa() > MAX_ENUMERATION_TAXA {
            return Err(CliError::Invalid(format!("`enumerate` supports at most {MAX_ENUMERATION_TAXA} taxa")));
        }
        enumerate_unrooted(aln.taxa().clone()).invalid()?
    } else {
        read_tree_list(Path::new(&cfg.support), Some(aln.taxa().clone()))?
    };
    let support = Arc::new(build_support(&trees).invalid()?);
    let config = VbpiConfig {
        k: cfg.k,
        lr_phi: cfg.lr_phi,
        lr_psi: cfg.lr_psi,
        annealing: Annealing { initial: cfg.anneal_initial, steps: cfg.anneal_steps },
        branch: cfg.branch,
        gnn: GnnConfig::new(cfg.variant, cfg.hidden),
        seed: seed_for(cfg.seed, 0),
    };
    let mut state = VbpiState::new(support, config).invalid()?;
    let mut run = RunDir::create(&cfg.out, "vbpi-train", &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, 1));
    let start = Instant::now();
    let mut csv = String::from("step,elbo,lambda\n");
    let stats = state
        .train(&aln, cfg.steps, cfg.log_every, &mut rng, |s| {
            writeln!(csv, "{},{},{}", s.step, s.elbo, s.lambda).unwrap();
        })
        .failed()?;
    run.write("metrics.csv", &csv)?;
    state.save(&ckpt).failed()?;
    std::fs::write(ckpt.join("alignment.fasta"), aln.to_fasta()).failed()?;
    let rel = cfg.checkpoint_out.to_string_lossy().into_owned();
    for name in ["sbn.json", "branch.bin", "branch.json", "vbpi.json", "alignment.fasta"] {
        run.file(&format!("{rel}/{name}"))?;
    }
    let last = stats.last().expect("at least one window");
    let summary = VbpiTrainSummary {
        support_trees: trees.len(),
        steps: cfg.steps,
        final_lambda: last.lambda,
        final_window_elbo: last.elbo,
        seconds: start.elapsed().as_secs_f64(),
    };
    run.write_json("summary.json", &summary)?;
    run.finish()
}

// ------------------------------------------------------------ vbpi-eval

#[derive(Debug, Args, Serialize)]
pub struct VbpiEvalArgs {
    /// Directory written by `vbpi-train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Alignment (defaults to the copy stored in the checkpoint).
    #[arg(long)]
    fasta: Option<PathBuf>,
    /// Importance samples per marginal-likelihood estimate.
    #[arg(long)]
    ml_samples: Option<usize>,
    /// Independent marginal-likelihood estimates.
    #[arg(long)]
    ml_runs: Option<usize>,
    /// Single-sample ELBO draws.
    #[arg(long)]
    elbo_samples: Option<usize>,
    /// Trees (one Newick per line) whose amortization gaps are reported.
    #[arg(long)]
    gap_trees: Option<PathBuf>,
    /// Optimization steps per tree for the gap.
    #[arg(long)]
    gap_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VbpiEvalConfig {
    checkpoint: PathBuf,
    #[serde(default)]
    fasta: Option<PathBuf>,
    #[serde(default = "default_ml_samples")]
    ml_samples: usize,
    #[serde(default = "default_ml_runs")]
    ml_runs: usize,
    #[serde(default = "default_elbo_samples")]
    elbo_samples: usize,
    #[serde(default)]
    gap_trees: Option<PathBuf>,
    #[serde(default = "default_gap_steps")]
    gap_steps: usize,
    #[serde(default)]
    seed: u64,
    out: PathBuf,
}

fn default_ml_samples() -> usize {
    1000
}
fn default_ml_runs() -> usize {
    10
}
fn default_elbo_samples() -> usize {
    1000
}
fn default_gap_steps() -> usize {
    2000
}

#[derive(Debug, Serialize)]
struct GapRow {
    tree: String,
    gap: f64,
    amortized_elbo: f64,
    optimized_elbo: f64,
    clipped: bool,
}

#[derive(Debug, Serialize)]
struct VbpiEvalSummary {
    ml_mean: f64,
    ml_std: f64,
    elbo_mean: f64,
    elbo_stderr: f64,
    mean_gap: Option<f64>,
    gaps: Vec<GapRow>,
}

pub fn vbpi_eval(args: VbpiEvalArgs, file: ConfigMap) -> Result<(), CliError> {
    let cfg: VbpiEvalConfig = resolve(&args, file)?;
    if cfg.ml_samples == 0 || cfg.ml_runs == 0 || cfg.elbo_samples == 0 {
        return Err(CliError::Invalid("sample and run counts must be positive".into()));
    }
    let state = VbpiState::load(&cfg.checkpoint).invalid()?;
    let fasta = cfg.fasta.clone().unwrap_or_else(|| cfg.checkpoint.join("alignment.fasta"));
    let aln = load_alignment(&fasta)?;
    if aln.taxa().names() != state.support.taxa().names() {
        return Err(CliError::Invalid("alignment taxa differ from the checkpoint's".into()));
    }
    let gap_trees = match &cfg.gap_trees {
        Some(p) => read_tree_list(p, Some(aln.taxa().clone()))?,
        None => Vec::new(),
    };
    let mut run = RunDir::create(&cfg.out, "vbpi-eval", &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.seed, 0));
    let ml = state.estimate_marginal_likelihood(&aln, cfg.ml_samples, cfg.ml_runs, &mut rng).failed()?;
    let (elbo_mean, elbo_stderr) = state.evaluate_bound(&aln, 1, cfg.elbo_samples, &mut rng).failed()?;
    let gap_cfg = GapConfig { opt_steps: cfg.gap_steps, seed: seed_for(cfg.seed, 1), ..GapConfig::default() };
    let mut gaps = Vec::with_capacity(gap_trees.len());
    let mut csv = String::from("tree,gap,amortized_elbo,optimized_elbo,clipped\n");
    for t in &gap_trees {
        let g = state.amortization_gap(t, &aln, &gap_cfg).invalid()?;
        let nwk = serialize_newick(t);
        writeln!(csv, "{nwk},{},{},{},{}", g.gap, g.amortized_elbo, g.optimized_elbo, g.clipped).unwrap();
        gaps.push(GapRow { tree: nwk, gap: g.gap, amortized_elbo: g.amortized_elbo, optimized_elbo: g.optimized_elbo, clipped: g.clipped });
    }
    let mean_gap = (!gaps.is_empty()).then(|| gaps.iter().map(|g| g.gap).sum::<f64>() / gaps.len() as f64);
    if !gaps.is_empty() {
        run.write("gaps.csv", &csv)?;
    }
    run.write_json("summary.json", &VbpiEvalSummary { ml_mean: ml.mean, ml_std: ml.std, elbo_mean, elbo_stderr, mean_gap, gaps })?;
    run.finish()
}
