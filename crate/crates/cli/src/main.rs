//! `locmap`: batch front end over the mapping and localization stages.
//!
//! Every subcommand reads and writes datastore files only, so a stage can be
//! re-run on its own. Exit status is 0 on success, 1 on a usage error and 2
//! on a data error; failures print one line on stderr.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use locmap::datastore::csv::write_file;
use locmap::localization::{load_results, retrieve, save_results};
use locmap::pairing::{covisibility_pairs, distance_pairs, frustum_pairs, DistancePairingParams, FrustumParams};
use locmap::pipeline::{LocalizationStage, MatchingStage};
use locmap::synth::{GroundTruth, RigSpec};
use locmap::{
    load_dataset, localize_all, postprocess, rgbd_map, run_pipeline, save_dataset, triangulate_map, Dataset,
    PairList, PipelineConfig, Pose, PostprocMode, Profile, Report, SequenceParams, SynthConfig, ThresholdBins,
};

#[derive(Debug, Parser)]
#[command(name = "locmap", version, about = "Structure-based visual localization: mapping, localization and evaluation")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a dataset, check its invariants and print a summary.
    Validate { root: PathBuf },
    /// Build an image-pair shortlist.
    #[command(subcommand)]
    Pairs(PairsCmd),
    /// Match local descriptors over a pair list and store the matches.
    Match(MatchArgs),
    /// Build a 3D map from posed mapping images.
    #[command(subcommand)]
    Map(MapCmd),
    /// Estimate query poses against a mapped dataset.
    Localize(LocalizeArgs),
    /// Complete unlocalized queries from rig members or sequence neighbours.
    Postprocess(PostprocessArgs),
    /// Recall per threshold bin and median errors against ground truth.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic scene with ground truth and a pipeline config.
    Synth(SynthArgs),
    /// Run every stage from one config file.
    Pipeline {
        /// TOML file; relative paths inside resolve against its directory.
        config: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum PairsCmd {
    /// Top-k database images per query by global descriptor similarity.
    Retrieval(RetrievalArgs),
    /// Nearest posed images by combined center and rotation distance.
    Distance(DistanceArgs),
    /// Posed images whose view frusta overlap most.
    Frustum(FrustumArgs),
    /// Map images sharing the most 3D points.
    Covis(CovisArgs),
}

#[derive(Debug, Args)]
struct RetrievalArgs {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    db: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Global descriptor type; repeat to fuse several.
    #[arg(long = "global", value_name = "TYPE")]
    global: Vec<String>,
    /// Fusion operator for several descriptor types.
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DistanceArgs {
    /// Dataset whose posed images are the candidates.
    #[arg(long)]
    mapping: PathBuf,
    /// Posed queries; defaults to the mapping images themselves.
    #[arg(long)]
    query: Option<PathBuf>,
    #[arg(long, default_value_t = DistancePairingParams::default().k)]
    k: usize,
    /// Center distance scale, meters.
    #[arg(long, default_value_t = DistancePairingParams::default().tau_c)]
    tau_c: f64,
    /// Rotation distance scale, degrees.
    #[arg(long, default_value_t = DistancePairingParams::default().tau_r)]
    tau_r: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FrustumArgs {
    #[arg(long)]
    mapping: PathBuf,
    #[arg(long, default_value_t = FrustumParams::default().k)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CovisArgs {
    /// Dataset holding a reconstruction.
    #[arg(long)]
    map: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Matching thresholds on top of a profile.
#[derive(Debug, Clone, Args)]
struct MatchingOpts {
    /// Parameter profile: config1 (strict) or config2 (permissive).
    #[arg(long = "config", default_value = "config1", value_parser = parse_profile)]
    profile: Profile,
    /// Lowe ratio; 1 or more disables the test.
    #[arg(long)]
    ratio: Option<f64>,
    /// Skip the mutual nearest-neighbour check.
    #[arg(long)]
    no_mutual: bool,
    /// Epipolar verification threshold, pixels.
    #[arg(long)]
    epipolar_px: Option<f64>,
}

impl MatchingOpts {
    fn stage(&self) -> MatchingStage {
        MatchingStage { mutual_check: self.no_mutual.then_some(false), ratio: self.ratio, epipolar_px: self.epipolar_px }
    }
}

#[derive(Debug, Args)]
struct MatchArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    /// Keypoint type; optional when the dataset has only one.
    #[arg(long = "type")]
    kind: Option<String>,
    #[command(flatten)]
    matching: MatchingOpts,
    /// Output dataset (default: update in place).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum MapCmd {
    /// Triangulate matched keypoints from the known poses.
    Sfm(SfmArgs),
    /// Back-project keypoints with their depth maps.
    Rgbd(RgbdArgs),
}

#[derive(Debug, Args)]
struct SfmArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[command(flatten)]
    matching: MatchingOpts,
    #[arg(long)]
    min_num_matches: Option<usize>,
    #[arg(long)]
    filter_max_reproj_error: Option<f64>,
    /// Output dataset (default: update in place).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RgbdArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Fuse keypoints linked by the stored matches into one point.
    #[arg(long)]
    merge: bool,
    #[command(flatten)]
    matching: MatchingOpts,
    /// Output dataset (default: update in place).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LocalizeArgs {
    #[arg(long)]
    query: PathBuf,
    /// Mapping dataset holding the reconstruction.
    #[arg(long)]
    map: PathBuf,
    /// Shortlist from `pairs retrieval`; retrieval runs when absent.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[command(flatten)]
    matching: MatchingOpts,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long = "global", value_name = "TYPE")]
    global: Vec<String>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    max_error_px: Option<f64>,
    #[arg(long)]
    min_num_inliers: Option<usize>,
    #[arg(long)]
    min_inlier_ratio: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PostprocessArgs {
    /// rig, seq or rig+seq.
    #[arg(value_parser = parse_mode)]
    mode: PostprocMode,
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    results: PathBuf,
    /// Largest timestamp gap bridged by the sequence pass.
    #[arg(long)]
    max_gap: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    results: PathBuf,
    /// Ground-truth directory from `synth`, or a dataset with query poses.
    #[arg(long)]
    ground_truth: PathBuf,
    /// outdoor, indoor_tight or seven_scenes.
    #[arg(long, default_value = "outdoor")]
    bins: String,
    /// Also write report.txt and report.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().n_points)]
    points: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_map_cams)]
    map_cams: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_query_cams)]
    query_cams: usize,
    #[arg(long, default_value_t = SynthConfig::default().pixel_noise_sigma)]
    pixel_noise: f64,
    #[arg(long, default_value_t = SynthConfig::default().outlier_fraction)]
    outliers: f64,
    /// Render depth maps for the mapping images.
    #[arg(long)]
    depth: bool,
    /// Cameras per rig with their x offsets, e.g. `0.3` for a stereo pair.
    #[arg(long = "rig-baseline", value_name = "METERS")]
    rig_baselines: Vec<f64>,
    /// Noise on the stored mapping poses: meters and degrees.
    #[arg(long, num_args = 2, value_names = ["SIGMA_T", "SIGMA_R"])]
    pose_noise: Option<Vec<f64>>,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<PostprocMode, String> {
    s.parse()
}

/// A failed run, split by exit status.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (Failure::Usage(m) | Failure::Data(m)) = self;
        f.write_str(m)
    }
}

impl From<locmap::Error> for Failure {
    fn from(e: locmap::Error) -> Self {
        // Keep the whole cause chain on the one diagnostic line.
        let mut msg = e.to_string();
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            let text = s.to_string();
            if !msg.contains(&text) {
                msg = format!("{msg}: {text}");
            }
            source = s.source();
        }
        if e.is_usage() {
            Failure::Usage(msg)
        } else {
            Failure::Data(msg)
        }
    }
}

trait OrFail<T> {
    fn or_fail(self) -> Result<T, Failure>;
}

impl<T, E: Into<locmap::Error>> OrFail<T> for Result<T, E> {
    fn or_fail(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::from(e.into()))
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn load(root: &Path) -> Result<Dataset, Failure> {
    load_dataset(root).or_fail()
}

fn save_pairs(pairs: &PairList, out: &Path) -> Result<(), Failure> {
    pairs.save(out).or_fail()?;
    println!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn save_map(ds: &Dataset, root: &Path, out: Option<&PathBuf>) -> Result<(), Failure> {
    let dest = out.map(PathBuf::as_path).unwrap_or(root);
    save_dataset(ds, dest).or_fail()?;
    let points = ds.map.as_ref().map_or(0, |m| m.points.len());
    println!("wrote map with {points} points to {}", dest.display());
    Ok(())
}

fn config_with(profile: Profile, matching: &MatchingOpts) -> PipelineConfig {
    PipelineConfig { profile, matching: matching.stage(), ..Default::default() }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { root } => validate(&root),
        Command::Pairs(cmd) => pairs(cmd),
        Command::Match(a) => match_cmd(a),
        Command::Map(cmd) => map_cmd(cmd),
        Command::Localize(a) => localize(a),
        Command::Postprocess(a) => postprocess_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synth(a) => synth(a),
        Command::Pipeline { config } => pipeline(&config),
    }
}

fn validate(root: &Path) -> Result<(), Failure> {
    let ds = load(root)?;
    let posed = ds.posed_images().iter().filter(|p| p.pose.is_some()).count();
    let kinds: Vec<&str> = ds.features.keypoints.keys().map(String::as_str).collect();
    let globals: Vec<&str> = ds.features.global_features.keys().map(String::as_str).collect();
    println!(
        "{}: ok; {} cameras, {} rigs, {} images ({posed} posed), {} depth maps, keypoints [{}], global [{}], {} map points",
        root.display(),
        ds.cameras.len(),
        ds.rigs.len(),
        ds.image_records.len(),
        ds.depth_records.len(),
        kinds.join(", "),
        globals.join(", "),
        ds.map.as_ref().map_or(0, |m| m.points.len()),
    );
    Ok(())
}

fn pairs(cmd: PairsCmd) -> Result<(), Failure> {
    match cmd {
        PairsCmd::Retrieval(a) => {
            let (query, db) = (load(&a.query)?, load(&a.db)?);
            let cfg = PipelineConfig {
                localization: LocalizationStage { k: a.k, global: a.global, fusion: a.fusion, ..Default::default() },
                ..Default::default()
            };
            let list = retrieve(&query, &db, &cfg.localize_params()?).or_fail()?;
            save_pairs(&list, &a.out)
        }
        PairsCmd::Distance(a) => {
            let db = load(&a.mapping)?;
            let candidates = db.posed_images();
            let queries = match &a.query {
                Some(q) => load(q)?.posed_images(),
                None => candidates.clone(),
            };
            let params = DistancePairingParams { k: a.k, tau_c: a.tau_c, tau_r: a.tau_r };
            save_pairs(&distance_pairs(&queries, &candidates, &params).or_fail()?, &a.out)
        }
        PairsCmd::Frustum(a) => {
            let db = load(&a.mapping)?;
            let params = FrustumParams { k: a.k, ..Default::default() };
            save_pairs(&frustum_pairs(&db.posed_images(), &params).or_fail()?, &a.out)
        }
        PairsCmd::Covis(a) => {
            if a.k == 0 {
                return Err(usage("k must be at least 1"));
            }
            let db = load(&a.map)?;
            let map = db.map.as_ref().ok_or_else(|| Failure::Data(format!("{}: no reconstruction", a.map.display())))?;
            save_pairs(&covisibility_pairs(map, a.k), &a.out)
        }
    }
}

fn match_cmd(a: MatchArgs) -> Result<(), Failure> {
    let mut ds = load(&a.dataset)?;
    let pairs = PairList::load(&a.pairs).or_fail()?;
    let params = config_with(a.matching.profile, &a.matching).match_params()?;
    let kind = match a.kind {
        Some(k) => k,
        None => ds
            .features
            .default_keypoints_type()
            .ok_or_else(|| usage("name the keypoint type with --type (the dataset has none or several)"))?
            .to_string(),
    };
    let desc = ds
        .features
        .descriptors
        .get(&kind)
        .ok_or_else(|| Failure::Data(format!("no `{kind}` descriptors in {}", a.dataset.display())))?;
    let matches = locmap::matching::match_image_pairs(desc, &pairs, &params).or_fail()?;
    let total: usize = matches.values().map(Vec::len).sum();
    let n = matches.len();
    ds.features.matches.insert(kind, matches);
    let dest = a.out.as_ref().unwrap_or(&a.dataset);
    save_dataset(&ds, dest).or_fail()?;
    println!("wrote {total} matches over {n} pairs to {}", dest.display());
    Ok(())
}

fn map_cmd(cmd: MapCmd) -> Result<(), Failure> {
    match cmd {
        MapCmd::Sfm(a) => {
            let mut ds = load(&a.dataset)?;
            let pairs = PairList::load(&a.pairs).or_fail()?;
            let mut cfg = config_with(a.matching.profile, &a.matching);
            cfg.mapping.min_num_matches = a.min_num_matches;
            cfg.mapping.filter_max_reproj_error = a.filter_max_reproj_error;
            let map = triangulate_map(&ds, &pairs, &cfg.match_params()?, &cfg.mapper_config()?).or_fail()?;
            ds.map = Some(map);
            save_map(&ds, &a.dataset, a.out.as_ref())
        }
        MapCmd::Rgbd(a) => {
            let mut ds = load(&a.dataset)?;
            let cfg = config_with(a.matching.profile, &a.matching);
            ds.map = Some(rgbd_map(&ds, &cfg.match_params()?, a.merge).or_fail()?);
            save_map(&ds, &a.dataset, a.out.as_ref())
        }
    }
}

fn localize(a: LocalizeArgs) -> Result<(), Failure> {
    let (query, db) = (load(&a.query)?, load(&a.map)?);
    let mut cfg = config_with(a.matching.profile, &a.matching);
    cfg.localization = LocalizationStage {
        k: a.k,
        global: a.global,
        fusion: a.fusion,
        max_error_px: a.max_error_px,
        min_num_inliers: a.min_num_inliers,
        min_inlier_ratio: a.min_inlier_ratio,
        max_iterations: a.max_iterations,
        seed: a.seed,
        ..Default::default()
    };
    let params = cfg.localize_params()?;
    let pairs = a.pairs.as_deref().map(PairList::load).transpose().or_fail()?;
    let results = localize_all(&query, &db, pairs.as_ref(), &params).or_fail()?;
    save_results(&a.out, &results).or_fail()?;
    let ok = results.iter().filter(|r| r.is_localized()).count();
    println!("localized {ok}/{} queries; results in {}", results.len(), a.out.display());
    Ok(())
}

fn postprocess_cmd(a: PostprocessArgs) -> Result<(), Failure> {
    let query = load(&a.query)?;
    let results = load_results(&a.results).or_fail()?;
    let before = results.iter().filter(|r| r.is_localized()).count();
    let out = postprocess(&results, &query, a.mode, &SequenceParams { max_gap: a.max_gap });
    save_results(&a.out, &out).or_fail()?;
    let after = out.iter().filter(|r| r.is_localized()).count();
    println!("localized {before} -> {after} of {} queries; results in {}", out.len(), a.out.display());
    Ok(())
}

/// Poses from a `synth` ground-truth directory or from a dataset.
fn ground_truth_poses(path: &Path) -> Result<BTreeMap<String, Pose>, Failure> {
    if path.join(locmap::datastore::TRAJECTORIES_FILE).is_file() {
        let ds = load(path)?;
        return Ok(ds.posed_images().into_iter().filter_map(|p| Some((p.path, p.pose?))).collect());
    }
    Ok(GroundTruth::load(path).or_fail()?.poses)
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let bins: ThresholdBins = a.bins.parse().or_fail()?;
    let results = load_results(&a.results).or_fail()?;
    let gt = ground_truth_poses(&a.ground_truth)?;
    let report = Report::build(&results, &gt, &bins, |_| "all".to_string()).or_fail()?;
    print!("{}", report.to_text());
    if let Some(dir) = &a.out {
        write_file(&dir.join("report.txt"), report.to_text().as_bytes()).or_fail()?;
        write_file(&dir.join("report.csv"), report.to_csv().as_bytes()).or_fail()?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), Failure> {
    let pose_noise = a.pose_noise.map(|v| (v[0], v[1]));
    let rig_spec = (!a.rig_baselines.is_empty())
        .then(|| RigSpec { n_cams: a.rig_baselines.len() + 1, baselines: a.rig_baselines.clone() });
    let cfg = SynthConfig {
        seed: a.seed,
        n_points: a.points,
        n_map_cams: a.map_cams,
        n_query_cams: a.query_cams,
        pixel_noise_sigma: a.pixel_noise,
        outlier_fraction: a.outliers,
        depth_render: a.depth,
        rig_spec,
        pose_noise,
        ..Default::default()
    };
    let scene = locmap::generate_scene(&cfg).or_fail()?;
    scene.save(&a.out).or_fail()?;
    write_file(&a.out.join("pipeline.toml"), PipelineConfig::synthetic().to_toml().as_bytes()).or_fail()?;
    println!(
        "wrote {} mapping and {} query images to {}",
        scene.mapping.image_records.len(),
        scene.query.image_records.len(),
        a.out.display()
    );
    Ok(())
}

fn pipeline(config: &Path) -> Result<(), Failure> {
    let cfg = PipelineConfig::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let out = run_pipeline(&cfg, base)?;
    println!("results in {}", out.results.display());
    if let Some(report) = &out.report {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("LOCMAP_LOG", "error");
    // A second init (only possible in tests) is harmless.
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(1);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
