//! Whole-run configuration file and a runner chaining mapping,
//! localization, post-processing and evaluation. Every stage writes
//! datastore formats under the output directory, so any stage can be
//! re-run on its own from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::datastore::{csv::write_file, load_dataset, save_dataset, Dataset, ReconstructedMap};
use crate::evaluation::{Report, ThresholdBins};
use crate::fusion::{FusionMethod, FusionParams};
use crate::localization::{localize_all, save_results, LocalizationResult, LocalizeParams, PnPConfig};
use crate::mapping::{rgbd_map, triangulate_map, MapperConfig};
use crate::matching::MatchParams;
use crate::pairing::{distance_pairs, frustum_pairs, DistancePairingParams, FrustumParams, PairList, RetrievalParams};
use crate::postproc::{postprocess, PostprocMode, SequenceParams};
use crate::profile::Profile;
use crate::synth::{GroundTruth, GLOBAL_TYPE};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Relative paths are resolved against the config file's directory.
    pub mapping: PathBuf,
    pub query: PathBuf,
    pub output: PathBuf,
    pub ground_truth: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { mapping: "mapping".into(), query: "query".into(), output: "output".into(), ground_truth: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMethod {
    #[default]
    Sfm,
    Rgbd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapPairing {
    #[default]
    Distance,
    Frustum,
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingStage {
    pub method: MapMethod,
    pub pairing: MapPairing,
    pub k: usize,
    pub tau_c: f64,
    pub tau_r: f64,
    pub min_num_matches: Option<usize>,
    pub filter_max_reproj_error: Option<f64>,
    /// RGBD only: fuse keypoints linked by stored matches into one point.
    pub rgbd_merge: bool,
}

impl Default for MappingStage {
    fn default() -> Self {
        let d = DistancePairingParams::default();
        Self {
            method: MapMethod::Sfm,
            pairing: MapPairing::Distance,
            k: d.k,
            tau_c: d.tau_c,
            tau_r: d.tau_r,
            min_num_matches: None,
            filter_max_reproj_error: None,
            rgbd_merge: true,
        }
    }
}

/// Overrides of the profile's matching parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingStage {
    pub mutual_check: Option<bool>,
    /// A ratio of 1 or more switches the ratio test off.
    pub ratio: Option<f64>,
    pub epipolar_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationStage {
    pub k: usize,
    /// Global descriptor types; several are fused. Empty picks the only one.
    pub global: Vec<String>,
    pub fusion: Option<String>,
    pub fusion_beta: Option<f64>,
    pub fusion_gamma: Option<f64>,
    pub fusion_weights: Option<Vec<f64>>,
    pub max_error_px: Option<f64>,
    pub min_num_inliers: Option<usize>,
    pub min_inlier_ratio: Option<f64>,
    pub confidence: Option<f64>,
    pub max_iterations: Option<usize>,
    pub seed: u64,
}

impl Default for LocalizationStage {
    fn default() -> Self {
        Self {
            k: RetrievalParams::default().k,
            global: Vec::new(),
            fusion: None,
            fusion_beta: None,
            fusion_gamma: None,
            fusion_weights: None,
            max_error_px: None,
            min_num_inliers: None,
            min_inlier_ratio: None,
            confidence: None,
            max_iterations: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessStage {
    /// `none`, `rig`, `seq` or `rig+seq`.
    pub mode: String,
    pub max_gap: Option<u64>,
}

impl Default for PostprocessStage {
    fn default() -> Self {
        Self { mode: "none".into(), max_gap: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationStage {
    /// `outdoor`, `indoor_tight` or `seven_scenes`.
    pub bins: String,
}

impl Default for EvaluationStage {
    fn default() -> Self {
        Self { bins: "outdoor".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub paths: PathsConfig,
    pub mapping: MappingStage,
    pub matching: MatchingStage,
    pub localization: LocalizationStage,
    pub postprocess: PostprocessStage,
    pub evaluation: EvaluationStage,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e: toml::de::Error| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            Error::Config(match line {
                Some(l) => format!("line {l}: {}", e.message()),
                None => e.message().to_string(),
            })
        })
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Config written next to a synthetic scene: config2 gates, ratio test
    /// on, ground truth evaluated.
    pub fn synthetic() -> Self {
        Self {
            profile: Profile::Config2,
            paths: PathsConfig { ground_truth: Some("ground_truth".into()), ..Default::default() },
            matching: MatchingStage { ratio: Some(0.8), ..Default::default() },
            localization: LocalizationStage { global: vec![GLOBAL_TYPE.into()], ..Default::default() },
            ..Default::default()
        }
    }

    pub fn match_params(&self) -> Result<MatchParams, Error> {
        let mut p = MatchParams::preset(self.profile);
        let m = &self.matching;
        if let Some(v) = m.mutual_check {
            p.mutual_check = v;
        }
        if let Some(r) = m.ratio {
            p.ratio = (r < 1.0).then_some(r);
        }
        if let Some(v) = m.epipolar_px {
            p.epipolar_px = v;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn mapper_config(&self) -> Result<MapperConfig, Error> {
        let mut c = MapperConfig::preset(self.profile);
        if let Some(v) = self.mapping.min_num_matches {
            c.min_num_matches = v;
        }
        if let Some(v) = self.mapping.filter_max_reproj_error {
            c.filter_max_reproj_error = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn pnp_config(&self) -> Result<PnPConfig, Error> {
        let l = &self.localization;
        let base = PnPConfig::preset(self.profile);
        let c = PnPConfig {
            max_error_px: l.max_error_px.unwrap_or(base.max_error_px),
            min_num_inliers: l.min_num_inliers.unwrap_or(base.min_num_inliers),
            min_inlier_ratio: l.min_inlier_ratio.unwrap_or(base.min_inlier_ratio),
            confidence: l.confidence.unwrap_or(base.confidence),
            max_iterations: l.max_iterations.unwrap_or(base.max_iterations),
            seed: l.seed,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn fusion_params(&self) -> Result<Option<FusionParams>, Error> {
        let l = &self.localization;
        let Some(method) = &l.fusion else { return Ok(None) };
        let method: FusionMethod = method.parse().map_err(|e: crate::fusion::FusionError| Error::Config(e.to_string()))?;
        let mut p = FusionParams::new(method);
        if let Some(b) = l.fusion_beta {
            p.beta = b;
        }
        if let Some(g) = l.fusion_gamma {
            p.gamma = g;
        }
        if method == FusionMethod::Gharm {
            p.alpha = l.fusion_weights.clone();
        } else {
            p.rho = l.fusion_weights.clone();
        }
        Ok(Some(p))
    }

    pub fn localize_params(&self) -> Result<LocalizeParams, Error> {
        let l = &self.localization;
        let (first, rest) = match l.global.split_first() {
            Some((f, r)) => (f.clone(), r.to_vec()),
            None => (String::new(), Vec::new()),
        };
        Ok(LocalizeParams {
            retrieval: RetrievalParams { k: l.k, descriptor_type: first },
            extra_descriptor_types: rest,
            fusion: self.fusion_params()?,
            matching: self.match_params()?,
            pnp: self.pnp_config()?,
        })
    }

    pub fn postproc_mode(&self) -> Result<Option<PostprocMode>, Error> {
        match self.postprocess.mode.as_str() {
            "none" | "" => Ok(None),
            m => m.parse().map(Some).map_err(Error::Config),
        }
    }

    pub fn bins(&self) -> Result<ThresholdBins, Error> {
        Ok(self.evaluation.bins.parse()?)
    }
}

/// Image pairs for building the map.
pub fn mapping_pairs(ds: &Dataset, stage: &MappingStage) -> Result<PairList, Error> {
    let posed = ds.posed_images();
    Ok(match stage.pairing {
        MapPairing::Distance => {
            let p = DistancePairingParams { tau_c: stage.tau_c, tau_r: stage.tau_r, k: stage.k };
            distance_pairs(&posed, &posed, &p)?
        }
        MapPairing::Frustum => frustum_pairs(&posed, &FrustumParams { k: stage.k, ..Default::default() })?,
        MapPairing::Exhaustive => {
            let mut l = PairList::new();
            for (i, a) in posed.iter().enumerate() {
                for b in &posed[i + 1..] {
                    l.push(a.path.clone(), b.path.clone(), 0.0);
                }
            }
            l
        }
    })
}

pub fn build_map(ds: &Dataset, pairs: &PairList, cfg: &PipelineConfig) -> Result<ReconstructedMap, Error> {
    let mp = cfg.match_params()?;
    Ok(match cfg.mapping.method {
        MapMethod::Sfm => triangulate_map(ds, pairs, &mp, &cfg.mapper_config()?)?,
        MapMethod::Rgbd => rgbd_map(ds, &mp, cfg.mapping.rgbd_merge)?,
    })
}

/// Files produced by [`run_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutputs {
    pub mapping_pairs: PathBuf,
    pub map: PathBuf,
    pub query_pairs: PathBuf,
    pub results: PathBuf,
    pub postprocessed: Option<PathBuf>,
    pub report_text: Option<PathBuf>,
    pub report_csv: Option<PathBuf>,
    pub report: Option<Report>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Runs every stage with paths resolved against `base`.
pub fn run_pipeline(cfg: &PipelineConfig, base: &Path) -> Result<PipelineOutputs, Error> {
    let out = resolve(base, &cfg.paths.output);
    fs::create_dir_all(&out).map_err(|e| crate::datastore::DatastoreError::Io { path: out.clone(), source: e })?;

    let mut db = load_dataset(&resolve(base, &cfg.paths.mapping))?;
    let query = load_dataset(&resolve(base, &cfg.paths.query))?;

    let pairs = mapping_pairs(&db, &cfg.mapping)?;
    let mapping_pairs = out.join("pairs_mapping.txt");
    pairs.save(&mapping_pairs)?;
    info!("mapping pairs: {}", pairs.len());

    let map = build_map(&db, &pairs, cfg)?;
    info!("map: {} points", map.points.len());
    db.map = Some(map);
    let map_dir = out.join("map");
    save_dataset(&db, &map_dir)?;

    let params = cfg.localize_params()?;
    let query_pairs_list = crate::localization::retrieve(&query, &db, &params)?;
    let query_pairs = out.join("pairs_query.txt");
    query_pairs_list.save(&query_pairs)?;
    let results = localize_all(&query, &db, Some(&query_pairs_list), &params)?;
    info!("localized {}/{}", results.iter().filter(|r| r.is_localized()).count(), results.len());
    let results_path = out.join("results.txt");
    save_results(&results_path, &results)?;

    let mut final_results: Vec<LocalizationResult> = results;
    let mut postprocessed = None;
    if let Some(mode) = cfg.postproc_mode()? {
        final_results = postprocess(&final_results, &query, mode, &SequenceParams { max_gap: cfg.postprocess.max_gap });
        let p = out.join("results_postprocessed.txt");
        save_results(&p, &final_results)?;
        postprocessed = Some(p);
    }

    let (mut report_text, mut report_csv, mut report) = (None, None, None);
    if let Some(gt_dir) = &cfg.paths.ground_truth {
        let gt = GroundTruth::load(&resolve(base, gt_dir))?;
        let r = Report::build(&final_results, &gt.poses, &cfg.bins()?, |_| "all".to_string())?;
        let (t, c) = (out.join("report.txt"), out.join("report.csv"));
        write_file(&t, r.to_text().as_bytes())?;
        write_file(&c, r.to_csv().as_bytes())?;
        report_text = Some(t);
        report_csv = Some(c);
        report = Some(r);
    }
    Ok(PipelineOutputs {
        mapping_pairs,
        map: map_dir,
        query_pairs,
        results: results_path,
        postprocessed,
        report_text,
        report_csv,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SynthConfig};

    #[test]
    fn synthetic_config_round_trips_through_toml() {
        let cfg = PipelineConfig::synthetic();
        assert_eq!(PipelineConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn empty_file_is_config1_defaults() {
        let cfg = PipelineConfig::parse("").unwrap();
        assert_eq!(cfg.profile, Profile::Config1);
        assert_eq!(cfg.pnp_config().unwrap(), PnPConfig::config1());
        assert_eq!(cfg.match_params().unwrap(), MatchParams::config1());
        assert_eq!(cfg.postproc_mode().unwrap(), None);
    }

    #[test]
    fn overrides_apply_on_top_of_profile() {
        let cfg = PipelineConfig::parse(
            "profile = \"config2\"\n[localization]\nmin_num_inliers = 9\nfusion = \"wmp\"\nfusion_beta = 1.0\n[matching]\nratio = 1.0\n",
        )
        .unwrap();
        let p = cfg.pnp_config().unwrap();
        assert_eq!((p.min_num_inliers, p.max_error_px), (9, 20.0));
        assert_eq!(cfg.match_params().unwrap().ratio, None);
        assert_eq!(cfg.fusion_params().unwrap().unwrap().beta, 1.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(PipelineConfig::parse("bogus = 1"), Err(Error::Config(_))));
        let cfg = PipelineConfig::parse("[postprocess]\nmode = \"sideways\"").unwrap();
        assert!(cfg.postproc_mode().is_err());
        let cfg = PipelineConfig::parse("[localization]\nmin_inlier_ratio = 2.0").unwrap();
        assert!(cfg.pnp_config().is_err());
    }

    #[test]
    fn runs_end_to_end_and_is_repeatable() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(&SynthConfig { seed: 5, n_points: 600, n_map_cams: 12, n_query_cams: 3, ..Default::default() }).unwrap();
        scene.save(dir.path()).unwrap();
        let cfg = PipelineConfig::synthetic();
        let first = run_pipeline(&cfg, dir.path()).unwrap();
        let report = first.report.clone().unwrap();
        assert_eq!(report.conditions[0].num_queries, 3);
        assert_eq!(report.conditions[0].recall, vec![100.0; 3]);
        let bytes = |p: &Path| fs::read(p).unwrap();
        let before = (bytes(&first.results), bytes(first.report_csv.as_ref().unwrap()), bytes(&first.mapping_pairs));
        let second = run_pipeline(&cfg, dir.path()).unwrap();
        let after = (bytes(&second.results), bytes(second.report_csv.as_ref().unwrap()), bytes(&second.mapping_pairs));
        assert_eq!(before, after);
    }
}
